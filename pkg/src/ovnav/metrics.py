"""Navigation metrics: success rate, SPL, per-category breakdowns.

SPL weights each success by the ratio of the oracle shortest path to the
path actually walked, so a win along a detour counts less than a direct
one: spl = (1/N) * sum_i S_i * l_i / max(p_i, l_i). Per episode that
weight is at most the success indicator, which gives the report its
invariant spl <= success_rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import ConfigurationError, DataError


def compute_spl(episodes) -> float:
    """episodes: iterable of (success, path_length p, shortest_length l).

    Requires p >= 0 and l > 0 (a goal at the start pose still has one
    cell of shortest path by construction); violations raise DataError.
    """
    total, n = 0.0, 0
    for success, p, l in episodes:
        if not l > 0:
            raise DataError(f"shortest path must be positive, got {l}")
        if p < 0:
            raise DataError(f"path length must be nonnegative, got {p}")
        total += (l / max(p, l) if success else 0.0)
        n += 1
    if n == 0:
        raise DataError("cannot compute SPL of zero episodes")
    return total / n


@dataclass(frozen=True)
class EpisodeResult:
    """One evaluated episode, everything the metrics need."""

    scene_seed: int
    episode_index: int
    category: str
    success: bool
    path_length: float
    shortest_path: float
    steps: int


@dataclass(frozen=True)
class CategoryStats:
    episodes: int
    success_rate: float
    spl: float


@dataclass(frozen=True)
class MetricsReport:
    episodes: int
    success_rate: float
    spl: float
    mean_steps: float
    per_category: dict[str, CategoryStats] = field(default_factory=dict)
    config_echo: str = ""
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        if not (0.0 <= self.spl <= self.success_rate + 1e-12 <= 1.0 + 1e-12):
            raise ConfigurationError(
                f"spl {self.spl} must lie in [0, success_rate={self.success_rate}]"
            )
        if sum(s.episodes for s in self.per_category.values()) != self.episodes:
            raise ConfigurationError("per-category counts do not sum to episodes")


def build_report(results: list[EpisodeResult], config_echo: str = "",
                 seeds: tuple[int, ...] = ()) -> MetricsReport:
    if not results:
        raise DataError("cannot build a report from zero episodes")
    triples = [(r.success, r.path_length, r.shortest_path) for r in results]
    per_cat: dict[str, CategoryStats] = {}
    for name in sorted({r.category for r in results}):
        sub = [r for r in results if r.category == name]
        per_cat[name] = CategoryStats(
            episodes=len(sub),
            success_rate=sum(r.success for r in sub) / len(sub),
            spl=compute_spl(
                [(r.success, r.path_length, r.shortest_path) for r in sub]),
        )
    return MetricsReport(
        episodes=len(results),
        success_rate=sum(r.success for r in results) / len(results),
        spl=compute_spl(triples),
        mean_steps=sum(r.steps for r in results) / len(results),
        per_category=per_cat,
        config_echo=config_echo,
        seeds=tuple(seeds),
    )


def format_report(report: MetricsReport) -> str:
    """Key=value text block; per-category rows are prefixed, the config
    echo rides along as comment lines so every artifact is reproducible."""
    lines = [
        f"episodes={report.episodes}",
        f"success_rate={report.success_rate:.6f}",
        f"spl={report.spl:.6f}",
        f"mean_steps={report.mean_steps:.6f}",
        f"seeds={','.join(str(s) for s in report.seeds)}",
    ]
    for name, s in report.per_category.items():
        lines.append(f"category.{name}={s.episodes},{s.success_rate:.6f},{s.spl:.6f}")
    for raw in report.config_echo.splitlines():
        lines.append(f"# {raw}")
    return "\n".join(lines) + "\n"


def write_reports_csv(path, rows: list[tuple[dict, MetricsReport]]) -> None:
    """CSV table of reports; ``rows`` pairs a label dict (the grid point)
    with its report. All rows must share the same label keys. The config
    echo of the first row is embedded as leading comment lines."""
    if not rows:
        raise DataError("no report rows to write")
    keys = list(rows[0][0].keys())
    for labels, _ in rows:
        if list(labels.keys()) != keys:
            raise DataError("report rows disagree on label columns")
    with open(path, "w", newline="") as fh:
        for raw in rows[0][1].config_echo.splitlines():
            fh.write(f"# {raw}\n")
        writer = csv.writer(fh)
        writer.writerow(keys + ["episodes", "success_rate", "spl", "mean_steps"])
        for labels, rep in rows:
            writer.writerow([labels[k] for k in keys]
                            + [rep.episodes, f"{rep.success_rate:.6f}",
                               f"{rep.spl:.6f}", f"{rep.mean_steps:.6f}"])


def read_reports_csv(path) -> list[dict]:
    """Rows back as dicts (strings preserved for label columns, floats for
    metric columns); comment lines are skipped."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh)
                    if r and not r[0].lstrip().startswith("#")]
    except OSError as e:
        raise DataError(f"{path}: unreadable metrics table: {e}") from e
    if not rows:
        raise DataError(f"{path}: empty metrics table")
    header = rows[0]
    need = {"episodes", "success_rate", "spl", "mean_steps"}
    if not need.issubset(header):
        raise DataError(f"{path}: missing metric columns {need - set(header)}")
    out = []
    for row in rows[1:]:
        if len(row) != len(header):
            raise DataError(f"{path}: ragged row {row}")
        d = dict(zip(header, row))
        d["episodes"] = int(d["episodes"])
        for k in ("success_rate", "spl", "mean_steps"):
            d[k] = float(d[k])
        out.append(d)
    return out

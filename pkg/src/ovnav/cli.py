"""Command-line front end.

Subcommands cover the full experiment pipeline: ``gen-scenes`` writes a
held-out scene/episode suite, ``collect-maps`` gathers training snapshots,
``train`` fits the long-term-goal policy, ``eval`` scores a policy (or the
frontier baseline) over a suite, ``ablate`` sweeps token resolution and
inference map type, and ``demo`` rolls one episode and dumps its
trajectory and map snapshots for offline plotting.

Failures exit nonzero with one JSON object on stderr carrying the
machine-readable error class; exit codes are stable per class.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_echo, load_config, save_config
from .errors import ConfigurationError, DataError, OvnavError
from .harness import (
    build_training_set,
    make_eval_suite,
    run_ablations,
    run_episode,
    run_eval,
)
from .metrics import format_report
from .policy import load_checkpoint, save_checkpoint
from .sim.engine import generate_episode, load_episodes, save_episodes
from .sim.scenes import generate_scene, load_scene_set, save_scene_set
from .training import save_loss_curve


def _load_cfg(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _load_suite(args, cfg):
    vocab = cfg.vocabulary()
    scene_cfg, seeds = load_scene_set(args.scenes)
    if scene_cfg != cfg.scene_config():
        raise ConfigurationError(
            "scene set was generated under a different scene geometry")
    scenes = [generate_scene(scene_cfg, vocab, s) for s in seeds]
    episodes = load_episodes(args.episodes, vocab)
    return vocab, scenes, episodes


def cmd_gen_scenes(args) -> int:
    cfg = _load_cfg(args)
    vocab = cfg.vocabulary()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes, episodes = make_eval_suite(cfg, vocab, modality=args.modality)
    save_scene_set(out / "scenes.txt", cfg.scene_config(),
                   [s.seed for s in scenes])
    save_episodes(out / "episodes.txt", episodes, vocab)
    save_config(out / "config.txt", cfg)
    print(f"wrote {len(scenes)} scenes, {len(episodes)} episodes to {out}")
    return 0


def cmd_collect_maps(args) -> int:
    from .collect import collect_scene_maps, save_run

    cfg = _load_cfg(args)
    vocab = cfg.vocabulary()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.txt", cfg)
    for i in range(cfg.train_scenes):
        seed = cfg.train_scene_seed + i
        scene = generate_scene(cfg.scene_config(), vocab, seed)
        run = collect_scene_maps(scene, vocab, cfg.collect_config())
        save_run(out / f"run_{seed}.npz", run)
        if (i + 1) % 25 == 0 or i + 1 == cfg.train_scenes:
            print(f"collected {i + 1}/{cfg.train_scenes}")
    return 0


def cmd_train(args) -> int:
    from .collect import load_run, runs_to_samples
    from .harness import train_policy

    cfg = _load_cfg(args)
    vocab = cfg.vocabulary()
    if args.maps:
        paths = sorted(Path(args.maps).glob("run_*.npz"))
        if not paths:
            raise DataError(f"no collected runs under {args.maps}")
        samples = runs_to_samples([load_run(p) for p in paths], vocab)
    else:
        print("no --maps directory given; collecting training maps inline")
        samples = build_training_set(cfg, vocab, log=print)
    print(f"training on {len(samples)} samples")
    model, curve = train_policy(cfg, samples, vocab, patch=args.patch)
    save_checkpoint(args.out, model)
    save_config(str(args.out) + ".config", cfg)
    if args.curve:
        save_loss_curve(args.curve, curve)
    print(f"final loss {curve[-1][2]:.5f} after {len(curve)} steps -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    vocab, scenes, episodes = _load_suite(args, cfg)
    model = load_checkpoint(args.model) if args.model else None
    if (cfg.policy if args.policy is None else args.policy) == "ovexp" \
            and model is None:
        raise ConfigurationError("eval with the ovexp policy needs --model")
    report, _ = run_eval(cfg, scenes, episodes, vocab, model=model,
                         mode=args.policy, map_type=args.map_type,
                         dump_dir=args.dump_dir)
    text = format_report(report)
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    vocab, scenes, episodes = _load_suite(args, cfg)
    models = {}
    for spec in args.model:
        patch, _, path = spec.partition("=")
        try:
            key = int(patch)
        except ValueError as e:
            raise ConfigurationError(
                f"--model expects PATCH=CHECKPOINT, got {spec!r}") from e
        models[key] = load_checkpoint(path)
    rows = run_ablations(cfg, models, scenes, episodes, vocab,
                         out_csv=args.out)
    for labels, rep in rows:
        name = " ".join(f"{k}={v}" for k, v in labels.items())
        print(f"{name}: success={rep.success_rate:.4f} spl={rep.spl:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_demo(args) -> int:
    cfg = _load_cfg(args)
    vocab = cfg.vocabulary()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(cfg.scene_config(), vocab, args.scene_seed)
    from .harness import eval_embodiment

    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=cfg.eval_seed, spawn_key=(1, args.episode_index)))
    episode = generate_episode(scene, rng, emb=eval_embodiment(cfg))
    model = load_checkpoint(args.model) if args.model else None
    mode = "fbe" if model is None else None
    result = run_episode(scene, episode, vocab, cfg, args.episode_index,
                         model=model, mode=mode, dump_dir=out)
    (out / "config.txt").write_text(config_echo(cfg))
    np.savez_compressed(out / "scene.npz", blocked=scene.blocked,
                        cat_at=scene.cat_at, nav_free=scene.nav_free)
    print(f"goal={result.category} success={result.success} "
          f"steps={result.steps} path={result.path_length:.2f}m "
          f"shortest={result.shortest_path:.2f}m -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovnav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config file (key=value lines)")

    g = sub.add_parser("gen-scenes", help="generate a held-out scene/episode suite")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--modality", choices=("text", "image"), default="text")
    g.set_defaults(fn=cmd_gen_scenes)

    c = sub.add_parser("collect-maps", help="collect training map snapshots")
    common(c)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_collect_maps)

    t = sub.add_parser("train", help="train the long-term-goal policy")
    common(t)
    t.add_argument("--maps", help="directory of collected runs (run_*.npz)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--curve", help="write the loss curve CSV here")
    t.add_argument("--patch", type=int, help="override the config patch size")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a policy over a suite")
    common(e)
    e.add_argument("--scenes", required=True)
    e.add_argument("--episodes", required=True)
    e.add_argument("--model", help="policy checkpoint (required for ovexp)")
    e.add_argument("--policy", choices=("ovexp", "fbe"))
    e.add_argument("--map-type", choices=("language", "vision"), dest="map_type")
    e.add_argument("--report", help="write the report here as key=value text")
    e.add_argument("--dump-dir", dest="dump_dir",
                   help="write per-episode trajectory/map dumps here")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="token-resolution and map-type sweep")
    common(a)
    a.add_argument("--scenes", required=True)
    a.add_argument("--episodes", required=True)
    a.add_argument("--model", action="append", required=True,
                   metavar="PATCH=CHECKPOINT",
                   help="repeatable; one trained checkpoint per patch size")
    a.add_argument("--out", required=True, help="CSV table path")
    a.set_defaults(fn=cmd_ablate)

    d = sub.add_parser("demo", help="roll one episode and dump its artifacts")
    common(d)
    d.add_argument("--out", required=True)
    d.add_argument("--scene-seed", type=int, default=0, dest="scene_seed")
    d.add_argument("--episode-index", type=int, default=0, dest="episode_index")
    d.add_argument("--model", help="policy checkpoint; frontier baseline if absent")
    d.set_defaults(fn=cmd_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except OvnavError as e:
        json.dump({"error_class": e.error_class, "message": str(e)},
                  sys.stderr)
        sys.stderr.write("\n")
        return e.exit_code
    except OSError as e:
        json.dump({"error_class": "data_error", "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

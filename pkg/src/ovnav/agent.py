"""Navigation controllers: one body, two long-term goal policies.

The controller keeps an agent-centered map (semantic always, feature map when
inference runs on vision features), refreshes a long-term goal every
``goal_period`` steps, and walks toward it with the geodesic local planner.
``ovexp`` scores map cells with the trained predictor and picks the
distance-discounted argmax; ``fbe`` walks to the nearest frontier instead.
Everything else (mapping, goal identification, waypoint following, recovery)
is byte-for-byte shared, so evaluation differences isolate the quality of the
long-term goals.

An episode opens with a scripted full turn (12 turn_left) to seed the map;
recovery monitoring starts after the scan, since spinning in place is the
point of the scan, not a failure mode.

Once the goal is identified on the map (cosine against the goal embedding
above theta), the controller beelines: it plans to the identified cell, and
stops when the planner distance drops under ``stop_distance`` with the cell
inside the field of view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embedspace import (
    CategoryVocabulary,
    GoalEmbedding,
    image_goal_embed,
    text_embed,
)
from .errors import ConfigurationError, PlannerError
from .gridcore import CellHits, GridSpec
from .mapping import CategoricalSemanticMap, FeatureMap, to_language_map
from .planner import (
    Action,
    DistanceField,
    UntrapMonitor,
    action_toward,
    fmm_distance,
    next_waypoint,
    plan_traversable,
)
from .policy import PolicyModel, select_goal
from .sim.engine import Embodiment, Episode, observe, step
from .sim.scenes import Scene

SCAN_TURNS = 12  # 12 x 30 deg = one full revolution
REACHED_DIST = 0.3  # meters; a long-term goal this close counts as reached
FOV_MARGIN_DEG = 5.0
# Planning dilation: heading is quantized to 30 deg and the waypoint's cell
# center adds a few more degrees, so a forward stride drifts up to ~0.09 m
# sideways. Two cells (0.10 m) of margin keep strides the planner accepts
# from brushing mapped obstacles; one cell is not enough.
PLAN_DILATE = 2


@dataclass(frozen=True)
class AgentConfig:
    """Controller knobs shared by both policies."""

    mode: str = "ovexp"  # "ovexp" | "fbe"
    map_type: str = "language"  # "language" | "vision"
    tau: float = 2.0
    theta: float = 0.8
    sigma: float = 0.1
    p_seg: float = 0.05
    goal_period: int = 25
    crop: int = 160
    stop_distance: float = 0.6  # meters of planner distance before stopping
    min_views: int = 3  # frames a cell must be hit before it can identify
    explore_only: bool = False  # map collection: no identification, no stop rule

    def __post_init__(self):
        if self.mode not in ("ovexp", "fbe"):
            raise ConfigurationError(f"unknown agent mode {self.mode!r}")
        if self.map_type not in ("language", "vision"):
            raise ConfigurationError(f"unknown map type {self.map_type!r}")
        if self.goal_period < 1 or self.crop < 16:
            raise ConfigurationError("goal_period >= 1 and crop >= 16 required")
        if not (0 < self.stop_distance):
            raise ConfigurationError("stop_distance must be positive")
        if self.min_views < 1:
            raise ConfigurationError("min_views must be >= 1")
        if not (self.tau > 0):
            raise ConfigurationError("tau must be positive")
        if not (0 < self.theta <= 1):
            raise ConfigurationError("theta must be in (0, 1]")


def frontier_mask(obstacle: np.ndarray, explored: np.ndarray) -> np.ndarray:
    """Explored free cells bordering unexplored space (4-neighborhood)."""
    free = (obstacle <= 0.5) & (explored > 0.5)
    unexp = explored <= 0.5
    adj = np.zeros_like(unexp)
    adj[1:, :] |= unexp[:-1, :]
    adj[:-1, :] |= unexp[1:, :]
    adj[:, 1:] |= unexp[:, :-1]
    adj[:, :-1] |= unexp[:, 1:]
    return free & adj


def resolve_goal_embedding(vocab: CategoryVocabulary, goal, scene_seed: int,
                           sigma: float) -> GoalEmbedding:
    """Text goals use the exact category vector; image goals use the
    instance-conditioned embedding (jittered, stable per instance)."""
    if goal.modality == "text":
        return text_embed(vocab, vocab.names[goal.category])
    return image_goal_embed(vocab, goal.category, sigma,
                            instance_seed=scene_seed * 100003 + goal.instance)


class Controller:
    """Runs one episode in one scene. Construct fresh per episode."""

    def __init__(self, scene: Scene, episode: Episode, vocab: CategoryVocabulary,
                 emb: Embodiment, config: AgentConfig,
                 model: PolicyModel | None = None,
                 rng: np.random.Generator | None = None):
        if config.mode == "ovexp" and model is None:
            raise ConfigurationError("ovexp mode needs a trained model")
        self.scene = scene
        self.ep = episode
        self.vocab = vocab
        self.emb = emb
        self.config = config
        self.model = model
        self.rng = rng if rng is not None else np.random.default_rng(0)

        h = scene.spec.cell_size
        # the map shares the scene's window: a window centered on an
        # off-center start would clip whole rooms, and frontiers at the map
        # edge then starve exploration before the scene is covered
        self.map_spec = GridSpec(scene.spec.size, h, scene.spec.origin)
        # scene and map lattices are aligned, so cell translation is an
        # integer shift
        self.shift_r = int(round((scene.spec.origin[1] - self.map_spec.origin[1]) / h))
        self.shift_c = int(round((scene.spec.origin[0] - self.map_spec.origin[0]) / h))

        self.sem = CategoricalSemanticMap(self.map_spec, len(vocab))
        self.fmap = (FeatureMap(self.map_spec, vocab.dim)
                     if config.map_type == "vision" else None)
        self.goal_emb = resolve_goal_embedding(vocab, episode.goal,
                                               scene.seed, config.sigma)
        self.untrap = UntrapMonitor()
        self.scan_left = SCAN_TURNS
        self.goal_cell: tuple[int, int] | None = None
        self.field: DistanceField | None = None
        self.steps_since_goal = 0
        self.beeline = False
        self._blob: np.ndarray | None = None
        # cells the agent has stood in are traversable by proof of existence;
        # they stay open regardless of what dilation or amendments claim, so
        # the planner can always route back out along the breadcrumb trail
        self._trace = np.zeros((self.map_spec.size, self.map_spec.size), bool)
        self._mark_trace()

        # Identification evidence is mean-fused: in vision mode it IS the
        # feature map; in language mode it is a feature map fed with the
        # embedding of each ray's (noisy) label. Mean fusion is what makes
        # segmentation flips survivable: under max fusion one flipped ray
        # poisons a cell's mixture forever, under a running mean its weight
        # decays as 1/views. The policy input stays the max-fused semantic
        # map (mirrored incrementally into _payload for language mode).
        if config.explore_only:
            self.ident_map = None
        elif self.fmap is not None:
            self.ident_map = self.fmap
        else:
            self.ident_map = FeatureMap(self.map_spec, vocab.dim)
        m = self.map_spec.size
        self._payload = np.zeros((vocab.dim, m, m))
        self._cos = np.full((m, m), -np.inf)

    # -- map bookkeeping ---------------------------------------------------

    def _exact_hits(self, obs) -> CellHits:
        """Cell hits straight from the raycaster's stopping cells. The
        depth-projection route puts boundary-exact wall hits in the wrong
        cell, which paints phantom obstacles; integer translation cannot."""
        hit = np.isfinite(obs.depths)
        rows = obs.hit_rows[hit] + self.shift_r
        cols = obs.hit_cols[hit] + self.shift_c
        ok = self.map_spec.in_bounds(rows, cols)
        feat = obs.features[hit][ok]
        return CellHits(rows[ok], cols[ok], obs.labels[hit][ok],
                        obs.confidences[hit][ok], obs.heights[hit][ok],
                        feat, dropped=int((~ok).sum()))

    def _update_maps(self, obs) -> None:
        hits = self._exact_hits(obs)
        self.sem.update(hits)
        if self.fmap is not None:
            self.fmap.update_vision(hits)
        elif self.ident_map is not None:
            self.ident_map.update_vision(CellHits(
                hits.rows, hits.cols, hits.labels, hits.confidences,
                hits.heights, self.vocab.vectors[hits.labels], hits.dropped))
        rows, cols = np.nonzero(obs.visited)
        rows = rows + self.shift_r
        cols = cols + self.shift_c
        ok = self.map_spec.in_bounds(rows, cols)
        self.sem.mark_free(rows[ok], cols[ok])
        if self.fmap is not None:
            self.fmap.mark_free(rows[ok], cols[ok])
        if len(hits):
            self._refresh_cells(np.unique(
                hits.rows * self.map_spec.size + hits.cols))

    def _refresh_cells(self, flat: np.ndarray) -> None:
        """Recompute the policy-input payload mirror and the goal cosine at
        the cells this frame touched.

        The language mirror reproduces to_language_map cell-for-cell (the
        mixture is a pure per-cell function of the semantic channels); the
        cosine comes from the mean-fused identification buffer.
        """
        m = self.map_spec.size
        r, c = flat // m, flat % m
        if self.fmap is None:
            conf = self.sem.categories[:, r, c].astype(np.float64)  # [N, K]
            denom = conf.sum(axis=0)
            mix = np.einsum("nk,nc->ck", conf, self.vocab.vectors)
            nz = denom > 0
            mix = np.where(nz[None], mix / np.where(nz, denom, 1.0)[None], 0.0)
            self._payload[:, r, c] = mix
        else:
            self._payload[:, r, c] = self.fmap.payload[:, r, c]
        if self.ident_map is None:
            return
        vec = self.ident_map.payload[:, r, c]
        norms = np.linalg.norm(vec, axis=0)
        valid = norms > 0
        sims = np.where(valid, (self.goal_emb.vector @ vec)
                        / np.where(valid, norms, 1.0), -np.inf)
        self._cos[r, c] = sims

    def _identify(self) -> tuple[int, int] | None:
        """argmax of the maintained goal cosine over view-gated cells; the
        identify_goal rule with counts thresholded at min_views.

        The view gate kills one-look artifacts: a cell seen once with a
        flipped label matches its false category perfectly, but it cannot
        keep doing so for min_views independent frames."""
        eligible = np.where(self.ident_map.counts >= self.config.min_views,
                            self._cos, -np.inf)
        flat = int(np.argmax(eligible))
        if eligible.flat[flat] < self.config.theta:
            return None
        m = self.map_spec.size
        return flat // m, flat % m

    def _inference_map(self) -> FeatureMap:
        if self.fmap is not None:
            return self.fmap
        return to_language_map(self.sem, self.vocab)

    def _agent_cell(self) -> tuple[int, int]:
        r, c = self.map_spec.cell_of(self.ep.pose.x, self.ep.pose.y)
        return int(r), int(c)

    def _mark_trace(self) -> None:
        r, c = self._agent_cell()
        if 0 <= r < self._trace.shape[0] and 0 <= c < self._trace.shape[1]:
            self._trace[r, c] = True

    # -- long-term goals ---------------------------------------------------

    def _crop_window(self, r: int, c: int) -> tuple[int, int]:
        crop, m = self.config.crop, self.map_spec.size
        if crop > m:
            raise ConfigurationError(f"crop {crop} exceeds map size {m}")
        r0 = min(max(r - crop // 2, 0), m - crop)
        c0 = min(max(c - crop // 2, 0), m - crop)
        return r0, c0

    def _plan_mask(self, obstacle, protect) -> np.ndarray:
        trav = plan_traversable(obstacle, self.untrap.amendments,
                                dilate=PLAN_DILATE, protect=protect)
        trav |= self._trace
        # near-field escape: around the agent only raw obstacles count, not
        # their dilation, else a pose one cell from furniture (a legal start,
        # or where a stride just ended) is pocketed by its own margin
        r, c = self._agent_cell()
        m = trav.shape[0]
        rs = slice(max(r - PLAN_DILATE, 0), min(r + PLAN_DILATE + 1, m))
        cs = slice(max(c - PLAN_DILATE, 0), min(c + PLAN_DILATE + 1, m))
        trav[rs, cs] |= ~(np.asarray(obstacle[rs, cs]) > 0.5)
        return trav

    def _agent_field(self) -> DistanceField:
        trav = self._plan_mask(self.sem.obstacle, [self._agent_cell()])
        return fmm_distance(trav, self._agent_cell(), self.map_spec.cell_size)

    def _policy_goal(self) -> tuple[int, int] | None:
        r, c = self._agent_cell()
        r0, c0 = self._crop_window(r, c)
        crop = self.config.crop
        rs, cs = slice(r0, r0 + crop), slice(c0, c0 + crop)
        window = np.concatenate([
            np.asarray(self.sem.obstacle[rs, cs], np.float64)[None],
            np.asarray(self.sem.explored[rs, cs], np.float64)[None],
            self._payload[:, rs, cs]])
        prob = self.model.predict(window, self.goal_emb.vector)
        if prob.shape[0] != crop:  # decoder side is 16 x tokens, not always crop
            idx = (np.arange(crop) * prob.shape[0] // crop).astype(np.int64)
            prob = prob[np.ix_(idx, idx)]
        dist = self._agent_field()
        sub = DistanceField(dist.values[r0:r0 + crop, c0:c0 + crop],
                            dist.cell_size)
        if not np.isfinite(sub.values).any():
            return None
        rr, cc = select_goal(prob, sub, self.config.tau)
        return rr + r0, cc + c0

    def _frontier_goal(self) -> tuple[int, int] | None:
        mask = frontier_mask(self.sem.obstacle, self.sem.explored)
        if not mask.any():
            return None
        dist = self._agent_field()
        scores = np.where(mask & np.isfinite(dist.values), dist.values, np.inf)
        if not np.isfinite(scores).any() and self.untrap.amendments:
            # amendments are provisional patches; when they wall off every
            # frontier the agent is pocketed by its own bookkeeping, so drop
            # them and retry before declaring the scene finished
            self.untrap.amendments.clear()
            dist = self._agent_field()
            scores = np.where(mask & np.isfinite(dist.values), dist.values, np.inf)
        if not np.isfinite(scores).any():
            return None
        flat = int(np.argmin(scores))
        m = scores.shape[1]
        return flat // m, flat % m

    def _next_long_term_goal(self) -> tuple[int, int] | None:
        if self.config.mode == "ovexp":
            return self._policy_goal()
        return self._frontier_goal()

    def _replan(self) -> None:
        agent = self._agent_cell()
        if self.beeline:
            # the identified argmax sits inside the object footprint; plan to
            # the whole identified region, erased from the obstacle set before
            # dilation so its clearance ring stays passable. The field is then
            # the distance to the object surface, the same quantity the
            # success rule checks.
            blob = ((self.ident_map.counts >= self.config.min_views)
                    & (self._cos >= self.config.theta))
            blob[self.goal_cell] = True
            self._blob = blob
            obstacle = np.where(blob, 0.0, np.asarray(self.sem.obstacle))
            trav = self._plan_mask(obstacle, [agent])
            trav |= blob
            rows, cols = np.nonzero(blob)
            sources = np.stack([rows, cols], axis=1)
        else:
            trav = self._plan_mask(self.sem.obstacle, [agent, self.goal_cell])
            sources = self.goal_cell
        self.field = fmm_distance(trav, sources, self.map_spec.cell_size)
        self.untrap.replan_needed = False

    # -- policy ------------------------------------------------------------

    def _decide(self) -> Action:
        if self.scan_left > 0:
            self.scan_left -= 1
            return Action.TURN_LEFT
        override = self.untrap.override_action()
        if override is not None:
            return override

        ident = None if self.config.explore_only else self._identify()
        agent = self._agent_cell()

        if ident is not None:
            # hysteresis: as the mixture sharpens the argmax jitters by a
            # cell or two; chasing it would force a replan every step
            moved_far = (self.goal_cell is None
                         or max(abs(ident[0] - self.goal_cell[0]),
                                abs(ident[1] - self.goal_cell[1])) > 2)
            if not self.beeline or moved_far:
                self.goal_cell = ident
                self.field = None
            self.beeline = True
        else:
            if self.beeline:
                # the identification was debunked by closer looks (flip
                # artifacts fade as views accumulate); resume exploring
                self.beeline = False
                self.goal_cell = None
                self.field = None
            self.steps_since_goal += 1
            due = (self.goal_cell is None
                   or self.steps_since_goal >= self.config.goal_period
                   or (self.field is not None
                       and self.field.at(agent) < REACHED_DIST))
            if due:
                goal = self._next_long_term_goal()
                if goal is None:
                    return Action.STOP  # nothing left to explore
                if goal != self.goal_cell:
                    self.goal_cell = goal
                    self.field = None
                self.steps_since_goal = 0

        if self.field is None or self.untrap.replan_needed:
            self._replan()
        if not np.isfinite(self.field.at(agent)):
            self._replan()
            if not np.isfinite(self.field.at(agent)):
                # goal got walled off; fall back to the nearest frontier
                self.goal_cell = self._frontier_goal()
                self.beeline = False
                if self.goal_cell is None:
                    return Action.STOP
                self._replan()
                if not np.isfinite(self.field.at(agent)):
                    return Action.STOP

        if self.beeline and self.field.at(agent) < self.config.stop_distance:
            # face the nearest identified cell, not the argmax: with several
            # instances on the map the argmax may be a far one while the
            # field already reads the distance to the near one
            rows, cols = np.nonzero(self._blob)
            near = int(np.argmin((rows - agent[0]) ** 2 + (cols - agent[1]) ** 2))
            gx, gy = self.map_spec.center_of(int(rows[near]), int(cols[near]))
            bearing = math.atan2(gy - self.ep.pose.y, gx - self.ep.pose.x)
            err = (bearing - self.ep.pose.heading + math.pi) % (2 * math.pi) - math.pi
            if abs(err) <= math.radians(self.emb.fov_deg / 2.0 - FOV_MARGIN_DEG):
                return Action.STOP
            return Action.TURN_LEFT if err > 0 else Action.TURN_RIGHT

        try:
            wp = next_waypoint(self.field, agent, self.emb.forward_step)
        except PlannerError:
            return Action.TURN_LEFT  # stale field; recovery will replan
        return action_toward(self.ep.pose, wp, self.map_spec)

    # -- driver ------------------------------------------------------------

    def act(self) -> Action:
        """One observe/update/decide/execute cycle."""
        obs = observe(self.scene, self.ep.pose, self.emb, self.vocab, self.rng,
                      self.config.sigma, self.config.p_seg)
        self._update_maps(obs)
        action = self._decide()
        disp = step(self.scene, self.ep, action, self.emb)
        self._mark_trace()
        if self.scan_left == 0 and not self.ep.terminated:
            self.untrap.observe(action, disp, self.ep.pose, self.map_spec,
                                reach=self.emb.forward_step)
        return action

    def run(self) -> Episode:
        """Roll the episode to termination."""
        while not self.ep.terminated:
            self.act()
        return self.ep

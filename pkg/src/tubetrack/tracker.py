"""Centerline tracking by deferred-decision hypothesis search.

From a single seed the tracker grows a branch in both directions, at
each step proposing a cone of candidate continuations, fitting each to
the volume, scoring them (rank-normalized by default, raw otherwise),
and holding the last ``search_depth`` steps pending before committing
the oldest one on the best-scoring path.  Frontier leaves that cluster
into two spatially separate groups trigger a bifurcation: the common
stem is committed, and two child branches continue, keeping the
parent's pending subtrees and score history rather than restarting.

All mutation is single-owner and the branch queue is processed in
creation order, so identical inputs give bit-identical output.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np

from .fitting import (FitOptions, fit_template, fit_templates, raw_score,
                      solve_linear, tracking_score)
from .mht import HypothesisTree, rank_scores
from .template import TemplateParams, orthonormal_frame, window_for

TERMINATION_REASONS = (
    "out-of-volume", "no-candidates", "below-threshold", "max-steps",
    "self-intersection", "bifurcation")


@dataclass
class BifurcationConfig:
    """Controls for frontier-cluster branch detection."""

    enabled: bool = True
    min_cluster_size: int = 2
    separation_factor: float = 2.0
    # real daughters score within a small factor of each other even
    # when one straddles the junction; a spatial-outlier cluster in
    # open noise sits orders of magnitude below the true one
    max_score_ratio: float = 20.0
    # only leaves scoring within this fraction of the step's best are
    # clustered: half-converged junction straddlers bridge the two
    # daughter clusters, and rim-fit pairs on opposite tube walls fake
    # a split
    min_quality_fraction: float = 1 / 3


@dataclass
class TrackerConfig:
    """Tracking parameters.

    Defaults are the tuned modified-method airway values: radii 1-10 mm,
    step 1.1 r, weight window 1.0 r, depth 6, cone 70 degrees over 2
    rings, single global threshold 0.7 on the rank-score window mean.
    """

    r_min: float = 1.0
    r_max: float = 10.0
    step_length_factor: float = 1.1
    weight_window_factor: float = 1.0
    search_depth: int = 6
    search_angle: float = 70.0
    num_angles: int = 2
    local_threshold: float | None = None
    global_threshold: float = 0.7
    mode: str = "modified"
    score_variant: str = "contrast"
    rank_pool: str = "step-union"
    max_steps: int = 2000
    frontier_cap: int = 300
    max_branches: int = 64
    self_intersection_grace: int = 3
    # admissible per-step radius change between a fitted child and its
    # parent.  Shrink is looser than growth: stepping from a parent tube
    # onto a daughter roughly halves the radius in one fit, while sudden
    # growth is the signature of a window inflating into background or
    # off the hull to fake contrast
    max_radius_growth: float = 2.2
    max_radius_shrink: float = 3.0
    # a fit that converges onto the r_min clamp is reading a rim or
    # noise floor, and one on the r_max clamp is a window swallowing
    # solid bright; a fit is flagged weak unless the clamps bracket its
    # radius with this much slack.  1.0 disables the margin
    clamp_margin: float = 1.05
    # the tracking score is a t statistic of the fitted contrast, so a
    # fit below this many standard errors carries no evidence of a tube
    # (pure-noise fits optimize to about 8).  Rank scores are scale
    # free and would otherwise hand junk a top rank wherever nothing
    # real competes
    min_evidence: float = 10.0
    # weak fits (clamp-pegged radius or no contrast evidence) still
    # extend the tree in rank mode, but only as a single capped-score
    # child of a leaf with no strong continuation: a run of them drains
    # the window mean, so the track coasts across a short occlusion yet
    # cannot ride junk indefinitely
    weak_score_cap: float = 0.5
    # raw scores within this fraction of the step's best share the top
    # rank.  Straight rank order turns a noise-level gap between two
    # daughters at a junction into a 2x score gap, which starves the
    # weaker one before the clusters separate.  0 restores strict order
    rank_tie_tolerance: float = 0.05
    bifurcation: BifurcationConfig = dataclass_field(
        default_factory=BifurcationConfig)
    # tracking fits start warm, so fewer iterations, cheaper forward
    # differences, and a wanderer cutoff all trade polish for speed
    fit: FitOptions = dataclass_field(
        default_factory=lambda: FitOptions(max_outer_iters=15,
                                           max_drift_radii=2.5,
                                           fd_scheme="forward",
                                           step_tol_mm=1e-2))

    def validate(self):
        if not (0 < self.r_min <= self.r_max):
            raise ValueError("need 0 < r_min <= r_max")
        if self.step_length_factor < 1.0:
            raise ValueError("step_length_factor must be >= 1")
        if not (0 < self.search_angle <= 90.0):
            raise ValueError("search_angle must be in (0, 90]")
        if self.num_angles < 1:
            raise ValueError("num_angles must be >= 1")
        if self.search_depth < 1:
            raise ValueError("search_depth must be >= 1")
        if self.mode not in ("modified", "original"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "modified" and self.local_threshold is not None:
            raise ValueError("modified mode has no local threshold")
        if self.rank_pool not in ("step-union", "per-parent"):
            raise ValueError(f"unknown rank pool {self.rank_pool!r}")
        if self.clamp_margin < 1.0:
            raise ValueError("clamp_margin must be >= 1")
        if not (0.0 <= self.weak_score_cap <= 1.0):
            raise ValueError("weak_score_cap must be in [0, 1]")
        if self.min_evidence < 0:
            raise ValueError("min_evidence must be >= 0")
        return self

    @property
    def use_rank_scores(self):
        return self.mode == "modified"

    def fit_options(self):
        return replace(self.fit, r_min=self.r_min, r_max=self.r_max)


def preset(name):
    """Named parameter sets from the tuned airway/coronary tables."""
    if name in ("airway", "airway-modified", "modified"):
        return TrackerConfig()
    if name in ("airway-original", "original"):
        return TrackerConfig(
            mode="original", score_variant="printed",
            step_length_factor=1.5, weight_window_factor=3.0,
            search_angle=60.0, num_angles=3,
            local_threshold=2.0, global_threshold=4.0)
    if name == "coronary":
        return TrackerConfig(
            r_max=3.0, search_depth=4, step_length_factor=1.5,
            weight_window_factor=1.0, search_angle=60.0, num_angles=2,
            global_threshold=0.95)
    if name == "coronary-original":
        return TrackerConfig(
            mode="original", score_variant="printed",
            r_max=3.0, search_depth=4, step_length_factor=1.5,
            weight_window_factor=3.0, search_angle=60.0, num_angles=3,
            local_threshold=4.0, global_threshold=8.0)
    raise ValueError(f"unknown preset {name!r}")


PRESET_NAMES = ("airway", "airway-original", "coronary",
                "coronary-original")


# -- candidate generation -----------------------------------------------


def predict(tip, cfg):
    """Candidate continuations of a tube tip.

    One straight-ahead candidate plus ``num_angles`` rings at polar
    angles i/num_angles * search_angle; each ring carries about
    pi*sin(theta)/dtheta azimuthal samples so the cone is covered
    uniformly per solid angle.  Every candidate center sits one step
    (step_length_factor * r) from the tip along its own direction, with
    the tip radius as starting radius.
    """
    step = cfg.step_length_factor * tip.r
    angle = np.deg2rad(cfg.search_angle)
    dtheta = angle / cfg.num_angles
    e1, e2 = orthonormal_frame(tip.v)
    out = [TemplateParams.make(tip.x0 + step * tip.v, tip.v, tip.r,
                               tip.gamma)]
    for i in range(1, cfg.num_angles + 1):
        theta = i * dtheta
        count = int(np.ceil(np.pi * np.sin(theta) / dtheta))
        offset = np.pi / count if i % 2 == 0 else 0.0
        for j in range(count):
            phi = 2.0 * np.pi * j / count + offset
            u = (np.cos(theta) * tip.v
                 + np.sin(theta) * (np.cos(phi) * e1 + np.sin(phi) * e2))
            out.append(TemplateParams.make(tip.x0 + step * u, u, tip.r,
                                           tip.gamma))
    return out


def _tied_ranks(scores, tol):
    """Rank scores, sharing rank 1 among near-ties of the step's best."""
    ranks = rank_scores(scores)
    if tol > 0 and len(scores):
        best = max(scores)
        if best > 0:
            cut = best * (1.0 - tol)
            ranks = [1.0 if s >= cut else float(r)
                     for s, r in zip(scores, ranks)]
    return ranks


def _hypothesis_key(params):
    """Geometry quantized for sharing fits between near-identical
    candidates (position to 10% of the radius, ~6 degree direction, 5%
    radius; all far finer than the 35 degree ring spacing of the cone)."""
    x, v = params.x0, params.v
    q = 0.1 * params.r
    return (int(round(x[0] / q)), int(round(x[1] / q)),
            int(round(x[2] / q)),
            int(round(v[0] * 10)), int(round(v[1] * 10)),
            int(round(v[2] * 10)),
            int(round(np.log(params.r) / 0.05)))


# -- bifurcation detection ----------------------------------------------


def detect_bifurcation(positions, radii, separation_factor=2.0):
    """Cluster labels (0/1) for frontier positions, or all zeros.

    Splits only when the spectrum of the normalized graph Laplacian of
    the Gaussian affinity (sigma = mean radius) has its dominant
    eigengap between the 2nd and 3rd eigenvalues, and the two cluster
    centroids are at least ``separation_factor`` * sigma apart.  Ties
    and boundary cases collapse to a single cluster.
    """
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    labels = np.zeros(n, dtype=int)
    if n < 2:
        return labels
    sigma = float(np.mean(radii))
    if sigma <= 0:
        return labels
    if n == 2:
        if np.linalg.norm(pos[0] - pos[1]) >= separation_factor * sigma:
            labels[1] = 1
        return labels
    diff = pos[:, None, :] - pos[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    A = np.exp(-d2 / (2.0 * sigma * sigma))
    deg = A.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    L = np.eye(n) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    evals, evecs = np.linalg.eigh(L)
    if not (evals[2] - evals[1]) > (evals[1] - evals[0]):
        return labels
    fiedler = evecs[:, 1]
    labels = (fiedler >= 0).astype(int)
    if labels[0] == 1:
        labels = 1 - labels
    if labels.min() == labels.max():
        return np.zeros(n, dtype=int)
    c0 = pos[labels == 0].mean(axis=0)
    c1 = pos[labels == 1].mean(axis=0)
    if np.linalg.norm(c0 - c1) < separation_factor * sigma:
        return np.zeros(n, dtype=int)
    return labels


# -- output structures --------------------------------------------------


@dataclass
class Branch:
    """One committed polyline; points are rows (x, y, z, r) in mm."""

    id: int
    parent_id: int | None
    points: np.ndarray
    termination: str = ""

    def length(self):
        if len(self.points) < 2:
            return 0.0
        seg = np.diff(self.points[:, :3], axis=0)
        return float(np.linalg.norm(seg, axis=1).sum())


@dataclass
class CenterlineTree:
    """Tracked centerlines: a forest of branches from one seed."""

    seed: np.ndarray
    branches: list

    def n_points(self):
        return sum(len(b.points) for b in self.branches)

    def total_length(self):
        return sum(b.length() for b in self.branches)

    def branch_by_id(self, bid):
        for b in self.branches:
            if b.id == bid:
                return b
        raise KeyError(bid)

    def to_dict(self):
        return {
            "seed": [float(c) for c in self.seed],
            "branches": [
                {
                    "id": int(b.id),
                    "parent_id": None if b.parent_id is None
                    else int(b.parent_id),
                    "points": [[float(c) for c in row]
                               for row in b.points],
                    "termination": b.termination,
                }
                for b in self.branches
            ],
        }

    @classmethod
    def from_dict(cls, data):
        branches = [
            Branch(id=int(b["id"]),
                   parent_id=None if b.get("parent_id") is None
                   else int(b["parent_id"]),
                   points=np.asarray(b["points"], dtype=float).reshape(
                       -1, 4),
                   termination=b.get("termination", ""))
            for b in data["branches"]
        ]
        return cls(seed=np.asarray(data["seed"], dtype=float),
                   branches=branches)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class AuditLog:
    """Append-only record of every tracking decision, one JSON-able
    dict per event; the test surface for search-behavior assertions."""

    def __init__(self, keep_candidates=True):
        self.records = []
        self.keep_candidates = keep_candidates
        self.fits = 0
        self.cap_hits = 0
        self.max_frontier = 0

    def log(self, event, **fields):
        rec = {"event": event}
        rec.update(fields)
        self.records.append(rec)

    def write(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec))
                fh.write("\n")

    def events(self, kind):
        return [r for r in self.records if r["event"] == kind]


# -- tracking state -----------------------------------------------------


@dataclass
class BranchState:
    """Work-queue entry for one growing branch."""

    tree: HypothesisTree
    tip: TemplateParams
    public_id: int
    parent_public_id: int | None
    steps_taken: int = 0
    grace: int = 3
    inherited_depth: int = 0
    reverse: bool = False
    committed: list = dataclass_field(default_factory=list)
    recent_raws: deque = dataclass_field(
        default_factory=lambda: deque(maxlen=8))
    reason: str = ""


class _CommitIndex:
    """Committed-point store backing the self-intersection guard."""

    def __init__(self):
        self._points = {}
        self._radii = {}

    def add(self, owner, point, r):
        self._points.setdefault(owner, []).append(np.asarray(point,
                                                             dtype=float))
        self._radii.setdefault(owner, []).append(float(r))

    def hits(self, owner, point, exclude_last=3):
        """True if ``point`` lies inside the sphere of any committed
        point, ignoring the most recent ``exclude_last`` points of the
        same branch."""
        p = np.asarray(point, dtype=float)
        for key, pts in self._points.items():
            rads = self._radii[key]
            n = len(pts)
            stop = n - exclude_last if key == owner else n
            if stop <= 0:
                continue
            arr = np.asarray(pts[:stop])
            d = np.linalg.norm(arr - p, axis=1)
            if np.any(d < np.asarray(rads[:stop])):
                return True
        return False


class _Shared:
    def __init__(self, field, cfg, audit):
        self.field = field
        self.cfg = cfg
        self.audit = audit
        self.index = _CommitIndex()
        self.fit_opts = cfg.fit_options()
        self.next_public_id = 1
        self.n_states = 0


# -- seeding ------------------------------------------------------------

_SEED_DIRECTIONS = None


def _seed_directions():
    global _SEED_DIRECTIONS
    if _SEED_DIRECTIONS is None:
        axes = []
        for ax in range(3):
            for sign in (1.0, -1.0):
                v = np.zeros(3)
                v[ax] = sign
                axes.append(v)
        for sx in (1.0, -1.0):
            for sy in (1.0, -1.0):
                for sz in (1.0, -1.0):
                    axes.append(np.array([sx, sy, sz]) / np.sqrt(3.0))
        _SEED_DIRECTIONS = axes
    return _SEED_DIRECTIONS


def fit_seed(field, seed, cfg, direction=None):
    """Initial tube fit at the seed point.

    Probes 14 directions (6 axes + 8 diagonals) at 4 geometrically
    spaced radii with capped stencils, then refines the best probe by
    raw score at full quality.  Raises ValueError when nothing tubular
    fits.
    """
    seed = np.asarray(seed, dtype=float)
    opts = cfg.fit_options()
    probe_opts = replace(opts,
                         max_stencil_points=min(4000,
                                                opts.max_stencil_points),
                         max_outer_iters=10)
    dirs = [np.asarray(direction, dtype=float)
            / np.linalg.norm(direction)] if direction is not None \
        else _seed_directions()
    radii = np.geomspace(cfg.r_min, cfg.r_max, 4) \
        if cfg.r_max > cfg.r_min else np.array([cfg.r_min])
    inits = [TemplateParams.make(seed, v, float(r))
             for r in radii for v in dirs]
    fwd = [cfg.step_length_factor * p.r for p in inits]
    fits = fit_templates(field, inits, cfg.weight_window_factor, fwd,
                         probe_opts)
    # probe batches share stencils per initial radius, which misjudges
    # fits whose radius drifted far; re-score each on its own support
    best = None
    best_raw = 0.0
    for f in fits:
        if f.degenerate:
            continue
        win = window_for(f.params, cfg.weight_window_factor,
                         cfg.step_length_factor * f.params.r)
        lin = solve_linear(field, f.params, win,
                           density=1.0 / opts.spacing_for(f.params.r))
        score = raw_score(lin)
        if np.isfinite(score) and score > best_raw:
            best = f
            best_raw = score
    if best is None:
        raise ValueError("seed not on a tubular structure")
    refined = fit_template(
        field, best.params,
        window_for(best.params, cfg.weight_window_factor,
                   cfg.step_length_factor * best.params.r),
        opts)
    if refined.degenerate or refined.raw_score <= 0:
        raise ValueError("seed not on a tubular structure")
    return refined


# -- per-branch loop ----------------------------------------------------


def track_branch(field, state, cfg, shared):
    """Run one branch until it terminates.

    Returns (termination reason, spawned child states).  Committed fits
    accumulate on ``state.committed``.
    """
    while True:
        if state.steps_taken >= cfg.max_steps:
            _flush(state, cfg, shared, state.tree.frontier)
            return _finish(state, "max-steps", shared)
        outcome = _step(field, state, cfg, shared)
        if outcome is not None:
            reason, spawned = outcome
            _finish(state, reason, shared)
            return reason, spawned


def _finish(state, reason, shared):
    state.reason = reason
    shared.audit.log("terminate", branch=state.public_id, reason=reason,
                     steps=state.steps_taken,
                     commits=len(state.committed))
    shared.audit.max_frontier = max(shared.audit.max_frontier,
                                    state.tree.max_frontier)
    shared.audit.cap_hits += state.tree.cap_hits
    return reason, []


def _step(field, state, cfg, shared):
    """One predict-fit-score-extend-prune(-commit) cycle.  Returns None
    to continue, or (reason, spawned) when the branch ends."""
    tree = state.tree
    d = cfg.search_depth
    prev_frontier = list(tree.frontier)

    # predict candidates for every leaf, sharing fits between
    # geometrically identical proposals
    cand_init = {}
    cand_order = []
    per_leaf = []
    n_outside = 0
    for leaf in tree.frontier:
        tip = leaf.fit.params if leaf.fit is not None else state.tip
        keys = []
        for cand in predict(tip, cfg):
            if not field.contains(cand.x0):
                n_outside += 1
                continue
            # flag proposals whose own continuation exits the hull;
            # fits there are data starved, and if none attach the
            # branch ended by leaving the volume, not by losing the tube
            if not field.contains(
                    cand.x0 + cfg.step_length_factor * cand.r * cand.v):
                n_outside += 1
            key = _hypothesis_key(cand)
            if key not in cand_init:
                cand_init[key] = cand
                cand_order.append(key)
            keys.append(key)
        per_leaf.append((leaf, keys))
    state.steps_taken += 1

    if not cand_order:
        _flush(state, cfg, shared, prev_frontier)
        # every proposal fell outside the hull: the tube leaves the volume
        reason = "out-of-volume" if n_outside else "no-candidates"
        return reason, []

    inits = [cand_init[k] for k in cand_order]
    fwd = [cfg.step_length_factor * p.r for p in inits]
    fits = fit_templates(field, inits, cfg.weight_window_factor, fwd,
                         shared.fit_opts)
    shared.audit.fits += len(inits)

    score_of = {}
    valid = {}
    fit_of = {}
    for key, fit in zip(cand_order, fits):
        s = tracking_score(fit, cfg.score_variant)
        ok = (not fit.degenerate) and np.isfinite(s)
        score_of[key] = float(s)
        valid[key] = ok
        fit_of[key] = fit

    # a fitted candidate must land strictly ahead of its parent; the
    # objective is translation invariant along a uniform tube, so fits
    # can otherwise slide backwards and track the path already covered.
    # past the startup grace, candidates inside an already committed
    # sphere are discarded here instead of d steps later at commit time
    if state.grace <= 0:
        for key in cand_order:
            if valid[key] and shared.index.hits(
                    state.public_id, fit_of[key].params.x0,
                    exclude_last=3):
                valid[key] = False
    # weak fits carry no evidence of a tube: the radius sits on a clamp
    # (rim or noise-floor reading) or the score is nonpositive.  Rank
    # mode keeps them at a capped score so short occlusions are
    # coasted across; raw mode leaves them to its local threshold,
    # which misses high-raw rim fits, so pegged radii are cut outright
    r_floor = cfg.r_min * cfg.clamp_margin
    r_ceil = cfg.r_max / cfg.clamp_margin
    pegged = {k: not (r_floor <= fit_of[k].params.r <= r_ceil)
              for k in cand_order}
    weak = {k: pegged[k] or score_of[k] < cfg.min_evidence
            for k in cand_order}
    usable_of = {}
    for leaf, keys in per_leaf:
        parent = leaf.fit.params if leaf.fit is not None else state.tip
        # a fit on a uniform tube scores the same pointing either way
        # along the axis, and the objective is translation invariant,
        # so reversed or backward fits must be cut geometrically or the
        # track U-turns inside its own uncommitted window
        usable_of[id(leaf)] = [
            k for k in keys
            if valid[k]
            and not (pegged[k] and not cfg.use_rank_scores)
            and float(np.dot(fit_of[k].params.x0 - parent.x0,
                             parent.v)) > 0.0
            and float(np.dot(fit_of[k].params.v, parent.v)) > 0.0
            and (parent.r / cfg.max_radius_shrink
                 <= fit_of[k].params.r
                 <= parent.r * cfg.max_radius_growth)]

    # scoring and attachment.  Weak candidates extend a leaf only when
    # it has no strong continuation, and then just the best of them at
    # the capped score: the chain coasts thin across an occlusion
    # instead of fanning junk
    rank_of = {}
    if cfg.use_rank_scores and cfg.rank_pool == "step-union":
        usable_any = set()
        for leaf, _ in per_leaf:
            usable_any.update(k for k in usable_of[id(leaf)]
                              if not weak[k])
        union = [k for k in cand_order if k in usable_any]
        if union:
            ranks = _tied_ranks([score_of[k] for k in union],
                                cfg.rank_tie_tolerance)
            rank_of = dict(zip(union, ranks))

    new_frontier = []
    attached = 0
    for leaf, keys in per_leaf:
        usable = usable_of[id(leaf)]
        if cfg.use_rank_scores:
            strong = [k for k in usable if not weak[k]]
            if cfg.rank_pool == "per-parent":
                ranks = _tied_ranks([score_of[k] for k in strong],
                                    cfg.rank_tie_tolerance) \
                    if strong else []
                leaf_rank = dict(zip(strong, ranks))
            else:
                leaf_rank = rank_of
            for k in strong:
                node = tree.add_child(
                    leaf, float(leaf_rank[k]), raw=score_of[k],
                    fit=fit_of[k], key=_hypothesis_key(
                        fit_of[k].params))
                new_frontier.append(node)
                attached += 1
            if not strong and usable:
                k = max(usable, key=lambda q: score_of[q])
                node = tree.add_child(
                    leaf, cfg.weak_score_cap, raw=score_of[k],
                    fit=fit_of[k], key=_hypothesis_key(
                        fit_of[k].params))
                new_frontier.append(node)
                attached += 1
        else:
            thr = -np.inf if cfg.local_threshold is None \
                else cfg.local_threshold
            for k in usable:
                if score_of[k] < thr:
                    continue
                node = tree.add_child(
                    leaf, score_of[k], raw=score_of[k], fit=fit_of[k],
                    key=_hypothesis_key(fit_of[k].params))
                new_frontier.append(node)
                attached += 1
    tree.set_frontier(new_frontier)

    step_rec = {
        "branch": state.public_id, "step": state.steps_taken,
        "leaves": len(per_leaf), "unique_candidates": len(cand_order),
        "attached": attached,
    }
    if shared.audit.keep_candidates:
        step_rec["candidates"] = [
            {"x0": [float(c) for c in fit_of[k].params.x0],
             "v": [float(c) for c in fit_of[k].params.v],
             "r": float(fit_of[k].params.r),
             "score": score_of[k],
             "rank": float(rank_of[k]) if k in rank_of else None,
             "valid": valid[k], "weak": weak[k]}
            for k in cand_order]

    if not tree.frontier:
        shared.audit.log("step", **step_rec)
        _flush(state, cfg, shared, prev_frontier)
        reason = "out-of-volume" if n_outside else "no-candidates"
        return reason, []

    pruned_startup = pruned_threshold = 0
    commit_rec = None

    # the detector sees the frontier before pruning: at a junction the
    # outranked daughter's leaves fail the global threshold within a
    # step or two, long before the clusters drift 2 sigma apart
    snapshot = list(tree.frontier)

    def _cluster_split():
        mc = cfg.bifurcation.min_cluster_size
        if not cfg.bifurcation.enabled or len(snapshot) < 2 * mc:
            return None
        raws = [(-np.inf if n.raw is None else n.raw) for n in snapshot]
        top = max(raws)
        if not top > 0:
            return None
        cut = top * cfg.bifurcation.min_quality_fraction
        leaves = [n for n, s in zip(snapshot, raws) if s >= cut]
        if len(leaves) < 2 * mc:
            return None
        labels = detect_bifurcation(
            [n.fit.params.x0 for n in leaves],
            [n.fit.params.r for n in leaves],
            cfg.bifurcation.separation_factor)
        n1 = int(labels.sum())
        if n1 < mc or len(labels) - n1 < mc:
            return None
        best = [max(n.raw for n, lab in zip(leaves, labels)
                    if lab == side) for side in (0, 1)]
        if min(best) * cfg.bifurcation.max_score_ratio < max(best):
            return None
        return leaves, labels

    # pruning detaches dropped leaves, so the split check must come
    # first while the snapshot's parent chains are still whole
    found = _cluster_split()
    if found is not None:
        shared.audit.log("step", **step_rec)
        return _split(state, cfg, shared, *found)

    if tree.pending_depth() < d:
        # startup: no global threshold yet; drop paths that could not
        # pass it even with perfect remaining steps (rank mode only,
        # where 1.0 bounds each step score)
        if cfg.use_rank_scores:
            pruned_startup = tree.prune_startup(cfg.global_threshold, d)
        merged = tree.merge_dominated(d)
        capped = tree.apply_cap(cfg.frontier_cap, d)
        if not tree.frontier:
            step_rec.update(pruned_startup=pruned_startup, merged=merged,
                            frontier=0)
            shared.audit.log("step", **step_rec)
            return "below-threshold", []
    else:
        pruned_threshold = tree.prune_threshold(cfg.global_threshold, d)
        if not tree.frontier:
            step_rec.update(pruned_threshold=pruned_threshold,
                            frontier=0)
            shared.audit.log("step", **step_rec)
            return "below-threshold", []

        node = tree.commit_best(d)
        ok, reason = _commit_node(state, cfg, shared, node)
        if not ok:
            shared.audit.log("step", **step_rec)
            return reason, []
        commit_rec = {
            "x0": [float(c) for c in node.fit.params.x0],
            "r": float(node.fit.params.r),
            "window_mean": float(tree.best_leaf(d).window_mean(d)),
            "raw": None if node.raw is None else float(node.raw),
        }
        merged = tree.merge_dominated(d)
        capped = tree.apply_cap(cfg.frontier_cap, d)

    step_rec.update(pruned_startup=pruned_startup,
                    pruned_threshold=pruned_threshold,
                    merged=merged, capped=capped,
                    frontier=len(tree.frontier))
    if commit_rec is not None:
        step_rec["commit"] = commit_rec
    shared.audit.log("step", **step_rec)
    return None


def _commit_node(state, cfg, shared, node, flushing=False):
    """Shared bookkeeping for adding a committed node to the branch.
    Returns (ok, reason); ok=False ends the branch without the node."""
    p = node.fit.params
    if not shared.field.contains(p.x0):
        return False, "out-of-volume"
    if state.grace > 0:
        state.grace -= 1
    elif shared.index.hits(state.public_id, p.x0,
                           exclude_last=3):
        return False, "self-intersection"
    shared.index.add(state.public_id, p.x0, p.r)
    state.committed.append(node)
    if node.raw is not None:
        state.recent_raws.append(float(node.raw))
    return True, ""


def _flush(state, cfg, shared, frontier):
    """Commit the best pending path at termination, clipped at the
    volume hull and at self-intersections."""
    chain = state.tree.flush_best(cfg.search_depth, frontier)
    n = 0
    for node in chain:
        ok, _ = _commit_node(state, cfg, shared, node, flushing=True)
        if not ok:
            break
        n += 1
    if n:
        shared.audit.log("flush", branch=state.public_id, nodes=n)


def _split(state, cfg, shared, frontier, labels):
    """Handle a detected bifurcation: commit the common stem to the
    parent branch, then spawn one child per cluster."""
    tree = state.tree
    clusters = ([n for n, l in zip(frontier, labels) if l == 0],
                [n for n, l in zip(frontier, labels) if l == 1])

    divergence = _deepest_common_ancestor(frontier, tree.anchor)
    stem = []
    node = divergence
    while node is not tree.anchor:
        stem.append(node)
        node = node.parent
    stem.reverse()
    for sn in stem:
        tree.commit_node(sn)
        ok, reason = _commit_node(state, cfg, shared, sn)
        if not ok:
            return reason, []

    spawned = []
    children_ids = []
    for leaves in clusters:
        if shared.next_public_id >= cfg.max_branches:
            shared.audit.log("branch-limit", parent=state.public_id)
            break
        pid = shared.next_public_id
        shared.next_public_id += 1
        if cfg.use_rank_scores:
            child_tree = tree.split_off(divergence, leaves)
            child_tree.rerank_pending()
            inherited = leaves[0].depth - divergence.depth
            child = BranchState(
                tree=child_tree, tip=child_tree.anchor.fit.params
                if child_tree.anchor.fit is not None else state.tip,
                public_id=pid, parent_public_id=state.public_id,
                grace=cfg.self_intersection_grace,
                inherited_depth=inherited,
                recent_raws=state.recent_raws.copy())
            if child_tree.anchor.fit is not None:
                # child polylines start at the branch point; the parent
                # already committed it, so skip the intersection index
                child.committed.append(child_tree.anchor)
        else:
            # raw-score mode rebuilds: restart from the cluster's best
            # first step past the branch point, discarding pending work
            best = max(leaves,
                       key=lambda n: n.window_mean(cfg.search_depth))
            node = best
            while node.parent is not divergence:
                node = node.parent
            child_tree = HypothesisTree()
            child_tree.anchor.fit = node.fit
            child = BranchState(
                tree=child_tree, tip=node.fit.params, public_id=pid,
                parent_public_id=state.public_id,
                grace=cfg.self_intersection_grace, inherited_depth=0,
                recent_raws=state.recent_raws.copy())
            child.committed.append(node)
            shared.index.add(pid, node.fit.params.x0, node.fit.params.r)
        history = len(child_tree.anchor.path_scores(10 ** 6)) \
            if cfg.use_rank_scores else 0
        shared.audit.log(
            "branch-start", branch=pid, parent=state.public_id,
            inherited_depth=child.inherited_depth,
            inherited_history=history,
            cluster_size=len(leaves))
        spawned.append(child)
        children_ids.append(pid)
    divergence.children = []
    shared.audit.log("bifurcation", branch=state.public_id,
                     children=children_ids, stem=len(stem),
                     cluster_sizes=[len(c) for c in clusters])
    return "bifurcation", spawned


def _deepest_common_ancestor(leaves, anchor):
    chain = []
    node = leaves[0]
    while node is not anchor:
        chain.append(node)
        node = node.parent
    chain.append(anchor)
    chain.reverse()
    best = anchor
    for cand in chain[1:]:
        if all(_has_ancestor(leaf, cand) for leaf in leaves):
            best = cand
        else:
            break
    return best


def _has_ancestor(node, anc):
    while node is not None:
        if node is anc:
            return True
        node = node.parent
    return False


# -- whole-tree driver --------------------------------------------------


def track_tree(field, seed, cfg=None, seed_direction=None, audit=None):
    """Track the full centerline tree reachable from one seed point.

    The seed is fitted direction-agnostically, tracking proceeds in
    both directions, and bifurcations enqueue child branches processed
    in creation order.  Returns a CenterlineTree; pass an AuditLog to
    capture per-step decisions.
    """
    cfg = (cfg or TrackerConfig()).validate()
    audit = audit if audit is not None else AuditLog()
    seed = np.asarray(seed, dtype=float)
    if not field.contains(seed):
        raise ValueError("seed outside volume")
    shared = _Shared(field, cfg, audit)

    seed_fit = fit_seed(field, seed, cfg, seed_direction)
    audit.log("seed", x0=[float(c) for c in seed_fit.params.x0],
              r=float(seed_fit.params.r),
              raw_score=float(seed_fit.raw_score))
    audit.fits += 1

    states = []
    for rev in (False, True):
        params = seed_fit.params
        if rev:
            flipped = TemplateParams.make(params.x0, -params.v, params.r,
                                          params.gamma)
            fit = fit_template(
                field, flipped,
                window_for(flipped, cfg.weight_window_factor,
                           cfg.step_length_factor * flipped.r),
                shared.fit_opts)
            audit.fits += 1
            if fit.degenerate:
                continue
        else:
            fit = seed_fit
        t = HypothesisTree()
        t.anchor.fit = fit
        st = BranchState(tree=t, tip=fit.params, public_id=0,
                         parent_public_id=None,
                         grace=cfg.self_intersection_grace, reverse=rev)
        st.recent_raws.append(float(seed_fit.raw_score))
        states.append(st)
    shared.index.add(0, seed_fit.params.x0, seed_fit.params.r)

    queue = deque(states)
    done = []
    while queue:
        st = queue.popleft()
        audit.log("branch-run", branch=st.public_id,
                  reverse=st.reverse)
        reason, spawned = track_branch(field, st, cfg, shared)
        done.append(st)
        queue.extend(spawned)

    return _assemble(seed_fit, done, cfg)


def _assemble(seed_fit, states, cfg):
    """Merge the two seed fragments, drop stubs, and re-parent."""
    frag_fwd = [s for s in states if s.public_id == 0 and not s.reverse]
    frag_bwd = [s for s in states if s.public_id == 0 and s.reverse]

    def pts(state):
        return [(*n.fit.params.x0, n.fit.params.r)
                for n in state.committed]

    seed_pt = (*seed_fit.params.x0, seed_fit.params.r)
    root_points = []
    if frag_bwd:
        root_points.extend(reversed(pts(frag_bwd[0])))
    root_points.append(seed_pt)
    if frag_fwd:
        root_points.extend(pts(frag_fwd[0]))
    root_term = frag_fwd[0].reason if frag_fwd else \
        (frag_bwd[0].reason if frag_bwd else "")

    raw = {0: {"parent": None, "points": root_points,
               "termination": root_term}}
    for st in states:
        if st.public_id == 0:
            continue
        raw[st.public_id] = {"parent": st.parent_public_id,
                             "points": pts(st),
                             "termination": st.reason}

    # drop branches with fewer than 2 points, reattaching their
    # children to the dropped branch's parent
    changed = True
    while changed:
        changed = False
        for bid in list(raw):
            if len(raw[bid]["points"]) < 2:
                parent = raw[bid]["parent"]
                for other in raw.values():
                    if other["parent"] == bid:
                        other["parent"] = parent
                del raw[bid]
                changed = True
                break

    branches = [
        Branch(id=bid, parent_id=rec["parent"],
               points=np.asarray(rec["points"],
                                 dtype=float).reshape(-1, 4),
               termination=rec["termination"])
        for bid, rec in sorted(raw.items())
    ]
    return CenterlineTree(seed=np.asarray(seed_fit.params.x0,
                                          dtype=float),
                          branches=branches)

"""Synthetic tubular volumes with exact ground truth.

Voxel values follow the tracker's own image model: background level
plus contrast times the tube profile, with seeded Gaussian noise.
Overlapping branches combine by max so junctions stay bounded by
``m + k`` like real lumens.  Noise is generated per z-slab from
spawned seed sequences, so a parallel renderer would produce identical
output.

The module also ships the fixed phantom suite used by the tests:
straight, tapered, gapped and multi-scale trees whose geometry and
contrasts are chosen so each exercises one tracking behavior.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .template import profile_from_dist_sq
from .tracker import Branch, CenterlineTree
from .volume import Volume

TRUTH_SPACING = 0.25


@dataclass
class BranchSpec:
    """One straight tube segment; radius interpolates linearly from
    start to end when ``r_end`` is given."""

    start: tuple
    end: tuple
    r: float
    r_end: float | None = None
    contrast: float = 1.0
    parent: int | None = None

    def radius_at(self, t):
        """Radius at fraction t in [0, 1] of the arc."""
        if self.r_end is None:
            return self.r + 0.0 * np.asarray(t)
        return self.r + (self.r_end - self.r) * np.asarray(t)

    def length(self):
        a = np.asarray(self.start, dtype=float)
        b = np.asarray(self.end, dtype=float)
        return float(np.linalg.norm(b - a))


@dataclass
class GapSpec:
    """Axial occlusion: branch contributions are replaced by background
    in a slab of ``length`` mm centered ``center`` mm along the arc."""

    branch: int
    center: float
    length: float


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    background: float = 0.0
    noise_sigma: float = 0.0
    rng_seed: int = 0
    gamma: float = 8.0
    branches: list = dataclass_field(default_factory=list)
    gaps: list = dataclass_field(default_factory=list)

    def to_dict(self):
        return {
            "dims": [int(d) for d in self.dims],
            "spacing": [float(s) for s in self.spacing],
            "origin": [float(o) for o in self.origin],
            "background": float(self.background),
            "noise_sigma": float(self.noise_sigma),
            "rng_seed": int(self.rng_seed),
            "gamma": float(self.gamma),
            "branches": [
                {"start": [float(c) for c in b.start],
                 "end": [float(c) for c in b.end],
                 "r": float(b.r),
                 "r_end": None if b.r_end is None else float(b.r_end),
                 "contrast": float(b.contrast),
                 "parent": b.parent}
                for b in self.branches],
            "gaps": [{"branch": g.branch, "center": float(g.center),
                      "length": float(g.length)} for g in self.gaps],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            dims=tuple(d["dims"]), spacing=tuple(d["spacing"]),
            origin=tuple(d.get("origin", (0.0, 0.0, 0.0))),
            background=float(d.get("background", 0.0)),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            rng_seed=int(d.get("rng_seed", 0)),
            gamma=float(d.get("gamma", 8.0)),
            branches=[BranchSpec(
                start=tuple(b["start"]), end=tuple(b["end"]),
                r=float(b["r"]),
                r_end=None if b.get("r_end") is None else float(b["r_end"]),
                contrast=float(b.get("contrast", 1.0)),
                parent=b.get("parent")) for b in d.get("branches", [])],
            gaps=[GapSpec(branch=int(g["branch"]),
                          center=float(g["center"]),
                          length=float(g["length"]))
                  for g in d.get("gaps", [])],
        )


def _voxel_grid(spec):
    """World coordinates of voxel centers, one 1-d array per axis."""
    return tuple(
        spec.origin[a] + spec.spacing[a] * np.arange(spec.dims[a])
        for a in range(3))


def _segment_frame(b):
    a = np.asarray(b.start, dtype=float)
    e = np.asarray(b.end, dtype=float)
    L = np.linalg.norm(e - a)
    if L <= 0:
        raise ValueError("zero-length branch")
    return a, (e - a) / L, float(L)


def render(spec):
    """Render a phantom.

    Returns (Volume, ground-truth CenterlineTree sampled at 0.25 mm).
    Raises ValueError when a branch endpoint lies outside the volume.
    """
    if not spec.branches:
        raise ValueError("phantom needs at least one branch")
    xs, ys, zs = _voxel_grid(spec)
    lo = np.array([xs[0], ys[0], zs[0]])
    hi = np.array([xs[-1], ys[-1], zs[-1]])
    for b in spec.branches:
        for p in (b.start, b.end):
            p = np.asarray(p, dtype=float)
            if np.any(p < lo - 1e-9) or np.any(p > hi + 1e-9):
                raise ValueError(f"branch outside volume: {p}")

    tube = np.zeros(tuple(spec.dims), dtype=float)
    for b in spec.branches:
        _add_branch(tube, b, spec, xs, ys, zs)
    for g in spec.gaps:
        _apply_gap(tube, g, spec, xs, ys, zs)

    data = spec.background + tube
    if spec.noise_sigma > 0:
        for iz in range(spec.dims[2]):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=spec.rng_seed,
                                       spawn_key=(iz,)))
            data[:, :, iz] += spec.noise_sigma * rng.standard_normal(
                (spec.dims[0], spec.dims[1]))

    vol = Volume(data.astype(np.float32), spacing=spec.spacing,
                 origin=spec.origin)
    return vol, ground_truth(spec)


def _branch_box(b, spec, xs, ys, zs, reach):
    """Index slices of the sub-box influenced by a branch."""
    a = np.asarray(b.start, dtype=float)
    e = np.asarray(b.end, dtype=float)
    lo = np.minimum(a, e) - reach
    hi = np.maximum(a, e) + reach
    idx = []
    for coords, lo_c, hi_c in zip((xs, ys, zs), lo, hi):
        i0 = int(np.searchsorted(coords, lo_c, side="left"))
        i1 = int(np.searchsorted(coords, hi_c, side="right"))
        if i0 >= i1:
            return None
        idx.append(slice(i0, i1))
    return tuple(idx)


def _branch_geometry(b, spec, xs, ys, zs, reach):
    """Per-voxel (distance^2 to axis, arc parameter, radius) within the
    branch's influence box."""
    box = _branch_box(b, spec, xs, ys, zs, reach)
    if box is None:
        return None
    a, u, L = _segment_frame(b)
    gx, gy, gz = np.meshgrid(xs[box[0]], ys[box[1]], zs[box[2]],
                             indexing="ij")
    px = gx - a[0]
    py = gy - a[1]
    pz = gz - a[2]
    t = np.clip(px * u[0] + py * u[1] + pz * u[2], 0.0, L)
    dx = px - t * u[0]
    dy = py - t * u[1]
    dz = pz - t * u[2]
    d2 = dx * dx + dy * dy + dz * dz
    # distance past the ends caps the tube
    along = px * u[0] + py * u[1] + pz * u[2]
    over = np.maximum(along - L, 0.0) + np.maximum(-along, 0.0)
    d2 = d2 + over * over
    r = b.radius_at(t / L)
    return box, d2, t, r


def _add_branch(tube, b, spec, xs, ys, zs):
    r_max = max(b.r, b.r if b.r_end is None else b.r_end)
    geo = _branch_geometry(b, spec, xs, ys, zs, reach=4.0 * r_max)
    if geo is None:
        return
    box, d2, _, r = geo
    contrib = b.contrast * profile_from_dist_sq(d2, r, spec.gamma)
    np.maximum(tube[box], contrib, out=tube[box])


def _apply_gap(tube, g, spec, xs, ys, zs):
    b = spec.branches[g.branch]
    r_max = max(b.r, b.r if b.r_end is None else b.r_end)
    geo = _branch_geometry(b, spec, xs, ys, zs, reach=4.0 * r_max)
    if geo is None:
        return
    box, d2, t, r = geo
    inside = (np.abs(t - g.center) <= 0.5 * g.length) \
        & (d2 <= (3.0 * r) ** 2)
    region = tube[box]
    region[inside] = 0.0
    tube[box] = region


def ground_truth(spec):
    """Centerline tree of the spec at 0.25 mm arc sampling."""
    branches = []
    for i, b in enumerate(spec.branches):
        a, u, L = _segment_frame(b)
        n = int(np.ceil(L / TRUTH_SPACING)) + 1
        t = np.linspace(0.0, L, n)
        pts = a[None, :] + t[:, None] * u[None, :]
        r = np.broadcast_to(b.radius_at(t / L), (n,))
        rows = np.column_stack([pts, r])
        branches.append(Branch(id=i, parent_id=b.parent, points=rows,
                               termination="truth"))
    seed = np.asarray(spec.branches[0].start, dtype=float)
    return CenterlineTree(seed=seed, branches=branches)


# -- fixed suite --------------------------------------------------------


@dataclass
class PhantomCase:
    """A rendered suite phantom plus the seed the tests track from."""

    name: str
    spec: PhantomSpec
    volume: Volume
    truth: CenterlineTree
    seed: np.ndarray


def _case(name, spec, seed):
    vol, truth = render(spec)
    return PhantomCase(name=name, spec=spec, volume=vol, truth=truth,
                       seed=np.asarray(seed, dtype=float))


def straight_tube(noise_sigma=0.02, rng_seed=11):
    """r = 2 mm tube spanning the volume along z."""
    spec = PhantomSpec(
        dims=(48, 48, 96), spacing=(0.5, 0.5, 0.5),
        background=0.1, noise_sigma=noise_sigma, rng_seed=rng_seed,
        branches=[BranchSpec(start=(12.0, 12.0, 0.0),
                             end=(12.0, 12.0, 47.5), r=2.0)])
    return _case("straight-tube", spec, (12.0, 12.0, 24.0))


def tapered_tube(noise_sigma=0.02, rng_seed=12):
    """Radius tapering 3 mm to 1 mm along z."""
    spec = PhantomSpec(
        dims=(48, 48, 96), spacing=(0.5, 0.5, 0.5),
        background=0.1, noise_sigma=noise_sigma, rng_seed=rng_seed,
        branches=[BranchSpec(start=(12.0, 12.0, 0.0),
                             end=(12.0, 12.0, 47.5), r=3.0, r_end=1.0)])
    return _case("tapered-tube", spec, (12.0, 12.0, 10.0))


def y_tree(noise_sigma=0.02, rng_seed=13):
    """r = 3 parent splitting into two r = 2 children at +-35 deg."""
    split = np.array([24.0, 12.0, 22.0])
    ang = np.deg2rad(35.0)
    d0 = np.array([np.sin(ang), 0.0, np.cos(ang)])
    d1 = np.array([-np.sin(ang), 0.0, np.cos(ang)])
    L = (47.5 - split[2]) / np.cos(ang)
    spec = PhantomSpec(
        dims=(96, 48, 96), spacing=(0.5, 0.5, 0.5),
        background=0.1, noise_sigma=noise_sigma, rng_seed=rng_seed,
        branches=[
            BranchSpec(start=(24.0, 12.0, 0.0), end=tuple(split), r=3.0),
            BranchSpec(start=tuple(split), end=tuple(split + L * d0),
                       r=2.0, parent=0),
            BranchSpec(start=tuple(split), end=tuple(split + L * d1),
                       r=2.0, parent=0),
        ])
    return _case("y-tree", spec, (24.0, 12.0, 8.0))


def gap_tube(noise_sigma=0.02, rng_seed=14, gap_steps=2.0):
    """Straight r = 2 tube with an occluded stretch a bit past the
    middle; the gap spans ``gap_steps`` raw-mode steps (1.5 r each).
    Background 0 so the occlusion zeroes the intensity."""
    step = 1.5 * 2.0
    spec = PhantomSpec(
        dims=(48, 48, 112), spacing=(0.5, 0.5, 0.5),
        background=0.0, noise_sigma=noise_sigma, rng_seed=rng_seed,
        branches=[BranchSpec(start=(12.0, 12.0, 0.0),
                             end=(12.0, 12.0, 55.5), r=2.0)],
        gaps=[GapSpec(branch=0, center=30.0, length=gap_steps * step)])
    return _case("gap-tube", spec, (12.0, 12.0, 10.0))


def scale_tube(radius, noise_sigma=0.05, rng_seed=15):
    """Single tube at 1 mm voxels for the scale-dependence probes;
    lateral margin scales with the radius."""
    margin = int(np.ceil(4 * radius)) + 8
    nxy = 2 * margin
    spec = PhantomSpec(
        dims=(nxy, nxy, 72), spacing=(1.0, 1.0, 1.0),
        background=0.1, noise_sigma=noise_sigma, rng_seed=rng_seed,
        branches=[BranchSpec(start=(float(margin), float(margin), 0.0),
                             end=(float(margin), float(margin), 71.0),
                             r=float(radius))])
    return _case(f"scale-tube-r{radius:g}", spec,
                 (float(margin), float(margin), 30.0))


def multiscale_tree(noise_sigma=0.05, rng_seed=16):
    """128^3 tree with radii 8/4/2/1.5 mm over three generations.

    Contrast fades with radius (1.0 / 0.85 / 0.7 / 0.5) so single
    raw-score thresholds cannot be right at every scale, while leaf
    tips reach the volume hull so branches finish cleanly.
    """
    dims = (128, 128, 128)
    hull = 127.0
    c = 64.0
    branches = []

    def add(start, direction, length, r, contrast, parent):
        start = np.asarray(start, dtype=float)
        u = np.asarray(direction, dtype=float)
        u = u / np.linalg.norm(u)
        # clip at the hull so endpoints stay inside the volume
        t_max = length
        for a in range(3):
            if u[a] > 1e-12:
                t_max = min(t_max, (hull - start[a]) / u[a])
            elif u[a] < -1e-12:
                t_max = min(t_max, (0.0 - start[a]) / u[a])
        end = start + t_max * u
        branches.append(BranchSpec(start=tuple(start), end=tuple(end),
                                   r=r, contrast=contrast,
                                   parent=parent))
        return len(branches) - 1, end

    def tilt(u, plane, deg):
        u = np.asarray(u, dtype=float)
        w = np.asarray(plane, dtype=float)
        w = w - np.dot(w, u) * u
        w = w / np.linalg.norm(w)
        a = np.deg2rad(deg)
        return np.cos(a) * u + np.sin(a) * w

    z = np.array([0.0, 0.0, 1.0])
    trunk, trunk_end = add((c, c, 0.0), z, 46.0, 8.0, 1.0, None)
    for sx in (1.0, -1.0):
        u1 = tilt(z, (sx, 0.0, 0.0), 38.0)
        g1, end1 = add(trunk_end, u1, 30.0, 4.0, 0.85, trunk)
        for sy in (1.0, -1.0):
            u2 = tilt(u1, (0.0, sy, 0.0), 36.0)
            if sy > 0:
                # this r=2 limb splits again into two r=1.5 leaves
                g2, end2 = add(end1, u2, 26.0, 2.0, 0.7, g1)
                for s3 in (1.0, -1.0):
                    u3 = tilt(u2, (s3 * sx, 0.0, 0.0), 40.0)
                    add(end2, u3, 90.0, 1.5, 0.5, g2)
            else:
                # the other r=2 limb runs straight to the hull
                add(end1, u2, 90.0, 2.0, 0.7, g1)
    spec = PhantomSpec(
        dims=dims, spacing=(1.0, 1.0, 1.0), background=0.1,
        noise_sigma=noise_sigma, rng_seed=rng_seed, branches=branches)
    return _case("multiscale-tree", spec, (c, c, 12.0))


SUITE = {
    "straight-tube": straight_tube,
    "tapered-tube": tapered_tube,
    "y-tree": y_tree,
    "gap-tube": gap_tube,
    "multiscale-tree": multiscale_tree,
}


def build(name, **kw):
    """Build a suite phantom by name (see ``SUITE``)."""
    if name.startswith("scale-tube-r"):
        return scale_tube(float(name[len("scale-tube-r"):]), **kw)
    if name not in SUITE:
        raise ValueError(f"unknown phantom {name!r}")
    return SUITE[name](**kw)

"""Centerline comparison measures.

A centerline is compared against a reference after resampling both to
uniform arc spacing.  Two families are provided: a weighted symmetric
mean point-to-set distance, and radius-aware overlap fractions where a
point counts as matched when the other line passes within the local
reference radius.

Overlap definitions (per ordered line, counts pooled over branches for
trees):

* OV: matched reference plus matched test points over all points of
  both lines.
* OF: same numerator restricted to the reference prefix before the
  first unmatched reference point; test points only count if they
  match that prefix.  The denominator is unchanged, so OF <= OV.
* OT: OV restricted to the reference points with radius >= 0.75 mm,
  with test points restricted to those whose nearest reference point
  lies in that subset.
* AI: mean distance over matched points of both lines (0 when nothing
  matches).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_SPACING = 0.5
LARGE_RADIUS = 0.75
_BRUTE_LIMIT = 4_000_000


@dataclass
class SampledCenterline:
    """Uniform arc-length samples of one polyline."""

    points: np.ndarray
    radii: np.ndarray | None
    spacing: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be (n, 3)")
        if self.radii is not None:
            self.radii = np.asarray(self.radii, dtype=float)
            if self.radii.shape != (self.points.shape[0],):
                raise ValueError("radii shape mismatch")

    def __len__(self):
        return self.points.shape[0]


def resample(polyline, spacing=DEFAULT_SPACING):
    """Resample a polyline to uniform arc spacing.

    ``polyline`` is (n, 3) or (n, 4) with radii in the last column.
    Both endpoints are kept; the realized spacing is the largest value
    <= ``spacing`` that divides the arc length evenly.  Raises
    ValueError for degenerate input (fewer than two points or arc
    length below the requested spacing).
    """
    poly = np.asarray(polyline, dtype=float)
    if poly.ndim != 2 or poly.shape[1] not in (3, 4):
        raise ValueError("polyline must be (n, 3) or (n, 4)")
    if poly.shape[0] < 2:
        raise ValueError("polyline needs at least two points")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = poly[:, :3]
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total < spacing:
        raise ValueError("arc length below requested spacing")
    n_out = int(np.ceil(total / spacing - 1e-9)) + 1
    s = np.linspace(0.0, total, n_out)
    out = np.column_stack([np.interp(s, arc, pts[:, a]) for a in range(3)])
    radii = None
    if poly.shape[1] == 4:
        radii = np.interp(s, arc, poly[:, 3])
    return SampledCenterline(points=out, radii=radii,
                             spacing=total / (n_out - 1))


def resample_tree(tree, spacing=DEFAULT_SPACING):
    """Resample every branch of a centerline tree.

    Returns a dict branch id -> SampledCenterline.  Branches too short
    to resample are skipped.
    """
    out = {}
    for b in tree.branches:
        try:
            out[b.id] = resample(b.points, spacing)
        except ValueError:
            continue
    return out


def _min_dists(a, b):
    """For each point of a, distance to the nearest point of b."""
    if a.shape[0] == 0:
        return np.zeros(0)
    if a.shape[0] * b.shape[0] <= _BRUTE_LIMIT:
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2)).min(axis=1)
    d, _ = cKDTree(b).query(a)
    return d


def _nearest_index(a, b):
    if a.shape[0] * b.shape[0] <= _BRUTE_LIMIT:
        diff = a[:, None, :] - b[None, :, :]
        return np.argmin((diff * diff).sum(axis=2), axis=1)
    _, idx = cKDTree(b).query(a)
    return idx


def centerline_distance(test, ref, weight=0.5):
    """Weighted symmetric mean distance between two point sets.

    ``weight`` scales the test-to-reference term; ``1 - weight`` the
    reference-to-test term, so swapping the arguments while flipping
    the weight leaves the value unchanged.
    """
    a = test.points if isinstance(test, SampledCenterline) else np.asarray(test, dtype=float)
    b = ref.points if isinstance(ref, SampledCenterline) else np.asarray(ref, dtype=float)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty point set")
    return float(weight * _min_dists(a, b).mean()
                 + (1.0 - weight) * _min_dists(b, a).mean())


def _match_labels(test_pts, ref_pts, ref_radii):
    """Boolean matched labels for both lines.

    A reference point is matched when some test point lies within its
    radius; a test point is matched when it lies within the radius of
    some reference point.
    """
    if ref_radii is None:
        raise ValueError("reference radii required for overlap measures")
    n_t = test_pts.shape[0]
    n_r = ref_pts.shape[0]
    ref_hit = np.zeros(n_r, dtype=bool)
    test_hit = np.zeros(n_t, dtype=bool)
    if n_t == 0 or n_r == 0:
        return test_hit, ref_hit
    # block over reference points to bound memory
    block = max(1, _BRUTE_LIMIT // max(n_t, 1))
    for i0 in range(0, n_r, block):
        i1 = min(n_r, i0 + block)
        diff = test_pts[:, None, :] - ref_pts[None, i0:i1, :]
        d = np.sqrt((diff * diff).sum(axis=2))
        within = d < ref_radii[None, i0:i1]
        ref_hit[i0:i1] |= within.any(axis=0)
        test_hit |= within.any(axis=1)
    return test_hit, ref_hit


def overlap_measures(test, ref):
    """OV / OF / OT / AI for a test line against an ordered reference.

    Both arguments are SampledCenterline; the reference must carry
    radii.  Returns a dict with keys "ov", "of", "ot", "ai".
    """
    return _overlap_from_parts([test.points], [(ref.points, ref.radii)])


def _overlap_from_parts(test_parts, ref_parts):
    test_pts = np.vstack([p for p in test_parts if p.shape[0]]) \
        if any(p.shape[0] for p in test_parts) else np.zeros((0, 3))
    denom_t = test_pts.shape[0]
    denom_r = sum(p.shape[0] for p, _ in ref_parts)
    if denom_r == 0:
        raise ValueError("empty reference")

    all_ref = np.vstack([p for p, _ in ref_parts])
    all_rad = np.concatenate([np.asarray(r, dtype=float)
                              for _, r in ref_parts])
    test_hit, ref_hit = _match_labels(test_pts, all_ref, all_rad)

    ov = (ref_hit.sum() + test_hit.sum()) / (denom_r + denom_t)

    # OF: per reference branch, keep the prefix before the first miss
    prefix_mask = np.zeros(all_ref.shape[0], dtype=bool)
    off = 0
    for p, _ in ref_parts:
        n = p.shape[0]
        part_hit = ref_hit[off:off + n]
        miss = np.flatnonzero(~part_hit)
        cut = n if miss.size == 0 else int(miss[0])
        prefix_mask[off:off + cut] = True
        off += n
    if prefix_mask.all():
        of = ov
    else:
        if prefix_mask.any() and denom_t:
            t_pre, r_pre = _match_labels(test_pts, all_ref[prefix_mask],
                                         all_rad[prefix_mask])
            of_num = r_pre.sum() + t_pre.sum()
        else:
            of_num = 0
        of = of_num / (denom_r + denom_t)

    # OT: restrict the universe to reference points at large radius and
    # to test points whose nearest reference point is in that subset;
    # matched labels stay the global ones
    big = all_rad >= LARGE_RADIUS
    if big.any():
        if denom_t:
            nearest = _nearest_index(test_pts, all_ref)
            t_universe = big[nearest]
        else:
            t_universe = np.zeros(0, dtype=bool)
        ot = (ref_hit[big].sum() + test_hit[t_universe].sum()) \
            / (big.sum() + t_universe.sum())
    else:
        ot = 0.0

    # AI: mean nearest distance over matched points of both lines
    dists = []
    if ref_hit.any() and denom_t:
        dists.append(_min_dists(all_ref[ref_hit], test_pts))
    if test_hit.any():
        dists.append(_min_dists(test_pts[test_hit], all_ref))
    ai = float(np.concatenate(dists).mean()) if dists else 0.0

    return {"ov": float(ov), "of": float(of), "ot": float(ot), "ai": ai}


def tree_distance(test_tree, ref_tree, weight=0.5,
                  spacing=DEFAULT_SPACING):
    """Weighted symmetric distance between two centerline trees,
    pooling samples over branches."""
    a = _tree_points(test_tree, spacing)
    b = _tree_points(ref_tree, spacing)
    return centerline_distance(a, b, weight)


def tree_overlap(test_tree, ref_tree, spacing=DEFAULT_SPACING):
    """Overlap measures between trees; reference branch order gives the
    per-branch prefixes used by OF."""
    test_parts = [s.points for s in resample_tree(test_tree,
                                                  spacing).values()]
    ref_parts = []
    for bid, s in resample_tree(ref_tree, spacing).items():
        if s.radii is None:
            raise ValueError("reference tree lacks radii")
        ref_parts.append((s.points, s.radii))
    if not test_parts:
        test_parts = [np.zeros((0, 3))]
    return _overlap_from_parts(test_parts, ref_parts)


def _tree_points(tree, spacing):
    parts = [s.points for s in resample_tree(tree, spacing).values()]
    if not parts:
        raise ValueError("tree has no resampleable branch")
    return np.vstack(parts)

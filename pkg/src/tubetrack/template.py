"""Tubular intensity template and its spatial weighting window.

The template is a flat-topped radial profile around an oriented axis
segment: 1 on the axis, 1/2 at one radius, and a fast polynomial falloff
outside.  Fits against image data are localized by a separable weight:
a radial Gaussian times a soft axial box that reaches further forward
(along the axis direction) than backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SHARPNESS = 8.0

# weight below this is treated as outside the window support
SUPPORT_CUTOFF = 1e-3
_CUTOFF_SIGMAS = np.sqrt(2.0 * np.log(1.0 / SUPPORT_CUTOFF))


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("direction vector must be nonzero")
    return v / n


def orthonormal_frame(v):
    """Deterministic right-handed frame (e1, e2, v) for a unit axis v."""
    v = np.asarray(v, dtype=float)
    k = int(np.argmin(np.abs(v)))
    axis = np.zeros(3)
    axis[k] = 1.0
    e1 = np.cross(v, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(v, e1)
    return e1, e2


@dataclass
class TemplateParams:
    """Geometry of one tubular template instance.

    Attributes
    ----------
    x0 : (3,) float
        Center point on the axis, mm.
    v : (3,) float
        Unit axis direction.
    r : float
        Tube radius in mm, > 0.
    gamma : float
        Falloff sharpness exponent (even, default 8).
    """

    x0: np.ndarray
    v: np.ndarray
    r: float
    gamma: float = DEFAULT_SHARPNESS

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.x0.shape != (3,) or self.v.shape != (3,):
            raise ValueError("x0 and v must be length-3 vectors")
        if abs(np.linalg.norm(self.v) - 1.0) > 1e-9:
            raise ValueError("v must be a unit vector")
        if not self.r > 0:
            raise ValueError("radius must be positive")
        if self.gamma <= 0 or self.gamma % 2 != 0:
            raise ValueError("gamma must be a positive even exponent")

    @classmethod
    def make(cls, x0, v, r, gamma=DEFAULT_SHARPNESS):
        """Build params, normalizing the direction vector."""
        return cls(np.asarray(x0, dtype=float), _unit(v), float(r), gamma)


def axis_dist_sq(x, x0, v):
    """Squared perpendicular distance from points to the line (x0, v)."""
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(x0, dtype=float)
    t = d @ np.asarray(v, dtype=float)
    return np.maximum(np.sum(d * d, axis=-1) - t * t, 0.0)


def profile_from_dist_sq(d2, r, gamma=DEFAULT_SHARPNESS):
    """Template value from squared axis distance (vectorized fast path).

    ``r`` may be a scalar or an array broadcastable against ``d2``.
    """
    rg = np.asarray(r, dtype=float) ** gamma
    return rg / (np.asarray(d2, dtype=float) ** (gamma / 2.0) + rg)


def profile(x, params):
    """Evaluate the tubular template at world points.

    Equals 1 on the axis, 1/2 at distance r, and decays like
    ``(r/d)^gamma`` far from the axis.
    """
    d2 = axis_dist_sq(x, params.x0, params.v)
    return profile_from_dist_sq(d2, params.r, params.gamma)


@dataclass
class WeightWindow:
    """Spatial weighting used during template fitting.

    Radially a Gaussian of scale ``sigma_radial``; axially flat on
    ``[-axial_halfwidth_bwd, +axial_halfwidth_fwd]`` with Gaussian
    shoulders of scale r/2 beyond.  The forward halfwidth is at least
    the backward one, so the window leans along the axis direction.
    """

    window_factor: float
    sigma_radial: float
    axial_halfwidth_fwd: float
    axial_halfwidth_bwd: float

    def __post_init__(self):
        if self.sigma_radial <= 0 or self.axial_halfwidth_fwd <= 0 \
                or self.axial_halfwidth_bwd <= 0:
            raise ValueError("window extents must be positive")
        if self.axial_halfwidth_fwd < self.axial_halfwidth_bwd:
            raise ValueError("forward halfwidth must be >= backward halfwidth")


def window_for(params, window_factor, step_length):
    """Window matched to a template: radial scale ``window_factor * r``,
    forward reach one tracking step, backward reach half a radius."""
    return WeightWindow(
        window_factor=float(window_factor),
        sigma_radial=float(window_factor) * params.r,
        axial_halfwidth_fwd=float(step_length),
        axial_halfwidth_bwd=0.5 * params.r,
    )


def _weight_local(d2, t, r, win):
    """Weight from local cylindrical coordinates (d2 radial^2, t axial)."""
    radial = np.exp(-0.5 * d2 / win.sigma_radial**2)
    shoulder = 0.5 * r
    over = np.maximum(t - win.axial_halfwidth_fwd, 0.0) \
        + np.maximum(-win.axial_halfwidth_bwd - t, 0.0)
    axial = np.exp(-0.5 * (over / shoulder) ** 2)
    return radial * axial


def weight(x, params, win):
    """Evaluate the fitting weight at world points."""
    x = np.asarray(x, dtype=float)
    d = x - params.x0
    t = d @ params.v
    d2 = np.maximum(np.sum(d * d, axis=-1) - t * t, 0.0)
    return _weight_local(d2, t, params.r, win)


def stencil_extents(params, win):
    """(radial, backward, forward) reach in mm of the window support."""
    radial = _CUTOFF_SIGMAS * win.sigma_radial
    shoulder = _CUTOFF_SIGMAS * 0.5 * params.r
    return radial, win.axial_halfwidth_bwd + shoulder, \
        win.axial_halfwidth_fwd + shoulder


def sample_stencil(params, win, density=3.0):
    """Regular sampling grid over the window support.

    Parameters
    ----------
    params : TemplateParams
    win : WeightWindow
    density : float
        Samples per mm along each grid axis.

    Returns
    -------
    points : (n, 3) ndarray
        World-mm sample positions, axis-aligned to the template frame
        and centered on ``params.x0``.
    weights : (n,) ndarray
        Window weight per point; every entry exceeds the support cutoff.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    pts_local, w = _stencil_local(params, win, 1.0 / density)
    if pts_local.shape[0] == 0:
        raise ValueError("stencil is empty; window support too small "
                         "for the requested density")
    e1, e2 = orthonormal_frame(params.v)
    world = (params.x0
             + pts_local[:, 0:1] * e1
             + pts_local[:, 1:2] * e2
             + pts_local[:, 2:3] * params.v)
    return world, w


def _stencil_local(params, win, spacing):
    """Grid in local (e1, e2, axis) coordinates with weights > cutoff."""
    radial, bwd, fwd = stencil_extents(params, win)
    m = int(np.floor(radial / spacing))
    a = spacing * np.arange(-m, m + 1)
    lo = int(np.ceil(-bwd / spacing))
    hi = int(np.floor(fwd / spacing))
    if hi < lo:
        lo = hi = 0
    t = spacing * np.arange(lo, hi + 1)
    aa, bb, tt = np.meshgrid(a, a, t, indexing="ij")
    local = np.column_stack([aa.ravel(), bb.ravel(), tt.ravel()])
    d2 = local[:, 0] ** 2 + local[:, 1] ** 2
    w = _weight_local(d2, local[:, 2], params.r, win)
    keep = w > SUPPORT_CUTOFF
    return local[keep], w[keep]

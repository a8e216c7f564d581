"""Fitting the tubular template to image data.

The image model is ``I(x) = k * T(x) + m + noise`` with template T,
contrast k and background level m.  For fixed geometry, (k, m) solve a
weighted linear least-squares problem in closed form; the geometry
(center offset perpendicular to the axis, axis direction, log radius)
is then refined by Gauss-Newton on the projected weighted residual with
a central-difference Jacobian.

Fits are scored by contrast significance: the fitted contrast divided
by its standard error.  Scores are computed from the stored (k, m,
std_k) triple so they can be audited independently of the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .template import (SUPPORT_CUTOFF, TemplateParams, WeightWindow,
                       orthonormal_frame, sample_stencil, stencil_extents,
                       window_for)

SCORE_VARIANTS = ("contrast", "printed")


@dataclass
class FitOptions:
    """Knobs for the template fit.

    ``samples_per_mm`` bounds the sampling grid pitch from below; the
    pitch also never drops more than ``min_samples_across`` samples
    across a tube diameter, so large templates are sampled
    proportionally to their size instead of at a fixed density.
    """

    max_outer_iters: int = 25
    step_tol_mm: float = 1e-4
    samples_per_mm: float = 3.0
    min_samples_across: int = 5
    max_stencil_points: int = 20000
    fd_step: float = 1e-3
    max_residual_increases: int = 3
    r_min: float = 1.0
    r_max: float = 10.0
    # sampling grid reach in units of the window's Gaussian widths;
    # weights beyond ~2.8 sigma are under 2% and carry squared weight
    # under 4e-4, so truncating there barely moves fits or scores
    support_sigmas: float = 2.8
    # candidates that wander this many radii from their start are
    # abandoned as divergent (None disables the cutoff)
    max_drift_radii: float | None = None
    # "central" halves the finite-difference truncation error,
    # "forward" halves the resampling cost per Gauss-Newton iteration
    fd_scheme: str = "central"

    def spacing_for(self, r):
        """Grid pitch in mm for a template of radius r."""
        return max(1.0 / self.samples_per_mm,
                   2.0 * r / self.min_samples_across)


@dataclass
class LinearFit:
    """Closed-form (k, m) solution at fixed geometry."""

    k: float
    m: float
    std_k: float
    residual_norm: float
    degenerate: bool
    n_points: int


@dataclass
class FitResult:
    """Refined template fit.

    ``raw_score`` stores ``(k - m) / std_k`` (0 when degenerate);
    :meth:`contrast_score` gives the offset-free ``k / std_k`` variant.
    """

    params: TemplateParams
    k: float
    m: float
    std_k: float
    residual_norm: float
    raw_score: float
    converged: bool
    iterations: int
    degenerate: bool = False
    n_points: int = 0

    def contrast_score(self):
        if self.degenerate or not np.isfinite(self.std_k) or self.std_k <= 0:
            return 0.0
        return self.k / self.std_k


def raw_score(fit):
    """Score ``(k - m) / std_k`` of a fit; 0 for degenerate fits."""
    if fit.degenerate or not np.isfinite(fit.std_k) or fit.std_k <= 0:
        return 0.0
    return (fit.k - fit.m) / fit.std_k


def fit_to_dict(fit):
    """JSON-friendly view of a FitResult."""
    p = fit.params
    return {
        "x0": [float(c) for c in p.x0],
        "v": [float(c) for c in p.v],
        "r": float(p.r),
        "gamma": float(p.gamma),
        "k": float(fit.k),
        "m": float(fit.m),
        "std_k": float(fit.std_k),
        "residual_norm": float(fit.residual_norm),
        "raw_score": float(fit.raw_score),
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "degenerate": bool(fit.degenerate),
        "n_points": int(fit.n_points),
    }


def fit_from_dict(d):
    """Inverse of :func:`fit_to_dict`."""
    params = TemplateParams.make(np.asarray(d["x0"], dtype=float),
                                 np.asarray(d["v"], dtype=float),
                                 float(d["r"]), float(d["gamma"]))
    return FitResult(
        params=params, k=float(d["k"]), m=float(d["m"]),
        std_k=float(d["std_k"]), residual_norm=float(d["residual_norm"]),
        raw_score=float(d["raw_score"]), converged=bool(d["converged"]),
        iterations=int(d["iterations"]), degenerate=bool(d["degenerate"]),
        n_points=int(d["n_points"]))


def tracking_score(fit, variant="contrast"):
    """Score used to compare hypotheses during tracking."""
    if variant == "contrast":
        if fit.degenerate or not np.isfinite(fit.std_k) or fit.std_k <= 0:
            return 0.0
        return fit.k / fit.std_k
    if variant == "printed":
        return raw_score(fit)
    raise ValueError(f"unknown score variant {variant!r}")


# -- weighted linear solve ----------------------------------------------


def _linear_solve(I, T, w, n_points=None):
    """Vectorized weighted LS of I against [T, 1] with weights w.

    Accepts (n,) or (C, n) arrays; returns per-candidate (k, m, std_k,
    residual_norm, degenerate).  ``n_points`` overrides the sample count
    used for the degrees of freedom.
    """
    w2 = w * w
    s_w2 = w2.sum(axis=-1)
    s_wT = (w2 * T).sum(axis=-1)
    s_wTT = (w2 * T * T).sum(axis=-1)
    s_wI = (w2 * I).sum(axis=-1)
    s_wTI = (w2 * T * I).sum(axis=-1)
    det = s_wTT * s_w2 - s_wT * s_wT
    scale = np.maximum(s_wTT * s_w2, 1e-300)
    degenerate = (det <= 1e-12 * scale) | (s_w2 <= 0)
    safe_det = np.where(degenerate, 1.0, det)
    k = (s_w2 * s_wTI - s_wT * s_wI) / safe_det
    m = (s_wTT * s_wI - s_wT * s_wTI) / safe_det
    m_fallback = np.where(s_w2 > 0, s_wI / np.maximum(s_w2, 1e-300), 0.0)
    k = np.where(degenerate, 0.0, k)
    m = np.where(degenerate, m_fallback, m)
    res = w * (k[..., None] * T + m[..., None] - I)
    rss = (res * res).sum(axis=-1)
    n = n_points if n_points is not None else I.shape[-1]
    dof = max(n - 2, 1)
    s2 = rss / dof
    std_k = np.sqrt(np.where(degenerate, 0.0, s2 * s_w2 / safe_det))
    degenerate = degenerate | ~np.isfinite(std_k) | (std_k <= 0)
    # residuals are reported per unit weight so that shrinking the
    # window cannot lower the objective by shedding support
    wnorm = np.sqrt(np.maximum(s_w2, 1e-300))
    res = res / wnorm[..., None]
    return k, m, std_k, np.sqrt(rss) / wnorm, degenerate, res


def solve_linear(field, params, win, density=3.0):
    """Closed-form (k, m) fit at fixed geometry over the window stencil.

    Parameters
    ----------
    field : Volume or FunctionField
    params : TemplateParams
    win : WeightWindow
    density : float
        Stencil samples per mm.

    Returns
    -------
    LinearFit
    """
    pts, w = sample_stencil(params, win, density)
    from .template import profile
    T = profile(pts, params)
    I = field.sample(pts)
    k, m, std_k, rnorm, degen, _ = _linear_solve(I, T, w)
    return LinearFit(float(k), float(m), float(std_k), float(rnorm),
                     bool(degen), len(w))


# -- sampling grid shared by a batch of fits ----------------------------


class _Grid:
    """Fixed local-frame sampling grid: columns (a, b) span the
    cross-section, t runs along the axis."""

    __slots__ = ("a", "b", "t", "d2", "n", "spacing", "local")

    def __init__(self, a, b, t, spacing):
        self.a = a
        self.b = b
        self.t = t
        self.d2 = a * a + b * b
        self.n = len(a)
        self.spacing = spacing
        self.local = np.stack([a, b, t], axis=1)


def _build_grid(r, window_factor, fwd_mm, opts, pad=1.2):
    """Grid covering the window support of a radius-r template, with a
    size margin so the radius can grow somewhat during refinement."""
    spacing = opts.spacing_for(r)
    r_pad = r * pad
    probe = TemplateParams.make(np.zeros(3), (0.0, 0.0, 1.0), r_pad)
    win = window_for(probe, window_factor, fwd_mm)
    radial, bwd, fwd = stencil_extents(probe, win)
    # truncate the reach to support_sigmas Gaussian widths
    sig = opts.support_sigmas
    radial = min(radial, sig * win.sigma_radial)
    shoulder = 0.5 * r_pad
    bwd = min(bwd, shoulder + sig * shoulder)
    fwd = min(fwd, float(np.max(fwd_mm)) + sig * shoulder)
    w_min = max(0.5 * SUPPORT_CUTOFF,
                0.999 * float(np.exp(-0.5 * sig * sig)))
    while True:
        m = int(np.floor(radial / spacing))
        ax = spacing * np.arange(-m, m + 1)
        lo = int(np.ceil(-bwd / spacing))
        hi = int(np.floor(fwd / spacing))
        n_est = len(ax) ** 2 * (hi - lo + 1)
        if n_est <= 4 * opts.max_stencil_points or n_est <= 0:
            break
        spacing *= (n_est / (4 * opts.max_stencil_points)) ** (1.0 / 3.0)
    aa, bb, tt = np.meshgrid(ax, ax, spacing * np.arange(lo, hi + 1),
                             indexing="ij")
    a = aa.ravel()
    b = bb.ravel()
    t = tt.ravel()
    d2 = a * a + b * b
    w = _window_weights(d2, t, np.array([r_pad]), window_factor, fwd_mm)[0]
    keep = w > w_min
    if keep.sum() > opts.max_stencil_points:
        # thin deterministically if the support is still oversampled
        idx = np.flatnonzero(keep)
        stride = int(np.ceil(idx.size / opts.max_stencil_points))
        mask = np.zeros_like(keep)
        mask[idx[::stride]] = True
        keep = mask
    if keep.sum() < 8:
        raise ValueError("stencil is empty; window support too small")
    return _Grid(a[keep], b[keep], t[keep], spacing)


def _window_weights(d2, t, R, window_factor, fwd_mm):
    """Window weight arrays, radii broadcast over a shared grid.
    ``fwd_mm`` may be scalar or per-candidate (C,) since each candidate
    keeps the forward reach of the step that proposed it."""
    Rc = R[:, None]
    fwd = np.asarray(fwd_mm, dtype=float)
    if fwd.ndim == 1:
        fwd = fwd[:, None]
    sigma = window_factor * Rc
    radial = np.exp(-0.5 * d2[None, :] / (sigma * sigma))
    shoulder = 0.5 * Rc
    over = np.maximum(t[None, :] - fwd, 0.0) \
        + np.maximum(-shoulder - t[None, :], 0.0)
    return radial * np.exp(-0.5 * (over / shoulder) ** 2)


def _template_values(d2, R, gamma):
    rg = R[:, None] ** gamma
    return rg / (d2[None, :] ** (gamma / 2.0) + rg)


def _batch_frames(V):
    """Orthonormal frames for unit rows of V with a fixed axis pick."""
    k = np.argmin(np.abs(V), axis=1)
    basis = np.zeros_like(V)
    basis[np.arange(len(V)), k] = 1.0
    E1 = np.cross(V, basis)
    E1 /= np.linalg.norm(E1, axis=1, keepdims=True)
    E2 = np.cross(V, E1)
    return E1, E2


def _world_points(grid, X0, E1, E2, V):
    # one batched (n,3)@(C,3,3) product beats three broadcast temporaries
    F = np.stack([E1, E2, V], axis=1)
    pts = np.matmul(grid.local, F)
    pts += X0[:, None, :]
    return pts


def _sample(field, pts):
    C, n, _ = pts.shape
    return field.sample(pts.reshape(-1, 3)).reshape(C, n)


# -- batched Gauss-Newton refinement ------------------------------------


def fit_templates(field, inits, window_factor, fwd_mm, opts=None):
    """Refine a batch of template fits sharing one weight-window shape.

    ``fwd_mm`` (forward axial reach of each window, usually the step
    that proposed the candidate) may be a scalar or one value per init.
    Candidates are grouped by radius so each group shares a sampling
    grid.  Results are returned in input order.
    """
    opts = opts or FitOptions()
    if opts.fd_scheme not in ("central", "forward"):
        raise ValueError(f"unknown fd scheme {opts.fd_scheme!r}")
    if not inits:
        return []
    fwd_all = np.broadcast_to(np.asarray(fwd_mm, dtype=float),
                              (len(inits),))
    order = sorted(range(len(inits)), key=lambda i: inits[i].r)
    results = [None] * len(inits)
    group = [order[0]]
    for idx in order[1:]:
        if inits[idx].r <= inits[group[0]].r * 1.3:
            group.append(idx)
        else:
            _fit_group(field, inits, group, window_factor, fwd_all, opts,
                       results)
            group = [idx]
    _fit_group(field, inits, group, window_factor, fwd_all, opts, results)
    return results


def _fit_group(field, inits, idxs, window_factor, fwd_all, opts, results):
    C = len(idxs)
    gamma = inits[idxs[0]].gamma
    X0 = np.array([inits[i].x0 for i in idxs], dtype=float)
    V = np.array([inits[i].v for i in idxs], dtype=float)
    R0 = np.array([inits[i].r for i in idxs], dtype=float)
    fwd_mm = np.array([fwd_all[i] for i in idxs], dtype=float)
    for i in idxs:
        if not (opts.r_min * (1 - 1e-9) <= inits[i].r
                <= opts.r_max * (1 + 1e-9)):
            raise ValueError(
                f"init radius {inits[i].r:g} outside bounds "
                f"[{opts.r_min:g}, {opts.r_max:g}]")
        if inits[i].gamma != gamma:
            raise ValueError("mixed sharpness exponents in one batch")
    logR = np.log(np.clip(R0, opts.r_min, opts.r_max))
    grid = _build_grid(float(np.exp(np.median(logR))), window_factor,
                       float(fwd_mm.max()), opts)
    h = opts.fd_step
    lo, hi = np.log(opts.r_min), np.log(opts.r_max)

    def evaluate(X0c, Vc, Rc, E1, E2, fwd, I=None):
        if I is None:
            I = _sample(field, _world_points(grid, X0c, E1, E2, Vc))
        T = _template_values(grid.d2, Rc, gamma)
        w = _window_weights(grid.d2, grid.t, Rc, window_factor, fwd)
        k, m, std_k, rnorm, degen, res = _linear_solve(I, T, w)
        return I, T, w, k, m, std_k, rnorm, degen, res

    increases = np.zeros(C, dtype=int)
    lam = np.full(C, 1e-3)
    X0_init = X0.copy()
    R_init = np.exp(logR)
    prev_rnorm = np.full(C, np.inf)
    best = {
        "rnorm": np.full(C, np.inf), "X0": X0.copy(), "V": V.copy(),
        "logR": logR.copy(), "degen": np.ones(C, dtype=bool),
    }
    converged = np.zeros(C, dtype=bool)
    iters = np.zeros(C, dtype=int)
    act = np.arange(C)

    for _ in range(opts.max_outer_iters):
        if act.size == 0:
            break
        Xa, Va, logRa = X0[act], V[act], logR[act]
        fwd_a = fwd_mm[act]
        E1, E2 = _batch_frames(Va)
        Ra = np.exp(logRa)
        I, T, w, k, m, std_k, rnorm, degen, res = evaluate(Xa, Va, Ra,
                                                           E1, E2, fwd_a)
        improved = rnorm < best["rnorm"][act]
        tgt = act[improved]
        best["X0"][tgt] = Xa[improved]
        best["V"][tgt] = Va[improved]
        best["logR"][tgt] = logRa[improved]
        best["rnorm"][tgt] = rnorm[improved]
        best["degen"][tgt] = degen[improved]
        worse = rnorm > prev_rnorm[act]
        increases[act] = np.where(worse, increases[act] + 1, 0)
        lam[act] = np.where(worse, np.minimum(lam[act] * 10.0, 1e8),
                            np.maximum(lam[act] * 0.3, 1e-10))
        prev_rnorm[act] = rnorm
        keep = increases[act] < opts.max_residual_increases
        if not keep.any():
            break
        act = act[keep]
        Xa, Va, logRa, Ra = Xa[keep], Va[keep], logRa[keep], Ra[keep]
        fwd_a = fwd_a[keep]
        E1, E2 = E1[keep], E2[keep]
        I, T, w, res = I[keep], T[keep], w[keep], res[keep]
        iters[act] += 1

        # Jacobian by central differences; position and direction
        # perturbations only move the sample points, so T and w are
        # reused and just the image is resampled.
        w2 = w * w
        s_w2 = w2.sum(axis=1)
        s_wT = (w2 * T).sum(axis=1)
        s_wTT = (w2 * T * T).sum(axis=1)
        det = s_wTT * s_w2 - s_wT * s_wT
        safe_det = np.where(np.abs(det) < 1e-300, 1.0, det)
        wnorm = np.sqrt(np.maximum(s_w2, 1e-300))

        def geo_residual(X0p, Vp):
            E1p, E2p = _frames_like(Vp, Va)
            Ip = _sample(field, _world_points(grid, X0p, E1p, E2p, Vp))
            s_wI = (w2 * Ip).sum(axis=1)
            s_wTI = (w2 * T * Ip).sum(axis=1)
            kp = (s_w2 * s_wTI - s_wT * s_wI) / safe_det
            mp = (s_wTT * s_wI - s_wT * s_wTI) / safe_det
            return w * (kp[:, None] * T + mp[:, None] - Ip) \
                / wnorm[:, None]

        def rho_residual(sign):
            Rp = np.exp(logRa + sign * h)
            Tp = _template_values(grid.d2, Rp, gamma)
            wp = _window_weights(grid.d2, grid.t, Rp, window_factor, fwd_a)
            _, _, _, _, _, resp = _linear_solve(I, Tp, wp)
            return resp

        n_act = act.size
        J = np.empty((n_act, grid.n, 5))
        if opts.fd_scheme == "central":
            J[:, :, 0] = (geo_residual(Xa + h * E1, Va)
                          - geo_residual(Xa - h * E1, Va)) / (2 * h)
            J[:, :, 1] = (geo_residual(Xa + h * E2, Va)
                          - geo_residual(Xa - h * E2, Va)) / (2 * h)
            J[:, :, 2] = (geo_residual(Xa, _renorm(Va + h * E1))
                          - geo_residual(Xa, _renorm(Va - h * E1))) \
                / (2 * h)
            J[:, :, 3] = (geo_residual(Xa, _renorm(Va + h * E2))
                          - geo_residual(Xa, _renorm(Va - h * E2))) \
                / (2 * h)
            J[:, :, 4] = (rho_residual(+1.0) - rho_residual(-1.0)) / (2 * h)
        else:
            # forward differences reuse the base residual, halving the
            # image resampling work per iteration
            J[:, :, 0] = (geo_residual(Xa + h * E1, Va) - res) / h
            J[:, :, 1] = (geo_residual(Xa + h * E2, Va) - res) / h
            J[:, :, 2] = (geo_residual(Xa, _renorm(Va + h * E1)) - res) / h
            J[:, :, 3] = (geo_residual(Xa, _renorm(Va + h * E2)) - res) / h
            J[:, :, 4] = (rho_residual(+1.0) - res) / h

        Jt = J.transpose(0, 2, 1)
        H = np.matmul(Jt, J)
        g = np.matmul(Jt, res[:, :, None])[:, :, 0]
        # Levenberg damping, loosened after improving iterations and
        # tightened after worsening ones, prevents limit cycles that a
        # pure Gauss-Newton step can fall into
        diag = np.einsum("cpp->cp", H)
        floor = 1e-12 * np.maximum(diag.max(axis=1, keepdims=True), 1e-30)
        Hd = H.copy()
        ax = np.arange(5)
        Hd[:, ax, ax] += lam[act][:, None] * np.maximum(diag, floor)
        try:
            delta = -np.linalg.solve(Hd, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = np.stack([
                -np.linalg.lstsq(Hd[i], g[i], rcond=None)[0]
                for i in range(n_act)])

        # trust region: limit each step to half a radius
        new_logR = np.clip(logRa + delta[:, 4], lo, hi)
        drho = new_logR - logRa
        step_mm = np.sqrt(delta[:, 0] ** 2 + delta[:, 1] ** 2
                          + (Ra * delta[:, 2]) ** 2
                          + (Ra * delta[:, 3]) ** 2
                          + (Ra * drho) ** 2)
        cap = 0.5 * Ra
        scale = np.where(step_mm > cap, cap / np.maximum(step_mm, 1e-300),
                         1.0)
        delta *= scale[:, None]
        drho *= scale
        step_mm *= scale

        X0[act] = Xa + delta[:, 0:1] * E1 + delta[:, 1:2] * E2
        V[act] = _renorm(Va + delta[:, 2:3] * E1 + delta[:, 3:4] * E2)
        logR[act] = np.clip(logRa + drho, lo, hi)

        done = step_mm < opts.step_tol_mm
        converged[act[done]] = True
        if opts.max_drift_radii is not None:
            drift = np.linalg.norm(X0[act] - X0_init[act], axis=1)
            done |= drift > opts.max_drift_radii * R_init[act]
        act = act[~done]

    # final bookkeeping at the best-seen geometry
    E1, E2 = _batch_frames(best["V"])
    Rb = np.exp(best["logR"])
    _, _, _, k, m, std_k, rnorm, degen, _ = evaluate(
        best["X0"], best["V"], Rb, E1, E2, fwd_mm)
    for slot, ci in enumerate(idxs):
        params = TemplateParams.make(best["X0"][slot], best["V"][slot],
                                     float(Rb[slot]), gamma)
        fr = FitResult(
            params=params, k=float(k[slot]), m=float(m[slot]),
            std_k=float(std_k[slot]), residual_norm=float(rnorm[slot]),
            raw_score=0.0, converged=bool(converged[slot]),
            iterations=int(iters[slot]), degenerate=bool(degen[slot]),
            n_points=grid.n)
        fr.raw_score = raw_score(fr)
        results[ci] = fr


def _renorm(V):
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def _frames_like(Vp, Vref):
    """Frames for perturbed directions keeping the reference axis pick,
    so finite differences stay on one branch."""
    k = np.argmin(np.abs(Vref), axis=1)
    basis = np.zeros_like(Vp)
    basis[np.arange(len(Vp)), k] = 1.0
    E1 = np.cross(Vp, basis)
    E1 /= np.linalg.norm(E1, axis=1, keepdims=True)
    E2 = np.cross(Vp, E1)
    return E1, E2


def fit_template(field, init, win=None, opts=None):
    """Refine one template fit.

    Parameters
    ----------
    field : Volume or FunctionField
    init : TemplateParams
        Starting geometry; its radius must lie within the option bounds.
    win : WeightWindow, optional
        Defaults to the standard window for ``init`` with forward reach
        ``1.1 * r``.
    opts : FitOptions, optional

    Returns
    -------
    FitResult
    """
    opts = opts or FitOptions()
    if win is None:
        win = window_for(init, 1.0, 1.1 * init.r)
    return fit_templates(field, [init], win.window_factor,
                         win.axial_halfwidth_fwd, opts)[0]


# -- residual surface for gradient checks -------------------------------


class ResidualModel:
    """Weighted projected residual on a frozen grid, as a function of
    the 5 geometry parameters (da, db, dalpha, dbeta, dlogr) about a
    reference template.  Mirrors the optimizer's parameterization."""

    def __init__(self, field, params, win, opts=None):
        self.field = field
        self.ref = params
        self.window_factor = win.window_factor
        self.fwd_mm = win.axial_halfwidth_fwd
        self.opts = opts or FitOptions()
        self.grid = _build_grid(params.r, win.window_factor,
                                win.axial_halfwidth_fwd, self.opts, pad=1.0)
        self.E1, self.E2 = orthonormal_frame(params.v)

    def _geometry(self, p):
        a, b, alpha, beta, rho = p
        x0 = self.ref.x0 + a * self.E1 + b * self.E2
        v = self.ref.v + alpha * self.E1 + beta * self.E2
        v = v / np.linalg.norm(v)
        r = self.ref.r * np.exp(rho)
        return x0, v, r

    def residual(self, p=None):
        x0, v, r = self._geometry(p if p is not None else np.zeros(5))
        k_idx = int(np.argmin(np.abs(self.ref.v)))
        basis = np.zeros(3)
        basis[k_idx] = 1.0
        e1 = np.cross(v, basis)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(v, e1)
        g = self.grid
        world = (x0 + g.a[:, None] * e1 + g.b[:, None] * e2
                 + g.t[:, None] * v)
        I = self.field.sample(world)[None, :]
        R = np.array([r])
        T = _template_values(g.d2, R, self.ref.gamma)
        w = _window_weights(g.d2, g.t, R, self.window_factor, self.fwd_mm)
        _, _, _, _, _, res = _linear_solve(I, T, w)
        return res[0]

    def jacobian(self, p=None, fd_step=None):
        """Central-difference Jacobian of :meth:`residual`, the same
        construction the Gauss-Newton loop uses."""
        p = np.zeros(5) if p is None else np.asarray(p, dtype=float)
        h = fd_step if fd_step is not None else self.opts.fd_step
        J = np.empty((self.grid.n, 5))
        for j in range(5):
            dp = np.zeros(5)
            dp[j] = h
            J[:, j] = (self.residual(p + dp) - self.residual(p - dp)) / (2 * h)
        return J

"""Estimation of the initial momentum and pre-weights.

The objective is differentiated exactly through the discrete forward pass
(RK4 stages, kernel applications, interpolation and penalties) and minimized
by gradient descent with backtracking over a coarse-to-fine scale pyramid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import MODES, RegistrationConfig, canonical_mode, default_config
from .dynamics import GeodesicState, IntegratorConfig, energy, shoot_vjp
from .exceptions import (
    IntegrationBlowupError,
    InvalidParameterError,
    NumericalError,
    ShapeMismatchError,
)
from .fields import GridSpec, compose_map, identity_map, resample
from .kernels import (
    constant_preweights,
    gauss_conv,
    kernel_apply_vjp,
    normalize_preweights,
)
from .metrics import dice_per_label, fold_measure, warp_labels
from .objectives import ObjectiveBreakdown, _Forward, omt_penalty, range_penalty, similarity

__all__ = [
    "RegistrationResult",
    "objective_gradient",
    "project_tangent",
    "optimize",
    "gradient_check",
    "objective_value",
]

log = logging.getLogger(__name__)


def project_tangent(g, h):
    """Remove the component of ``g`` along ``h`` at every node (``h`` unit-norm over axis 0)."""
    return g - np.sum(g * h, axis=0) * h


def _positive_preweights(z):
    """``h = |z| / ||z||`` pointwise."""
    return normalize_preweights(np.abs(z))


def _forward(m0, h0, I0, I1, cfg: RegistrationConfig, T):
    return _Forward(m0, h0, I0, I1, cfg.kernel, cfg.similarity, cfg.penalties, T,
                    cfg.integrator, cfg.lambda_kin, include_reg=cfg.optimizes_preweights)


def _backward(fwd: _Forward, cfg: RegistrationConfig):
    kernel = cfg.kernel
    d = fwd.m0.shape[0]
    n = fwd.I0.size
    _, g_img = similarity(fwd.warped, fwd.I1, cfg.similarity, grad=True)
    g_phi1 = fwd.stencil.point_gradient(fwd.I0) * g_img
    g_m0, _, g_h0 = shoot_vjp(fwd.states, fwd.h0, kernel, np.zeros_like(fwd.m0), g_phi1)
    # kinetic term 1/2 <m0, v0>, with v0 depending on both m0 and h0
    half = 0.5 * fwd.lambda_kin / n
    g_m_k, g_w = kernel_apply_vjp(fwd.m0, fwd.weights0.w, fwd.nu0, half * fwd.m0, kernel)
    g_m0 = g_m0 + g_m_k + half * fwd.v0
    if fwd.lam_omt:
        g_w = g_w + fwd.lam_omt * omt_penalty(fwd.weights0.w, kernel, grad=True)[1]
    g_h0 = g_h0 + fwd.weights0.vjp(g_w)[0]
    if fwd.lam_range:
        g_h0 = g_h0 + fwd.lam_range * range_penalty(fwd.h0, cfg.penalties.w0_sq, kernel,
                                                    grad=True)[1]
    g_h0 = project_tangent(g_h0, fwd.h0)
    if not (np.all(np.isfinite(g_m0)) and np.all(np.isfinite(g_h0))):
        raise NumericalError(
            "non-finite gradient",
            diagnostics={
                "nonfinite_m0": int(np.count_nonzero(~np.isfinite(g_m0))),
                "nonfinite_h0": int(np.count_nonzero(~np.isfinite(g_h0))),
                "objective": fwd.breakdown.total,
                "dims": d,
            },
        )
    return g_m0, g_h0


def objective_gradient(state0: GeodesicState, I0, I1, cfg: RegistrationConfig, T: float = 0):
    """Exact gradient of the discrete objective at ``state0``.

    Returns ``(grad_m0, grad_h0)`` where ``grad_h0`` is projected onto the
    tangent of the unit-norm constraint. The pre-weight penalties enter only
    in joint mode, where the pre-weights are free parameters.
    """
    fwd = _forward(state0.m, state0.h0, I0, I1, cfg, T)
    return _backward(fwd, cfg)


@dataclass
class RegistrationResult:
    """Output of :func:`optimize`.

    ``phi_inv_final`` and ``warped`` live on the full-resolution grid, while
    ``m0`` and ``h0`` are on the grid of the last scale. Each ``per_iteration``
    row stores the breakdown after an accepted step, ``start_total`` (the
    objective before that step, at the same penalty weights) and the step size.
    """

    phi_inv_final: np.ndarray
    m0: np.ndarray
    h0: np.ndarray
    warped: np.ndarray
    per_iteration: list
    metrics: dict
    status: str
    config: RegistrationConfig = field(repr=False, default=None)


def _initial_preweights(mode, cfg, dims, h0):
    if mode == "rdmm_fixed":
        if h0 is None:
            raise InvalidParameterError("rdmm_fixed mode needs pre-weights")
        return np.asarray(h0, dtype=float)
    if h0 is not None:
        if mode == "lddmm":
            raise InvalidParameterError("lddmm mode uses constant pre-weights; do not pass h0")
        return np.asarray(h0, dtype=float)
    return constant_preweights(cfg.penalties.w0_sq, dims)


def _descend(m, h, I0, I1, cfg, n_iter, T, scale, log_rows):
    """Backtracking gradient descent at one scale. Returns ``(m, h, T, status, fwd)``."""
    opt = cfg.optimizer
    joint = cfg.optimizes_preweights
    n = I0.size
    fwd = _forward(m, h, I0, I1, cfg, T)
    step = opt.step_size
    status = "max_iterations"
    for _ in range(n_iter):
        g_m, g_h = _backward(fwd, cfg)
        # L2 Riesz representer of the node-averaged inner product
        d_m = -n * g_m
        d_h = -n * opt.preweight_step_scale * g_h if joint else None
        slope = float(np.sum(g_m * d_m)) + (float(np.sum(g_h * d_h)) if joint else 0.0)
        if np.sqrt(-slope / n) < opt.grad_tol:
            status = "converged"
            break
        f0 = fwd.breakdown.total
        trial = None
        while step >= opt.min_step:
            m_t = m + step * d_m
            h_t = _positive_preweights(h + step * d_h) if joint else h
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    cand = _forward(m_t, h_t, I0, I1, cfg, T)
            except IntegrationBlowupError:
                cand = None
            if cand is not None and cand.breakdown.total <= f0 + opt.armijo * step * slope:
                trial = cand
                break
            step *= opt.shrink
        if trial is None:
            status = "converged"
            break
        m, h, fwd = m_t, h_t, trial
        row = {"iteration": T, "scale": scale, **fwd.breakdown.as_row(),
               "start_total": f0, "step_size": step}
        log_rows.append(row)
        T += 1
        fwd.set_iteration(T)
        step *= opt.grow
    return m, h, T, status, fwd


def optimize(I0, I1, cfg: RegistrationConfig | None = None, h0=None, labels=None,
             callback=None) -> RegistrationResult:
    """Register ``I0`` (source) to ``I1`` (target).

    Parameters
    ----------
    I0, I1 : ndarray
        Intensity-normalized images on the same grid.
    cfg : RegistrationConfig, optional
        Defaults to the joint-mode settings.
    h0 : ndarray, shape (N, *dims), optional
        Initial pre-weights. Required and left untouched in ``rdmm_fixed``
        mode; optional starting point in ``rdmm_joint`` mode.
    labels : (ndarray, ndarray), optional
        Source and target label maps; enables per-label Dice in the metrics.
    callback : callable, optional
        Called as ``callback(scale_index, row)`` after every accepted step.
    """
    cfg = cfg or default_config()
    I0 = np.asarray(I0, dtype=float)
    I1 = np.asarray(I1, dtype=float)
    if I0.shape != I1.shape:
        raise ShapeMismatchError(f"grid mismatch: {I0.shape} vs {I1.shape}")
    full = GridSpec.from_shape(I0.shape)
    mode = cfg.mode
    h_full = _initial_preweights(mode, cfg, full.dims, h0)
    if h_full.shape != (cfg.kernel.n_kernels,) + full.dims:
        raise ShapeMismatchError(
            f"pre-weights must have shape {(cfg.kernel.n_kernels,) + full.dims}, got {h_full.shape}"
        )
    frozen = mode != "rdmm_joint"
    rows: list = []
    T = 0
    m = h = None
    status = "max_iterations"
    fwd = None
    for s_idx, (factor, n_iter) in enumerate(cfg.scales):
        grid = full.scaled(factor)
        I0s = resample(I0, grid)
        I1s = resample(I1, grid)
        if m is None:
            m = np.zeros((grid.ndim,) + grid.dims)
        else:
            m = resample(m, grid, ndim=grid.ndim)
        source = h_full if (frozen or h is None) else h
        h = resample(source, grid, ndim=grid.ndim)
        if h.shape[1:] != h_full.shape[1:] or not frozen:
            h = normalize_preweights(h) if frozen else _positive_preweights(h)
        n_before = len(rows)
        try:
            budget = max(0, min(n_iter, cfg.optimizer.max_iterations - len(rows)))
            m, h, T, status, fwd = _descend(m, h, I0s, I1s, cfg, budget, T, factor, rows)
        except IntegrationBlowupError as exc:
            exc.last_state = GeodesicState.initial(m, h)
            raise
        if callback is not None:
            for row in rows[n_before:]:
                callback(s_idx, row)
        log.info("scale %.3g: %d accepted steps, objective %.6g (%s)", factor,
                 len(rows) - n_before, fwd.breakdown.total, status)
    phi = fwd.states[-1][1]
    if phi.shape[1:] == full.dims:
        phi_full = phi.copy()
    else:
        disp = phi - identity_map(phi.shape[1:])
        phi_full = identity_map(full) + resample(disp, full, ndim=full.ndim)
    warped = compose_map(I0, phi_full)
    metrics = _final_metrics(fwd, cfg, phi_full, labels)
    return RegistrationResult(
        phi_inv_final=phi_full,
        m0=m,
        h0=h,
        warped=warped,
        per_iteration=rows,
        metrics=metrics,
        status=status,
        config=cfg,
    )


def _final_metrics(fwd, cfg, phi_full, labels):
    kernel = cfg.kernel
    m1, phi1 = fwd.states[-1]
    e0 = energy(GeodesicState.initial(fwd.m0, fwd.h0), kernel)
    e1 = energy(GeodesicState(m=m1, phi_inv=phi1, h0=fwd.h0, t=1.0), kernel)
    count, mass = fold_measure(phi_full)
    interior_count, _ = fold_measure(phi_full, interior_only=True)
    metrics = {
        "objective": fwd.breakdown.as_row(),
        "fold_count": count,
        "fold_count_interior": interior_count,
        "fold_mass": mass,
        "energy_initial": e0,
        "energy_final": e1,
        "energy_drift": abs(e1 - e0) / e0 if e0 > 0 else 0.0,
    }
    if labels is not None:
        src, tgt = labels
        metrics["dice"] = dice_per_label(warp_labels(src, phi_full), tgt)
        metrics["dice_identity"] = dice_per_label(src, tgt)
    return metrics


# ----------------------------------------------------------------------------
# finite-difference verification


def _smooth_field(rng, shape, dims, sigma, amplitude):
    noise = rng.standard_normal(shape)
    field = gauss_conv(noise, sigma, ndim=len(dims))
    return amplitude * field / np.max(np.abs(field))


def _blob_image(rng, grid):
    x = grid.coordinates()
    img = np.zeros(grid.dims)
    for _ in range(3):
        c = rng.uniform(0.3, 0.7, size=grid.ndim).reshape((-1,) + (1,) * grid.ndim)
        r = rng.uniform(0.1, 0.2)
        img += rng.uniform(0.4, 1.0) * np.exp(-np.sum((x - c) ** 2, axis=0) / (2 * r * r))
    return img / img.max()


def _rel_err(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def gradient_check(size: int = 16, seed: int = 1, n_steps: int = 5, modes=MODES,
                   n_coords: int = 5, eps: float = 1e-5, T: float = 3.0) -> dict:
    """Compare adjoint gradients with central finite differences of the objective.

    For every mode, ``n_coords`` momentum coordinates (drawn among those with
    gradient magnitude at least 1% of the largest) are checked directly. In
    joint mode the projected pre-weight gradient is additionally checked along
    ``n_coords`` random tangent directions, perturbing and renormalizing the
    pre-weights. Returns ``{mode: max relative error}`` plus ``"max"``.
    """
    rng = np.random.default_rng(seed)
    grid = GridSpec((size, size))
    I0 = _blob_image(rng, grid)
    I1 = _blob_image(rng, grid)
    out = {}
    for mode in modes:
        mode = canonical_mode(mode)
        cfg = default_config(mode).with_updates(integrator=IntegratorConfig(n_steps=n_steps))
        m0 = _smooth_field(rng, (2,) + grid.dims, grid.dims, 0.1, 0.05)
        if mode == "lddmm":
            h0 = constant_preweights(cfg.penalties.w0_sq, grid.dims)
        elif mode == "rdmm_fixed":
            mask = I0 > 0.5
            fg = np.sqrt(np.array([0.2, 0.5, 0.3, 0.0]))
            bg = np.array([0.0, 0.0, 0.0, 1.0])
            h0 = np.where(mask, fg[:, None, None], bg[:, None, None])
        else:
            ref = constant_preweights(cfg.penalties.w0_sq, grid.dims)
            h0 = _positive_preweights(ref + _smooth_field(rng, ref.shape, grid.dims, 0.1, 0.1))

        def f(m, h):
            return _forward(m, h, I0, I1, cfg, T).breakdown.total

        g_m, g_h = objective_gradient(GeodesicState.initial(m0, h0), I0, I1, cfg, T)
        candidates = np.flatnonzero(np.abs(g_m) >= 0.01 * np.abs(g_m).max())
        errors = []
        for idx in rng.choice(candidates, size=min(n_coords, candidates.size), replace=False):
            e = np.zeros(m0.size)
            e[idx] = eps
            e = e.reshape(m0.shape)
            fd = (f(m0 + e, h0) - f(m0 - e, h0)) / (2 * eps)
            errors.append(_rel_err(fd, g_m.flat[idx]))
        if mode == "rdmm_joint":
            for _ in range(n_coords):
                t = project_tangent(_smooth_field(rng, h0.shape, grid.dims, 0.1, 1.0), h0)
                fd = (f(m0, normalize_preweights(h0 + eps * t))
                      - f(m0, normalize_preweights(h0 - eps * t))) / (2 * eps)
                errors.append(_rel_err(fd, float(np.sum(g_h * t))))
        out[mode] = max(errors)
    out["max"] = max(out.values())
    return out


def objective_value(state0: GeodesicState, I0, I1, cfg: RegistrationConfig,
                    T: float = 0) -> ObjectiveBreakdown:
    """Objective breakdown with the same term selection as :func:`objective_gradient`."""
    return _forward(state0.m, state0.h0, I0, I1, cfg, T).breakdown

"""Similarity measures, pre-weight penalties and the shooting objective.

The registration energy minimized over the initial momentum ``m0`` and the
initial pre-weights ``h0`` is

    lambda_kin * 1/2 ||v(0)||_L^2 + Sim(I0 o phi_inv(1), I1)
        + lambda_omt(T) * OMT(w(0)) + lambda_range(T) * Range(h0)

where the penalty weights follow an iteration-dependent decay schedule. Every
term here comes with its gradient so the optimizer can assemble the exact
gradient of the discrete objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .dynamics import IntegratorConfig, WeightPullback, shoot
from .exceptions import InvalidParameterError, ShapeMismatchError
from .fields import Stencil, identity_map
from .kernels import MultiGaussianKernel, gauss_conv, kernel_apply, velocity_norm_sq

__all__ = [
    "SimilarityConfig",
    "RegPenaltyConfig",
    "ObjectiveBreakdown",
    "ssd",
    "mk_lncc",
    "similarity",
    "omt_penalty",
    "range_penalty",
    "decay_weights",
    "shooting_objective",
]

SIMILARITY_KINDS = ("ssd", "lncc", "mk_lncc")


@dataclass(frozen=True)
class SimilarityConfig:
    """Image similarity settings.

    ``windows`` lists ``(size_in_nodes, weight)`` pairs for (mk-)LNCC; sizes
    must be odd and >= 3, weights non-negative and summing to one.
    """

    kind: str = "mk_lncc"
    windows: tuple = ((5, 0.3), (11, 0.3), (21, 0.4))
    eps: float = 1e-5

    def __post_init__(self):
        kind = self.kind.lower().replace("-", "_")
        if kind not in SIMILARITY_KINDS:
            raise InvalidParameterError(f"unknown similarity {self.kind!r}")
        windows = tuple((int(s), float(w)) for s, w in self.windows)
        if kind != "ssd":
            if not windows:
                raise InvalidParameterError("LNCC needs at least one window")
            for size, weight in windows:
                if size < 3 or size % 2 == 0:
                    raise InvalidParameterError(f"window sizes must be odd and >= 3, got {size}")
                if weight < 0:
                    raise InvalidParameterError("window weights must be non-negative")
            if abs(sum(w for _, w in windows) - 1.0) > 1e-9:
                raise InvalidParameterError("window weights must sum to 1")
        if not self.eps > 0:
            raise InvalidParameterError("eps must be positive")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "windows", windows)

    def to_dict(self):
        return {"kind": self.kind, "windows": [list(w) for w in self.windows], "eps": self.eps}


@dataclass(frozen=True)
class RegPenaltyConfig:
    """Weights of the pre-weight penalties and their decay schedule."""

    C_omt: float = 0.05
    C_range: float = 10.0
    K_decay: float = 10.0
    w0_sq: tuple = (0.1, 0.3, 0.3, 0.3)

    def __post_init__(self):
        if self.C_omt < 0 or self.C_range < 0:
            raise InvalidParameterError("penalty constants must be non-negative")
        if not self.K_decay > 0:
            raise InvalidParameterError("K_decay must be positive")
        w0 = tuple(float(x) for x in self.w0_sq)
        if min(w0) < 0 or abs(sum(w0) - 1.0) > 1e-6:
            raise InvalidParameterError(f"w0_sq must be non-negative and sum to 1, got {w0}")
        object.__setattr__(self, "w0_sq", w0)

    def to_dict(self):
        return {
            "C_omt": self.C_omt,
            "C_range": self.C_range,
            "K_decay": self.K_decay,
            "w0_sq": list(self.w0_sq),
        }


@dataclass
class ObjectiveBreakdown:
    """Weighted contributions; ``total`` is their sum."""

    total: float
    sim: float
    kinetic: float
    omt: float
    range: float
    extras: dict = field(default_factory=dict, repr=False)

    def as_row(self):
        return {
            "total": self.total,
            "sim": self.sim,
            "kinetic": self.kinetic,
            "omt": self.omt,
            "range": self.range,
        }


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"grid mismatch: {a.shape} vs {b.shape}")
    return a, b


def ssd(a, b, grad: bool = False):
    """Sum of squared differences weighted by the node volume."""
    a, b = _check_pair(a, b)
    diff = a - b
    value = float(np.sum(diff * diff) / diff.size)
    if grad:
        return value, 2.0 * diff / diff.size
    return value


class _Box:
    """Local mean over a box window, restricted to in-domain nodes."""

    def __init__(self, shape, size):
        self.size = size
        self.volume = size ** len(shape)
        self.count = self._sum(np.ones(shape))

    def _sum(self, f):
        return uniform_filter(f, self.size, mode="constant", cval=0.0) * self.volume

    def mean(self, f):
        return self._sum(f) / self.count

    def mean_adjoint(self, g):
        return self._sum(g / self.count)


def _lncc_window(a, b, size, eps, grad):
    box = _Box(a.shape, size)
    mu_a, mu_b = box.mean(a), box.mean(b)
    s_ab = box.mean(a * b) - mu_a * mu_b
    s_aa = box.mean(a * a) - mu_a * mu_a
    s_bb = box.mean(b * b) - mu_b * mu_b
    q = s_aa * s_bb + eps
    ncc2 = s_ab * s_ab / q
    value = 1.0 - float(np.mean(ncc2))
    if not grad:
        return value, None
    n = a.size
    g_ab = -2.0 * s_ab / q / n
    g_aa = s_ab * s_ab * s_bb / (q * q) / n
    ga_ab = box.mean_adjoint(g_ab)
    ga_aa = box.mean_adjoint(g_aa)
    g = b * ga_ab + 2.0 * a * ga_aa - box.mean_adjoint(g_ab * mu_b + 2.0 * g_aa * mu_a)
    return value, g


def mk_lncc(a, b, cfg: SimilarityConfig | None = None, grad: bool = False):
    """Multi-window localized NCC loss ``sum_k weight_k (1 - mean NCC_k^2)`` in ``[0, 1]``.

    Only the gradient with respect to ``a`` (the warped image) is returned.
    """
    a, b = _check_pair(a, b)
    cfg = cfg or SimilarityConfig()
    total = 0.0
    g_total = np.zeros_like(a) if grad else None
    for size, weight in cfg.windows:
        if weight == 0:
            continue
        value, g = _lncc_window(a, b, size, cfg.eps, grad)
        total += weight * value
        if grad:
            g_total += weight * g
    return (total, g_total) if grad else total


def similarity(a, b, cfg: SimilarityConfig, grad: bool = False):
    if cfg.kind == "ssd":
        return ssd(a, b, grad=grad)
    return mk_lncc(a, b, cfg, grad=grad)


def _omt_costs(kernel: MultiGaussianKernel):
    sig = np.asarray(kernel.sigmas)
    if sig.size == 1:
        return np.zeros(1)
    s = kernel.omt_power
    return np.abs(np.log(sig[-1] / sig)) ** s / abs(math.log(sig[-1] / sig[0])) ** s


def omt_penalty(w, kernel: MultiGaussianKernel, grad: bool = False):
    """Mass-transport cost of the squared weights towards the widest Gaussian, node-averaged."""
    w = np.asarray(w, dtype=float)
    c = _omt_costs(kernel).reshape((-1,) + (1,) * (w.ndim - 1))
    n = w[0].size
    value = float(np.sum(c * w * w) / n)
    if grad:
        return value, 2.0 * c * w / n
    return value


def range_penalty(h0, w0_sq, kernel: MultiGaussianKernel, grad: bool = False):
    """Squared L2 distance between ``G * h0`` and the reference weights ``sqrt(w0_sq)``."""
    h0 = np.asarray(h0, dtype=float)
    ndim = h0.ndim - 1
    ref = np.sqrt(np.asarray(w0_sq, dtype=float)).reshape((-1,) + (1,) * ndim)
    w = gauss_conv(h0, kernel.preweight_sigma, ndim=ndim)
    diff = w - ref
    n = h0[0].size
    value = float(np.sum(diff * diff) / n)
    if grad:
        return value, gauss_conv(2.0 * diff / n, kernel.preweight_sigma, ndim=ndim)
    return value


def decay_weights(T: float, cfg: RegPenaltyConfig):
    """``(lambda_omt, lambda_range)`` at iteration ``T``.

    ``lambda_T = K / (K + exp(T / K))``; the range weight decays as
    ``C_range * lambda_T`` while the OMT weight grows as ``C_omt * (1 - lambda_T)``.
    """
    if T < 0:
        raise InvalidParameterError("iteration index must be non-negative")
    K = cfg.K_decay
    lam = K / (K + math.exp(T / K)) if T / K < 700 else 0.0
    return cfg.C_omt * (1.0 - lam), cfg.C_range * lam


class _Forward:
    """One evaluation of the shooting objective, keeping what the gradient needs."""

    def __init__(self, m0, h0, I0, I1, kernel, sim_cfg, pen_cfg, T, integrator, lambda_kin,
                 include_reg=True):
        m0 = np.asarray(m0, dtype=float)
        h0 = np.asarray(h0, dtype=float)
        I0, I1 = _check_pair(I0, I1)
        if m0.shape[1:] != I0.shape or h0.shape[1:] != I0.shape:
            raise ShapeMismatchError("momentum, pre-weights and images must share a grid")
        integrator = integrator or IntegratorConfig()
        self.m0, self.h0, self.I0, self.I1 = m0, h0, I0, I1
        self.lambda_kin = lambda_kin
        self.states = shoot(m0, h0, kernel, integrator.n_steps)
        phi1 = self.states[-1][1]
        self.stencil = Stencil(phi1, I0.shape)
        self.warped = self.stencil.apply(I0)
        self.sim = similarity(self.warped, I1, sim_cfg, grad=False)
        self.weights0 = WeightPullback(h0, identity_map(I0.shape), kernel)
        self.v0, self.nu0 = kernel_apply(m0, self.weights0.w, kernel, return_parts=True)
        self.kin_raw = 0.5 * velocity_norm_sq(m0, self.v0)
        self.include_reg = include_reg
        self.pen_cfg = pen_cfg
        if include_reg:
            self.omt_raw = omt_penalty(self.weights0.w, kernel)
            self.range_raw = range_penalty(h0, pen_cfg.w0_sq, kernel)
        else:
            self.omt_raw = self.range_raw = 0.0
        self.set_iteration(T)

    def set_iteration(self, T):
        """Re-weight the penalties for iteration ``T`` without re-integrating."""
        if self.include_reg:
            self.lam_omt, self.lam_range = decay_weights(T, self.pen_cfg)
        else:
            self.lam_omt = self.lam_range = 0.0
        kin = self.lambda_kin * self.kin_raw
        omt = self.lam_omt * self.omt_raw
        rng = self.lam_range * self.range_raw
        self.breakdown = ObjectiveBreakdown(
            total=kin + self.sim + omt + rng,
            sim=self.sim,
            kinetic=kin,
            omt=omt,
            range=rng,
            extras={
                "lambda_omt": self.lam_omt,
                "lambda_range": self.lam_range,
                "omt_raw": self.omt_raw,
                "range_raw": self.range_raw,
            },
        )
        return self.breakdown


def shooting_objective(state0, I0, I1, kernel: MultiGaussianKernel, similarity_cfg=None,
                       penalties=None, T: float = 0, integrator=None, lambda_kin: float = 1.0,
                       include_reg: bool = True) -> ObjectiveBreakdown:
    """Evaluate the shooting objective for the initial conditions in ``state0``.

    Parameters
    ----------
    state0 : GeodesicState
        Initial momentum and pre-weights (the map must be the identity).
    I0, I1 : ndarray
        Source and target images on the state's grid.
    T : float
        Iteration index driving the penalty decay schedule.
    include_reg : bool
        Drop the pre-weight penalties (used when the pre-weights are frozen).
    """
    similarity_cfg = similarity_cfg or SimilarityConfig()
    if penalties is None:
        n = kernel.n_kernels
        penalties = RegPenaltyConfig(w0_sq=(1.0 / n,) * n)
    fwd = _Forward(state0.m, state0.h0, I0, I1, kernel, similarity_cfg, penalties, T,
                   integrator, lambda_kin, include_reg)
    return fwd.breakdown

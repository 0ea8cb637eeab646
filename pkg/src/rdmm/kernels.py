"""Gaussian smoothing and the spatially weighted multi-Gaussian kernel.

The velocity induced by a momentum ``m`` is

    v(x) = sum_i w_i(x) * (K_sigma_i * (w_i m))(x)

where every ``K_sigma_i`` is an isotropic Gaussian and ``w_i`` are the
(smoothed) regularizer weights. All convolutions are circular and evaluated in
the Fourier domain; kernels are sampled on the grid and normalized to unit
discrete sum so constants are fixed points.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .exceptions import InvalidParameterError

__all__ = [
    "MultiGaussianKernel",
    "gaussian_response",
    "gauss_conv",
    "normalize_preweights",
    "constant_preweights",
    "preweights_to_weights",
    "kernel_apply",
    "kernel_apply_vjp",
    "velocity_norm_sq",
    "local_std_map",
]


@dataclass(frozen=True)
class MultiGaussianKernel:
    """Ordered Gaussian bank plus the pre-weight smoother.

    Parameters
    ----------
    sigmas : sequence of float
        Strictly increasing standard deviations in unit-cube lengths.
    preweight_sigma : float
        Standard deviation of the Gaussian that maps pre-weights to weights.
    omt_power : float
        Exponent ``s`` of the mass-transport penalty.
    """

    sigmas: tuple
    preweight_sigma: float = 0.05
    omt_power: float = 2.0

    def __post_init__(self):
        sigmas = tuple(float(s) for s in np.atleast_1d(self.sigmas))
        if not sigmas:
            raise InvalidParameterError("at least one Gaussian is required")
        if min(sigmas) <= 0:
            raise InvalidParameterError(f"sigmas must be positive, got {sigmas}")
        if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
            raise InvalidParameterError(f"sigmas must be strictly increasing, got {sigmas}")
        if not self.preweight_sigma > 0:
            raise InvalidParameterError("preweight_sigma must be positive")
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "preweight_sigma", float(self.preweight_sigma))
        object.__setattr__(self, "omt_power", float(self.omt_power))

    @property
    def n_kernels(self) -> int:
        return len(self.sigmas)

    def to_dict(self) -> dict:
        return {
            "sigmas": list(self.sigmas),
            "preweight_sigma": self.preweight_sigma,
            "omt_power": self.omt_power,
        }


def _sampled_gaussian_1d(n: int, sigma: float) -> np.ndarray:
    h = 1.0 / (n - 1)
    j = np.arange(n)
    r = np.minimum(j, n - j) * h
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


@lru_cache(maxsize=256)
def gaussian_response(dims: tuple, sigma: float) -> np.ndarray:
    """Real frequency response (``rfftn`` layout) of the normalized sampled Gaussian."""
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    dims = tuple(int(n) for n in dims)
    d = len(dims)
    response = np.ones(())
    for k, n in enumerate(dims):
        g = _sampled_gaussian_1d(n, sigma)
        g_hat = np.fft.rfft(g).real if k == d - 1 else np.fft.fft(g).real
        shape = [1] * d
        shape[k] = g_hat.size
        response = response * g_hat.reshape(shape)
    response.setflags(write=False)
    return response


def _conv_with_response(field, response, ndim):
    axes = tuple(range(-ndim, 0))
    dims = field.shape[-ndim:]
    return sfft.irfftn(sfft.rfftn(field, axes=axes) * response, s=dims, axes=axes)


def gauss_conv(field, sigma: float, ndim: int = 2) -> np.ndarray:
    """Circular convolution of the trailing ``ndim`` axes with a Gaussian.

    Leading axes (vector components, kernel index) are convolved independently.
    """
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    field = np.asarray(field, dtype=float)
    return _conv_with_response(field, gaussian_response(field.shape[-ndim:], float(sigma)), ndim)


def normalize_preweights(h, eps: float = 1e-12) -> np.ndarray:
    """Rescale ``h`` (shape ``(N, *dims)``) so that ``sum_i h_i**2 == 1`` at every node."""
    h = np.asarray(h, dtype=float)
    norm = np.sqrt(np.sum(h * h, axis=0))
    return h / np.maximum(norm, eps)


def constant_preweights(w0_sq, dims) -> np.ndarray:
    """Spatially constant pre-weights ``h_i = sqrt(w0_sq_i)``."""
    w0_sq = np.asarray(w0_sq, dtype=float)
    if np.any(w0_sq < 0) or abs(w0_sq.sum() - 1.0) > 1e-6:
        raise InvalidParameterError(f"squared weights must be >= 0 and sum to 1, got {w0_sq}")
    h = np.sqrt(w0_sq).reshape((-1,) + (1,) * len(dims))
    return np.broadcast_to(h, (w0_sq.size,) + tuple(dims)).copy()


def preweights_to_weights(h, kernel: MultiGaussianKernel) -> np.ndarray:
    """``w_i = G_sigma * h_i`` for every pre-weight field."""
    h = np.asarray(h, dtype=float)
    return gauss_conv(h, kernel.preweight_sigma, ndim=h.ndim - 1)


def kernel_apply(m, w, kernel: MultiGaussianKernel, return_parts: bool = False):
    """Velocity ``v = sum_i w_i K_i * (w_i m)``.

    Parameters
    ----------
    m : ndarray, shape (d, *dims)
    w : ndarray, shape (N, *dims)
        Non-negative weights, one field per Gaussian.
    return_parts : bool
        Also return the per-kernel fields ``nu_i = K_i * (w_i m)``, shape
        ``(N, d, *dims)``.
    """
    m = np.asarray(m, dtype=float)
    w = np.asarray(w, dtype=float)
    ndim = m.ndim - 1
    dims = m.shape[1:]
    nu = np.empty((len(kernel.sigmas),) + m.shape)
    for i, sigma in enumerate(kernel.sigmas):
        nu[i] = _conv_with_response(w[i] * m, gaussian_response(dims, sigma), ndim)
    v = np.einsum("i...,ik...->k...", w, nu)
    return (v, nu) if return_parts else v


def kernel_apply_vjp(m, w, nu, grad_v, kernel: MultiGaussianKernel, grad_nu=None):
    """Reverse-mode derivative of :func:`kernel_apply`.

    Returns ``(grad_m, grad_w)`` for an upstream gradient ``grad_v`` on ``v``
    and, optionally, ``grad_nu`` on the per-kernel parts. Relies on the
    symmetry of the Gaussian kernels.
    """
    ndim = m.ndim - 1
    dims = m.shape[1:]
    grad_m = np.zeros_like(m)
    grad_w = np.empty_like(w)
    for i, sigma in enumerate(kernel.sigmas):
        g_nu = w[i] * grad_v if grad_nu is None else w[i] * grad_v + grad_nu[i]
        back = _conv_with_response(g_nu, gaussian_response(dims, sigma), ndim)
        grad_m += w[i] * back
        grad_w[i] = np.sum(grad_v * nu[i], axis=0) + np.sum(m * back, axis=0)
    return grad_m, grad_w


def velocity_norm_sq(m, v) -> float:
    """``<m, v>`` integrated over the unit cube (``= ||v||_L^2`` when ``v = K m``)."""
    m = np.asarray(m, dtype=float)
    return float(np.sum(m * v) / np.prod(m.shape[1:]))


def local_std_map(w, kernel: MultiGaussianKernel) -> np.ndarray:
    """Effective local regularizer scale ``sqrt(sum_i w_i^2 sigma_i^2)``."""
    w = np.asarray(w, dtype=float)
    s2 = np.asarray(kernel.sigmas).reshape((-1,) + (1,) * (w.ndim - 1)) ** 2
    return np.sqrt(np.sum(w * w * s2, axis=0))

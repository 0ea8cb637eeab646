"""Scikit-learn style wrapper around :func:`rdmm.optimizer.optimize`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RegistrationConfig, canonical_mode, default_config
from .exceptions import InvalidParameterError, ShapeMismatchError
from .fields import compose_map, jacobian_determinant
from .metrics import warp_labels
from .optimizer import optimize

__all__ = ["RDMMRegistration", "check_image", "check_image_pair", "check_preweights"]


def check_image(image, name: str = "image") -> np.ndarray:
    """Return ``image`` as a finite float array with 2 or 3 axes of at least 2 nodes."""
    arr = np.asarray(image, dtype=float)
    if arr.ndim not in (2, 3):
        raise ShapeMismatchError(f"{name} must be 2D or 3D, got shape {arr.shape}")
    if min(arr.shape) < 2:
        raise ShapeMismatchError(f"{name} needs at least 2 nodes per axis, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} contains non-finite values")
    return arr


def check_image_pair(source, target):
    source = check_image(source, "source")
    target = check_image(target, "target")
    if source.shape != target.shape:
        raise ShapeMismatchError(f"source {source.shape} and target {target.shape} differ")
    return source, target


def check_preweights(h0, n_kernels: int, dims: tuple, tol: float = 1e-6) -> np.ndarray:
    """Validate pre-weights: shape ``(n_kernels, *dims)``, non-negative, unit norm per node."""
    h0 = np.asarray(h0, dtype=float)
    if h0.shape != (n_kernels,) + tuple(dims):
        raise ShapeMismatchError(f"pre-weights need shape {(n_kernels,) + tuple(dims)}, got {h0.shape}")
    if not np.all(np.isfinite(h0)) or np.any(h0 < 0):
        raise InvalidParameterError("pre-weights must be finite and non-negative")
    if np.max(np.abs(np.sum(h0 * h0, axis=0) - 1.0)) > tol:
        raise InvalidParameterError("squared pre-weights must sum to 1 at every node")
    return h0


class RDMMRegistration(TransformerMixin, BaseEstimator):
    """Pairwise registration estimator.

    ``fit(source, target)`` estimates the initial momentum (and, in joint
    mode, the pre-weights) mapping ``source`` onto ``target``; ``transform``
    then warps any image living on the source grid.

    Parameters
    ----------
    mode : {"lddmm", "rdmm-fixed", "rdmm-joint"}
    config : RegistrationConfig or dict, optional
        Overrides layered on top of the mode's defaults.
    preweights : ndarray, optional
        Initial pre-weights; required in ``rdmm-fixed`` mode.
    """

    def __init__(self, mode="rdmm-joint", config=None, preweights=None):
        self.mode = mode
        self.config = config
        self.preweights = preweights

    def _resolved_config(self) -> RegistrationConfig:
        mode = canonical_mode(self.mode)
        base = default_config(mode)
        if self.config is None:
            return base
        if isinstance(self.config, RegistrationConfig):
            if self.config.mode != mode:
                raise InvalidParameterError("config.mode disagrees with mode")
            return self.config
        return RegistrationConfig.from_dict({**dict(self.config), "mode": mode}, base=base)

    def fit(self, X, y, labels=None):
        """Register source ``X`` to target ``y``; ``labels`` is an optional (source, target) pair."""
        source, target = check_image_pair(X, y)
        cfg = self._resolved_config()
        h0 = None
        if self.preweights is not None:
            h0 = check_preweights(self.preweights, cfg.kernel.n_kernels, source.shape)
        result = optimize(source, target, cfg, h0=h0, labels=labels)
        self.result_ = result
        self.config_ = cfg
        self.phi_inv_ = result.phi_inv_final
        self.m0_ = result.m0
        self.h0_ = result.h0
        self.warped_ = result.warped
        self.n_iter_ = len(result.per_iteration)
        return self

    def transform(self, X):
        """Warp an image (or a stack with leading channel axes) by the fitted map."""
        check_is_fitted(self, "phi_inv_")
        X = np.asarray(X, dtype=float)
        if X.shape[X.ndim - self.phi_inv_.shape[0]:] != self.phi_inv_.shape[1:]:
            raise ShapeMismatchError("image grid differs from the fitted grid")
        return compose_map(X, self.phi_inv_)

    def transform_labels(self, labels):
        check_is_fitted(self, "phi_inv_")
        return warp_labels(labels, self.phi_inv_)

    def jacobian_determinant(self):
        check_is_fitted(self, "phi_inv_")
        return jacobian_determinant(self.phi_inv_)

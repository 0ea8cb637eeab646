"""Regular-grid fields on the unit cube.

Fields are plain numpy arrays:

* a scalar field has shape ``dims``;
* a vector field (velocity, momentum) has shape ``(d, *dims)``;
* a transformation map stores absolute coordinates ``phi_inv(y)`` with shape
  ``(d, *dims)``, so the identity map equals the node coordinates.

Node ``i`` along an axis with ``n`` samples sits at ``i / (n - 1)``, i.e. every
grid spans ``[0, 1]`` exactly. Interpolation is multilinear with query points
clamped to the domain; derivatives are central differences in the interior and
one-sided at the boundary.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidParameterError, ShapeMismatchError

__all__ = [
    "GridSpec",
    "identity_map",
    "interpolate",
    "interpolate_nearest",
    "partial",
    "partial_adjoint",
    "gradient",
    "jacobian",
    "divergence",
    "jacobian_determinant",
    "compose_map",
    "resample",
    "Stencil",
]


@dataclass(frozen=True)
class GridSpec:
    """Sample counts per axis of a regular grid over ``[0, 1]^d``."""

    dims: tuple

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3):
            raise InvalidParameterError(f"only 2D and 3D grids are supported, got {dims}")
        if min(dims) < 2:
            raise InvalidParameterError(f"every axis needs at least 2 samples, got {dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_shape(cls, shape) -> "GridSpec":
        return cls(tuple(shape))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def spacing(self) -> tuple:
        return tuple(1.0 / (n - 1) for n in self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def cell_volume(self) -> float:
        """Quadrature weight per node; constants of value 1 integrate to exactly 1."""
        return 1.0 / self.size

    def coordinates(self) -> np.ndarray:
        axes = [np.linspace(0.0, 1.0, n) for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def scaled(self, factor: float) -> "GridSpec":
        """Grid with ``round(n * factor)`` nodes per axis (at least 2)."""
        return GridSpec(tuple(max(2, int(round(n * factor))) for n in self.dims))


def _spacing(dims):
    return tuple(1.0 / (n - 1) for n in dims)


def identity_map(grid) -> np.ndarray:
    """Map whose coordinates equal the node positions."""
    if not isinstance(grid, GridSpec):
        grid = GridSpec(tuple(grid))
    return grid.coordinates()


class Stencil:
    """Multilinear interpolation weights for a fixed set of query points.

    Building the stencil once lets several fields be sampled at the same
    points (the pre-weights are all sampled at the current map), and provides
    the two adjoints needed for reverse-mode differentiation: scattering back
    onto grid values, and the derivative of the interpolant with respect to
    the query coordinates.
    """

    def __init__(self, points, dims):
        points = np.asarray(points, dtype=float)
        dims = tuple(dims)
        d = len(dims)
        if points.shape[0] != d:
            raise ShapeMismatchError(
                f"points have {points.shape[0]} components but the grid is {d}D"
            )
        self.dims = dims
        self.out_shape = points.shape[1:]
        spacing = _spacing(dims)
        base, frac, inside = [], [], []
        for k in range(d):
            p = points[k].ravel()
            u = np.clip(p, 0.0, 1.0) * (dims[k] - 1)
            # snap round-off so that node queries are exact
            r = np.rint(u)
            u = np.where(np.abs(u - r) < 1e-10, r, u)
            i =np.minimum(np.floor(u).astype(np.intp), dims[k] - 2)
            base.append(i)
            frac.append(u - i)
            inside.append(((p >= 0.0) & (p <= 1.0)) / spacing[k])
        strides = np.cumprod((1,) + dims[:0:-1])[::-1]
        origin = sum(base[k] * strides[k] for k in range(d))
        self._corners = []
        for bits in itertools.product((0, 1), repeat=d):
            offset = int(sum(b * s for b, s in zip(bits, strides)))
            factors = [frac[k] if b else 1.0 - frac[k] for k, b in enumerate(bits)]
            weight = np.prod(factors, axis=0)
            # d(weight)/d(point_k): replace factor k by its derivative, +-1/h (0 if clamped)
            dweights = []
            for k, b in enumerate(bits):
                rest = [factors[j] for j in range(d) if j != k]
                dk = inside[k] if b else -inside[k]
                dweights.append(dk * np.prod(rest, axis=0) if rest else dk)
            self._corners.append((origin + offset, weight, dweights))
        self.size = int(np.prod(dims))

    def _flat(self, field):
        field = np.asarray(field, dtype=float)
        lead = field.shape[: field.ndim - len(self.dims)]
        if field.shape[len(lead):] != self.dims:
            raise ShapeMismatchError(f"field shape {field.shape} does not match grid {self.dims}")
        return field.reshape(lead + (self.size,)), lead

    def apply(self, field) -> np.ndarray:
        flat, lead = self._flat(field)
        out = 0.0
        for idx, weight, _ in self._corners:
            out = out + flat[..., idx] * weight
        return np.asarray(out).reshape(lead + self.out_shape)

    def point_gradient(self, field) -> np.ndarray:
        """Derivative of the interpolant w.r.t. the query points, shape ``(*lead, d, *points)``."""
        flat, lead = self._flat(field)
        d = len(self.dims)
        out = np.zeros(lead + (d, self._corners[0][1].size))
        for idx, _, dweights in self._corners:
            vals = flat[..., idx]
            for k in range(d):
                out[..., k, :] += vals * dweights[k]
        return out.reshape(lead + (d,) + self.out_shape)

    def adjoint(self, values) -> np.ndarray:
        """Transpose of :meth:`apply`: scatter ``values`` onto the grid nodes."""
        values = np.asarray(values, dtype=float)
        lead = values.shape[: values.ndim - len(self.out_shape)]
        vals = values.reshape(lead + (-1,))
        rows = vals.reshape(-1, vals.shape[-1])
        out = np.zeros((rows.shape[0], self.size))
        for idx, weight, _ in self._corners:
            for r in range(rows.shape[0]):
                out[r] += np.bincount(idx, weights=rows[r] * weight, minlength=self.size)
        return out.reshape(lead + self.dims)


def interpolate(field, points) -> np.ndarray:
    """Multilinear interpolation of a scalar or vector field at ``points``.

    ``points`` has shape ``(d, ...)`` in unit-cube coordinates; values outside
    ``[0, 1]^d`` are clamped to the boundary. A vector field returns shape
    ``(d_field, ...)``.
    """
    points = np.asarray(points, dtype=float)
    field = np.asarray(field, dtype=float)
    d = points.shape[0]
    return Stencil(points, field.shape[field.ndim - d:]).apply(field)


def interpolate_nearest(field, points) -> np.ndarray:
    """Nearest-node sampling, used for integer label maps."""
    points = np.asarray(points, dtype=float)
    field = np.asarray(field)
    d = points.shape[0]
    dims = field.shape[field.ndim - d:]
    idx = tuple(
        np.rint(np.clip(points[k], 0.0, 1.0) * (dims[k] - 1)).astype(np.intp) for k in range(d)
    )
    return field[(Ellipsis,) + idx]


def partial(field, axis: int, ndim: int | None = None) -> np.ndarray:
    """Derivative along spatial ``axis`` of the trailing ``ndim`` axes of ``field``.

    Second-order central differences inside, first-order one-sided at both ends,
    scaled by the unit-cube spacing.
    """
    field = np.asarray(field, dtype=float)
    ndim = field.ndim if ndim is None else ndim
    ax = field.ndim - ndim + axis
    n = field.shape[ax]
    h = 1.0 / (n - 1)
    out = np.empty_like(field)

    def sl(a, b):
        s = [slice(None)] * field.ndim
        s[ax] = slice(a, b)
        return tuple(s)

    out[sl(1, -1)] = (field[sl(2, None)] - field[sl(None, -2)]) / (2 * h)
    out[sl(0, 1)] = (field[sl(1, 2)] - field[sl(0, 1)]) / h
    out[sl(-1, None)] = (field[sl(-1, None)] - field[sl(-2, -1)]) / h
    return out


def partial_adjoint(g, axis: int, ndim: int | None = None) -> np.ndarray:
    """Transpose of :func:`partial` (as a linear operator on node values)."""
    g = np.asarray(g, dtype=float)
    ndim = g.ndim if ndim is None else ndim
    ax = g.ndim - ndim + axis
    n = g.shape[ax]
    h = 1.0 / (n - 1)
    out = np.zeros_like(g)

    def sl(a, b):
        s = [slice(None)] * g.ndim
        s[ax] = slice(a, b)
        return tuple(s)

    inner = g[sl(1, -1)] / (2 * h)
    out[sl(2, None)] += inner
    out[sl(None, -2)] -= inner
    out[sl(1, 2)] += g[sl(0, 1)] / h
    out[sl(0, 1)] -= g[sl(0, 1)] / h
    out[sl(-1, None)] += g[sl(-1, None)] / h
    out[sl(-2, -1)] -= g[sl(-1, None)] / h
    return out


def gradient(field) -> np.ndarray:
    """Gradient of a scalar field, shape ``(d, *dims)``."""
    field = np.asarray(field, dtype=float)
    return np.stack([partial(field, k) for k in range(field.ndim)])


def jacobian(field) -> np.ndarray:
    """Jacobian of a vector field or map: ``J[k, j] = d field_k / d x_j``."""
    field = np.asarray(field, dtype=float)
    d = field.shape[0]
    return np.stack([np.stack([partial(field[k], j) for j in range(d)]) for k in range(d)])


def divergence(field) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    return sum(partial(field[k], k) for k in range(field.shape[0]))


def jacobian_determinant(phi) -> np.ndarray:
    """Per-node determinant of the finite-difference Jacobian of a map."""
    J = jacobian(phi)
    if J.shape[0] == 2:
        return J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    return np.linalg.det(np.moveaxis(J, (0, 1), (-2, -1)))


def _check_same_grid(a_dims, b_dims):
    if tuple(a_dims) != tuple(b_dims):
        raise ShapeMismatchError(f"grid mismatch: {tuple(a_dims)} vs {tuple(b_dims)}")


def compose_map(outer, inner) -> np.ndarray:
    """``outer`` (field or map) sampled at the coordinates stored in ``inner``."""
    inner = np.asarray(inner, dtype=float)
    outer = np.asarray(outer, dtype=float)
    d = inner.shape[0]
    _check_same_grid(outer.shape[outer.ndim - d:], inner.shape[1:])
    return interpolate(outer, inner)


def resample(field, target, ndim: int | None = None) -> np.ndarray:
    """Multilinear resampling onto another grid spanning the unit cube.

    ``target`` is a :class:`GridSpec` or a dims tuple. ``ndim`` gives the number
    of trailing spatial axes (defaults to the target's dimension). Maps are
    resampled through their coordinate values.
    """
    if not isinstance(target, GridSpec):
        target = GridSpec(tuple(target))
    field = np.asarray(field, dtype=float)
    ndim = target.ndim if ndim is None else ndim
    if field.shape[field.ndim - ndim:] == target.dims:
        return field.copy()
    return interpolate(field, target.coordinates())

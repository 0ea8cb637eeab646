"""Seeded generator of paired 2D shape scenes with label maps.

Every scene has one large foreground container holding two smaller objects,
plus up to five objects outside it. The target scene perturbs the shift, scale
and rotation of every shape; shapes inside the container also follow the
container's own motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import GenerationError, InvalidParameterError
from .fields import GridSpec

__all__ = [
    "SHAPE_KINDS",
    "ShapeSpec",
    "SceneParams",
    "ScenePair",
    "generate_pair",
    "generate_corpus",
    "region_preweights",
    "rasterize",
]

SHAPE_KINDS = ("rectangle", "triangle", "ellipse")
DOMAIN = (0.02, 0.98)
_LAYOUT_ATTEMPTS = 20


@dataclass(frozen=True)
class ShapeSpec:
    """A filled shape; ``size`` is (width, height) in the shape's local frame.

    Triangles are isosceles with base ``size[0]`` and height ``size[1]``,
    apex pointing along the local second axis.
    """

    kind: str
    center: tuple
    size: tuple
    rotation: float
    intensity: float
    label: int

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise InvalidParameterError(f"unknown shape kind {self.kind!r}")
        if min(self.size) <= 0:
            raise InvalidParameterError("shape sizes must be positive")
        if not 0.0 <= self.intensity <= 1.0:
            raise InvalidParameterError("intensity must lie in [0, 1]")
        if int(self.label) < 1:
            raise InvalidParameterError("labels must be positive integers")

    def _local(self, x, y):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        dx, dy = x - self.center[0], y - self.center[1]
        return c * dx + s * dy, -s * dx + c * dy

    def contains(self, x, y, pad: float = 0.0):
        """Boolean mask of points inside the shape grown by ``pad`` on every side."""
        u, v = self._local(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        a = self.size[0] / 2 + pad
        b = self.size[1] / 2 + pad
        if self.kind == "rectangle":
            return (np.abs(u) <= a) & (np.abs(v) <= b)
        if self.kind == "ellipse":
            return (u / a) ** 2 + (v / b) ** 2 <= 1.0
        return (v >= -b) & (np.abs(u) <= a * (b - v) / (2 * b))

    def outline(self, n: int = 96) -> np.ndarray:
        """``(2, n)`` points on the boundary, in world coordinates."""
        a, b = self.size[0] / 2, self.size[1] / 2
        if self.kind == "ellipse":
            t = np.linspace(0, 2 * np.pi, n, endpoint=False)
            u, v = a * np.cos(t), b * np.sin(t)
        else:
            if self.kind == "rectangle":
                corners = np.array([[-a, -b], [a, -b], [a, b], [-a, b]])
            else:
                corners = np.array([[-a, -b], [a, -b], [0.0, b]])
            k = len(corners)
            t = np.linspace(0, k, n, endpoint=False)
            i = np.floor(t).astype(int)
            f = (t - i)[:, None]
            pts = (1 - f) * corners[i] + f * corners[(i + 1) % k]
            u, v = pts[:, 0], pts[:, 1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.stack([self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])

    def transformed(self, shift=(0.0, 0.0), scale=(1.0, 1.0), rotation=0.0) -> "ShapeSpec":
        return replace(
            self,
            center=(self.center[0] + shift[0], self.center[1] + shift[1]),
            size=(self.size[0] * scale[0], self.size[1] * scale[1]),
            rotation=self.rotation + rotation,
        )

    def in_domain(self) -> bool:
        pts = self.outline()
        return bool(np.all((pts >= DOMAIN[0]) & (pts <= DOMAIN[1])))

    def overlaps(self, other: "ShapeSpec", pad: float = 0.0) -> bool:
        p, q = self.outline(), other.outline()
        return bool(
            np.any(other.contains(p[0], p[1], pad))
            or np.any(self.contains(q[0], q[1], pad))
            or other.contains(self.center[0], self.center[1], pad)
        )

    def inside(self, container: "ShapeSpec", margin: float = 0.0) -> bool:
        p = self.outline()
        return bool(np.all(container.contains(p[0], p[1], -margin)))


@dataclass(frozen=True)
class SceneParams:
    """Perturbation magnitudes and layout controls.

    ``shift_max`` bounds the translation length, ``scale_range`` the per-axis
    scale factor and ``rotation_max`` the absolute rotation. ``inner_motion``
    and ``outside_motion`` scale those bounds for shapes inside and outside
    the container; zero makes them follow the container rigidly or stay put.
    Every object must keep an identity Dice of at least ``min_overlap``
    between its source and target footprints. The layout is drawn on a unit
    canvas that is then shrunk into ``[border, 1 - border]``, which keeps
    content clear of the wrap-around of the periodic kernels.
    """

    shift_max: float = 0.1
    scale_range: tuple = (0.8, 1.25)
    rotation_max: float = 0.3
    container_motion: float = 1.0
    inner_motion: float = 0.3
    outside_motion: float = 1.0
    max_outside: int = 5
    min_overlap: float = 0.3
    supersample: int = 2
    max_retries: int = 200
    border: float = 0.1

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= 1 <= hi:
            raise InvalidParameterError("scale_range must bracket 1")
        if self.shift_max < 0 or self.rotation_max < 0:
            raise InvalidParameterError("perturbation bounds must be non-negative")
        if not 0 <= self.max_outside <= 5:
            raise InvalidParameterError("at most five outside objects are allowed")
        if not 0 <= self.border < 0.4:
            raise InvalidParameterError("border must lie in [0, 0.4)")
        if self.supersample < 1 or self.max_retries < 1:
            raise InvalidParameterError("supersample and max_retries must be >= 1")

    @classmethod
    def static(cls, **kw) -> "SceneParams":
        """Zero perturbation: the target equals the source."""
        return cls(shift_max=0.0, scale_range=(1.0, 1.0), rotation_max=0.0, **kw)


@dataclass
class ScenePair:
    source_image: np.ndarray
    target_image: np.ndarray
    source_labels: np.ndarray
    target_labels: np.ndarray
    foreground_mask_source: np.ndarray
    foreground_mask_target: np.ndarray
    seed: int
    source_shapes: list = field(default_factory=list, repr=False)
    target_shapes: list = field(default_factory=list, repr=False)

    @property
    def labels(self) -> list:
        return [s.label for s in self.source_shapes]


def rasterize(shapes, grid: GridSpec, supersample: int = 2):
    """Paint shapes in order (later on top). Returns ``(image, labels)``.

    The image averages ``supersample**2`` samples per node; labels use the
    node position only.
    """
    x = grid.coordinates()
    h = grid.spacing
    image = np.zeros(grid.dims)
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    for ox in offsets:
        for oy in offsets:
            px, py = x[0] + ox * h[0], x[1] + oy * h[1]
            layer = np.zeros(grid.dims)
            for s in shapes:
                layer = np.where(s.contains(px, py), s.intensity, layer)
            image += layer
    image /= supersample**2
    labels = np.zeros(grid.dims, dtype=np.int32)
    for s in shapes:
        labels = np.where(s.contains(x[0], x[1]), np.int32(s.label), labels)
    return image, labels


def _perturbation(rng, params: SceneParams, magnitude: float):
    r = params.shift_max * magnitude * rng.uniform()
    angle = rng.uniform(0, 2 * np.pi)
    lo, hi = np.log(params.scale_range)
    scale = tuple(np.exp(rng.uniform(lo, hi, size=2) * magnitude))
    rot = params.rotation_max * magnitude * rng.uniform(-1, 1)
    return (r * math.cos(angle), r * math.sin(angle)), scale, rot


def _random_shape(rng, label, center_lo, center_hi, size_lo, size_hi, intensity_range):
    return ShapeSpec(
        kind=SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))],
        center=tuple(rng.uniform(center_lo, center_hi, size=2)),
        size=tuple(rng.uniform(size_lo, size_hi, size=2)),
        rotation=float(rng.uniform(-np.pi, np.pi)),
        intensity=float(rng.uniform(*intensity_range)),
        label=label,
    )


def _follow(shape: ShapeSpec, container: ShapeSpec, moved: ShapeSpec) -> ShapeSpec:
    """Carry ``shape`` along the similarity-like motion ``container -> moved``."""
    sx = moved.size[0] / container.size[0]
    sy = moved.size[1] / container.size[1]
    u, v = container._local(shape.center[0], shape.center[1])
    u, v = u * sx, v * sy
    c, s = math.cos(moved.rotation), math.sin(moved.rotation)
    center = (moved.center[0] + c * u - s * v, moved.center[1] + s * u + c * v)
    iso = math.sqrt(sx * sy)
    return replace(
        shape,
        center=center,
        size=(shape.size[0] * iso, shape.size[1] * iso),
        rotation=shape.rotation + moved.rotation - container.rotation,
    )


def _overlap(a: ShapeSpec, b: ShapeSpec, n: int = 64) -> float:
    """Dice of two footprints, estimated on an ``n x n`` lattice over their joint bounding box."""
    pts = np.concatenate([a.outline(), b.outline()], axis=1)
    lo, hi = pts.min(axis=1), pts.max(axis=1)
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n), indexing="ij")
    ma, mb = a.contains(gx, gy), b.contains(gx, gy)
    denom = ma.sum() + mb.sum()
    return 2.0 * np.logical_and(ma, mb).sum() / denom if denom else 1.0


def _retry(fn, rng, tries, what):
    for _ in range(tries):
        out = fn(rng)
        if out is not None:
            return out
    raise GenerationError(f"could not place {what} after {tries} attempts; try another seed")


def _shrink(shape: ShapeSpec, border: float) -> ShapeSpec:
    k = 1.0 - 2.0 * border
    return replace(shape, center=(border + k * shape.center[0], border + k * shape.center[1]),
                   size=(k * shape.size[0], k * shape.size[1]))


def _layout(rng, params: SceneParams):
    mc, mi, mo = params.container_motion, params.inner_motion, params.outside_motion

    def container_fn(rng):
        src = _random_shape(rng, 1, 0.42, 0.58, 0.36, 0.5, (0.25, 0.45))
        tgt = src.transformed(*_perturbation(rng, params, mc))
        ok = src.in_domain() and tgt.in_domain() and _overlap(src, tgt) >= params.min_overlap
        return (src, tgt) if ok else None

    c_src, c_tgt = _retry(container_fn, rng, params.max_retries, "the container")
    inner_src, inner_tgt = [], []
    for label in (2, 3):
        def inner_fn(rng, label=label):
            s = _random_shape(rng, label, 0.0, 1.0, 0.08, 0.14, (0.7, 1.0))
            u, v = rng.uniform(-0.3, 0.3, size=2)
            c, sn = math.cos(c_src.rotation), math.sin(c_src.rotation)
            u, v = u * c_src.size[0], v * c_src.size[1]
            s = replace(s, center=(c_src.center[0] + c * u - sn * v,
                                   c_src.center[1] + sn * u + c * v))
            if not s.inside(c_src, 0.015) or any(s.overlaps(o, 0.015) for o in inner_src):
                return None
            t = _follow(s, c_src, c_tgt).transformed(*_perturbation(rng, params, mi))
            if not t.inside(c_tgt, 0.015) or any(t.overlaps(o, 0.015) for o in inner_tgt):
                return None
            if _overlap(s, t) < params.min_overlap:
                return None
            return s, t

        s, t = _retry(inner_fn, rng, params.max_retries // 4 + 1, f"inner object {label}")
        inner_src.append(s)
        inner_tgt.append(t)

    out_src, out_tgt = [], []
    n_out = int(rng.integers(0, params.max_outside + 1))
    for k in range(n_out):
        label = 4 + len(out_src)

        def outside_fn(rng, label=label):
            s = _random_shape(rng, label, 0.08, 0.92, 0.1, 0.16, (0.3, 1.0))
            t = s.transformed(*_perturbation(rng, params, mo))
            for shape, others, cont in ((s, out_src, c_src), (t, out_tgt, c_tgt)):
                if not shape.in_domain() or shape.overlaps(cont, 0.02):
                    return None
                if any(shape.overlaps(o, 0.02) for o in others):
                    return None
            return (s, t) if _overlap(s, t) >= params.min_overlap else None

        try:
            s, t = _retry(outside_fn, rng, params.max_retries // 4 + 1, "outside object")
        except GenerationError:
            continue
        out_src.append(s)
        out_tgt.append(t)
    src = [_shrink(sh, params.border) for sh in (c_src, *inner_src, *out_src)]
    tgt = [_shrink(sh, params.border) for sh in (c_tgt, *inner_tgt, *out_tgt)]
    return src, tgt


def generate_pair(seed: int, grid=(200, 200), params: SceneParams | None = None) -> ScenePair:
    """Deterministic source/target scene pair for ``seed``.

    Raises :class:`GenerationError` when a valid layout cannot be found, and
    :class:`InvalidParameterError` for grids smaller than 64 nodes per axis.
    """
    grid = grid if isinstance(grid, GridSpec) else GridSpec(tuple(grid))
    if grid.ndim != 2 or min(grid.dims) < 64:
        raise InvalidParameterError("scenes need a 2D grid with at least 64 nodes per axis")
    params = params or SceneParams()
    rng = np.random.default_rng(seed)
    for attempt in range(_LAYOUT_ATTEMPTS):
        try:
            src_shapes, tgt_shapes = _layout(rng, params)
            break
        except GenerationError:
            if attempt == _LAYOUT_ATTEMPTS - 1:
                raise
    src_img, src_lab = rasterize(src_shapes, grid, params.supersample)
    tgt_img, tgt_lab = rasterize(tgt_shapes, grid, params.supersample)
    for shapes, lab in ((src_shapes, src_lab), (tgt_shapes, tgt_lab)):
        present = set(np.unique(lab).tolist()) - {0}
        if present != {s.label for s in shapes}:
            raise GenerationError("an object vanished on the raster; try another seed")
    x = grid.coordinates()
    return ScenePair(
        source_image=src_img,
        target_image=tgt_img,
        source_labels=src_lab,
        target_labels=tgt_lab,
        foreground_mask_source=src_shapes[0].contains(x[0], x[1]).astype(float),
        foreground_mask_target=tgt_shapes[0].contains(x[0], x[1]).astype(float),
        seed=int(seed),
        source_shapes=src_shapes,
        target_shapes=tgt_shapes,
    )


def generate_corpus(n_pairs: int = 40, grid=(200, 200), params=None, first_seed: int = 0):
    """``n_pairs`` scenes from consecutive seeds starting at ``first_seed``."""
    return [generate_pair(first_seed + k, grid, params) for k in range(n_pairs)]


def region_preweights(scene_or_mask, fg_h_sq, bg_h_sq, kernel=None) -> np.ndarray:
    """Pre-weights ``sqrt(fg_h_sq)`` on the source foreground and ``sqrt(bg_h_sq)`` elsewhere."""
    mask = getattr(scene_or_mask, "foreground_mask_source", scene_or_mask)
    mask = np.asarray(mask) > 0.5
    fg = np.asarray(fg_h_sq, dtype=float)
    bg = np.asarray(bg_h_sq, dtype=float)
    if fg.shape != bg.shape or fg.ndim != 1:
        raise InvalidParameterError("fg_h_sq and bg_h_sq must be equal-length lists")
    if kernel is not None and fg.size != kernel.n_kernels:
        raise InvalidParameterError("one squared pre-weight per Gaussian is required")
    for name, vals in (("fg_h_sq", fg), ("bg_h_sq", bg)):
        if np.any(vals < 0) or abs(vals.sum() - 1.0) > 1e-6:
            raise InvalidParameterError(f"{name} must be non-negative and sum to 1")
    expand = (slice(None),) + (None,) * mask.ndim
    return np.where(mask, np.sqrt(fg)[expand], np.sqrt(bg)[expand])

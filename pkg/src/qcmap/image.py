"""Cubic B-spline image model with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded

from qcmap import kernels
from qcmap.grid import Grid

SPLINE_BOUNDARY = "natural"


class ImageError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScalarImage:
    """Scalar samples on a regular lattice.

    ``values`` has shape ``dims`` with axis ``j`` running along coordinate
    ``j``; sample ``k`` sits at ``origin + k * spacing``.
    """
    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    value_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", np.asarray(self.spacing, dtype=float).ravel())
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).ravel())
        if v.ndim not in (2, 3):
            raise ImageError(f"images must be 2D or 3D, got {v.ndim}D")
        if min(v.shape) < 2:
            raise ImageError(f"need at least 2 samples per axis, got {v.shape}")
        if self.spacing.size != v.ndim or self.origin.size != v.ndim:
            raise ImageError("spacing/origin length does not match image dimension")
        if np.any(self.spacing <= 0):
            raise ImageError("spacing must be positive")

    @property
    def n(self) -> int:
        return self.values.ndim

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @classmethod
    def on_cells(cls, values: np.ndarray, lo, hi) -> "ScalarImage":
        """Image whose samples sit at the centres of a uniform partition of ``[lo, hi]``."""
        values = np.asarray(values, dtype=float)
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        spacing = (hi - lo) / np.array(values.shape)
        return cls(values, spacing, lo + 0.5 * spacing)

    @classmethod
    def from_cell_field(cls, field: np.ndarray, grid: Grid) -> "ScalarImage":
        vals = np.asarray(field, float).reshape((grid.N,) * grid.n, order="F")
        return cls.on_cells(vals, grid.lo, grid.hi)


def _prefilter_axis(c: np.ndarray, axis: int) -> np.ndarray:
    L = c.shape[axis]
    moved = np.moveaxis(c, axis, 0)
    if L == 2:
        return np.moveaxis(moved.copy(), 0, axis)
    # natural end conditions: c[0] = s[0], c[L-1] = s[L-1]
    ab = np.zeros((3, L))
    ab[0, 2:] = 1.0 / 6.0
    ab[1, :] = 4.0 / 6.0
    ab[1, 0] = ab[1, -1] = 1.0
    ab[2, :-2] = 1.0 / 6.0
    flat = moved.reshape(L, -1)
    out = solve_banded((1, 1), ab, flat)
    return np.moveaxis(out.reshape(moved.shape), 0, axis)


def _pad_linear(c: np.ndarray) -> np.ndarray:
    for axis in range(c.ndim):
        c = np.moveaxis(c, axis, 0)
        lo = 2.0 * c[0] - c[1]
        hi = 2.0 * c[-1] - c[-2]
        c = np.concatenate([lo[None], c, hi[None]], axis=0)
        c = np.moveaxis(c, 0, axis)
    return np.ascontiguousarray(c)


@dataclass(frozen=True, eq=False)
class SplineImage:
    """Interpolating cubic B-spline of a :class:`ScalarImage`.

    The spline uses natural end conditions (antisymmetric coefficient
    extension), which reproduces affine intensity exactly up to the last
    sample.  Queries beyond the outermost samples are clamped to the edge and
    carry a zero gradient along the clamped axes.
    """
    source: ScalarImage
    coefficients: np.ndarray
    boundary: str = SPLINE_BOUNDARY
    extension: str = "clamp"
    _padded: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.source.n

    def _index_coords(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.n:
            raise ImageError(f"points must have {self.n} columns")
        t = (pts - self.source.origin) / self.source.spacing
        upper = np.array(self.source.dims, dtype=float) - 1.0
        tc = np.clip(t, 0.0, upper)
        inside = (t >= 0.0) & (t <= upper)
        return tc, inside

    def evaluate(self, points) -> np.ndarray:
        tc, _ = self._index_coords(points)
        values, _ = kernels.bspline_eval(self._padded, tc)
        return values

    def evaluate_with_gradient(self, points):
        """Values and physical-space gradients, shapes ``(k,)`` and ``(k, n)``."""
        tc, inside = self._index_coords(points)
        values, grad = kernels.bspline_eval(self._padded, tc)
        grad = np.where(inside, grad / self.source.spacing, 0.0)
        return values, grad


def fit_spline(image: ScalarImage) -> SplineImage:
    """Prefilter ``image`` into cubic B-spline coefficients (one tridiagonal solve per axis)."""
    if not np.all(np.isfinite(image.values)):
        raise ImageError("image contains non-finite values")
    c = image.values.astype(float, copy=True)
    for axis in range(c.ndim):
        c = _prefilter_axis(c, axis)
    return SplineImage(source=image, coefficients=c, _padded=_pad_linear(c))


def gradient_operator(grad: np.ndarray) -> sp.csr_matrix:
    """Point-wise gradient operator, one row per point.

    Row ``k`` holds ``grad[k, i]`` in column ``i * K + k`` so that it acts on
    point coordinates stacked by component (the layout of ``P @ Y``).
    """
    K, n = grad.shape
    rows = np.tile(np.arange(K), n)
    cols = np.arange(n * K)
    return sp.csr_matrix((grad.T.ravel(), (rows, cols)), shape=(K, n * K))


def eval_with_jacobian(model: SplineImage, points):
    """Spline values at ``points`` and the sparse gradient operator ``T_PY``."""
    values, grad = model.evaluate_with_gradient(points)
    return values, gradient_operator(grad)


def resample_to_cells(image: ScalarImage | SplineImage, grid: Grid) -> np.ndarray:
    """Spline-evaluate ``image`` at the grid's cell centres (lexicographic order)."""
    model = image if isinstance(image, SplineImage) else fit_spline(image)
    if model.n != grid.n:
        raise ImageError(f"image is {model.n}D but grid is {grid.n}D")
    return model.evaluate(grid.cell_centers())

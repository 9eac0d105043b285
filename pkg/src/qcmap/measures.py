"""Per-element deformation diagnostics and registration metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qcmap import kernels
from qcmap.grid import DiscreteOperators, Grid


class MeasureError(ValueError):
    pass


def _check_nodal(Y, grid: Grid) -> np.ndarray:
    Y = np.asarray(Y, dtype=float).ravel()
    if Y.size != grid.num_dofs:
        raise MeasureError(f"nodal field has {Y.size} entries, expected {grid.num_dofs}")
    return Y


def element_jacobians(Y, grid: Grid) -> np.ndarray:
    """Per-element Jacobian matrices ``(num_elements, n, n)`` of the nodal field ``Y``.

    Row ``e`` equals ``[[A[i*n+j] @ Y][e] for j] for i]`` with the operators of
    :func:`qcmap.grid.build_operators`.
    """
    Y = _check_nodal(Y, grid)
    Yc = Y.reshape(grid.n, -1)[:, grid.cell_nodes].transpose(1, 0, 2)
    F = kernels.element_jacobians(Yc, grid.cell_grad())
    return F.reshape(-1, grid.n, grid.n)


def det_and_cofactor(F: np.ndarray):
    """Determinants and cofactor matrices (``d det / d F``) of stacked matrices."""
    n = F.shape[-1]
    if n == 2:
        det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
        cof = np.empty_like(F)
        cof[:, 0, 0] = F[:, 1, 1]
        cof[:, 0, 1] = -F[:, 1, 0]
        cof[:, 1, 0] = -F[:, 0, 1]
        cof[:, 1, 1] = F[:, 0, 0]
        return det, cof
    if n == 3:
        cof = np.empty_like(F)
        for i in range(3):
            i1, i2 = (i + 1) % 3, (i + 2) % 3
            for j in range(3):
                j1, j2 = (j + 1) % 3, (j + 2) % 3
                cof[:, i, j] = F[:, i1, j1] * F[:, i2, j2] - F[:, i1, j2] * F[:, i2, j1]
        det = np.einsum("ej,ej->e", F[:, 0, :], cof[:, 0, :])
        return det, cof
    raise MeasureError(f"unsupported dimension {n}")


def jacobian_determinant(Y, ops: DiscreteOperators) -> np.ndarray:
    F = element_jacobians(Y, ops.grid)
    return det_and_cofactor(F)[0]


def distortion_from_jacobians(F: np.ndarray) -> np.ndarray:
    n = F.shape[-1]
    det = det_and_cofactor(F)[0]
    fro = np.einsum("eij,eij->e", F, F)
    K = np.full(det.shape, np.inf)
    pos = det > 0
    K[pos] = fro[pos] / (n * det[pos] ** (2.0 / n))
    return K


def conformality_distortion(Y, ops: DiscreteOperators) -> np.ndarray:
    """Generalised conformality distortion; ``+inf`` on elements with ``det <= 0``."""
    return distortion_from_jacobians(element_jacobians(Y, ops.grid))


def beltrami_from_jacobians(F: np.ndarray) -> np.ndarray:
    if F.shape[-1] != 2:
        raise MeasureError("the Beltrami coefficient is defined for n = 2 only")
    det = det_and_cofactor(F)[0]
    fro = np.einsum("eij,eij->e", F, F)
    num, den = fro - 2.0 * det, fro + 2.0 * det
    mu2 = np.full(det.shape, np.inf)
    ok = den > 0
    mu2[ok] = np.maximum(num[ok], 0.0) / den[ok]
    return np.sqrt(mu2)


def beltrami_magnitude(Y, ops: DiscreteOperators) -> np.ndarray:
    """|mu| per element (2D only)."""
    if ops.grid.n != 2:
        raise MeasureError("the Beltrami coefficient is defined for n = 2 only")
    return beltrami_from_jacobians(element_jacobians(Y, ops.grid))


def dilatation(mu_magnitude) -> np.ndarray:
    mu = np.asarray(mu_magnitude, dtype=float)
    if np.any(~(mu < 1.0)) or np.any(mu < 0):
        raise MeasureError("dilatation requires 0 <= |mu| < 1 on every element")
    return (1.0 + mu) / (1.0 - mu)


def re_ssd(T, R, Y, ops: DiscreteOperators) -> float:
    """Residual SSD after warping, as a percentage of the SSD under the identity."""
    grid = ops.grid
    R = np.asarray(R, dtype=float).ravel()
    Y = _check_nodal(Y, grid)
    warped = T.evaluate(cell_points(Y, ops))
    base = T.evaluate(cell_points(grid.X, ops))
    den = float(np.sum((base - R) ** 2))
    if den == 0.0:
        raise MeasureError("Re_SSD is undefined: template equals reference under the identity")
    return 100.0 * float(np.sum((warped - R) ** 2)) / den


def cell_points(Y, ops: DiscreteOperators) -> np.ndarray:
    """Deformed cell centres ``P @ Y`` as ``(num_cells, n)`` points."""
    return (ops.P @ np.asarray(Y, float)).reshape(ops.grid.n, -1).T


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray
    min: float
    max: float
    median: float
    mean: float


def field_histogram(values, bins: int = 50, range: tuple | None = None) -> Histogram:
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise MeasureError("cannot histogram an empty field")
    if bins < 1:
        raise MeasureError("bins must be >= 1")
    finite = v[np.isfinite(v)]
    if range is None:
        range = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
        if range[0] == range[1]:
            range = (range[0] - 0.5, range[1] + 0.5)
    counts, edges = np.histogram(finite, bins=bins, range=range)
    return Histogram(counts=counts, edges=edges, min=float(v.min()), max=float(v.max()),
                     median=float(np.median(v)), mean=float(v.mean()))

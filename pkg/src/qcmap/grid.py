"""Regular simplicial grids and the sparse operators built on them.

Nodes are numbered lexicographically with the first axis fastest, so a nodal
scalar field reshapes to ``(N+1,)*n`` with ``order="F"``.  Vector fields such
as the deformation ``Y`` are stacked by component: ``Y[i*num_nodes + k]`` is
the ``i``-th coordinate of node ``k``.

Every cube cell is split into ``n!`` Kuhn (Freudenthal) simplices, one per
permutation of the axes; element ``e`` lives in cell ``e // n!`` and uses
permutation ``e % n!``.  Because the grid is regular, the shape-function
gradients depend only on the permutation, which the solver exploits heavily.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

NEUMANN = "neumann"
DIRICHLET = "dirichlet"


class GridError(ValueError):
    """Raised for invalid grid, landmark or region input."""


@dataclass(frozen=True, eq=False)
class Grid:
    n: int
    N: int
    lo: np.ndarray
    hi: np.ndarray
    spacing: np.ndarray
    node_coords: np.ndarray      # (num_nodes, n)
    elements: np.ndarray         # (num_elements, n+1) node indices
    cell_nodes: np.ndarray       # (num_cells, 2**n) node indices, corner bit order
    simplex_corners: np.ndarray  # (n!, n+1) local corner index of each vertex
    grad_ref: np.ndarray         # (n!, n+1, n) shape-function gradients
    h: float

    @property
    def num_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def num_cells(self) -> int:
        return self.cell_nodes.shape[0]

    @property
    def simplices_per_cell(self) -> int:
        return self.simplex_corners.shape[0]

    @property
    def num_dofs(self) -> int:
        return self.n * self.num_nodes

    @property
    def X(self) -> np.ndarray:
        """Identity map as a stacked nodal vector."""
        return self.node_coords.T.ravel().copy()

    def cell_centers(self) -> np.ndarray:
        return self.node_coords[self.cell_nodes].mean(axis=1)

    def element_centroids(self) -> np.ndarray:
        return self.node_coords[self.elements].mean(axis=1)

    def domain_volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def cell_grad(self) -> np.ndarray:
        """Shape-function gradients scattered onto the ``2**n`` cell corners.

        Returns an array of shape ``(n!, 2**n, n)``; corners that are not
        vertices of a simplex carry zero rows.
        """
        ns, nv, n = self.grad_ref.shape
        out = np.zeros((ns, 2**n, n))
        for t in range(ns):
            out[t, self.simplex_corners[t]] = self.grad_ref[t]
        return out


def kuhn_simplices(n: int) -> np.ndarray:
    """Local corner indices of the ``n!`` positively oriented Kuhn simplices."""
    simplices = []
    for perm in itertools.permutations(range(n)):
        corner = 0
        verts = [0]
        for axis in perm:
            corner |= 1 << axis
            verts.append(corner)
        edges = np.array([_corner_offset(v, n) for v in verts[1:]], dtype=float).T
        if np.linalg.det(edges) < 0:
            verts[-1], verts[-2] = verts[-2], verts[-1]
        simplices.append(verts)
    return np.array(simplices, dtype=np.int64)


def _corner_offset(corner: int, n: int) -> list[int]:
    return [(corner >> j) & 1 for j in range(n)]


def build_grid(n: int, N: int, domain: Sequence[Sequence[float]] | None = None) -> Grid:
    """Build a regular simplicial grid over a box.

    Parameters
    ----------
    n : int
        Dimension, 2 or 3.
    N : int
        Cells per axis.
    domain : sequence of (lo, hi) pairs, optional
        Per-axis extents; the unit box by default.
    """
    if n not in (2, 3):
        raise GridError(f"unsupported dimension n={n}; only 2 and 3 are built")
    if int(N) != N or N < 1:
        raise GridError(f"N must be a positive integer, got {N}")
    N = int(N)
    if domain is None:
        domain = [(0.0, 1.0)] * n
    box = np.asarray(domain, dtype=float)
    if box.shape != (n, 2) or np.any(box[:, 1] <= box[:, 0]):
        raise GridError(f"domain must be {n} (lo, hi) pairs with lo < hi")
    lo, hi = box[:, 0].copy(), box[:, 1].copy()
    spacing = (hi - lo) / N

    axes = [lo[j] + spacing[j] * np.arange(N + 1) for j in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    node_coords = np.stack([m.ravel(order="F") for m in mesh], axis=1)
    node_coords[:, :] = np.where(
        np.isclose(node_coords, hi[None, :], rtol=0, atol=1e-14 * (hi - lo)),
        hi[None, :], node_coords)

    strides = (N + 1) ** np.arange(n)
    cell_idx = np.stack(
        [g.ravel(order="F") for g in np.meshgrid(*[np.arange(N)] * n, indexing="ij")],
        axis=1)
    base = cell_idx @ strides
    corner_shift = np.array([_corner_offset(c, n) for c in range(2**n)]) @ strides
    cell_nodes = base[:, None] + corner_shift[None, :]

    simplex_corners = kuhn_simplices(n)
    elements = cell_nodes[:, simplex_corners].reshape(-1, n + 1)

    grad_ref = np.empty((len(simplex_corners), n + 1, n))
    for t, verts in enumerate(simplex_corners):
        offsets = np.array([_corner_offset(v, n) for v in verts], dtype=float)
        edges = (offsets[1:] - offsets[0]).T * spacing[:, None]
        inv = np.linalg.inv(edges)
        grad_ref[t, 1:] = inv
        grad_ref[t, 0] = -inv.sum(axis=0)

    h = float(np.prod(spacing)) / math.factorial(n)
    return Grid(n=n, N=N, lo=lo, hi=hi, spacing=spacing, node_coords=node_coords,
                elements=elements, cell_nodes=cell_nodes,
                simplex_corners=simplex_corners, grad_ref=grad_ref, h=h)


def signed_volumes(grid: Grid, Y: np.ndarray | None = None) -> np.ndarray:
    """Signed element volumes of the nodal field ``Y`` (identity by default)."""
    pts = grid.node_coords if Y is None else np.asarray(Y).reshape(grid.n, -1).T
    v = pts[grid.elements]
    edges = v[:, 1:, :] - v[:, :1, :]
    return np.linalg.det(edges) / math.factorial(grid.n)


@dataclass(frozen=True, eq=False)
class DiscreteOperators:
    """Sparse first-derivative, Laplacian and averaging operators.

    ``A[i*n + j]`` maps a stacked nodal field to the per-element constant
    ``d y_i / d x_j``.  ``B`` is the vector Laplacian; the smoothness residual
    is ``B @ Y - b0`` where ``b0 = B @ X`` so the identity is always smooth.
    """
    grid: Grid
    A: list
    D: list
    B: sp.csr_matrix
    b0: np.ndarray
    P: sp.csr_matrix
    boundary_condition: str = NEUMANN
    laplacian: sp.csr_matrix = field(repr=False, default=None)


def _second_difference(N: int, H: float, bc: str) -> sp.csr_matrix:
    main = np.full(N + 1, -2.0)
    off = np.ones(N)
    D2 = sp.diags([off, main, off], [-1, 0, 1], shape=(N + 1, N + 1), format="lil")
    if bc == NEUMANN:
        # zero second difference across the boundary (linear extrapolation)
        D2[0, :] = 0
        D2[N, :] = 0
    return sp.csr_matrix(D2) / H**2


def _axis_operator(mats: list) -> sp.csr_matrix:
    # mats[j] acts on axis j; axis 0 is the fastest index
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(m, out, format="csr")
    return sp.csr_matrix(out)


def build_operators(grid: Grid, bc: str = NEUMANN) -> DiscreteOperators:
    bc = bc.lower()
    if bc not in (NEUMANN, DIRICHLET):
        raise GridError(f"unknown boundary condition {bc!r}")
    n, nn, ne = grid.n, grid.num_nodes, grid.num_elements
    ns = grid.simplices_per_cell
    rows = np.repeat(np.arange(ne), n + 1)
    cols = grid.elements.ravel()
    D = []
    for j in range(n):
        vals = np.tile(grid.grad_ref[:, :, j], (grid.num_cells, 1)).ravel()
        assert vals.size == ne * (n + 1) and ne == grid.num_cells * ns
        D.append(sp.csr_matrix((vals, (rows, cols)), shape=(ne, nn)))
    A = []
    for i in range(n):
        for j in range(n):
            Dj = D[j].tocoo()
            A.append(sp.csr_matrix((Dj.data, (Dj.row, Dj.col + i * nn)),
                                   shape=(ne, n * nn)))

    eye = [sp.identity(grid.N + 1, format="csr") for _ in range(n)]
    L = None
    for j in range(n):
        mats = list(eye)
        mats[j] = _second_difference(grid.N, grid.spacing[j], bc)
        term = _axis_operator(mats)
        L = term if L is None else L + term
    L = sp.csr_matrix(L)
    B = sp.block_diag([L] * n, format="csr")
    b0 = B @ grid.X
    if bc == NEUMANN:
        b0 = np.zeros_like(b0)

    nc = grid.num_cells
    prow = np.repeat(np.arange(nc), 2**n)
    Ps = sp.csr_matrix((np.full(prow.size, 2.0**-n), (prow, grid.cell_nodes.ravel())),
                       shape=(nc, nn))
    P = sp.block_diag([Ps] * n, format="csr")
    return DiscreteOperators(grid=grid, A=A, D=D, B=B, b0=b0, P=P,
                             boundary_condition=bc, laplacian=L)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Landmarks snapped to grid nodes.

    ``I2`` rows are ordered by component, then landmark, matching the stacked
    layout of ``Y``; ``Q`` uses the same order.
    """
    p: np.ndarray               # (m, n) requested source points
    q: np.ndarray               # (m, n) targets
    snapped_nodes: np.ndarray   # (m,)
    snap_displacement: np.ndarray
    I2: sp.csr_matrix
    Q: np.ndarray

    @property
    def m(self) -> int:
        return len(self.snapped_nodes)


def _inside(grid: Grid, pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    scale = tol * (grid.hi - grid.lo)
    return np.all((pts >= grid.lo - scale) & (pts <= grid.hi + scale), axis=1)


def snap_to_nodes(grid: Grid, points: np.ndarray) -> np.ndarray:
    """Nearest node index per point; exact half-way ties go to the lower index."""
    t = (np.asarray(points, dtype=float) - grid.lo) / grid.spacing
    idx = np.clip(np.ceil(t - 0.5), 0, grid.N).astype(np.int64)
    return idx @ ((grid.N + 1) ** np.arange(grid.n))


def build_landmarks(grid: Grid, raw_pairs) -> LandmarkSet:
    """Snap landmark pairs ``(p, q)`` to grid nodes and assemble ``I2`` and ``Q``.

    ``raw_pairs`` is an iterable of ``(p, q)`` or an ``(m, 2n)`` array.
    """
    n = grid.n
    arr = _pairs_array(raw_pairs, n)
    p, q = arr[:, :n], arr[:, n:]
    if len(arr):
        bad = ~(_inside(grid, p) & _inside(grid, q))
        if bad.any():
            raise GridError(f"landmarks outside the domain: rows {np.flatnonzero(bad).tolist()}")
    nodes = snap_to_nodes(grid, p)
    keep = []
    seen: dict[int, int] = {}
    for k, node in enumerate(nodes):
        if node in seen:
            first = seen[node]
            if not np.array_equal(q[first], q[k]):
                raise GridError(
                    f"landmarks {first} and {k} snap to node {node} with different targets")
            logger.warning("landmark %d duplicates landmark %d; dropped", k, first)
            continue
        seen[node] = k
        keep.append(k)
    keep = np.asarray(keep, dtype=np.int64)
    p, q, nodes = p[keep], q[keep], nodes[keep]
    disp = np.linalg.norm(grid.node_coords[nodes] - p, axis=1) if len(p) else np.zeros(0)
    for k in np.flatnonzero(disp > 1e-12):
        logger.warning("landmark %d snapped to node %d (displacement %.3g)",
                       int(keep[k]), int(nodes[k]), disp[k])
    m = len(nodes)
    rows = np.arange(n * m)
    cols = (np.arange(n)[:, None] * grid.num_nodes + nodes[None, :]).ravel()
    I2 = sp.csr_matrix((np.ones(n * m), (rows, cols)), shape=(n * m, grid.num_dofs))
    Q = q.T.ravel().copy()
    return LandmarkSet(p=p, q=q, snapped_nodes=nodes, snap_displacement=disp, I2=I2, Q=Q)


def _pairs_array(raw_pairs, n: int) -> np.ndarray:
    if raw_pairs is None:
        return np.zeros((0, 2 * n))
    if isinstance(raw_pairs, np.ndarray):
        arr = np.asarray(raw_pairs, dtype=float).reshape(-1, 2 * n)
    else:
        rows = [np.concatenate([np.ravel(p), np.ravel(q)]) for p, q in raw_pairs]
        arr = np.asarray(rows, dtype=float).reshape(-1, 2 * n)
    if not np.all(np.isfinite(arr)):
        raise GridError("landmark coordinates must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class RegionPrior:
    element_mask: np.ndarray
    I1: sp.csr_matrix
    theta_bar: np.ndarray

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.element_mask)


MaskLike = Callable[[np.ndarray], np.ndarray] | np.ndarray | Sequence


def boxes_mask(boxes) -> Callable[[np.ndarray], np.ndarray]:
    """Membership test for a union of axis-aligned boxes ``[[lo...], [hi...]]``."""
    boxes = [(np.asarray(b[0], float), np.asarray(b[1], float)) for b in boxes]

    def inside(pts):
        hit = np.zeros(len(pts), dtype=bool)
        for lo, hi in boxes:
            hit |= np.all((pts >= lo) & (pts <= hi), axis=1)
        return hit
    return inside


def build_region_prior(grid: Grid, mask: MaskLike, theta_bar) -> RegionPrior:
    """Select elements whose centroid lies inside ``mask`` and attach priors.

    ``mask`` may be a callable on ``(k, n)`` points, a boolean array over
    elements, or a list of boxes.  ``theta_bar`` is a scalar, one value per
    selected element, or one value per element.
    """
    if callable(mask):
        sel = np.asarray(mask(grid.element_centroids()), dtype=bool)
    elif isinstance(mask, np.ndarray) and mask.dtype == bool:
        if mask.shape != (grid.num_elements,):
            raise GridError("boolean mask must have one entry per element")
        sel = mask.copy()
    else:
        sel = boxes_mask(mask)(grid.element_centroids())
    if not sel.any():
        raise GridError("region mask selects no elements")
    idx = np.flatnonzero(sel)
    tb = np.asarray(theta_bar, dtype=float)
    if tb.ndim == 0:
        tb = np.full(idx.size, float(tb))
    elif tb.size == grid.num_elements:
        tb = tb.ravel()[idx]
    elif tb.size != idx.size:
        raise GridError(
            f"theta_bar has {tb.size} values; expected 1, {idx.size} or {grid.num_elements}")
    I1 = sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)),
                       shape=(idx.size, grid.num_elements))
    return RegionPrior(element_mask=sel, I1=I1, theta_bar=tb.astype(float).copy())

"""Discrete augmented-Lagrangian pieces: the Theta and Y subproblem objectives.

``J1(Theta)`` and ``J2(Y)`` are evaluated with exact gradients and symmetric
positive (semi)definite Gauss-Newton surrogates of their Hessians.  For
``n = 2`` the formulas reduce term by term to the classical two-dimensional
scheme; for general ``n`` the distortion denominator is ``n * exp(2 Theta / n)``.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from qcmap import kernels
from qcmap.grid import DiscreteOperators, Grid, LandmarkSet, RegionPrior
from qcmap.image import SplineImage
from qcmap.measures import det_and_cofactor, element_jacobians

logger = logging.getLogger(__name__)

EXP_CLAMP = 60.0
EPS_REG = 1e-10
HESSIAN_MODES = ("exact", "paper", "weighted")


class EnergyError(ValueError):
    pass


@dataclass(frozen=True)
class Weights:
    alpha1: float = 0.0
    alpha2: float = 1.0
    alpha3: float = 0.0
    alpha4: float = 0.0
    alpha5: float = 0.0
    rho1: float = 1.0
    rho2: float = 1e4

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise EnergyError(f"{f.name} must be finite and non-negative, got {v}")

    def replace(self, **kw) -> "Weights":
        return dataclasses.replace(self, **kw)


def clamped_exp(x: np.ndarray, scale: float = 1.0):
    """``exp(scale * x)`` with the exponent clipped to +-EXP_CLAMP; returns (value, hit)."""
    z = scale * np.asarray(x, dtype=float)
    hit = bool(np.any(np.abs(z) > EXP_CLAMP))
    return np.exp(np.clip(z, -EXP_CLAMP, EXP_CLAMP)), hit


@dataclass(eq=False)
class Problem:
    """Everything that stays fixed during a solve."""
    ops: DiscreteOperators
    weights: Weights
    landmarks: LandmarkSet | None = None
    prior: RegionPrior | None = None
    template: SplineImage | None = None
    reference: np.ndarray | None = None
    hessian_distortion: str = "exact"

    def __post_init__(self):
        g = self.grid
        if self.hessian_distortion not in HESSIAN_MODES:
            raise EnergyError(f"hessian_distortion must be one of {HESSIAN_MODES}")
        if self.reference is not None:
            self.reference = np.asarray(self.reference, dtype=float).ravel()
            if self.reference.size != g.num_cells:
                raise EnergyError(
                    f"reference has {self.reference.size} values, expected {g.num_cells}")
        if (self.template is None) != (self.reference is None):
            raise EnergyError("template and reference must be given together")
        if self.template is not None and self.template.n != g.n:
            raise EnergyError("template dimension does not match the grid")
        if self.prior is not None and self.prior.element_mask.size != g.num_elements:
            raise EnergyError("region prior was built for a different grid")
        if self.landmarks is not None and self.landmarks.I2.shape[1] != g.num_dofs:
            raise EnergyError("landmarks were built for a different grid")

    @property
    def grid(self) -> Grid:
        return self.ops.grid

    @property
    def has_intensity(self) -> bool:
        return self.template is not None and self.weights.alpha5 > 0

    @property
    def has_landmarks(self) -> bool:
        return self.landmarks is not None and self.landmarks.m > 0

    @property
    def has_prior(self) -> bool:
        return self.prior is not None and self.weights.alpha4 > 0

    @cached_property
    def assembler(self) -> "HessianAssembler":
        return HessianAssembler(self.ops, self.landmarks)

    def warp(self, Y: np.ndarray, with_gradient: bool = False):
        """Template values at the deformed cell centres (and their gradients)."""
        pts = (self.ops.P @ Y).reshape(self.grid.n, -1).T
        if with_gradient:
            return self.template.evaluate_with_gradient(pts)
        return self.template.evaluate(pts)


# --------------------------------------------------------------------------
# Theta subproblem


@dataclass(eq=False)
class ThetaContext:
    r: np.ndarray
    s: np.ndarray
    weights: Weights
    h: float
    n: int
    prior_index: np.ndarray | None = None
    theta_bar: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.r < 0):
            raise EnergyError("r must be non-negative")


@dataclass
class ThetaEval:
    value: float
    grad: np.ndarray
    hess_diag: np.ndarray
    clamped: bool = False


def make_theta_context(problem: Problem, Y, lam1, rho1) -> ThetaContext:
    F = element_jacobians(Y, problem.grid)
    det = det_and_cofactor(F)[0]
    r = np.einsum("eij,eij->e", F, F)
    w = problem.weights.replace(rho1=rho1)
    prior = problem.prior if problem.has_prior else None
    return ThetaContext(r=r, s=det + lam1 / rho1, weights=w, h=problem.grid.h,
                        n=problem.grid.n,
                        prior_index=None if prior is None else prior.selected,
                        theta_bar=None if prior is None else prior.theta_bar)


def theta_value(theta, ctx: ThetaContext) -> float:
    return theta_value_grad_hess(theta, ctx, need_derivatives=False).value


def theta_value_grad_hess(theta, ctx: ThetaContext, need_derivatives: bool = True) -> ThetaEval:
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise EnergyError("Theta contains non-finite values")
    w, h, n = ctx.weights, ctx.h, ctx.n
    e, hit1 = clamped_exp(theta)
    q, hit2 = clamped_exp(theta, -2.0 / n)
    rq = ctx.r * q
    res = e - ctx.s
    value = 0.5 * w.alpha1 * h * theta @ theta
    value += w.alpha2 * h / n * rq.sum()
    value += 0.5 * w.rho1 * h * res @ res
    if ctx.prior_index is not None:
        pr = theta[ctx.prior_index] - ctx.theta_bar
        value += 0.5 * w.alpha4 * h * pr @ pr
    if not need_derivatives:
        return ThetaEval(float(value), None, None, hit1 or hit2)
    grad = w.alpha1 * h * theta - (2.0 * w.alpha2 * h / n**2) * rq + w.rho1 * h * e * res
    hess = np.full_like(theta, w.alpha1 * h) + (4.0 * w.alpha2 * h / n**3) * rq
    # true curvature of the penalty is e * (2e - s); keep it at least e * e
    hess += w.rho1 * h * e * np.maximum(2.0 * e - ctx.s, e)
    if ctx.prior_index is not None:
        np.add.at(grad, ctx.prior_index, w.alpha4 * h * pr)
        np.add.at(hess, ctx.prior_index, w.alpha4 * h)
    return ThetaEval(float(value), grad, hess, hit1 or hit2)


# --------------------------------------------------------------------------
# Y subproblem


@dataclass(eq=False)
class YContext:
    problem: Problem
    exp_theta: np.ndarray
    lam1: np.ndarray
    lam2: np.ndarray
    rho1: float
    rho2: float

    def __post_init__(self):
        if np.any(self.exp_theta <= 0):
            raise EnergyError("exp(Theta) must be positive")

    @cached_property
    def distortion_weight(self) -> np.ndarray:
        n = self.problem.grid.n
        return self.exp_theta ** (-2.0 / n)

    @cached_property
    def det_shift(self) -> np.ndarray:
        return self.exp_theta - self.lam1 / self.rho1


def make_y_context(problem: Problem, theta, lam1, lam2, rho1, rho2=None) -> YContext:
    e, _ = clamped_exp(theta)
    return YContext(problem=problem, exp_theta=e, lam1=np.asarray(lam1, float),
                    lam2=np.asarray(lam2, float), rho1=float(rho1),
                    rho2=float(problem.weights.rho2 if rho2 is None else rho2))


@dataclass
class YEval:
    value: float
    grad: np.ndarray | None
    hess: sp.csr_matrix | None
    terms: dict = field(default_factory=dict)


def y_value(Y, ctx: YContext) -> float:
    return y_value_grad_hess(Y, ctx, need_derivatives=False).value


def y_value_grad_hess(Y, ctx: YContext, need_derivatives: bool = True,
                      need_hessian: bool = True) -> YEval:
    prob = ctx.problem
    grid, ops, w = prob.grid, prob.ops, prob.weights
    Y = np.asarray(Y, dtype=float).ravel()
    if Y.size != grid.num_dofs:
        raise EnergyError(f"Y has {Y.size} entries, expected {grid.num_dofs}")
    if not np.all(np.isfinite(Y)):
        raise EnergyError("Y contains non-finite values")
    n, h = grid.n, grid.h
    asm = prob.assembler

    F = element_jacobians(Y, grid)
    det, cof = det_and_cofactor(F)
    fro = np.einsum("eij,eij->e", F, F)
    wd = ctx.distortion_weight
    dres = det - ctx.det_shift
    sres = ops.B @ Y - ops.b0

    terms = {
        "distortion": w.alpha2 * h / n * float(wd @ fro),
        "smooth": 0.5 * w.alpha3 * h * float(sres @ sres),
        "ssd": 0.0,
        "constraint": 0.5 * ctx.rho1 * h * float(dres @ dres),
        "landmark": 0.0,
    }
    if prob.has_intensity:
        if need_derivatives:
            tv, tg = prob.warp(Y, with_gradient=True)
        else:
            tv = prob.warp(Y)
        ires = tv - prob.reference
        terms["ssd"] = 0.5 * w.alpha5 * h * float(ires @ ires)
    if prob.has_landmarks:
        lm = prob.landmarks
        lres = lm.I2 @ Y - lm.Q + ctx.lam2 / ctx.rho2
        terms["landmark"] = 0.5 * ctx.rho2 * float(lres @ lres)
    value = float(sum(terms.values()))
    if not need_derivatives:
        return YEval(value, None, None, terms)

    G = asm.grad_ref_elements  # (ne, n+1, n)
    # element-local gradient over (component, vertex)
    loc = (2.0 * w.alpha2 * h / n) * wd[:, None, None] * np.einsum("eij,eaj->eia", F, G)
    mvec = np.einsum("eij,eaj->eia", cof, G)
    loc += (ctx.rho1 * h) * dres[:, None, None] * mvec
    grad = np.bincount(asm.element_dofs.ravel(), weights=loc.ravel(),
                       minlength=grid.num_dofs)
    if w.alpha3 > 0:
        grad += (w.alpha3 * h) * (ops.B.T @ sres)
    if prob.has_intensity:
        cg = (w.alpha5 * h * 2.0**-n) * ires[:, None] * tg  # (cells, n)
        cvals = np.broadcast_to(cg[:, :, None], (grid.num_cells, n, 2**n))
        grad += np.bincount(asm.cell_dofs.ravel(), weights=cvals.ravel(),
                            minlength=grid.num_dofs)
    if prob.has_landmarks:
        grad += ctx.rho2 * (prob.landmarks.I2.T @ lres)
    if not need_hessian:
        return YEval(value, grad, None, terms)

    data = asm.constant_data(w.alpha3 * h, ctx.rho2 if prob.has_landmarks else 0.0)
    if w.alpha2 > 0:
        mode = prob.hessian_distortion
        if mode == "exact":
            data += asm.distortion_map @ ((2.0 * w.alpha2 * h / n) * wd)
        else:
            m1 = np.einsum("eij,eaj->eia", F, G).reshape(grid.num_elements, -1)
            wt = np.full(grid.num_elements, w.alpha2 * h)
            if mode == "weighted":
                wt = wt * wd
            kernels.accumulate_outer(m1, wt, asm.element_scatter, data)
    if ctx.rho1 > 0:
        kernels.accumulate_outer(mvec.reshape(grid.num_elements, -1),
                                 np.full(grid.num_elements, ctx.rho1 * h),
                                 asm.element_scatter, data)
    if prob.has_intensity:
        cv = np.broadcast_to((2.0**-n) * tg[:, :, None], (grid.num_cells, n, 2**n))
        kernels.accumulate_outer(cv.reshape(grid.num_cells, -1),
                                 np.full(grid.num_cells, w.alpha5 * h),
                                 asm.cell_scatter, data)
    # Tikhonov shift, relative to the diagonal so that it still counts when
    # rho1 is large (translations are an exact null mode without landmarks)
    diag = data[asm.diag_pos]
    diag += EPS_REG * max(1.0, float(diag.max()))
    data[asm.diag_pos] = diag
    return YEval(value, grad, asm.matrix(data), terms)


class HessianAssembler:
    """Fixed sparsity pattern for the Y-subproblem Hessian surrogate.

    The pattern is the union of all intra-cell dof couplings, ``B.T @ B``
    and the diagonal, so every Gauss-Newton matrix shares one structure and a
    sparse factorisation can reuse its symbolic analysis.
    """

    def __init__(self, ops: DiscreteOperators, landmarks: LandmarkSet | None = None):
        grid = ops.grid
        n, nn, ndof = grid.n, grid.num_nodes, grid.num_dofs
        self.grid = grid
        comp = np.arange(n) * nn
        # (cells, n, 2**n) and (elements, n, n+1) global dof indices
        self.cell_dofs = comp[None, :, None] + grid.cell_nodes[:, None, :]
        self.element_dofs = comp[None, :, None] + grid.elements[:, None, :]
        ns = grid.simplices_per_cell
        self.grad_ref_elements = np.tile(grid.grad_ref, (grid.num_cells, 1, 1))

        cd = self.cell_dofs.reshape(grid.num_cells, -1)
        L = cd.shape[1]
        rows = np.repeat(cd, L, axis=1).ravel()
        cols = np.tile(cd, (1, L)).ravel()
        BtB = (ops.B.T @ ops.B).tocoo()
        pat = sp.csr_matrix(
            (np.ones(rows.size + BtB.nnz + ndof),
             (np.concatenate([rows, BtB.row, np.arange(ndof)]),
              np.concatenate([cols, BtB.col, np.arange(ndof)]))),
            shape=(ndof, ndof))
        pat.sum_duplicates()
        pat.sort_indices()
        self.indptr = pat.indptr.astype(np.int32)
        self.indices = pat.indices.astype(np.int32)
        self.nnz = pat.nnz
        keys = np.repeat(np.arange(ndof, dtype=np.int64), np.diff(pat.indptr)) * ndof \
            + pat.indices
        self._keys = keys

        self.cell_scatter = self._locate(rows, cols).reshape(grid.num_cells, L, L)
        # element-local (component, vertex) -> cell-local (component, corner)
        ldof = (np.arange(n)[:, None] * 2**n + grid.simplex_corners[:, None, :]) \
            .reshape(ns, -1)
        esc = np.empty((grid.num_cells, ns, n * (n + 1), n * (n + 1)), dtype=np.int32)
        for t in range(ns):
            esc[:, t] = self.cell_scatter[:, ldof[t][:, None], ldof[t][None, :]]
        self.element_scatter = esc.reshape(grid.num_elements, n * (n + 1), n * (n + 1))

        self._btb_pos = self._locate(BtB.row, BtB.col)
        self._btb_val = BtB.data
        self.diag_pos = self._locate(np.arange(ndof), np.arange(ndof))
        self._lm_pos = None
        if landmarks is not None and landmarks.m > 0:
            I2tI2 = (landmarks.I2.T @ landmarks.I2).tocoo()
            self._lm_pos = self._locate(I2tI2.row, I2tI2.col)
            self._lm_val = I2tI2.data

        # distortion block per element: (G G^T) (x) I_n, linear in the element weight
        GG = np.einsum("taj,tbj->tab", grid.grad_ref, grid.grad_ref)
        eye = np.eye(n)
        blk = np.einsum("ik,tab->tiakb", eye, GG).reshape(ns, n * (n + 1), n * (n + 1))
        vals = np.tile(blk, (grid.num_cells, 1, 1))
        keep = vals != 0
        e_idx = np.broadcast_to(np.arange(grid.num_elements)[:, None, None], vals.shape)
        self.distortion_map = sp.csr_matrix(
            (vals[keep], (self.element_scatter[keep], e_idx[keep])),
            shape=(self.nnz, grid.num_elements))

    def _locate(self, rows, cols) -> np.ndarray:
        q = np.asarray(rows, np.int64) * self.grid.num_dofs + np.asarray(cols, np.int64)
        pos = np.searchsorted(self._keys, q)
        if np.any(self._keys[np.minimum(pos, self.nnz - 1)] != q):
            raise RuntimeError("entry outside the Hessian sparsity pattern")
        return pos.astype(np.int32)

    def constant_data(self, smooth_weight: float, landmark_weight: float) -> np.ndarray:
        data = np.zeros(self.nnz)
        if smooth_weight > 0:
            np.add.at(data, self._btb_pos, smooth_weight * self._btb_val)
        if landmark_weight > 0 and self._lm_pos is not None:
            np.add.at(data, self._lm_pos, landmark_weight * self._lm_val)
        return data

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        nd = self.grid.num_dofs
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(nd, nd))


# --------------------------------------------------------------------------
# Full augmented Lagrangian

TERM_NAMES = ("theta_l2", "distortion", "smooth", "prior", "ssd", "constraint", "landmark")


def augmented_lagrangian_value(problem: Problem, Y, theta, lam1, lam2, rho1, rho2=None):
    """Total augmented Lagrangian and its seven labelled terms."""
    grid, ops, w = problem.grid, problem.ops, problem.weights
    rho2 = w.rho2 if rho2 is None else rho2
    n, h = grid.n, grid.h
    Y = np.asarray(Y, float).ravel()
    theta = np.asarray(theta, float).ravel()
    if Y.size != grid.num_dofs or theta.size != grid.num_elements \
            or np.size(lam1) != grid.num_elements:
        raise EnergyError("state shapes do not match the grid")
    F = element_jacobians(Y, grid)
    det = det_and_cofactor(F)[0]
    fro = np.einsum("eij,eij->e", F, F)
    e, _ = clamped_exp(theta)
    q, _ = clamped_exp(theta, -2.0 / n)
    E = det - e
    sres = ops.B @ Y - ops.b0
    terms = dict.fromkeys(TERM_NAMES, 0.0)
    terms["theta_l2"] = 0.5 * w.alpha1 * h * float(theta @ theta)
    terms["distortion"] = w.alpha2 * h / n * float(fro @ q)
    terms["smooth"] = 0.5 * w.alpha3 * h * float(sres @ sres)
    if problem.has_prior:
        pr = theta[problem.prior.selected] - problem.prior.theta_bar
        terms["prior"] = 0.5 * w.alpha4 * h * float(pr @ pr)
    if problem.has_intensity:
        ires = problem.warp(Y) - problem.reference
        terms["ssd"] = 0.5 * w.alpha5 * h * float(ires @ ires)
    terms["constraint"] = h * float(np.asarray(lam1) @ E) + 0.5 * rho1 * h * float(E @ E)
    if problem.has_landmarks:
        lr = problem.landmarks.I2 @ Y - problem.landmarks.Q
        terms["landmark"] = float(np.asarray(lam2) @ lr) + 0.5 * rho2 * float(lr @ lr)
    return float(sum(terms.values())), terms

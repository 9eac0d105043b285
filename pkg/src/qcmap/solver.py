"""Gauss-Newton inner solvers and the ADMM outer loop."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from qcmap.energy import (
    EnergyError, Problem, augmented_lagrangian_value, clamped_exp, make_theta_context,
    make_y_context, theta_value_grad_hess, y_value_grad_hess,
)
from qcmap.measures import jacobian_determinant

try:  # optional CHOLMOD backend
    from sksparse.cholmod import CholmodNotPositiveDefiniteError, analyze as _cholmod_analyze
except ImportError:  # pragma: no cover - depends on the environment
    _cholmod_analyze = None
    CholmodNotPositiveDefiniteError = None

logger = logging.getLogger(__name__)

_cholmod_mode = None


def cholmod_mode() -> str | None:
    """Factorisation mode for CHOLMOD, probed once per process.

    Some OpenBLAS builds pick a faulty kernel on recent CPUs, which makes the
    supernodal path report spurious breakdowns on SPD input.  We factor a small
    SPD matrix once and fall back to the simplicial path if that fails.
    """
    global _cholmod_mode
    if _cholmod_analyze is None:
        return None
    if _cholmod_mode is None:
        lap = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(40, 40))
        lap2 = sp.kronsum(lap, lap)
        probe = sp.csc_matrix(lap2 @ lap2 + sp.eye(lap2.shape[0]))
        try:
            _cholmod_analyze(probe, mode="supernodal").cholesky(probe)
            _cholmod_mode = "supernodal"
        except CholmodNotPositiveDefiniteError:
            logger.warning("CHOLMOD supernodal factorisation is unreliable with this BLAS; "
                           "using the slower simplicial mode (try OPENBLAS_CORETYPE=Haswell)")
            _cholmod_mode = "simplicial"
    return _cholmod_mode

LOG_COLUMNS = ("iter", "E_total", "E_theta_l2", "E_distortion", "E_smooth", "E_prior",
               "E_ssd", "constraint_inf", "landmark_inf", "min_det", "rho1", "seconds")


class SolverError(RuntimeError):
    pass


class LineSearchError(SolverError):
    pass


class LinearSolveError(SolverError):
    pass


class DivergenceError(SolverError):
    """Raised by the divergence guard; ``state`` holds the last iterate."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class SolverConfig:
    rho1_init: float = 1.0
    rho2: float = 1e4
    outer_max: int = 500
    outer_tol_constraint: float = 1e-8
    outer_tol_landmark: float = 1e-6
    outer_tol_step: float = 1e-10
    inner_max: int = 10
    inner_grad_tol: float = 1e-2
    inner_abs_tol: float = 1e-12
    armijo_c: float = 1e-4
    armijo_factor: float = 0.5
    armijo_step0: float = 1.0
    armijo_max_backtracks: int = 25
    penalty_growth_trigger: float = 0.95
    penalty_factor: float = 2.0
    rho1_cap: float = 1e12
    linear_solver: str = "direct"
    cg_tol: float = 1e-10
    cg_forcing: bool = True
    hessian_distortion: str = "exact"
    divergence_factor: float = 1e6
    record_steps: bool = False
    record_time: bool = True
    seed: int | None = None

    def __post_init__(self):
        for name in ("outer_tol_constraint", "outer_tol_landmark", "outer_tol_step",
                     "inner_grad_tol", "armijo_c", "cg_tol", "rho1_init", "rho2"):
            if not getattr(self, name) > 0:
                raise SolverError(f"{name} must be positive")
        if not self.penalty_factor > 1:
            raise SolverError("penalty_factor must exceed 1")
        if not 0 < self.penalty_growth_trigger < 1:
            raise SolverError("penalty_growth_trigger must lie in (0, 1)")
        if not 0 < self.armijo_factor < 1:
            raise SolverError("armijo_factor must lie in (0, 1)")
        if self.linear_solver not in ("direct", "cg"):
            raise SolverError("linear_solver must be 'direct' or 'cg'")


@dataclass
class StepRecord:
    block: str
    f0: float
    f1: float
    step: float
    slope: float
    c: float


@dataclass
class SolverState:
    Y: np.ndarray
    theta: np.ndarray
    lam1: np.ndarray
    lam2: np.ndarray
    rho1: float
    rho2: float
    iteration: int = 0
    E: np.ndarray | None = None
    log: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    status: str = "running"
    clamp_hits: int = 0

    @property
    def constraint_inf(self) -> float:
        return float(np.max(np.abs(self.E))) if self.E is not None and self.E.size else 0.0


# --------------------------------------------------------------------------
# line search and linear algebra


@dataclass
class ArmijoResult:
    step: float
    x: np.ndarray
    value: float
    evals: int
    accepted: bool


def armijo_search(objective: Callable, x, p, d, cfg: SolverConfig | None = None,
                  f0: float | None = None) -> ArmijoResult:
    """Backtracking search for ``f(x + t p) <= f(x) + c t d.p``.

    Exhausting the backtracks is not an error: the result comes back with
    ``accepted=False`` and ``x`` unchanged.
    """
    cfg = cfg or SolverConfig()
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    slope = float(np.dot(np.ravel(d), np.ravel(p)))
    if not slope < 0:
        raise LineSearchError(f"not a descent direction (d.p = {slope:.3e})")
    evals = 0
    if f0 is None:
        f0 = objective(x)
        evals += 1
    t = cfg.armijo_step0
    for _ in range(cfg.armijo_max_backtracks + 1):
        xt = x + t * p
        try:
            ft = objective(xt)
        except (EnergyError, FloatingPointError):
            ft = np.inf
        evals += 1
        if np.isfinite(ft) and ft <= f0 + cfg.armijo_c * t * slope:
            return ArmijoResult(t, xt, float(ft), evals, True)
        t *= cfg.armijo_factor
    return ArmijoResult(0.0, x, float(f0), evals, False)


class SPDSolver:
    """Sparse SPD solves that reuse the symbolic factorisation of a fixed pattern."""

    def __init__(self, method: str = "direct", tol: float = 1e-10):
        self.method = method
        self.tol = tol
        self._symbolic = None
        self._pattern_key = None

    def solve(self, H: sp.spmatrix, rhs: np.ndarray, rtol: float | None = None) -> np.ndarray:
        """Solve ``H x = rhs``; ``rtol`` loosens the CG tolerance (never below ``tol``)."""
        rhs = np.asarray(rhs, dtype=float)
        if self.method == "cg":
            x = self._cg(sp.csr_matrix(H), rhs, max(self.tol, rtol or 0.0))
        elif _cholmod_analyze is not None:
            x = self._cholmod(sp.csc_matrix(H), rhs)
        else:
            x = self._superlu(sp.csc_matrix(H), rhs)
        if not np.all(np.isfinite(x)):
            raise LinearSolveError("linear solve produced non-finite values")
        if rhs.any() and not float(x @ rhs) > 0:
            raise LinearSolveError("matrix is not positive definite (x.b <= 0)")
        return x

    def _cholmod(self, H, rhs):
        key = (H.shape, H.nnz, hash(H.indices[: min(H.nnz, 4096)].tobytes()))
        if self._symbolic is None or key != self._pattern_key:
            self._symbolic = _cholmod_analyze(H, mode=cholmod_mode())
            self._pattern_key = key
        try:
            factor = self._symbolic.cholesky(H)
        except CholmodNotPositiveDefiniteError as exc:
            raise LinearSolveError(f"Cholesky breakdown: {exc}") from exc
        x = factor(rhs)
        return self._refine(H, rhs, x, factor)

    def _superlu(self, H, rhs):
        try:
            lu = spla.splu(H, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                           options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise LinearSolveError(f"LU factorisation failed: {exc}") from exc
        x = lu.solve(rhs)
        return self._refine(H, rhs, x, lu.solve)

    def _refine(self, H, rhs, x, solve):
        nb = np.linalg.norm(rhs)
        for _ in range(2):
            r = rhs - H @ x
            if nb == 0 or np.linalg.norm(r) <= self.tol * nb:
                break
            x = x + solve(r)
        return x

    def _cg(self, H, rhs, rtol):
        diag = H.diagonal()
        if np.any(diag <= 0):
            raise LinearSolveError("non-positive diagonal: matrix is not SPD")
        M = sp.diags(1.0 / diag)
        count = [0]

        def tick(_):
            count[0] += 1
        x, info = spla.cg(H, rhs, rtol=rtol, atol=0.0, maxiter=10 * H.shape[0], M=M,
                          callback=tick)
        logger.debug("CG: %d iterations (rtol %.1e)", count[0], rtol)
        if info != 0:
            raise LinearSolveError(f"CG did not converge (info={info})")
        return x


def solve_spd_system(H, rhs, cfg: SolverConfig | None = None) -> np.ndarray:
    cfg = cfg or SolverConfig()
    return SPDSolver(cfg.linear_solver, cfg.cg_tol).solve(H, rhs)


# --------------------------------------------------------------------------
# inner solvers


@dataclass
class InnerInfo:
    iterations: int = 0
    grad0: float = 0.0
    grad: float = 0.0
    values: list = field(default_factory=list)
    exhausted: bool = False
    clamped: bool = False


def _stop(gnorm, g0, cfg):
    return gnorm <= cfg.inner_abs_tol or gnorm <= cfg.inner_grad_tol * g0


THETA_MAX_STEP = 1.0


def solve_theta_subproblem(theta, ctx, cfg: SolverConfig, steps: list | None = None):
    """Gauss-Newton with a diagonal surrogate Hessian and Armijo steps."""
    theta = np.array(theta, dtype=float)
    ev = theta_value_grad_hess(theta, ctx)
    info = InnerInfo(grad0=float(np.max(np.abs(ev.grad), initial=0.0)), values=[ev.value],
                     clamped=ev.clamped)
    info.grad = info.grad0
    if info.grad0 <= cfg.inner_abs_tol:
        return theta, info
    objective = lambda t: theta_value_grad_hess(t, ctx, need_derivatives=False).value
    for _ in range(cfg.inner_max):
        p = -ev.grad / ev.hess_diag
        np.clip(p, -THETA_MAX_STEP, THETA_MAX_STEP, out=p)
        ls = armijo_search(objective, theta, p, ev.grad, cfg, f0=ev.value)
        if not ls.accepted:
            info.exhausted = True
            break
        if steps is not None:
            steps.append(StepRecord("theta", ev.value, ls.value, ls.step,
                                    float(ev.grad @ p), cfg.armijo_c))
        theta = ls.x
        ev = theta_value_grad_hess(theta, ctx)
        info.iterations += 1
        info.values.append(ev.value)
        info.clamped |= ev.clamped
        info.grad = float(np.max(np.abs(ev.grad)))
        if _stop(info.grad, info.grad0, cfg):
            break
    return theta, info


def solve_y_subproblem(Y, ctx, cfg: SolverConfig, linear: SPDSolver | None = None,
                       steps: list | None = None):
    """Gauss-Newton with the sparse SPD surrogate Hessian and Armijo steps."""
    linear = linear or SPDSolver(cfg.linear_solver, cfg.cg_tol)
    Y = np.array(Y, dtype=float)
    ev = y_value_grad_hess(Y, ctx)
    info = InnerInfo(grad0=float(np.max(np.abs(ev.grad), initial=0.0)), values=[ev.value])
    info.grad = info.grad0
    if info.grad0 <= cfg.inner_abs_tol:
        return Y, info
    objective = lambda y: y_value_grad_hess(y, ctx, need_derivatives=False).value
    for it in range(cfg.inner_max):
        # inexact Newton: the iterative solver only needs to beat the inner tolerance
        rtol = min(0.1, info.grad / info.grad0) if cfg.cg_forcing else None
        try:
            p = -linear.solve(ev.hess, ev.grad, rtol)
        except LinearSolveError as exc:
            raise LinearSolveError(f"Y-subproblem inner iteration {it}: {exc}") from exc
        ls = armijo_search(objective, Y, p, ev.grad, cfg, f0=ev.value)
        if not ls.accepted:
            info.exhausted = True
            break
        if steps is not None:
            steps.append(StepRecord("Y", ev.value, ls.value, ls.step,
                                    float(ev.grad @ p), cfg.armijo_c))
        Y = ls.x
        last = it == cfg.inner_max - 1
        ev = y_value_grad_hess(Y, ctx, need_hessian=not last)
        info.iterations += 1
        info.values.append(ev.value)
        info.grad = float(np.max(np.abs(ev.grad)))
        if _stop(info.grad, info.grad0, cfg):
            break
    return Y, info


# --------------------------------------------------------------------------
# ADMM driver


def initial_state(problem: Problem, cfg: SolverConfig) -> SolverState:
    """Identity map with the determinant multiplier that makes it stationary.

    At ``Y = X`` and ``Theta = 0`` the distortion gradient is balanced exactly
    by ``lam1 = -2 alpha2 / n``; zero multipliers would push the boundary
    inward on the first iteration even for a trivial problem.
    """
    grid = problem.grid
    m = problem.landmarks.m if problem.has_landmarks else 0
    lam1 = np.full(grid.num_elements, -2.0 * problem.weights.alpha2 / grid.n)
    state = SolverState(Y=grid.X, theta=np.zeros(grid.num_elements), lam1=lam1,
                        lam2=np.zeros(grid.n * m), rho1=cfg.rho1_init, rho2=cfg.rho2)
    state.E = jacobian_determinant(state.Y, problem.ops) - clamped_exp(state.theta)[0]
    return state


def _landmark_inf(problem: Problem, Y) -> float:
    if not problem.has_landmarks:
        return 0.0
    lm = problem.landmarks
    return float(np.max(np.abs(lm.I2 @ Y - lm.Q)))


def admm_solve(problem: Problem, cfg: SolverConfig | None = None,
               warm_start: SolverState | None = None,
               callback: Callable | None = None) -> SolverState:
    """Alternate Theta and Y Gauss-Newton solves with multiplier updates.

    Returns the final :class:`SolverState`; ``status`` is ``"converged"`` or
    ``"max_iterations"``.  Raises :class:`DivergenceError` when the energy or
    the constraint violation blows up.
    """
    cfg = cfg or SolverConfig()
    w = problem.weights
    if not any(getattr(w, f"alpha{i}") > 0 for i in range(1, 6)) and not problem.has_landmarks:
        raise SolverError("at least one energy term must be active")
    if problem.hessian_distortion != cfg.hessian_distortion:
        problem.hessian_distortion = cfg.hessian_distortion
    state = warm_start if warm_start is not None else initial_state(problem, cfg)
    if state.E is None:
        state.E = jacobian_determinant(state.Y, problem.ops) - clamped_exp(state.theta)[0]
    state.rho2 = cfg.rho2
    linear = SPDSolver(cfg.linear_solver, cfg.cg_tol)
    steps = state.steps if cfg.record_steps else None
    t0 = time.perf_counter()
    best_energy = np.inf
    best_constraint = np.inf
    E_prev = state.constraint_inf

    for k in range(state.iteration, cfg.outer_max):
        tctx = make_theta_context(problem, state.Y, state.lam1, state.rho1)
        theta, tinfo = solve_theta_subproblem(state.theta, tctx, cfg, steps)
        yctx = make_y_context(problem, theta, state.lam1, state.lam2, state.rho1, state.rho2)
        Y, yinfo = solve_y_subproblem(state.Y, yctx, cfg, linear, steps)
        state.clamp_hits += int(tinfo.clamped)

        det = jacobian_determinant(Y, problem.ops)
        e_theta = clamped_exp(theta)[0]
        E = det - e_theta
        step = float(np.max(np.abs(Y - state.Y))) / max(1.0, float(np.max(np.abs(state.Y))))
        state.lam1 = state.lam1 + state.rho1 * E
        if problem.has_landmarks:
            lm = problem.landmarks
            state.lam2 = state.lam2 + state.rho2 * (lm.I2 @ Y - lm.Q)
        state.Y, state.theta, state.E = Y, theta, E
        state.iteration = k + 1
        E_inf = state.constraint_inf
        lm_inf = _landmark_inf(problem, Y)

        total, terms = augmented_lagrangian_value(problem, Y, theta, state.lam1, state.lam2,
                                                  state.rho1, state.rho2)
        row = {
            "iter": state.iteration, "E_total": total,
            "E_theta_l2": terms["theta_l2"], "E_distortion": terms["distortion"],
            "E_smooth": terms["smooth"], "E_prior": terms["prior"], "E_ssd": terms["ssd"],
            "constraint_inf": E_inf, "landmark_inf": lm_inf, "min_det": float(det.min()),
            "rho1": state.rho1,
            "seconds": time.perf_counter() - t0 if cfg.record_time else 0.0,
        }
        state.log.append(row)
        logger.info("iter %4d  L=%.6e  |E|=%.3e  lm=%.3e  min det=%.4f  rho1=%g  "
                    "inner=(%d,%d)", state.iteration, total, E_inf, lm_inf, row["min_det"],
                    state.rho1, tinfo.iterations, yinfo.iterations)
        if callback is not None:
            callback(state, row)

        if not (np.isfinite(total) and np.all(np.isfinite(Y)) and np.all(np.isfinite(theta))):
            state.status = "diverged"
            raise DivergenceError("non-finite solver state", state)
        best_energy = min(best_energy, abs(total))
        best_constraint = min(best_constraint, E_inf)
        if abs(total) > cfg.divergence_factor * max(best_energy, 1.0) or \
                E_inf > cfg.divergence_factor * max(best_constraint, 1.0):
            state.status = "diverged"
            raise DivergenceError(
                f"divergence guard at iteration {state.iteration}: energy {total:.3e}, "
                f"|E| {E_inf:.3e}", state)

        if E_inf <= cfg.outer_tol_constraint and lm_inf <= cfg.outer_tol_landmark \
                and step <= cfg.outer_tol_step:
            state.status = "converged"
            return state
        if E_inf > cfg.penalty_growth_trigger * E_prev:
            state.rho1 = min(state.rho1 * cfg.penalty_factor, cfg.rho1_cap)
        E_prev = E_inf

    state.status = "max_iterations"
    return state


def with_overrides(cfg: SolverConfig, **kw) -> SolverConfig:
    return dataclasses.replace(cfg, **kw)

"""High-level drivers: solver modes, inversion/remeshing, warping and example generators."""
from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from qcmap import io
from qcmap.energy import Problem, Weights
from qcmap.grid import (
    DIRICHLET, NEUMANN, DiscreteOperators, Grid, build_grid, build_landmarks,
    build_operators, build_region_prior, boxes_mask,
)
from qcmap.image import ScalarImage, SplineImage, fit_spline, resample_to_cells
from qcmap.measures import (
    beltrami_from_jacobians, cell_points, det_and_cofactor, distortion_from_jacobians,
    element_jacobians, re_ssd,
)
from qcmap.solver import DivergenceError, SolverState, admm_solve, initial_state

logger = logging.getLogger(__name__)

EXAMPLES = ("swap2d", "twist3d", "i2c_2d", "i2c_3d", "pi_region_2d", "box_region_3d",
            "occluded_cube_3d")
PRIOR_VALUES = (0.3, 0.5, 2.0, 3.0)
CONTINUATION_RHO1_CAP = 1e3
CONTINUATION_LEVELS = 2


class AppError(RuntimeError):
    pass


class InversionError(AppError):
    """Inversion failed; ``nodes`` lists the offending node indices."""

    def __init__(self, message, nodes=()):
        super().__init__(message)
        self.nodes = np.asarray(nodes, dtype=int)


# --------------------------------------------------------------------------
# piecewise-linear interpolant of a nodal field


def _perm_lookup(n: int) -> dict:
    return {p: i for i, p in enumerate(itertools.permutations(range(n)))}


def locate(grid: Grid, points: np.ndarray):
    """Containing element and barycentric data for points in the grid box.

    Returns ``(element, corner_nodes, weights)`` where ``corner_nodes`` and
    ``weights`` have shape ``(k, n + 1)``.  Points are clamped to the box.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n, N = grid.n, grid.N
    u = np.clip((pts - grid.lo) / grid.spacing, 0.0, N)
    cell = np.minimum(np.floor(u), N - 1).astype(np.int64)
    t = u - cell
    order = np.argsort(-t, axis=1, kind="stable")
    lookup = _perm_lookup(n)
    perm_idx = np.array([lookup[tuple(o)] for o in order], dtype=np.int64)
    strides = (N + 1) ** np.arange(n)
    cell_lin = cell @ (N ** np.arange(n))
    # path vertices 0, e_s1, e_s1 + e_s2, ... of the Kuhn simplex
    ts = np.take_along_axis(t, order, axis=1)
    weights = np.empty((len(pts), n + 1))
    weights[:, 0] = 1.0 - ts[:, 0]
    weights[:, 1:n] = ts[:, :-1] - ts[:, 1:]
    weights[:, n] = ts[:, -1]
    base = cell @ strides
    steps = np.cumsum(strides[order], axis=1)
    nodes = np.column_stack([base, base[:, None] + steps])
    element = cell_lin * math.factorial(n) + perm_idx
    return element, nodes, weights


def interpolate(Y, grid: Grid, points) -> np.ndarray:
    """Evaluate the piecewise-linear interpolant of nodal ``Y`` at ``points`` -> ``(k, n)``."""
    Yn = np.asarray(Y, float).reshape(grid.n, -1).T
    _, nodes, w = locate(grid, points)
    return np.einsum("kv,kvi->ki", w, Yn[nodes])


def prolongate(Y_coarse, coarse: Grid, fine: Grid) -> np.ndarray:
    """Transfer a nodal field to a grid refined by an integer factor.

    Kuhn triangulations are nested under dyadic refinement, so the result
    reproduces the coarse piecewise-linear map exactly (element determinants
    stay positive).
    """
    return interpolate(Y_coarse, coarse, fine.node_coords).T.ravel()


# --------------------------------------------------------------------------
# inversion and warping


def invert_deformation(Y, grid: Grid, ops: DiscreteOperators | None = None, tol: float = 1e-10,
                       maxit: int = 50, damping: float = 0.5) -> np.ndarray:
    """Nodal field ``Z`` with ``y(Z[k]) = x_k`` for the piecewise-linear map ``y``.

    Newton's method on each node, started at the node itself, with step
    halving (factor ``damping``) until the residual decreases.  Iterates are
    kept inside the grid box.
    """
    Y = np.asarray(Y, dtype=float).ravel()
    F = element_jacobians(Y, grid)
    det = det_and_cofactor(F)[0]
    if np.any(det <= 0):
        bad = np.flatnonzero(det <= 0)
        raise InversionError(f"deformation is not bijective: {bad.size} element(s) with det <= 0",
                             bad)
    Finv = np.linalg.inv(F)
    X = grid.node_coords
    Z = X.copy()
    r = interpolate(Y, grid, Z) - X
    res = np.max(np.abs(r), axis=1)
    active = res > tol
    for _ in range(maxit):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        elem, _, _ = locate(grid, Z[idx])
        dz = -np.einsum("kij,kj->ki", Finv[elem], r[idx])
        step = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(30):
            cand = np.clip(Z[idx] + step[:, None] * dz, grid.lo, grid.hi)
            rc = interpolate(Y, grid, cand) - X[idx]
            rn = np.max(np.abs(rc), axis=1)
            ok = pending & (rn < res[idx])
            sel = idx[ok]
            Z[sel], r[sel], res[sel] = cand[ok], rc[ok], rn[ok]
            pending &= ~ok
            if not pending.any():
                break
            step[pending] *= damping
        active[idx[pending]] = False  # no decrease possible: stalled
        active &= res > tol
    failed = np.flatnonzero(res > tol)
    if failed.size:
        raise InversionError(
            f"Newton inversion did not reach {tol:g} at {failed.size} node(s): "
            f"{failed[:20].tolist()}{' ...' if failed.size > 20 else ''}", failed)
    return Z.T.ravel()


def composite_error(Y, Yinv, grid: Grid) -> float:
    """sup-norm of ``y(y^{-1}(x)) - x`` over the grid nodes."""
    Zp = np.asarray(Yinv, float).reshape(grid.n, -1).T
    return float(np.max(np.abs(interpolate(Y, grid, Zp) - grid.node_coords)))


def warp_image(T: SplineImage, Y, ops: DiscreteOperators) -> np.ndarray:
    """Deformed template ``T(P Y)`` sampled at the deformed cell centres."""
    return T.evaluate(cell_points(np.asarray(Y, float).ravel(), ops))


# --------------------------------------------------------------------------
# modes

MODE_WEIGHTS = {
    "landmark": ("alpha2", "alpha3"),
    "register": ("alpha2", "alpha3", "alpha5"),
    "volprior": ("alpha1", "alpha2", "alpha3", "alpha4"),
    "general": ("alpha1", "alpha2", "alpha3", "alpha4", "alpha5"),
}


def mode_weights(cfg: io.RunConfig) -> Weights:
    """Active weights for a solver mode; inactive terms are forced to zero."""
    if cfg.mode not in MODE_WEIGHTS:
        raise AppError(f"mode '{cfg.mode}' does not run the solver")
    active = MODE_WEIGHTS[cfg.mode]
    kw = {f"alpha{i}": (getattr(cfg, f"alpha{i}") if f"alpha{i}" in active else 0.0)
          for i in range(1, 6)}
    ignored = [k for k in kw if k not in active and getattr(cfg, k) > 0]
    if ignored:
        logger.warning("mode %s ignores %s", cfg.mode, ", ".join(ignored))
    return Weights(**kw, rho1=cfg.solver.rho1_init, rho2=cfg.solver.rho2)


def _grid_for(cfg: io.RunConfig, N: int | None = None):
    grid = build_grid(cfg.n, N or cfg.N, cfg.domain)
    return grid, build_operators(grid, cfg.boundary)


def _load_prior(cfg: io.RunConfig, grid: Grid):
    if cfg.region_boxes is not None:
        mask = boxes_mask(cfg.region_boxes)
    else:
        vals, meta = io.read_field(cfg.resolve(cfg.region_mask), grid)
        if meta["kind"] != "element":
            raise AppError("region mask must be an element field")
        mask = vals > 0.5
    theta_bar = cfg.theta_bar
    if isinstance(theta_bar, str):
        theta_bar, meta = io.read_field(cfg.resolve(theta_bar), grid)
        if meta["kind"] != "element":
            raise AppError("theta_bar file must be an element field")
    return build_region_prior(grid, mask, theta_bar)


def _load_images(cfg: io.RunConfig, grid: Grid):
    lo, hi = grid.lo, grid.hi
    T = io.read_image(cfg.resolve(cfg.template), lo, hi)
    R = io.read_image(cfg.resolve(cfg.reference), lo, hi)
    if T.n != grid.n or R.n != grid.n:
        raise AppError(f"images must be {grid.n}D")
    return fit_spline(T), resample_to_cells(R, grid)


def build_problem(cfg: io.RunConfig, N: int | None = None) -> Problem:
    grid, ops = _grid_for(cfg, N)
    weights = mode_weights(cfg)
    landmarks = prior = template = reference = None
    if cfg.landmarks is not None and cfg.mode != "volprior":
        pairs = io.read_landmarks(cfg.resolve(cfg.landmarks), cfg.n)
        landmarks = build_landmarks(grid, pairs) if len(pairs) else None
    if weights.alpha4 > 0:
        if cfg.theta_bar is None:
            raise AppError(f"mode '{cfg.mode}' with alpha4 > 0 needs theta_bar and a region")
        prior = _load_prior(cfg, grid)
    if weights.alpha5 > 0:
        template, reference = _load_images(cfg, grid)
    return Problem(ops, weights, landmarks=landmarks, prior=prior, template=template,
                   reference=reference, hessian_distortion=cfg.solver.hessian_distortion)


def _continuation_start(cfg: io.RunConfig, problem: Problem,
                        levels: int = CONTINUATION_LEVELS) -> SolverState | None:
    """Warm start from solves on up to ``levels`` successively halved grids."""
    N = problem.grid.N
    if not cfg.continuation or levels < 1 or N % 2 or N < 8:
        return None
    coarse_cfg = dataclasses.replace(cfg, N=N // 2)
    coarse = build_problem(coarse_cfg)
    start = _continuation_start(coarse_cfg, coarse, levels - 1)
    logger.info("continuation: solving on N=%d first", N // 2)
    cstate = admm_solve(coarse, cfg.solver, warm_start=start)
    state = initial_state(problem, cfg.solver)
    state.Y = prolongate(cstate.Y, coarse.grid, problem.grid)
    det = det_and_cofactor(element_jacobians(state.Y, problem.grid))[0]
    state.theta = np.log(np.maximum(det, 1e-12))
    # each fine element lies inside one coarse element
    centroids = problem.grid.element_centroids()
    parent, _, _ = locate(coarse.grid, centroids)
    state.lam1 = cstate.lam1[parent]
    # keep some of the coarse penalty (a restart at rho1_init folds the first
    # fine Y-step) but cap it, since a huge rho1 makes the fine solves slow
    state.rho1 = min(cstate.rho1, max(CONTINUATION_RHO1_CAP, cfg.solver.rho1_init))
    state.E = None
    return state


@dataclass
class RunResult:
    state: SolverState | None
    summary: dict
    out_dir: Path
    problem: Problem | None = None


def diagnostics(Y, grid: Grid, theta=None) -> dict:
    F = element_jacobians(Y, grid)
    det = det_and_cofactor(F)[0]
    out = {"det": det, "K": distortion_from_jacobians(F)}
    if grid.n == 2:
        out["mu"] = beltrami_from_jacobians(F)
    if theta is not None:
        out["exp_theta"] = np.exp(np.clip(theta, -60, 60))
    return out


def _write_diagnostics(out: Path, diag: dict) -> None:
    names = list(diag)
    lines = ["element," + ",".join(names)]
    cols = [np.asarray(diag[k]) for k in names]
    for e in range(cols[0].size):
        lines.append(f"{e}," + ",".join(repr(float(c[e])) for c in cols))
    (out / "diagnostics.csv").write_text("\n".join(lines) + "\n")


def _summarise(diag: dict) -> dict:
    det, K = diag["det"], diag["K"]
    s = {"min_det": float(det.min()), "max_det": float(det.max()),
         "median_det": float(np.median(det)), "folded_elements": int(np.sum(det <= 0)),
         "max_K": float(K.max()), "mean_K": float(K[np.isfinite(K)].mean()) if np.isfinite(K).any()
         else float("inf")}
    if "mu" in diag:
        s["max_mu"] = float(diag["mu"].max())
    return s


PATH_FIELDS = ("template", "reference", "landmarks", "region_mask", "deformation")


def _portable(cfg: io.RunConfig) -> io.RunConfig:
    """Copy of ``cfg`` with absolute input paths, so it can be re-run from anywhere."""
    paths = {k: str(cfg.resolve(getattr(cfg, k)).resolve()) for k in PATH_FIELDS
             if getattr(cfg, k) is not None}
    if isinstance(cfg.theta_bar, str):
        paths["theta_bar"] = str(cfg.resolve(cfg.theta_bar).resolve())
    return dataclasses.replace(cfg, output=None, **paths)


def run_mode(cfg: io.RunConfig, out_dir=None) -> RunResult:
    """Run one configured mode and write its artifact set to ``out_dir``."""
    out = io.ensure_dir(out_dir or cfg.resolve(cfg.output) or Path("qcmap_out"))
    if cfg.mode in ("diagnose", "remesh", "warp"):
        return _run_utility(cfg, out)

    problem = build_problem(cfg)
    grid = problem.grid
    warm = _continuation_start(cfg, problem)
    t0 = time.perf_counter()
    status, message = "converged", ""
    try:
        state = admm_solve(problem, cfg.solver, warm_start=warm)
        status = state.status
    except DivergenceError as exc:
        state, status, message = exc.state, "diverged", str(exc)
        logger.error("%s", exc)
    elapsed = time.perf_counter() - t0

    io.write_config(out / "config.json", _portable(cfg))
    summary = {"mode": cfg.mode, "n": cfg.n, "N": cfg.N, "status": status,
               "message": message, "iterations": 0, "seconds": elapsed}
    if state is not None:
        io.write_field(out / "Y.bin", state.Y, grid, "nodal")
        io.write_field(out / "theta.bin", state.theta, grid, "element")
        io.write_energy_log(out / "energy_log.csv", state.log)
        diag = diagnostics(state.Y, grid, state.theta)
        _write_diagnostics(out, diag)
        io.export_vtk(out / "deformation.vtk", grid, state.Y, cell_data=diag)
        summary.update(_summarise(diag))
        last = state.log[-1] if state.log else {}
        summary.update({"iterations": state.iteration,
                        "constraint_inf": state.constraint_inf,
                        "landmark_inf": last.get("landmark_inf", 0.0),
                        "energy": last.get("E_total"), "rho1": state.rho1,
                        "exp_clamp_hits": state.clamp_hits})
        if problem.prior is not None:
            sel = problem.prior.element_mask
            summary["prior_median_det"] = float(np.median(diag["det"][sel]))
            summary["prior_target"] = float(np.median(np.exp(problem.prior.theta_bar)))
            summary["min_det_outside_prior"] = float(diag["det"][~sel].min()) if (~sel).any() \
                else None
        if problem.template is not None:
            summary["re_ssd_percent"] = re_ssd(problem.template, problem.reference, state.Y,
                                               problem.ops)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(state, summary, out, problem)


def _run_utility(cfg: io.RunConfig, out: Path) -> RunResult:
    grid, ops = _grid_for(cfg)
    Y, meta = io.read_field(cfg.resolve(cfg.deformation), grid)
    if meta["kind"] != "nodal":
        raise AppError("deformation must be a nodal field")
    io.write_config(out / "config.json", _portable(cfg))
    summary = {"mode": cfg.mode, "n": cfg.n, "N": cfg.N, "status": "converged"}
    if cfg.mode == "diagnose":
        diag = diagnostics(Y, grid)
        _write_diagnostics(out, diag)
        io.export_vtk(out / "deformation.vtk", grid, Y, cell_data=diag)
        summary.update(_summarise(diag))
    elif cfg.mode == "remesh":
        Z = invert_deformation(Y, grid, ops)
        io.write_field(out / "Y_inverse.bin", Z, grid, "nodal")
        diag = diagnostics(Z, grid)
        io.export_vtk(out / "remeshed.vtk", grid, Z, cell_data=diag)
        summary.update({"composite_error": composite_error(Y, Z, grid),
                        "min_volume_remeshed": float(diag["det"].min() * grid.h)})
    else:  # warp
        T = fit_spline(io.read_image(cfg.resolve(cfg.template), grid.lo, grid.hi))
        warped = warp_image(T, Y, ops)
        img = ScalarImage.from_cell_field(warped, grid)
        io.write_image(out / ("warped.pgm" if grid.n == 2 else "warped.raw"), img)
        summary["warped_range"] = [float(warped.min()), float(warped.max())]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(None, summary, out)


# --------------------------------------------------------------------------
# synthetic examples


@dataclass
class ExampleSpec:
    name: str
    N: int
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in EXAMPLES:
            raise AppError(f"unknown example {self.name!r}; expected one of {EXAMPLES}")
        if int(self.N) != self.N or self.N < 2:
            raise AppError("N must be an integer >= 2")


def _cell_centres(n: int, N: int) -> np.ndarray:
    return build_grid(n, N).cell_centers()


def _smooth_indicator(inside: np.ndarray, N: int, n: int, sigma: float = 1.0) -> np.ndarray:
    vol = inside.reshape((N,) * n, order="F").astype(float)
    return np.clip(ndimage.gaussian_filter(vol, sigma, mode="nearest"), 0.0, 1.0)


def _swap2d(N, p):
    d = p.get("separation", 0.125)
    centres = p.get("centres", [(0.3125, 0.3125), (0.6875, 0.3125), (0.3125, 0.6875),
                                (0.6875, 0.6875)])
    pairs = []
    for cx, cy in centres:
        a, b = [cx - d / 2, cy], [cx + d / 2, cy]
        pairs += [(a, b), (b, a)]
    config = {"mode": "landmark", "n": 2, "N": N, "alpha2": 1.0, "alpha3": 0.01,
              "boundary": DIRICHLET, "landmarks": "landmarks.csv"}
    readme = (f"Four landmark pairs, each pair {d} apart horizontally, centred at "
              f"{centres}; the two points of every pair exchange positions.")
    return {"landmarks": pairs}, config, readme


def _twist3d(N, p):
    radius, angle = p.get("radius", 0.25), p.get("angle_deg", 45.0)
    levels = p.get("levels", [(0.3, -1.0), (0.7, 1.0)])
    pairs = []
    for z, sgn in levels:
        for k in range(4):
            a = 0.5 * math.pi * k
            b = a + sgn * math.radians(angle)
            pairs.append(([0.5 + radius * math.cos(a), 0.5 + radius * math.sin(a), z],
                          [0.5 + radius * math.cos(b), 0.5 + radius * math.sin(b), z]))
    config = {"mode": "landmark", "n": 3, "N": N, "alpha2": 1.0, "alpha3": 0.01,
              "boundary": DIRICHLET, "landmarks": "landmarks.csv", "rho1_init": 10.0,
              "linear_solver": "cg", "outer_tol_constraint": 1e-6, "outer_tol_step": 1e-6}
    readme = (f"Two groups of four landmarks on a circle of radius {radius} about the "
              f"vertical axis through the box centre, at heights {[z for z, _ in levels]}; "
              f"the groups are rotated by -{angle} and +{angle} degrees.")
    return {"landmarks": pairs}, config, readme


def _c_curve(s, centre, radius, start, stop):
    ang = np.radians(start + (stop - start) * np.asarray(s, float))
    return np.column_stack([centre[0] + radius * np.cos(ang), centre[1] + radius * np.sin(ang)])


def _i2c_2d_geometry(p):
    half = p.get("half_width", 0.07)
    bar = (np.array([0.5, 0.22]), np.array([0.5, 0.78]))
    arc = dict(centre=tuple(p.get("arc_centre", (0.74, 0.5))), radius=p.get("arc_radius", 0.24),
               start=60.0, stop=300.0)
    return half, bar, arc


def _i2c_masks(pts2, p):
    half, (b0, b1), arc = _i2c_2d_geometry(p)
    # bar: distance to the vertical segment
    y = np.clip(pts2[:, 1], b0[1], b1[1])
    bar = np.hypot(pts2[:, 0] - b0[0], pts2[:, 1] - y) <= half
    rel = pts2 - np.array(arc["centre"])
    ang = np.degrees(np.arctan2(rel[:, 1], rel[:, 0])) % 360.0
    ang_c = np.clip(ang, arc["start"], arc["stop"])
    on_arc = _c_curve((ang_c - arc["start"]) / (arc["stop"] - arc["start"]), arc["centre"],
                      arc["radius"], arc["start"], arc["stop"])
    c_shape = np.hypot(*(pts2 - on_arc).T) <= half
    return bar, c_shape


def _i2c_landmarks(p, count=6):
    _, (b0, b1), arc = _i2c_2d_geometry(p)
    s = np.linspace(0.0, 1.0, count)
    # y maps reference (C) positions onto template (bar) positions
    c_pts = _c_curve(s, arc["centre"], arc["radius"], arc["start"], arc["stop"])
    bar_pts = b1[None, :] + s[:, None] * (b0 - b1)[None, :]
    return c_pts, bar_pts


def _i2c(N, p, n):
    pts = _cell_centres(n, N)
    bar, c_shape = _i2c_masks(pts[:, :2], p)
    if n == 3:
        slab = (pts[:, 2] >= 0.25) & (pts[:, 2] <= 0.75)
        bar, c_shape = bar & slab, c_shape & slab
    T = _smooth_indicator(bar, N, n)
    R = _smooth_indicator(c_shape, N, n)
    c_pts, bar_pts = _i2c_landmarks(p)
    if n == 2:
        pairs = list(zip(c_pts, bar_pts))
    else:
        pairs = [(np.append(c, z), np.append(b, z)) for z in (0.4, 0.6)
                 for c, b in zip(c_pts, bar_pts)]
    ext = "pgm" if n == 2 else "raw"
    config = {"mode": "register", "n": n, "N": N, "alpha2": 1.0, "alpha3": 0.01,
              "alpha5": 1e4, "boundary": DIRICHLET, "landmarks": "landmarks.csv",
              "template": f"template.{ext}", "reference": f"reference.{ext}",
              # the intensity term drives rho1 very high; a stiff landmark penalty keeps
              # the landmarks converging at that scale
              "rho2": 1e7, "outer_tol_step": 1e-6}
    if n == 3:
        config["linear_solver"] = "cg"
    half, (b0, b1), arc = _i2c_2d_geometry(p)
    readme = (f"Template: straight bar (half width {half}) along x2 from {b0[1]} to {b1[1]} "
              f"at x1 = {b0[0]}. Reference: C-shaped arc of radius {arc['radius']} about "
              f"{arc['centre']} spanning {arc['start']:g}..{arc['stop']:g} degrees, so the arc "
              "crosses the bar at its midpoint. Indicators are blurred with a one-cell Gaussian. "
              f"{len(pairs)} landmarks at equal arc-length fractions map C points to bar points"
              + (" on the slices x3 = 0.4 and 0.6; shapes are extruded over x3 in [0.25, 0.75]."
                 if n == 3 else "."))
    return {"landmarks": pairs, "template": T, "reference": R}, config, readme


# boxes as [[lo_1, ..., lo_n], [hi_1, ..., hi_n]]
PI_BOXES = [[[0.25, 0.6], [0.75, 0.7]], [[0.32, 0.3], [0.42, 0.6]], [[0.58, 0.3], [0.68, 0.6]]]
CUBE_BOX = [[[0.375, 0.375, 0.375], [0.625, 0.625, 0.625]]]


def _region(N, p, n):
    boxes = p.get("boxes", PI_BOXES if n == 2 else CUBE_BOX)
    prior = float(p.get("prior", 2.0))
    grid = build_grid(n, N)
    mask = boxes_mask(boxes)(grid.element_centroids())
    if not mask.any():
        raise AppError("region does not contain any element centroid at this N")
    extra = {"mask": mask.astype(float), "theta_bar": np.where(mask, math.log(prior), 0.0),
             "variants": {f"config_prior_{v:g}.json": math.log(v) for v in PRIOR_VALUES}}
    config = {"mode": "volprior", "n": n, "N": N, "alpha1": 1.0, "alpha2": 1.0,
              "alpha3": 0.1, "alpha4": 1e5, "region_mask": "region_mask.bin",
              "theta_bar": math.log(prior)}
    if n == 3:
        config.update(linear_solver="cg", outer_tol_constraint=1e-6, outer_tol_step=1e-6)
    shape = "pi-shaped union of three boxes" if n == 2 else "central cube"
    readme = (f"Volume prior on a {shape} {boxes}; target volume ratio {prior:g} "
              f"(theta_bar = ln {prior:g}). Variant configs cover ratios {list(PRIOR_VALUES)}.")
    return extra, config, readme


def _occluded_cube(N, p):
    pts = _cell_centres(3, N)
    lo_t, hi_t = 0.3, 0.7
    lo_r, hi_r = 0.25, 0.75
    T_in = np.all((pts >= lo_t) & (pts <= hi_t), axis=1)
    hole = [[0.5, 0.5, 0.25], [0.75, 0.75, 0.5]]
    in_hole = boxes_mask([hole])(pts)
    R_in = np.all((pts >= lo_r) & (pts <= hi_r), axis=1) & ~in_hole
    corners = np.array(list(itertools.product([0, 1], repeat=3)), dtype=float)
    pairs = [(lo_r + (hi_r - lo_r) * c, lo_t + (hi_t - lo_t) * c) for c in corners]
    grid = build_grid(3, N)
    mask = boxes_mask([hole])(grid.element_centroids())
    extra = {"landmarks": pairs, "template": _smooth_indicator(T_in, N, 3),
             "reference": _smooth_indicator(R_in, N, 3), "mask": mask.astype(float),
             "theta_bar": np.zeros(grid.num_elements)}
    # the reference cube is larger by (0.5 / 0.4)^3; keep that ratio in the occluded block
    ratio = ((hi_t - lo_t) / (hi_r - lo_r)) ** 3
    extra["theta_bar"][mask] = math.log(ratio)
    config = {"mode": "general", "n": 3, "N": N, "alpha1": 1.0, "alpha2": 1.0, "alpha3": 0.01,
              "alpha4": 1e3, "alpha5": 1e4, "boundary": DIRICHLET,
              "landmarks": "landmarks.csv", "template": "template.raw",
              "reference": "reference.raw", "region_mask": "region_mask.bin",
              "theta_bar": "theta_bar.bin", "linear_solver": "cg"}
    readme = (f"Template cube [{lo_t}, {hi_t}]^3; reference cube [{lo_r}, {hi_r}]^3 with the "
              f"block {hole} removed (occlusion). Landmarks: the 8 cube corners. The volume "
              f"prior asks the occluded block to keep the cube's overall volume ratio {ratio:.4f}.")
    return extra, config, readme


def generate_example(spec: ExampleSpec, out_dir) -> Path:
    """Write images, landmarks, masks, a run config and a README sidecar for ``spec``."""
    out = io.ensure_dir(out_dir)
    N, p = int(spec.N), dict(spec.parameters)
    if spec.name == "swap2d":
        data, config, readme = _swap2d(N, p)
    elif spec.name == "twist3d":
        data, config, readme = _twist3d(N, p)
    elif spec.name in ("i2c_2d", "i2c_3d"):
        data, config, readme = _i2c(N, p, 2 if spec.name == "i2c_2d" else 3)
    elif spec.name in ("pi_region_2d", "box_region_3d"):
        data, config, readme = _region(N, p, 2 if spec.name == "pi_region_2d" else 3)
    else:
        data, config, readme = _occluded_cube(N, p)
    n = config["n"]
    grid = build_grid(n, N)
    if "landmarks" in data:
        pairs = np.asarray(data["landmarks"], dtype=float)
        if np.any(pairs < 0) or np.any(pairs > 1):
            raise AppError("generated landmarks leave the unit box")
        io.write_landmarks(out / "landmarks.csv", pairs, comment=f"{spec.name}, N={N}")
    for key in ("template", "reference"):
        if key in data:
            img = ScalarImage.on_cells(data[key], grid.lo, grid.hi)
            io.write_image(out / config[key], img)
    if "mask" in data:
        io.write_field(out / "region_mask.bin", data["mask"], grid, "element")
    if "theta_bar" in data and isinstance(config.get("theta_bar"), str):
        io.write_field(out / "theta_bar.bin", data["theta_bar"], grid, "element")
    cfg = io.parse_config(config)  # validate before writing
    io.write_config(out / "config.json", cfg)
    for fname, theta in data.get("variants", {}).items():
        io.write_config(out / fname, dataclasses.replace(cfg, theta_bar=theta))
    (out / "README.md").write_text(
        f"# {spec.name} (N={N})\n\n{readme}\n\nRun with `qcmap {config['mode']} "
        f"--config config.json --out result`.\n")
    logger.info("wrote example %s to %s", spec.name, out)
    return out

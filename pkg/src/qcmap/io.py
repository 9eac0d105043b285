"""File formats: images, nodal/element fields, landmarks, configs, VTK meshes and energy logs.

All writers are deterministic: floats are written with ``repr`` (shortest
round-trip form) in text files and as little-endian binaries elsewhere, and
JSON is dumped with sorted keys.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from qcmap.grid import DIRICHLET, NEUMANN, Grid
from qcmap.image import ScalarImage
from qcmap.solver import LOG_COLUMNS, SolverConfig, SolverError

logger = logging.getLogger(__name__)

MODES = ("landmark", "register", "volprior", "general", "diagnose", "remesh", "warp")
FIELD_KINDS = ("nodal", "element")


class FormatError(ValueError):
    """Malformed or inconsistent file content."""


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


# --------------------------------------------------------------------------
# images


def _read_pgm(path: Path, lo=None, hi=None) -> ScalarImage:
    data = path.read_bytes()
    tokens, pos = [], 0
    # header: magic, width, height, maxval separated by whitespace; '#' comments allowed
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"{path}: truncated PGM header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # exactly one whitespace byte before the raster
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    raster = data[pos:]
    if len(raster) != count * dtype.itemsize:
        raise FormatError(f"{path}: expected {count * dtype.itemsize} raster bytes, "
                          f"found {len(raster)}")
    pix = np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(float)
    # rows run along x2, columns along x1
    values = pix.T / maxval
    lo = np.zeros(2) if lo is None else np.asarray(lo, float)
    hi = np.ones(2) if hi is None else np.asarray(hi, float)
    img = ScalarImage.on_cells(values, lo, hi)
    return dataclasses.replace(img, value_range=(0.0, float(maxval)))


def _read_raw(path: Path) -> ScalarImage:
    meta = _load_json(_sidecar(path))
    try:
        dims = [int(d) for d in meta["dims"]]
        spacing = [float(s) for s in meta["spacing"]]
        origin = [float(o) for o in meta["origin"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{_sidecar(path)}: needs dims, spacing and origin") from exc
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != math.prod(dims):
        raise FormatError(f"{path}: sidecar dims {dims} need {math.prod(dims)} floats, "
                          f"file holds {raw.size}")
    values = raw.astype(float).reshape(dims, order="F")
    vmin, vmax = float(values.min()), float(values.max())
    span = vmax - vmin
    values = (values - vmin) / span if span > 0 else np.zeros_like(values)
    return ScalarImage(values, spacing, origin, value_range=(vmin, vmax))


def read_image(path, lo=None, hi=None) -> ScalarImage:
    """Load a P5 PGM (2D, 8/16-bit) or a raw float32 volume with JSON sidecar.

    PGM samples are divided by ``maxval`` and placed at the cell centres of a
    uniform partition of ``[lo, hi]`` (default unit square).  Raw volumes are
    stored x1-fastest and min-max normalised to ``[0, 1]``; the original range
    is kept in ``value_range``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        return _read_pgm(path, lo, hi)
    if _sidecar(path).exists():
        return _read_raw(path)
    raise FormatError(f"{path}: neither a P5 PGM nor a raw volume with a .json sidecar")


def write_pgm(path, values: np.ndarray, maxval: int = 255) -> None:
    """Write a 2D array with entries in [0, 1] (axis 0 = x1) as a binary PGM."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 2:
        raise FormatError("PGM images are 2D")
    if not 0 < maxval < 65536:
        raise FormatError("maxval must lie in 1..65535")
    pix = np.rint(np.clip(v, 0.0, 1.0) * maxval).T
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{v.shape[0]} {v.shape[1]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + pix.astype(dtype).tobytes())


def write_raw(path, values: np.ndarray, spacing=None, origin=None) -> None:
    """Write a float32 volume (x1-fastest) plus its JSON sidecar."""
    v = np.asarray(values, dtype=float)
    dims = list(v.shape)
    spacing = [1.0 / d for d in dims] if spacing is None else [float(s) for s in spacing]
    origin = [0.5 * s for s in spacing] if origin is None else [float(o) for o in origin]
    v.astype("<f4").ravel(order="F").tofile(path)
    _dump_json({"dims": dims, "spacing": spacing, "origin": origin}, _sidecar(path))


def write_image(path, image: ScalarImage) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, image.values)
    else:
        write_raw(path, image.values, image.spacing, image.origin)


# --------------------------------------------------------------------------
# nodal / element fields


def _field_length(kind: str, grid: Grid, components: int) -> int:
    base = grid.num_nodes if kind == "nodal" else grid.num_elements
    return base * components


def write_field(path, values, grid: Grid, kind: str, components: int | None = None) -> None:
    """Raw little-endian float64 plus a JSON sidecar describing the layout.

    Nodal vector fields are stacked by component (all x1 values, then x2, ...).
    """
    if kind not in FIELD_KINDS:
        raise FormatError(f"kind must be one of {FIELD_KINDS}")
    v = np.asarray(values, dtype="<f8").ravel()
    if components is None:
        components = grid.n if kind == "nodal" and v.size == grid.num_dofs else 1
    expected = _field_length(kind, grid, components)
    if v.size != expected:
        raise FormatError(f"{kind} field with {components} component(s) needs {expected} "
                          f"values, got {v.size}")
    v.tofile(path)
    _dump_json({"kind": kind, "n": grid.n, "N": grid.N, "components": components,
                "layout": "component-major" if components > 1 else "scalar",
                "count": int(v.size), "dtype": "float64-le"}, _sidecar(path))


def read_field(path, grid: Grid | None = None):
    """Return ``(values, meta)``; checks the sidecar against the file and ``grid``."""
    meta = _load_json(_sidecar(path))
    for key in ("kind", "n", "N", "components", "count"):
        if key not in meta:
            raise FormatError(f"{_sidecar(path)}: missing '{key}'")
    if meta["kind"] not in FIELD_KINDS:
        raise FormatError(f"{_sidecar(path)}: unknown kind {meta['kind']!r}")
    v = np.fromfile(path, dtype="<f8")
    if v.size != meta["count"]:
        raise FormatError(f"{path}: sidecar count {meta['count']} but file holds {v.size}")
    if grid is not None:
        if (grid.n, grid.N) != (meta["n"], meta["N"]):
            raise FormatError(f"{path}: field is for n={meta['n']}, N={meta['N']}")
        if v.size != _field_length(meta["kind"], grid, meta["components"]):
            raise FormatError(f"{path}: length does not match the grid")
    return v.astype(float), meta


# --------------------------------------------------------------------------
# landmarks


def read_landmarks(path, n: int) -> np.ndarray:
    """Landmark pairs from CSV rows ``p_1..p_n,q_1..q_n`` as an ``(m, 2, n)`` array."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                vals = [float(x) for x in line.split(",")]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric entry") from exc
            if len(vals) != 2 * n:
                raise FormatError(f"{path}:{lineno}: expected {2 * n} columns, got {len(vals)}")
            rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, 2, n)


def write_landmarks(path, pairs, comment: str | None = None) -> None:
    pairs = np.asarray(pairs, dtype=float)
    n = pairs.shape[-1]
    lines = []
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines.append("# " + ",".join([f"p_{i + 1}" for i in range(n)] + [f"q_{i + 1}" for i in range(n)]))
    for p, q in pairs.reshape(-1, 2, n):
        lines.append(",".join(repr(float(x)) for x in (*p, *q)))
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# VTK


def export_vtk(path, grid: Grid, Y=None, cell_data: dict | None = None,
               title: str = "qcmap deformation") -> None:
    """ASCII legacy VTK 4.2 unstructured grid of the (deformed) simplicial mesh."""
    Y = grid.X if Y is None else np.asarray(Y, dtype=float).ravel()
    if Y.size != grid.num_dofs:
        raise FormatError(f"nodal field has {Y.size} entries, expected {grid.num_dofs}")
    cell_data = cell_data or {}
    for name, arr in cell_data.items():
        if np.asarray(arr).size != grid.num_elements:
            raise FormatError(f"cell data '{name}' has {np.asarray(arr).size} values, "
                              f"expected {grid.num_elements}")
        if not name or any(c.isspace() for c in name):
            raise FormatError(f"invalid cell data name {name!r}")
    pts = Y.reshape(grid.n, -1).T
    if grid.n == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    fmt = lambda x: format(float(x), ".17g")
    k = grid.n + 1
    cell_type = 5 if grid.n == 2 else 10
    out = ["# vtk DataFile Version 4.2", title.replace("\n", " ")[:255], "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {len(pts)} double"]
    out += [" ".join(fmt(c) for c in p) for p in pts]
    out.append(f"CELLS {grid.num_elements} {grid.num_elements * (k + 1)}")
    out += [f"{k} " + " ".join(str(int(i)) for i in e) for e in grid.elements]
    out.append(f"CELL_TYPES {grid.num_elements}")
    out += [str(cell_type)] * grid.num_elements
    if cell_data:
        out.append(f"CELL_DATA {grid.num_elements}")
        for name, arr in cell_data.items():
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [fmt(x) for x in np.asarray(arr, dtype=float).ravel()]
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def read_vtk_points(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimal reader for files written by :func:`export_vtk`: points, cells, cell types."""
    lines = Path(path).read_text().splitlines()
    i = lines.index(next(l for l in lines if l.startswith("POINTS")))
    npts = int(lines[i].split()[1])
    pts = np.array([[float(x) for x in l.split()] for l in lines[i + 1:i + 1 + npts]])
    j = i + 1 + npts
    ncells = int(lines[j].split()[1])
    cells = np.array([[int(x) for x in l.split()[1:]] for l in lines[j + 1:j + 1 + ncells]])
    k = j + 1 + ncells
    types = np.array([int(l) for l in lines[k + 1:k + 1 + ncells]])
    return pts, cells, types


# --------------------------------------------------------------------------
# energy log


def _fmt_cell(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_energy_log(path, rows: Sequence[dict]) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt_cell(row[c]) for c in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_energy_log(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split(",")) != LOG_COLUMNS:
        raise FormatError(f"{path}: unexpected energy-log header")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {c: float(v) for c, v in zip(LOG_COLUMNS, vals)}
        row["iter"] = int(row["iter"])
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# run configuration

_SOLVER_FIELDS = {f.name for f in dataclasses.fields(SolverConfig)}
_WEIGHT_KEYS = ("alpha1", "alpha2", "alpha3", "alpha4", "alpha5")


@dataclass
class RunConfig:
    """A fully resolved run description.

    Paths are stored as given; relative paths are resolved against
    ``base_dir`` (the directory of the config file).
    """
    mode: str
    n: int
    N: int
    domain: list | None = None
    alpha1: float = 0.0
    alpha2: float = 1.0
    alpha3: float = 0.0
    alpha4: float = 0.0
    alpha5: float = 0.0
    boundary: str = NEUMANN
    template: str | None = None
    reference: str | None = None
    landmarks: str | None = None
    region_boxes: list | None = None
    region_mask: str | None = None
    theta_bar: float | str | None = None
    deformation: str | None = None
    output: str | None = None
    continuation: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)
    base_dir: str = "."

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name in ("solver", "base_dir"):
                continue
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v
        default = SolverConfig()
        for f in dataclasses.fields(SolverConfig):
            v = getattr(self.solver, f.name)
            if v != getattr(default, f.name):
                out[f.name] = v
        return out


_REQUIRED = {
    "landmark": ("landmarks",),
    "register": ("template", "reference"),
    "volprior": ("theta_bar",),
    "general": ("template", "reference"),
    "diagnose": ("deformation",),
    "remesh": ("deformation",),
    "warp": ("deformation", "template"),
}


class ConfigError(ValueError):
    pass


def parse_config(obj: dict, base_dir=".") -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("configuration must be a JSON object")
    run_keys = {f.name for f in dataclasses.fields(RunConfig)} - {"solver", "base_dir"}
    unknown = sorted(set(obj) - run_keys - _SOLVER_FIELDS)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    for key in ("mode", "n", "N"):
        if key not in obj:
            raise ConfigError(f"missing required key '{key}'")
    mode = obj["mode"]
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    for key in _REQUIRED[mode]:
        if obj.get(key) is None:
            raise ConfigError(f"mode '{mode}' requires '{key}'")
    if mode == "volprior" and obj.get("region_boxes") is None and obj.get("region_mask") is None:
        raise ConfigError("mode 'volprior' requires 'region_boxes' or 'region_mask'")
    for key in _WEIGHT_KEYS:
        if key in obj:
            v = obj[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"'{key}' must be a finite number")
            if v < 0:
                raise ConfigError(f"'{key}' must be non-negative")
    n, N = obj["n"], obj["N"]
    if not isinstance(n, int) or n not in (2, 3):
        raise ConfigError("'n' must be 2 or 3")
    if not isinstance(N, int) or N < 1:
        raise ConfigError("'N' must be a positive integer")
    if obj.get("boundary", NEUMANN) not in (NEUMANN, DIRICHLET):
        raise ConfigError(f"'boundary' must be '{NEUMANN}' or '{DIRICHLET}'")
    solver_kw = {k: v for k, v in obj.items() if k in _SOLVER_FIELDS}
    try:
        solver = SolverConfig(**solver_kw)
    except (TypeError, ValueError, SolverError) as exc:
        raise ConfigError(f"invalid solver setting: {exc}") from exc
    run_kw = {k: v for k, v in obj.items() if k in run_keys}
    for key in _WEIGHT_KEYS:
        if key in run_kw:
            run_kw[key] = float(run_kw[key])
    return RunConfig(**run_kw, solver=solver, base_dir=str(base_dir))


def read_config(path) -> RunConfig:
    """Load and validate a JSON run configuration; unknown keys are rejected."""
    path = Path(path)
    return parse_config(_load_json(path), base_dir=path.parent)


def write_config(path, config: RunConfig) -> None:
    _dump_json(config.to_dict(), path)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p

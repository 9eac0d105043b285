"""Compare the compiled kernels against the NumPy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--N2 64] [--N3 24]

Both backends are imported directly, so no rebuild or environment switch is
needed.  Each kernel is timed on inputs the size of a typical 2D and 3D run,
and the outputs are checked for agreement before timing.
"""
import argparse
import logging
import timeit

import numpy as np

from qcmap import _pykernels
from qcmap.grid import build_grid

try:
    from qcmap import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

logger = logging.getLogger("bench")


def _cases(N2, N3, rng):
    cases = []
    for n, N in ((2, N2), (3, N3)):
        g = build_grid(n, N)
        Y = g.X + 0.01 * rng.normal(size=g.num_dofs)
        Yc = np.ascontiguousarray(Y.reshape(n, -1)[:, g.cell_nodes].transpose(1, 0, 2))
        cases.append((f"element_jacobians {n}D N={N}", "element_jacobians",
                      (Yc, np.ascontiguousarray(g.cell_grad()))))
        # one spline sample per cell, as in the intensity term
        coef = rng.normal(size=(N + 6,) * n)
        t = rng.uniform(0, N + 3, size=(g.num_cells, n))
        cases.append((f"bspline_eval {n}D, {g.num_cells} pts", "bspline_eval", (coef, t)))
        m = (n + 1) * n
        vecs = rng.normal(size=(g.num_elements, m))
        scatter = rng.integers(0, 20 * g.num_nodes, size=(g.num_elements, m, m))
        cases.append((f"accumulate_outer {n}D, {g.num_elements} elems", "accumulate_outer",
                      (vecs, rng.uniform(size=g.num_elements), scatter.astype(np.int64),
                       20 * g.num_nodes)))
    return cases


def _call(mod, name, args):
    if name == "accumulate_outer":
        vecs, w, scatter, size = args
        return mod.accumulate_outer(vecs, w, scatter, np.zeros(size))
    return getattr(mod, name)(*args)


def _agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--N2", type=int, default=64)
    ap.add_argument("--N3", type=int, default=24)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if _ckernels is None:
        logger.error("compiled kernels not built; run `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':42s} {'numpy [ms]':>11s} {'cython [ms]':>12s} {'speedup':>8s} "
          f"{'max diff':>9s}")
    for label, name, data in _cases(args.N2, args.N3, rng):
        diff = _agree(_call(_pykernels, name, data), _call(_ckernels, name, data))
        times = {}
        for tag, mod in (("py", _pykernels), ("c", _ckernels)):
            t = timeit.repeat(lambda: _call(mod, name, data), number=1, repeat=args.repeat)
            times[tag] = 1e3 * min(t)
        print(f"{label:42s} {times['py']:11.2f} {times['c']:12.2f} "
              f"{times['py'] / times['c']:7.1f}x {diff:9.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

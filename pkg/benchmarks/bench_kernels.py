"""Compare the compiled kernels with the pure NumPy fallback.

Workloads match what one cube study sees on its finest level: point location
for the level transfers, Halton points for the reference, activation-time
scans over probe series and element stiffness assembly.

    python3 benchmarks/bench_kernels.py [--level 3] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from monodomain_uq import _kernels_py
from monodomain_uq.mesh import BoxDomain, build_nested_hierarchy
from monodomain_uq.quadrature import first_primes

try:
    from monodomain_uq import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def workloads(level):
    box = BoxDomain((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    fine = build_nested_hierarchy(box, level + 1, 0.5, 0.16, 0.32)[level]
    rng = np.random.default_rng(0)
    lo, hi = fine._boxes
    origin = np.ascontiguousarray(fine.vertices[fine.tets[:, 0]])
    points = rng.uniform(-0.5, 0.5, (2000, 3))
    bases = first_primes(64)
    series = np.ascontiguousarray(np.cumsum(rng.uniform(0, 2, (fine.n, 64)), axis=1))
    X = rng.standard_normal((fine.n_elements, 3, 3))
    tensors = np.einsum("eij,ekj->eik", X, X) + np.eye(3)
    vol = np.ascontiguousarray(fine.volumes)
    return fine, {
        "locate_points (2000 points)": lambda m: m.locate_points(points, fine.inverse_maps, origin, lo, hi, 1e-10),
        "radical_inverse_block (1024 x 64)": lambda m: m.radical_inverse_block(1, 1024, bases),
        f"first_crossing ({fine.n} x 64)": lambda m: m.first_crossing(series, 28.0),
        f"element_stiffness ({fine.n_elements} tets)": lambda m: m.element_stiffness(fine.gradients, vol, tensors),
    }


def best_of(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--level", type=int, default=3, help="cube level (h = 0.5 / 2^level)")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    fine, jobs = workloads(args.level)
    print(f"cube level {args.level}: {fine.n} vertices, {fine.n_elements} tetrahedra")
    print(f"{'kernel':<40}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}")
    for name, job in jobs.items():
        t_py = best_of(lambda: job(_kernels_py), args.repeat)
        if compiled is None:
            print(f"{name:<40}{1e3 * t_py:>14.3f}{'n/a':>14}{'':>10}")
            continue
        t_cy = best_of(lambda: job(compiled), args.repeat)
        print(f"{name:<40}{1e3 * t_py:>14.3f}{1e3 * t_cy:>14.3f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()

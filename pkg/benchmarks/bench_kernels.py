"""Time the numba and numpy paths of each hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Numba compilation happens in a warm-up call outside the timed region.
"""

import argparse
import timeit

import numpy as np

from wbgnn import _kernels as kn


def cases(rng):
    p = 80
    ray = (
        rng.normal(size=p) + 1j * rng.normal(size=p),
        rng.uniform(0, 1e-6, p),
        np.linspace(-2e8, 2e8, 16),
        np.exp(1j * rng.uniform(-np.pi, np.pi, (p, 2))),
        np.exp(1j * rng.uniform(-np.pi, np.pi, (p, 16))),
    )
    h = rng.normal(size=(8, 24, 16)) + 1j * rng.normal(size=(8, 24, 16))
    g = rng.normal(size=(64, 8, 4, 4)) + 1j * rng.normal(size=(64, 8, 4, 4))
    w = rng.uniform(0.5, 2, size=(64, 8, 4))
    return {
        "ray_sum": ray,
        "corr_feature": (h,),
        "stream_rates": (g, w, 0.3),
        "power_grid": (1.3, 0.4, 0.2, 2.0, 201),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not kn.HAVE_NUMBA:
        print("numba is not installed; only the numpy path exists")
    print(f"{'kernel':<14}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, inputs in cases(np.random.default_rng(0)).items():
        f_np, f_nb = getattr(kn, f"{name}_np"), getattr(kn, f"{name}_nb")
        f_nb(*inputs)
        t_np = min(timeit.repeat(lambda: f_np(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<14}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>10.2f}")


if __name__ == "__main__":
    main()

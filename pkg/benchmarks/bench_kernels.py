"""Time the numba and numpy kernel paths side by side.

    python benchmarks/bench_kernels.py [--repeat 20]

Numba compile time is excluded (one warm-up call per kernel). Both paths
run single-threaded so the comparison is about the kernels themselves.
"""

import argparse
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from fecembed import kernels
from fecembed._accel import HAVE_NUMBA


def cases(rng):
    n, d = 20000, 16
    ea, eb, ec = (rng.standard_normal((n, d)) for _ in range(3))
    margins = np.full(n, 0.2)
    pts = rng.standard_normal((300, 8))
    dist = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    x = rng.standard_normal((270, 768))
    gamma, beta = np.ones(768), np.zeros(768)
    xhat, inv_std, _, _, z, _ = kernels.bn_relu6_forward_numpy(x, gamma, beta, 1e-5)
    up = rng.standard_normal(x.shape)
    p, g = rng.standard_normal(500_000), rng.standard_normal(500_000)
    m, v = np.zeros_like(p), np.zeros_like(p)
    return {
        "triplet_loss_batch (20k x 16)": ("triplet_loss_batch", (ea, eb, ec, margins)),
        "triplet_correct l2 (20k x 16)": ("triplet_correct", (ea, eb, ec, kernels.L2)),
        "complete_linkage (n=300, k=10)": ("complete_linkage", (dist, 10)),
        "bn_relu6_forward (270 x 768)": ("bn_relu6_forward", (x, gamma, beta, 1e-5)),
        "bn_relu6_backward (270 x 768)": ("bn_relu6_backward", (xhat, inv_std, gamma, z, up)),
        "adam_update (500k params)": ("adam_update", (p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    with threadpool_limits(1):
        for label, (name, call_args) in cases(rng).items():
            fast = getattr(kernels, name + "_numba")
            slow = getattr(kernels, name + "_numpy")
            fast(*call_args)
            t_np = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat))
            t_nb = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
            print(f"{label:34s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()

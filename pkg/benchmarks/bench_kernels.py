"""Time the numba kernels against their numpy fallbacks.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is called once
to trigger compilation, then timed over several repeats; the table shows the
best time per call and the max-abs difference between both paths.
"""
import argparse
import timeit

import numpy as np

from admpc import _kernels as K
from admpc.benchmarks import SmdChainSpec, smd_instance


def _cases(rng):
    chain = smd_instance(SmdChainSpec(M=5), seed=7).prediction_model()
    A, B, Q, R = chain.A, chain.B, chain.Q, chain.R
    X = rng.standard_normal((10_000, A.shape[0]))
    P = Q + 0.1 * (X[:50].T @ X[:50])
    U = rng.standard_normal((200, B.shape[1]))
    return [
        ("riccati_iterate", (A, B, Q, R), lambda r: r[0]),
        ("rollout", (A, B, X[0], U), lambda r: r),
        ("quad_rows", (X, P), lambda r: r),
        ("max_affine_violation", (chain.G, chain.g, X), lambda r: np.asarray(r)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled (ADMPC_DISABLE_NUMBA); nothing to compare")
        return 0
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22} {'numpy us':>10} {'numba us':>10} {'speedup':>8} {'max diff':>10}")
    for name, inputs, pick in _cases(rng):
        fast = getattr(K, name)
        slow = getattr(K, name + "_np")
        K.USE_NUMBA = True
        ref = pick(fast(*inputs))  # compile outside the timed region
        t_nb = min(timeit.repeat(lambda: fast(*inputs), repeat=args.repeat, number=args.number)) / args.number
        t_np = min(timeit.repeat(lambda: slow(*inputs), repeat=args.repeat, number=args.number)) / args.number
        diff = float(np.max(np.abs(ref - pick(slow(*inputs)))))
        print(f"{name:<22} {1e6 * t_np:>10.1f} {1e6 * t_nb:>10.1f} {t_np / t_nb:>8.2f} {diff:>10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Time the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--n 5000] [--k 12] [--repeat 3]

Each kernel runs once untimed (numba compile / cache load), then the best
of ``--repeat`` runs is reported together with the max abs difference
between the two backends.
"""
import argparse
import time

import numpy as np

from claimcomb import kernels, metrics, solvers


def best_time(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(n, k, rng):
    X = rng.gamma(0.5, 200.0, size=(n, k))
    y = rng.gamma(0.3, 500.0, size=n) * (rng.random(n) < 0.1)
    ranks = metrics.rank_with_tiebreak(X[:, 0]).astype(np.float64)

    A = np.column_stack([np.ones(n), X])
    q, R = np.linalg.qr(A)
    c = q.T @ y
    masks = np.arange(2 ** k, dtype=np.int64)
    tol = solvers.RANK_TOL * float(np.linalg.norm(A))

    order = np.argsort(X, axis=0, kind="stable")
    node = np.zeros(n, dtype=np.int64)
    min_gain = np.full(1, 1e-12)

    tree = solvers.boost_fit(X[:2000], y[:2000], n_trees=1, depth=6).trees[0]
    return {
        "centered_weighted_sum": lambda kn: kn.centered_weighted_sum(y, ranks),
        "subset_lstsq (2^k fits)": lambda kn: kn.subset_lstsq(R, c, masks, tol)[0],
        "level_splits (root)": lambda kn: kn.level_splits(X, order, y, node, 1, 1, min_gain)[2],
        "tree_apply (depth 6)": lambda kn: kn.tree_apply(X, tree.feature, tree.threshold,
                                                         tree.value, tree.depth),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if kernels.NUMBA_KERNELS is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(args.seed)
    print(f"n={args.n} k={args.k} repeat={args.repeat}")
    print(f"{'kernel':26s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in cases(args.n, args.k, rng).items():
        t_np, out_np = best_time(lambda: fn(kernels.NUMPY_KERNELS), args.repeat)
        t_nb, out_nb = best_time(lambda: fn(kernels.NUMBA_KERNELS), args.repeat)
        diff = float(np.max(np.abs(np.asarray(out_np) - np.asarray(out_nb))))
        print(f"{name:26s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f} {diff:11.3g}")


if __name__ == "__main__":
    main()

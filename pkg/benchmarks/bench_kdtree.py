"""Time the compiled and pure-Python KD-tree search against a numpy brute-force scan.

    python3 benchmarks/bench_kdtree.py [--n 10000] [--dims 8 32 128] [--queries 200]

Both tree backends must return the same ids, distances and node-visit counts;
the script checks that before printing timings.
"""
import argparse
import time

import numpy as np

from crossloc.retrieval import BACKENDS, KDTree


def clustered(rng, n, dim, n_clusters=50):
    centers = rng.normal(size=(n_clusters, dim)) * 10
    return centers, centers[rng.integers(0, n_clusters, n)] + rng.normal(size=(n, dim)) * 0.3


def brute(X, q, k):
    d2 = ((X - q) ** 2).sum(1)
    idx = np.lexsort((np.arange(len(X)), d2))[:k]
    return idx


def per_query_ms(fn, queries):
    t0 = time.perf_counter()
    for q in queries:
        fn(q)
    return 1e3 * (time.perf_counter() - t0) / len(queries)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--dims", type=int, nargs="+", default=[8, 32, 128])
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--k", type=int, default=25)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"backends available: {', '.join(BACKENDS)}")
    print(f"{'dim':>4} {'data':>9} {'build s':>8} {'brute ms':>9} "
          + " ".join(f"{b + ' ms':>10}" for b in BACKENDS) + f" {'visited %':>9}")
    for dim in args.dims:
        for kind in ("uniform", "clustered"):
            if kind == "uniform":
                X = rng.normal(size=(args.n, dim))
                Q = rng.normal(size=(args.queries, dim))
            else:
                centers, X = clustered(rng, args.n, dim)
                Q = centers[rng.integers(0, len(centers), args.queries)] + \
                    rng.normal(size=(args.queries, dim)) * 0.3
            t0 = time.perf_counter()
            tree = KDTree(X)
            build = time.perf_counter() - t0
            ref = [tree.query(q, args.k, BACKENDS[0]) for q in Q[:20]]
            for b in BACKENDS[1:]:
                for q, r in zip(Q[:20], ref):
                    got = tree.query(q, args.k, b)
                    assert np.array_equal(got[0], r[0]) and got[2] == r[2], "backends disagree"
            for q, r in zip(Q[:20], ref):
                assert np.array_equal(r[0], brute(X, q, args.k)), "tree disagrees with scan"
            times = [per_query_ms(lambda q: tree.query(q, args.k, b), Q) for b in BACKENDS]
            t_brute = per_query_ms(lambda q: brute(X, q, args.k), Q)
            visited = np.median([tree.query(q, args.k)[2] for q in Q]) / tree.n_nodes
            print(f"{dim:>4} {kind:>9} {build:8.3f} {t_brute:9.3f} "
                  + " ".join(f"{t:10.3f}" for t in times) + f" {100 * visited:9.1f}")


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_backends.py [--pop 500] [--cases 500] [--reps 5]

Both backends see identical inputs; the script also checks that their
outputs agree before reporting times.
"""

import argparse
import statistics
import time

import numpy as np

from btsgp import _backend
from btsgp.exprtree import encode_population
from btsgp.genetics import VariationConfig, init_population, make_rng
from btsgp.selection import ErrorMatrix, order_cases_by_difficulty


def _median_time(fn, reps):
    fn()  # warm-up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _workloads(pop, cases, features, seed):
    rng = make_rng(seed)
    trees = init_population(pop, VariationConfig(), rng, features)
    enc = encode_population(trees)
    X = rng.normal(size=(cases, features))
    em = ErrorMatrix(rng.random((pop, cases)))
    order = order_cases_by_difficulty(em)
    cand = rng.integers(0, pop, size=(pop, 16))

    def run(kernels, fresh_rng):
        return {
            "eval": lambda: kernels.eval_programs(*enc, X),
            "row_means": lambda: kernels.row_means(em.errors),
            "tournament": lambda: kernels.tournament(em.row_mae, cand),
            "batch_tournament": lambda: kernels.batch_tournament(em.by_case, order, 8, cand),
            "lexicase": lambda: kernels.lexicase(em.by_case, pop, fresh_rng(), None),
        }
    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pop", type=int, default=500)
    ap.add_argument("--cases", type=int, default=500)
    ap.add_argument("--features", type=int, default=5)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    run = _workloads(args.pop, args.cases, args.features, args.seed)
    backends = sorted(_backend.AVAILABLE)
    outputs, times = {}, {}
    for name in backends:
        kernels = _backend.AVAILABLE[name]
        jobs = run(kernels, lambda: make_rng(args.seed))
        outputs[name] = {k: f() for k, f in jobs.items()}
        times[name] = {k: _median_time(f, args.reps) for k, f in jobs.items()}

    for kernel in outputs[backends[0]]:
        ref = outputs[backends[0]][kernel]
        assert all(np.array_equal(outputs[b][kernel], ref) for b in backends), f"{kernel}: backends disagree"

    print(f"pop={args.pop} cases={args.cases} reps={args.reps}; outputs identical across {backends}")
    header = f"{'kernel':<18}" + "".join(f"{b + ' ms':>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'ratio':>9}"
    print(header)
    for kernel in times[backends[0]]:
        line = f"{kernel:<18}" + "".join(f"{times[b][kernel] * 1e3:>12.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{times['python'][kernel] / times['cython'][kernel]:>8.1f}x"
        print(line)


if __name__ == "__main__":
    main()

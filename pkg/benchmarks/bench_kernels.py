"""Timing comparison: compiled kernels vs the NumPy reference backend.

Times the three hot kernels (distance matrix, its backward pass, triplet
mining) at a few batch sizes, plus a short end-to-end fit on the default
synthetic scenario. Each measurement is the median of --repeats runs after
one warmup call. Run from the repo root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --sizes 32,128 --dim 64 --repeats 50
"""

import argparse
import statistics
import time
from dataclasses import replace

import numpy as np

from hardreid import kernels
from hardreid.experiments import run_experiment
from hardreid.scenario import ScenarioConfig, generate_scenario
from hardreid.train import TrainConfig


def median_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def kernel_cases(sizes, dim, seed):
    rng = np.random.default_rng(seed)
    cases = []
    for n in sizes:
        features = rng.normal(size=(n, dim))
        # 8 identities keeps every batch minable regardless of n
        labels = rng.integers(1, 9, size=n).astype(np.int64)
        dist = kernels.pairwise_distance(features, 1e-12)
        grad = rng.normal(size=(n, n))
        cases.append(
            (
                f"n={n}",
                {
                    "pairwise_distance": lambda f=features: kernels.pairwise_distance(f, 1e-12),
                    "distance_backward": lambda f=features, d=dist, g=grad: (
                        kernels.pairwise_distance_backward(f, d, g)
                    ),
                    "triplet batch_hard": lambda d=dist, y=labels: (
                        kernels.triplet_forward_backward(d, y, 0.3, kernels.MINING_BATCH_HARD)
                    ),
                    "triplet batch_all": lambda d=dist, y=labels: (
                        kernels.triplet_forward_backward(d, y, 0.3, kernels.MINING_BATCH_ALL)
                    ),
                },
            )
        )
    return cases


def bench_fit(epochs, seed):
    generated = generate_scenario(ScenarioConfig(seed=seed))
    cfg = replace(TrainConfig(), epochs=epochs, seed=seed)
    t0 = time.perf_counter()
    run_experiment(generated, cfg, use_fine=True)
    return (time.perf_counter() - t0) * 1e3


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="32,64,128",
                        help="comma-separated batch sizes for the kernel timings")
    parser.add_argument("--dim", type=int, default=32, help="feature dimension")
    parser.add_argument("--repeats", type=int, default=20,
                        help="timed runs per measurement (median reported)")
    parser.add_argument("--fit-epochs", type=int, default=3,
                        help="epochs for the end-to-end fit timing")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]

    backends = ["python"]
    try:
        kernels.use_backend("native")
        backends.append("native")
    except ImportError:
        print("compiled extension not available, timing the python backend only")
    results = {}
    for backend in backends:
        kernels.use_backend(backend)
        for case, fns in kernel_cases(sizes, args.dim, args.seed):
            for name, fn in fns.items():
                results[(case, name, backend)] = median_ms(fn, args.repeats)
        results[("fit", f"{args.fit_epochs} epochs", backend)] = bench_fit(
            args.fit_epochs, args.seed
        )
    kernels.use_backend("auto")

    width = max(len(f"{case}  {name}") for case, name, _ in results) + 2
    header = f"{'benchmark':<{width}}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    seen = []
    for case, name, _ in results:
        if (case, name) not in seen:
            seen.append((case, name))
    for case, name in seen:
        row = f"{case + '  ' + name:<{width}}"
        for backend in backends:
            row += f"{results[(case, name, backend)]:>14.3f}"
        if len(backends) == 2:
            ratio = results[(case, name, "python")] / results[(case, name, "native")]
            row += f"{ratio:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()

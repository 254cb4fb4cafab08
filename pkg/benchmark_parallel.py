#!/usr/bin/env python3
"""
Benchmark bootstrap throughput across worker counts.
"""

import os
import sys
import time
from pathlib import Path

import numpy as np

# Make the src package importable when run from a checkout
sys.path.insert(0, str(Path(__file__).parent))

from src.estimators import EstimatorSpec
from src.inference import bootstrap
from src.logger_config import setup_logging
from src.simulation import DropoutMechanism, EffectProfile, generate_trial, synthesize_source


def make_trial(n: int):
    src = synthesize_source(seed=380)
    return generate_trial(src, n, EffectProfile.continuous(), DropoutMechanism.mcar(), seed=1)


def benchmark_bootstrap():
    """Benchmark bootstrap replicates per second for each estimator and worker count."""
    print("🔥 Bootstrap Parallel Performance Benchmark")
    print("=" * 50)

    test_cases = [
        {"name": "Unadjusted (n=380, B=2000)", "estimator": "unadjusted", "n": 380, "B": 2000},
        {"name": "MMRM* (n=380, B=200)", "estimator": "mmrm_star", "n": 380, "B": 200},
        {"name": "TMLE (n=380, B=200)", "estimator": "tmle", "n": 380, "B": 200},
    ]

    worker_counts = [1, 2, 4, 8, 16]
    max_workers = os.cpu_count() or 1
    worker_counts = [w for w in worker_counts if w <= max_workers]

    print(f"CPU cores detected: {max_workers}")
    print(f"Testing worker counts: {worker_counts}")
    print()

    results = []
    for case in test_cases:
        print(f"📊 Test Case: {case['name']}")
        print("-" * 40)
        ds = make_trial(case["n"])
        spec = EstimatorSpec(case["estimator"])
        case_results = {"case": case["name"], "results": []}

        for workers in worker_counts:
            print(f"  Workers: {workers:2d}", end=" ... ")
            start_time = time.time()
            bootstrap(ds, spec, case["B"], seed=7, workers=workers)
            elapsed = time.time() - start_time
            rate = case["B"] / elapsed
            case_results["results"].append({"workers": workers, "time": elapsed, "rate": rate})
            print(f"{elapsed:7.2f}s  ({rate:8,.1f} replicates/sec)")

        results.append(case_results)
        print()

    print("🚀 Performance Analysis")
    print("=" * 50)
    for case_result in results:
        print(f"\n{case_result['case']}:")
        serial_time = case_result["results"][0]["time"]
        print(f"  Serial baseline: {serial_time:.2f}s")
        best_speedup, best_workers = 1.0, 1
        for result in case_result["results"][1:]:
            speedup = serial_time / result["time"]
            efficiency = speedup / result["workers"] * 100
            if speedup > best_speedup:
                best_speedup, best_workers = speedup, result["workers"]
            print(f"    {result['workers']:2d} workers: {speedup:5.2f}x faster ({efficiency:4.1f}% efficiency)")
        print(f"  🏆 Best: {best_workers} workers with {best_speedup:.2f}x speedup")

    print("\n🔧 Usage Examples:")
    print("  longitudinal-ate analyze --data trial.csv --workers 0   # one worker per core")
    print("  longitudinal-ate simulate --workers 8 --boot 0")


def verify_correctness():
    """Verify that serial and parallel bootstraps draw identical replicates."""
    print("\n🔍 Correctness Verification")
    print("=" * 30)
    ds = make_trial(200)
    spec = EstimatorSpec("mmrm")
    serial = bootstrap(ds, spec, 40, seed=3, workers=1)
    parallel = bootstrap(ds, spec, 40, seed=3, workers=min(4, os.cpu_count() or 1))

    if np.array_equal(serial.replicates, parallel.replicates) and serial.interval == parallel.interval:
        print("✅ PASS: Serial and parallel bootstraps are identical")
        return True
    differences = np.sum(serial.replicates != parallel.replicates) if serial.retained == parallel.retained else "all"
    print(f"❌ FAIL: {differences} replicates differ")
    return False


if __name__ == "__main__":
    setup_logging(debug=False)
    try:
        if verify_correctness():
            benchmark_bootstrap()
        else:
            print("❌ Correctness verification failed - skipping benchmark")
            sys.exit(1)
    except KeyboardInterrupt:
        print("\n⏹️  Benchmark interrupted by user")

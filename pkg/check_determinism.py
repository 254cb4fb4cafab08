#!/usr/bin/env python3
"""
Check that simulation results do not depend on worker counts or kernels.
"""

import os
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))


def check_determinism():
    """Compare serial and parallel censoring kernels and scenario runs."""
    print("🔍 Testing Parallel vs Serial Determinism")
    print("=" * 45)

    from src.estimators import EstimatorSpec
    from src.logger_config import setup_logging
    from src.simulation import (
        DropoutMechanism,
        EffectProfile,
        Scenario,
        monotone_censoring,
        run_scenario,
        synthesize_source,
    )

    setup_logging(debug=False)
    workers = min(4, os.cpu_count() or 1)
    all_passed = True

    rng = np.random.default_rng(0)
    cases = [
        {"name": "MCAR hazards", "slope": 0.0},
        {"name": "MAR hazards", "slope": 0.5},
        {"name": "Responder hazards", "slope": -1.0},
    ]
    for case in cases:
        print(f"Testing kernel: {case['name']}")
        driver = rng.normal(size=(5000, 3))
        arms = rng.integers(0, 2, size=5000)
        intercepts = rng.uniform(-3.0, -1.0, size=(2, 3))
        uniforms = rng.random((5000, 3))
        serial = monotone_censoring(driver, arms, intercepts, case["slope"], uniforms, use_parallel=False)
        parallel = monotone_censoring(driver, arms, intercepts, case["slope"], uniforms, use_parallel=True)
        if np.array_equal(serial, parallel):
            print("  ✅ PASS: Observation flags are identical")
        else:
            print(f"  ❌ FAIL: {np.sum(serial != parallel)} flags differ")
            all_passed = False
        print()

    print(f"Testing scenario run: 1 vs {workers} workers")
    scenario = Scenario(
        name="continuous/beneficial/mcar",
        source=synthesize_source(seed=380),
        n=380,
        effect=EffectProfile.continuous(),
        dropout=DropoutMechanism.mcar(),
    )
    specs = [EstimatorSpec("unadjusted"), EstimatorSpec("mmrm_star"), EstimatorSpec("tmle")]
    serial = run_scenario(scenario, specs, replicates=16, seed=1, workers=1)
    parallel = run_scenario(scenario, specs, replicates=16, seed=1, workers=workers)
    if serial.rows == parallel.rows:
        print("  ✅ PASS: Metrics are identical")
    else:
        print("  ❌ FAIL: Metrics differ")
        all_passed = False

    if all_passed:
        print("\n🎉 All checks passed! Results are worker-count independent.")
    else:
        print("\n❌ Some checks failed.")
    return all_passed


if __name__ == "__main__":
    try:
        success = check_determinism()
        sys.exit(0 if success else 1)
    except Exception as e:
        print(f"❌ Check error: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)

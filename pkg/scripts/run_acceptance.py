"""
Run the acceptance sweep: oracle suite, runtime scaling, toy-task parity and ablation
Writes CSVs to data/outputs/acceptance/ and prints a pass/fail summary
"""

import sys
sys.path.append('.')

import logging

import numpy as np

from ballsparse.config import ACCEPTANCE_CONFIG, OUTPUTS_DIR
from ballsparse.cli.bench import fit_slopes, run_bench
from ballsparse.cli.check import run_suite
from ballsparse.cli.requests import AblateRequest, BenchRequest, CheckRequest, TrainRequest
from ballsparse.cli.train import run_ablation
from ballsparse.processing.training.dataset import make_synthetic_dataset
from ballsparse.processing.training.pipeline import train_model
from ballsparse.processing.utils.table_utils import write_csv

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

OUT_DIR = OUTPUTS_DIR / "acceptance"
PARITY_TOLERANCE = ACCEPTANCE_CONFIG["parity_tolerance"]
MIN_FULL_SLOPE = ACCEPTANCE_CONFIG["min_full_slope"]
MIN_SPEEDUP = ACCEPTANCE_CONFIG["min_speedup"]

summary = {}

print("="*70)
print(" BALL SPARSE ATTENTION ACCEPTANCE SWEEP")
print("="*70)

# 1. Oracle / invariant suite (includes the FLOP ordering)
print("\n\n🔍 STEP 1: ORACLE AND INVARIANT SUITE")
print("-"*70)
try:
    results = run_suite(CheckRequest())
    for result in results:
        summary[result.name] = result.passed
        print(f"   {'✅' if result.passed else '❌'} {result.name}: {result.detail}")
except Exception as e:
    print(f"\n❌ Check suite failed: {e}")
    import traceback
    traceback.print_exc()

# 2. Runtime scaling
print("\n\n⏱️  STEP 2: RUNTIME SCALING")
print("-"*70)
try:
    rows = run_bench(BenchRequest(variants=["full", "bsa", "bsa-gc"]))
    write_csv(rows, OUT_DIR / "bench.csv")
    slopes = fit_slopes(rows)
    largest = max(r["n"] for r in rows)
    at_largest = {r["variant"]: r["ms_median"] for r in rows if r["n"] == largest}
    speedup = at_largest["full"] / at_largest["bsa"]
    summary["full_slope"] = slopes["full"] >= MIN_FULL_SLOPE
    summary["gc_slope_below_full"] = slopes["bsa-gc"] < slopes["full"]
    summary["bsa_faster_at_max_n"] = speedup > (MIN_SPEEDUP if largest >= 32768 else 1.0)
    print(f"   slopes: {', '.join(f'{k}={v:.2f}' for k, v in slopes.items())}")
    print(f"   speedup at N={largest}: {speedup:.2f}x")
except Exception as e:
    print(f"\n❌ Runtime scaling failed: {e}")
    import traceback
    traceback.print_exc()

# 3. Toy-task parity (BSA against full attention, identical training)
print("\n\n📈 STEP 3: TOY-TASK PARITY")
print("-"*70)
try:
    request = TrainRequest()
    train, test = make_synthetic_dataset(n_points=request.n_points, seed=request.seed)
    mse = {}
    for variant in ("full", "bsa"):
        config = request.model_copy(update={"variant": variant}).bsa_config()
        result = train_model(train, test, config, depth=request.depth, steps=request.steps, seed=request.seed)
        write_csv(result.metrics, OUT_DIR / f"train_{variant}.csv")
        mse[variant] = result.final_test_mse
    gap = abs(mse["bsa"] - mse["full"]) / mse["full"]
    summary["toy_parity"] = gap <= PARITY_TOLERANCE
    print(f"   test MSE full={mse['full']:.5f} bsa={mse['bsa']:.5f} (gap {gap:.1%})")
except Exception as e:
    print(f"\n❌ Toy-task parity failed: {e}")
    import traceback
    traceback.print_exc()

# 4. Block-length / group-size ablation
print("\n\n🧪 STEP 4: ABLATION GRID")
print("-"*70)
try:
    rows = run_ablation(AblateRequest())
    write_csv(rows, OUT_DIR / "ablation.csv")
    summary["ablation_grid"] = len(rows) == 8 and all(np.isfinite(r["final_test_mse"]) for r in rows)
    print(f"   {len(rows)} cells written")
except Exception as e:
    print(f"\n❌ Ablation failed: {e}")
    import traceback
    traceback.print_exc()

print("\n\n" + "="*70)
passed = bool(summary) and all(summary.values())
print(" 🎉 ALL ACCEPTANCE CHECKS PASSED" if passed else " ⚠️  SOME ACCEPTANCE CHECKS FAILED")
print("="*70)
for name, ok in summary.items():
    print(f"  {'✅' if ok else '❌'} {name}")
print(f"\nOutputs in {OUT_DIR}")

sys.exit(0 if passed else 1)

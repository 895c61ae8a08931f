"""
Runtime sweep and analytic FLOP reports
Forward-only wall time of one attention layer per (N, variant), with a
log-log slope summary, plus the FLOP breakdown from the cost model
"""

import logging
import time
from pathlib import Path
from typing import Dict, List

import numpy as np
from scipy.stats import linregress

from ballsparse.config import BENCH_CONFIG, EXIT_CODES
from ballsparse.exceptions import InvalidConfigError
from ballsparse.processing.attention.layer import bsa_attention_forward, prepare_layout
from ballsparse.processing.attention.params import BsaConfig, init_bsa_params
from ballsparse.processing.cost.model import flops_bsa
from ballsparse.processing.geom.ball_tree import PointCloud, permute_features
from ballsparse.processing.utils.array_utils import blas_threads, make_rng, resolve_dtype
from ballsparse.processing.utils.table_utils import environment_metadata, format_key_values, write_csv
from .requests import BenchRequest, FlopsRequest

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["n", "variant", "ms_median", "flops"]
# Query rows per attention chunk in forward-only timing runs
BENCH_CHUNK_ROWS = 256


def sweep_sizes(min_n: int, max_n: int) -> List[int]:
    """min_n, 2 min_n, 4 min_n, ... up to max_n"""
    sizes = []
    n = min_n
    while n <= max_n:
        sizes.append(n)
        n *= 2
    return sizes


def time_layer(
    n: int,
    config: BsaConfig,
    rng: np.random.Generator,
    dtype,
    repeats: int,
    warmups: int
) -> float:
    """
    Median forward wall time (ms) of one attention layer on a random cloud

    Layout, parameters and inputs are prepared outside the timed region.
    """
    points = PointCloud(rng.uniform(-1.0, 1.0, size=(n, 3)))
    tree, layer_config = prepare_layout(points, config)
    params = init_bsa_params(layer_config, rng, dtype)
    x = permute_features(tree, rng.standard_normal((n, config.model_dim)).astype(dtype))

    timings = []
    for i in range(warmups + repeats):
        start = time.perf_counter()
        bsa_attention_forward(x, tree, layer_config, params, keep_workspace=False, chunk_rows=BENCH_CHUNK_ROWS)
        elapsed = (time.perf_counter() - start) * 1000.0
        if i >= warmups:
            timings.append(elapsed)
    return float(np.median(timings))


def fit_slopes(rows: List[Dict[str, object]], points: int = BENCH_CONFIG["slope_points"]) -> Dict[str, float]:
    """
    Log-log slope of runtime against N per variant, over the largest `points` sizes

    Variants with fewer than two measured sizes are skipped.
    """
    slopes = {}
    for variant in dict.fromkeys(r["variant"] for r in rows):
        measured = sorted((r["n"], r["ms_median"]) for r in rows if r["variant"] == variant)[-points:]
        if len(measured) < 2:
            continue
        n, ms = np.array(measured, dtype=np.float64).T
        slopes[variant] = float(linregress(np.log(n), np.log(ms)).slope)
    return slopes


def run_bench(request: BenchRequest) -> List[Dict[str, object]]:
    """Time every (N, variant) pair of the sweep"""
    dtype = resolve_dtype(request.precision)
    rng = make_rng(request.seed)
    rows = []

    with blas_threads(request.threads):
        for n in sweep_sizes(request.min_n, request.max_n):
            for variant in request.variants:
                config = request.variant_config(variant)
                try:
                    config.check_capacity(config.resolve(n))
                except InvalidConfigError as e:
                    logger.warning(f"Skipping N={n} {variant}: {e}")
                    continue
                ms = time_layer(n, config, rng, dtype, request.repeats, request.warmups)
                flops = flops_bsa(n, config).attention_total
                logger.info(f"N={n} {variant}: {ms:.2f} ms median, {flops} FLOPs")
                rows.append({"n": n, "variant": variant, "ms_median": ms, "flops": flops})
    return rows


def cmd_bench(request: BenchRequest) -> int:
    """
    Runtime sweep CSV (n, variant, ms_median, flops plus environment columns)

    With --out, the slope summary is also written to <out stem>_slopes.txt.
    """
    logger.info("=" * 60)
    logger.info("STARTING RUNTIME SWEEP")
    logger.info("=" * 60)

    rows = run_bench(request)
    if not rows:
        raise InvalidConfigError("No (N, variant) pair in the sweep has enough candidate blocks")
    metadata = environment_metadata(request.threads, request.precision)
    table = [{**row, **metadata} for row in rows]
    output_path = Path(request.out) if request.out else None
    write_csv(table, output_path, columns=BENCH_COLUMNS + list(metadata))

    slopes = fit_slopes(rows)
    summary: Dict[str, object] = {f"slope.{variant}": slope for variant, slope in slopes.items()}
    largest = max(r["n"] for r in rows)
    at_largest = {r["variant"]: r["ms_median"] for r in rows if r["n"] == largest}
    for variant, ms in at_largest.items():
        if variant != "full" and "full" in at_largest:
            summary[f"speedup.{variant}"] = at_largest["full"] / ms
    for key, value in summary.items():
        logger.info(f"{key} = {value:.3f}")

    if output_path is not None:
        slopes_path = output_path.with_name(output_path.stem + "_slopes.txt")
        slopes_path.write_text(format_key_values({"n_max": largest, **summary}))
        logger.info(f"Saved slope summary to {slopes_path}")

    logger.info("=" * 60)
    logger.info("RUNTIME SWEEP COMPLETE")
    logger.info("=" * 60)
    return EXIT_CODES["ok"]


def cmd_flops(request: FlopsRequest) -> int:
    """FLOP breakdown for the chosen variant (kv) or for every variant (csv)"""
    if request.format == "kv":
        report = flops_bsa(request.n, request.bsa_config(), depth=request.depth)
        report.variant = request.variant
        text = format_key_values(report.to_key_values())
        if request.out:
            Path(request.out).write_text(text)
            logger.info(f"Saved FLOP report to {request.out}")
        else:
            print(text, end="")
        return EXIT_CODES["ok"]

    rows = []
    for variant in BENCH_CONFIG["variants"]:
        config = request.model_copy(update={"variant": variant}).bsa_config()
        report = flops_bsa(request.n, config, depth=request.depth)
        report.variant = variant
        rows.append(report.to_row())
    write_csv(rows, Path(request.out) if request.out else None)
    return EXIT_CODES["ok"]

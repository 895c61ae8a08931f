"""
Toy regression training and the block-length / group-size ablation
"""

import logging
from pathlib import Path
from typing import Dict, List

from ballsparse.config import ABLATION_GRID, EXIT_CODES
from ballsparse.processing.cost.model import flops_bsa
from ballsparse.processing.training.dataset import load_cloud_directory, make_synthetic_dataset
from ballsparse.processing.training.pipeline import run_training_pipeline, train_model
from ballsparse.processing.utils.array_utils import blas_threads
from ballsparse.processing.utils.table_utils import write_csv
from .requests import AblateRequest, TrainRequest

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ["block_len", "group_size", "final_test_mse", "final_train_mse", "flops"]


def _train_kwargs(request: TrainRequest) -> Dict[str, object]:
    return {
        "batch_size": request.batch_size,
        "learning_rate": request.learning_rate,
        "weight_decay": request.weight_decay,
        "eval_interval": request.eval_interval,
    }


def cmd_train(request: TrainRequest) -> int:
    """Train on the synthetic set (or --dataset-path), write metrics CSV and checkpoint"""
    config = request.bsa_config()
    with blas_threads(request.threads):
        _, outputs = run_training_pipeline(
            config,
            dataset_path=Path(request.dataset_path) if request.dataset_path else None,
            depth=request.depth,
            steps=request.steps,
            n_points=request.n_points,
            seed=request.seed,
            precision=request.precision,
            output_path=Path(request.out) if request.out else None,
            **_train_kwargs(request),
        )
    for name, path in outputs.items():
        logger.info(f"  {name}: {path}")
    return EXIT_CODES["ok"]


def run_ablation(request: AblateRequest) -> List[Dict[str, object]]:
    """
    Train one model per (block_len, group_size) pair of ABLATION_GRID

    Every run sees the same clouds, seed and schedule; only l and g change.
    """
    configs = [(ell, g, request.grid_config(ell, g)) for ell, g in ABLATION_GRID]
    if request.dataset_path:
        train, test = load_cloud_directory(Path(request.dataset_path), seed=request.seed)
    else:
        train, test = make_synthetic_dataset(n_points=request.n_points, seed=request.seed)
    n_points = train[0].points.n_points

    rows = []
    for i, (ell, g, config) in enumerate(configs, start=1):
        logger.info(f"Step {i}: block_len={ell}, group_size={g}")
        result = train_model(
            train, test, config,
            depth=request.depth,
            steps=request.steps,
            seed=request.seed,
            precision=request.precision,
            **_train_kwargs(request),
        )
        rows.append({
            "block_len": ell,
            "group_size": g,
            "final_test_mse": result.final_test_mse,
            "final_train_mse": result.final_train_mse,
            "flops": flops_bsa(n_points, config).attention_total,
        })
        logger.info(f"block_len={ell}, group_size={g}: test MSE {result.final_test_mse:.6f}")
    return rows


def cmd_ablate(request: AblateRequest) -> int:
    """Ablation CSV with one row per grid cell"""
    logger.info("=" * 60)
    logger.info("STARTING ABLATION SWEEP")
    logger.info("=" * 60)

    with blas_threads(request.threads):
        rows = run_ablation(request)
    write_csv(rows, Path(request.out) if request.out else None, columns=ABLATION_COLUMNS)

    logger.info("=" * 60)
    logger.info("ABLATION SWEEP COMPLETE")
    logger.info("=" * 60)
    return EXIT_CODES["ok"]

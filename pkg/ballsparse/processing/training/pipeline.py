"""
Toy point-cloud regression training
Mini-batch MSE training with exact gradients, AdamW and a cosine schedule,
periodic test evaluation, metrics CSV and a final checkpoint
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from sklearn.metrics import mean_squared_error

from ballsparse.config import MODEL_CONFIG, OUTPUTS_DIR, TRAIN_CONFIG
from ballsparse.exceptions import InvalidArgumentError
from ballsparse.processing.attention.layer import model_forward, model_vjp, prepare_layout
from ballsparse.processing.attention.params import BsaConfig, ModelParams, init_model_params
from ballsparse.processing.geom.ball_tree import BallTree
from ballsparse.processing.utils.array_utils import make_rng, resolve_dtype
from ballsparse.processing.utils.table_utils import write_csv
from .checkpoint import save_checkpoint
from .dataset import CloudSample, load_cloud_directory, make_synthetic_dataset
from .optim import AdamW, cosine_lr

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "lr", "train_loss", "test_mse"]


@dataclass
class TrainResult:
    params: ModelParams
    config: BsaConfig
    metrics: List[Dict[str, float]] = field(default_factory=list)
    final_test_mse: float = float("nan")
    final_train_mse: float = float("nan")


class _Layouts:
    """Ball trees per cloud, built once (the points never move)"""

    def __init__(self, config: BsaConfig):
        self.config = config
        self._cache: Dict[int, Tuple[BallTree, BsaConfig]] = {}

    def get(self, sample: CloudSample) -> Tuple[BallTree, BsaConfig]:
        key = id(sample)
        if key not in self._cache:
            self._cache[key] = prepare_layout(sample.points, self.config)
        return self._cache[key]


def _features(sample: CloudSample, dtype) -> Optional[np.ndarray]:
    return None if sample.features is None else sample.features.astype(dtype)


def evaluate(
    samples: List[CloudSample],
    params: ModelParams,
    layouts: _Layouts
) -> float:
    """Pointwise MSE over every point of every sample"""
    if not samples:
        return float("nan")
    preds, targets = [], []
    dtype = params.embed_w.dtype
    for sample in samples:
        tree, layer_config = layouts.get(sample)
        pred, _ = model_forward(
            sample.points, _features(sample, dtype), layer_config, params,
            tree=tree, keep_workspace=False,
        )
        preds.append(pred)
        targets.append(sample.target)
    return float(mean_squared_error(np.concatenate(targets), np.concatenate(preds)))


def train_step(
    batch: List[CloudSample],
    params: ModelParams,
    layouts: _Layouts
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Mean loss and accumulated gradients over a mini-batch

    Each cloud contributes its own pointwise MSE; the batch loss is their mean.
    """
    dtype = params.embed_w.dtype
    grads: Dict[str, np.ndarray] = {}
    total = 0.0
    for sample in batch:
        tree, layer_config = layouts.get(sample)
        pred, ws = model_forward(sample.points, _features(sample, dtype), layer_config, params, tree=tree)
        residual = pred - sample.target.astype(dtype)
        total += float(np.mean(residual.astype(np.float64) ** 2))
        grad_pred = (2.0 / (residual.size * len(batch))) * residual
        _, sample_grads = model_vjp(ws, params, grad_pred.astype(dtype))
        for name, g in sample_grads.items():
            grads[name] = grads[name] + g if name in grads else g
    return total / len(batch), grads


def train_model(
    train: List[CloudSample],
    test: List[CloudSample],
    config: BsaConfig,
    depth: int = MODEL_CONFIG["depth"],
    steps: int = TRAIN_CONFIG["steps"],
    batch_size: int = TRAIN_CONFIG["batch_size"],
    learning_rate: float = TRAIN_CONFIG["learning_rate"],
    weight_decay: float = TRAIN_CONFIG["weight_decay"],
    eval_interval: int = TRAIN_CONFIG["eval_interval"],
    seed: int = TRAIN_CONFIG["seed"],
    precision: str = TRAIN_CONFIG["precision"]
) -> TrainResult:
    """
    Train a fresh model on a list of clouds

    Args:
        train: Training clouds
        test: Held-out clouds (may be empty)
        config: Layer configuration
        depth: Transformer blocks
        steps: Optimizer steps (0 evaluates the initial model only)
        batch_size: Clouds per step
        learning_rate: Peak learning rate of the cosine schedule
        weight_decay: AdamW decoupled weight decay
        eval_interval: Steps between test evaluations
        seed: Seed for initialization and batch sampling
        precision: "working" or "high"

    Returns:
        TrainResult with parameters and per-step metric rows
    """
    if not train:
        raise InvalidArgumentError("Training set is empty")
    if steps < 0:
        raise InvalidArgumentError(f"steps must be >= 0, got {steps}")

    dtype = resolve_dtype(precision)
    rng = make_rng(seed)
    in_dim = train[0].points.dim + (0 if train[0].features is None else train[0].features.shape[1])
    params = init_model_params(config, in_dim, depth, rng, dtype)
    optimizer = AdamW(params.named_arrays(), lr=learning_rate, weight_decay=weight_decay)
    layouts = _Layouts(config)
    batch_size = min(batch_size, len(train))

    initial = evaluate(train, params, layouts)
    metrics = [{"step": 0, "lr": learning_rate, "train_loss": initial, "test_mse": evaluate(test, params, layouts)}]
    logger.info(f"Initial train MSE {initial:.6f}")

    for step in range(1, steps + 1):
        lr = cosine_lr(step - 1, steps, learning_rate)
        batch = [train[i] for i in rng.choice(len(train), size=batch_size, replace=False)]
        loss, grads = train_step(batch, params, layouts)
        optimizer.step(grads, lr=lr)

        test_mse = float("nan")
        if step % eval_interval == 0 or step == steps:
            test_mse = evaluate(test, params, layouts)
            logger.info(f"Step {step}/{steps}: train loss {loss:.6f}, test MSE {test_mse:.6f}")
        metrics.append({"step": step, "lr": lr, "train_loss": loss, "test_mse": test_mse})

    result = TrainResult(params=params, config=config, metrics=metrics)
    result.final_train_mse = evaluate(train, params, layouts)
    result.final_test_mse = metrics[-1]["test_mse"] if steps else metrics[0]["test_mse"]
    return result


def run_training_pipeline(
    config: BsaConfig,
    dataset_path: Optional[Path] = None,
    depth: int = MODEL_CONFIG["depth"],
    steps: int = TRAIN_CONFIG["steps"],
    n_points: int = TRAIN_CONFIG["n_points"],
    seed: int = TRAIN_CONFIG["seed"],
    precision: str = TRAIN_CONFIG["precision"],
    output_path: Optional[Path] = None,
    checkpoint_stem: Optional[Path] = None,
    **train_kwargs
) -> Tuple[TrainResult, Dict[str, Path]]:
    """
    Run the toy regression end to end

    Args:
        config: Layer configuration
        dataset_path: Directory of point-cloud files (synthetic data when None)
        depth: Transformer blocks
        steps: Optimizer steps
        n_points: Points per synthetic cloud
        seed: Seed for data, initialization and batching
        precision: "working" or "high"
        output_path: Metrics CSV path (stdout when None)
        checkpoint_stem: Checkpoint stem (defaults next to the metrics, or under OUTPUTS_DIR)
        **train_kwargs: Passed through to train_model

    Returns:
        Tuple of (TrainResult, mapping of output names to paths)
    """
    logger.info("=" * 60)
    logger.info("STARTING TRAINING PIPELINE")
    logger.info("=" * 60)

    logger.info("Step 1: Loading dataset")
    if dataset_path is None:
        train, test = make_synthetic_dataset(n_points=n_points, seed=seed)
    else:
        train, test = load_cloud_directory(dataset_path, seed=seed)

    logger.info("Step 2: Training")
    result = train_model(train, test, config, depth=depth, steps=steps, seed=seed, precision=precision, **train_kwargs)

    logger.info("Step 3: Writing metrics and checkpoint")
    outputs = {}
    write_csv(result.metrics, output_path, columns=METRIC_COLUMNS)
    if output_path is not None:
        outputs["metrics"] = Path(output_path)

    if checkpoint_stem is None:
        base = Path(output_path).with_suffix("") if output_path is not None else OUTPUTS_DIR / "model"
        checkpoint_stem = base.with_name(base.name + "_checkpoint")
    blob_path, manifest_path = save_checkpoint(
        result.params, checkpoint_stem, config=config, metadata={"steps": steps, "seed": seed}
    )
    outputs["checkpoint"] = blob_path
    outputs["manifest"] = manifest_path

    logger.info("=" * 60)
    logger.info("TRAINING PIPELINE COMPLETE")
    logger.info(f"Final train MSE {result.final_train_mse:.6f}, test MSE {result.final_test_mse:.6f}")
    logger.info("=" * 60)
    return result, outputs

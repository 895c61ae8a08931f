"""
Point-cloud regression datasets
Seeded synthetic clouds on deformed spheres, or a directory of point-cloud files
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from ballsparse.config import TRAIN_CONFIG
from ballsparse.exceptions import InvalidArgumentError, ShapeError
from ballsparse.processing.geom.ball_tree import PointCloud
from ballsparse.processing.geom.cloud_io import load_point_cloud
from ballsparse.processing.utils.array_utils import make_rng

logger = logging.getLogger(__name__)

# Weight of the cloud-level term in the synthetic target
GLOBAL_TERM_WEIGHT = 2.0


@dataclass
class CloudSample:
    """One cloud with per-point targets"""
    points: PointCloud
    target: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.target.shape != (self.points.n_points,):
            raise ShapeError(
                f"Target shape {self.target.shape} does not match {self.points.n_points} points"
            )


def synthetic_cloud(n_points: int, rng: np.random.Generator) -> CloudSample:
    """
    Points on a randomly deformed unit sphere

    The radius along unit direction u is 1 + a cos(f (u . w)) for a random
    amplitude a, frequency f and axis w. The target at each point is
    cos(2 u_z) plus GLOBAL_TERM_WEIGHT times the cloud's mean radius offset,
    so predictions need context from the whole cloud.
    """
    if n_points < 1:
        raise InvalidArgumentError(f"n_points must be >= 1, got {n_points}")
    directions = rng.standard_normal((n_points, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    amplitude = rng.uniform(0.0, 0.4)
    frequency = rng.integers(1, 4)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)

    radius = 1.0 + amplitude * np.cos(frequency * (directions @ axis))
    coords = directions * radius[:, None]
    target = np.cos(2.0 * directions[:, 2]) + GLOBAL_TERM_WEIGHT * (radius.mean() - 1.0)

    return CloudSample(points=PointCloud(coords), target=target)


def make_synthetic_dataset(
    n_train: int = TRAIN_CONFIG["n_train"],
    n_test: int = TRAIN_CONFIG["n_test"],
    n_points: int = TRAIN_CONFIG["n_points"],
    seed: int = TRAIN_CONFIG["seed"]
) -> Tuple[List[CloudSample], List[CloudSample]]:
    """
    Generate the fixed synthetic train/test split

    Args:
        n_train: Training clouds
        n_test: Test clouds
        n_points: Points per cloud
        seed: Generator seed (same seed, same clouds)

    Returns:
        Tuple of (train samples, test samples)
    """
    rng = make_rng(seed)
    samples = [synthetic_cloud(n_points, rng) for _ in range(n_train + n_test)]
    if n_test == 0:
        return samples, []
    train, test = train_test_split(samples, test_size=n_test, random_state=seed)
    logger.info(f"Synthetic dataset: {len(train)} train / {len(test)} test clouds of {n_points} points")
    return train, test


def load_cloud_directory(
    directory: Path,
    dim: int = 3,
    test_fraction: float = 0.2,
    seed: int = TRAIN_CONFIG["seed"]
) -> Tuple[List[CloudSample], List[CloudSample]]:
    """
    Load every point-cloud file in a directory; the last column is the target

    Columns between the coordinates and the target become input features.

    Args:
        directory: Directory of *.txt / *.xyz files
        dim: Coordinate columns
        test_fraction: Share of clouds held out
        seed: Split seed

    Returns:
        Tuple of (train samples, test samples)
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Dataset directory not found at {directory}")

    files = sorted(p for p in directory.iterdir() if p.suffix in (".txt", ".xyz"))
    if not files:
        raise FileNotFoundError(f"No point-cloud files (*.txt, *.xyz) in {directory}")

    samples = []
    for path in files:
        points, extra = load_point_cloud(path, dim=dim)
        if extra.shape[1] < 1:
            raise ShapeError(f"{path} has no target column")
        features = extra[:, :-1] if extra.shape[1] > 1 else None
        samples.append(CloudSample(points=points, target=extra[:, -1], features=features))

    n_features = {0 if s.features is None else s.features.shape[1] for s in samples}
    if len(n_features) > 1:
        raise ShapeError(f"Clouds in {directory} disagree on feature count: {sorted(n_features)}")

    if len(samples) < 2:
        return samples, []
    train, test = train_test_split(samples, test_size=test_fraction, random_state=seed)
    logger.info(f"Loaded {len(train)} train / {len(test)} test clouds from {directory}")
    return train, test

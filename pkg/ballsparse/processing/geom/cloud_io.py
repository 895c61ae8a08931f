"""
Point-cloud text files
One point per line, D whitespace-separated reals, optional trailing columns
"""

import logging
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from ballsparse.exceptions import RejectedInputError, ShapeError
from .ball_tree import PointCloud

logger = logging.getLogger(__name__)


def load_point_cloud(file_path: Path, dim: int = 3) -> Tuple[PointCloud, np.ndarray]:
    """
    Read a point-cloud file

    Args:
        file_path: Path to the text file
        dim: Number of leading coordinate columns

    Returns:
        Tuple of (PointCloud, extra (N, k) trailing columns, k >= 0)
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise FileNotFoundError(f"Point-cloud file not found at {file_path}")

    table = pd.read_csv(file_path, sep=r"\s+", header=None, comment="#", dtype=np.float64)
    if table.shape[1] < dim:
        raise ShapeError(
            f"{file_path} has {table.shape[1]} columns, need at least {dim} coordinates"
        )

    values = table.to_numpy()
    coords = values[:, :dim]
    extra = values[:, dim:]

    if not np.all(np.isfinite(coords)):
        raise RejectedInputError(f"{file_path} contains non-finite coordinates")

    logger.info(f"Loaded {len(coords)} points ({dim}D, {extra.shape[1]} extra columns) from {file_path}")

    return PointCloud(coords), extra


def save_point_cloud(
    file_path: Path,
    points: PointCloud,
    extra: Optional[np.ndarray] = None
) -> None:
    """
    Write a point-cloud file (coordinates followed by any extra columns)

    Args:
        file_path: Output path
        points: Point cloud
        extra: Optional (N, k) trailing columns (e.g. regression targets)
    """
    values = points.coords
    if extra is not None:
        extra = np.asarray(extra).reshape(points.n_points, -1)
        values = np.hstack([values, extra])

    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(values).to_csv(file_path, sep=" ", header=False, index=False, float_format="%.17g")
    logger.info(f"Saved {points.n_points} points to {file_path}")

"""
Ball tree construction over point clouds
Recursive median bisection that makes every size-m ball a contiguous index range
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from ballsparse.exceptions import InvalidArgumentError, RejectedInputError, ShapeError
from ballsparse.processing.utils.array_utils import ceil_div, round_up

logger = logging.getLogger(__name__)

# Marks padded slots in BallTree.permutation / inverse_permutation
SENTINEL = -1


@dataclass(frozen=True, eq=False)
class PointCloud:
    """
    Unordered set of N points in R^D

    Attributes:
        coords: (N, D) coordinates in arbitrary physical units
    """
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.ndim != 2:
            raise ShapeError(f"Point coordinates must be (N, D), got shape {coords.shape}")
        if coords.shape[0] < 1 or coords.shape[1] < 1:
            raise ShapeError(f"Point cloud needs N >= 1 and D >= 1, got {coords.shape}")
        object.__setattr__(self, "coords", coords)

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True, eq=False)
class BallTree:
    """
    Leaf partition of a point cloud into contiguous balls of equal capacity

    Attributes:
        permutation: (N_pad,) tree-ordered slot -> original index, SENTINEL for padding
        inverse_permutation: (N_pad,) original index -> slot for i < N, SENTINEL beyond
        ball_size: Slots per ball (m)
        n_valid: Number of real points (N)
        n_padded: Slot count N_pad, the smallest multiple of m >= N
        valid_mask: (N_pad,) True for slots holding a real point
        ball_ranges: Half-open slot intervals, one per ball
    """
    permutation: np.ndarray
    inverse_permutation: np.ndarray
    ball_size: int
    n_valid: int
    n_padded: int
    valid_mask: np.ndarray
    ball_ranges: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def n_balls(self) -> int:
        return len(self.ball_ranges)

    def ball_of(self, slot: int) -> int:
        """Index of the ball containing a tree-ordered slot"""
        return slot // self.ball_size

    def ball_members(self, ball: int) -> np.ndarray:
        """Tree-ordered slots of one ball (padding included)"""
        start, stop = self.ball_ranges[ball]
        return np.arange(start, stop)


def build_ball_tree(points: PointCloud, ball_size: int) -> BallTree:
    """
    Build the leaf partition of a ball tree

    Each node splits its points at the median of the axis with the largest
    coordinate spread (ties ordered by original index). Node capacities are
    multiples of ball_size; the left child receives enough points to fill
    ceil(balls / 2) balls, so every padded slot lands in the final ball.

    Args:
        points: Point cloud to partition
        ball_size: Slots per ball (m >= 1)

    Returns:
        BallTree with permutation, validity mask and ball ranges
    """
    if isinstance(ball_size, bool) or not isinstance(ball_size, (int, np.integer)) or ball_size < 1:
        raise InvalidArgumentError(f"ball_size must be a positive integer, got {ball_size!r}")
    ball_size = int(ball_size)

    coords = np.asarray(points.coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        bad = int(np.count_nonzero(~np.isfinite(coords).all(axis=1)))
        raise RejectedInputError(f"Point cloud has {bad} point(s) with non-finite coordinates")

    n = points.n_points
    n_padded = round_up(n, ball_size)

    leaves: List[np.ndarray] = []
    _bisect(coords, np.arange(n, dtype=np.int64), n_padded, ball_size, leaves)

    permutation = np.full(n_padded, SENTINEL, dtype=np.int64)
    for ball, leaf in enumerate(leaves):
        start = ball * ball_size
        permutation[start:start + len(leaf)] = leaf

    valid_mask = permutation != SENTINEL
    inverse_permutation = np.full(n_padded, SENTINEL, dtype=np.int64)
    inverse_permutation[permutation[valid_mask]] = np.flatnonzero(valid_mask)

    n_balls = n_padded // ball_size
    ball_ranges = [(b * ball_size, (b + 1) * ball_size) for b in range(n_balls)]

    logger.debug(f"Ball tree: N={n}, m={ball_size}, N_pad={n_padded}, balls={n_balls}")

    return BallTree(
        permutation=permutation,
        inverse_permutation=inverse_permutation,
        ball_size=ball_size,
        n_valid=n,
        n_padded=n_padded,
        valid_mask=valid_mask,
        ball_ranges=ball_ranges,
    )


def _bisect(
    coords: np.ndarray,
    idx: np.ndarray,
    capacity: int,
    ball_size: int,
    leaves: List[np.ndarray]
) -> None:
    """Append the leaves of the subtree holding `idx` in left-to-right order"""
    if capacity <= ball_size:
        leaves.append(idx)
        return

    left_capacity = ceil_div(capacity // ball_size, 2) * ball_size
    n_left = min(len(idx), left_capacity)

    if len(idx) > 1:
        node = coords[idx]
        axis = int(np.argmax(np.ptp(node, axis=0)))
        # sort by coordinate, then original index
        idx = idx[np.lexsort((idx, node[:, axis]))]

    _bisect(coords, idx[:n_left], left_capacity, ball_size, leaves)
    _bisect(coords, idx[n_left:], capacity - left_capacity, ball_size, leaves)


def permute_features(tree: BallTree, features: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """
    Reorder rows into tree order, filling padded slots

    Also the backward of unpermute_features (with fill=0).

    Args:
        tree: Ball tree over the same points
        features: (N, ...) rows in original order
        fill: Value for padded rows

    Returns:
        (N_pad, ...) rows in tree order
    """
    features = np.asarray(features)
    if features.shape[0] != tree.n_valid:
        raise ShapeError(
            f"Expected {tree.n_valid} feature rows, got {features.shape[0]}"
        )
    out = np.full((tree.n_padded,) + features.shape[1:], fill, dtype=features.dtype)
    out[tree.valid_mask] = features[tree.permutation[tree.valid_mask]]
    return out


def unpermute_features(tree: BallTree, features: np.ndarray) -> np.ndarray:
    """
    Restore original row order and drop padded rows

    Also the backward of permute_features.

    Args:
        tree: Ball tree over the same points
        features: (N_pad, ...) rows in tree order

    Returns:
        (N, ...) rows in original order
    """
    features = np.asarray(features)
    if features.shape[0] != tree.n_padded:
        raise ShapeError(
            f"Expected {tree.n_padded} tree-ordered rows, got {features.shape[0]}"
        )
    return features[tree.inverse_permutation[:tree.n_valid]]


def random_partition(n_points: int, ball_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Random size-m groups of point indices (locality baseline)"""
    order = rng.permutation(n_points)
    return [order[i:i + ball_size] for i in range(0, n_points, ball_size)]


def mean_intra_ball_distance(coords: np.ndarray, groups: List[np.ndarray]) -> float:
    """
    Mean pairwise Euclidean distance between points sharing a group

    Args:
        coords: (N, D) coordinates
        groups: Index arrays, one per ball

    Returns:
        Mean over all intra-group pairs
    """
    total = 0.0
    pairs = 0
    for group in groups:
        if len(group) < 2:
            continue
        pts = coords[group]
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=-1))
        iu = np.triu_indices(len(group), k=1)
        total += float(dist[iu].sum())
        pairs += len(iu[0])
    return total / max(pairs, 1)


def tree_groups(tree: BallTree) -> List[np.ndarray]:
    """Original indices of the valid points in each ball"""
    groups = []
    for start, stop in tree.ball_ranges:
        slots = tree.permutation[start:stop]
        groups.append(slots[slots != SENTINEL])
    return groups

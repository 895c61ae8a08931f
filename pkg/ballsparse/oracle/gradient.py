"""
Finite-difference verification of hand-written vector-Jacobian products
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from ballsparse.exceptions import InvalidArgumentError, ShapeError

logger = logging.getLogger(__name__)

# Steps above this are too coarse for a meaningful central difference
MAX_RELIABLE_STEP = 1e-3
# Per-coordinate errors are only meaningful for gradients above this fraction of the scale
COORD_FLOOR = 1e-6


@dataclass
class FdCheckReport:
    """
    Outcome of one finite-difference comparison

    Attributes:
        max_rel_error: Largest |fd - analytic| over the checked coordinates,
            divided by the given scale or the largest gradient magnitude seen
        max_coord_rel_error: Largest |fd - analytic| / max(|fd|, |analytic|) per coordinate;
            coordinates whose gradient is below COORD_FLOOR * scale are skipped
        worst_coordinate: Index into x of the largest error
        step: Central-difference step
        precision: "high" for float64 inputs, "working" otherwise
        n_coordinates: Coordinates checked
        step_flagged: Step exceeds MAX_RELIABLE_STEP
    """
    max_rel_error: float
    worst_coordinate: Tuple[int, ...]
    step: float
    precision: str
    n_coordinates: int
    step_flagged: bool
    max_coord_rel_error: float = 0.0

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def fd_vjp_check(
    f: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    grad_out: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-5,
    coords: Optional[Iterable[Tuple[int, ...]]] = None,
    scale: Optional[float] = None
) -> FdCheckReport:
    """
    Compare an analytic VJP against central differences of <grad_out, f(x)>

    Args:
        f: Function of x (any selection decisions must already be frozen)
        x: Point of evaluation (not modified)
        grad_out: Cotangent with the shape of f(x)
        analytic: Claimed gradient of <grad_out, f(x)> wrt x
        step: Central-difference step
        coords: Optional subset of x indices to check (default: all)
        scale: Gradient magnitude to normalize errors by (default: the largest seen)

    Returns:
        FdCheckReport
    """
    if step <= 0:
        raise InvalidArgumentError(f"Finite-difference step must be > 0, got {step}")
    x = np.asarray(x)
    analytic = np.asarray(analytic)
    if analytic.shape != x.shape:
        raise ShapeError(f"Analytic gradient {analytic.shape} does not match x {x.shape}")

    if coords is None:
        coords = list(np.ndindex(x.shape))
    else:
        coords = [tuple(np.atleast_1d(c)) for c in coords]

    def objective(point: np.ndarray) -> float:
        return float(np.sum(np.asarray(grad_out, dtype=np.float64) * np.asarray(f(point), dtype=np.float64)))

    numeric = np.zeros(len(coords))
    expected = np.zeros(len(coords))
    for i, c in enumerate(coords):
        shifted = x.copy()
        shifted[c] = x[c] + step
        f_plus = objective(shifted)
        shifted[c] = x[c] - step
        f_minus = objective(shifted)
        numeric[i] = (f_plus - f_minus) / (2 * step)
        expected[i] = analytic[c]

    errors = np.abs(numeric - expected)
    if scale is None:
        scale = max(float(np.max(np.abs(expected), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    scale = max(scale, 1e-12)
    worst = int(np.argmax(errors)) if len(coords) else 0
    magnitude = np.maximum(np.abs(numeric), np.abs(expected))
    significant = magnitude > COORD_FLOOR * scale
    coord_errors = errors[significant] / magnitude[significant]

    report = FdCheckReport(
        max_rel_error=float(errors[worst] / scale) if len(coords) else 0.0,
        worst_coordinate=tuple(int(i) for i in coords[worst]) if len(coords) else (),
        step=step,
        precision="high" if x.dtype == np.float64 else "working",
        n_coordinates=len(coords),
        step_flagged=step > MAX_RELIABLE_STEP,
        max_coord_rel_error=float(coord_errors.max(initial=0.0)),
    )
    if report.step_flagged:
        logger.warning(f"Finite-difference step {step} exceeds {MAX_RELIABLE_STEP}; error estimate unreliable")
    logger.debug(f"FD check: {report}")
    return report


def selection_margin(scores: np.ndarray, k: int, excluded: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Gap between the k-th and (k+1)-th admissible score in each row

    A perturbation that moves scores by less than half the margin cannot
    change the selected set. Rows with only k candidates get +inf.

    Args:
        scores: (rows, n_b) scores
        k: Blocks selected per row
        excluded: Optional (rows, n_b) mask, True = not a candidate

    Returns:
        (rows,) margins
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if excluded is not None:
        scores = np.where(np.broadcast_to(excluded, scores.shape), -np.inf, scores)
    ordered = -np.sort(-scores, axis=-1)
    if ordered.shape[-1] <= k:
        return np.full(ordered.shape[0], np.inf)
    margin = ordered[:, k - 1] - ordered[:, k]
    return np.where(np.isneginf(ordered[:, k]), np.inf, margin)


def sample_coordinates(shape: Sequence[int], count: int, rng: np.random.Generator) -> list:
    """Up to `count` distinct random indices into an array of `shape`"""
    total = int(np.prod(shape))
    picks = rng.choice(total, size=min(count, total), replace=False)
    return [np.unravel_index(int(p), shape) for p in picks]

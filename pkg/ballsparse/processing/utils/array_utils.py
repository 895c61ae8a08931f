"""
Array utilities shared by the geometry, attention and training modules
Handles precision modes, seeded generators, integer rounding and masked pooling
"""

import math
import os
from contextlib import nullcontext
from typing import Optional, Tuple

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from ballsparse.config import PRECISIONS
from ballsparse.exceptions import InvalidArgumentError, ShapeError


def resolve_dtype(precision: str) -> np.dtype:
    """
    Map a precision mode name to a numpy dtype

    Args:
        precision: "working" (32-bit) or "high" (64-bit)

    Returns:
        numpy dtype
    """
    if precision not in PRECISIONS:
        raise InvalidArgumentError(
            f"Unknown precision '{precision}', expected one of {sorted(PRECISIONS)}"
        )
    return np.dtype(PRECISIONS[precision])


def make_rng(seed: Optional[int]) -> np.random.Generator:
    """Seeded PCG64 generator"""
    return np.random.default_rng(seed)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def round_up(a: int, multiple: int) -> int:
    """Smallest multiple of `multiple` that is >= a"""
    return ceil_div(a, multiple) * multiple


def lcm(a: int, b: int) -> int:
    return a * b // math.gcd(a, b)


def pad_rows(x: np.ndarray, n_rows: int, fill: float = 0.0) -> np.ndarray:
    """
    Pad the second-to-last axis of x to n_rows

    Args:
        x: Array (..., n, C)
        n_rows: Target row count (>= n)
        fill: Value for appended rows

    Returns:
        Array (..., n_rows, C)
    """
    n = x.shape[-2]
    if n_rows < n:
        raise ShapeError(f"Cannot pad {n} rows down to {n_rows}")
    if n_rows == n:
        return x
    pad_width = [(0, 0)] * x.ndim
    pad_width[-2] = (0, n_rows - n)
    return np.pad(x, pad_width, mode="constant", constant_values=fill)


def masked_row_pool(
    x: np.ndarray,
    size: int,
    valid: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean-pool consecutive runs of `size` rows, averaging over valid rows only

    Rows beyond a multiple of `size` are treated as invalid padding.

    Args:
        x: Array (..., n, C)
        size: Run length (>= 1)
        valid: Optional boolean row mask of length n

    Returns:
        Tuple of (pooled (..., ceil(n/size), C), run_valid (ceil(n/size),),
        weights (ceil(n/size), size) giving each row's share of its run mean)
    """
    if size < 1:
        raise InvalidArgumentError(f"Pool size must be >= 1, got {size}")

    n = x.shape[-2]
    n_runs = ceil_div(n, size)
    n_full = n_runs * size

    if valid is None:
        valid = np.ones(n, dtype=bool)
    elif valid.shape != (n,):
        raise ShapeError(f"Row mask shape {valid.shape} does not match {n} rows")

    valid_full = np.zeros(n_full, dtype=bool)
    valid_full[:n] = valid
    valid_runs = valid_full.reshape(n_runs, size)

    counts = valid_runs.sum(axis=1)
    run_valid = counts > 0
    weights = np.where(
        valid_runs, 1.0 / np.maximum(counts, 1)[:, None], 0.0
    ).astype(x.dtype)

    x_full = pad_rows(x, n_full)
    blocks = x_full.reshape(*x.shape[:-2], n_runs, size, x.shape[-1])
    pooled = np.einsum("...rsc,rs->...rc", blocks, weights)

    return pooled, run_valid, weights


def unpool_rows(grad_pooled: np.ndarray, weights: np.ndarray, n: int) -> np.ndarray:
    """
    Backward of masked_row_pool

    Args:
        grad_pooled: Gradient wrt pooled output (..., n_runs, C)
        weights: Weights returned by masked_row_pool (n_runs, size)
        n: Original row count

    Returns:
        Gradient wrt the input rows (..., n, C)
    """
    n_runs, size = weights.shape
    grad_blocks = grad_pooled[..., :, None, :] * weights[:, :, None]
    grad_full = grad_blocks.reshape(*grad_pooled.shape[:-2], n_runs * size, grad_pooled.shape[-1])
    return grad_full[..., :n, :]


def blas_threads(threads: Optional[int]):
    """Context limiting BLAS / OpenMP pools to `threads` (no limit when None)"""
    if threads is None:
        return nullcontext()
    if threads < 1:
        raise InvalidArgumentError(f"threads must be >= 1, got {threads}")
    return threadpool_limits(limits=threads)


def blas_thread_count() -> int:
    """Threads the loaded BLAS pools currently use (CPU count if none is loaded)"""
    counts = [pool["num_threads"] for pool in threadpool_info() if pool.get("user_api") == "blas"]
    return max(counts) if counts else (os.cpu_count() or 1)

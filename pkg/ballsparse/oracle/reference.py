"""
Loop-based reference attention at 64-bit precision
Dense, block-diagonal (per ball) and gather-then-dense (per selected block set)
"""

import logging
from typing import Optional, Sequence

import numpy as np

from ballsparse.exceptions import FullyMaskedError, ShapeError

logger = logging.getLogger(__name__)


def dense_reference(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    bias: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """
    softmax(QK^T / sqrt(d) + B) V, one query and one key at a time

    Args:
        q: (n, d) queries
        k: (m, d) keys
        v: (m, dv) values
        bias: Optional (n, m) additive bias; -inf entries are masked
        mask: Optional (n, m) or (m,) keep-mask, False = masked

    Returns:
        (n, dv) float64 output
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("dense_reference works on 2-D operands")
    n, d = q.shape
    m = k.shape[0]
    scale = 1.0 / np.sqrt(d)

    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (n, m))
    if bias is not None:
        bias = np.broadcast_to(np.asarray(bias, dtype=np.float64), (n, m))

    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        keys = []
        scores = []
        for j in range(m):
            if mask is not None and not mask[i, j]:
                continue
            s = float(np.dot(q[i], k[j])) * scale
            if bias is not None:
                if np.isneginf(bias[i, j]):
                    continue
                s += float(bias[i, j])
            keys.append(j)
            scores.append(s)
        if not keys:
            raise FullyMaskedError(f"Reference row {i} has no admissible key")

        top = max(scores)
        weights = [np.exp(s - top) for s in scores]
        total = sum(weights)
        for j, w in zip(keys, weights):
            out[i] += (w / total) * v[j]
    return out


def ball_block_reference(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    ball_size: int,
    valid: Optional[np.ndarray] = None
) -> np.ndarray:
    """
    Dense attention within consecutive row blocks of ball_size

    Args:
        q, k, v: (N_pad, d) tree-ordered rows
        ball_size: Rows per ball
        valid: Optional (N_pad,) row validity; padded keys are masked, padded queries zeroed

    Returns:
        (N_pad, dv) float64 output
    """
    n = q.shape[0]
    if n % ball_size:
        raise ShapeError(f"{n} rows do not split into balls of {ball_size}")
    if valid is None:
        valid = np.ones(n, dtype=bool)

    out = np.zeros((n, v.shape[1]))
    for start in range(0, n, ball_size):
        rows = slice(start, start + ball_size)
        out[rows] = dense_reference(q[rows], k[rows], v[rows], mask=valid[rows])
    out[~valid] = 0.0
    return out


def gather_then_dense_reference(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    indices: Sequence[Sequence[int]],
    group_size: int,
    block_len: int,
    valid: Optional[np.ndarray] = None
) -> np.ndarray:
    """
    For each query group, materialize the keys of its selected blocks and attend densely

    Args:
        q, k, v: (N_pad, d) tree-ordered rows
        indices: Per-group selected block indices
        group_size: Queries per group
        block_len: Tokens per block
        valid: Optional (N_pad,) row validity

    Returns:
        (N_pad, dv) float64 output
    """
    n = q.shape[0]
    if valid is None:
        valid = np.ones(n, dtype=bool)

    out = np.zeros((n, v.shape[1]))
    for p, blocks in enumerate(indices):
        tokens = [b * block_len + offset for b in blocks for offset in range(block_len)]
        rows = slice(p * group_size, (p + 1) * group_size)
        out[rows] = dense_reference(q[rows], k[tokens], v[tokens], mask=valid[tokens])
    out[~valid] = 0.0
    return out


def brute_force_topk(scores: Sequence[float], k: int, excluded: Optional[Sequence[bool]] = None) -> np.ndarray:
    """
    k highest admissible scores by a full stable sort (ties to the lower index)

    Returns:
        Ascending int64 indices
    """
    n = len(scores)
    if excluded is None:
        excluded = [False] * n
    candidates = [j for j in range(n) if not excluded[j]]
    ranked = sorted(candidates, key=lambda j: -float(scores[j]))
    return np.array(sorted(ranked[:k]), dtype=np.int64)

"""
The three sparse attention branches in ball-tree order
Block compression, grouped top-k block selection with ball masking, and
attention restricted to each ball
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from ballsparse.exceptions import (
    FullyMaskedError,
    InvalidArgumentError,
    InvalidConfigError,
    InvariantViolation,
    ShapeError,
)
from ballsparse.processing.geom.ball_tree import BallTree
from ballsparse.processing.utils.array_utils import ceil_div, masked_row_pool, pad_rows, unpool_rows
from .core import AttendWorkspace, attend, attend_vjp, silu, silu_grad
from .params import BsaConfig, PhiWeights

logger = logging.getLogger(__name__)

# Query rows scored per chunk when building per-token selection plans
SCORE_CHUNK_ROWS = 4096

UNITS = ("query", "group", "coarse-group")


@dataclass
class CompressWorkspace:
    """Intermediates of compress_blocks for the backward pass"""
    kind: str
    n_rows: int
    block_len: int
    weights: Optional[np.ndarray] = None  # mean pooling weights
    flat: Optional[np.ndarray] = None
    hidden_pre: Optional[np.ndarray] = None
    hidden: Optional[np.ndarray] = None
    row_valid: Optional[np.ndarray] = None


@dataclass
class SelectionPlan:
    """
    Selected blocks per query group

    Attributes:
        indices: (n_groups, k) ascending block indices per group
        group_size: Consecutive tree-ordered queries sharing one row of indices
        block_len: Tokens per block
        excluded: (n_groups, n_blocks) candidate mask that was applied (True = excluded), if kept
        scores: (n_groups, n_blocks) head-summed scores the selection ran on, if kept
    """
    indices: np.ndarray
    group_size: int
    block_len: int
    excluded: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None

    @property
    def n_groups(self) -> int:
        return self.indices.shape[0]

    @property
    def top_k(self) -> int:
        return self.indices.shape[1]

    def blocks_for_slot(self, slot: int) -> np.ndarray:
        return self.indices[slot // self.group_size]

    def token_index(self) -> np.ndarray:
        """(n_groups, k * block_len) tree-ordered slots gathered by each group"""
        offsets = np.arange(self.block_len)
        tokens = self.indices[:, :, None] * self.block_len + offsets
        return tokens.reshape(self.n_groups, -1)


@dataclass
class SelectionWorkspace:
    attend: AttendWorkspace
    token_index: np.ndarray
    row_valid: np.ndarray
    n_rows: int


@dataclass
class MaskedAttendWorkspace:
    """attend() workspace plus the reshaping needed to undo it"""
    attend: AttendWorkspace
    row_valid: Optional[np.ndarray]
    n_rows: int
    block_len: int = 1


def compress_blocks(
    t: np.ndarray,
    block_len: int,
    phi: PhiWeights,
    valid: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray, CompressWorkspace]:
    """
    Map each block of block_len consecutive rows to one coarse token

    Mean pooling averages valid rows only; the MLP compressor sees padded rows
    as zeros. Blocks without a valid row are flagged in the returned mask.

    Args:
        t: (..., N_pad, d) tree-ordered tokens
        block_len: Rows per block (l >= 1)
        phi: Compressor weights
        valid: Optional (N_pad,) row validity

    Returns:
        Tuple of (coarse (..., ceil(N_pad/l), d), coarse_valid (ceil(N_pad/l),), workspace)
    """
    if block_len < 1:
        raise InvalidArgumentError(f"block_len must be >= 1, got {block_len}")
    n = t.shape[-2]
    if valid is None:
        valid = np.ones(n, dtype=bool)

    if phi.kind == "mean":
        pooled, coarse_valid, weights = masked_row_pool(t, block_len, valid)
        workspace = CompressWorkspace(kind="mean", n_rows=n, block_len=block_len, weights=weights)
        return pooled, coarse_valid, workspace

    d = t.shape[-1]
    n_blocks = ceil_div(n, block_len)
    if phi.w1.shape[0] != block_len * d:
        raise ShapeError(
            f"MLP compressor expects blocks of {phi.w1.shape[0]} values, got {block_len}x{d}"
        )

    masked = pad_rows(t * valid[:, None], n_blocks * block_len)
    flat = masked.reshape(*t.shape[:-2], n_blocks, block_len * d)
    hidden_pre = flat @ phi.w1
    hidden = silu(hidden_pre)
    coarse = hidden @ phi.w2

    valid_full = np.zeros(n_blocks * block_len, dtype=bool)
    valid_full[:n] = valid
    coarse_valid = valid_full.reshape(n_blocks, block_len).any(axis=1)

    workspace = CompressWorkspace(
        kind="mlp",
        n_rows=n,
        block_len=block_len,
        flat=flat,
        hidden_pre=hidden_pre,
        hidden=hidden,
        row_valid=valid,
    )
    return coarse, coarse_valid, workspace


def compress_blocks_vjp(
    workspace: CompressWorkspace,
    phi: PhiWeights,
    grad_coarse: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Backward of compress_blocks

    Returns:
        Tuple of (grad_t, {"w1": ..., "w2": ...} for the MLP compressor, else {})
    """
    if workspace.kind == "mean":
        return unpool_rows(grad_coarse, workspace.weights, workspace.n_rows), {}

    hidden = workspace.hidden
    grad_w2 = hidden.reshape(-1, hidden.shape[-1]).T @ grad_coarse.reshape(-1, grad_coarse.shape[-1])
    grad_pre = (grad_coarse @ phi.w2.T) * silu_grad(workspace.hidden_pre)
    flat = workspace.flat
    grad_w1 = flat.reshape(-1, flat.shape[-1]).T @ grad_pre.reshape(-1, grad_pre.shape[-1])
    grad_flat = grad_pre @ phi.w1.T

    d = flat.shape[-1] // workspace.block_len
    grad_rows = grad_flat.reshape(*flat.shape[:-2], -1, d)[..., :workspace.n_rows, :]
    grad_rows = grad_rows * workspace.row_valid[:, None]
    return grad_rows, {"w1": grad_w1, "w2": grad_w2}


def compressed_attention(
    q: np.ndarray,
    kc: np.ndarray,
    vc: np.ndarray,
    coarse_valid: np.ndarray,
    keep_workspace: bool = True,
    chunk_rows: Optional[int] = None
) -> Tuple[np.ndarray, Optional[MaskedAttendWorkspace]]:
    """
    Every query attends to every valid coarse token

    Args:
        q: (H, N_pad, d) queries
        kc, vc: (H, n_blocks, d) coarse keys / values
        coarse_valid: (n_blocks,) coarse token validity

    Returns:
        Tuple of (output (H, N_pad, d), workspace)
    """
    if not np.any(coarse_valid):
        raise FullyMaskedError("Every coarse token is masked")
    out, ws = attend(
        q, kc, vc, mask=coarse_valid[None, :], keep_workspace=keep_workspace, chunk_rows=chunk_rows
    )
    if not keep_workspace:
        return out, None
    return out, MaskedAttendWorkspace(attend=ws, row_valid=None, n_rows=q.shape[-2])


def compressed_attention_vjp(
    workspace: MaskedAttendWorkspace,
    grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_q, grad_kc, grad_vc, _ = attend_vjp(workspace.attend, grad_out)
    return grad_q, grad_kc, grad_vc


def group_compressed_attention(
    qc: np.ndarray,
    kc: np.ndarray,
    vc: np.ndarray,
    coarse_valid: np.ndarray,
    block_len: int,
    n_rows: int,
    keep_workspace: bool = True,
    chunk_rows: Optional[int] = None
) -> Tuple[np.ndarray, Optional[MaskedAttendWorkspace]]:
    """
    Compressed attention at coarse query resolution, each output repeated block_len times

    Args:
        qc: (H, n_blocks, d) coarse queries
        kc, vc: (H, n_blocks, d) coarse keys / values
        coarse_valid: (n_blocks,) coarse key validity
        block_len: Repeat factor l
        n_rows: Token rows to emit (N_pad)

    Returns:
        Tuple of (output (H, n_rows, d), workspace)
    """
    if not np.any(coarse_valid):
        raise FullyMaskedError("Every coarse token is masked")
    coarse_out, ws = attend(
        qc, kc, vc, mask=coarse_valid[None, :], keep_workspace=keep_workspace, chunk_rows=chunk_rows
    )
    out = np.repeat(coarse_out, block_len, axis=-2)[..., :n_rows, :]
    if not keep_workspace:
        return out, None
    return out, MaskedAttendWorkspace(attend=ws, row_valid=None, n_rows=n_rows, block_len=block_len)


def group_compressed_attention_vjp(
    workspace: MaskedAttendWorkspace,
    grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Backward of group_compressed_attention

    Returns:
        Tuple of (grad_qc, grad_kc, grad_vc)
    """
    n_coarse = workspace.attend.out_shape[-2]
    ell = workspace.block_len
    grad_full = pad_rows(grad_out, n_coarse * ell)
    grad_coarse = grad_full.reshape(*grad_out.shape[:-2], n_coarse, ell, grad_out.shape[-1]).sum(axis=-2)
    grad_qc, grad_kc, grad_vc, _ = attend_vjp(workspace.attend, grad_coarse)
    return grad_qc, grad_kc, grad_vc


def importance_scores(qs: np.ndarray, kc: np.ndarray) -> np.ndarray:
    """
    Raw dot-product importance of each coarse key for each (possibly coarse) query

    Args:
        qs: (..., n_q, d) queries
        kc: (..., n_b, d) coarse keys

    Returns:
        (..., n_q, n_b) unscaled scores
    """
    if qs.shape[-1] != kc.shape[-1]:
        raise ShapeError(f"Query width {qs.shape[-1]} differs from key width {kc.shape[-1]}")
    return qs @ np.swapaxes(kc, -1, -2)


def group_average_scores(scores: np.ndarray, group_size: int, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Average score rows within contiguous query groups (valid rows only)

    Args:
        scores: (..., N_pad, n_b) per-query scores
        group_size: Queries per group g
        valid: Optional (N_pad,) query validity

    Returns:
        (..., ceil(N_pad/g), n_b) group scores
    """
    return masked_row_pool(scores, group_size, valid)[0]


def pool_group_queries(q: np.ndarray, group_size: int, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Mean of the (valid) queries in each contiguous group

    Args:
        q: (..., N_pad, d) queries
        group_size: Queries per group g
        valid: Optional (N_pad,) query validity

    Returns:
        (..., ceil(N_pad/g), d) pooled queries
    """
    return masked_row_pool(q, group_size, valid)[0]


def unit_balls(tree: BallTree, unit_size: int) -> np.ndarray:
    """
    Ball index of every query unit of unit_size consecutive slots

    Raises InvalidConfigError when a unit straddles a ball boundary.
    """
    if tree.n_padded % unit_size:
        raise InvalidConfigError(
            f"Unit size {unit_size} does not divide N_pad={tree.n_padded}"
        )
    starts = np.arange(tree.n_padded // unit_size) * unit_size
    first = starts // tree.ball_size
    last = (starts + unit_size - 1) // tree.ball_size
    if np.any(first != last):
        raise InvalidConfigError(
            f"Units of {unit_size} slots straddle balls of size {tree.ball_size}"
        )
    return first


def block_balls(tree: BallTree, block_len: int) -> np.ndarray:
    """Ball index of every block (blocks must not straddle balls)"""
    if tree.ball_size % block_len:
        raise InvalidConfigError(
            f"Ball size {tree.ball_size} is not divisible by block_len {block_len}"
        )
    n_blocks = ceil_div(tree.n_padded, block_len)
    return (np.arange(n_blocks) * block_len) // tree.ball_size


def ball_block_mask(
    tree: BallTree,
    block_len: int,
    unit: str = "query",
    group_size: int = 1,
    enabled: bool = True,
    rows: Optional[slice] = None
) -> np.ndarray:
    """
    Blocks lying inside the ball of each query unit

    Args:
        tree: Ball tree
        block_len: Tokens per block
        unit: "query" (1 slot), "group" (group_size slots) or "coarse-group" (block_len slots)
        group_size: Group size for unit="group"
        enabled: False returns an all-False mask
        rows: Optional slice of units to return

    Returns:
        (n_units, n_blocks) boolean matrix, True = block excluded for that unit
    """
    if unit not in UNITS:
        raise InvalidArgumentError(f"Unknown unit '{unit}', expected one of {UNITS}")
    size = {"query": 1, "group": group_size, "coarse-group": block_len}[unit]
    blocks = block_balls(tree, block_len)
    units = unit_balls(tree, size)
    if rows is not None:
        units = units[rows]
    if not enabled:
        return np.zeros((len(units), len(blocks)), dtype=bool)
    return units[:, None] == blocks[None, :]


def select_topk(
    scores: np.ndarray,
    k: int,
    excluded: Optional[np.ndarray] = None,
    prefer_low_index: bool = True
) -> np.ndarray:
    """
    Indices of the k largest admissible scores, ascending

    Ties at the selection boundary go to the lowest block index.

    Args:
        scores: (n_b,) or (rows, n_b) scores
        k: Number of blocks to keep
        excluded: Optional boolean mask of the same shape, True = not a candidate
        prefer_low_index: Tie rule; False flips it (verification hook only)

    Returns:
        (k,) or (rows, k) int64 block indices sorted ascending
    """
    scores = np.asarray(scores)
    single = scores.ndim == 1
    scores = np.atleast_2d(scores)
    rows, n_b = scores.shape

    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    if np.isnan(scores).any():
        raise InvalidArgumentError("Selection scores contain NaN")

    if excluded is None:
        excluded = np.zeros_like(scores, dtype=bool)
    else:
        excluded = np.broadcast_to(np.atleast_2d(excluded), scores.shape)

    candidates = (~excluded).sum(axis=-1)
    if np.any(candidates < k):
        raise InvalidConfigError(
            f"top_k={k} exceeds the candidate count ({int(candidates.min())}) of some row"
        )

    work = np.where(excluded, -np.inf, scores.astype(np.float64))
    if not prefer_low_index:
        work = work[:, ::-1]

    kth = np.partition(work, n_b - k, axis=-1)[:, n_b - k:n_b - k + 1]
    above = work > kth
    ties = work == kth
    needed = k - above.sum(axis=-1, keepdims=True)
    chosen = above | (ties & (np.cumsum(ties, axis=-1) <= needed))

    if not prefer_low_index:
        chosen = chosen[:, ::-1]

    indices = np.nonzero(chosen)[1].reshape(rows, k).astype(np.int64)
    return indices[0] if single else indices


def _row_chunks(n_rows: int, multiple: int) -> Iterator[slice]:
    step = max(multiple, (SCORE_CHUNK_ROWS // multiple) * multiple)
    for start in range(0, n_rows, step):
        yield slice(start, min(start + step, n_rows))


def build_selection_plan(
    q: np.ndarray,
    kc: np.ndarray,
    coarse_valid: np.ndarray,
    tree: BallTree,
    config: BsaConfig,
    qc: Optional[np.ndarray] = None,
    coarse_query_valid: Optional[np.ndarray] = None,
    keep_scores: bool = True,
    prefer_low_index: bool = True
) -> SelectionPlan:
    """
    Choose the top-k key blocks for every query group

    Scores are summed over heads so all heads share one plan. With group
    selection and query coarsening the coarse similarity matrix is mapped onto
    groups (mean of covered coarse rows when g >= l, the containing coarse row
    when g < l); with group selection alone per-token scores are averaged within
    groups; otherwise every token selects on its own.

    Args:
        q: (H, N_pad, d) queries
        kc: (H, n_blocks, d) coarse keys
        coarse_valid: (n_blocks,) coarse key validity
        tree: Ball tree (defines ball membership for masking)
        config: Layer configuration
        qc: (H, n_blocks, d) coarse queries (required with query coarsening)
        coarse_query_valid: (n_blocks,) coarse query validity
        keep_scores: Retain scores and candidate masks on the plan
        prefer_low_index: Tie rule passed to select_topk

    Returns:
        SelectionPlan
    """
    ell = config.block_len
    n_pad = tree.n_padded
    valid = tree.valid_mask

    if config.group_selection:
        g = config.group_size
        ball_mask = ball_block_mask(tree, ell, "group", group_size=g, enabled=config.ball_masking)
        if config.query_coarsening:
            if qc is None:
                raise InvariantViolation("Query coarsening requested without coarse queries")
            coarse = importance_scores(qc, kc).sum(axis=0)
            if g >= ell:
                group_scores = masked_row_pool(coarse, g // ell, coarse_query_valid)[0]
            else:
                group_scores = np.repeat(coarse, ell // g, axis=0)
        else:
            parts = []
            for rows in _row_chunks(n_pad, g):
                token_scores = importance_scores(q[:, rows], kc).sum(axis=0)
                parts.append(group_average_scores(token_scores, g, valid[rows]))
            group_scores = np.concatenate(parts, axis=0)
        indices, excluded = _select_rows(group_scores, ball_mask, coarse_valid, config, prefer_low_index)
        plan_scores = group_scores
    else:
        g = 1
        index_parts, excluded_parts, score_parts = [], [], []
        for rows in _row_chunks(n_pad, 1):
            token_scores = importance_scores(q[:, rows], kc).sum(axis=0)
            ball_mask = ball_block_mask(tree, ell, "query", enabled=config.ball_masking, rows=rows)
            idx, excl = _select_rows(token_scores, ball_mask, coarse_valid, config, prefer_low_index)
            index_parts.append(idx)
            if keep_scores:
                excluded_parts.append(excl)
                score_parts.append(token_scores)
        indices = np.concatenate(index_parts, axis=0)
        excluded = np.concatenate(excluded_parts, axis=0) if keep_scores else None
        plan_scores = np.concatenate(score_parts, axis=0) if keep_scores else None

    return SelectionPlan(
        indices=indices,
        group_size=g,
        block_len=ell,
        excluded=excluded if keep_scores else None,
        scores=plan_scores if keep_scores else None,
    )


def _select_rows(
    scores: np.ndarray,
    ball_mask: np.ndarray,
    coarse_valid: np.ndarray,
    config: BsaConfig,
    prefer_low_index: bool
) -> Tuple[np.ndarray, np.ndarray]:
    excluded = ball_mask | ~coarse_valid[None, :]
    indices = select_topk(scores, config.top_k, excluded, prefer_low_index=prefer_low_index)

    # mask soundness
    if np.any(np.take_along_axis(excluded, indices, axis=-1)):
        raise InvariantViolation("Selected a block excluded by the ball mask")
    return indices, excluded


def gather_selected(
    k: np.ndarray,
    v: np.ndarray,
    plan: SelectionPlan,
    valid: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Concatenate the token rows of each group's selected blocks

    Args:
        k, v: (H, N_pad, d) keys / values
        plan: Selection plan
        valid: Optional (N_pad,) token validity

    Returns:
        Tuple of (k_sel (H, G, k*l, d), v_sel (H, G, k*l, d),
        token_valid (G, k*l), token_index (G, k*l))
    """
    n_pad = k.shape[-2]
    token_index = plan.token_index()
    if token_index.size and (token_index.min() < 0 or token_index.max() >= n_pad):
        raise InvariantViolation(
            f"Selected token index outside [0, {n_pad}): {token_index.min()}..{token_index.max()}"
        )
    if valid is None:
        valid = np.ones(n_pad, dtype=bool)
    return k[:, token_index], v[:, token_index], valid[token_index], token_index


def selection_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    plan: SelectionPlan,
    valid: Optional[np.ndarray] = None,
    keep_workspace: bool = True
) -> Tuple[np.ndarray, Optional[SelectionWorkspace]]:
    """
    Each query attends over the tokens its group selected

    Args:
        q, k, v: (H, N_pad, d) tree-ordered projections
        plan: Selection plan covering all N_pad / group_size groups
        valid: Optional (N_pad,) token validity

    Returns:
        Tuple of (output (H, N_pad, d) with zero rows at padded queries, workspace)
    """
    heads, n_pad, d = q.shape
    g = plan.group_size
    if plan.n_groups * g != n_pad:
        raise ShapeError(
            f"Plan covers {plan.n_groups} groups of {g}, but there are {n_pad} queries"
        )
    if valid is None:
        valid = np.ones(n_pad, dtype=bool)

    k_sel, v_sel, token_valid, token_index = gather_selected(k, v, plan, valid)
    q_groups = q.reshape(heads, plan.n_groups, g, d)
    out_groups, ws = attend(
        q_groups, k_sel, v_sel,
        mask=token_valid[None, :, None, :],
        keep_workspace=keep_workspace,
    )
    out = out_groups.reshape(heads, n_pad, v.shape[-1]) * valid[:, None]

    if not keep_workspace:
        return out, None
    return out, SelectionWorkspace(attend=ws, token_index=token_index, row_valid=valid, n_rows=n_pad)


def selection_attention_vjp(
    workspace: SelectionWorkspace,
    grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Backward of selection_attention with the block choice held fixed

    Returns:
        Tuple of (grad_q, grad_k, grad_v), each (H, N_pad, d)
    """
    heads, n_pad, d = grad_out.shape
    grad_out = grad_out * workspace.row_valid[:, None]
    grad_groups = grad_out.reshape(workspace.attend.out_shape)
    grad_q, grad_k_sel, grad_v_sel, _ = attend_vjp(workspace.attend, grad_groups)

    flat_index = workspace.token_index.ravel()
    grad_k = np.zeros((heads, n_pad, grad_k_sel.shape[-1]), dtype=grad_k_sel.dtype)
    grad_v = np.zeros((heads, n_pad, grad_v_sel.shape[-1]), dtype=grad_v_sel.dtype)
    np.add.at(grad_k, (slice(None), flat_index), grad_k_sel.reshape(heads, -1, grad_k_sel.shape[-1]))
    np.add.at(grad_v, (slice(None), flat_index), grad_v_sel.reshape(heads, -1, grad_v_sel.shape[-1]))

    return grad_q.reshape(heads, n_pad, d), grad_k, grad_v


def ball_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    tree: BallTree,
    keep_workspace: bool = True,
    chunk_rows: Optional[int] = None
) -> Tuple[np.ndarray, Optional[MaskedAttendWorkspace]]:
    """
    Independent dense attention inside every ball

    Args:
        q, k, v: (H, N_pad, d) tree-ordered projections
        tree: Ball tree defining the balls and padded slots
        keep_workspace: Retain intermediates for the backward pass
        chunk_rows: Query chunking for forward-only runs

    Returns:
        Tuple of (output (H, N_pad, d) with zero rows at padded queries, workspace)
    """
    heads, n_pad, d = q.shape
    m = tree.ball_size
    if n_pad != tree.n_padded or n_pad % m:
        raise ShapeError(f"{n_pad} rows do not match the tree's {tree.n_padded} slots of ball size {m}")

    n_balls = n_pad // m
    key_valid = tree.valid_mask.reshape(n_balls, m)
    out_balls, ws = attend(
        q.reshape(heads, n_balls, m, d),
        k.reshape(heads, n_balls, m, d),
        v.reshape(heads, n_balls, m, v.shape[-1]),
        mask=key_valid[None, :, None, :],
        keep_workspace=keep_workspace,
        chunk_rows=chunk_rows,
    )
    out = out_balls.reshape(heads, n_pad, v.shape[-1]) * tree.valid_mask[:, None]

    if not keep_workspace:
        return out, None
    return out, MaskedAttendWorkspace(attend=ws, row_valid=tree.valid_mask, n_rows=n_pad)


def ball_attention_vjp(
    workspace: MaskedAttendWorkspace,
    grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Backward of ball_attention

    Returns:
        Tuple of (grad_q, grad_k, grad_v), each (H, N_pad, d)
    """
    heads, n_pad, d = grad_out.shape
    grad_out = grad_out * workspace.row_valid[:, None]
    grad_q, grad_k, grad_v, _ = attend_vjp(workspace.attend, grad_out.reshape(workspace.attend.out_shape))
    return (
        grad_q.reshape(heads, n_pad, -1),
        grad_k.reshape(heads, n_pad, -1),
        grad_v.reshape(heads, n_pad, -1),
    )

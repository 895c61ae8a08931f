"""
Dense attention primitives with exact reverse-mode derivatives
Scaled dot-product attention with additive bias / key masks, multi-head
projections, RMSNorm and SwiGLU
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from ballsparse.config import ATTENTION_CONSTANTS
from ballsparse.exceptions import (
    FullyMaskedError,
    InvalidArgumentError,
    ShapeError,
    StaleWorkspaceError,
)

logger = logging.getLogger(__name__)

MASK_VALUE = ATTENTION_CONSTANTS["mask_value"]
RMSNORM_EPS = ATTENTION_CONSTANTS["rmsnorm_eps"]


@dataclass
class ProjectionWeights:
    """
    Query/key/value (and output) projections for H heads

    Attributes:
        w_q, w_k, w_v: (C, H * d_k) matrices, head h owns columns h*d_k:(h+1)*d_k
        w_o: Optional (H * d_k, C) output projection
        heads: Head count H
    """
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: Optional[np.ndarray] = None
    heads: int = 1

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1 or self.w_q.ndim != 2:
            raise ShapeError(f"Q/K/V projections must share one 2-D shape, got {shapes}")
        if self.w_q.shape[1] % self.heads:
            raise ShapeError(
                f"Projection width {self.w_q.shape[1]} not divisible by {self.heads} heads"
            )
        if self.w_o is not None and self.w_o.shape != (self.w_q.shape[1], self.w_q.shape[0]):
            raise ShapeError(
                f"Output projection must be {(self.w_q.shape[1], self.w_q.shape[0])}, got {self.w_o.shape}"
            )

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.heads


@dataclass
class AttendWorkspace:
    """Intermediates of one attend() call, consumed by attend_vjp()"""
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    scale: float
    bias_shape: Optional[Tuple[int, ...]]
    out_shape: Tuple[int, ...]


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(n, H*d) -> (H, n, d)"""
    n, width = x.shape
    return x.reshape(n, heads, width // heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(H, n, d) -> (n, H*d)"""
    heads, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * d)


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"Cannot multiply {x.shape} by {w.shape}")
    return x @ w


def linear_vjp(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Backward of linear

    Returns:
        Tuple of (grad_x, grad_w)
    """
    grad_x = grad_out @ w.T
    grad_w = x.reshape(-1, x.shape[-1]).T @ grad_out.reshape(-1, grad_out.shape[-1])
    return grad_x, grad_w


def project_qkv(x: np.ndarray, weights: ProjectionWeights) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Project rows into per-head queries, keys and values

    Args:
        x: (n, C) input rows
        weights: Projection weights

    Returns:
        Tuple of (Q, K, V), each (H, n, d_k)
    """
    if x.ndim != 2 or x.shape[1] != weights.w_q.shape[0]:
        raise ShapeError(f"Input {x.shape} does not match projection {weights.w_q.shape}")
    heads = weights.heads
    return (
        split_heads(x @ weights.w_q, heads),
        split_heads(x @ weights.w_k, heads),
        split_heads(x @ weights.w_v, heads),
    )


def project_qkv_vjp(
    x: np.ndarray,
    weights: ProjectionWeights,
    grad_q: np.ndarray,
    grad_k: np.ndarray,
    grad_v: np.ndarray
) -> Tuple[np.ndarray, dict]:
    """
    Backward of project_qkv

    Returns:
        Tuple of (grad_x, {"w_q": ..., "w_k": ..., "w_v": ...})
    """
    grad_x = np.zeros_like(x)
    grads = {}
    for name, w, g in (("w_q", weights.w_q, grad_q), ("w_k", weights.w_k, grad_k), ("w_v", weights.w_v, grad_v)):
        gx, gw = linear_vjp(x, w, merge_heads(g))
        grad_x += gx
        grads[name] = gw
    return grad_x, grads


def attend(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    bias: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
    keep_workspace: bool = True,
    chunk_rows: Optional[int] = None
) -> Tuple[np.ndarray, Optional[AttendWorkspace]]:
    """
    Scaled dot-product attention softmax(QK^T / sqrt(d) + B) V

    Args:
        q: (..., n, d) queries
        k: (..., m, d) keys
        v: (..., m, dv) values
        bias: Optional additive bias broadcastable to (..., n, m); -inf entries are masked
        mask: Optional boolean keep-mask broadcastable to (..., n, m), False = excluded
        keep_workspace: Retain intermediates for attend_vjp
        chunk_rows: Process queries in chunks of this many rows (forward only)

    Returns:
        Tuple of (output (..., n, dv), workspace or None)
    """
    d = q.shape[-1]
    if d < 1:
        raise InvalidArgumentError("Attention head dimension must be >= 1")
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"Incompatible attention operands q={q.shape} k={k.shape} v={v.shape}")

    n, m = q.shape[-2], k.shape[-2]
    scale = 1.0 / np.sqrt(d)

    allowed = None
    if mask is not None:
        allowed = np.asarray(mask, dtype=bool)
    if bias is not None:
        bias = np.asarray(bias)
        if np.any(np.isposinf(bias)):
            raise InvalidArgumentError("Attention bias must not contain +inf")
        if bias.shape[-1] != m or (bias.ndim >= 2 and bias.shape[-2] not in (1, n)):
            raise ShapeError(f"Bias shape {bias.shape} does not match scores ({n}, {m})")
        neg = np.isneginf(bias)
        if neg.any():
            allowed = ~neg if allowed is None else (allowed & ~neg)
            bias = np.where(neg, 0.0, bias).astype(q.dtype)

    if allowed is not None and not np.all(allowed.any(axis=-1)):
        raise FullyMaskedError("Attention row has every key masked")

    if chunk_rows is not None and not keep_workspace and n > chunk_rows:
        out = np.empty(q.shape[:-2] + (n, v.shape[-1]), dtype=np.result_type(q, v))
        for start in range(0, n, chunk_rows):
            rows = slice(start, start + chunk_rows)
            probs = _softmax_scores(
                q[..., rows, :], k, scale,
                _row_slice(bias, rows, n), _row_slice(allowed, rows, n)
            )
            out[..., rows, :] = probs @ v
        return out, None

    probs = _softmax_scores(q, k, scale, bias, allowed)
    out = probs @ v

    if not keep_workspace:
        return out, None

    workspace = AttendWorkspace(
        q=q,
        k=k,
        v=v,
        probs=probs,
        scale=scale,
        bias_shape=None if bias is None else bias.shape,
        out_shape=out.shape,
    )
    return out, workspace


def _row_slice(arr: Optional[np.ndarray], rows: slice, n: int) -> Optional[np.ndarray]:
    if arr is None or arr.ndim < 2 or arr.shape[-2] != n:
        return arr
    return arr[..., rows, :]


def _softmax_scores(
    q: np.ndarray,
    k: np.ndarray,
    scale: float,
    bias: Optional[np.ndarray],
    allowed: Optional[np.ndarray]
) -> np.ndarray:
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    if bias is not None:
        scores = scores + bias
    if allowed is not None:
        scores = np.where(allowed, scores, MASK_VALUE)
    # per-row max subtraction
    scores = scores - scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def attend_vjp(
    workspace: AttendWorkspace,
    grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Exact reverse-mode derivative of attend

    Args:
        workspace: Workspace returned by the matching attend() call
        grad_out: Gradient wrt the attention output

    Returns:
        Tuple of (grad_q, grad_k, grad_v, grad_bias or None)
    """
    if workspace is None:
        raise StaleWorkspaceError("attend() was run without keep_workspace")
    if grad_out.shape != workspace.out_shape:
        raise StaleWorkspaceError(
            f"Gradient shape {grad_out.shape} does not match workspace output {workspace.out_shape}"
        )

    probs = workspace.probs
    grad_v = np.swapaxes(probs, -1, -2) @ grad_out
    grad_probs = grad_out @ np.swapaxes(workspace.v, -1, -2)
    grad_scores = probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))

    grad_q = (grad_scores @ workspace.k) * workspace.scale
    grad_k = (np.swapaxes(grad_scores, -1, -2) @ workspace.q) * workspace.scale

    grad_bias = None
    if workspace.bias_shape is not None:
        grad_bias = sum_to_shape(grad_scores, workspace.bias_shape)

    return (
        sum_to_shape(grad_q, workspace.q.shape),
        sum_to_shape(grad_k, workspace.k.shape),
        sum_to_shape(grad_v, workspace.v.shape),
        grad_bias,
    )


def sum_to_shape(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to an operand's shape"""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    grad = grad.sum(axis=tuple(range(lead))) if lead > 0 else grad
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = RMSNORM_EPS) -> np.ndarray:
    """
    Root-mean-square normalization x / sqrt(mean(x^2) + eps) * gain

    Args:
        x: (n, C) rows
        gain: (C,) elementwise gain
        eps: Stabilizer for all-zero rows

    Returns:
        (n, C) normalized rows
    """
    if x.shape[-1] < 1 or gain.shape != (x.shape[-1],):
        raise ShapeError(f"Gain shape {gain.shape} does not match rows {x.shape}")
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv_rms * gain


def rmsnorm_vjp(
    x: np.ndarray,
    gain: np.ndarray,
    grad_out: np.ndarray,
    eps: float = RMSNORM_EPS
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Backward of rmsnorm

    Returns:
        Tuple of (grad_x, grad_gain)
    """
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    x_hat = x * inv_rms
    grad_gain = (grad_out * x_hat).reshape(-1, x.shape[-1]).sum(axis=0)
    grad_hat = grad_out * gain
    grad_x = inv_rms * (grad_hat - x_hat * np.mean(grad_hat * x_hat, axis=-1, keepdims=True))
    return grad_x, grad_gain


def silu(t: np.ndarray) -> np.ndarray:
    return t * expit(t)


def silu_grad(t: np.ndarray) -> np.ndarray:
    s = expit(t)
    return s * (1.0 + t * (1.0 - s))


def swiglu(x: np.ndarray, w1: np.ndarray, w2: np.ndarray, w3: np.ndarray) -> np.ndarray:
    """
    Gated feed-forward (silu(x w1) * (x w2)) w3

    Args:
        x: (n, C) rows
        w1, w2: (C, h) gate and value projections
        w3: (h, C) output projection

    Returns:
        (n, C) rows
    """
    if w1.shape != w2.shape or x.shape[-1] != w1.shape[0] or w3.shape != (w1.shape[1], w1.shape[0]):
        raise ShapeError(
            f"SwiGLU shapes inconsistent: x={x.shape} w1={w1.shape} w2={w2.shape} w3={w3.shape}"
        )
    return (silu(x @ w1) * (x @ w2)) @ w3


def swiglu_vjp(
    x: np.ndarray,
    w1: np.ndarray,
    w2: np.ndarray,
    w3: np.ndarray,
    grad_out: np.ndarray
) -> Tuple[np.ndarray, dict]:
    """
    Backward of swiglu

    Returns:
        Tuple of (grad_x, {"w1": ..., "w2": ..., "w3": ...})
    """
    a = x @ w1
    b = x @ w2
    s = silu(a)
    hidden = s * b

    grad_hidden = grad_out @ w3.T
    grad_a = grad_hidden * b * silu_grad(a)
    grad_b = grad_hidden * s

    grads = {
        "w1": x.T @ grad_a,
        "w2": x.T @ grad_b,
        "w3": hidden.T @ grad_out,
    }
    grad_x = grad_a @ w1.T + grad_b @ w2.T
    return grad_x, grads

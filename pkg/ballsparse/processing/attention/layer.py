"""
Ball Sparse Attention layer, transformer block and regression model
Gated fusion of the ball, compression and selection branches, with exact
backward passes and receptive-field analysis
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from ballsparse.exceptions import InvalidArgumentError, ShapeError
from ballsparse.processing.geom.ball_tree import (
    BallTree,
    PointCloud,
    build_ball_tree,
    permute_features,
    unpermute_features,
)
from .branches import (
    SelectionPlan,
    ball_attention,
    ball_attention_vjp,
    build_selection_plan,
    compress_blocks,
    compress_blocks_vjp,
    compressed_attention,
    compressed_attention_vjp,
    group_compressed_attention,
    group_compressed_attention_vjp,
    selection_attention,
    selection_attention_vjp,
)
from .core import (
    linear_vjp,
    merge_heads,
    project_qkv,
    project_qkv_vjp,
    rmsnorm,
    rmsnorm_vjp,
    split_heads,
    swiglu,
    swiglu_vjp,
)
from .params import BRANCH_NAMES, BsaConfig, BsaParams, GateParams, ModelParams

logger = logging.getLogger(__name__)


def _gate_weight(gamma: np.ndarray, ndim: int) -> np.ndarray:
    """sigma(gamma) shaped to broadcast over (H, n, d) or (n, d) branch outputs"""
    sig = expit(np.asarray(gamma, dtype=np.float64))
    if ndim == 3:
        return sig.reshape(-1, 1, 1)
    if sig.size != 1:
        raise ShapeError(f"Per-head gates of shape {sig.shape} need (H, n, d) branch outputs")
    return sig.reshape(1, 1)


def gate_fuse(
    attn_ball: Optional[np.ndarray],
    attn_cmp: Optional[np.ndarray],
    attn_slc: Optional[np.ndarray],
    gates: GateParams
) -> np.ndarray:
    """
    Sum of branch outputs weighted by sigmoid gates

    Args:
        attn_ball, attn_cmp, attn_slc: (H, N_pad, d) branch outputs, None for a disabled branch
        gates: Per-head gate logits

    Returns:
        (H, N_pad, d) fused output
    """
    outputs = {"ball": attn_ball, "cmp": attn_cmp, "slc": attn_slc}
    present = [(name, out) for name, out in outputs.items() if out is not None]
    if not present:
        raise InvalidArgumentError("gate_fuse needs at least one branch output")
    shape = present[0][1].shape
    if any(out.shape != shape for _, out in present):
        raise ShapeError(f"Branch outputs differ in shape: {[out.shape for _, out in present]}")

    fused = np.zeros(shape, dtype=present[0][1].dtype)
    for name, out in present:
        fused += (_gate_weight(gates.get(name), out.ndim) * out).astype(fused.dtype)
    return fused


def gate_fuse_vjp(
    branch_outputs: Dict[str, np.ndarray],
    gates: GateParams,
    grad_out: np.ndarray
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """
    Backward of gate_fuse

    Returns:
        Tuple of ({branch: grad wrt its output}, {branch: grad wrt its gate logits})
    """
    grad_outputs = {}
    grad_gates = {}
    for name in BRANCH_NAMES:
        gamma = gates.get(name)
        out = branch_outputs.get(name)
        if out is None:
            grad_gates[name] = np.zeros_like(gamma)
            continue
        sig = _gate_weight(gamma, out.ndim)
        grad_outputs[name] = (sig * grad_out).astype(out.dtype)
        per_head = (grad_out * out).reshape(sig.shape[0], -1).sum(axis=-1)
        grad_gates[name] = (per_head * (sig * (1.0 - sig)).ravel()).reshape(gamma.shape).astype(gamma.dtype)
    return grad_outputs, grad_gates


@dataclass
class AttentionWorkspace:
    """Everything bsa_attention_vjp needs from one forward pass"""
    x: np.ndarray
    tree: BallTree
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    coarse_valid: Optional[np.ndarray] = None
    kc: Optional[np.ndarray] = None
    vc: Optional[np.ndarray] = None
    qc: Optional[np.ndarray] = None
    compress_ws: Dict[str, object] = field(default_factory=dict)
    branch_outputs: Dict[str, np.ndarray] = field(default_factory=dict)
    branch_ws: Dict[str, object] = field(default_factory=dict)
    plan: Optional[SelectionPlan] = None
    merged: Optional[np.ndarray] = None


def bsa_attention_forward(
    x: np.ndarray,
    tree: BallTree,
    config: BsaConfig,
    params: BsaParams,
    plan: Optional[SelectionPlan] = None,
    keep_workspace: bool = True,
    chunk_rows: Optional[int] = None,
    prefer_low_index: bool = True
) -> Tuple[np.ndarray, Optional[AttentionWorkspace]]:
    """
    Ball Sparse Attention on tree-ordered rows

    Args:
        x: (N_pad, C) rows in tree order (padded rows zero)
        tree: Ball tree the rows are ordered by
        config: Layer configuration
        params: Block parameters
        plan: Frozen selection plan to reuse instead of scoring
        keep_workspace: Retain intermediates for the backward pass
        chunk_rows: Query chunking for forward-only runs
        prefer_low_index: Top-k tie rule

    Returns:
        Tuple of ((N_pad, C) output with zero padded rows, workspace or None)
    """
    if x.shape[0] != tree.n_padded:
        raise ShapeError(f"Expected {tree.n_padded} tree-ordered rows, got {x.shape[0]}")
    valid = tree.valid_mask
    ell = config.block_len
    branches = config.branches

    q, k, v = project_qkv(x, params.proj)
    ws = AttentionWorkspace(x=x, tree=tree, q=q, k=k, v=v) if keep_workspace else None

    kc = vc = qc = coarse_valid = coarse_query_valid = None
    if "cmp" in branches or "slc" in branches:
        kc, coarse_valid, ws_k = compress_blocks(k, ell, params.phi_k, valid)
        vc, _, ws_v = compress_blocks(v, ell, params.phi_v, valid)
        if config.uses_query_phi:
            qc, coarse_query_valid, ws_q = compress_blocks(q, ell, params.phi_q, valid)
        if ws is not None:
            ws.kc, ws.vc, ws.qc, ws.coarse_valid = kc, vc, qc, coarse_valid
            ws.compress_ws = {"k": ws_k, "v": ws_v}
            if qc is not None:
                ws.compress_ws["q"] = ws_q

    outputs: Dict[str, np.ndarray] = {}
    if "ball" in branches:
        outputs["ball"], branch_ws = ball_attention(q, k, v, tree, keep_workspace, chunk_rows)
        if ws is not None:
            ws.branch_ws["ball"] = branch_ws

    if "cmp" in branches:
        if config.group_compression:
            outputs["cmp"], branch_ws = group_compressed_attention(
                qc, kc, vc, coarse_valid, ell, tree.n_padded, keep_workspace, chunk_rows
            )
        else:
            outputs["cmp"], branch_ws = compressed_attention(q, kc, vc, coarse_valid, keep_workspace, chunk_rows)
        if ws is not None:
            ws.branch_ws["cmp"] = branch_ws

    if "slc" in branches:
        if plan is None:
            plan = build_selection_plan(
                q, kc, coarse_valid, tree, config,
                qc=qc,
                coarse_query_valid=coarse_query_valid,
                keep_scores=keep_workspace,
                prefer_low_index=prefer_low_index,
            )
        outputs["slc"], branch_ws = selection_attention(q, k, v, plan, valid, keep_workspace)
        if ws is not None:
            ws.branch_ws["slc"] = branch_ws
            ws.plan = plan

    fused = gate_fuse(outputs.get("ball"), outputs.get("cmp"), outputs.get("slc"), params.gates)
    fused = fused * valid[:, None]
    merged = merge_heads(fused)
    out = merged @ params.proj.w_o if params.proj.w_o is not None else merged

    if ws is not None:
        ws.branch_outputs = outputs
        ws.merged = merged
    return out, ws


def bsa_attention_vjp(
    ws: AttentionWorkspace,
    config: BsaConfig,
    params: BsaParams,
    grad_out: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Backward of bsa_attention_forward with the selection plan held fixed

    Returns:
        Tuple of (grad_x (N_pad, C), parameter grads keyed like BsaParams.named_arrays)
    """
    valid = ws.tree.valid_mask
    heads = params.proj.heads
    grads: Dict[str, np.ndarray] = {}

    if params.proj.w_o is not None:
        grad_merged, grads["w_o"] = linear_vjp(ws.merged, params.proj.w_o, grad_out)
    else:
        grad_merged = grad_out
    grad_fused = split_heads(grad_merged, heads) * valid[:, None]

    grad_branch, grad_gates = gate_fuse_vjp(ws.branch_outputs, params.gates, grad_fused)
    for name, g in grad_gates.items():
        grads[f"gate_{name}"] = g

    grad_q = np.zeros_like(ws.q)
    grad_k = np.zeros_like(ws.k)
    grad_v = np.zeros_like(ws.v)
    grad_kc = np.zeros_like(ws.kc) if ws.kc is not None else None
    grad_vc = np.zeros_like(ws.vc) if ws.vc is not None else None
    grad_qc = np.zeros_like(ws.qc) if ws.qc is not None else None

    if "ball" in grad_branch:
        gq, gk, gv = ball_attention_vjp(ws.branch_ws["ball"], grad_branch["ball"])
        grad_q += gq
        grad_k += gk
        grad_v += gv

    if "cmp" in grad_branch:
        if config.group_compression:
            gqc, gkc, gvc = group_compressed_attention_vjp(ws.branch_ws["cmp"], grad_branch["cmp"])
            grad_qc += gqc
        else:
            gq, gkc, gvc = compressed_attention_vjp(ws.branch_ws["cmp"], grad_branch["cmp"])
            grad_q += gq
        grad_kc += gkc
        grad_vc += gvc

    if "slc" in grad_branch:
        gq, gk, gv = selection_attention_vjp(ws.branch_ws["slc"], grad_branch["slc"])
        grad_q += gq
        grad_k += gk
        grad_v += gv

    for key, grad_coarse, target, phi in (
        ("k", grad_kc, grad_k, params.phi_k),
        ("v", grad_vc, grad_v, params.phi_v),
        ("q", grad_qc, grad_q, params.phi_q),
    ):
        if grad_coarse is None:
            continue
        grad_rows, phi_grads = compress_blocks_vjp(ws.compress_ws[key], phi, grad_coarse)
        target += grad_rows
        for name, g in phi_grads.items():
            grads[f"phi_{key}.{name}"] = g

    grad_x, proj_grads = project_qkv_vjp(ws.x, params.proj, grad_q, grad_k, grad_v)
    grads.update(proj_grads)
    return grad_x, grads


def bsa_forward(
    x: np.ndarray,
    tree: BallTree,
    config: BsaConfig,
    params: BsaParams,
    plan: Optional[SelectionPlan] = None,
    keep_workspace: bool = True
) -> Tuple[np.ndarray, Optional[AttentionWorkspace]]:
    """
    Ball Sparse Attention on rows in original point order

    Args:
        x: (N, C) rows, one per point of the tree
        tree: Ball tree over the same points
        config: Layer configuration
        params: Block parameters (projections, compressors, gates)
        plan: Frozen selection plan to reuse
        keep_workspace: Retain intermediates for bsa_vjp

    Returns:
        Tuple of ((N, C) output, workspace with coarse tokens, scores and plan)
    """
    xp = permute_features(tree, x)
    out, ws = bsa_attention_forward(xp, tree, config, params, plan=plan, keep_workspace=keep_workspace)
    return unpermute_features(tree, out), ws


def bsa_vjp(
    ws: AttentionWorkspace,
    config: BsaConfig,
    params: BsaParams,
    grad_out: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Backward of bsa_forward"""
    grad_xp, grads = bsa_attention_vjp(ws, config, params, permute_features(ws.tree, grad_out))
    return unpermute_features(ws.tree, grad_xp), grads


@dataclass
class BlockWorkspace:
    x: np.ndarray
    h_attn: np.ndarray
    attention: AttentionWorkspace
    x_mid: np.ndarray
    h_mlp: np.ndarray
    ordered: bool


def block_forward(
    x: np.ndarray,
    tree: BallTree,
    config: BsaConfig,
    params: BsaParams,
    ordered: bool = False,
    plan: Optional[SelectionPlan] = None,
    keep_workspace: bool = True,
    chunk_rows: Optional[int] = None
) -> Tuple[np.ndarray, Optional[BlockWorkspace]]:
    """
    Pre-norm transformer block

    x' = x + BSA(rmsnorm(x)); x'' = x' + swiglu(rmsnorm(x'))

    Args:
        x: (N, C) rows in original order, or (N_pad, C) tree-ordered rows if ordered
        tree: Ball tree over the points
        config: Layer configuration
        params: Block parameters
        ordered: Rows are already in tree order
        plan: Frozen selection plan to reuse
        keep_workspace: Retain intermediates for block_vjp
        chunk_rows: Query chunking for forward-only runs

    Returns:
        Tuple of (x'' in the same order as x, workspace or None)
    """
    xp = x if ordered else permute_features(tree, x)
    h_attn = rmsnorm(xp, params.norm_attn)
    attn, attn_ws = bsa_attention_forward(
        h_attn, tree, config, params, plan=plan, keep_workspace=keep_workspace, chunk_rows=chunk_rows
    )
    x_mid = xp + attn
    h_mlp = rmsnorm(x_mid, params.norm_mlp)
    out = x_mid + swiglu(h_mlp, params.mlp_w1, params.mlp_w2, params.mlp_w3)

    ws = None
    if keep_workspace:
        ws = BlockWorkspace(x=xp, h_attn=h_attn, attention=attn_ws, x_mid=x_mid, h_mlp=h_mlp, ordered=ordered)
    return (out if ordered else unpermute_features(tree, out)), ws


def block_vjp(
    ws: BlockWorkspace,
    config: BsaConfig,
    params: BsaParams,
    grad_out: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Backward of block_forward

    Returns:
        Tuple of (grad_x in the order block_forward received x, parameter grads)
    """
    tree = ws.attention.tree
    grad = grad_out if ws.ordered else permute_features(tree, grad_out)

    grad_h_mlp, mlp_grads = swiglu_vjp(ws.h_mlp, params.mlp_w1, params.mlp_w2, params.mlp_w3, grad)
    grad_mid, grad_norm_mlp = rmsnorm_vjp(ws.x_mid, params.norm_mlp, grad_h_mlp)
    grad_mid = grad_mid + grad

    grad_h_attn, grads = bsa_attention_vjp(ws.attention, config, params, grad_mid)
    grad_x, grad_norm_attn = rmsnorm_vjp(ws.x, params.norm_attn, grad_h_attn)
    grad_x = grad_x + grad_mid

    grads.update({
        "norm_attn": grad_norm_attn,
        "norm_mlp": grad_norm_mlp,
        "mlp_w1": mlp_grads["w1"],
        "mlp_w2": mlp_grads["w2"],
        "mlp_w3": mlp_grads["w3"],
    })
    return (grad_x if ws.ordered else unpermute_features(tree, grad_x)), grads


@dataclass
class ModelWorkspace:
    inputs: np.ndarray
    tree: BallTree
    config: BsaConfig
    blocks: List[BlockWorkspace]
    trunk_out: np.ndarray

    @property
    def plans(self) -> List[Optional[SelectionPlan]]:
        return [block.attention.plan for block in self.blocks]


def model_inputs(points: PointCloud, features: Optional[np.ndarray] = None) -> np.ndarray:
    """Coordinates with any extra feature columns appended"""
    if features is None:
        return points.coords
    features = np.asarray(features)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] != points.n_points:
        raise ShapeError(f"Expected {points.n_points} feature rows, got {features.shape[0]}")
    return np.concatenate([points.coords, features], axis=1)


def prepare_layout(points: PointCloud, config: BsaConfig) -> Tuple[BallTree, BsaConfig]:
    """
    Resolve the padded layout for a cloud and build its ball tree

    Returns:
        Tuple of (tree, config with the effective ball size)
    """
    shape = config.resolve(points.n_points)
    config.check_capacity(shape)
    layer_config = config.model_copy(update={"ball_size": shape.ball_size})
    return build_ball_tree(points, shape.ball_size), layer_config


def model_forward(
    points: PointCloud,
    features: Optional[np.ndarray],
    config: BsaConfig,
    params: ModelParams,
    depth: Optional[int] = None,
    tree: Optional[BallTree] = None,
    plans: Optional[List[Optional[SelectionPlan]]] = None,
    keep_workspace: bool = True,
    chunk_rows: Optional[int] = None
) -> Tuple[np.ndarray, Optional[ModelWorkspace]]:
    """
    Per-point scalar regression: embed -> depth blocks -> linear head

    Args:
        points: Point cloud
        features: Optional (N, F) extra input columns
        config: Layer configuration shared by every block
        params: Model parameters
        depth: Blocks to run (default: all of params.blocks)
        tree: Prebuilt ball tree (built from the config when omitted)
        plans: Frozen selection plans, one per block
        keep_workspace: Retain intermediates for model_vjp
        chunk_rows: Query chunking for forward-only runs

    Returns:
        Tuple of ((N,) predictions, workspace or None)
    """
    depth = len(params.blocks) if depth is None else depth
    if depth < 1 or depth > len(params.blocks):
        raise InvalidArgumentError(f"depth must be in [1, {len(params.blocks)}], got {depth}")

    if tree is None:
        tree, config = prepare_layout(points, config)
    else:
        config = config.model_copy(update={"ball_size": tree.ball_size})

    inputs = model_inputs(points, features).astype(params.embed_w.dtype)
    if inputs.shape[1] != params.embed_w.shape[0]:
        raise ShapeError(f"Model expects {params.embed_w.shape[0]} input columns, got {inputs.shape[1]}")
    h = permute_features(tree, inputs @ params.embed_w + params.embed_b, fill=0.0)

    block_ws = []
    for i in range(depth):
        plan = plans[i] if plans is not None else None
        h, ws = block_forward(
            h, tree, config, params.blocks[i],
            ordered=True, plan=plan, keep_workspace=keep_workspace, chunk_rows=chunk_rows,
        )
        block_ws.append(ws)

    pred = unpermute_features(tree, h @ params.head_w + params.head_b[0])

    if not keep_workspace:
        return pred, None
    return pred, ModelWorkspace(inputs=inputs, tree=tree, config=config, blocks=block_ws, trunk_out=h)


def model_vjp(
    ws: ModelWorkspace,
    params: ModelParams,
    grad_pred: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Backward of model_forward with every selection plan held fixed

    Args:
        ws: Workspace from model_forward
        params: Model parameters used in the forward pass
        grad_pred: (N,) gradient wrt the predictions

    Returns:
        Tuple of (grad wrt the (N, D + F) inputs, grads keyed like ModelParams.named_arrays)
    """
    tree = ws.tree
    grads = {name: np.zeros_like(arr) for name, arr in params.named_arrays().items()}

    grad_head = permute_features(tree, np.asarray(grad_pred))
    grads["head.w"] = ws.trunk_out.T @ grad_head
    grads["head.b"] = np.array([grad_head.sum()], dtype=params.head_b.dtype)
    grad_h = np.outer(grad_head, params.head_w)

    for i in reversed(range(len(ws.blocks))):
        grad_h, block_grads = block_vjp(ws.blocks[i], ws.config, params.blocks[i], grad_h)
        for name, g in block_grads.items():
            grads[f"blocks.{i}.{name}"] = g

    grad_embed = unpermute_features(tree, grad_h)
    grads["embed.w"] = ws.inputs.T @ grad_embed
    grads["embed.b"] = grad_embed.sum(axis=0)
    return grad_embed @ params.embed_w.T, grads


@dataclass
class ReceptiveField:
    """
    Tokens that can influence one token's output, in original point order

    Attributes:
        token: Original index of the query token
        in_ball: (N,) members of the token's ball
        in_selection: (N,) tokens of the blocks its group selected
        in_compression: (N,) tokens covered by valid coarse tokens
    """
    token: int
    in_ball: np.ndarray
    in_selection: np.ndarray
    in_compression: np.ndarray

    @property
    def union(self) -> np.ndarray:
        return self.in_ball | self.in_selection | self.in_compression

    def tokens(self) -> np.ndarray:
        return np.flatnonzero(self.union)


def receptive_field(
    tree: BallTree,
    config: BsaConfig,
    plan: Optional[SelectionPlan],
    t: int
) -> ReceptiveField:
    """
    Receptive field of token t through each enabled branch

    Args:
        tree: Ball tree of the forward pass
        config: Layer configuration (decides which branches count)
        plan: Selection plan from the forward pass (required with the selection branch)
        t: Original point index

    Returns:
        ReceptiveField
    """
    n = tree.n_valid
    if not 0 <= t < n:
        raise InvalidArgumentError(f"Token {t} out of range [0, {n})")
    slot = int(tree.inverse_permutation[t])

    def mark(slots: np.ndarray) -> np.ndarray:
        flags = np.zeros(n, dtype=bool)
        slots = slots[tree.valid_mask[slots]]
        flags[tree.permutation[slots]] = True
        return flags

    empty = np.zeros(n, dtype=bool)
    in_ball = mark(tree.ball_members(tree.ball_of(slot))) if "ball" in config.branches else empty

    in_selection = empty
    if "slc" in config.branches:
        if plan is None:
            raise InvalidArgumentError("Selection branch enabled but no selection plan given")
        blocks = plan.blocks_for_slot(slot)
        slots = (blocks[:, None] * plan.block_len + np.arange(plan.block_len)).ravel()
        in_selection = mark(slots)

    in_compression = np.ones(n, dtype=bool) if "cmp" in config.branches else empty

    return ReceptiveField(token=t, in_ball=in_ball, in_selection=in_selection, in_compression=in_compression)

"""
Analytic FLOP model for dense and Ball Sparse Attention layers

Conventions:
    - a multiply-accumulate counts as 2 FLOPs (flops_matmul)
    - softmax costs SOFTMAX FLOPs per score (max, subtract, exp, sum, divide)
    - top-k costs TOPK FLOPs per candidate score it scans
All counts are per forward pass over one point cloud.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional

from ballsparse.config import VARIANTS
from ballsparse.exceptions import InvalidArgumentError
from ballsparse.processing.attention.params import BsaConfig

logger = logging.getLogger(__name__)

SOFTMAX = 5
TOPK = 1
GATE = 2  # multiply-add per element and branch
POOL = 1  # one add per pooled element


def flops_matmul(m: int, n: int, p: int) -> int:
    return 2 * m * n * p


def flops_attend(n_queries: int, n_keys: int, head_dim: int) -> int:
    """QK^T, softmax and AV for one head"""
    return (
        flops_matmul(n_queries, head_dim, n_keys)
        + SOFTMAX * n_queries * n_keys
        + flops_matmul(n_queries, n_keys, head_dim)
    )


def flops_projections(n: int, model_dim: int, heads: int, head_dim: int) -> int:
    """Q, K, V projections plus the output projection"""
    width = heads * head_dim
    return 3 * flops_matmul(n, model_dim, width) + flops_matmul(n, width, model_dim)


def flops_swiglu(n: int, model_dim: int, hidden: int) -> int:
    return 3 * flops_matmul(n, model_dim, hidden)


@dataclass
class CostReport:
    """FLOP breakdown of one layer; every count covers all heads"""
    n_points: int
    variant: str
    depth: int
    flops_ball: int = 0
    flops_cmp: int = 0
    flops_slc: int = 0
    flops_scoring: int = 0
    flops_phi: int = 0
    flops_gate: int = 0
    flops_proj: int = 0
    flops_mlp: int = 0

    def __post_init__(self):
        for name in self.part_names():
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0, got {getattr(self, name)}")

    @staticmethod
    def part_names():
        return [f.name for f in fields(CostReport) if f.name.startswith("flops_")]

    @property
    def attention_total(self) -> int:
        """Per-layer attention cost (everything but the feed-forward)"""
        return sum(getattr(self, name) for name in self.part_names() if name != "flops_mlp")

    @property
    def total(self) -> int:
        """Per-layer total"""
        return self.attention_total + self.flops_mlp

    @property
    def model_total(self) -> int:
        return self.total * self.depth

    def to_key_values(self) -> Dict[str, object]:
        values = asdict(self)
        values["attention_total"] = self.attention_total
        values["total"] = self.total
        values["model_total"] = self.model_total
        return values

    def to_row(self) -> Dict[str, object]:
        row = {"n": self.n_points, "variant": self.variant}
        row.update({k: v for k, v in self.to_key_values().items() if k not in ("n_points", "variant")})
        return row


def flops_full(n: int, head_dim: int, heads: int, depth: int, model_dim: Optional[int] = None) -> int:
    """
    Dense multi-head attention cost

    Per head: 2N^2 d (QK^T) + 5N^2 (softmax) + 2N^2 d (AV); plus the
    projections 6 N C d per head and the output projection 2 N (H d) C.

    Args:
        n: Sequence length N
        head_dim: d_k
        heads: H
        depth: Layers
        model_dim: C (defaults to H * d_k)

    Returns:
        Total FLOPs over all layers
    """
    for name, value in (("n", n), ("head_dim", head_dim), ("heads", heads), ("depth", depth)):
        if value < 1:
            raise InvalidArgumentError(f"{name} must be >= 1, got {value}")
    model_dim = model_dim or heads * head_dim
    per_layer = heads * flops_attend(n, n, head_dim) + flops_projections(n, model_dim, heads, head_dim)
    return per_layer * depth


def _phi_flops(n_rows: int, block_len: int, head_dim: int, kind: str) -> int:
    n_blocks = n_rows // block_len
    if kind == "mean":
        return POOL * n_rows * head_dim
    hidden = 2 * head_dim
    return n_blocks * (flops_matmul(1, block_len * head_dim, hidden) + flops_matmul(1, hidden, head_dim))


def flops_bsa(n: int, config: BsaConfig, variant: Optional[str] = None, depth: int = 1) -> CostReport:
    """
    FLOP breakdown of one Ball Sparse Attention layer

    Terms per head, with N the padded length and n_b = N / l blocks:
        ball      N m (4d + 5)
        cmp       N n_b (4d + 5), or n_b^2 (4d + 5) with group compression
        slc       N k l (4d + 5)
        scoring   coarse queries: n_b^2 2d; otherwise N n_b 2d (+ N n_b to average
                  groups), plus top-k over one score row per group (shared by heads)
        phi       mean: N d per compressed tensor; mlp: n_b (4 l d^2 + 4 d^2)

    Args:
        n: Point count
        config: Layer configuration
        variant: Optional variant name whose flags override the config
        depth: Layers (for model_total)

    Returns:
        CostReport
    """
    if variant is not None:
        if variant not in VARIANTS:
            raise InvalidArgumentError(f"Unknown variant '{variant}', expected one of {sorted(VARIANTS)}")
        config = BsaConfig(**{**config.model_dump(), **VARIANTS[variant]})
    if depth < 1:
        raise InvalidArgumentError(f"depth must be >= 1, got {depth}")

    shape = config.resolve(n)
    n_pad = shape.n_padded
    n_blocks = shape.n_blocks
    d = config.head_dim
    heads = config.heads
    ell = config.block_len
    branches = config.branches

    report = CostReport(n_points=n, variant=variant or "custom", depth=depth)
    report.flops_proj = flops_projections(n_pad, config.model_dim, heads, d)
    report.flops_mlp = flops_swiglu(n_pad, config.model_dim, config.mlp_ratio * config.model_dim)
    report.flops_gate = GATE * len(branches) * n_pad * d * heads

    if "ball" in branches:
        report.flops_ball = heads * flops_attend(n_pad, shape.ball_size, d)

    if "cmp" in branches or "slc" in branches:
        compressed = 2 + (1 if config.uses_query_phi else 0)
        report.flops_phi = heads * compressed * _phi_flops(n_pad, ell, d, config.phi_kind)

    if "cmp" in branches:
        n_queries = n_blocks if config.group_compression else n_pad
        report.flops_cmp = heads * flops_attend(n_queries, n_blocks, d)

    if "slc" in branches:
        report.flops_slc = heads * flops_attend(n_pad, config.top_k * ell, d)
        n_groups = shape.n_groups
        if config.group_selection and config.query_coarsening:
            scoring = heads * flops_matmul(n_blocks, d, n_blocks)
        elif config.group_selection:
            scoring = heads * flops_matmul(n_pad, d, n_blocks) + POOL * n_pad * n_blocks
        else:
            scoring = heads * flops_matmul(n_pad, d, n_blocks)
        report.flops_scoring = scoring + TOPK * n_groups * n_blocks

    logger.debug(f"flops_bsa N={n} variant={report.variant}: {report.total} per layer")
    return report


def full_attention_report(n: int, config: BsaConfig, depth: int = 1) -> CostReport:
    """Dense attention in CostReport form (attention counted under flops_ball)"""
    attention = config.heads * flops_attend(n, n, config.head_dim)
    return CostReport(
        n_points=n,
        variant="full",
        depth=depth,
        flops_ball=attention,
        flops_proj=flops_projections(n, config.model_dim, config.heads, config.head_dim),
        flops_mlp=flops_swiglu(n, config.model_dim, config.mlp_ratio * config.model_dim),
    )

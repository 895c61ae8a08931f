"""
Ball Sparse Attention configuration and learnable parameters
Validated hyperparameters, per-layer parameter containers and seeded initialization
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ballsparse.config import ATTENTION_CONSTANTS, BSA_CONFIG, VARIANTS
from ballsparse.exceptions import InvalidArgumentError, InvalidConfigError, ShapeError
from ballsparse.processing.utils.array_utils import lcm, round_up
from .core import ProjectionWeights

logger = logging.getLogger(__name__)

BRANCH_NAMES = ("ball", "cmp", "slc")


@dataclass(frozen=True)
class ResolvedShape:
    """Sizes derived from a BsaConfig for a concrete point count"""
    n_points: int
    ball_size: int
    n_padded: int
    n_blocks: int
    group_size: int
    n_groups: int
    blocks_per_ball: int


class BsaConfig(BaseModel):
    """Hyperparameters of one Ball Sparse Attention layer"""
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    ball_size: int = Field(BSA_CONFIG["ball_size"], ge=1, description="Ball size m")
    block_len: int = Field(BSA_CONFIG["block_len"], ge=1, description="Block length l (compression block, stride and selection block)")
    top_k: int = Field(BSA_CONFIG["top_k"], ge=1, description="Selected blocks per group k*")
    group_size: int = Field(BSA_CONFIG["group_size"], ge=1, description="Queries sharing one selection g")
    heads: int = Field(BSA_CONFIG["heads"], ge=1, description="Attention heads H")
    model_dim: int = Field(BSA_CONFIG["model_dim"], ge=1, description="Model width C")
    head_dim: int = Field(BSA_CONFIG["head_dim"], ge=1, description="Per-head width d_k")
    phi_kind: Literal["mean", "mlp"] = Field(BSA_CONFIG["phi_kind"], description="Block compressor")
    mlp_ratio: int = Field(BSA_CONFIG["mlp_ratio"], ge=1, description="SwiGLU hidden width / model width")
    group_selection: bool = BSA_CONFIG["group_selection"]
    query_coarsening: bool = BSA_CONFIG["query_coarsening"]
    group_compression: bool = BSA_CONFIG["group_compression"]
    ball_masking: bool = BSA_CONFIG["ball_masking"]
    full_attention: bool = Field(False, description="One ball spans the whole padded set")
    branches: Tuple[Literal["ball", "cmp", "slc"], ...] = BRANCH_NAMES

    @model_validator(mode="after")
    def check_invariants(self) -> "BsaConfig":
        if not self.branches:
            raise ValueError("At least one attention branch must be enabled")
        if len(set(self.branches)) != len(self.branches):
            raise ValueError(f"Duplicate branches in {self.branches}")
        if self.ball_size % self.block_len:
            raise ValueError(
                f"ball_size {self.ball_size} must be divisible by block_len {self.block_len}"
            )
        if self.ball_size % self.group_size:
            raise ValueError(
                f"ball_size {self.ball_size} must be divisible by group_size {self.group_size}"
            )
        if (
            self.group_selection
            and self.query_coarsening
            and self.group_size % self.block_len
            and self.block_len % self.group_size
        ):
            raise ValueError(
                f"With query coarsening, group_size {self.group_size} and block_len "
                f"{self.block_len} must divide one another"
            )
        return self

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "BsaConfig":
        """
        Build a config for one of the named variants

        Args:
            variant: Key of config.VARIANTS ("full", "bsa", "bsa-nogroup", "bsa-gc")
            **overrides: Field values taking precedence over the variant flags

        Returns:
            Validated BsaConfig
        """
        if variant not in VARIANTS:
            raise InvalidArgumentError(f"Unknown variant '{variant}', expected one of {sorted(VARIANTS)}")
        values = dict(BSA_CONFIG)
        values.update(VARIANTS[variant])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @property
    def effective_group_size(self) -> int:
        return self.group_size if self.group_selection else 1

    def resolve(self, n_points: int) -> ResolvedShape:
        """
        Derive the padded layout for a cloud of n_points

        The ball size shrinks to the point count (rounded up to a multiple of
        lcm(block_len, group_size)) for small clouds; full attention always
        uses a single ball.
        """
        if n_points < 1:
            raise InvalidArgumentError(f"Point count must be >= 1, got {n_points}")
        unit = lcm(self.block_len, self.group_size)
        whole = round_up(n_points, unit)
        ball = whole if self.full_attention else min(self.ball_size, whole)
        n_padded = round_up(n_points, ball)
        group = self.effective_group_size
        return ResolvedShape(
            n_points=n_points,
            ball_size=ball,
            n_padded=n_padded,
            n_blocks=n_padded // self.block_len,
            group_size=group,
            n_groups=n_padded // group,
            blocks_per_ball=ball // self.block_len,
        )

    def check_capacity(self, shape: ResolvedShape) -> None:
        """Raise InvalidConfigError when top-k cannot be satisfied for this layout"""
        if "slc" not in self.branches:
            return
        padding_blocks = (shape.n_padded - shape.n_points) // self.block_len
        candidates = shape.n_blocks - padding_blocks
        if self.ball_masking:
            candidates -= shape.blocks_per_ball
        if self.top_k > candidates:
            raise InvalidConfigError(
                f"top_k={self.top_k} exceeds the {candidates} candidate blocks available "
                f"(N_pad={shape.n_padded}, block_len={self.block_len}, ball={shape.ball_size}, "
                f"ball_masking={self.ball_masking})"
            )

    @property
    def uses_query_phi(self) -> bool:
        coarse_scoring = "slc" in self.branches and self.group_selection and self.query_coarsening
        coarse_compression = "cmp" in self.branches and self.group_compression
        return coarse_scoring or coarse_compression


@dataclass
class PhiWeights:
    """
    Block compressor weights

    mean: no weights. mlp: flatten (l*d) -> w1 -> silu -> w2 -> d.
    """
    kind: str = "mean"
    w1: Optional[np.ndarray] = None
    w2: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "mlp":
            if self.w1 is None or self.w2 is None:
                raise ShapeError("MLP compressor needs w1 and w2")
            if self.w1.shape[1] != self.w2.shape[0]:
                raise ShapeError(f"Compressor hidden widths differ: {self.w1.shape} vs {self.w2.shape}")
        elif self.kind != "mean":
            raise InvalidArgumentError(f"Unknown compressor kind '{self.kind}'")


@dataclass
class GateParams:
    """Per-head branch gate logits"""
    ball: np.ndarray
    cmp: np.ndarray
    slc: np.ndarray

    def get(self, branch: str) -> np.ndarray:
        return getattr(self, branch)


@dataclass
class BsaParams:
    """Learnable state of one transformer block"""
    proj: ProjectionWeights
    phi_k: PhiWeights
    phi_v: PhiWeights
    phi_q: PhiWeights
    gates: GateParams
    norm_attn: np.ndarray
    norm_mlp: np.ndarray
    mlp_w1: np.ndarray
    mlp_w2: np.ndarray
    mlp_w3: np.ndarray

    def named_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        """Flat name -> array view of every parameter (same objects, not copies)"""
        arrays = {
            f"{prefix}w_q": self.proj.w_q,
            f"{prefix}w_k": self.proj.w_k,
            f"{prefix}w_v": self.proj.w_v,
            f"{prefix}w_o": self.proj.w_o,
        }
        for name, phi in (("phi_k", self.phi_k), ("phi_v", self.phi_v), ("phi_q", self.phi_q)):
            if phi.kind == "mlp":
                arrays[f"{prefix}{name}.w1"] = phi.w1
                arrays[f"{prefix}{name}.w2"] = phi.w2
        for branch in BRANCH_NAMES:
            arrays[f"{prefix}gate_{branch}"] = self.gates.get(branch)
        arrays.update({
            f"{prefix}norm_attn": self.norm_attn,
            f"{prefix}norm_mlp": self.norm_mlp,
            f"{prefix}mlp_w1": self.mlp_w1,
            f"{prefix}mlp_w2": self.mlp_w2,
            f"{prefix}mlp_w3": self.mlp_w3,
        })
        return arrays


@dataclass
class ModelParams:
    """Embedding, stacked blocks and scalar regression head"""
    embed_w: np.ndarray
    embed_b: np.ndarray
    blocks: List[BsaParams] = field(default_factory=list)
    head_w: Optional[np.ndarray] = None
    head_b: Optional[np.ndarray] = None

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {"embed.w": self.embed_w, "embed.b": self.embed_b}
        for i, block in enumerate(self.blocks):
            arrays.update(block.named_arrays(prefix=f"blocks.{i}."))
        arrays["head.w"] = self.head_w
        arrays["head.b"] = self.head_b
        return arrays

    def load_named(self, arrays: Dict[str, np.ndarray]) -> None:
        """Copy values into the existing arrays (names and shapes must match)"""
        own = self.named_arrays()
        missing = set(own) - set(arrays)
        if missing:
            raise ShapeError(f"Missing parameters: {sorted(missing)}")
        for name, target in own.items():
            source = np.asarray(arrays[name])
            if source.shape != target.shape:
                raise ShapeError(f"Parameter {name}: expected {target.shape}, got {source.shape}")
            np.copyto(target, source.astype(target.dtype))


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype)


def init_phi(config: BsaConfig, rng: np.random.Generator, dtype) -> PhiWeights:
    if config.phi_kind == "mean":
        return PhiWeights(kind="mean")
    flat = config.block_len * config.head_dim
    hidden = 2 * config.head_dim
    return PhiWeights(
        kind="mlp",
        w1=_dense(rng, flat, hidden, dtype),
        w2=_dense(rng, hidden, config.head_dim, dtype),
    )


def init_bsa_params(config: BsaConfig, rng: np.random.Generator, dtype=np.float32) -> BsaParams:
    """
    Seeded initialization of one block

    Dense weights are N(0, 1/fan_in); gates start at 0 (every branch half open);
    norm gains start at 1.
    """
    c = config.model_dim
    width = config.heads * config.head_dim
    hidden = config.mlp_ratio * c
    gate0 = ATTENTION_CONSTANTS["gate_init"]

    proj = ProjectionWeights(
        w_q=_dense(rng, c, width, dtype),
        w_k=_dense(rng, c, width, dtype),
        w_v=_dense(rng, c, width, dtype),
        w_o=_dense(rng, width, c, dtype),
        heads=config.heads,
    )
    gates = GateParams(
        ball=np.full(config.heads, gate0, dtype=dtype),
        cmp=np.full(config.heads, gate0, dtype=dtype),
        slc=np.full(config.heads, gate0, dtype=dtype),
    )

    return BsaParams(
        proj=proj,
        phi_k=init_phi(config, rng, dtype),
        phi_v=init_phi(config, rng, dtype),
        phi_q=init_phi(config, rng, dtype),
        gates=gates,
        norm_attn=np.ones(c, dtype=dtype),
        norm_mlp=np.ones(c, dtype=dtype),
        mlp_w1=_dense(rng, c, hidden, dtype),
        mlp_w2=_dense(rng, c, hidden, dtype),
        mlp_w3=_dense(rng, hidden, c, dtype),
    )


def init_model_params(
    config: BsaConfig,
    in_dim: int,
    depth: int,
    rng: np.random.Generator,
    dtype=np.float32
) -> ModelParams:
    """
    Seeded initialization of the full regression model

    Args:
        config: Layer hyperparameters (shared by every block)
        in_dim: Input width (coordinates + extra features)
        depth: Number of blocks
        rng: Generator
        dtype: Parameter dtype

    Returns:
        ModelParams
    """
    if depth < 1:
        raise InvalidArgumentError(f"depth must be >= 1, got {depth}")
    c = config.model_dim
    blocks = [init_bsa_params(config, rng, dtype) for _ in range(depth)]
    return ModelParams(
        embed_w=_dense(rng, in_dim, c, dtype),
        embed_b=np.zeros(c, dtype=dtype),
        blocks=blocks,
        head_w=(rng.standard_normal(c) / np.sqrt(c)).astype(dtype),
        head_b=np.zeros(1, dtype=dtype),
    )

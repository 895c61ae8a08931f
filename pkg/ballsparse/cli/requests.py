"""
Validated run configurations for the command-line surface
Every command builds one of these before allocating anything
"""

from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from ballsparse.config import BENCH_CONFIG, MODEL_CONFIG, TRAIN_CONFIG
from ballsparse.processing.attention.params import BsaConfig

Variant = Literal["full", "bsa", "bsa-nogroup", "bsa-gc"]
Branch = Literal["ball", "cmp", "slc"]


class RunConfig(BaseModel):
    """Base run configuration shared by every command"""
    variant: Variant = Field("bsa", description="Attention variant")
    ball_size: Optional[int] = Field(None, ge=1, description="Ball size m")
    block_len: Optional[int] = Field(None, ge=1, description="Block length l")
    top_k: Optional[int] = Field(None, ge=1, description="Selected blocks k*")
    group_size: Optional[int] = Field(None, ge=1, description="Query group size g")
    phi: Optional[Literal["mean", "mlp"]] = Field(None, description="Block compressor")
    branches: Optional[Tuple[Branch, ...]] = Field(None, description="Enabled attention branches")
    no_ball_masking: bool = Field(False, description="Let selection pick blocks of the query's own ball")
    seed: int = Field(0, description="Random seed")
    precision: Literal["working", "high"] = Field("working", description="Numeric precision")
    threads: Optional[int] = Field(None, ge=1, description="BLAS thread limit")
    out: Optional[str] = Field(None, description="Output path (stdout when omitted)")

    @model_validator(mode="after")
    def check_layer_config(self) -> "RunConfig":
        self.bsa_config()
        return self

    def bsa_config(self) -> BsaConfig:
        """Layer configuration for this run (variant flags, then explicit overrides)"""
        overrides = {
            "ball_size": self.ball_size,
            "block_len": self.block_len,
            "top_k": self.top_k,
            "group_size": self.group_size,
            "phi_kind": self.phi,
            "branches": self.branches,
        }
        if self.no_ball_masking:
            overrides["ball_masking"] = False
        return BsaConfig.from_variant(self.variant, **overrides)


class CheckRequest(RunConfig):
    """Invariant / oracle suite"""
    precision: Literal["working", "high"] = "high"
    corrupt_tie_rule: bool = Field(False, description="Flip the top-k tie rule (suite must fail)")


class BenchRequest(RunConfig):
    """Runtime sweep"""
    min_n: int = Field(BENCH_CONFIG["min_n"], ge=1)
    max_n: int = Field(BENCH_CONFIG["max_n"], ge=1)
    variants: List[Variant] = Field(default_factory=lambda: list(BENCH_CONFIG["variants"]))
    repeats: int = Field(BENCH_CONFIG["repeats"], ge=1)
    warmups: int = Field(BENCH_CONFIG["warmups"], ge=0)

    @model_validator(mode="after")
    def check_range(self) -> "BenchRequest":
        if self.min_n > self.max_n:
            raise ValueError(f"min_n {self.min_n} exceeds max_n {self.max_n}")
        for variant in self.variants:
            self.variant_config(variant)
        return self

    def variant_config(self, variant: str) -> BsaConfig:
        return self.model_copy(update={"variant": variant}).bsa_config()


class FlopsRequest(RunConfig):
    """Analytic FLOP report"""
    n: int = Field(4096, ge=1, description="Point count")
    depth: int = Field(MODEL_CONFIG["depth"], ge=1)
    format: Literal["kv", "csv"] = "kv"


class TrainRequest(RunConfig):
    """Toy regression training"""
    ball_size: Optional[int] = Field(TRAIN_CONFIG["ball_size"], ge=1)
    dataset_path: Optional[str] = None
    steps: int = Field(TRAIN_CONFIG["steps"], ge=0)
    n_points: int = Field(TRAIN_CONFIG["n_points"], ge=1)
    depth: int = Field(MODEL_CONFIG["depth"], ge=1)
    batch_size: int = Field(TRAIN_CONFIG["batch_size"], ge=1)
    eval_interval: int = Field(TRAIN_CONFIG["eval_interval"], ge=1)
    learning_rate: float = Field(TRAIN_CONFIG["learning_rate"], gt=0)
    weight_decay: float = Field(TRAIN_CONFIG["weight_decay"], ge=0)


class AblateRequest(TrainRequest):
    """Block-length / group-size sweep on the toy task"""

    def grid_config(self, block_len: int, group_size: int) -> BsaConfig:
        return self.model_copy(update={"block_len": block_len, "group_size": group_size}).bsa_config()


class RfRequest(RunConfig):
    """Receptive-field export"""
    ball_size: Optional[int] = Field(TRAIN_CONFIG["ball_size"], ge=1)
    points_file: Optional[str] = None
    n_points: int = Field(TRAIN_CONFIG["n_points"], ge=1)
    token: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_token(self) -> "RfRequest":
        if self.points_file is None and self.token >= self.n_points:
            raise ValueError(f"token {self.token} out of range [0, {self.n_points})")
        return self

"""
Configuration module for the Ball Sparse Attention toolkit
Contains default hyperparameters, variant definitions, paths, and settings
"""

import os
from pathlib import Path

import numpy as np

# Base paths
BASE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = Path(os.environ.get("BSA_DATA_DIR", BASE_DIR / "data"))
RAW_DATA_DIR = DATA_DIR / "raw"
OUTPUTS_DIR = DATA_DIR / "outputs"
MODELS_DIR = DATA_DIR / "models"

# Prefix for environment variable overrides of CLI flags (BSA_BALL_SIZE, BSA_TOP_K, ...)
ENV_PREFIX = "BSA_"

# Numeric precision modes
PRECISIONS = {
    "working": np.float32,
    "high": np.float64,
}

# Sparse attention settings (sparse parameters at their usual defaults,
# widths are desk scale)
BSA_CONFIG = {
    "ball_size": 256,
    "block_len": 8,  # compression block size == stride == selection block size
    "top_k": 4,
    "group_size": 8,
    "heads": 4,
    "model_dim": 64,
    "head_dim": 16,
    "phi_kind": "mean",  # or "mlp"
    "mlp_ratio": 2,  # SwiGLU hidden width = mlp_ratio * model_dim
    "group_selection": True,
    "query_coarsening": True,
    "group_compression": False,
    "ball_masking": True,
}

# Numerical constants shared by the attention kernels
ATTENTION_CONSTANTS = {
    "mask_value": -1e9,  # additive score for excluded keys
    "rmsnorm_eps": 1e-6,
    "gate_init": 0.0,  # sigma(0) = 0.5, all branches half open
}

# Variant flag sets
VARIANTS = {
    "full": {
        "full_attention": True,
        "branches": ("ball",),
        "ball_masking": False,
    },
    "bsa": {
        "group_selection": True,
        "query_coarsening": True,
        "group_compression": False,
        "phi_kind": "mean",
    },
    "bsa-nogroup": {
        "group_selection": False,
        "query_coarsening": False,
        "group_compression": False,
        "phi_kind": "mean",
    },
    "bsa-gc": {
        "group_selection": True,
        "query_coarsening": True,
        "group_compression": True,
        "phi_kind": "mlp",
    },
}

# Model settings
MODEL_CONFIG = {
    "depth": 2,
    "n_extra_features": 0,  # feature columns appended to the coordinates
}

# Training settings
TRAIN_CONFIG = {
    "learning_rate": 1e-3,
    "weight_decay": 0.01,
    "betas": (0.9, 0.999),
    "adam_eps": 1e-8,
    "steps": 1500,
    "batch_size": 4,
    "eval_interval": 100,
    "n_train": 128,
    "n_test": 32,
    "n_points": 256,
    "ball_size": 64,
    "seed": 0,
    "precision": "working",
}

# Runtime benchmark settings
BENCH_CONFIG = {
    "min_n": 256,
    "max_n": 32768,
    "repeats": 5,
    "warmups": 2,
    "variants": ("full", "bsa", "bsa-nogroup", "bsa-gc"),
    "slope_points": 3,
}

# Acceptance thresholds for the scaling sweep and toy-task parity
ACCEPTANCE_CONFIG = {
    "parity_tolerance": 0.25,  # relative test-MSE gap, BSA against full attention
    "min_full_slope": 1.7,
    "min_speedup": 1.5,  # BSA over full attention, only enforced at N >= 32768
    "slope_sizes": (2048, 4096, 8192),
}

# Block-size ablation grid as (block_len, group_size) pairs
ABLATION_GRID = [
    (4, 4),
    (8, 8),
    (16, 16),
    (32, 32),
    (4, 8),
    (16, 8),
    (8, 4),
    (8, 16),
]

# Invariant / oracle suite settings
CHECK_CONFIG = {
    "saturation_sizes": (64, 256, 512),
    "topk_rows": 1000,
    "oracle_cases": 50,
    "gradient_seeds": 10,
    "fd_step": 1e-5,
    "fd_tolerance_high": 1e-4,
    "oracle_tolerance": 1e-5,
}

# Process exit codes
EXIT_CODES = {
    "ok": 0,
    "check_failed": 1,
    "invalid_config": 3,
    "missing_input": 4,
    "rejected_input": 5,
}

# Logging
LOGGING_CONFIG = {
    "level": os.environ.get("BSA_LOG_LEVEL", "INFO"),
    "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
}

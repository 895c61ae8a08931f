"""
Receptive-field export: which tokens can reach one query token, per branch
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from ballsparse.config import EXIT_CODES
from ballsparse.exceptions import InvalidArgumentError
from ballsparse.processing.attention.layer import ReceptiveField, bsa_forward, prepare_layout, receptive_field
from ballsparse.processing.attention.params import init_bsa_params
from ballsparse.processing.geom.cloud_io import load_point_cloud
from ballsparse.processing.training.dataset import synthetic_cloud
from ballsparse.processing.utils.array_utils import make_rng, resolve_dtype
from ballsparse.processing.utils.table_utils import write_csv
from .requests import RfRequest

logger = logging.getLogger(__name__)

RF_COLUMNS = ["token", "in_ball", "in_selection", "in_compression"]


def compute_receptive_field(request: RfRequest) -> ReceptiveField:
    """One seeded attention layer over the cloud, then the field of request.token"""
    config = request.bsa_config()
    rng = make_rng(request.seed)
    if request.points_file:
        points, _ = load_point_cloud(Path(request.points_file))
    else:
        points = synthetic_cloud(request.n_points, rng).points
    if request.token >= points.n_points:
        raise InvalidArgumentError(f"Token {request.token} out of range [0, {points.n_points})")

    tree, layer_config = prepare_layout(points, config)
    dtype = resolve_dtype(request.precision)
    params = init_bsa_params(layer_config, rng, dtype)
    x = rng.standard_normal((points.n_points, layer_config.model_dim)).astype(dtype)
    _, ws = bsa_forward(x, tree, layer_config, params)
    return receptive_field(tree, layer_config, ws.plan, request.token)


def receptive_field_table(field: ReceptiveField) -> pd.DataFrame:
    return pd.DataFrame({
        "token": np.arange(len(field.in_ball)),
        "in_ball": field.in_ball.astype(int),
        "in_selection": field.in_selection.astype(int),
        "in_compression": field.in_compression.astype(int),
    })


def cmd_rf(request: RfRequest) -> int:
    """Per-token membership CSV (0/1 flags) for the query token"""
    field = compute_receptive_field(request)
    logger.info(
        f"Token {field.token}: {int(field.in_ball.sum())} via ball, "
        f"{int(field.in_selection.sum())} via selection, "
        f"{int(field.in_compression.sum())} via compression, {int(field.union.sum())} total"
    )
    table = receptive_field_table(field)
    write_csv(table.to_dict("records"), Path(request.out) if request.out else None, columns=RF_COLUMNS)
    return EXIT_CODES["ok"]

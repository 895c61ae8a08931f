"""
Tests for the analytic FLOP model
"""

import pytest

from ballsparse.exceptions import InvalidArgumentError
from ballsparse.processing.attention.params import BsaConfig
from ballsparse.processing.cost.model import (
    CostReport,
    flops_attend,
    flops_bsa,
    flops_full,
    flops_projections,
    full_attention_report,
)


def test_full_attention_at_one_point():
    d = 4
    attention = 2 * d + 5 + 2 * d
    assert flops_attend(1, 1, d) == attention
    assert flops_full(1, d, 1, 1) == attention + flops_projections(1, d, 1, d)


def test_attention_term_is_quadratic():
    assert flops_attend(2048, 2048, 16) == 4 * flops_attend(1024, 1024, 16)


def test_doubling_n_is_diluted_by_projections():
    config = BsaConfig()
    ratio = flops_full(4096, config.head_dim, config.heads, 1, config.model_dim) / flops_full(
        2048, config.head_dim, config.heads, 1, config.model_dim
    )
    assert 3.6 <= ratio <= 4.0
    assert ratio == pytest.approx(3.89, abs=0.01)


def test_depth_scales_linearly():
    assert flops_full(512, 16, 4, 18) == 18 * flops_full(512, 16, 4, 1)
    report = flops_bsa(512, BsaConfig(), depth=3)
    assert report.model_total == 3 * report.total


def test_saturated_sparse_layer_costs_at_least_dense_attention():
    n = 256
    config = BsaConfig(ball_size=n, top_k=n, block_len=1, group_size=1, ball_masking=False)
    report = flops_bsa(n, config)
    assert report.attention_total >= config.heads * flops_attend(n, n, config.head_dim)


def test_group_compression_divides_compression_cost_by_block_len():
    n = 4096
    plain = flops_bsa(n, BsaConfig())
    grouped = flops_bsa(n, BsaConfig(group_compression=True))
    assert grouped.flops_cmp * BsaConfig().block_len == plain.flops_cmp


@pytest.mark.parametrize("n", [1024, 4096])
def test_variant_ordering(n):
    totals = {
        variant: flops_bsa(n, BsaConfig(), variant, depth=18).model_total
        for variant in ("bsa-gc", "bsa", "bsa-nogroup", "full")
    }
    assert totals["bsa-gc"] < totals["bsa"] < totals["bsa-nogroup"] < totals["full"]


def test_full_variant_matches_dense_report():
    config = BsaConfig()
    via_variant = flops_bsa(4096, config, "full")
    dense = full_attention_report(4096, config)
    assert via_variant.flops_ball == dense.flops_ball
    assert via_variant.flops_proj == dense.flops_proj


@pytest.mark.parametrize("variant", ["full", "bsa", "bsa-nogroup", "bsa-gc"])
def test_cost_grows_with_n(variant):
    totals = [flops_bsa(n, BsaConfig(), variant).total for n in (256, 512, 1024, 2048, 4096)]
    assert totals == sorted(totals)
    assert len(set(totals)) == len(totals)


def test_scoring_cost_falls_with_group_size():
    scoring = [
        flops_bsa(4096, BsaConfig(group_size=g)).flops_scoring
        for g in (8, 16, 32)
    ]
    assert scoring[0] > scoring[1] > scoring[2]


def test_per_token_selection_scores_every_query():
    config = BsaConfig()
    grouped = flops_bsa(4096, config).flops_scoring
    per_token = flops_bsa(4096, config, "bsa-nogroup").flops_scoring
    assert per_token > grouped


def test_single_point_sparse_layer():
    report = flops_bsa(1, BsaConfig())
    assert report.total > 0
    assert report.flops_ball > 0


def test_report_rows():
    report = flops_bsa(1024, BsaConfig(), "bsa")
    row = report.to_row()
    assert row["n"] == 1024 and row["variant"] == "bsa"
    assert row["total"] == report.total
    assert "n_points" not in row


@pytest.mark.parametrize("bad", [0, -1])
def test_invalid_sizes(bad):
    with pytest.raises(InvalidArgumentError):
        flops_full(bad, 16, 4, 1)
    with pytest.raises(InvalidArgumentError):
        flops_bsa(bad, BsaConfig())
    with pytest.raises(InvalidArgumentError):
        flops_bsa(256, BsaConfig(), depth=bad)


def test_negative_part_rejected():
    with pytest.raises(InvalidArgumentError):
        CostReport(n_points=1, variant="custom", depth=1, flops_ball=-1)


def test_unknown_variant():
    with pytest.raises(InvalidArgumentError):
        flops_bsa(256, BsaConfig(), "sparse")

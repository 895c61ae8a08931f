"""
Invariant and oracle suite
Compares the attention kernels against the loop-based references, checks
structural invariants, runs the finite-difference gradient suite and the
FLOP ordering
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from ballsparse.config import CHECK_CONFIG, EXIT_CODES
from ballsparse.oracle.gradient import fd_vjp_check, sample_coordinates, selection_margin
from ballsparse.oracle.reference import (
    ball_block_reference,
    brute_force_topk,
    dense_reference,
    gather_then_dense_reference,
)
from ballsparse.processing.attention.branches import (
    SelectionPlan,
    ball_attention,
    build_selection_plan,
    compress_blocks,
    compressed_attention,
    group_average_scores,
    group_compressed_attention,
    importance_scores,
    pool_group_queries,
    select_topk,
    selection_attention,
)
from ballsparse.processing.attention.layer import model_forward, model_vjp, prepare_layout, receptive_field
from ballsparse.processing.attention.params import BsaConfig, PhiWeights, init_model_params
from ballsparse.processing.cost.model import flops_bsa
from ballsparse.processing.geom.ball_tree import PointCloud, build_ball_tree
from ballsparse.processing.utils.array_utils import make_rng
from ballsparse.processing.utils.table_utils import format_key_values
from .requests import CheckRequest

logger = logging.getLogger(__name__)

# Point count and depth for the FLOP ordering check
ORDERING_N = 4096
ORDERING_DEPTH = 18


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _qkv(rng: np.random.Generator, heads: int, n: int, d: int):
    return tuple(rng.standard_normal((heads, n, d)) for _ in range(3))


def check_saturation(request: CheckRequest) -> CheckResult:
    """With one ball, every block selected and l = 1, each branch is dense attention"""
    rng = make_rng(request.seed)
    worst = 0.0
    for n in CHECK_CONFIG["saturation_sizes"]:
        tree = build_ball_tree(PointCloud(rng.standard_normal((n, 3))), n)
        config = BsaConfig(
            ball_size=n, block_len=1, top_k=n, group_size=1, heads=1, head_dim=8, model_dim=8,
            group_selection=False, query_coarsening=False, ball_masking=False,
        )
        q, k, v = _qkv(rng, 1, n, 8)
        dense = dense_reference(q[0], k[0], v[0])

        ball, _ = ball_attention(q, k, v, tree, keep_workspace=False)
        kc, coarse_valid, _ = compress_blocks(k, 1, PhiWeights(kind="mean"), tree.valid_mask)
        vc, _, _ = compress_blocks(v, 1, PhiWeights(kind="mean"), tree.valid_mask)
        cmp, _ = compressed_attention(q, kc, vc, coarse_valid, keep_workspace=False)
        plan = build_selection_plan(q, kc, coarse_valid, tree, config, keep_scores=False)
        slc, _ = selection_attention(q, k, v, plan, tree.valid_mask, keep_workspace=False)

        for out in (ball, cmp, slc):
            worst = max(worst, float(np.max(np.abs(out[0] - dense))))
    passed = worst <= CHECK_CONFIG["oracle_tolerance"]
    return CheckResult("saturation", passed, f"max_abs={worst:.3e}")


def check_topk(request: CheckRequest) -> CheckResult:
    """select_topk against a full stable sort on rows with many ties"""
    rng = make_rng(request.seed)
    mismatches = 0
    for _ in range(CHECK_CONFIG["topk_rows"]):
        n_b = int(rng.integers(2, 17))
        scores = rng.integers(0, 4, size=n_b).astype(np.float64)
        excluded = rng.random(n_b) < 0.3
        candidates = int((~excluded).sum())
        if candidates == 0:
            excluded[:] = False
            candidates = n_b
        k = int(rng.integers(1, candidates + 1))
        got = select_topk(scores, k, excluded, prefer_low_index=not request.corrupt_tie_rule)
        if not np.array_equal(got, brute_force_topk(scores, k, excluded)):
            mismatches += 1
    return CheckResult("topk_bruteforce", mismatches == 0, f"mismatches={mismatches}")


def check_branch_oracles(request: CheckRequest) -> CheckResult:
    """Ball and selection branches against block-diagonal and gather-then-dense references"""
    rng = make_rng(request.seed + 1)
    worst = 0.0
    for _ in range(CHECK_CONFIG["oracle_cases"]):
        ell = int(rng.choice([1, 2, 4]))
        m = ell * int(rng.choice([2, 4]))
        g = int(rng.choice([g for g in (1, 2, 4) if m % g == 0]))
        n = int(rng.integers(2 * m + 1, 5 * m + 1))
        tree = build_ball_tree(PointCloud(rng.standard_normal((n, 3))), m)
        config = BsaConfig(
            ball_size=m, block_len=ell, top_k=int(rng.integers(1, m // ell + 1)), group_size=g,
            heads=1, head_dim=4, model_dim=4,
            group_selection=g > 1, query_coarsening=False, ball_masking=True,
        )
        config.check_capacity(config.resolve(n))

        q, k, v = _qkv(rng, 1, tree.n_padded, 4)
        valid = tree.valid_mask
        ball, _ = ball_attention(q, k, v, tree, keep_workspace=False)
        worst = max(worst, float(np.max(np.abs(ball[0] - ball_block_reference(q[0], k[0], v[0], m, valid)))))

        kc, coarse_valid, _ = compress_blocks(k, ell, PhiWeights(kind="mean"), valid)
        plan = build_selection_plan(q, kc, coarse_valid, tree, config)
        slc, _ = selection_attention(q, k, v, plan, valid, keep_workspace=False)
        reference = gather_then_dense_reference(q[0], k[0], v[0], plan.indices, plan.group_size, ell, valid)
        worst = max(worst, float(np.max(np.abs(slc[0] - reference))))

    passed = worst <= CHECK_CONFIG["oracle_tolerance"]
    return CheckResult("branch_oracles", passed, f"max_abs={worst:.3e}")


def shares_group_selection(plan: SelectionPlan, group_size: int, n_slots: int) -> bool:
    """Every query of a group of `group_size` slots uses the same selected block row"""
    if plan.n_groups * plan.group_size != n_slots or n_slots % group_size:
        return False
    slot_rows = np.stack([plan.blocks_for_slot(slot) for slot in range(n_slots)])
    per_group = slot_rows.reshape(n_slots // group_size, group_size, -1)
    return bool(np.all(per_group == per_group[:, :1]))


def check_structure(request: CheckRequest) -> CheckResult:
    """Structural invariants of selection plans, group compression and receptive fields"""
    rng = make_rng(request.seed + 2)
    n, m, ell, g = 200, 32, 4, 4
    tree = build_ball_tree(PointCloud(rng.standard_normal((n, 3))), m)
    valid = tree.valid_mask
    config = BsaConfig(ball_size=m, block_len=ell, top_k=3, group_size=g, heads=2, head_dim=4, model_dim=8)
    q, k, v = _qkv(rng, 2, tree.n_padded, 4)
    kc, coarse_valid, _ = compress_blocks(k, ell, PhiWeights(kind="mean"), valid)
    vc, _, _ = compress_blocks(v, ell, PhiWeights(kind="mean"), valid)
    qc, cq_valid, _ = compress_blocks(q, ell, PhiWeights(kind="mean"), valid)
    failures = []

    # averaging scores within a group equals scoring the pooled query
    token_scores = importance_scores(q, kc).sum(axis=0)
    pooled_scores = importance_scores(pool_group_queries(q, g, valid), kc).sum(axis=0)
    if not np.allclose(group_average_scores(token_scores, g, valid), pooled_scores, rtol=1e-10, atol=1e-10):
        failures.append("group_average_equivalence")

    plan = build_selection_plan(q, kc, coarse_valid, tree, config, qc=qc, coarse_query_valid=cq_valid)
    if not shares_group_selection(plan, g, tree.n_padded):
        failures.append("group_consistency")

    block_ball = (plan.indices * ell) // m
    group_ball = (np.arange(plan.n_groups) * g // m)[:, None]
    if np.any(block_ball == group_ball) or np.any(~coarse_valid[plan.indices]):
        failures.append("mask_soundness")

    repeated, _ = group_compressed_attention(qc, kc, vc, coarse_valid, ell, tree.n_padded, keep_workspace=False)
    runs = repeated.reshape(2, -1, ell, 4)
    if not np.all(runs == runs[:, :, :1, :]):
        failures.append("repeat_structure")

    ball_only = config.model_copy(update={"branches": ("ball",)})
    ball_slc = config.model_copy(update={"branches": ("ball", "slc")})
    for t in rng.choice(n, size=20, replace=False):
        small = receptive_field(tree, ball_only, plan, int(t)).union
        middle = receptive_field(tree, ball_slc, plan, int(t)).union
        full = receptive_field(tree, config, plan, int(t)).union
        if np.any(small & ~middle) or np.any(middle & ~full) or not full.all():
            failures.append(f"receptive_field[{t}]")
            break

    return CheckResult("structure", not failures, ",".join(failures) or "ok")


class NearTieError(Exception):
    """A selection decision sits too close to a tie for finite differences"""


def model_gradient_error(seed: int) -> float:
    """
    Worst relative VJP error of a seeded N=32, C=8, depth-2 model in float64

    Checks every input-feature coordinate and two sampled coordinates of each
    parameter, with the selection plans of the forward pass held fixed.
    Raises NearTieError when a top-k margin is below 1e-6.
    """
    rng = make_rng(seed)
    dtype = np.float64
    n, n_features = 32, 2
    config = BsaConfig(
        ball_size=8, block_len=2, top_k=2, group_size=2, heads=2, head_dim=4, model_dim=8,
        phi_kind="mlp" if seed % 2 else "mean", group_compression=bool(seed % 2),
    )
    points = PointCloud(rng.standard_normal((n, 3)))
    features = rng.standard_normal((n, n_features)).astype(dtype)
    tree, layer_config = prepare_layout(points, config)
    params = init_model_params(layer_config, 3 + n_features, 2, rng, dtype)
    for block in params.blocks:
        for gate in (block.gates.ball, block.gates.cmp, block.gates.slc):
            gate[:] = rng.standard_normal(gate.shape)

    pred, ws = model_forward(points, features, layer_config, params, tree=tree)
    plans = ws.plans
    for plan in plans:
        if plan is not None and plan.scores is not None:
            if np.min(selection_margin(plan.scores, plan.top_k, plan.excluded)) < 1e-6:
                raise NearTieError()
    grad_pred = rng.standard_normal(pred.shape)
    grad_inputs, grads = model_vjp(ws, params, grad_pred)

    def run(feat: np.ndarray) -> np.ndarray:
        return model_forward(points, feat, layer_config, params, tree=tree, plans=plans, keep_workspace=False)[0]

    named = params.named_arrays()
    scale = max(
        float(np.max(np.abs(grad_inputs[:, 3:]))),
        max(float(np.max(np.abs(g))) for g in grads.values()),
    )
    worst = fd_vjp_check(
        run, features, grad_pred, grad_inputs[:, 3:], step=CHECK_CONFIG["fd_step"], scale=scale
    ).max_rel_error

    for name in sorted(named):
        array = named[name]
        coords = sample_coordinates(array.shape, 2, rng)

        def run_param(values: np.ndarray, array=array) -> np.ndarray:
            saved = array.copy()
            array[...] = values
            try:
                return run(features)
            finally:
                array[...] = saved

        report = fd_vjp_check(run_param, array.copy(), grad_pred, grads[name], step=CHECK_CONFIG["fd_step"], coords=coords, scale=scale)
        worst = max(worst, report.max_rel_error)
    return worst


def check_gradients(request: CheckRequest) -> CheckResult:
    """End-to-end model VJP (selection frozen) against central differences, always in float64"""
    worst = 0.0
    seed = request.seed
    checked = 0
    while checked < CHECK_CONFIG["gradient_seeds"]:
        try:
            worst = max(worst, model_gradient_error(seed))
            checked += 1
        except NearTieError:
            logger.debug(f"Gradient case {seed} has a near-tied selection, resampling")
        seed += 1
    return CheckResult("gradients", worst <= CHECK_CONFIG["fd_tolerance_high"], f"max_rel={worst:.3e} seeds={checked}")


def check_flop_ordering(request: CheckRequest) -> CheckResult:
    """group compression < standard < without group selection < full, at the default sparse parameters"""
    base = BsaConfig()
    totals = {
        variant: flops_bsa(ORDERING_N, base, variant, depth=ORDERING_DEPTH).model_total
        for variant in ("bsa-gc", "bsa", "bsa-nogroup", "full")
    }
    ordered = totals["bsa-gc"] < totals["bsa"] < totals["bsa-nogroup"] < totals["full"]
    detail = " ".join(f"{k}={v}" for k, v in totals.items())
    return CheckResult("flop_ordering", ordered, detail)


SUITE: List[Callable[[CheckRequest], CheckResult]] = [
    check_saturation,
    check_topk,
    check_branch_oracles,
    check_structure,
    check_gradients,
    check_flop_ordering,
]


def run_suite(request: CheckRequest) -> List[CheckResult]:
    logger.info("=" * 60)
    logger.info("STARTING CHECK SUITE")
    logger.info("=" * 60)
    results = []
    for i, check in enumerate(SUITE, start=1):
        logger.info(f"Step {i}: {check.__name__}")
        result = check(request)
        logger.info(f"{result.name}: {'pass' if result.passed else 'FAIL'} ({result.detail})")
        results.append(result)
    return results


def cmd_check(request: CheckRequest) -> int:
    """
    Run the full suite and print a key=value report

    Returns:
        Exit status (0 when every check passes)
    """
    results = run_suite(request)
    report: Dict[str, object] = {}
    for result in results:
        report[f"{result.name}"] = "pass" if result.passed else "fail"
        report[f"{result.name}.detail"] = result.detail
    passed = all(r.passed for r in results)
    report["result"] = "pass" if passed else "fail"
    text = format_key_values(report)
    if request.out:
        Path(request.out).write_text(text)
        logger.info(f"Saved check report to {request.out}")
    else:
        print(text, end="")
    return EXIT_CODES["ok"] if passed else EXIT_CODES["check_failed"]

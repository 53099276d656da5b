import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opprune.errors import BudgetInfeasibleError, StalePolicyError
from opprune.flops import (
    PerLayerCounts,
    flops_reduction,
    layer_flops,
    layer_flops_split,
    module_proportions,
    policy_counts,
    policy_flops,
    truncate_to_budget,
)
from opprune.model import (
    DecoderConfig,
    DecoderShape,
    ModuleKind,
    Operation,
    Policy,
    SortedSequence,
    all_operations,
)
from opprune.reference import (
    LLAVA_7B_SHAPE,
    VISUAL_TOKENS,
    calibrate_non_visual,
    llava_7b_config,
    tiny_config,
    visual_split_layout,
)

from helpers import linear_scan_truncate


def test_layer_flops_toy_example():
    shape = DecoderShape(layers=1, hidden=2, kv_dim=2, mlp_dim=4)
    assert layer_flops(PerLayerCounts(1, 1, 1), shape) == 88


def test_layer_flops_empty_layer():
    shape = DecoderShape(layers=1, hidden=2, kv_dim=2, mlp_dim=4)
    assert layer_flops(PerLayerCounts(0, 0, 0), shape) == 0


def test_layer_flops_matches_closed_form():
    shape = DecoderShape(layers=1, hidden=7, kv_dim=5, mlp_dim=11)
    counts = PerLayerCounts(3, 4, 6)
    h, d, m = shape.hidden, shape.kv_dim, shape.mlp_dim
    expected = 2 * d * ((counts.n_out + 2 * counts.n_in) * h + 2 * counts.n_out * counts.n_in + counts.n_out * h)
    expected += 6 * counts.n_mlp * h * m
    assert layer_flops(counts, shape) == expected


def test_module_proportions_reference_shape():
    p_out, p_in, p_mlp = module_proportions(LLAVA_7B_SHAPE, 576)
    assert p_out == pytest.approx(0.1735, abs=0.005)
    assert p_in == pytest.approx(0.1735, abs=0.005)
    assert p_mlp == pytest.approx(0.6530, abs=0.005)
    assert p_out == p_in
    assert p_out + p_in + p_mlp == 1.0


def test_module_proportions_mlp_limit():
    shape = DecoderShape(layers=1, hidden=64, kv_dim=64, mlp_dim=10**9)
    _, _, p_mlp = module_proportions(shape, 128)
    assert p_mlp > 0.999


@given(st.integers(1, 4096), st.integers(1, 512), st.integers(1, 512), st.integers(1, 2048))
@settings(max_examples=100)
def test_module_proportions_symmetry(n, h, d, m):
    p_out, p_in, _ = module_proportions(DecoderShape(1, h, d, m), n)
    assert p_out == p_in


def test_policy_counts_empty_policy():
    cfg = tiny_config(layers=3)
    total = cfg.layout.total_tokens
    for counts in policy_counts(Policy.empty(cfg), cfg.layout, 3):
        assert counts == PerLayerCounts(total, total, total)


def test_policy_counts_mlp_everywhere():
    # 650 total tokens, redundant group of 432; pruning its MLP at every layer
    layout = visual_split_layout(critical=144, redundant=432, system=35, text=39)
    cfg = DecoderConfig(LLAVA_7B_SHAPE, layout)
    assert layout.total_tokens == 650
    ops = [Operation("visual_redundant", layer, ModuleKind.MLP) for layer in range(1, 33)]
    for counts in policy_counts(Policy.of(ops, cfg), layout, 32):
        assert counts.n_mlp == 218
        assert counts.n_out == 650 and counts.n_in == 650


def test_policy_counts_full_visual_prune_at_one_layer():
    cfg = tiny_config(layers=4)
    non_visual = cfg.layout.group("system").count + cfg.layout.group("text").count
    ops = [
        Operation(group, 3, module)
        for group in ("visual_critical", "visual_redundant")
        for module in ModuleKind
    ]
    rows = policy_counts(Policy.of(ops, cfg), cfg.layout, 4)
    assert rows[2] == PerLayerCounts(non_visual, non_visual, non_visual)
    total = cfg.layout.total_tokens
    assert rows[0] == PerLayerCounts(total, total, total)


def test_policy_flops_empty_ratio_one():
    cfg = tiny_config()
    report = policy_flops(Policy.empty(cfg), cfg)
    assert report.retained_ratio == 1.0
    assert report.total == report.baseline_total


def test_policy_flops_all_pruned_all_prunable_layout():
    from opprune.model import GroupKind, GroupSpec, TokenLayout

    layout = TokenLayout(
        groups=(
            GroupSpec("a", GroupKind.VISUAL_REDUNDANT, 3, prunable=True),
            GroupSpec("b", GroupKind.TEXT, 2, prunable=True),
        )
    )
    cfg = DecoderConfig(DecoderShape(3, 8, 8, 16), layout)
    policy = Policy.of(all_operations(layout, cfg.shape), cfg)
    assert policy_flops(policy, cfg).total == 0


def test_policy_flops_rejects_stale_policy():
    cfg = tiny_config()
    with pytest.raises(StalePolicyError):
        policy_flops(Policy.empty(tiny_config(redundant=7)), cfg)


def test_additivity_of_split():
    shape = DecoderShape(1, 13, 9, 21)
    for counts in (PerLayerCounts(5, 3, 7), PerLayerCounts(0, 4, 0), PerLayerCounts(6, 0, 2)):
        out, inn, mlp = layer_flops_split(counts, shape)
        assert out + inn + mlp == layer_flops(counts, shape)


def _random_policy(rng, cfg, ops):
    k = rng.randrange(0, len(ops) + 1)
    return Policy.of(rng.sample(ops, k), cfg)


def test_monotonicity_adding_ops_never_increases_flops():
    cfg = tiny_config(layers=5)
    ops = list(all_operations(cfg.layout, cfg.shape))
    rng = random.Random(7)
    for _ in range(50):
        policy = _random_policy(rng, cfg, ops)
        base = policy_flops(policy, cfg).total
        candidates = [op for op in ops if op not in policy.pruned]
        if not candidates:
            continue
        extra = rng.choice(candidates)
        grown = Policy(policy.pruned | {extra}, policy.config_digest)
        assert policy_flops(grown, cfg).total <= base


def test_marginal_deltas_sum_to_joint_cost():
    # deltas priced against the running policy recombine exactly; per-op
    # marginals priced in isolation would not, because of the attention cross term
    cfg = tiny_config(layers=5)
    ops = list(all_operations(cfg.layout, cfg.shape))
    rng = random.Random(21)
    for _ in range(25):
        policy_ops = rng.sample(ops, rng.randrange(1, len(ops)))
        rng.shuffle(policy_ops)
        running = Policy.empty(cfg)
        delta_sum = 0
        for op in policy_ops:
            before = policy_flops(running, cfg).total
            running = Policy(running.pruned | {op}, running.config_digest)
            delta_sum += before - policy_flops(running, cfg).total
        report = policy_flops(running, cfg)
        assert delta_sum == report.baseline_total - report.total


def test_token_pruning_is_constrained_operation_pruning():
    # pruning all three modules of a group from layer l onward prices each of
    # those layers exactly like a layout with the group removed
    cfg = tiny_config(layers=6)
    group = "visual_redundant"
    start = 3
    ops = [
        Operation(group, layer, module)
        for layer in range(start, 7)
        for module in ModuleKind
    ]
    report = policy_flops(Policy.of(ops, cfg), cfg)
    shrunk = cfg.layout.total_tokens - cfg.layout.group(group).count
    expected_deep = layer_flops(PerLayerCounts(shrunk, shrunk, shrunk), cfg.shape)
    full = cfg.layout.total_tokens
    expected_shallow = layer_flops(PerLayerCounts(full, full, full), cfg.shape)
    for layer, out, inn, mlp in report.per_layer:
        assert out + inn + mlp == (expected_deep if layer >= start else expected_shallow)


# ------------------------------------------------------------------ truncate


def _sequence_of(cfg, ops):
    return SortedSequence(
        config_digest=cfg.digest(),
        order=tuple(ops),
        free_head_len=0,
        cut_points=tuple(range(len(ops) + 1)),
    )


def test_truncate_zero_tau():
    cfg = tiny_config(layers=4)
    seq = _sequence_of(cfg, all_operations(cfg.layout, cfg.shape))
    k, policy = truncate_to_budget(seq, cfg, 0)
    assert k == 0 and policy.pruned == frozenset()


def test_truncate_full_sequence():
    cfg = tiny_config(layers=4)
    ops = all_operations(cfg.layout, cfg.shape)
    seq = _sequence_of(cfg, ops)
    full_reduction = flops_reduction(Policy.of(ops, cfg), cfg)
    k, policy = truncate_to_budget(seq, cfg, full_reduction)
    assert k == len(ops)
    assert policy.pruned == frozenset(ops)


def test_truncate_epsilon_above_prefix():
    cfg = tiny_config(layers=4)
    ops = list(all_operations(cfg.layout, cfg.shape))
    seq = _sequence_of(cfg, ops)
    j = 5
    r_j = flops_reduction(Policy.of(ops[:j], cfg), cfg)
    k, _ = truncate_to_budget(seq, cfg, r_j + 1)
    assert k == linear_scan_truncate(seq, cfg, r_j + 1)
    assert k > j


def test_truncate_infeasible_reports_max():
    cfg = tiny_config(layers=4)
    ops = list(all_operations(cfg.layout, cfg.shape))[:5]
    seq = _sequence_of(cfg, ops)
    max_reduction = flops_reduction(Policy.of(ops, cfg), cfg)
    with pytest.raises(BudgetInfeasibleError) as err:
        truncate_to_budget(seq, cfg, max_reduction + 1)
    assert err.value.max_reduction == max_reduction


def test_truncate_monotone_prefix_reductions():
    cfg = tiny_config(layers=4)
    rng = random.Random(3)
    ops = list(all_operations(cfg.layout, cfg.shape))
    rng.shuffle(ops)
    seq = _sequence_of(cfg, ops)
    last = 0
    for k in range(1, len(ops) + 1):
        red = flops_reduction(Policy.of(ops[:k], cfg), cfg)
        assert red >= last
        last = red


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_truncate_matches_linear_scan(seed):
    rng = random.Random(seed)
    cfg = tiny_config(layers=rng.randrange(2, 6))
    ops = list(all_operations(cfg.layout, cfg.shape))
    rng.shuffle(ops)
    ops = ops[: rng.randrange(1, len(ops) + 1)]
    seq = _sequence_of(cfg, ops)
    max_reduction = flops_reduction(Policy.of(ops, cfg), cfg)
    tau = rng.randrange(0, max_reduction + 2)
    expected = linear_scan_truncate(seq, cfg, tau)
    if expected is None:
        with pytest.raises(BudgetInfeasibleError):
            truncate_to_budget(seq, cfg, tau)
    else:
        k, policy = truncate_to_budget(seq, cfg, tau)
        assert k == expected
        assert policy.pruned == frozenset(ops[:k])


# --------------------------------------------------------------- calibration


def test_reference_calibration_zero_visual():
    cfg = llava_7b_config()
    ops = all_operations(cfg.layout, cfg.shape)
    report = policy_flops(Policy.of(ops, cfg), cfg)
    assert report.retained_ratio == pytest.approx(0.186, abs=0.001)


@pytest.mark.parametrize(
    "keep_fraction,expected",
    [(0.20, 0.35), (0.08, 0.25)],
)
def test_reference_visual_retention_ratios(keep_fraction, expected):
    non_visual = calibrate_non_visual(LLAVA_7B_SHAPE)
    keep = round(VISUAL_TOKENS * keep_fraction)
    layout = visual_split_layout(
        critical=keep,
        redundant=VISUAL_TOKENS - keep,
        system=35,
        text=non_visual - 35,
    )
    cfg = DecoderConfig(LLAVA_7B_SHAPE, layout)
    ops = [
        Operation("visual_redundant", layer, module)
        for layer in range(1, 33)
        for module in ModuleKind
    ]
    report = policy_flops(Policy.of(ops, cfg), cfg)
    assert report.retained_ratio == pytest.approx(expected, abs=0.01)

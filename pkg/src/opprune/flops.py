"""Exact theoretical-FLOPs accounting and budget-aware sequence truncation.

All FLOPs are exact Python integers (arbitrary precision, no overflow);
ratios are the only floating-point values. Costs must be computed jointly
per policy: the attention cross term couples MHA-out and MHA-in token
counts, so per-operation marginals depend on the rest of the policy.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import BudgetInfeasibleError, ConfigError, StalePolicyError
from .model import (
    DecoderConfig,
    DecoderShape,
    ModuleKind,
    Operation,
    Policy,
    SortedSequence,
    TokenLayout,
)


@dataclass(frozen=True)
class PerLayerCounts:
    """Tokens remaining in each module of one layer."""

    n_out: int
    n_in: int
    n_mlp: int

    def __post_init__(self):
        if min(self.n_out, self.n_in, self.n_mlp) < 0:
            raise ConfigError("token counts must be >= 0")


def layer_flops_split(counts: PerLayerCounts, shape: DecoderShape) -> tuple[int, int, int]:
    """Per-module FLOPs of one layer: (mha_out, mha_in, mlp).

    Attention linear projections: K and V cost 4*n_out*h*d (MHA-out); Q and
    the output projection cost 4*n_in*h*d (MHA-in). The two attention matmuls
    cost 2*n_out*n_in*d each and are split QK^T -> MHA-out, AV -> MHA-in,
    which reproduces the symmetric 17.5%/17.5% attention shares.
    """
    h, d, m = shape.hidden, shape.kv_dim, shape.mlp_dim
    cross = 2 * d * counts.n_out * counts.n_in
    mha_out = 4 * d * counts.n_out * h + cross
    mha_in = 4 * d * counts.n_in * h + cross
    mlp = 6 * counts.n_mlp * h * m
    return mha_out, mha_in, mlp


def layer_flops(counts: PerLayerCounts, shape: DecoderShape) -> int:
    """Total FLOPs of one layer: 2d((n_out + 2*n_in)h + 2*n_out*n_in + n_out*h) + 6*n_mlp*h*m."""
    out, inn, mlp = layer_flops_split(counts, shape)
    return out + inn + mlp


def module_proportions(shape: DecoderShape, n: int) -> tuple[float, float, float]:
    """Fractions of a uniform layer's FLOPs attributed to each module.

    ``n`` tokens participate in every module; the fractions sum to 1 exactly.
    """
    if n <= 0:
        raise ConfigError("token count must be positive")
    out, inn, mlp = layer_flops_split(PerLayerCounts(n, n, n), shape)
    total = out + inn + mlp
    p_out = out / total
    p_in = inn / total
    return p_out, p_in, 1.0 - (p_out + p_in)


def policy_counts(policy: Policy, layout: TokenLayout, layers: int) -> list[PerLayerCounts]:
    """Remaining token counts per layer under a policy.

    A group's tokens count toward a module at layer l unless (group, l, module)
    is pruned; non-prunable groups always count.
    """
    base = layout.total_tokens
    pruned = policy.pruned
    rows = []
    for layer in range(1, layers + 1):
        counts = [base, base, base]
        for g in layout.prunable_groups:
            for module in ModuleKind:
                if Operation(g.id, layer, module) in pruned:
                    counts[int(module)] -= g.count
        rows.append(PerLayerCounts(*counts))
    return rows


@dataclass(frozen=True)
class FlopsReport:
    """Per-layer and total FLOPs of a policy against its empty-policy baseline."""

    per_layer: tuple[tuple[int, int, int, int], ...]  # (layer, mha_out, mha_in, mlp)
    total: int
    baseline_total: int

    @property
    def retained_ratio(self) -> float:
        return self.total / self.baseline_total

    @property
    def reduction(self) -> int:
        return self.baseline_total - self.total


def policy_flops(policy: Policy, config: DecoderConfig) -> FlopsReport:
    """Price a policy: joint per-layer costs, total, and ratio to baseline."""
    if policy.config_digest != config.digest():
        raise StalePolicyError(
            f"policy digest {policy.config_digest} does not match config {config.digest()}"
        )
    shape, layout = config.shape, config.layout
    rows = []
    total = 0
    for layer, counts in enumerate(policy_counts(policy, layout, shape.layers), start=1):
        out, inn, mlp = layer_flops_split(counts, shape)
        rows.append((layer, out, inn, mlp))
        total += out + inn + mlp
    n = layout.total_tokens
    baseline_total = shape.layers * layer_flops(PerLayerCounts(n, n, n), shape)
    return FlopsReport(tuple(rows), total, baseline_total)


def flops_reduction(policy: Policy, config: DecoderConfig) -> int:
    report = policy_flops(policy, config)
    return report.reduction


def truncate_to_budget(
    sequence: SortedSequence, config: DecoderConfig, tau: float
) -> tuple[int, Policy]:
    """Shortest truncation of the sequence whose FLOPs reduction meets tau.

    Scans the sequence's cut points (every index for unfused sequences) with
    incremental exact-integer cost updates and returns the minimal prefix
    length k with reduction(prefix_k) >= tau, plus that prefix as a policy.
    tau <= 0 yields the empty policy. Raises BudgetInfeasibleError carrying
    the maximal achievable reduction when tau exceeds it.
    """
    if sequence.config_digest != config.digest():
        raise StalePolicyError(
            f"sequence digest {sequence.config_digest} does not match config {config.digest()}"
        )
    if tau <= 0:
        return 0, Policy.empty(config)
    shape, layout = config.shape, config.layout
    base = layout.total_tokens
    counts = [[base, base, base] for _ in range(shape.layers)]
    layer_cost = [layer_flops(PerLayerCounts(base, base, base), shape)] * shape.layers
    cuts = set(sequence.cut_points)
    reduction = 0
    for idx, op in enumerate(sequence.order, start=1):
        li = op.layer - 1
        counts[li][int(op.module)] -= layout.group(op.group).count
        fresh = layer_flops(PerLayerCounts(*counts[li]), shape)
        reduction += layer_cost[li] - fresh
        layer_cost[li] = fresh
        if idx in cuts and reduction >= tau:
            return idx, Policy(frozenset(sequence.order[:idx]), sequence.config_digest)
    raise BudgetInfeasibleError(
        f"requested reduction {tau} exceeds the {reduction} achievable by this sequence",
        max_reduction=reduction,
    )

"""Independent reference implementations used as test oracles.

Nothing here calls into the code paths it checks: greedy sorting is
re-derived by subset re-scoring, truncation by full-recompute linear scan,
the decoder by a plain full-matrix forward pass.
"""

import math

import numpy as np

from opprune.evaluators import SyntheticOracleSpec, oracle_evaluate
from opprune.flops import policy_flops
from opprune.model import (
    DecoderConfig,
    GroupKind,
    GroupSpec,
    Operation,
    Policy,
    SortedSequence,
    TokenLayout,
    operation_sort_key,
)


def single_group_config(layers=4, group="g", count=4, context=2):
    from opprune.model import DecoderShape

    layout = TokenLayout(
        groups=(
            GroupSpec("ctx", GroupKind.SYSTEM, context),
            GroupSpec(group, GroupKind.VISUAL_REDUNDANT, count, prunable=True),
        )
    )
    return DecoderConfig(DecoderShape(layers, 16, 16, 32), layout)


def brute_force_greedy(spec: SyntheticOracleSpec, config: DecoderConfig, ops) -> list[Operation]:
    """Subset-rescoring greedy reference: every step re-scores every
    admissible candidate from scratch and keeps the best, ties broken by
    canonical order. Admissibility is re-derived here from partner links."""
    layout = config.layout
    remaining = set(ops)
    chosen: list[Operation] = []
    while remaining:
        admissible = []
        for op in remaining:
            partner = layout.group(op.group).redundancy_partner
            if partner is not None and Operation(partner, op.layer, op.module) in remaining:
                continue
            admissible.append(op)
        admissible.sort(key=lambda o: operation_sort_key(o, layout))
        best_op, best_score = None, None
        for op in admissible:
            score = oracle_evaluate(spec, frozenset(chosen) | {op})
            if best_score is None or score > best_score:
                best_op, best_score = op, score
        chosen.append(best_op)
        remaining.remove(best_op)
    return chosen


def linear_scan_truncate(sequence: SortedSequence, config: DecoderConfig, tau):
    """Minimal cut point whose full-recompute reduction meets tau; None if
    infeasible."""
    if tau <= 0:
        return 0
    for k in sequence.cut_points:
        if k == 0:
            continue
        policy = Policy(frozenset(sequence.order[:k]), config.digest())
        if policy_flops(policy, config).reduction >= tau:
            return k
    return None


def linear_scan_free_layer(spec, config, group, module, lo, hi):
    """Smallest start layer in [lo, hi] whose full-suffix pruning scores at
    least baseline; layers+1 if none does."""
    layers = config.shape.layers
    baseline = oracle_evaluate(spec, ())
    for start in range(lo, hi + 1):
        ops = frozenset(Operation(group, layer, module) for layer in range(start, layers + 1))
        if oracle_evaluate(spec, ops) >= baseline:
            return start
    return layers + 1


def _silu(x):
    return x / (1.0 + np.exp(-x))


def vanilla_forward(spec, weights, tokens):
    """Plain decoder forward with no masking machinery at all."""
    hidden = weights["embed"][np.asarray(tokens, dtype=np.intp)] + weights["pos"]
    n = hidden.shape[0]
    causal = np.tril(np.ones((n, n), dtype=bool))
    for layer in range(1, spec.shape.layers + 1):
        keys = hidden @ weights[f"wk{layer}"]
        values = hidden @ weights[f"wv{layer}"]
        queries = hidden @ weights[f"wq{layer}"]
        scores = (queries @ keys.T) / math.sqrt(spec.shape.kv_dim)
        scores = np.where(causal, scores, -np.inf)
        scores = scores - scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn = attn / attn.sum(axis=1, keepdims=True)
        hidden = hidden + (attn @ values) @ weights[f"wo{layer}"]
        gated = _silu(hidden @ weights[f"wg{layer}"]) * (hidden @ weights[f"wu{layer}"])
        hidden = hidden + gated @ weights[f"wd{layer}"]
    return hidden @ weights["unembed"]


def attention_only_forward(spec, weights, tokens):
    """Reference network with the feed-forward blocks removed outright."""
    hidden = weights["embed"][np.asarray(tokens, dtype=np.intp)] + weights["pos"]
    n = hidden.shape[0]
    causal = np.tril(np.ones((n, n), dtype=bool))
    for layer in range(1, spec.shape.layers + 1):
        keys = hidden @ weights[f"wk{layer}"]
        values = hidden @ weights[f"wv{layer}"]
        queries = hidden @ weights[f"wq{layer}"]
        scores = (queries @ keys.T) / math.sqrt(spec.shape.kv_dim)
        scores = np.where(causal, scores, -np.inf)
        scores = scores - scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn = attn / attn.sum(axis=1, keepdims=True)
        hidden = hidden + (attn @ values) @ weights[f"wo{layer}"]
    return hidden @ weights["unembed"]


def forward_with_drop(spec, weights, tokens, keep_positions, drop_layer):
    """Vanilla layers, physically slicing away dropped rows at drop_layer."""
    hidden = weights["embed"][np.asarray(tokens, dtype=np.intp)] + weights["pos"]
    keep = np.asarray(sorted(keep_positions), dtype=np.intp)
    for layer in range(1, spec.shape.layers + 1):
        if layer == drop_layer:
            hidden = hidden[keep]
        n = hidden.shape[0]
        causal = np.tril(np.ones((n, n), dtype=bool))
        keys = hidden @ weights[f"wk{layer}"]
        values = hidden @ weights[f"wv{layer}"]
        queries = hidden @ weights[f"wq{layer}"]
        scores = (queries @ keys.T) / math.sqrt(spec.shape.kv_dim)
        scores = np.where(causal, scores, -np.inf)
        scores = scores - scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn = attn / attn.sum(axis=1, keepdims=True)
        hidden = hidden + (attn @ values) @ weights[f"wo{layer}"]
        gated = _silu(hidden @ weights[f"wg{layer}"]) * (hidden @ weights[f"wu{layer}"])
        hidden = hidden + gated @ weights[f"wd{layer}"]
    return hidden @ weights["unembed"]


def random_oracle(rng, ops, base=100.0, interactions=True, max_pairs=6):
    """Randomized oracle spec over a fixed op list, for equivalence sweeps."""
    weights = tuple((op, float(rng.uniform(0.0, 2.0))) for op in ops)
    pairs = ()
    if interactions and len(ops) >= 2:
        count = int(rng.integers(0, max_pairs + 1))
        chosen = []
        for _ in range(count):
            i, j = rng.choice(len(ops), size=2, replace=False)
            chosen.append((ops[int(i)], ops[int(j)], float(rng.uniform(-1.0, 1.0))))
        pairs = tuple(chosen)
    return SyntheticOracleSpec(base=base, weights=weights, interactions=pairs)

"""Masked forward pass of the tiny seeded decoder.

Per layer, the policy induces three token index sets: I_o (contributes keys
and values), I_i (is updated by attention), and I_p (runs the feed-forward).
Keys/values are gathered over exactly I_o and queries over exactly I_i, so a
fully retained layer performs the same arithmetic, in the same order, as a
plain decoder layer, and physically dropping a group's tokens is bit-identical
to pruning all three of its modules from that layer on.
"""

from __future__ import annotations

import math
import sys
from typing import Iterable

import numpy as np

from .errors import AttentionDegenerateError
from .evaluators import ToyDecoderSpec
from .model import ModuleKind, Operation, TokenLayout

# score assigned to a sample whose forward pass is attention-degenerate:
# accuracy bottoms out at 0, log-likelihood at the smallest positive double
_MLL_FLOOR = math.log(sys.float_info.min)


def build_weights(spec: ToyDecoderSpec) -> dict[str, np.ndarray]:
    """Deterministic pseudo-random parameters keyed by the spec seed."""
    rng = np.random.default_rng(spec.seed)
    h, d, m = spec.shape.hidden, spec.shape.kv_dim, spec.shape.mlp_dim
    n = spec.layout.total_tokens

    def mat(rows, cols, scale):
        return rng.normal(0.0, scale, size=(rows, cols))

    # embedding scale < 1 keeps the gated MLP's quadratic residual growth
    # contractive over the (norm-free) layer stack
    weights: dict[str, np.ndarray] = {
        "embed": mat(spec.vocab_size, h, 0.5),
        "pos": mat(n, h, 0.5),
        "unembed": mat(h, spec.vocab_size, 1.0 / math.sqrt(h)),
    }
    for layer in range(1, spec.shape.layers + 1):
        weights[f"wq{layer}"] = mat(h, d, 1.0 / math.sqrt(h))
        weights[f"wk{layer}"] = mat(h, d, 1.0 / math.sqrt(h))
        weights[f"wv{layer}"] = mat(h, d, 1.0 / math.sqrt(h))
        weights[f"wo{layer}"] = mat(d, h, 1.0 / math.sqrt(d))
        weights[f"wg{layer}"] = mat(h, m, 1.0 / math.sqrt(h))
        weights[f"wu{layer}"] = mat(h, m, 1.0 / math.sqrt(h))
        weights[f"wd{layer}"] = mat(m, h, 1.0 / math.sqrt(m))
    return weights


def silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # exp(-x) -> inf gives the correct 0 limit
        return x / (1.0 + np.exp(-x))


def index_sets(
    layout: TokenLayout, pruned: frozenset[Operation], layer: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ascending token indices participating in (MHA-out, MHA-in, MLP) at a layer."""
    positions = layout.group_positions()
    sets: list[list[int]] = [[], [], []]
    for g in layout.groups:
        for module in ModuleKind:
            if g.prunable and Operation(g.id, layer, module) in pruned:
                continue
            sets[int(module)].extend(positions[g.id])
    return tuple(np.array(sorted(s), dtype=np.intp) for s in sets)  # type: ignore[return-value]


def run_layer(
    hidden: np.ndarray,
    weights: dict[str, np.ndarray],
    layer: int,
    i_out: np.ndarray,
    i_in: np.ndarray,
    i_mlp: np.ndarray,
    kv_dim: int,
) -> np.ndarray | None:
    """One decoder layer over the given index sets, updating ``hidden`` in
    place; returns the attention matrix (queried x retained keys), or None
    when no token is queried."""
    attn = None
    if i_in.size:
        if i_out.size == 0:
            raise AttentionDegenerateError(
                f"layer {layer}: no keys to attend ({i_in.size} queried tokens)"
            )
        keys = hidden[i_out] @ weights[f"wk{layer}"]
        values = hidden[i_out] @ weights[f"wv{layer}"]
        queries = hidden[i_in] @ weights[f"wq{layer}"]
        scores = (queries @ keys.T) / math.sqrt(kv_dim)
        causal = i_out[None, :] <= i_in[:, None]
        if not causal.any(axis=1).all():
            bad = int(i_in[np.argmin(causal.any(axis=1))])
            raise AttentionDegenerateError(
                f"layer {layer}: token {bad} has no retained causal key"
            )
        scores = np.where(causal, scores, -np.inf)
        scores = scores - scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn = attn / attn.sum(axis=1, keepdims=True)
        hidden[i_in] += (attn @ values) @ weights[f"wo{layer}"]
    if i_mlp.size:
        x = hidden[i_mlp]
        gated = silu(x @ weights[f"wg{layer}"]) * (x @ weights[f"wu{layer}"])
        hidden[i_mlp] += gated @ weights[f"wd{layer}"]
    return attn


def masked_forward(
    spec: ToyDecoderSpec,
    weights: dict[str, np.ndarray],
    tokens: Iterable[int],
    pruned: frozenset[Operation],
) -> np.ndarray:
    """Logits (tokens x vocab) under a pruning policy's operation mask."""
    token_ids = np.asarray(list(tokens), dtype=np.intp)
    n = spec.layout.total_tokens
    if token_ids.shape != (n,):
        raise ValueError(f"expected {n} tokens, got {token_ids.shape}")
    hidden = weights["embed"][token_ids] + weights["pos"]
    for layer in range(1, spec.shape.layers + 1):
        i_out, i_in, i_mlp = index_sets(spec.layout, pruned, layer)
        run_layer(hidden, weights, layer, i_out, i_in, i_mlp, spec.shape.kv_dim)
    return hidden @ weights["unembed"]


def _log_softmax_at(row: np.ndarray, index: int) -> float:
    shift = row - row.max()
    return float(shift[index] - math.log(np.exp(shift).sum()))


def evaluate_metric(
    spec: ToyDecoderSpec, weights: dict[str, np.ndarray], pruned: frozenset[Operation]
) -> float:
    """Metric over the eval set; degenerate samples score at the metric floor."""
    floor = 0.0 if spec.metric == "accuracy" else _MLL_FLOOR
    scores = []
    for tokens, target in spec.eval_set:
        try:
            logits = masked_forward(spec, weights, tokens, pruned)
        except AttentionDegenerateError:
            scores.append(floor)
            continue
        last = logits[-1]
        if spec.metric == "accuracy":
            scores.append(1.0 if int(np.argmax(last)) == target else 0.0)
        else:
            scores.append(_log_softmax_at(last, target))
    return sum(scores) / len(scores)

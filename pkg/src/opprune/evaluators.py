"""Performance-scoring contract and the built-in evaluators.

Scores are raw real numbers, higher is better; any normalization happens in
threshold logic, never in evaluators. Every evaluator must be deterministic:
the same policy yields the same score on every call. ``call_count`` counts
only ``evaluate`` calls and backs the search's evaluation-budget assertions;
``baseline()`` is cached and uncounted.
"""

from __future__ import annotations

import abc
import threading
from dataclasses import dataclass
from typing import Iterable, Optional

from .model import ModuleKind, Operation, Policy, TokenLayout, DecoderShape


class Evaluator(abc.ABC):
    """Scores policies. Subclasses implement ``_score`` over the pruned set."""

    concurrency_safe: bool = False

    def __init__(self):
        self._calls = 0
        self._lock = threading.Lock()
        self._baseline: Optional[float] = None

    @property
    def call_count(self) -> int:
        return self._calls

    def evaluate(self, policy: Policy) -> float:
        score = self._score(policy.pruned)
        with self._lock:
            self._calls += 1
        return score

    def baseline(self) -> float:
        if self._baseline is None:
            self._baseline = self._score(frozenset())
        return self._baseline

    @abc.abstractmethod
    def _score(self, pruned: frozenset[Operation]) -> float:
        ...


@dataclass(frozen=True)
class SyntheticOracleSpec:
    """Closed-form redundancy oracle: base score minus per-operation weights
    minus pairwise interaction weights, with optional harmless depths that
    zero an operation's weight from a layer threshold onward.

    Weight and interaction entries are summed in listed order so independent
    implementations can reproduce scores bit-for-bit.
    """

    base: float
    weights: tuple[tuple[Operation, float], ...] = ()
    interactions: tuple[tuple[Operation, Operation, float], ...] = ()
    harmless_depth: tuple[tuple[str, ModuleKind, int], ...] = ()
    seed: int = 0

    def weight_of(self, op: Operation) -> float:
        for group, module, threshold in self.harmless_depth:
            if op.group == group and op.module == module and op.layer >= threshold:
                return 0.0
        for candidate, weight in self.weights:
            if candidate == op:
                return weight
        return 0.0


def oracle_evaluate(spec: SyntheticOracleSpec, pruned: Iterable[Operation]) -> float:
    """Exact oracle score for a pruned set, summed in the spec's entry order."""
    pruned_set = frozenset(pruned)
    score = spec.base
    for op, _ in spec.weights:
        if op in pruned_set:
            score -= spec.weight_of(op)
    for a, b, weight in spec.interactions:
        if a in pruned_set and b in pruned_set:
            score -= weight
    return score


class SyntheticOracle(Evaluator):
    """In-process evaluator over a SyntheticOracleSpec."""

    concurrency_safe = True

    def __init__(self, spec: SyntheticOracleSpec):
        super().__init__()
        self.spec = spec

    def _score(self, pruned: frozenset[Operation]) -> float:
        return oracle_evaluate(self.spec, pruned)


@dataclass(frozen=True)
class ToyDecoderSpec:
    """Tiny seeded decoder plus a fixed evaluation set.

    Weights are deterministic pseudo-random tensors keyed by ``seed``; the
    decoder is never trained, the search only exercises redundancy structure.
    """

    shape: DecoderShape
    layout: TokenLayout
    vocab_size: int
    seed: int
    eval_set: tuple[tuple[tuple[int, ...], int], ...]
    metric: str = "accuracy"  # or "mean_log_likelihood"

    def __post_init__(self):
        if self.metric not in ("accuracy", "mean_log_likelihood"):
            raise ValueError(f"unknown metric: {self.metric!r}")
        if not self.eval_set:
            raise ValueError("eval_set must be non-empty")
        n = self.layout.total_tokens
        for tokens, target in self.eval_set:
            if len(tokens) != n:
                raise ValueError(f"eval sample length {len(tokens)} != layout tokens {n}")
            if not 0 <= target < self.vocab_size:
                raise ValueError(f"target {target} outside vocab")


class ToyDecoder(Evaluator):
    """Evaluator running the masked toy-decoder forward over the eval set."""

    concurrency_safe = True

    def __init__(self, spec: ToyDecoderSpec, weights: Optional[dict] = None):
        from . import toydecoder

        super().__init__()
        self.spec = spec
        self.weights = weights if weights is not None else toydecoder.build_weights(spec)

    def _score(self, pruned: frozenset[Operation]) -> float:
        from . import toydecoder

        return toydecoder.evaluate_metric(self.spec, self.weights, pruned)


def random_eval_set(
    layout: TokenLayout, vocab_size: int, samples: int, seed: int
) -> tuple[tuple[tuple[int, ...], int], ...]:
    """Seeded random token sequences with random targets, for toy specs."""
    import numpy as np

    rng = np.random.default_rng(seed)
    n = layout.total_tokens
    out = []
    for _ in range(samples):
        tokens = tuple(int(t) for t in rng.integers(0, vocab_size, size=n))
        target = int(rng.integers(0, vocab_size))
        out.append((tokens, target))
    return tuple(out)


def self_labelled_toy_spec(
    shape: DecoderShape,
    layout: TokenLayout,
    vocab_size: int = 32,
    samples: int = 4,
    seed: int = 0,
    metric: str = "accuracy",
) -> ToyDecoderSpec:
    """Toy spec whose targets are the unpruned model's own predictions, so the
    baseline accuracy is exactly 1.0 and pruning damage is measurable."""
    import numpy as np

    from . import toydecoder

    raw = random_eval_set(layout, vocab_size, samples, seed)
    probe = ToyDecoderSpec(
        shape=shape, layout=layout, vocab_size=vocab_size, seed=seed, eval_set=raw, metric=metric
    )
    weights = toydecoder.build_weights(probe)
    labelled = []
    for tokens, _ in raw:
        logits = toydecoder.masked_forward(probe, weights, tokens, frozenset())
        labelled.append((tokens, int(np.argmax(logits[-1]))))
    return ToyDecoderSpec(
        shape=shape,
        layout=layout,
        vocab_size=vocab_size,
        seed=seed,
        eval_set=tuple(labelled),
        metric=metric,
    )

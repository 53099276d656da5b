"""Greedy operation sorting with adaptive re-evaluation and pre-sorting filtering.

Pipeline: pre-sorting filtering (binary search for free-to-prune deep-layer
operations, exclusion of danger-to-prune shallow critical-group operations),
then greedy sorting of the rest from most to least redundant, then budget
truncation. Naive mode re-scores every candidate at every step and doubles as
a verification oracle; adaptive mode reuses cached scores until a confirmation
falls below the active threshold.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import IO, Iterable, Optional, Sequence

from .errors import ConfigError, EvaluatorFailure, ScheduleError
from .evaluators import Evaluator
from .flops import FlopsReport, policy_flops, truncate_to_budget
from .model import (
    ConstraintFlags,
    DecoderConfig,
    ModuleKind,
    Operation,
    Policy,
    SortedSequence,
    StepRecord,
    admissible_candidates,
    all_operations,
    canonical_order,
    operation_sort_key,
    validate_policy,
)

Unit = tuple[Operation, ...]  # operations committed atomically (size 1, or 2 when flash-paired)


@dataclass(frozen=True)
class ThresholdSchedule:
    """Strictly decreasing performance thresholds gating score-cache reuse."""

    mu: tuple[float, ...]

    def __post_init__(self):
        if not self.mu:
            raise ScheduleError("threshold schedule must be non-empty")
        if any(a <= b for a, b in zip(self.mu, self.mu[1:])):
            raise ScheduleError("thresholds must be strictly decreasing")

    @property
    def count(self) -> int:
        return len(self.mu)


def default_thresholds(baseline: float, count: int = 15) -> ThresholdSchedule:
    """Arithmetic schedule from just below baseline down to 20% of baseline."""
    if baseline <= 0:
        raise ScheduleError("default thresholds need a positive baseline")
    if count < 1:
        raise ScheduleError("threshold count must be >= 1")
    mu = tuple(baseline * (1.0 - 0.8 * z / count) for z in range(1, count + 1))
    return ThresholdSchedule(mu)


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of the sorting pipeline.

    ``danger_layer`` excludes partner-holding (critical) groups' operations at
    layers <= danger_layer from pruning entirely. ``free_search_range`` bounds
    the binary search for free-to-prune layer suffixes; None means the last
    50% of layers. ``threshold_count`` sizes the default schedule when no
    explicit one is given.
    """

    schedule: Optional[ThresholdSchedule] = None
    threshold_count: int = 15
    danger_layer: int = 0
    free_search_range: Optional[tuple[int, int]] = None
    flash_pairing: bool = False
    tie_break: str = "canonical"
    mode: str = "adaptive"
    parallel_eval: bool = False

    def __post_init__(self):
        if self.mode not in ("adaptive", "naive"):
            raise ConfigError(f"unknown search mode: {self.mode!r}")
        if self.tie_break != "canonical":
            raise ConfigError(f"unsupported tie_break: {self.tie_break!r}")
        if self.threshold_count < 1:
            raise ConfigError("threshold_count must be >= 1")
        if self.danger_layer < 0:
            raise ConfigError("danger_layer must be >= 0")

    def validate_against(self, layers: int) -> None:
        if self.danger_layer >= layers:
            raise ConfigError(f"danger_layer {self.danger_layer} must be < layer count {layers}")
        lo, hi = self.resolved_free_range(layers)
        if not 1 <= lo <= hi <= layers:
            raise ConfigError(f"free_search_range [{lo}, {hi}] outside [1, {layers}]")

    def resolved_free_range(self, layers: int) -> tuple[int, int]:
        if self.free_search_range is not None:
            return self.free_search_range
        return (layers // 2 + 1, layers)

    @property
    def flags(self) -> ConstraintFlags:
        return ConstraintFlags(flash_pairing=self.flash_pairing)


class TraceWriter:
    """Collects trace records and optionally streams them as JSON lines.

    Records carry no timestamps so reruns are byte-identical; the stream is
    flushed per record so an aborted search keeps its partial trace.
    """

    def __init__(self, stream: Optional[IO[str]] = None):
        self.records: list[dict] = []
        self._stream = stream

    def emit(self, event: str, **payload) -> None:
        record = {"event": event, **payload}
        self.records.append(record)
        if self._stream is not None:
            self._stream.write(json.dumps(record, sort_keys=True) + "\n")
            self._stream.flush()


def _ops_json(ops: Iterable[Operation]) -> list[dict]:
    return [op.to_dict() for op in ops]


def _score_or_abort(evaluator: Evaluator, policy: Policy, trace: Optional[TraceWriter]) -> float:
    """Evaluate, converting any failure into EvaluatorFailure after recording
    an abort event so partial traces survive."""
    try:
        return evaluator.evaluate(policy)
    except Exception as exc:  # noqa: BLE001 - evaluator contract boundary
        if trace is not None:
            trace.emit("abort", reason=str(exc))
        if isinstance(exc, EvaluatorFailure):
            raise
        raise EvaluatorFailure(f"evaluator failed mid-search: {exc}") from exc


def _module_units(flash_pairing: bool) -> tuple[tuple[ModuleKind, ...], ...]:
    if flash_pairing:
        return ((ModuleKind.MHA_OUT, ModuleKind.MHA_IN), (ModuleKind.MLP,))
    return ((ModuleKind.MHA_OUT,), (ModuleKind.MHA_IN,), (ModuleKind.MLP,))


def binary_search_free(
    group: str,
    module: ModuleKind | Sequence[ModuleKind],
    evaluator: Evaluator,
    search: SearchConfig,
    config: DecoderConfig,
    trace: Optional[TraceWriter] = None,
) -> int:
    """Earliest layer from which pruning all (group, module) operations keeps
    performance at or above baseline; layers+1 if no layer in range qualifies.

    Lower-bound binary search on the qualification predicate, assumed
    monotone in the start layer (true by construction for harmless-depth
    oracles). Uses O(log range) evaluator calls.
    """
    modules = (module,) if isinstance(module, ModuleKind) else tuple(module)
    layers = config.shape.layers
    lo, hi = search.resolved_free_range(layers)
    if not 1 <= lo <= hi <= layers:
        raise ConfigError(f"free_search_range [{lo}, {hi}] outside [1, {layers}]")
    baseline = evaluator.baseline()
    probes: list[dict] = []

    def qualifies(start: int) -> bool:
        ops = [
            Operation(group, layer, mod) for layer in range(start, layers + 1) for mod in modules
        ]
        score = _score_or_abort(evaluator, Policy.of(ops, config), trace)
        probes.append({"layer": start, "score": score})
        return score >= baseline

    result = layers + 1
    while lo <= hi:
        mid = (lo + hi) // 2
        if qualifies(mid):
            result = mid
            hi = mid - 1
        else:
            lo = mid + 1
    if trace is not None:
        trace.emit(
            "free_search",
            group=group,
            modules=[m.name.lower() for m in modules],
            first_free_layer=result,
            probes=probes,
        )
    return result


@dataclass(frozen=True)
class PresortResult:
    """Free-to-prune head, remaining sortable set, and permanently retained
    danger set, all in canonical order."""

    free_head: tuple[Operation, ...]
    sortable: tuple[Operation, ...]
    danger: tuple[Operation, ...]
    free_start: tuple[tuple[str, tuple[ModuleKind, ...], int], ...]


def presort_filter(
    operations: Sequence[Operation],
    evaluator: Evaluator,
    search: SearchConfig,
    config: DecoderConfig,
    trace: Optional[TraceWriter] = None,
) -> PresortResult:
    """Partition the operation space before sorting.

    Free sets come from per-(group, module) binary search; a group's free
    start is clamped to its more-redundant partner's so every sequence prefix
    keeps the group-ordering rule. The danger set (partner-holding groups at
    layers <= danger_layer) is excluded from both the free head and sorting,
    taking precedence over binary-search results.
    """
    layout, layers = config.layout, config.shape.layers
    search.validate_against(layers)
    op_set = set(operations)
    groups = [g for g in layout.prunable_groups if any(op.group == g.id for op in op_set)]
    units = _module_units(search.flash_pairing)

    starts: dict[tuple[str, tuple[ModuleKind, ...]], int] = {}
    for g in groups:
        for modules in units:
            starts[(g.id, modules)] = binary_search_free(
                g.id, modules, evaluator, search, config, trace
            )
    # group-ordering closure: a group may not go free earlier than its partner
    for g in sorted(groups, key=lambda g: layout.group_sort_key(g.id)):
        partner = g.redundancy_partner
        if partner is None:
            continue
        for modules in units:
            if (partner, modules) in starts:
                starts[(g.id, modules)] = max(starts[(g.id, modules)], starts[(partner, modules)])

    danger = {
        op
        for op in op_set
        if layout.group(op.group).redundancy_partner is not None and op.layer <= search.danger_layer
    }
    free = set()
    for (group_id, modules), start in starts.items():
        for layer in range(start, layers + 1):
            for mod in modules:
                op = Operation(group_id, layer, mod)
                if op in op_set and op not in danger:
                    free.add(op)

    free_head = canonical_order(free, layout)
    sortable = canonical_order(op_set - free - danger, layout)
    free_start = tuple(
        (gid, modules, starts[(gid, modules)])
        for gid in [g.id for g in groups]
        for modules in units
    )
    if trace is not None:
        trace.emit(
            "presort",
            free=len(free_head),
            sortable=len(sortable),
            danger=len(danger),
        )
    return PresortResult(free_head, sortable, canonical_order(danger, layout), free_start)


def _build_units(ops: Sequence[Operation], layout, flash_pairing: bool) -> list[Unit]:
    """Atomic candidate units in canonical order; with flash pairing, each
    group/layer's MHA-out and MHA-in operations fuse into one unit."""
    ordered = canonical_order(ops, layout)
    if not flash_pairing:
        return [(op,) for op in ordered]
    units: list[Unit] = []
    pending: dict[tuple[str, int], list[Operation]] = {}
    for op in ordered:
        if op.module == ModuleKind.MLP:
            units.append((op,))
            continue
        pending.setdefault((op.group, op.layer), []).append(op)
    for (group, layer), pair in pending.items():
        if len(pair) != 2:
            raise ConfigError(
                f"flash pairing needs both MHA halves of {group!r} layer {layer} on the same side"
            )
        units.append(tuple(sorted(pair, key=lambda o: int(o.module))))
    units.sort(key=lambda u: operation_sort_key(u[0], layout))
    return units


def _cut_points(prefix_units: Sequence[Unit], step_units: Sequence[Unit]) -> tuple[int, ...]:
    cuts = [0]
    for unit in list(prefix_units) + list(step_units):
        cuts.append(cuts[-1] + len(unit))
    return tuple(cuts)


def greedy_sort(
    sortable: Sequence[Operation],
    free_head: Sequence[Operation],
    evaluator: Evaluator,
    search: SearchConfig,
    config: DecoderConfig,
    danger: Sequence[Operation] = (),
    trace: Optional[TraceWriter] = None,
) -> SortedSequence:
    """Sort operations from most to least redundant.

    Adaptive mode keeps a score cache: each step selects the best cached
    candidate, confirms it with one evaluation, and either commits it or
    refreshes every candidate's score; if all refreshed scores fall below the
    active threshold, the threshold index advances (at the last threshold the
    confirmation always passes, guaranteeing progress). Naive mode re-scores
    all candidates every step and skips threshold logic entirely.
    """
    layout = config.layout
    if set(sortable) & set(free_head):
        raise ConfigError("sortable set overlaps the free-to-prune head")
    free_units = _build_units(free_head, layout, search.flash_pairing)
    free_ops = tuple(op for unit in free_units for op in unit)
    units = _build_units(sortable, layout, search.flash_pairing)
    schedule = None
    if search.mode == "adaptive":
        schedule = search.schedule or default_thresholds(
            evaluator.baseline(), search.threshold_count
        )

    calls_at_start = evaluator.call_count

    def searched_calls() -> int:
        return evaluator.call_count - calls_at_start

    def score_with(prefix_ops: list[Operation], unit: Unit) -> float:
        return _score_or_abort(evaluator, Policy.of([*prefix_ops, *unit], config), trace)

    def refresh(prefix_ops: list[Operation], pending: list[Unit]) -> dict[Unit, float]:
        if search.parallel_eval and evaluator.concurrency_safe and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=min(8, len(pending))) as pool:
                futures = {unit: pool.submit(score_with, prefix_ops, unit) for unit in pending}
            return {unit: futures[unit].result() for unit in pending}
        return {unit: score_with(prefix_ops, unit) for unit in pending}

    prefix: list[Operation] = list(free_ops)
    committed_units: list[Unit] = []
    records: list[StepRecord] = []
    remaining = list(units)
    cache: dict[Unit, float] = {}

    if remaining and search.mode == "adaptive":
        cache = refresh(prefix, remaining)
        if trace is not None:
            trace.emit(
                "initial_scores",
                count=len(remaining),
                scores=[[_ops_json(u), cache[u]] for u in remaining],
            )

    z = 1
    step = 1
    while remaining:
        flat_remaining = {op for unit in remaining for op in unit}
        admissible = admissible_candidates(prefix, flat_remaining, layout)
        candidates = [u for u in remaining if all(op in admissible for op in u)]
        if not candidates:
            raise ConfigError("no admissible candidate; partner links are inconsistent")

        if search.mode == "naive":
            fresh = refresh(prefix, remaining)
            cache.update(fresh)
            if trace is not None:
                trace.emit(
                    "refresh",
                    step=step,
                    count=len(remaining),
                    scores=[[_ops_json(u), fresh[u]] for u in remaining],
                )
            chosen = _first_best(candidates, cache)
            cached = confirmed = cache[chosen]
            threshold_index = None
        else:
            chosen = _first_best(candidates, cache)
            cached = cache[chosen]
            confirmed = score_with(prefix, chosen)
            if trace is not None:
                trace.emit(
                    "confirm",
                    step=step,
                    ops=_ops_json(chosen),
                    cached_score=cached,
                    score=confirmed,
                    threshold_index=z,
                )
            if z < schedule.count and confirmed < schedule.mu[z - 1]:
                fresh = refresh(prefix, remaining)
                cache.update(fresh)
                if trace is not None:
                    trace.emit(
                        "refresh",
                        step=step,
                        count=len(remaining),
                        scores=[[_ops_json(u), fresh[u]] for u in remaining],
                    )
                # quantified over committable candidates: an inadmissible unit
                # above the threshold must not stall the advance
                if all(fresh[u] < schedule.mu[z - 1] for u in candidates):
                    z += 1
                    if trace is not None:
                        trace.emit("threshold_advance", threshold_index=z)
                continue  # re-enter selection from the refreshed cache
            threshold_index = z

        prefix.extend(chosen)
        committed_units.append(chosen)
        remaining.remove(chosen)
        records.append(
            StepRecord(
                step=step,
                ops=chosen,
                cached_score=cached,
                confirmed_score=confirmed,
                evaluator_calls=searched_calls(),
                threshold_index=threshold_index,
            )
        )
        if trace is not None:
            trace.emit(
                "commit",
                step=step,
                ops=_ops_json(chosen),
                cached_score=cached,
                confirmed_score=confirmed,
                evaluator_calls=searched_calls(),
                threshold_index=threshold_index,
            )
        step += 1

    if trace is not None:
        trace.emit("done", sequence_len=len(prefix), evaluator_calls=searched_calls())
    return SortedSequence(
        config_digest=config.digest(),
        order=tuple(prefix),
        free_head_len=len(free_ops),
        cut_points=_cut_points(free_units, committed_units),
        step_records=tuple(records),
        danger=canonical_order(danger, layout),
    )


def _first_best(candidates: Sequence[Unit], cache: dict[Unit, float]) -> Unit:
    """Highest cached score; candidate order is canonical, so the first
    maximum wins ties deterministically."""
    best = candidates[0]
    for unit in candidates[1:]:
        if cache[unit] > cache[best]:
            best = unit
    return best


@dataclass(frozen=True)
class PipelineResult:
    sequence: SortedSequence
    policy: Policy
    report: FlopsReport
    k_star: int
    trace: tuple[dict, ...]


def run_pipeline(
    config: DecoderConfig,
    search: SearchConfig,
    evaluator: Evaluator,
    tau: float,
    trace: Optional[TraceWriter] = None,
) -> PipelineResult:
    """Filter, sort, and truncate to the requested FLOPs reduction."""
    trace = trace or TraceWriter()
    search.validate_against(config.shape.layers)
    trace.emit("baseline", score=evaluator.baseline())
    operations = all_operations(config.layout, config.shape)
    presort = presort_filter(operations, evaluator, search, config, trace)
    sequence = greedy_sort(
        presort.sortable, presort.free_head, evaluator, search, config, presort.danger, trace
    )
    k_star, policy = truncate_to_budget(sequence, config, tau)
    trace.emit("truncate", k_star=k_star, tau=tau)
    report = policy_flops(policy, config)
    verdict = validate_policy(policy, config, search.flags)
    if not verdict.ok:
        raise ConfigError(f"pipeline produced an invalid policy: {verdict.violations}")
    return PipelineResult(sequence, policy, report, k_star, tuple(trace.records))

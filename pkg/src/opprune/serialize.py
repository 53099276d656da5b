"""JSON schemas for configs, policies, sequences, reports, and traces.

All artifacts round-trip losslessly; keys are sorted so files are diff-stable
and reruns are byte-identical. Policy and sequence files embed the decoder
config they were built against, which makes downstream commands (truncate,
viz) self-contained.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .errors import ConfigError
from .evaluators import SyntheticOracleSpec, ToyDecoderSpec
from .flops import FlopsReport
from .model import (
    DecoderConfig,
    DecoderShape,
    GroupKind,
    GroupSpec,
    ModuleKind,
    Operation,
    Policy,
    SortedSequence,
    StepRecord,
    TokenLayout,
    canonical_order,
    module_from_wire,
)
from .search import PresortResult, SearchConfig, ThresholdSchedule

KNOWN_ARCHITECTURES = ("llama",)


def dumps_canonical(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_json(path: Path, payload: Any) -> None:
    path.write_text(dumps_canonical(payload), encoding="utf-8")


def read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _get(data: Mapping, key: str, path: str, kind: type, optional: bool = False):
    if key not in data:
        if optional:
            return None
        raise ConfigError(f"{path}.{key}: missing required field")
    value = data[key]
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{path}.{key}: expected {kind.__name__}, got bool")
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{path}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


# ---------------------------------------------------------------- operations


def op_to_json(op: Operation) -> dict:
    return op.to_dict()


def op_from_json(data: Mapping, path: str = "op") -> Operation:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: expected an object")
    try:
        return Operation(
            str(_get(data, "group", path, str)),
            _get(data, "layer", path, int),
            module_from_wire(_get(data, "module", path, str)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ------------------------------------------------------------ decoder config


def shape_to_json(shape: DecoderShape) -> dict:
    return {
        "architecture": "llama",
        "layers": shape.layers,
        "hidden": shape.hidden,
        "kv_dim": shape.kv_dim,
        "mlp_dim": shape.mlp_dim,
    }


def shape_from_json(data: Mapping, path: str = "decoder") -> DecoderShape:
    arch = _get(data, "architecture", path, str, optional=True) or "llama"
    if arch not in KNOWN_ARCHITECTURES:
        raise ConfigError(f"{path}.architecture: unknown architecture {arch!r}")
    return DecoderShape(
        layers=_get(data, "layers", path, int),
        hidden=_get(data, "hidden", path, int),
        kv_dim=_get(data, "kv_dim", path, int),
        mlp_dim=_get(data, "mlp_dim", path, int),
    )


def layout_to_json(layout: TokenLayout) -> dict:
    groups = []
    for g in layout.groups:
        entry: dict[str, Any] = {
            "id": g.id,
            "kind": g.kind.value,
            "count": g.count,
            "prunable": g.prunable,
        }
        if g.redundancy_partner is not None:
            entry["redundancy_partner"] = g.redundancy_partner
        groups.append(entry)
    payload: dict[str, Any] = {"groups": groups}
    if layout.visual_ratio_r is not None:
        payload["visual_ratio_r"] = layout.visual_ratio_r
    return payload


def layout_from_json(data: Mapping, path: str = "layout") -> TokenLayout:
    raw_groups = _get(data, "groups", path, list)
    groups = []
    for i, raw in enumerate(raw_groups):
        gpath = f"{path}.groups[{i}]"
        if not isinstance(raw, Mapping):
            raise ConfigError(f"{gpath}: expected an object")
        kind_name = _get(raw, "kind", gpath, str)
        try:
            kind = GroupKind(kind_name)
        except ValueError:
            raise ConfigError(f"{gpath}.kind: unknown group kind {kind_name!r}") from None
        groups.append(
            GroupSpec(
                id=_get(raw, "id", gpath, str),
                kind=kind,
                count=_get(raw, "count", gpath, int),
                prunable=bool(raw.get("prunable", False)),
                redundancy_partner=raw.get("redundancy_partner"),
            )
        )
    ratio = _get(data, "visual_ratio_r", path, float, optional=True)
    try:
        return TokenLayout(tuple(groups), visual_ratio_r=ratio)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def decoder_config_to_json(config: DecoderConfig) -> dict:
    return {"decoder": shape_to_json(config.shape), "layout": layout_to_json(config.layout)}


def decoder_config_from_json(data: Mapping, path: str = "") -> DecoderConfig:
    prefix = f"{path}." if path else ""
    shape = shape_from_json(_get(data, "decoder", path or "config", dict), f"{prefix}decoder")
    layout = layout_from_json(_get(data, "layout", path or "config", dict), f"{prefix}layout")
    return DecoderConfig(shape=shape, layout=layout)


# ------------------------------------------------------------- search config


def search_config_to_json(search: SearchConfig) -> dict:
    payload: dict[str, Any] = {
        "danger_layer": search.danger_layer,
        "flash_pairing": search.flash_pairing,
        "tie_break": search.tie_break,
        "mode": search.mode,
        "parallel_eval": search.parallel_eval,
    }
    if search.schedule is not None:
        payload["thresholds"] = {"mu": list(search.schedule.mu)}
    else:
        payload["thresholds"] = {"count": search.threshold_count}
    if search.free_search_range is not None:
        payload["free_search_range"] = list(search.free_search_range)
    return payload


def search_config_from_json(data: Mapping, path: str = "search") -> SearchConfig:
    thresholds = _get(data, "thresholds", path, dict, optional=True) or {"count": 15}
    schedule = None
    count = 15
    if "mu" in thresholds:
        mu = thresholds["mu"]
        if not isinstance(mu, list) or not all(isinstance(x, (int, float)) for x in mu):
            raise ConfigError(f"{path}.thresholds.mu: expected a list of numbers")
        schedule = ThresholdSchedule(tuple(float(x) for x in mu))
    elif "count" in thresholds:
        count = _get(thresholds, "count", f"{path}.thresholds", int)
    raw_range = _get(data, "free_search_range", path, list, optional=True)
    free_range = None
    if raw_range is not None:
        if len(raw_range) != 2 or not all(isinstance(x, int) for x in raw_range):
            raise ConfigError(f"{path}.free_search_range: expected [first_layer, last_layer]")
        free_range = (raw_range[0], raw_range[1])
    try:
        return SearchConfig(
            schedule=schedule,
            threshold_count=count,
            danger_layer=_get(data, "danger_layer", path, int, optional=True) or 0,
            free_search_range=free_range,
            flash_pairing=bool(data.get("flash_pairing", False)),
            tie_break=data.get("tie_break", "canonical"),
            mode=data.get("mode", "adaptive"),
            parallel_eval=bool(data.get("parallel_eval", False)),
        )
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# --------------------------------------------------------------- oracle spec


def oracle_spec_to_json(spec: SyntheticOracleSpec) -> dict:
    return {
        "base": spec.base,
        "seed": spec.seed,
        "weights": [{"op": op_to_json(op), "weight": w} for op, w in spec.weights],
        "interactions": [
            {"a": op_to_json(a), "b": op_to_json(b), "weight": w}
            for a, b, w in spec.interactions
        ],
        "harmless_depth": [
            {"group": g, "module": m.name.lower(), "layer": layer}
            for g, m, layer in spec.harmless_depth
        ],
    }


def oracle_spec_from_json(data: Mapping, path: str = "evaluator.oracle") -> SyntheticOracleSpec:
    weights = []
    for i, raw in enumerate(_get(data, "weights", path, list, optional=True) or []):
        wpath = f"{path}.weights[{i}]"
        weights.append((op_from_json(_get(raw, "op", wpath, dict), wpath), _get(raw, "weight", wpath, float)))
    interactions = []
    for i, raw in enumerate(_get(data, "interactions", path, list, optional=True) or []):
        ipath = f"{path}.interactions[{i}]"
        interactions.append(
            (
                op_from_json(_get(raw, "a", ipath, dict), ipath),
                op_from_json(_get(raw, "b", ipath, dict), ipath),
                _get(raw, "weight", ipath, float),
            )
        )
    harmless = []
    for i, raw in enumerate(_get(data, "harmless_depth", path, list, optional=True) or []):
        hpath = f"{path}.harmless_depth[{i}]"
        module_name = _get(raw, "module", hpath, str)
        try:
            module = ModuleKind[module_name.upper()]
        except KeyError:
            raise ConfigError(f"{hpath}.module: unknown module {module_name!r}") from None
        harmless.append((_get(raw, "group", hpath, str), module, _get(raw, "layer", hpath, int)))
    return SyntheticOracleSpec(
        base=_get(data, "base", path, float),
        weights=tuple(weights),
        interactions=tuple(interactions),
        harmless_depth=tuple(harmless),
        seed=_get(data, "seed", path, int, optional=True) or 0,
    )


# ------------------------------------------------------------------ toy spec


def toy_spec_to_json(spec: ToyDecoderSpec) -> dict:
    return {
        "vocab_size": spec.vocab_size,
        "seed": spec.seed,
        "metric": spec.metric,
        "eval_set": [{"tokens": list(tokens), "target": target} for tokens, target in spec.eval_set],
    }


def toy_spec_from_json(
    data: Mapping, config: DecoderConfig, path: str = "evaluator.toy"
) -> ToyDecoderSpec:
    eval_set = []
    for i, raw in enumerate(_get(data, "eval_set", path, list)):
        epath = f"{path}.eval_set[{i}]"
        tokens = _get(raw, "tokens", epath, list)
        if not all(isinstance(t, int) for t in tokens):
            raise ConfigError(f"{epath}.tokens: expected integers")
        eval_set.append((tuple(tokens), _get(raw, "target", epath, int)))
    try:
        return ToyDecoderSpec(
            shape=config.shape,
            layout=config.layout,
            vocab_size=_get(data, "vocab_size", path, int),
            seed=_get(data, "seed", path, int, optional=True) or 0,
            eval_set=tuple(eval_set),
            metric=data.get("metric", "accuracy"),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ----------------------------------------------------------- policy/sequence


def policy_to_json(policy: Policy, config: DecoderConfig) -> dict:
    return {
        "config_digest": policy.config_digest,
        **decoder_config_to_json(config),
        "pruned": [op_to_json(op) for op in canonical_order(policy.pruned, config.layout)],
    }


def policy_from_json(data: Mapping, path: str = "policy") -> tuple[Policy, DecoderConfig]:
    config = decoder_config_from_json(data, path)
    ops = [op_from_json(raw, f"{path}.pruned[{i}]") for i, raw in enumerate(_get(data, "pruned", path, list))]
    return Policy(frozenset(ops), _get(data, "config_digest", path, str)), config


def step_record_to_json(record: StepRecord) -> dict:
    return {
        "step": record.step,
        "ops": [op_to_json(op) for op in record.ops],
        "cached_score": record.cached_score,
        "confirmed_score": record.confirmed_score,
        "evaluator_calls": record.evaluator_calls,
        "threshold_index": record.threshold_index,
    }


def step_record_from_json(data: Mapping, path: str) -> StepRecord:
    return StepRecord(
        step=_get(data, "step", path, int),
        ops=tuple(op_from_json(raw, f"{path}.ops") for raw in _get(data, "ops", path, list)),
        cached_score=_get(data, "cached_score", path, float),
        confirmed_score=_get(data, "confirmed_score", path, float),
        evaluator_calls=_get(data, "evaluator_calls", path, int),
        threshold_index=data.get("threshold_index"),
    )


def sequence_to_json(sequence: SortedSequence, config: DecoderConfig) -> dict:
    return {
        "config_digest": sequence.config_digest,
        **decoder_config_to_json(config),
        "order": [op_to_json(op) for op in sequence.order],
        "free_head_len": sequence.free_head_len,
        "cut_points": list(sequence.cut_points),
        "danger": [op_to_json(op) for op in sequence.danger],
        "step_records": [step_record_to_json(r) for r in sequence.step_records],
    }


def sequence_from_json(data: Mapping, path: str = "sequence") -> tuple[SortedSequence, DecoderConfig]:
    config = decoder_config_from_json(data, path)
    order = tuple(
        op_from_json(raw, f"{path}.order[{i}]") for i, raw in enumerate(_get(data, "order", path, list))
    )
    records = tuple(
        step_record_from_json(raw, f"{path}.step_records[{i}]")
        for i, raw in enumerate(_get(data, "step_records", path, list, optional=True) or [])
    )
    danger = tuple(
        op_from_json(raw, f"{path}.danger[{i}]")
        for i, raw in enumerate(_get(data, "danger", path, list, optional=True) or [])
    )
    sequence = SortedSequence(
        config_digest=_get(data, "config_digest", path, str),
        order=order,
        free_head_len=_get(data, "free_head_len", path, int),
        cut_points=tuple(_get(data, "cut_points", path, list)),
        step_records=records,
        danger=danger,
    )
    return sequence, config


def report_to_json(report: FlopsReport) -> dict:
    return {
        "baseline_total": report.baseline_total,
        "total": report.total,
        "retained_ratio": report.retained_ratio,
        "per_layer": [
            {"layer": layer, "mha_out": out, "mha_in": inn, "mlp": mlp}
            for layer, out, inn, mlp in report.per_layer
        ],
    }


def presort_to_json(result: PresortResult, trace_records: Sequence[dict]) -> dict:
    return {
        "free_head": [op_to_json(op) for op in result.free_head],
        "sortable": [op_to_json(op) for op in result.sortable],
        "danger": [op_to_json(op) for op in result.danger],
        "free_start": [
            {"group": g, "modules": [m.name.lower() for m in mods], "first_free_layer": start}
            for g, mods, start in result.free_start
        ],
        "binary_search": [r for r in trace_records if r.get("event") == "free_search"],
    }


# ----------------------------------------------------------------- top-level


EVALUATOR_KINDS = ("oracle", "toy", "external")


def load_config_file(path: Path) -> dict:
    """Parse and validate a run config; returns a dict of constructed pieces.

    Keys: ``config`` (DecoderConfig), ``search`` (SearchConfig), ``evaluator``
    (tagged spec), ``budget`` (dict with exactly one of tau_absolute /
    retain_ratio, or None).
    """
    data = read_json(path)
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be an object")
    config = decoder_config_from_json(data)
    search = search_config_from_json(_get(data, "search", "config", dict, optional=True) or {})
    raw_eval = _get(data, "evaluator", "config", dict)
    tags = [k for k in EVALUATOR_KINDS if k in raw_eval]
    if len(tags) != 1:
        raise ConfigError(f"evaluator: exactly one of {EVALUATOR_KINDS} required, got {tags}")
    tag = tags[0]
    if tag == "oracle":
        evaluator: dict[str, Any] = {"oracle": oracle_spec_from_json(raw_eval["oracle"])}
    elif tag == "toy":
        evaluator = {"toy": toy_spec_from_json(raw_eval["toy"], config)}
    else:
        ext = raw_eval["external"]
        command = _get(ext, "command", "evaluator.external", list)
        if not command or not all(isinstance(c, str) for c in command):
            raise ConfigError("evaluator.external.command: expected a non-empty argv list")
        evaluator = {"external": {"command": command, "config": ext.get("config", {})}}
    budget = _get(data, "budget", "config", dict, optional=True)
    if budget is not None:
        keys = [k for k in ("tau_absolute", "retain_ratio") if k in budget]
        if len(keys) != 1:
            raise ConfigError("budget: exactly one of tau_absolute / retain_ratio required")
        if "retain_ratio" in budget:
            ratio = _get(budget, "retain_ratio", "budget", float)
            if not 0 < ratio <= 1:
                raise ConfigError("budget.retain_ratio: must be in (0, 1]")
    return {"config": config, "search": search, "evaluator": evaluator, "budget": budget}


def resolve_tau(budget: Optional[Mapping], baseline_total: int) -> float:
    """Absolute FLOPs reduction target from a budget section."""
    if budget is None:
        raise ConfigError("this command needs a budget (tau_absolute or retain_ratio)")
    if "tau_absolute" in budget:
        return float(budget["tau_absolute"])
    return (1.0 - float(budget["retain_ratio"])) * baseline_total

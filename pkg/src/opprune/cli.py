"""Command-line surface: filter | sort | truncate | flops | eval | viz.

Every command is a thin shell over module operations. Exit codes: 0 success,
2 config error, 3 infeasible budget, 4 evaluator failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from contextlib import ExitStack
from pathlib import Path
from typing import Optional

from .bridge import spawn_worker
from .errors import BudgetInfeasibleError, ConfigError, EvaluatorFailure, OpPruneError
from .evaluators import Evaluator, SyntheticOracle, ToyDecoder
from .flops import policy_flops, truncate_to_budget
from .model import DecoderConfig, Policy
from .search import SearchConfig, TraceWriter, all_operations, greedy_sort, presort_filter
from .serialize import (
    load_config_file,
    policy_from_json,
    policy_to_json,
    presort_to_json,
    read_json,
    report_to_json,
    resolve_tau,
    sequence_from_json,
    sequence_to_json,
    write_json,
)
from .viz import write_grid_csv, write_grid_svg

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_EVALUATOR = 4


def _build_evaluator(
    tagged: dict, config: DecoderConfig, stack: ExitStack, seed: Optional[int]
) -> Evaluator:
    if "oracle" in tagged:
        spec = tagged["oracle"]
        if seed is not None:
            spec = dataclasses.replace(spec, seed=seed)
        return SyntheticOracle(spec)
    if "toy" in tagged:
        spec = tagged["toy"]
        if seed is not None:
            spec = dataclasses.replace(spec, seed=seed)
        return ToyDecoder(spec)
    ext = tagged["external"]
    payload = dict(ext["config"])
    if seed is not None:
        payload["seed"] = seed
    session = spawn_worker(ext["command"], payload, decoder_config=config)
    stack.callback(session.close)
    return session


def _apply_overrides(search: SearchConfig, args: argparse.Namespace) -> SearchConfig:
    updates = {}
    if getattr(args, "mode", None):
        updates["mode"] = args.mode
    if getattr(args, "parallel", False):
        updates["parallel_eval"] = True
    return dataclasses.replace(search, **updates) if updates else search


def _outdir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_filter(args: argparse.Namespace) -> int:
    loaded = load_config_file(Path(args.config))
    config, search = loaded["config"], _apply_overrides(loaded["search"], args)
    out = _outdir(args)
    trace = TraceWriter()
    with ExitStack() as stack:
        evaluator = _build_evaluator(loaded["evaluator"], config, stack, args.seed)
        operations = all_operations(config.layout, config.shape)
        result = presort_filter(operations, evaluator, search, config, trace)
    write_json(out / "filter.json", presort_to_json(result, trace.records))
    print(
        f"free={len(result.free_head)} sortable={len(result.sortable)} "
        f"danger={len(result.danger)} -> {out / 'filter.json'}"
    )
    return EXIT_OK


def cmd_sort(args: argparse.Namespace) -> int:
    loaded = load_config_file(Path(args.config))
    config, search = loaded["config"], _apply_overrides(loaded["search"], args)
    search.validate_against(config.shape.layers)
    out = _outdir(args)
    trace_path = out / "trace.jsonl"
    with ExitStack() as stack, trace_path.open("w", encoding="utf-8") as stream:
        trace = TraceWriter(stream)
        evaluator = _build_evaluator(loaded["evaluator"], config, stack, args.seed)
        trace.emit("baseline", score=evaluator.baseline())
        operations = all_operations(config.layout, config.shape)
        presort = presort_filter(operations, evaluator, search, config, trace)
        sequence = greedy_sort(
            presort.sortable, presort.free_head, evaluator, search, config, presort.danger, trace
        )
    write_json(out / "sequence.json", sequence_to_json(sequence, config))
    print(f"sorted {len(sequence.order)} operations -> {out / 'sequence.json'}")
    return EXIT_OK


def cmd_truncate(args: argparse.Namespace) -> int:
    sequence, config = sequence_from_json(read_json(Path(args.sequence)))
    budget = _budget_from_args(args)
    baseline_total = policy_flops(Policy.empty(config), config).baseline_total
    tau = resolve_tau(budget, baseline_total)
    out = _outdir(args)
    k_star, policy = truncate_to_budget(sequence, config, tau)
    report = policy_flops(policy, config)
    write_json(out / "policy.json", policy_to_json(policy, config))
    write_json(out / "report.json", report_to_json(report))
    print(
        f"k*={k_star} reduction={report.reduction} retained_ratio={report.retained_ratio:.4f} "
        f"-> {out / 'policy.json'}"
    )
    return EXIT_OK


def _budget_from_args(args: argparse.Namespace) -> dict:
    if (args.budget_ratio is None) == (args.budget_flops is None):
        raise ConfigError("provide exactly one of --budget-ratio / --budget-flops")
    if args.budget_ratio is not None:
        if not 0 < args.budget_ratio <= 1:
            raise ConfigError("--budget-ratio must be in (0, 1]")
        return {"retain_ratio": args.budget_ratio}
    return {"tau_absolute": args.budget_flops}


def cmd_flops(args: argparse.Namespace) -> int:
    policy, config = _load_policy_against_config(args)
    report = policy_flops(policy, config)
    payload = report_to_json(report)
    if args.out:
        out = _outdir(args)
        write_json(out / "report.json", payload)
    print(
        f"total={report.total} baseline={report.baseline_total} "
        f"retained_ratio={report.retained_ratio:.6f}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    loaded = load_config_file(Path(args.config))
    config = loaded["config"]
    policy, _ = policy_from_json(read_json(Path(args.policy)))
    with ExitStack() as stack:
        evaluator = _build_evaluator(loaded["evaluator"], config, stack, args.seed)
        score = evaluator.evaluate(policy)
    print(f"score={score!r}")
    return EXIT_OK


def cmd_viz(args: argparse.Namespace) -> int:
    policy, config = policy_from_json(read_json(Path(args.policy)))
    out = _outdir(args)
    write_grid_csv(policy, config, out / "policy_grid.csv")
    write_grid_svg(policy, config, out / "policy_grid.svg")
    print(f"grid -> {out / 'policy_grid.csv'}, {out / 'policy_grid.svg'}")
    return EXIT_OK


def _load_policy_against_config(args: argparse.Namespace) -> tuple[Policy, DecoderConfig]:
    policy, embedded = policy_from_json(read_json(Path(args.policy)))
    if args.config:
        loaded = load_config_file(Path(args.config))
        return policy, loaded["config"]
    return policy, embedded


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=False, seed=False):
        if config:
            p.add_argument("--config", required=True, help="run config JSON")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override evaluator seed")

    p = sub.add_parser("filter", help="write free/sortable/danger operation sets")
    add_common(p, config=True, seed=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["adaptive", "naive"])
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(fn=cmd_filter)

    p = sub.add_parser("sort", help="run the full sorting pipeline without truncation")
    add_common(p, config=True, seed=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["adaptive", "naive"])
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(fn=cmd_sort)

    p = sub.add_parser("truncate", help="truncate a sorted sequence to a budget")
    p.add_argument("--sequence", required=True)
    p.add_argument("--budget-ratio", type=float, default=None)
    p.add_argument("--budget-flops", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_truncate)

    p = sub.add_parser("flops", help="price a policy file")
    p.add_argument("--policy", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("eval", help="score a policy file with the config's evaluator")
    p.add_argument("--policy", required=True)
    add_common(p, config=True, seed=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("viz", help="export a policy grid as CSV and SVG")
    p.add_argument("--policy", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_viz)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BudgetInfeasibleError as exc:
        print(f"infeasible budget: {exc} (max achievable reduction: {exc.max_reduction})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except EvaluatorFailure as exc:
        print(f"evaluator failure: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    except (ConfigError, OpPruneError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

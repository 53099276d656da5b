"""Operation lattice, token layouts, policies, and their structural constraints.

An operation is the atomic prunable unit (token group, layer, module). A policy
is a set of pruned operations. Everything here is an immutable value; the
canonical operation order defined by ``operation_sort_key`` fixes all
tie-breaking and file ordering.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

from .errors import ConfigError, EmptyOperationSpaceError, StalePolicyError


class ModuleKind(enum.IntEnum):
    """The three per-layer computation slices a token group can skip.

    MHA_OUT: the token feeds others (key/value transforms + their matmuls).
    MHA_IN: the token is updated (query transform, attention, output proj).
    MLP: token-wise feed-forward update.

    The integer values fix the canonical module order used for serialization.
    """

    MHA_OUT = 0
    MHA_IN = 1
    MLP = 2


_MODULE_WIRE = {
    ModuleKind.MHA_OUT: "mha_out",
    ModuleKind.MHA_IN: "mha_in",
    ModuleKind.MLP: "mlp",
}
_MODULE_FROM_WIRE = {v: k for k, v in _MODULE_WIRE.items()}


def module_wire_name(module: ModuleKind) -> str:
    return _MODULE_WIRE[module]


def module_from_wire(name: str) -> ModuleKind:
    try:
        return _MODULE_FROM_WIRE[name]
    except KeyError:
        raise ConfigError(f"unknown module name: {name!r}") from None


class GroupKind(enum.Enum):
    SYSTEM = "system"
    VISUAL_CRITICAL = "visual_critical"
    VISUAL_REDUNDANT = "visual_redundant"
    TEXT = "text"


@dataclass(frozen=True)
class GroupSpec:
    """One token group: a partition cell sharing a single pruning fate.

    ``redundancy_partner`` names the more-redundant group whose same-(layer,
    module) operation must be pruned before this group's may be.
    """

    id: str
    kind: GroupKind
    count: int
    prunable: bool = False
    redundancy_partner: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise ConfigError("group id must be non-empty")
        if self.count < 0:
            raise ConfigError(f"group {self.id!r}: count must be >= 0")


@dataclass(frozen=True)
class TokenLayout:
    """Ordered token groups occupying consecutive position ranges."""

    groups: tuple[GroupSpec, ...]
    visual_ratio_r: Optional[float] = None

    def __post_init__(self):
        ids = [g.id for g in self.groups]
        if len(ids) != len(set(ids)):
            raise ConfigError("group ids must be unique within a layout")
        if self.total_tokens <= 0:
            raise ConfigError("layout must contain at least one token")
        by_id = {g.id: g for g in self.groups}
        for g in self.groups:
            p = g.redundancy_partner
            if p is None:
                continue
            if p not in by_id:
                raise ConfigError(f"group {g.id!r}: partner {p!r} not in layout")
            if not by_id[p].prunable:
                raise ConfigError(f"group {g.id!r}: partner {p!r} is not prunable")
            if p == g.id:
                raise ConfigError(f"group {g.id!r}: partner cannot be itself")
        for g in self.groups:
            self._redundancy_depth(g.id)  # raises on partner cycles

    @property
    def total_tokens(self) -> int:
        return sum(g.count for g in self.groups)

    def group(self, group_id: str) -> GroupSpec:
        for g in self.groups:
            if g.id == group_id:
                return g
        raise ConfigError(f"unknown group: {group_id!r}")

    def has_group(self, group_id: str) -> bool:
        return any(g.id == group_id for g in self.groups)

    @property
    def prunable_groups(self) -> tuple[GroupSpec, ...]:
        return tuple(g for g in self.groups if g.prunable)

    def _redundancy_depth(self, group_id: str) -> int:
        # hops along partner links; the most redundant group has depth 0
        depth = 0
        seen = {group_id}
        g = self.group(group_id)
        while g.redundancy_partner is not None:
            nxt = g.redundancy_partner
            if nxt in seen:
                raise ConfigError(f"redundancy_partner cycle through {group_id!r}")
            seen.add(nxt)
            g = self.group(nxt)
            depth += 1
        return depth

    def group_sort_key(self, group_id: str) -> tuple[int, int]:
        """More-redundant groups sort first; layout position breaks ties."""
        idx = next(i for i, g in enumerate(self.groups) if g.id == group_id)
        return (self._redundancy_depth(group_id), idx)

    def group_positions(self) -> dict[str, range]:
        """Token index range occupied by each group, in layout order."""
        out: dict[str, range] = {}
        offset = 0
        for g in self.groups:
            out[g.id] = range(offset, offset + g.count)
            offset += g.count
        return out


@dataclass(frozen=True)
class DecoderShape:
    """LLaMA-style decoder dimensions driving the cost model."""

    layers: int
    hidden: int
    kv_dim: int
    mlp_dim: int

    def __post_init__(self):
        for name in ("layers", "hidden", "kv_dim", "mlp_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"decoder {name} must be a positive integer")


@dataclass(frozen=True)
class DecoderConfig:
    """Decoder shape plus token layout; the context every policy binds to."""

    shape: DecoderShape
    layout: TokenLayout

    def digest(self) -> str:
        payload = {
            "shape": [self.shape.layers, self.shape.hidden, self.shape.kv_dim, self.shape.mlp_dim],
            "groups": [
                [g.id, g.kind.value, g.count, g.prunable, g.redundancy_partner]
                for g in self.layout.groups
            ],
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, order=False)
class Operation:
    """Atomic prunable unit: (token group, 1-indexed layer, module)."""

    group: str
    layer: int
    module: ModuleKind

    def to_dict(self) -> dict:
        return {"group": self.group, "layer": self.layer, "module": module_wire_name(self.module)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Operation":
        try:
            return cls(str(data["group"]), int(data["layer"]), module_from_wire(data["module"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed operation record: {data!r}") from exc


def operation_sort_key(op: Operation, layout: TokenLayout) -> tuple:
    """Canonical total order: layer descending, more-redundant group first,
    then module order. Used for every tie-break and all serialization."""
    return (-op.layer, *layout.group_sort_key(op.group), int(op.module))


def canonical_order(ops: Iterable[Operation], layout: TokenLayout) -> tuple[Operation, ...]:
    return tuple(sorted(ops, key=lambda o: operation_sort_key(o, layout)))


def all_operations(layout: TokenLayout, shape: DecoderShape) -> tuple[Operation, ...]:
    """Every prunable (group, layer, module) triple, in canonical order."""
    prunable = layout.prunable_groups
    if not prunable:
        raise EmptyOperationSpaceError("layout has no prunable group")
    ops = [
        Operation(g.id, layer, module)
        for g in prunable
        for layer in range(1, shape.layers + 1)
        for module in ModuleKind
    ]
    return canonical_order(ops, layout)


def admissible_candidates(
    selected: Iterable[Operation],
    remaining: Iterable[Operation],
    layout: TokenLayout,
) -> set[Operation]:
    """Remaining operations whose selection would not break group ordering.

    An operation of a group with a redundancy partner becomes a candidate only
    once the partner's same-(layer, module) operation is no longer pending.
    """
    selected_set = set(selected)
    remaining_set = set(remaining)
    overlap = selected_set & remaining_set
    if overlap:
        raise ConfigError(f"remaining overlaps selected: {sorted(o.group for o in overlap)}")
    admissible = set()
    for op in remaining_set:
        partner = layout.group(op.group).redundancy_partner
        if partner is not None and Operation(partner, op.layer, op.module) in remaining_set:
            continue
        admissible.add(op)
    return admissible


@dataclass(frozen=True)
class Policy:
    """A set of pruned operations bound to the decoder config it was built for."""

    pruned: frozenset[Operation]
    config_digest: str

    @classmethod
    def of(cls, ops: Iterable[Operation], config: DecoderConfig) -> "Policy":
        return cls(frozenset(ops), config.digest())

    @classmethod
    def empty(cls, config: DecoderConfig) -> "Policy":
        return cls(frozenset(), config.digest())

    def sorted_ops(self, layout: TokenLayout) -> tuple[Operation, ...]:
        return canonical_order(self.pruned, layout)


@dataclass(frozen=True)
class ConstraintFlags:
    """Which optional structural constraints a policy must satisfy."""

    flash_pairing: bool = False


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    ops: tuple[Operation, ...] = ()


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_policy(policy: Policy, config: DecoderConfig, flags: ConstraintFlags = ConstraintFlags()) -> ValidationReport:
    """Check a policy against the layout's structural rules.

    Reported violations: group-ordering (a group pruned while its more-redundant
    partner is retained at the same layer/module), flash pairing (MHA-out and
    MHA-in of one group/layer pruned separately), and out-of-range or unknown
    operations. An empty violation list means the policy is valid.
    """
    if policy.config_digest != config.digest():
        raise StalePolicyError(
            f"policy digest {policy.config_digest} does not match config {config.digest()}"
        )
    layout, shape = config.layout, config.shape
    violations: list[Violation] = []
    for op in sorted(policy.pruned, key=lambda o: (o.group, o.layer, int(o.module))):
        if not layout.has_group(op.group):
            violations.append(Violation("unknown_group", f"group {op.group!r} not in layout", (op,)))
            continue
        if not layout.group(op.group).prunable:
            violations.append(Violation("not_prunable", f"group {op.group!r} is not prunable", (op,)))
        if not 1 <= op.layer <= shape.layers:
            violations.append(
                Violation("layer_range", f"layer {op.layer} outside [1, {shape.layers}]", (op,))
            )
    known = [op for op in policy.pruned if layout.has_group(op.group)]
    for op in known:
        partner = layout.group(op.group).redundancy_partner
        if partner is None:
            continue
        partner_op = Operation(partner, op.layer, op.module)
        if partner_op not in policy.pruned:
            violations.append(
                Violation(
                    "group_order",
                    f"{op.group!r} pruned at layer {op.layer} {module_wire_name(op.module)} "
                    f"while more-redundant {partner!r} is retained",
                    (op, partner_op),
                )
            )
    if flags.flash_pairing:
        for op in known:
            if op.module == ModuleKind.MLP:
                continue
            mate = Operation(
                op.group,
                op.layer,
                ModuleKind.MHA_IN if op.module == ModuleKind.MHA_OUT else ModuleKind.MHA_OUT,
            )
            if mate not in policy.pruned:
                violations.append(
                    Violation(
                        "flash_pairing",
                        f"{op.group!r} layer {op.layer}: MHA-out/MHA-in must be jointly pruned",
                        (op, mate),
                    )
                )
    ordered = tuple(sorted(violations, key=lambda v: (v.kind, v.detail)))
    return ValidationReport(ordered)


@dataclass(frozen=True)
class StepRecord:
    """Provenance for one committed sorting step."""

    step: int
    ops: tuple[Operation, ...]
    cached_score: float
    confirmed_score: float
    evaluator_calls: int
    threshold_index: Optional[int]


@dataclass(frozen=True)
class SortedSequence:
    """Permutation of sortable operations from most to least redundant.

    ``order[:free_head_len]`` is the pre-filtered free-to-prune head.
    ``cut_points`` are the prefix lengths at which the sequence may be
    truncated without splitting an atomically committed unit (with flash
    pairing, fused MHA-out/MHA-in pairs). ``danger`` lists permanently
    retained operations excluded from sorting.
    """

    config_digest: str
    order: tuple[Operation, ...]
    free_head_len: int
    cut_points: tuple[int, ...]
    step_records: tuple[StepRecord, ...] = ()
    danger: tuple[Operation, ...] = ()

    def __post_init__(self):
        if len(set(self.order)) != len(self.order):
            raise ConfigError("sequence order contains duplicate operations")
        if not self.cut_points or self.cut_points[0] != 0 or self.cut_points[-1] != len(self.order):
            raise ConfigError("cut_points must start at 0 and end at len(order)")
        if list(self.cut_points) != sorted(set(self.cut_points)):
            raise ConfigError("cut_points must be strictly increasing")

    def prefix_ops(self, k: int) -> tuple[Operation, ...]:
        return self.order[:k]

"""Policy grid export: one row per (group, module), one column per layer."""

from __future__ import annotations

import csv
from pathlib import Path

from .model import DecoderConfig, ModuleKind, Operation, Policy, module_wire_name

_MODULE_COLORS = {
    ModuleKind.MHA_OUT: "#4e79a7",
    ModuleKind.MHA_IN: "#59a14f",
    ModuleKind.MLP: "#f28e2b",
}
_PRUNED_COLOR = "#c8c8c8"
_CELL = 16
_LABEL_W = 190
_HEADER_H = 24


def grid_rows(policy: Policy, config: DecoderConfig) -> list[tuple[str, ModuleKind, list[bool]]]:
    """(group, module, pruned-per-layer) rows; non-prunable groups are never pruned."""
    layers = config.shape.layers
    rows = []
    for g in config.layout.groups:
        for module in ModuleKind:
            cells = [
                g.prunable and Operation(g.id, layer, module) in policy.pruned
                for layer in range(1, layers + 1)
            ]
            rows.append((g.id, module, cells))
    return rows


def write_grid_csv(policy: Policy, config: DecoderConfig, path: Path) -> None:
    layers = config.shape.layers
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["group", "module"] + [str(layer) for layer in range(1, layers + 1)])
        for group, module, cells in grid_rows(policy, config):
            writer.writerow(
                [group, module_wire_name(module)]
                + ["pruned" if pruned else "retained" for pruned in cells]
            )


def write_grid_svg(policy: Policy, config: DecoderConfig, path: Path) -> None:
    rows = grid_rows(policy, config)
    layers = config.shape.layers
    width = _LABEL_W + layers * _CELL + 8
    height = _HEADER_H + len(rows) * _CELL + 8
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="10">'
    ]
    for layer in range(1, layers + 1):
        x = _LABEL_W + (layer - 1) * _CELL + _CELL // 2
        parts.append(f'<text x="{x}" y="{_HEADER_H - 8}" text-anchor="middle">{layer}</text>')
    for r, (group, module, cells) in enumerate(rows):
        y = _HEADER_H + r * _CELL
        parts.append(
            f'<text x="4" y="{y + _CELL - 4}">{group}/{module_wire_name(module)}</text>'
        )
        for layer_idx, pruned in enumerate(cells):
            x = _LABEL_W + layer_idx * _CELL
            color = _PRUNED_COLOR if pruned else _MODULE_COLORS[module]
            parts.append(
                f'<rect x="{x}" y="{y}" width="{_CELL - 1}" height="{_CELL - 1}" fill="{color}"/>'
            )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")

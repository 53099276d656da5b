"""Reference decoder configs, including the calibrated 7B-scale layout.

The non-visual token count of the 7B reference is calibrated numerically so
that pruning every visual operation retains 18.6% of baseline FLOPs; prompt
lengths are otherwise unconstrained by the cost model.
"""

from __future__ import annotations

from .errors import ConfigError
from .flops import PerLayerCounts, layer_flops
from .model import DecoderConfig, DecoderShape, GroupKind, GroupSpec, TokenLayout

LLAVA_7B_SHAPE = DecoderShape(layers=32, hidden=4096, kv_dim=4096, mlp_dim=11008)
VISUAL_TOKENS = 576
ZERO_VISUAL_RETAINED = 0.186
SYSTEM_TOKENS = 35


def uniform_layer_cost(shape: DecoderShape, n: int) -> int:
    """Cost of one layer with n tokens active in every module."""
    return layer_flops(PerLayerCounts(n, n, n), shape)


def calibrate_non_visual(
    shape: DecoderShape,
    visual_tokens: int = VISUAL_TOKENS,
    target_ratio: float = ZERO_VISUAL_RETAINED,
    max_tokens: int = 8192,
) -> int:
    """Integer non-visual token count whose zero-visual retained ratio is
    closest to the target. The ratio is strictly increasing in the count, so
    scanning up to the first overshoot suffices."""
    best_t, best_err = 1, float("inf")
    for t in range(1, max_tokens + 1):
        ratio = uniform_layer_cost(shape, t) / uniform_layer_cost(shape, t + visual_tokens)
        err = abs(ratio - target_ratio)
        if err < best_err:
            best_t, best_err = t, err
        if ratio > target_ratio:
            break
    else:
        raise ConfigError(f"calibration did not converge below {max_tokens} tokens")
    return best_t


def visual_split_layout(
    critical: int,
    redundant: int,
    system: int,
    text: int,
    visual_ratio_r: float | None = None,
) -> TokenLayout:
    """System / visual-critical / visual-redundant / text layout where only
    the visual groups are prunable and the critical group's pruning must
    follow the redundant group's."""
    return TokenLayout(
        groups=(
            GroupSpec("system", GroupKind.SYSTEM, system),
            GroupSpec(
                "visual_critical",
                GroupKind.VISUAL_CRITICAL,
                critical,
                prunable=True,
                redundancy_partner="visual_redundant",
            ),
            GroupSpec("visual_redundant", GroupKind.VISUAL_REDUNDANT, redundant, prunable=True),
            GroupSpec("text", GroupKind.TEXT, text),
        ),
        visual_ratio_r=visual_ratio_r,
    )


def llava_7b_config(critical_pct: float = 25.0) -> DecoderConfig:
    """7B-scale reference config: 576 visual tokens split top-r% critical vs
    bottom-(100-r)% redundant (default r=25), non-visual count calibrated to
    the 18.6% zero-visual floor."""
    if not 0 < critical_pct < 100:
        raise ConfigError("critical_pct must be in (0, 100)")
    non_visual = calibrate_non_visual(LLAVA_7B_SHAPE)
    if non_visual <= SYSTEM_TOKENS:
        raise ConfigError("calibrated non-visual count too small for the system prompt")
    critical = round(VISUAL_TOKENS * critical_pct / 100.0)
    layout = visual_split_layout(
        critical=critical,
        redundant=VISUAL_TOKENS - critical,
        system=SYSTEM_TOKENS,
        text=non_visual - SYSTEM_TOKENS,
        visual_ratio_r=critical_pct,
    )
    return DecoderConfig(shape=LLAVA_7B_SHAPE, layout=layout)


def tiny_config(
    layers: int = 4,
    hidden: int = 16,
    kv_dim: int = 16,
    mlp_dim: int = 32,
    system: int = 2,
    critical: int = 2,
    redundant: int = 6,
    text: int = 2,
) -> DecoderConfig:
    """Desk-scale config for the toy decoder and unit tests."""
    shape = DecoderShape(layers=layers, hidden=hidden, kv_dim=kv_dim, mlp_dim=mlp_dim)
    layout = visual_split_layout(critical, redundant, system, text, visual_ratio_r=25.0)
    return DecoderConfig(shape=shape, layout=layout)

"""Importance-based structured weight freezing.

A freeze plan assigns each quantized layer a boolean mask over its output
channels (weight rows); True means the channel is unfrozen and receives
gradient updates. Plans come in three modes:

  cwpl  channel-wise, per-layer budget: each layer keeps its top
        floor(r * C_out) channels by importance;
  cwpn  channel-wise, per-network budget: channels of all layers compete for
        a global budget of floor(r * total_params) parameters;
  lwpn  layer-wise, per-network budget: whole layers compete for the same
        global parameter budget.

Importance of a block is the mean absolute value of its weights. Ranking
ties break lexicographically by (layer index, channel index). The
per-network greedy fill never overshoots: it stops at the first block that
would exceed the budget.

Plans are immutable snapshots; ``maybe_refresh`` returns a new plan built
from the current weights once the sample counter crosses the refresh
interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

CWPL = "cwpl"
CWPN = "cwpn"
LWPN = "lwpn"
MODES = (CWPL, CWPN, LWPN)


@dataclass(frozen=True)
class RowMask:
    """Unfrozen-channel mask for one layer; True = gradient computed."""

    layer: str
    mask: np.ndarray

    @property
    def unfrozen(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class FreezePlan:
    mode: str
    ratio: float
    masks: dict[str, np.ndarray]
    refresh_every: float = math.inf
    samples_since_refresh: int = 0

    def mask_for(self, layer: str) -> np.ndarray:
        return self.masks[layer]

    def unfrozen_params(self, weights: dict[str, np.ndarray]) -> int:
        total = 0
        for name, w in weights.items():
            ch_size = w[0].size
            total += int(self.masks[name].sum()) * ch_size
        return total


def block_importance(block: np.ndarray) -> float:
    """Mean absolute value of a weight block."""
    block = np.asarray(block)
    if block.size == 0:
        raise ValueError("importance of an empty block is undefined")
    return float(np.abs(block, dtype=np.float64).mean())


def channel_budget(ratio: float, count: int) -> int:
    """floor(ratio * count), robust to float representation of the ratio."""
    return int(math.floor(ratio * count + 1e-9))


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"unfrozen ratio must lie in [0, 1], got {ratio}")


def _channel_importances(w: np.ndarray) -> np.ndarray:
    flat = np.abs(w.reshape(w.shape[0], -1), dtype=np.float64)
    return flat.mean(axis=1)


def plan_cwpl(weights: dict[str, np.ndarray], ratio: float,
              refresh_every: float = math.inf) -> FreezePlan:
    """Per layer, unfreeze the floor(r * C_out) most important channels."""
    _check_ratio(ratio)
    masks: dict[str, np.ndarray] = {}
    for name, w in weights.items():
        imp = _channel_importances(w)
        c_out = w.shape[0]
        keep = channel_budget(ratio, c_out)
        mask = np.zeros(c_out, dtype=bool)
        if keep > 0:
            # stable order: descending importance, ties to the lower index
            order = np.lexsort((np.arange(c_out), -imp))
            mask[order[:keep]] = True
        masks[name] = mask
    return FreezePlan(CWPL, ratio, masks, refresh_every)


def plan_cwpn(weights: dict[str, np.ndarray], ratio: float,
              refresh_every: float = math.inf) -> FreezePlan:
    """Rank all channels network-wide; greedily fill a global parameter budget."""
    _check_ratio(ratio)
    entries = []
    total_params = 0
    for layer_idx, (name, w) in enumerate(weights.items()):
        imp = _channel_importances(w)
        ch_size = w[0].size
        total_params += w.size
        for ch in range(w.shape[0]):
            entries.append((-imp[ch], layer_idx, ch, name, ch_size))
    entries.sort(key=lambda e: e[:3])
    budget = channel_budget(ratio, total_params)
    masks = {name: np.zeros(w.shape[0], dtype=bool) for name, w in weights.items()}
    used = 0
    for _, _, ch, name, size in entries:
        if used + size > budget:
            break
        masks[name][ch] = True
        used += size
    return FreezePlan(CWPN, ratio, masks, refresh_every)


def plan_lwpn(weights: dict[str, np.ndarray], ratio: float,
              refresh_every: float = math.inf) -> FreezePlan:
    """Rank whole layers; greedily unfreeze entire layers within the budget."""
    _check_ratio(ratio)
    entries = []
    total_params = 0
    for layer_idx, (name, w) in enumerate(weights.items()):
        entries.append((-block_importance(w), layer_idx, name, w.size))
        total_params += w.size
    entries.sort(key=lambda e: e[:2])
    budget = channel_budget(ratio, total_params)
    masks = {name: np.zeros(w.shape[0], dtype=bool) for name, w in weights.items()}
    used = 0
    for _, _, name, size in entries:
        if used + size > budget:
            break
        masks[name][:] = True
        used += size
    return FreezePlan(LWPN, ratio, masks, refresh_every)


_PLANNERS = {CWPL: plan_cwpl, CWPN: plan_cwpn, LWPN: plan_lwpn}


def build_plan(mode: str, weights: dict[str, np.ndarray], ratio: float,
               refresh_every: float = math.inf) -> FreezePlan:
    if mode not in _PLANNERS:
        raise ValueError(f"unknown freeze mode {mode!r}; expected one of {MODES}")
    if refresh_every < 1:
        raise ValueError(f"refresh interval must be >= 1 sample, got {refresh_every}")
    return _PLANNERS[mode](weights, ratio, refresh_every)


def maybe_refresh(plan: FreezePlan, new_samples: int,
                  weights: dict[str, np.ndarray]) -> FreezePlan:
    """Advance the sample counter; rebuild the plan when it crosses the interval.

    Called on batch boundaries, so the effective interval rounds up to a
    multiple of the batch size.
    """
    count = plan.samples_since_refresh + new_samples
    if count >= plan.refresh_every:
        return build_plan(plan.mode, weights, plan.ratio, plan.refresh_every)
    return replace(plan, samples_since_refresh=count)


def plan_report(plan: FreezePlan, weights: dict[str, np.ndarray]) -> dict:
    """Human-readable summary: per-layer unfrozen counts and the achieved ratio."""
    layers = []
    total = 0
    unfrozen = 0
    for name, w in weights.items():
        mask = plan.masks[name]
        ch_size = w[0].size
        n_unfrozen = int(mask.sum())
        layers.append(
            {
                "layer": name,
                "channels": int(w.shape[0]),
                "unfrozen_channels": n_unfrozen,
                "unfrozen_params": n_unfrozen * ch_size,
                "params": int(w.size),
            }
        )
        total += w.size
        unfrozen += n_unfrozen * ch_size
    return {
        "mode": plan.mode,
        "ratio": plan.ratio,
        "refresh_every": plan.refresh_every,
        "layers": layers,
        "total_params": int(total),
        "unfrozen_params": int(unfrozen),
        "achieved_ratio": (unfrozen / total) if total else 0.0,
    }

"""Closed-form backward MAC counts and reconciliation with live counters.

For a linear layer (batch m) the backward pass costs
``m * C_in * C_out`` MACs for the input gradient plus
``m * C_in * floor(r * C_out)`` for the weight gradient; a conv layer costs
``N * k^2 * C_in * C_out * H_out * W_out`` and
``N * k^2 * C_in * floor(r * C_out) * H_out * W_out`` respectively. Totals
are therefore bounded by (1 + r) times the dense input-gradient cost, which
caps the matmul-only backward speedup at 2x (reached when every weight
gradient is skipped).

Network-level reports use the actual unfrozen-channel counts of a freeze
plan, not floor(r * C_out), so per-network plans reconcile exactly against
the live counters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .freezing import FreezePlan, channel_budget
from .model import AffineGeometry
from .tensor import INPUT_GRAD, WEIGHT_GRAD, MacCounter


class ReconcileError(AssertionError):
    """Live counters disagree with the closed-form model."""


def ops_linear_bwd(c_in: int, c_out: int, m: int, r: float) -> tuple[int, int]:
    """(weight-grad MACs, input-grad MACs) for a linear layer backward."""
    weight = m * c_in * channel_budget(r, c_out)
    inp = m * c_in * c_out
    return weight, inp


def ops_conv_bwd(c_in: int, c_out: int, k: int, h_out: int, w_out: int,
                 n: int, r: float) -> tuple[int, int]:
    """(weight-grad MACs, input-grad MACs) for a conv layer backward."""
    spatial = n * k * k * c_in * h_out * w_out
    return spatial * channel_budget(r, c_out), spatial * c_out


@dataclass
class LayerOps:
    name: str
    kind: str
    unfrozen_channels: int
    channels: int
    input_grad_macs: int
    weight_grad_macs: int
    measured_input_grad: int | None = None
    measured_weight_grad: int | None = None

    @property
    def theoretical_total(self) -> int:
        return self.input_grad_macs + self.weight_grad_macs

    @property
    def measured_total(self) -> int | None:
        if self.measured_input_grad is None:
            return None
        return self.measured_input_grad + self.measured_weight_grad


@dataclass
class OpsReport:
    mode: str
    ratio: float
    batch: int
    layers: list[LayerOps] = field(default_factory=list)

    @property
    def input_grad_total(self) -> int:
        return sum(l.input_grad_macs for l in self.layers)

    @property
    def weight_grad_total(self) -> int:
        return sum(l.weight_grad_macs for l in self.layers)

    @property
    def backward_total(self) -> int:
        return self.input_grad_total + self.weight_grad_total

    @property
    def dense_backward_total(self) -> int:
        return 2 * self.input_grad_total

    @property
    def speedup(self) -> float:
        """Matmul-only backward speedup relative to the dense (r=1) pass."""
        if self.backward_total == 0:
            return 1.0
        return self.dense_backward_total / self.backward_total

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ratio": self.ratio,
            "batch": self.batch,
            "layers": [
                {
                    "layer": l.name,
                    "kind": l.kind,
                    "unfrozen_channels": l.unfrozen_channels,
                    "channels": l.channels,
                    "input_grad_macs": l.input_grad_macs,
                    "weight_grad_macs": l.weight_grad_macs,
                    "theoretical_total": l.theoretical_total,
                    "measured_total": l.measured_total,
                }
                for l in self.layers
            ],
            "input_grad_total": self.input_grad_total,
            "weight_grad_total": self.weight_grad_total,
            "backward_total": self.backward_total,
            "speedup_vs_dense": self.speedup,
        }


def network_report(
    geometry: list[AffineGeometry],
    plan: FreezePlan | None,
    batch: int,
    mode: str = "dense",
    ratio: float = 1.0,
) -> OpsReport:
    """Per-layer backward MAC counts for one batch under a freeze plan.

    Layers absent from the plan (unquantized, or no plan at all) count as
    fully unfrozen.
    """
    report = OpsReport(mode=mode, ratio=ratio, batch=batch)
    for g in geometry:
        if plan is not None and g.name in plan.masks:
            mask = plan.masks[g.name]
            if mask.shape != (g.c_out,):
                raise ValueError(
                    f"plan mask for {g.name!r} has length {mask.shape[0]}, "
                    f"layer has {g.c_out} output channels"
                )
            unfrozen = int(mask.sum())
        else:
            unfrozen = g.c_out
        if g.kind == "conv":
            spatial = batch * g.kernel * g.kernel * g.c_in * g.h_out * g.w_out
            weight, inp = spatial * unfrozen, spatial * g.c_out
        else:
            weight, inp = batch * g.c_in * unfrozen, batch * g.c_in * g.c_out
        report.layers.append(
            LayerOps(
                name=g.name, kind=g.kind, unfrozen_channels=unfrozen,
                channels=g.c_out, input_grad_macs=inp, weight_grad_macs=weight,
            )
        )
    return report


def reconcile(report: OpsReport, counter: MacCounter) -> list[dict]:
    """Check live counters against the report, layer by layer.

    Fills the measured fields in place and returns a list of mismatch
    records; raises ReconcileError when any mismatch is found.
    """
    diffs = []
    for layer in report.layers:
        layer.measured_input_grad = counter.get(layer.name, INPUT_GRAD)
        layer.measured_weight_grad = counter.get(layer.name, WEIGHT_GRAD)
        for phase, expected, measured in (
            (INPUT_GRAD, layer.input_grad_macs, layer.measured_input_grad),
            (WEIGHT_GRAD, layer.weight_grad_macs, layer.measured_weight_grad),
        ):
            if expected != measured:
                diffs.append(
                    {
                        "layer": layer.name,
                        "phase": phase,
                        "expected": expected,
                        "measured": measured,
                        "delta": measured - expected,
                    }
                )
    if diffs:
        lines = ", ".join(
            f"{d['layer']}/{d['phase']}: expected {d['expected']} got {d['measured']}"
            for d in diffs
        )
        raise ReconcileError(f"MAC counters diverge from the cost model: {lines}")
    return diffs

"""Integer fake-quantization: range observation, parameter computation,
quantize-dequantize forward, STE backward, and learnable-parameter gradients.

Conventions used throughout (and by every caller):
  * rounding is round-half-away-from-zero, uniformly;
  * asymmetric quantizers clamp to [0, 2^b - 1] with a real-valued zero point;
  * symmetric quantizers clamp to [-(2^(b-1) - 1), 2^(b-1) - 1] with zero
    point fixed at 0;
  * "in range" means the pre-clamp integer landed inside the clamp window;
    only in-range elements pass gradient through the STE.

Scale/zero-point gradients follow the straight-through derivation: the
rounding residue is treated as locally constant, which yields
``d/dS = round(x/S) - x/S`` in range and the clamp-level constants outside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, Tensor

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"
RAW = "raw"
LOG2 = "log2"

# Quantization parameters live in float64: a float32 scale would perturb
# quotients like 0.25 / (0.5/7) off their exact rounding ties. Tensor data
# stays float32.
QDTYPE = np.float64


class DegenerateRangeError(ValueError):
    """Observed range cannot produce a positive scale."""


class ConfigurationError(ValueError):
    """Quantizer parameters are inconsistent with the tensor they apply to."""


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    """Round to nearest, ties away from zero (np.round ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x))


@dataclass
class QuantParams:
    """Quantization parameters for one tensor slot.

    ``scale`` and ``zero_point`` are float32 vectors of length 1 (per-tensor)
    or C (per-channel along ``axis``). ``transform`` selects the
    optimizer-visible parameterization of the scale; the runtime scale stored
    here is always the raw value.
    """

    bits: int
    symmetric: bool
    granularity: str = PER_TENSOR
    scale: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=QDTYPE))
    zero_point: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=QDTYPE))
    transform: str = RAW
    axis: int = 0

    def __post_init__(self):
        if self.bits < 2:
            raise ConfigurationError(f"bit-width must be >= 2, got {self.bits}")
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=QDTYPE))
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=QDTYPE))
        if self.scale.shape != self.zero_point.shape:
            raise ConfigurationError("scale and zero_point must have equal length")
        if np.any(self.scale <= 0):
            raise ConfigurationError("every scale must be positive")
        if self.symmetric and np.any(self.zero_point != 0):
            raise ConfigurationError("symmetric quantization requires zero_point == 0")
        if self.transform not in (RAW, LOG2):
            raise ConfigurationError(f"unknown transform {self.transform!r}")

    @property
    def num_levels(self) -> int:
        return 2 ** self.bits

    def qmin_qmax(self) -> tuple[float, float]:
        if self.symmetric:
            return -(2 ** (self.bits - 1) - 1), 2 ** (self.bits - 1) - 1
        return 0.0, 2.0 ** self.bits - 1.0

    def copy(self) -> "QuantParams":
        return QuantParams(
            bits=self.bits,
            symmetric=self.symmetric,
            granularity=self.granularity,
            scale=self.scale.copy(),
            zero_point=self.zero_point.copy(),
            transform=self.transform,
            axis=self.axis,
        )


class RangeObserver:
    """MinMax range tracker; observing can only widen [low, high]."""

    def __init__(self, per_channel: bool = False, axis: int = 0):
        self.per_channel = per_channel
        self.axis = axis
        self.low: np.ndarray | None = None
        self.high: np.ndarray | None = None

    def observe(self, arr: np.ndarray) -> "RangeObserver":
        arr = np.asarray(arr)
        if arr.size == 0:
            raise ValueError("cannot observe an empty tensor")
        if self.per_channel:
            if not (0 <= self.axis < arr.ndim):
                raise ConfigurationError(
                    f"per-channel axis {self.axis} invalid for shape {arr.shape}"
                )
            flat = np.moveaxis(arr, self.axis, 0).reshape(arr.shape[self.axis], -1)
            lo = flat.min(axis=1).astype(DTYPE)
            hi = flat.max(axis=1).astype(DTYPE)
        else:
            lo = np.array([arr.min()], dtype=DTYPE)
            hi = np.array([arr.max()], dtype=DTYPE)
        if self.low is None:
            self.low, self.high = lo, hi
        else:
            if lo.shape != self.low.shape:
                raise ConfigurationError("observed slice count changed between batches")
            np.minimum(self.low, lo, out=self.low)
            np.maximum(self.high, hi, out=self.high)
        return self


def compute_asym_params(alpha, beta, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Scale and zero point for an asymmetric range [alpha, beta]."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    if np.any(beta <= alpha):
        raise DegenerateRangeError(f"need beta > alpha, got [{alpha}, {beta}]")
    qmax = 2.0 ** bits - 1.0
    scale = (beta - alpha) / qmax
    zero = np.clip(-round_half_away(alpha / scale), 0.0, qmax)
    return scale.astype(QDTYPE), zero.astype(QDTYPE)


def compute_sym_scale(alpha, beta, bits: int) -> np.ndarray:
    """Scale for a symmetric range: max(|alpha|, |beta|) / (2^(b-1) - 1)."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    mag = np.maximum(np.abs(alpha), np.abs(beta))
    if np.any(mag == 0):
        raise DegenerateRangeError("all-zero range has no symmetric scale")
    return (mag / (2 ** (bits - 1) - 1)).astype(QDTYPE)


def observer_params(
    obs: RangeObserver, bits: int, symmetric: bool, transform: str = RAW
) -> QuantParams:
    """Build QuantParams from an observer, with the unit-scale fallback.

    Degenerate slices (zero width, or all-zero for symmetric) get scale 1 and
    zero point 0 so dead channels quantize to a constant instead of dividing
    by zero; training may later adapt the scale.
    """
    if obs.low is None:
        raise ConfigurationError("observer has seen no data")
    lo = obs.low.astype(np.float64)
    hi = obs.high.astype(np.float64)
    n = lo.shape[0]
    scale = np.ones(n, dtype=QDTYPE)
    zero = np.zeros(n, dtype=QDTYPE)
    if symmetric:
        ok = np.maximum(np.abs(lo), np.abs(hi)) > 0
        if ok.any():
            scale[ok] = compute_sym_scale(lo[ok], hi[ok], bits)
    else:
        ok = hi > lo
        if ok.any():
            s, z = compute_asym_params(lo[ok], hi[ok], bits)
            scale[ok] = s
            zero[ok] = z
    return QuantParams(
        bits=bits,
        symmetric=symmetric,
        granularity=PER_CHANNEL if obs.per_channel else PER_TENSOR,
        scale=scale,
        zero_point=zero,
        transform=transform,
        axis=obs.axis,
    )


# ---- forward / backward math ---------------------------------------------------


def _broadcast_shape(qp: QuantParams, ndim: int) -> tuple[int, ...]:
    if qp.granularity == PER_TENSOR:
        return (1,) * ndim
    shape = [1] * ndim
    shape[qp.axis] = qp.scale.shape[0]
    return tuple(shape)


def _check_channels(qp: QuantParams, x: np.ndarray) -> None:
    if qp.granularity == PER_CHANNEL and x.shape[qp.axis] != qp.scale.shape[0]:
        raise ConfigurationError(
            f"per-channel scale length {qp.scale.shape[0]} does not match "
            f"axis {qp.axis} of tensor shape {x.shape}"
        )


def fake_quant_detail(
    x: np.ndarray, qp: QuantParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Quantize-dequantize plus everything backward needs.

    Returns (xq, in_range, ds_el, dz_el): the dequantized float32 output, the
    STE pass-through mask, and the per-element scale / zero-point gradient
    factors (to be weighted by the upstream gradient and summed per slice).
    """
    x = np.asarray(x)
    _check_channels(qp, x)
    bshape = _broadcast_shape(qp, x.ndim)
    s = qp.scale.reshape(bshape)
    qlo, qhi = qp.qmin_qmax()

    t = x.astype(np.float64) / s
    r = round_half_away(t)
    if qp.symmetric:
        q_pre = r
        dz_el = None
    else:
        z = qp.zero_point.reshape(bshape)
        q_pre = r + z
    low = q_pre < qlo
    high = q_pre > qhi
    in_range = ~(low | high)
    q = np.clip(q_pre, qlo, qhi)

    if qp.symmetric:
        xq = (s * q).astype(DTYPE)
        ds_el = np.where(in_range, r - t, np.where(low, qlo, qhi))
        dz_el = np.zeros_like(ds_el)
    else:
        xq = (s * (q - z)).astype(DTYPE)
        ds_el = np.where(in_range, r - t, np.where(low, qlo - z, qhi - z))
        dz_el = np.where(in_range, 0.0, -s)
    return xq, in_range, ds_el.astype(DTYPE), dz_el.astype(DTYPE)


def fake_quant(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Quantize-dequantize an array under qp (sym or asym)."""
    return fake_quant_detail(x, qp)[0]


def ste_backward(d_out: np.ndarray, in_range: np.ndarray) -> np.ndarray:
    """Straight-through estimate: pass gradient where in range, zero it where clamped."""
    return np.multiply(d_out, in_range, dtype=DTYPE)


def _slice_sum(values: np.ndarray, qp: QuantParams) -> np.ndarray:
    if qp.granularity == PER_TENSOR:
        return np.array([values.sum(dtype=QDTYPE)], dtype=QDTYPE)
    moved = np.moveaxis(values, qp.axis, 0)
    return moved.reshape(moved.shape[0], -1).sum(axis=1, dtype=QDTYPE)


def qparam_grads(
    d_out: np.ndarray, x: np.ndarray, qp: QuantParams
) -> tuple[np.ndarray, np.ndarray]:
    """Loss gradients w.r.t. scale and zero point, summed per slice.

    Under the log2 transform the scale gradient is chained onto log2(scale):
    d/d(log2 S) = d/dS * S * ln 2.
    """
    _, _, ds_el, dz_el = fake_quant_detail(x, qp)
    d_out = np.asarray(d_out, dtype=DTYPE)
    d_scale = _slice_sum(d_out * ds_el, qp)
    d_zero = _slice_sum(d_out * dz_el, qp)
    if qp.transform == LOG2:
        d_scale = d_scale * qp.scale * np.log(2.0)
    return d_scale, d_zero


class Quantizer:
    """Runtime fake-quantizer for one tensor slot, wired into the tape.

    Accumulates scale / zero-point gradients (already chained through the
    configured transform) across backward passes until ``zero_grad``.
    """

    def __init__(self, qp: QuantParams):
        self.qp = qp
        self.grad_scale = np.zeros_like(qp.scale)
        self.grad_zero_point = np.zeros_like(qp.zero_point)

    def zero_grad(self) -> None:
        self.grad_scale[:] = 0
        self.grad_zero_point[:] = 0

    def quantize(self, x: Tensor) -> Tensor:
        xq, in_range, ds_el, dz_el = fake_quant_detail(x.data, self.qp)
        out = Tensor(xq)
        qp = self.qp

        def _backward(g):
            x.accumulate_grad(ste_backward(g, in_range))
            d_scale = _slice_sum(g * ds_el, qp)
            if qp.transform == LOG2:
                d_scale = d_scale * qp.scale * np.log(2.0)
            self.grad_scale += d_scale
            self.grad_zero_point += _slice_sum(g * dz_el, qp)

        return x._record(out, _backward)

"""Training engine: PTQ calibration, the selective-backward training loop,
dual optimizers, evaluation, and the reference modes.

One training step does, in order: fake-quant forward, backward with
row-selective weight gradients, an SGD update of the unfrozen weight
channels plus all biases and normalization parameters, and an Adam update of
the quantization parameters (per-channel weight scales gated by the same
row masks; activation scale and zero point always). The freeze plan is
re-evaluated on batch boundaries once the configured number of samples has
been processed.

Plain QAT is the r=1 special case and runs through the identical code path,
so its trajectories are bit-identical to EfQAT at ratio 1. The r=0 case
updates only quantization parameters, biases, and normalization layers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .freezing import FreezePlan, build_plan, maybe_refresh
from .model import Model
from .quantizers import LOG2, RAW
from .tensor import DTYPE, MacCounter, Tensor, cross_entropy_softmax

EFQAT_MODES = ("efqat-cwpl", "efqat-cwpn", "efqat-lwpn")
ALL_MODES = ("fp", "fp+1", "ptq", "qat") + EFQAT_MODES

SCALE_FLOOR = 1e-8


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    mode: str = "efqat-cwpn"
    ratio: float = 0.25
    freeze_freq: float = 4096.0  # samples between plan refreshes; inf = never
    epochs: int = 1
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    qparam_lr: float = 1e-3
    qparam_beta1: float = 0.9
    qparam_beta2: float = 0.999
    qparam_eps: float = 1e-8
    qparam_transform: str = RAW
    calib_size: int = 512
    seed: int = 0
    import_optimizer_state: bool = False
    fp_epochs: int = 3  # in-run full-precision pretraining when no checkpoint is given

    def __post_init__(self):
        if self.mode not in ALL_MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {ALL_MODES}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.freeze_freq < 1:
            raise ValueError(f"freeze-freq must be >= 1, got {self.freeze_freq}")
        if self.qparam_transform not in (RAW, LOG2):
            raise ValueError(f"qparam transform must be raw or log2")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if math.isinf(d["freeze_freq"]):
            d["freeze_freq"] = "inf"
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = set(TrainConfig().__dict__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        d = dict(d)
        if d.get("freeze_freq") == "inf":
            d["freeze_freq"] = math.inf
        return TrainConfig(**d)


class SGD:
    """Momentum SGD with optional row masking on axis 0.

    Masked rows are untouched: neither the parameter nor its velocity buffer
    is read or written while frozen.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, param: Tensor, mask: np.ndarray | None = None) -> None:
        if param.grad is None:
            return
        v = self.velocity.setdefault(param.name, np.zeros_like(param.data))
        g = param.grad
        if self.weight_decay:
            g = g + self.weight_decay * param.data
        if mask is None or mask.all():
            v *= self.momentum
            v += g
            param.data -= self.lr * v
        else:
            idx = np.flatnonzero(mask)
            if idx.size == 0:
                return
            v[idx] = self.momentum * v[idx] + g[idx]
            param.data[idx] -= self.lr * v[idx]


class Adam:
    """Adam with per-element step counters so masked entries keep exact
    bias correction when they unfreeze later."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def step(self, key: str, value: np.ndarray, grad: np.ndarray,
             mask: np.ndarray | None = None) -> np.ndarray:
        if key not in self.state:
            self.state[key] = (
                np.zeros_like(value, dtype=np.float64),
                np.zeros_like(value, dtype=np.float64),
                np.zeros(value.shape, dtype=np.int64),
            )
        m, v, t = self.state[key]
        sel = slice(None) if mask is None else np.flatnonzero(mask)
        if mask is not None and len(np.atleast_1d(sel)) == 0:
            return value
        g = grad.astype(np.float64)[sel]
        m[sel] = self.beta1 * m[sel] + (1 - self.beta1) * g
        v[sel] = self.beta2 * v[sel] + (1 - self.beta2) * g * g
        t[sel] += 1
        m_hat = m[sel] / (1 - self.beta1 ** t[sel])
        v_hat = v[sel] / (1 - self.beta2 ** t[sel])
        out = value.copy()
        out[sel] = (value[sel].astype(np.float64)
                    - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(value.dtype)
        return out


class QParamOptimizer:
    """Adam over all quantization parameters of a model.

    Weight scales step in raw or log2 space per the configured transform
    (gradients arrive already chained); raw scales are clamped to a small
    positive floor afterwards, and ``clamp_events`` counts how often that
    guard actually fired. Zero points always step in raw space, as free
    real-valued parameters (only the PTQ formula clamps them).
    """

    def __init__(self, model: Model, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.adam = Adam(lr, beta1, beta2, eps)
        self.clamp_events = 0

    def _step_scale(self, key: str, quant, mask: np.ndarray | None) -> None:
        qp = quant.qp
        if qp.transform == LOG2:
            p = np.log2(qp.scale)
            p = self.adam.step(key, p, quant.grad_scale, mask)
            new_scale = np.exp2(p)
        else:
            new_scale = self.adam.step(key, qp.scale, quant.grad_scale, mask)
            low = new_scale < SCALE_FLOOR
            if mask is not None:
                low &= mask
            if low.any():
                self.clamp_events += int(low.sum())
                new_scale = np.where(low, SCALE_FLOOR, new_scale)
        if mask is None:
            qp.scale[:] = new_scale
        else:
            qp.scale[mask] = new_scale[mask]

    def step(self, masks: dict[str, np.ndarray] | None = None) -> None:
        masks = masks or {}
        for layer in self.model.quantized_layers():
            mask = masks.get(layer.name)
            self._step_scale(f"{layer.name}.wq.scale", layer.w_quant, mask)
            aq = layer.a_quant
            self._step_scale(f"{layer.name}.aq.scale", aq, None)
            aq.qp.zero_point[:] = self.adam.step(
                f"{layer.name}.aq.zero_point", aq.qp.zero_point, aq.grad_zero_point
            )


def calibration_indices(n: int, calib_size: int, seed: int) -> np.ndarray:
    order = np.random.default_rng(seed).permutation(n)
    return order[: min(calib_size, n)]


def calibrate(model: Model, train: Dataset, calib_size: int, seed: int,
              transform: str = RAW, batch_size: int = 64) -> int:
    """PTQ initialization: observe ranges over the calibration set, then
    derive per-channel symmetric weight params and per-tensor asymmetric
    activation params. Weights are untouched. Returns the number of
    calibration samples used."""
    if len(train) == 0 or calib_size < 1:
        raise ValueError("calibration requires a nonempty calibration set")
    idx = calibration_indices(len(train), calib_size, seed)
    model.start_observation()
    for start in range(0, len(idx), batch_size):
        xb = train.x[idx[start : start + batch_size]]
        model.forward(xb, quantized=False, training=False, observe=True)
    model.finish_calibration(transform)
    return len(idx)


def evaluate(model: Model, ds: Dataset, quantized: bool,
             batch_size: int = 256) -> dict:
    """Deterministic accuracy/loss over a dataset; mutates nothing."""
    if len(ds) == 0:
        raise ValueError("evaluation dataset is empty")
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(ds), batch_size):
        xb = ds.x[start : start + batch_size]
        yb = ds.y[start : start + batch_size]
        logits = model.forward(xb, quantized=quantized, training=False)
        loss = cross_entropy_softmax(logits, yb)
        loss_sum += float(loss.data) * len(xb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return {"accuracy": correct / len(ds), "loss": loss_sum / len(ds)}


def make_plan(mode: str, model: Model, ratio: float, freeze_freq: float) -> FreezePlan | None:
    """Freeze plan for a training mode; dense modes get an all-true CWPL plan."""
    weights = model.quantized_weights()
    if mode == "qat":
        return build_plan("cwpl", weights, 1.0, math.inf)
    if mode in EFQAT_MODES:
        return build_plan(mode.split("-", 1)[1], weights, ratio, freeze_freq)
    return None


@dataclass
class StepRecord:
    step: int
    epoch: int
    samples_seen: int
    loss: float
    frozen_fraction: float
    backward_macs_theoretical: int
    backward_macs_measured: int
    backward_seconds: float
    eval_accuracy: float | None = None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if d["eval_accuracy"] is None:
            del d["eval_accuracy"]
        return d


class TrainLoop:
    """One configured training run over a model (full precision or quantized)."""

    def __init__(self, model: Model, config: TrainConfig, quantized: bool,
                 plan: FreezePlan | None = None):
        if quantized and not model.is_calibrated:
            raise ValueError("quantized training requires calibration first")
        self.model = model
        self.config = config
        self.quantized = quantized
        self.plan = plan
        self.sgd = SGD(config.lr, config.momentum, config.weight_decay)
        self.qparam_opt = (
            QParamOptimizer(model, config.qparam_lr, config.qparam_beta1,
                            config.qparam_beta2, config.qparam_eps)
            if quantized else None
        )
        self.counter = MacCounter()
        self.step_index = 0
        self.samples_seen = 0
        self.records: list[StepRecord] = []

    def _frozen_fraction(self) -> float:
        if self.plan is None:
            return 0.0
        weights = self.model.quantized_weights()
        total = sum(w.size for w in weights.values())
        if total == 0:
            return 0.0
        return 1.0 - self.plan.unfrozen_params(weights) / total

    def _theoretical_backward(self, batch_n: int) -> int:
        from .costmodel import network_report

        report = network_report(self.model.net.affine_geometry(), self.plan, batch_n)
        return report.backward_total

    def train_step(self, xb: np.ndarray, yb: np.ndarray, epoch: int) -> StepRecord:
        model = self.model
        masks = self.plan.masks if self.plan is not None else {}
        model.zero_grad()
        bwd_before = self.counter.backward_total()
        logits = model.forward(xb, quantized=self.quantized, training=True,
                               counter=self.counter, masks=masks)
        loss = cross_entropy_softmax(logits, yb)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            raise DivergenceError(
                f"non-finite loss {loss_value} at step {self.step_index} "
                f"(epoch {epoch}, {self.samples_seen} samples seen)"
            )
        t0 = time.perf_counter()
        loss.backward()
        backward_seconds = time.perf_counter() - t0

        for layer in model.affine_layers():
            self.sgd.step(layer.weight, masks.get(layer.name))
            self.sgd.step(layer.bias)
        for norm in model.norm_layers():
            self.sgd.step(norm.gamma)
            self.sgd.step(norm.beta)
        if self.qparam_opt is not None:
            self.qparam_opt.step(masks)

        self.samples_seen += len(xb)
        if self.plan is not None:
            self.plan = maybe_refresh(self.plan, len(xb), model.quantized_weights())
        record = StepRecord(
            step=self.step_index,
            epoch=epoch,
            samples_seen=self.samples_seen,
            loss=loss_value,
            frozen_fraction=self._frozen_fraction(),
            backward_macs_theoretical=self._theoretical_backward(len(xb)),
            backward_macs_measured=self.counter.backward_total() - bwd_before,
            backward_seconds=backward_seconds,
        )
        self.step_index += 1
        self.records.append(record)
        return record

    def run_epoch(self, train: Dataset, rng: np.random.Generator, epoch: int = 0,
                  step_callback=None) -> list[StepRecord]:
        order = rng.permutation(len(train))
        bs = self.config.batch_size
        out = []
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            record = self.train_step(train.x[idx], train.y[idx], epoch)
            out.append(record)
            if step_callback is not None:
                step_callback(self, record)
        return out

    def run(self, train: Dataset, step_callback=None) -> list[StepRecord]:
        rng = np.random.default_rng(self.config.seed)
        for epoch in range(self.config.epochs):
            self.run_epoch(train, rng, epoch, step_callback)
        return self.records

    # ---- optimizer state round trip -------------------------------------------

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        return {f"optim.{k}.velocity": v for k, v in self.sgd.velocity.items()}

    def load_optimizer_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        prefix = "optim."
        suffix = ".velocity"
        for key, val in arrays.items():
            if key.startswith(prefix) and key.endswith(suffix):
                name = key[len(prefix) : -len(suffix)]
                self.sgd.velocity[name] = val.astype(DTYPE).copy()

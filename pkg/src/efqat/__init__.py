"""Quantization-aware training with importance-based structured weight freezing.

The package simulates integer inference with fake quantization, fine-tunes a
post-training-quantized model while updating only the most important weight
channels, and accounts for every backward-pass multiply-accumulate so the
theoretical cost model can be checked against live counters.
"""

from .costmodel import OpsReport, network_report, ops_conv_bwd, ops_linear_bwd, reconcile
from .data import Dataset, ingest_dataset
from .freezing import (
    FreezePlan,
    RowMask,
    block_importance,
    build_plan,
    maybe_refresh,
    plan_cwpl,
    plan_cwpn,
    plan_lwpn,
)
from .model import LayerSpec, Model, NetSpec
from .quantizers import (
    QuantParams,
    Quantizer,
    RangeObserver,
    compute_asym_params,
    compute_sym_scale,
    fake_quant,
    qparam_grads,
    ste_backward,
)
from .tensor import MacCounter, Tensor, conv2d, cross_entropy_softmax, linear, matmul
from .training import TrainConfig, TrainLoop, calibrate, evaluate, make_plan

__version__ = "0.1.0"

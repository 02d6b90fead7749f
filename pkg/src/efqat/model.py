"""Network description and the runtime model built from it.

A :class:`NetSpec` is an ordered list of layer descriptors plus the input
shape and the weight/activation bit-widths. Shapes are propagated at
construction, so a spec that does not compose fails fast. The runtime
:class:`Model` owns the parameter tensors, per-layer quantizers and batch
normalization state, and builds the autodiff graph for one forward pass.

Quantized affine layers carry two fake-quantizers: a per-channel symmetric
one on the weight and a per-tensor asymmetric one on the layer input. Both
are created by calibration and absent before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .quantizers import (
    LOG2,
    RAW,
    QuantParams,
    Quantizer,
    RangeObserver,
    observer_params,
)
from .tensor import DTYPE, MacCounter, Tensor


class NetSpecError(ValueError):
    """Layer descriptors do not form a valid network."""


@dataclass
class LayerSpec:
    kind: str  # conv | linear | relu | pool | normalize | flatten
    out_channels: int = 0      # conv
    out_features: int = 0      # linear
    kernel: int = 0            # conv (required) / pool (default 2)
    stride: int = 1
    padding: int = 0
    quantize: bool = True      # conv / linear only

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(
                out_channels=self.out_channels, kernel=self.kernel,
                stride=self.stride, padding=self.padding, quantize=self.quantize,
            )
        elif self.kind == "linear":
            d.update(out_features=self.out_features, quantize=self.quantize)
        elif self.kind == "pool":
            d.update(kernel=self.kernel or 2, stride=self.stride)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        kind = d.get("kind")
        known = {
            "conv": {"kind", "out_channels", "kernel", "stride", "padding", "quantize"},
            "linear": {"kind", "out_features", "quantize"},
            "pool": {"kind", "kernel", "stride"},
            "relu": {"kind"},
            "normalize": {"kind"},
            "flatten": {"kind"},
        }
        if kind not in known:
            raise NetSpecError(f"unknown layer kind {kind!r}")
        extra = set(d) - known[kind]
        if extra:
            raise NetSpecError(f"unknown keys {sorted(extra)} in {kind} layer spec")
        spec = LayerSpec(kind=kind)
        for key, value in d.items():
            if key != "kind":
                setattr(spec, key, value)
        if kind == "pool" and spec.kernel == 0:
            spec.kernel = 2
            spec.stride = d.get("stride", 2)
        return spec


@dataclass
class AffineGeometry:
    """Resolved geometry of one linear/conv layer, for the cost model."""

    name: str
    kind: str
    c_in: int
    c_out: int
    quantize: bool
    kernel: int = 1
    h_out: int = 1
    w_out: int = 1

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.c_out, self.c_in, self.kernel, self.kernel)
        return (self.c_out, self.c_in)


@dataclass
class NetSpec:
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    bits_w: int = 8
    bits_a: int = 8

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes = self._propagate()

    def _propagate(self) -> list[tuple[int, ...]]:
        shape = self.input_shape
        shapes = [shape]
        for i, spec in enumerate(self.layers):
            if spec.kind == "conv":
                if len(shape) != 3:
                    raise NetSpecError(f"layer {i}: conv needs (C,H,W) input, got {shape}")
                if spec.kernel <= 0:
                    raise NetSpecError(f"layer {i}: conv kernel must be positive")
                c, h, w = shape
                h2 = T.conv_out_size(h, spec.kernel, spec.stride, spec.padding)
                w2 = T.conv_out_size(w, spec.kernel, spec.stride, spec.padding)
                if h2 <= 0 or w2 <= 0:
                    raise NetSpecError(f"layer {i}: conv output {h2}x{w2} is empty")
                shape = (spec.out_channels, h2, w2)
            elif spec.kind == "linear":
                if len(shape) != 1:
                    raise NetSpecError(
                        f"layer {i}: linear needs flat input, got {shape}; add a flatten layer"
                    )
                shape = (spec.out_features,)
            elif spec.kind == "pool":
                if len(shape) != 3:
                    raise NetSpecError(f"layer {i}: pool needs (C,H,W) input, got {shape}")
                k = spec.kernel or 2
                s = spec.stride or k
                c, h, w = shape
                h2 = T.conv_out_size(h, k, s, 0)
                w2 = T.conv_out_size(w, k, s, 0)
                if h2 <= 0 or w2 <= 0:
                    raise NetSpecError(f"layer {i}: pool output {h2}x{w2} is empty")
                shape = (c, h2, w2)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind in ("relu", "normalize"):
                pass
            else:
                raise NetSpecError(f"layer {i}: unknown kind {spec.kind!r}")
            shapes.append(shape)
        return shapes

    def layer_name(self, index: int) -> str:
        return f"{index}.{self.layers[index].kind}"

    def affine_geometry(self) -> list[AffineGeometry]:
        out = []
        for i, spec in enumerate(self.layers):
            if spec.kind == "conv":
                c_in = self.shapes[i][0]
                _, h2, w2 = self.shapes[i + 1]
                out.append(
                    AffineGeometry(
                        name=self.layer_name(i), kind="conv", c_in=c_in,
                        c_out=spec.out_channels, quantize=spec.quantize,
                        kernel=spec.kernel, h_out=h2, w_out=w2,
                    )
                )
            elif spec.kind == "linear":
                out.append(
                    AffineGeometry(
                        name=self.layer_name(i), kind="linear",
                        c_in=self.shapes[i][0], c_out=spec.out_features,
                        quantize=spec.quantize,
                    )
                )
        return out

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "bits_w": self.bits_w,
            "bits_a": self.bits_a,
            "layers": [s.to_dict() for s in self.layers],
        }

    @staticmethod
    def from_dict(d: dict) -> "NetSpec":
        extra = set(d) - {"input_shape", "bits_w", "bits_a", "layers"}
        if extra:
            raise NetSpecError(f"unknown keys {sorted(extra)} in net spec")
        return NetSpec(
            input_shape=tuple(d["input_shape"]),
            layers=[LayerSpec.from_dict(ld) for ld in d["layers"]],
            bits_w=int(d.get("bits_w", 8)),
            bits_a=int(d.get("bits_a", 8)),
        )


class _AffineLayer:
    """Shared state for conv/linear: parameters, quantizers, observers."""

    def __init__(self, name: str, spec: LayerSpec, weight_shape: tuple[int, ...],
                 rng: np.random.Generator):
        self.name = name
        self.spec = spec
        fan_in = int(np.prod(weight_shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, std, size=weight_shape).astype(DTYPE),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(weight_shape[0], dtype=DTYPE),
                           requires_grad=True, name=f"{name}.bias")
        self.w_quant: Quantizer | None = None
        self.a_quant: Quantizer | None = None
        self.a_observer: RangeObserver | None = None


class _NormLayer:
    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=DTYPE), requires_grad=True,
                            name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=DTYPE), requires_grad=True,
                           name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)


class Model:
    """Runtime network: parameters, quantizers, and the forward graph builder."""

    def __init__(self, net: NetSpec, seed: int = 0):
        self.net = net
        rng = np.random.default_rng(seed)
        self.layers: list[object | None] = []
        for i, spec in enumerate(net.layers):
            name = net.layer_name(i)
            if spec.kind == "conv":
                c_in = net.shapes[i][0]
                shape = (spec.out_channels, c_in, spec.kernel, spec.kernel)
                self.layers.append(_AffineLayer(name, spec, shape, rng))
            elif spec.kind == "linear":
                shape = (spec.out_features, net.shapes[i][0])
                self.layers.append(_AffineLayer(name, spec, shape, rng))
            elif spec.kind == "normalize":
                self.layers.append(_NormLayer(name, net.shapes[i][0]))
            else:
                self.layers.append(None)

    # ---- parameter traversal -----------------------------------------------

    def affine_layers(self) -> list[_AffineLayer]:
        return [l for l in self.layers if isinstance(l, _AffineLayer)]

    def quantized_layers(self) -> list[_AffineLayer]:
        return [l for l in self.affine_layers() if l.spec.quantize]

    def norm_layers(self) -> list[_NormLayer]:
        return [l for l in self.layers if isinstance(l, _NormLayer)]

    def quantized_weights(self) -> dict[str, np.ndarray]:
        """Latent full-precision weights of quantized layers, in network order."""
        return {l.name: l.weight.data for l in self.quantized_layers()}

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.layers:
            if isinstance(layer, _AffineLayer):
                params.extend([layer.weight, layer.bias])
            elif isinstance(layer, _NormLayer):
                params.extend([layer.gamma, layer.beta])
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()
        for layer in self.quantized_layers():
            if layer.w_quant is not None:
                layer.w_quant.zero_grad()
            if layer.a_quant is not None:
                layer.a_quant.zero_grad()

    @property
    def is_calibrated(self) -> bool:
        qls = self.quantized_layers()
        return bool(qls) and all(l.w_quant is not None and l.a_quant is not None for l in qls)

    # ---- calibration ---------------------------------------------------------

    def start_observation(self) -> None:
        for layer in self.quantized_layers():
            layer.a_observer = RangeObserver(per_channel=False)

    def finish_calibration(self, transform: str = RAW) -> None:
        """Turn observed ranges into quantizers (per-channel symmetric weights,
        per-tensor asymmetric activations)."""
        if transform not in (RAW, LOG2):
            raise ValueError(f"unknown qparam transform {transform!r}")
        for layer in self.quantized_layers():
            if layer.a_observer is None or layer.a_observer.low is None:
                raise ValueError(f"layer {layer.name}: no activation range observed")
            w_obs = RangeObserver(per_channel=True, axis=0).observe(layer.weight.data)
            layer.w_quant = Quantizer(
                observer_params(w_obs, self.net.bits_w, symmetric=True, transform=transform)
            )
            layer.a_quant = Quantizer(
                observer_params(layer.a_observer, self.net.bits_a, symmetric=False,
                                transform=transform)
            )
            layer.a_observer = None

    # ---- forward ---------------------------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        quantized: bool = False,
        training: bool = False,
        counter: MacCounter | None = None,
        masks: dict[str, np.ndarray] | None = None,
        observe: bool = False,
    ) -> Tensor:
        """Build the tape for one batch and return the logits tensor."""
        if x.shape[1:] != self.net.input_shape:
            raise NetSpecError(
                f"input shape {x.shape[1:]} does not match spec {self.net.input_shape}"
            )
        if quantized and not self.is_calibrated:
            raise ValueError("quantized forward requires calibration first")
        masks = masks or {}
        out = Tensor(np.ascontiguousarray(x, dtype=DTYPE))
        for i, spec in enumerate(self.net.layers):
            layer = self.layers[i]
            if spec.kind in ("conv", "linear"):
                mask = masks.get(layer.name)
                if observe and spec.quantize:
                    layer.a_observer.observe(out.data)
                if quantized and spec.quantize:
                    out = layer.a_quant.quantize(out)
                    w = layer.w_quant.quantize(layer.weight)
                else:
                    w = layer.weight
                if spec.kind == "conv":
                    out = T.conv2d(out, w, layer.bias, spec.stride, spec.padding,
                                   mask=mask, counter=counter, layer=layer.name)
                else:
                    out = T.linear(out, w, layer.bias, mask=mask, counter=counter,
                                   layer=layer.name)
            elif spec.kind == "relu":
                out = out.relu()
            elif spec.kind == "pool":
                out = T.maxpool2d(out, spec.kernel or 2, spec.stride or spec.kernel or 2)
            elif spec.kind == "flatten":
                out = out.flatten_batch()
            elif spec.kind == "normalize":
                out = T.batch_normalize(out, layer.gamma, layer.beta,
                                        layer.running_mean, layer.running_var,
                                        training=training)
        return out

    # ---- state dict ---------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        for layer in self.layers:
            if isinstance(layer, _AffineLayer):
                state[f"{layer.name}.weight"] = layer.weight.data
                state[f"{layer.name}.bias"] = layer.bias.data
                if layer.w_quant is not None:
                    state[f"{layer.name}.wq.scale"] = layer.w_quant.qp.scale
                    state[f"{layer.name}.wq.zero_point"] = layer.w_quant.qp.zero_point
                    state[f"{layer.name}.aq.scale"] = layer.a_quant.qp.scale
                    state[f"{layer.name}.aq.zero_point"] = layer.a_quant.qp.zero_point
            elif isinstance(layer, _NormLayer):
                state[f"{layer.name}.gamma"] = layer.gamma.data
                state[f"{layer.name}.beta"] = layer.beta.data
                state[f"{layer.name}.running_mean"] = layer.running_mean
                state[f"{layer.name}.running_var"] = layer.running_var
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray], transform: str = RAW) -> None:
        def fetch(key):
            if key not in state:
                raise KeyError(f"checkpoint is missing array {key!r}")
            return state[key]

        for layer in self.layers:
            if isinstance(layer, _AffineLayer):
                layer.weight.data = fetch(f"{layer.name}.weight").astype(DTYPE).copy()
                layer.bias.data = fetch(f"{layer.name}.bias").astype(DTYPE).copy()
                wq_key = f"{layer.name}.wq.scale"
                if layer.spec.quantize and wq_key in state:
                    layer.w_quant = Quantizer(QuantParams(
                        bits=self.net.bits_w, symmetric=True, granularity="per_channel",
                        scale=state[wq_key].copy(),
                        zero_point=state[f"{layer.name}.wq.zero_point"].copy(),
                        transform=transform, axis=0,
                    ))
                    layer.a_quant = Quantizer(QuantParams(
                        bits=self.net.bits_a, symmetric=False, granularity="per_tensor",
                        scale=state[f"{layer.name}.aq.scale"].copy(),
                        zero_point=state[f"{layer.name}.aq.zero_point"].copy(),
                        transform=transform, axis=0,
                    ))
            elif isinstance(layer, _NormLayer):
                layer.gamma.data = fetch(f"{layer.name}.gamma").astype(DTYPE).copy()
                layer.beta.data = fetch(f"{layer.name}.beta").astype(DTYPE).copy()
                layer.running_mean = fetch(f"{layer.name}.running_mean").astype(DTYPE).copy()
                layer.running_var = fetch(f"{layer.name}.running_var").astype(DTYPE).copy()

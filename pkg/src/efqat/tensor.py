"""Dense float32 tensors with a reverse-mode autodiff tape.

The tape is closure-based: every op that participates in backprop attaches a
``_backward`` closure to its output and records its inputs. ``backward()``
walks the recorded graph once in reverse topological order and then clears
it, so a graph is single-use per training step.

Layer ops (``linear``, ``conv2d``) accept an optional boolean row mask over
output channels: weight-gradient rows with ``mask=False`` are left exactly
zero and their multiply-accumulates are neither executed nor counted. All
executed multiply-accumulates are tallied into a :class:`MacCounter` when one
is supplied, split by phase (``forward`` / ``input_grad`` / ``weight_grad``).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

FORWARD = "forward"
INPUT_GRAD = "input_grad"
WEIGHT_GRAD = "weight_grad"


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class MaskError(ValueError):
    """A row mask does not match the layer's output-channel count."""


class MacCounter:
    """Per-layer, per-phase multiply-accumulate tallies for one run.

    Only matmul-family MACs are recorded (linear/conv forward and their two
    backward products). Bias adds, elementwise ops and normalization are
    deliberately not counted; they show up in wall-clock only.
    """

    def __init__(self):
        self.counts: dict[tuple[str, str], int] = {}

    def add(self, layer: str, phase: str, macs: int) -> None:
        key = (layer, phase)
        self.counts[key] = self.counts.get(key, 0) + int(macs)

    def get(self, layer: str, phase: str) -> int:
        return self.counts.get((layer, phase), 0)

    def total(self, phase: str | None = None) -> int:
        if phase is None:
            return sum(self.counts.values())
        return sum(v for (_, p), v in self.counts.items() if p == phase)

    def backward_total(self) -> int:
        return self.total(INPUT_GRAD) + self.total(WEIGHT_GRAD)

    def per_layer(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (layer, phase), v in self.counts.items():
            out.setdefault(layer, {})[phase] = out.setdefault(layer, {}).get(phase, 0) + v
        return out

    def reset(self) -> None:
        self.counts.clear()


class Tensor:
    """A dense float32 array plus an optional gradient buffer and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "name")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (), name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = _prev
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: closures may hand the same upstream array to two inputs
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ---- graph bookkeeping -------------------------------------------------

    def _record(self, out: "Tensor", backward) -> "Tensor":
        out.requires_grad = True
        out._prev = (self,)
        out._backward = backward
        return out

    def backward(self) -> None:
        """Backpropagate from a scalar loss through the recorded tape.

        The graph is cleared afterwards; each node's closure runs exactly once.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        for node in topo:
            node._backward = None
            node._prev = ()

    # ---- elementwise / shape ops -------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data + other.data, _prev=(self, other))
        out.requires_grad = self.requires_grad or other.requires_grad

        def _backward(g):
            self.accumulate_grad(_unbroadcast(g, self.data.shape))
            other.accumulate_grad(_unbroadcast(g, other.data.shape))

        out._backward = _backward
        return out

    def __mul__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data * other.data, _prev=(self, other))
        out.requires_grad = self.requires_grad or other.requires_grad

        def _backward(g):
            self.accumulate_grad(_unbroadcast(g * other.data, self.data.shape))
            other.accumulate_grad(_unbroadcast(g * self.data, other.data.shape))

        out._backward = _backward
        return out

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data)

        def _backward(g):
            self.accumulate_grad(-g)

        return self._record(out, _backward)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self + (-other)

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0))
        pos = self.data > 0

        def _backward(g):
            self.accumulate_grad(g * pos)

        return self._record(out, _backward)

    def reshape(self, *shape: int) -> "Tensor":
        out = Tensor(self.data.reshape(shape))
        src_shape = self.data.shape

        def _backward(g):
            self.accumulate_grad(g.reshape(src_shape))

        return self._record(out, _backward)

    def flatten_batch(self) -> "Tensor":
        """Collapse all non-batch dims: (N, ...) -> (N, prod(...))."""
        n = self.data.shape[0]
        return self.reshape(n, int(np.prod(self.data.shape[1:])))

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum())
        src_shape = self.data.shape

        def _backward(g):
            self.accumulate_grad(np.broadcast_to(g, src_shape).astype(DTYPE))

        return self._record(out, _backward)

    def mean(self) -> "Tensor":
        out = Tensor(self.data.mean())
        src_shape = self.data.shape
        n = self.data.size

        def _backward(g):
            self.accumulate_grad((np.broadcast_to(g, src_shape) / n).astype(DTYPE))

        return self._record(out, _backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return g.astype(DTYPE)


def _check_mask(mask: np.ndarray | None, c_out: int, layer: str) -> np.ndarray:
    if mask is None:
        return np.ones(c_out, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (c_out,):
        raise MaskError(
            f"row mask for layer {layer!r} has shape {mask.shape}, expected ({c_out},)"
        )
    return mask


# ---- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, counter: MacCounter | None = None, layer: str = "matmul") -> Tensor:
    """Plain 2-D product a @ b with recorded backward; counts m*k*n MACs."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes do not chain: {a.data.shape} x {b.data.shape}")
    m, k = a.data.shape
    n = b.data.shape[1]
    if counter is not None:
        counter.add(layer, FORWARD, m * k * n)
    out = Tensor(a.data @ b.data, _prev=(a, b))
    out.requires_grad = a.requires_grad or b.requires_grad

    def _backward(g):
        a.accumulate_grad(g @ b.data.T)
        b.accumulate_grad(a.data.T @ g)

    out._backward = _backward
    return out


# ---- linear layer --------------------------------------------------------------


def linear(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    mask: np.ndarray | None = None,
    counter: MacCounter | None = None,
    layer: str = "linear",
) -> Tensor:
    """y = x @ w.T (+ bias), with row-selective weight gradients.

    x: (m, C_in), w: (C_out, C_in), bias: (C_out,). Backward computes the
    input gradient densely and the weight gradient only for unfrozen rows;
    frozen rows of w.grad stay exactly zero.
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear shapes do not chain: x{x.data.shape} w{w.data.shape}")
    m, c_in = x.data.shape
    c_out = w.data.shape[0]
    mask = _check_mask(mask, c_out, layer)
    n_active = int(mask.sum())

    if counter is not None:
        counter.add(layer, FORWARD, m * c_in * c_out)
    y = x.data @ w.data.T
    if bias is not None:
        y = y + bias.data
    prev = (x, w) if bias is None else (x, w, bias)
    out = Tensor(y, _prev=prev)
    out.requires_grad = True

    def _backward(g):
        # dX = dY @ W is always dense: every layer needs it for the chain.
        if counter is not None:
            counter.add(layer, INPUT_GRAD, m * c_in * c_out)
            counter.add(layer, WEIGHT_GRAD, m * c_in * n_active)
        x.accumulate_grad(g @ w.data)
        dw = np.zeros_like(w.data)
        if n_active == c_out:
            dw[:] = g.T @ x.data
        elif n_active > 0:
            idx = np.flatnonzero(mask)
            dw[idx] = g[:, idx].T @ x.data
        w.accumulate_grad(dw)
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=0))

    out._backward = _backward
    return out


def linear_backward(
    d_y: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    mask: np.ndarray | None = None,
    counter: MacCounter | None = None,
    layer: str = "linear",
) -> tuple[np.ndarray, np.ndarray]:
    """Standalone masked linear backward: returns (dX, dW).

    Same arithmetic as the tape closure in :func:`linear`, exposed for direct
    use and for cost-model reconciliation tests.
    """
    m, c_out = d_y.shape
    c_in = x.shape[1]
    if w.shape != (c_out, c_in):
        raise ShapeError(f"weight shape {w.shape} does not match dY{d_y.shape} x{x.shape}")
    mask = _check_mask(mask, c_out, layer)
    n_active = int(mask.sum())
    if counter is not None:
        counter.add(layer, INPUT_GRAD, m * c_in * c_out)
        counter.add(layer, WEIGHT_GRAD, m * c_in * n_active)
    dx = d_y @ w
    dw = np.zeros_like(w)
    if n_active == c_out:
        dw[:] = d_y.T @ x
    elif n_active > 0:
        idx = np.flatnonzero(mask)
        dw[idx] = d_y[:, idx].T @ x
    return dx, dw


# ---- conv2d ---------------------------------------------------------------------


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix of shape (N*Ho*Wo, k*k*C); columns ordered (i, j, c) so
    the backward scatter in _col2im reads contiguous channel blocks."""
    n, c, h, w = x.shape
    h_out = conv_out_size(h, k, stride, padding)
    w_out = conv_out_size(w, k, stride, padding)
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(
            f"conv output dims must be positive, got {h_out}x{w_out} "
            f"for input {h}x{w}, kernel {k}, stride {stride}, padding {padding}"
        )
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, k, k) -> (N, Ho, Wo, k, k, C) -> (N*Ho*Wo, k*k*C)
    cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(n * h_out * w_out, k * k * c)
    return np.ascontiguousarray(cols), h_out, w_out


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    """(C_out, C_in, k, k) -> (C_out, k*k*C_in), matching the im2col order."""
    c_out, c_in, k, _ = w.shape
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(c_out, k * k * c_in))


def _col2im(
    dcols: np.ndarray, x_shape: tuple[int, ...], k: int, stride: int, padding: int,
    h_out: int, w_out: int,
) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    # accumulate channels-last: both sides of the += touch contiguous
    # c-length runs, then one transposed copy back to NCHW
    dxp = np.zeros((n, hp, wp, c), dtype=DTYPE)
    d6 = dcols.reshape(n, h_out, w_out, k, k, c)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride, :] += d6[
                :, :, :, i, j, :
            ]
    if padding > 0:
        dxp = dxp[:, padding : padding + h, padding : padding + w, :]
    return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    mask: np.ndarray | None = None,
    counter: MacCounter | None = None,
    layer: str = "conv",
) -> Tensor:
    """2-D convolution (im2col + one matmul) with row-selective weight grads.

    x: (N, C_in, H, W), w: (C_out, C_in, k, k). Output channels with
    ``mask=False`` get an exactly-zero weight gradient and their backward
    MACs are skipped.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D operands, got x{x.data.shape} w{w.data.shape}")
    n, c_in, _, _ = x.data.shape
    c_out, c_in_w, k, k2 = w.data.shape
    if c_in != c_in_w or k != k2:
        raise ShapeError(f"conv2d kernel {w.data.shape} does not match input {x.data.shape}")
    mask = _check_mask(mask, c_out, layer)
    n_active = int(mask.sum())

    cols, h_out, w_out = _im2col(x.data, k, stride, padding)
    wmat = _weight_matrix(w.data)
    if counter is not None:
        counter.add(layer, FORWARD, n * k * k * c_in * c_out * h_out * w_out)
    y = cols @ wmat.T
    y = y.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data.reshape(1, c_out, 1, 1)
    prev = (x, w) if bias is None else (x, w, bias)
    out = Tensor(np.ascontiguousarray(y), _prev=prev)
    out.requires_grad = True
    x_shape = x.data.shape

    def _backward(g):
        if counter is not None:
            counter.add(layer, INPUT_GRAD, n * k * k * c_in * c_out * h_out * w_out)
            counter.add(layer, WEIGHT_GRAD, n * k * k * c_in * n_active * h_out * w_out)
        gflat = g.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
        dcols = gflat @ wmat
        x.accumulate_grad(_col2im(dcols, x_shape, k, stride, padding, h_out, w_out))
        dw = np.zeros_like(wmat)
        if n_active == c_out:
            dw[:] = gflat.T @ cols
        elif n_active > 0:
            idx = np.flatnonzero(mask)
            dw[idx] = gflat[:, idx].T @ cols
        w.accumulate_grad(dw.reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2))
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    out._backward = _backward
    return out


# ---- pooling -----------------------------------------------------------------


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over k x k windows; backward scatters to the argmax."""
    if stride is None:
        stride = k
    n, c, h, w = x.data.shape
    h_out = conv_out_size(h, k, stride, 0)
    w_out = conv_out_size(w, k, stride, 0)
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"maxpool output dims must be positive for input {h}x{w}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, h_out, w_out, k * k)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = Tensor(np.ascontiguousarray(out_data))

    def _backward(g):
        dx = np.zeros_like(x.data)
        ni, ci, hi, wi = np.indices((n, c, h_out, w_out))
        rows = hi * stride + arg // k
        cols_ = wi * stride + arg % k
        np.add.at(dx, (ni, ci, rows, cols_), g)
        x.accumulate_grad(dx)

    return x._record(out, _backward)


# ---- normalization -------------------------------------------------------------


def batch_normalize(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over the channel axis (axis 1 for 4-D, 1 for 2-D).

    Training mode normalizes with batch statistics and updates the running
    buffers in place; eval mode uses the running buffers. gamma/beta are
    always trainable.
    """
    if x.data.ndim == 4:
        axes = (0, 2, 3)
        shape = (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes = (0,)
        shape = (1, -1)
    else:
        raise ShapeError(f"batch_normalize expects 2-D or 4-D input, got {x.data.shape}")
    m = x.data.size // x.data.shape[1]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    ivar = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = (x.data - mean.reshape(shape)) * ivar.reshape(shape)
    y = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    out = Tensor(y, _prev=(x, gamma, beta))
    out.requires_grad = True

    def _backward(g):
        gamma.accumulate_grad((g * xhat).sum(axis=axes))
        beta.accumulate_grad(g.sum(axis=axes))
        dxhat = g * gamma.data.reshape(shape)
        if training:
            # standard batch-stat backward: mean/var depend on x
            t1 = dxhat.sum(axis=axes, keepdims=True)
            t2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (ivar.reshape(shape) / m) * (m * dxhat - t1 - xhat * t2)
        else:
            dx = dxhat * ivar.reshape(shape)
        x.accumulate_grad(dx.astype(DTYPE))

    out._backward = _backward
    return out


# ---- loss ----------------------------------------------------------------------


def cross_entropy_softmax(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over a batch of integer labels."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, C) logits, got {z.shape}")
    n = z.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(n), labels] + 1e-12)
    out = Tensor(nll.mean())

    def _backward(g):
        dz = probs.copy()
        dz[np.arange(n), labels] -= 1.0
        logits.accumulate_grad((g * dz / n).astype(DTYPE))

    return logits._record(out, _backward)

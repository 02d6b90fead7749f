"""Shared numeric oracles for the test suite.

Everything here is deliberately written the slow, obvious way (scalar loops,
float64 accumulation, numeric differencing) and shares no code with the
library paths it checks.
"""

import numpy as np
import pytest


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Scalar triple-loop matrix product, float64 accumulation."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def conv2d_loops(x: np.ndarray, w: np.ndarray, bias=None, stride=1, padding=0) -> np.ndarray:
    """Direct seven-loop convolution, float64 accumulation."""
    n, c_in, h, win = x.shape
    c_out, _, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (win + 2 * padding - k) // stride + 1
    y = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for ni in range(n):
        for co in range(c_out):
            for ho in range(h_out):
                for wo in range(w_out):
                    acc = 0.0
                    for ci in range(c_in):
                        for i in range(k):
                            for j in range(k):
                                acc += float(x[ni, ci, ho * stride + i, wo * stride + j]) * \
                                       float(w[co, ci, i, j])
                    y[ni, co, ho, wo] = acc + (float(bias[co]) if bias is not None else 0.0)
    return y


def finite_diff(f, arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar f w.r.t. every entry of arr."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        f_plus = float(f())
        flat[i] = keep - h
        f_minus = float(f())
        flat[i] = keep
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

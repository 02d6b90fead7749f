"""Tensor core: forward math, masked backward, MAC counting, tape behavior."""

import numpy as np
import pytest

from efqat.tensor import (
    FORWARD,
    INPUT_GRAD,
    WEIGHT_GRAD,
    MacCounter,
    MaskError,
    ShapeError,
    Tensor,
    batch_normalize,
    conv2d,
    cross_entropy_softmax,
    linear,
    linear_backward,
    matmul,
    maxpool2d,
)

from conftest import conv2d_loops, finite_diff, matmul_loops


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2, dtype=np.float32))
        np.testing.assert_array_equal(matmul(eye, a).data, a.data)

    def test_hand_sum(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[3.0], [7.0]])

    def test_against_triple_loop(self, rng):
        a = rng.normal(size=(5, 7)).astype(np.float32)
        b = rng.normal(size=(7, 3)).astype(np.float32)
        got = matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, matmul_loops(a, b), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_mac_count(self):
        c = MacCounter()
        matmul(Tensor(np.zeros((5, 7))), Tensor(np.zeros((7, 3))), counter=c, layer="m")
        assert c.get("m", FORWARD) == 5 * 7 * 3


class TestLinearBackward:
    def test_all_true_matches_dense_oracle(self, rng):
        d_y = rng.normal(size=(6, 8)).astype(np.float32)
        x = rng.normal(size=(6, 4)).astype(np.float32)
        w = rng.normal(size=(8, 4)).astype(np.float32)
        dx, dw = linear_backward(d_y, x, w, mask=np.ones(8, dtype=bool))
        np.testing.assert_allclose(dw, matmul_loops(d_y.T, x), atol=1e-6)
        np.testing.assert_allclose(dx, matmul_loops(d_y, w), atol=1e-6)

    def test_all_false_zero_dw_same_dx(self, rng):
        d_y = rng.normal(size=(6, 8)).astype(np.float32)
        x = rng.normal(size=(6, 4)).astype(np.float32)
        w = rng.normal(size=(8, 4)).astype(np.float32)
        dx_dense, _ = linear_backward(d_y, x, w)
        dx, dw = linear_backward(d_y, x, w, mask=np.zeros(8, dtype=bool))
        assert not dw.any()
        np.testing.assert_array_equal(dx, dx_dense)

    def test_masked_rows_match_dense_rows(self, rng):
        d_y = rng.normal(size=(6, 8)).astype(np.float32)
        x = rng.normal(size=(6, 4)).astype(np.float32)
        w = rng.normal(size=(8, 4)).astype(np.float32)
        mask = np.array([1, 0, 1, 0, 0, 1, 0, 1], dtype=bool)
        _, dw = linear_backward(d_y, x, w, mask=mask)
        dense = matmul_loops(d_y.T, x)
        np.testing.assert_allclose(dw[mask], dense[mask], atol=1e-6)
        assert not dw[~mask].any()

    def test_mac_count_partial_mask(self):
        c = MacCounter()
        mask = np.zeros(8, dtype=bool)
        mask[:2] = True
        linear_backward(
            np.zeros((1, 8), np.float32), np.zeros((1, 4), np.float32),
            np.zeros((8, 4), np.float32), mask=mask, counter=c, layer="fc",
        )
        assert c.get("fc", WEIGHT_GRAD) == 4 * 2
        assert c.get("fc", INPUT_GRAD) == 4 * 8
        assert c.get("fc", WEIGHT_GRAD) + c.get("fc", INPUT_GRAD) == 40

    def test_mask_length_mismatch(self):
        with pytest.raises(MaskError, match="fc"):
            linear_backward(
                np.zeros((1, 8), np.float32), np.zeros((1, 4), np.float32),
                np.zeros((8, 4), np.float32), mask=np.ones(5, dtype=bool), layer="fc",
            )

    def test_dense_equivalence_bit_identical(self, rng):
        d_y = rng.normal(size=(6, 8)).astype(np.float32)
        x = rng.normal(size=(6, 4)).astype(np.float32)
        w = rng.normal(size=(8, 4)).astype(np.float32)
        dx_a, dw_a = linear_backward(d_y, x, w, mask=None)
        dx_b, dw_b = linear_backward(d_y, x, w, mask=np.ones(8, dtype=bool))
        np.testing.assert_array_equal(dx_a, dx_b)
        np.testing.assert_array_equal(dw_a, dw_b)


class TestConv2d:
    def test_1x1_kernel_is_per_pixel_matmul(self, rng):
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        w = rng.normal(size=(5, 3, 1, 1)).astype(np.float32)
        y = conv2d(Tensor(x), Tensor(w)).data
        ref = np.einsum("nchw,oc->nohw", x.astype(np.float64), w[:, :, 0, 0].astype(np.float64))
        np.testing.assert_allclose(y, ref, atol=1e-5)

    def test_zero_weights(self, rng):
        x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
        w = np.zeros((4, 2, 3, 3), np.float32)
        assert not conv2d(Tensor(x), Tensor(w)).data.any()

    def test_against_direct_loops(self, rng):
        x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
        w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        for stride, padding in [(1, 0), (1, 1), (2, 1)]:
            y = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
            ref = conv2d_loops(x, w, b, stride, padding)
            np.testing.assert_allclose(y, ref, atol=1e-5)

    def test_bad_output_dims(self):
        with pytest.raises(ShapeError, match="positive"):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_forward_mac_count(self):
        c = MacCounter()
        conv2d(Tensor(np.zeros((2, 3, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))),
               stride=1, padding=1, counter=c, layer="cv")
        assert c.get("cv", FORWARD) == 2 * 9 * 3 * 4 * 8 * 8


class TestConvBackward:
    def _run_backward(self, x, w, b, mask=None, counter=None):
        xt, wt, bt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), \
            Tensor(b, requires_grad=True)
        y = conv2d(xt, wt, bt, stride=1, padding=0, mask=mask, counter=counter, layer="cv")
        coef = Tensor(np.linspace(-1, 1, y.data.size).reshape(y.data.shape).astype(np.float32))
        (y * coef).sum().backward()
        return xt.grad, wt.grad, bt.grad, coef.data

    def test_all_true_matches_finite_differences(self, rng):
        x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
        w = (0.3 * rng.normal(size=(3, 2, 3, 3))).astype(np.float32)
        b = np.zeros(3, np.float32)
        dx, dw, db, coef = self._run_backward(x, w, b)

        def loss_from_arrays():
            return (conv2d_loops(x, w, b) * coef).sum()

        np.testing.assert_allclose(dw, finite_diff(loss_from_arrays, w, h=1e-3),
                                   rtol=1e-3, atol=1e-3)
        np.testing.assert_allclose(dx, finite_diff(loss_from_arrays, x, h=1e-3),
                                   rtol=1e-3, atol=1e-3)

    def test_all_false_dw_zero(self, rng):
        x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        b = np.zeros(3, np.float32)
        _, dw, _, _ = self._run_backward(x, w, b, mask=np.zeros(3, dtype=bool))
        assert not dw.any()

    def test_backward_mac_counts(self, rng):
        # k=3, C_in=2, C_out=4, H_out=W_out=5, N=1, 2 of 4 rows unfrozen
        x = rng.normal(size=(1, 2, 7, 7)).astype(np.float32)
        w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
        b = np.zeros(4, np.float32)
        c = MacCounter()
        mask = np.array([1, 0, 1, 0], dtype=bool)
        self._run_backward(x, w, b, mask=mask, counter=c)
        assert c.get("cv", WEIGHT_GRAD) == 9 * 2 * 2 * 25 == 900
        assert c.get("cv", INPUT_GRAD) == 9 * 2 * 4 * 25 == 1800
        assert c.backward_total() == 2700

    def test_masked_rows_match_dense(self, rng):
        x = rng.normal(size=(2, 2, 6, 6)).astype(np.float32)
        w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
        b = np.zeros(4, np.float32)
        _, dw_dense, _, _ = self._run_backward(x, w, b)
        mask = np.array([0, 1, 1, 0], dtype=bool)
        _, dw, _, _ = self._run_backward(x, w, b, mask=mask)
        np.testing.assert_allclose(dw[mask], dw_dense[mask], atol=1e-6)
        assert not dw[~mask].any()


class TestBackprop:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), np.float32))

    def test_product_rule(self):
        x = Tensor([2.0, 3.0], requires_grad=True)
        w = Tensor([5.0, -1.0], requires_grad=True)
        (x * w).sum().backward()
        np.testing.assert_array_equal(x.grad, w.data)
        np.testing.assert_array_equal(w.grad, x.data)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            Tensor(np.zeros(3)).backward()

    def test_mlp_grads_match_finite_differences(self, rng):
        w1 = (0.4 * rng.normal(size=(8, 6))).astype(np.float32)
        b1 = (0.1 * rng.normal(size=8)).astype(np.float32)
        w2 = (0.4 * rng.normal(size=(5, 8))).astype(np.float32)
        b2 = (0.1 * rng.normal(size=5)).astype(np.float32)
        w3 = (0.4 * rng.normal(size=(3, 5))).astype(np.float32)
        b3 = (0.1 * rng.normal(size=3)).astype(np.float32)
        x = rng.normal(size=(4, 6)).astype(np.float32)
        coef = np.linspace(-1, 1, 12).reshape(4, 3).astype(np.float32)

        def forward_tensors():
            params = [Tensor(p, requires_grad=True) for p in (w1, b1, w2, b2, w3, b3)]
            h = linear(Tensor(x), params[0], params[1]).relu()
            h = linear(h, params[2], params[3]).relu()
            out = linear(h, params[4], params[5])
            return (out * Tensor(coef)).sum(), params

        loss, params = forward_tensors()
        loss.backward()

        def loss_value():
            h = np.maximum(x @ w1.T + b1, 0)
            h = np.maximum(h @ w2.T + b2, 0)
            return ((h @ w3.T + b3) * coef).sum()

        for p, arr in zip(params, (w1, b1, w2, b2, w3, b3)):
            num = finite_diff(loss_value, arr, h=1e-3)
            np.testing.assert_allclose(p.grad, num, rtol=1e-3, atol=1e-3)

    def test_tape_cleared_after_backward(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        inner = loss._prev
        loss.backward()
        assert loss._prev == () and loss._backward is None
        assert all(t._backward is None for t in inner)

    def test_grad_accumulates_across_reuse(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x + x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])


class TestElementwise:
    def test_relu_forward_backward(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        y = x.relu()
        np.testing.assert_array_equal(y.data, [0.0, 2.0])
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    @pytest.mark.parametrize("classes", [2, 5, 10])
    def test_uniform_logits_cross_entropy_is_log_c(self, classes):
        logits = Tensor(np.zeros((1, classes), np.float32))
        loss = cross_entropy_softmax(logits, np.array([0]))
        assert abs(float(loss.data) - np.log(classes)) < 1e-6

    def test_cross_entropy_gradient(self, rng):
        z = rng.normal(size=(4, 5)).astype(np.float32)
        labels = np.array([0, 2, 4, 1])
        zt = Tensor(z, requires_grad=True)
        cross_entropy_softmax(zt, labels).backward()

        def loss_value():
            zmax = z.max(axis=1, keepdims=True)
            p = np.exp(z - zmax)
            p /= p.sum(axis=1, keepdims=True)
            return -np.log(p[np.arange(4), labels]).mean()

        np.testing.assert_allclose(zt.grad, finite_diff(loss_value, z, h=1e-3),
                                   rtol=1e-3, atol=1e-3)

    def test_normalize_round_trip(self, rng):
        x = rng.normal(2.0, 3.0, size=(16, 4)).astype(np.float32)
        gamma = Tensor(np.ones(4, np.float32), requires_grad=True)
        beta = Tensor(np.zeros(4, np.float32), requires_grad=True)
        rm = np.zeros(4, np.float32)
        rv = np.ones(4, np.float32)
        y = batch_normalize(Tensor(x), gamma, beta, rm, rv, training=True)
        mean = x.mean(axis=0)
        std = np.sqrt(x.var(axis=0) + 1e-5)
        recovered = y.data * std + mean
        np.testing.assert_allclose(recovered, x, atol=1e-5)

    def test_normalize_backward_matches_fd(self, rng):
        x = rng.normal(size=(6, 3)).astype(np.float32)
        g = rng.normal(1.0, 0.2, size=3).astype(np.float32)
        b = rng.normal(0.0, 0.2, size=3).astype(np.float32)
        coef = np.linspace(-1, 1, 18).reshape(6, 3).astype(np.float32)

        def run():
            gt = Tensor(g, requires_grad=True)
            bt = Tensor(b, requires_grad=True)
            xt = Tensor(x, requires_grad=True)
            y = batch_normalize(xt, gt, bt, np.zeros(3, np.float32),
                                np.ones(3, np.float32), training=True)
            return (y * Tensor(coef)).sum(), xt, gt, bt

        loss, xt, gt, bt = run()
        loss.backward()

        def loss_value():
            mean = x.mean(axis=0)
            ivar = 1 / np.sqrt(x.var(axis=0) + 1e-5)
            return (((x - mean) * ivar * g + b) * coef).sum()

        np.testing.assert_allclose(xt.grad, finite_diff(loss_value, x, h=1e-3),
                                   rtol=1e-3, atol=2e-3)
        np.testing.assert_allclose(gt.grad, finite_diff(loss_value, g, h=1e-3),
                                   rtol=1e-3, atol=1e-3)
        np.testing.assert_allclose(bt.grad, finite_diff(loss_value, b, h=1e-3),
                                   rtol=1e-3, atol=1e-3)

    def test_maxpool_forward_backward(self):
        x = np.array([[[[1, 2, 5, 3], [4, 0, 1, 2], [7, 1, 0, 0], [2, 3, 1, 6]]]],
                     dtype=np.float32)
        xt = Tensor(x, requires_grad=True)
        y = maxpool2d(xt, 2, 2)
        np.testing.assert_array_equal(y.data[0, 0], [[4, 5], [7, 6]])
        y.sum().backward()
        expected = np.zeros_like(x)
        expected[0, 0, 1, 0] = 1  # 4
        expected[0, 0, 0, 2] = 1  # 5
        expected[0, 0, 2, 0] = 1  # 7
        expected[0, 0, 3, 3] = 1  # 6
        np.testing.assert_array_equal(xt.grad, expected)


class TestDeterminism:
    def _run(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(4, 2, 6, 6)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32), requires_grad=True)
        y = conv2d(x, w, stride=1, padding=1)
        y = maxpool2d(y.relu(), 2, 2)
        loss = cross_entropy_softmax(y.flatten_batch(), np.array([0, 1, 2, 0]))
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    def test_identical_seeds_bit_identical(self):
        a = self._run(7)
        b = self._run(7)
        for ai, bi in zip(a, b):
            np.testing.assert_array_equal(ai, bi)

"""Cost model: closed forms, bounds, network reports, counter reconciliation."""

import numpy as np
import pytest

from efqat.costmodel import (
    LayerOps,
    OpsReport,
    ReconcileError,
    network_report,
    ops_conv_bwd,
    ops_linear_bwd,
    reconcile,
)
from efqat.freezing import build_plan, channel_budget, plan_lwpn
from efqat.model import AffineGeometry
from efqat.tensor import INPUT_GRAD, MacCounter, Tensor, conv2d, linear

RATIOS = (0.0, 0.05, 0.1, 0.25, 0.5, 1.0)


class TestClosedForms:
    def test_linear_quarter(self):
        weight, inp = ops_linear_bwd(4, 8, 1, 0.25)
        assert (weight, inp) == (8, 32)
        assert weight + inp == 40 <= 1.25 * 32

    def test_linear_extremes(self):
        assert ops_linear_bwd(4, 8, 3, 0.0) == (0, 3 * 32)
        w, i = ops_linear_bwd(4, 8, 3, 1.0)
        assert w + i == 2 * 4 * 8 * 3

    def test_conv_half(self):
        assert ops_conv_bwd(2, 4, 3, 5, 5, 1, 0.5) == (900, 1800)

    def test_conv_zero_ratio(self):
        assert ops_conv_bwd(2, 4, 3, 5, 5, 2, 0.0)[0] == 0

    @pytest.mark.parametrize("r", RATIOS)
    def test_upper_bounds(self, r):
        w, i = ops_linear_bwd(17, 13, 5, r)
        assert w + i <= (1 + r) * 17 * 13 * 5
        w, i = ops_conv_bwd(3, 7, 5, 9, 11, 2, r)
        assert w + i <= (1 + r) * 2 * 25 * 3 * 7 * 9 * 11

    def test_monotone_in_ratio(self):
        totals = [sum(ops_linear_bwd(31, 17, 4, r)) for r in RATIOS]
        assert totals == sorted(totals)
        totals = [sum(ops_conv_bwd(4, 10, 3, 6, 6, 2, r)) for r in RATIOS]
        assert totals == sorted(totals)


def _geometry():
    return [
        AffineGeometry(name="0.conv", kind="conv", c_in=2, c_out=4, quantize=True,
                       kernel=3, h_out=5, w_out=5),
        AffineGeometry(name="1.linear", kind="linear", c_in=100, c_out=8, quantize=True),
    ]


def _weights_for(geometry, rng):
    return {g.name: rng.normal(size=g.weight_shape).astype(np.float32) for g in geometry}


class TestNetworkReport:
    def test_all_true_speedup_one(self, rng):
        geom = _geometry()
        plan = build_plan("cwpl", _weights_for(geom, rng), 1.0)
        assert network_report(geom, plan, batch=2).speedup == 1.0

    def test_all_false_speedup_exactly_two(self, rng):
        geom = _geometry()
        plan = build_plan("cwpl", _weights_for(geom, rng), 0.0)
        assert network_report(geom, plan, batch=2).speedup == 2.0

    def test_lwpn_half_equal_layers_four_thirds(self, rng):
        geom = [
            AffineGeometry(name="a", kind="linear", c_in=8, c_out=8, quantize=True),
            AffineGeometry(name="b", kind="linear", c_in=8, c_out=8, quantize=True),
        ]
        weights = {
            "a": np.full((8, 8), 2.0, np.float32),
            "b": np.full((8, 8), 1.0, np.float32),
        }
        plan = plan_lwpn(weights, 0.5)
        report = network_report(geom, plan, batch=4)
        assert report.speedup == pytest.approx(4.0 / 3.0)

    def test_speedup_range(self, rng):
        geom = _geometry()
        for r in RATIOS:
            plan = build_plan("cwpn", _weights_for(geom, rng), r)
            s = network_report(geom, plan, batch=3).speedup
            assert 1.0 <= s <= 2.0
            all_skipped = all(not plan.masks[g.name].any() for g in geom)
            assert (s == 2.0) == all_skipped

    def test_mask_length_mismatch(self, rng):
        geom = _geometry()
        plan = build_plan("cwpl", {"0.conv": rng.normal(size=(3, 2, 3, 3)).astype(np.float32),
                                   "1.linear": rng.normal(size=(8, 100)).astype(np.float32)},
                          0.5)
        with pytest.raises(ValueError, match="0.conv"):
            network_report(geom, plan, batch=1)

    def test_unplanned_layer_counts_dense(self):
        geom = [AffineGeometry(name="x", kind="linear", c_in=4, c_out=6, quantize=False)]
        report = network_report(geom, None, batch=2)
        layer = report.layers[0]
        assert layer.weight_grad_macs == layer.input_grad_macs == 2 * 4 * 6


class TestReconcile:
    def _drive_linear(self, mask, counter, m=3, c_in=4, c_out=8):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(m, c_in)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(c_out, c_in)).astype(np.float32), requires_grad=True)
        y = linear(x, w, mask=mask, counter=counter, layer="fc")
        y.sum().backward()

    def test_dense_run_zero_diffs(self):
        counter = MacCounter()
        self._drive_linear(None, counter)
        geom = [AffineGeometry(name="fc", kind="linear", c_in=4, c_out=8, quantize=True)]
        report = network_report(geom, None, batch=3)
        assert reconcile(report, counter) == []
        assert report.layers[0].measured_total == report.layers[0].theoretical_total

    def test_masked_run_zero_diffs(self):
        counter = MacCounter()
        mask = np.zeros(8, dtype=bool)
        mask[[1, 5]] = True
        self._drive_linear(mask, counter)
        geom = [AffineGeometry(name="fc", kind="linear", c_in=4, c_out=8, quantize=True)]
        plan = build_plan("cwpl", {"fc": np.eye(8, 4, dtype=np.float32)}, 0.25)
        # same popcount (2 of 8): report equals measurement even though the
        # specific channels differ
        report = network_report(geom, plan, batch=3)
        assert reconcile(report, counter) == []

    def test_corrupt_counter_surfaces(self):
        counter = MacCounter()
        self._drive_linear(None, counter)
        counter.add("fc", INPUT_GRAD, 1)  # deliberate corruption
        geom = [AffineGeometry(name="fc", kind="linear", c_in=4, c_out=8, quantize=True)]
        report = network_report(geom, None, batch=3)
        with pytest.raises(ReconcileError, match="fc"):
            reconcile(report, counter)

    @pytest.mark.parametrize("r", RATIOS)
    @pytest.mark.parametrize("c_out", [1, 7, 8])
    def test_live_counters_equal_closed_form_linear(self, r, c_out):
        c_in, m = 5, 4
        counter = MacCounter()
        mask = np.zeros(c_out, dtype=bool)
        mask[: channel_budget(r, c_out)] = True
        self._drive_linear(mask, counter, m=m, c_in=c_in, c_out=c_out)
        weight, inp = ops_linear_bwd(c_in, c_out, m, r)
        assert counter.get("fc", "weight_grad") == weight
        assert counter.get("fc", "input_grad") == inp

    @pytest.mark.parametrize("r", RATIOS)
    def test_live_counters_equal_closed_form_conv(self, r):
        n, c_in, c_out, k = 2, 3, 6, 3
        rng = np.random.default_rng(0)
        counter = MacCounter()
        mask = np.zeros(c_out, dtype=bool)
        mask[: channel_budget(r, c_out)] = True
        x = Tensor(rng.normal(size=(n, c_in, 7, 7)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(c_out, c_in, k, k)).astype(np.float32), requires_grad=True)
        y = conv2d(x, w, stride=1, padding=1, mask=mask, counter=counter, layer="cv")
        y.sum().backward()
        weight, inp = ops_conv_bwd(c_in, c_out, k, 7, 7, n, r)
        assert counter.get("cv", "weight_grad") == weight
        assert counter.get("cv", "input_grad") == inp

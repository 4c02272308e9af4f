"""Layer-level semantics and finite-difference gradient checks (float64)."""

import numpy as np
import pytest

from eegtta import layers as L
from helpers import numeric_grad, max_rel_err

F64 = np.float64


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(F64)


def _check_layer_grads(layer, x, rng, tol=1e-4, params=None, phase=L.PHASE_EVAL):
    """FD-check dx and every parameter gradient against a linear probe."""
    y, cache = layer.forward(x, phase=phase)
    w = rng.standard_normal(y.shape)

    def run():
        out, _ = layer.forward(x, phase=phase)
        return float(np.sum(w * out))

    dx, grads = layer.backward(w, cache, need_dx=True, need_param_grads=True)
    assert max_rel_err(dx, numeric_grad(run, x)) < tol
    for name, arr in (params or layer.params()).items():
        assert max_rel_err(grads[name], numeric_grad(run, arr)) < tol


class TestConv2D:
    def test_same_padding_keeps_width(self):
        conv = L.Conv2D(1, 4, (1, 8), padding="same", dtype=F64,
                        rng=np.random.default_rng(0))
        y, _ = conv.forward(np.zeros((2, 1, 5, 32), dtype=F64))
        assert y.shape == (2, 4, 5, 32)

    def test_channel_mismatch_rejected(self):
        conv = L.Conv2D(3, 4, (1, 3))
        with pytest.raises(ValueError):
            conv.forward(np.zeros((1, 2, 4, 8), dtype=np.float32))

    def test_gradients(self):
        rng = np.random.default_rng(1)
        conv = L.Conv2D(3, 4, (2, 5), padding="same", bias=True, dtype=F64,
                        rng=rng)
        _check_layer_grads(conv, _rand(rng, 2, 3, 4, 12), rng)

    def test_grouped_gradients(self):
        rng = np.random.default_rng(2)
        conv = L.Conv2D(4, 8, (1, 3), padding="valid", groups=2, dtype=F64,
                        rng=rng)
        _check_layer_grads(conv, _rand(rng, 2, 4, 3, 9), rng)


class TestDepthwiseConv2D:
    def test_shape_collapses_height(self):
        rng = np.random.default_rng(3)
        dw = L.DepthwiseConv2D(8, 2, (30, 1), dtype=F64, rng=rng)
        y, _ = dw.forward(_rand(rng, 2, 8, 30, 16))
        assert y.shape == (2, 16, 1, 16)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        dw = L.DepthwiseConv2D(3, 2, (5, 1), dtype=F64, rng=rng)
        _check_layer_grads(dw, _rand(rng, 2, 3, 5, 7), rng)


class TestSeparableConv2D:
    def test_gradients(self):
        rng = np.random.default_rng(5)
        sep = L.SeparableConv2D(4, 6, (1, 5), dtype=F64, rng=rng)
        _check_layer_grads(sep, _rand(rng, 2, 4, 1, 11), rng)


class TestBatchNorm:
    def test_identity_normalization(self):
        bn = L.BatchNorm(3, eps=0.0, mode=L.BN_FIXED_SOURCE, dtype=F64)
        x = np.random.default_rng(6).standard_normal((2, 3, 4, 5))
        y = L.bn_apply(x, bn)
        np.testing.assert_array_equal(y, x)

    def test_fixed_source_closed_form(self):
        bn = L.BatchNorm(1, eps=0.0, mode=L.BN_FIXED_SOURCE, dtype=F64)
        bn.running_mean[:] = 2.0
        bn.running_var[:] = 4.0
        bn.gamma[:] = 3.0
        bn.beta[:] = 1.0
        y = L.bn_apply(np.full((1, 1, 1, 1), 4.0), bn)
        assert y.item() == pytest.approx(4.0)

    def test_track_running_momentum(self):
        bn = L.BatchNorm(1, momentum=0.9, mode=L.BN_TRACK_RUNNING, dtype=F64)
        bn.running_mean[:] = 0.0
        x = np.ones((4, 1, 2, 2), dtype=F64)  # batch mean 1, batch var 0
        L.bn_apply(x, bn, training=True)
        assert bn.running_mean[0] == pytest.approx(0.1)

    def test_track_running_eval_does_not_mutate(self):
        bn = L.BatchNorm(2, mode=L.BN_TRACK_RUNNING, dtype=F64)
        before = bn.running_mean.copy()
        L.bn_apply(np.random.default_rng(7).standard_normal((3, 2, 2, 2)), bn,
                   training=False)
        np.testing.assert_array_equal(bn.running_mean, before)

    def test_fixed_source_stats_bit_frozen(self):
        bn = L.BatchNorm(2, mode=L.BN_FIXED_SOURCE)
        bn.running_mean[:] = [0.5, -0.25]
        bn.running_var[:] = [1.5, 0.75]
        mean_bytes = bn.running_mean.tobytes()
        var_bytes = bn.running_var.tobytes()
        rng = np.random.default_rng(8)
        for _ in range(50):
            L.bn_apply(rng.standard_normal((2, 2, 3, 3)).astype(np.float32),
                       bn, training=True)
        assert bn.running_mean.tobytes() == mean_bytes
        assert bn.running_var.tobytes() == var_bytes

    def test_batch_only_single_sample_variance(self):
        # with batch size 1 the statistics reduce to per-channel H*W moments
        bn = L.BatchNorm(2, eps=0.0, mode=L.BN_BATCH_ONLY, dtype=F64)
        x = np.random.default_rng(9).standard_normal((1, 2, 3, 4))
        y = L.bn_apply(x, bn)
        expect = (x - x.mean(axis=(2, 3), keepdims=True)) / x.std(
            axis=(2, 3), keepdims=True)
        np.testing.assert_allclose(y, expect, atol=1e-12)

    @pytest.mark.parametrize("mode", [L.BN_FIXED_SOURCE, L.BN_BATCH_ONLY])
    def test_gradients(self, mode):
        rng = np.random.default_rng(10)
        bn = L.BatchNorm(3, mode=mode, dtype=F64)
        bn.running_mean = rng.standard_normal(3)
        bn.running_var = rng.random(3) + 0.5
        bn.gamma = rng.standard_normal(3)
        bn.beta = rng.standard_normal(3)
        _check_layer_grads(bn, _rand(rng, 4, 3, 2, 5), rng)

    def test_track_running_affine_gradients(self):
        # stats are buffers: gamma/beta grads must still match FD exactly
        # when each evaluation starts from the same running estimates
        rng = np.random.default_rng(11)
        bn = L.BatchNorm(3, mode=L.BN_TRACK_RUNNING, dtype=F64)
        bn.gamma = rng.standard_normal(3)
        bn.beta = rng.standard_normal(3)
        x = _rand(rng, 4, 3, 2, 5)
        mean0 = bn.running_mean.copy()
        var0 = bn.running_var.copy()
        y, cache = bn.forward(x, phase=L.PHASE_ADAPT)
        w = rng.standard_normal(y.shape)
        _, grads = bn.backward(w, cache)

        def run():
            bn.running_mean = mean0.copy()
            bn.running_var = var0.copy()
            out, _ = bn.forward(x, phase=L.PHASE_ADAPT)
            return float(np.sum(w * out))

        for name in ("gamma", "beta"):
            num = numeric_grad(run, getattr(bn, name))
            assert max_rel_err(grads[name], num) < 1e-4

    def test_pretrain_phase_tracks_and_couples(self):
        rng = np.random.default_rng(12)
        bn = L.BatchNorm(2, momentum=0.9, dtype=F64)
        x = _rand(rng, 3, 2, 2, 2)
        y, cache = bn.forward(x, phase=L.PHASE_PRETRAIN)
        np.testing.assert_allclose(
            bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
        assert cache[3] is True  # coupled backward


class TestSimpleLayers:
    def test_elu_gradients(self):
        rng = np.random.default_rng(13)
        _check_layer_grads(L.ELU(alpha=1.0), _rand(rng, 2, 3, 2, 6) + 0.05,
                           rng)

    def test_avg_pool_gradients(self):
        rng = np.random.default_rng(14)
        _check_layer_grads(L.AvgPool2D((1, 4)), _rand(rng, 2, 3, 2, 8), rng)

    def test_avg_pool_rejects_ragged(self):
        with pytest.raises(ValueError):
            L.AvgPool2D((1, 3)).forward(np.zeros((1, 1, 1, 8)))

    def test_dropout_identity_outside_pretrain(self):
        x = np.random.default_rng(15).standard_normal((2, 3, 1, 4))
        for phase in (L.PHASE_ADAPT, L.PHASE_EVAL):
            y, _ = L.Dropout(0.5).forward(x, phase=phase)
            np.testing.assert_array_equal(y, x)

    def test_dropout_pretrain_scales_kept_units(self):
        rng = np.random.default_rng(16)
        x = np.ones((1, 1, 1, 1000), dtype=F64)
        drop = L.Dropout(0.25)
        y, mask = drop.forward(x, phase=L.PHASE_PRETRAIN, rng=rng)
        kept = y[y != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        dx, _ = drop.backward(np.ones_like(y), mask)
        np.testing.assert_array_equal(dx, mask)

    def test_linear_gradients(self):
        rng = np.random.default_rng(17)
        lin = L.Linear(6, 3, rng=rng, dtype=F64)
        y, cache = lin.forward(_rand(rng, 4, 6))
        assert y.shape == (4, 3)
        x = _rand(rng, 4, 6)
        w = rng.standard_normal((4, 3))

        def run():
            out, _ = lin.forward(x)
            return float(np.sum(w * out))

        _, cache = lin.forward(x)
        dx, grads = lin.backward(w, cache)
        assert max_rel_err(dx, numeric_grad(run, x)) < 1e-4
        assert max_rel_err(grads["weight"], numeric_grad(run, lin.weight)) < 1e-4
        assert max_rel_err(grads["bias"], numeric_grad(run, lin.bias)) < 1e-4

    def test_flatten_round_trip(self):
        x = np.arange(24.0).reshape(1, 2, 3, 4)
        y, cache = L.Flatten().forward(x)
        assert y.shape == (1, 24)
        dx, _ = L.Flatten().backward(y, cache)
        np.testing.assert_array_equal(dx, x)

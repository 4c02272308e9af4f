"""Network assembly, scoped backward, and checkpoint round trips."""

import numpy as np
import pytest

from eegtta import layers as L
from eegtta.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from eegtta.network import SCOPE_ALL, SCOPE_BN_AFFINE, Network, build_eegnet
from helpers import max_rel_err, numeric_grad


def tiny_net(dtype=np.float64, seed=0, bn_mode=L.BN_FIXED_SOURCE):
    """Two conv blocks with BN plus a linear head, on an 8x12 input."""
    rng = np.random.default_rng(seed)
    stack = [
        L.Conv2D(1, 3, (1, 5), padding="same", rng=rng, dtype=dtype),
        L.BatchNorm(3, mode=bn_mode, dtype=dtype),
        L.ELU(),
        L.Conv2D(3, 4, (8, 1), padding="valid", rng=rng, dtype=dtype),
        L.BatchNorm(4, mode=bn_mode, dtype=dtype),
        L.ELU(),
        L.AvgPool2D((1, 4)),
        L.Flatten(),
        L.Linear(4 * 3, 2, rng=rng, dtype=dtype),
    ]
    net = Network(stack, (1, 8, 12), 2, dtype=dtype)
    for _, bn in net.bn_layers():
        bn.running_mean = rng.standard_normal(bn.channels).astype(dtype)
        bn.running_var = (rng.random(bn.channels) + 0.5).astype(dtype)
        bn.gamma = rng.standard_normal(bn.channels).astype(dtype)
        bn.beta = rng.standard_normal(bn.channels).astype(dtype)
    return net


class TestForward:
    def test_reference_feature_length(self):
        net = build_eegnet(channels=30, samples=384, seed=1)
        assert net.feature_dim == 192
        x = np.random.default_rng(2).standard_normal((1, 1, 30, 384))
        res = net.forward(x.astype(np.float32))
        assert res.features.shape == (1, 192)
        assert res.logits.shape == (1, 2)

    def test_zero_head_gives_uniform_softmax(self):
        net = build_eegnet(channels=6, samples=64, seed=3)
        head = net.layers[-1]
        head.weight[:] = 0.0
        head.bias[:] = 0.0
        x = np.random.default_rng(4).standard_normal((2, 1, 6, 64))
        res = net.forward(x.astype(np.float32))
        np.testing.assert_array_equal(res.logits, 0.0)

    def test_eval_forward_bit_deterministic(self):
        net = build_eegnet(channels=6, samples=64, seed=5)
        x = np.random.default_rng(6).standard_normal((3, 1, 6, 64)).astype(
            np.float32)
        a = net.forward(x).logits
        b = net.forward(x).logits
        assert a.tobytes() == b.tobytes()

    def test_input_shape_rejected(self):
        net = build_eegnet(channels=6, samples=64, seed=7)
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 1, 5, 64), dtype=np.float32))

    def test_stem_resume_matches_full_forward(self):
        net = build_eegnet(channels=6, samples=64, seed=8)
        x = np.random.default_rng(9).standard_normal((2, 1, 6, 64)).astype(
            np.float32)
        full = net.forward(x)
        stem, _ = net.layers[0].forward(x)
        resumed = net.forward(stem, start_layer=1)
        assert full.logits.tobytes() == resumed.logits.tobytes()


class TestBackward:
    def test_zero_logit_gradient_gives_zero_grads(self):
        net = tiny_net()
        x = np.random.default_rng(10).standard_normal((2, 1, 8, 12))
        res = net.forward(x)
        grads = net.backward(res.caches, np.zeros_like(res.logits), SCOPE_ALL)
        for key in grads.keys():
            np.testing.assert_array_equal(grads[key], 0.0)

    def test_bn_affine_scope_covers_exactly_gamma_beta(self):
        net = tiny_net()
        x = np.random.default_rng(11).standard_normal((2, 1, 8, 12))
        res = net.forward(x)
        grads = net.backward(res.caches, np.ones_like(res.logits),
                             SCOPE_BN_AFFINE)
        expected = {(i, n) for i, l in net.bn_layers() for n in ("gamma",
                                                                 "beta")}
        assert set(grads.keys()) == expected

    @pytest.mark.parametrize("bn_mode", [L.BN_FIXED_SOURCE, L.BN_BATCH_ONLY])
    def test_all_params_match_finite_differences(self, bn_mode):
        net = tiny_net(seed=12, bn_mode=bn_mode)
        rng = np.random.default_rng(13)
        x = rng.standard_normal((3, 1, 8, 12))
        w = rng.standard_normal((3, 2))

        def run():
            return float(np.sum(w * net.forward(x).logits))

        res = net.forward(x)
        grads = net.backward(res.caches, w, SCOPE_ALL)
        worst = 0.0
        for key, arr in net.param_items(SCOPE_ALL):
            worst = max(worst, max_rel_err(grads[key], numeric_grad(run, arr)))
        assert worst < 1e-4

    def test_stem_resumed_cache_backward_matches_full(self):
        net = tiny_net(seed=14)
        rng = np.random.default_rng(15)
        x = rng.standard_normal((2, 1, 8, 12))
        w = rng.standard_normal((2, 2))
        full = net.forward(x)
        g_full = net.backward(full.caches, w, SCOPE_BN_AFFINE)
        stem, _ = net.layers[0].forward(x)
        part = net.forward(stem, start_layer=1)
        g_part = net.backward(part.caches, w, SCOPE_BN_AFFINE)
        for key in g_full.keys():
            np.testing.assert_allclose(g_part[key], g_full[key], rtol=1e-12)

    def test_stem_cache_rejected_for_full_scope(self):
        net = tiny_net(seed=16)
        x = np.random.default_rng(17).standard_normal((2, 1, 8, 12))
        stem, _ = net.layers[0].forward(x)
        res = net.forward(stem, start_layer=1)
        with pytest.raises(ValueError):
            net.backward(res.caches, np.ones((2, 2)), SCOPE_ALL)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        net = build_eegnet(channels=6, samples=64, seed=18)
        rng = np.random.default_rng(19)
        for _, bn in net.bn_layers():
            bn.running_mean = rng.standard_normal(bn.channels).astype(
                np.float32)
            bn.running_var = rng.random(bn.channels).astype(np.float32) + 0.5
        path = tmp_path / "net.sawt"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        assert loaded.param_hash() == net.param_hash()
        path2 = tmp_path / "net2.sawt"
        save_checkpoint(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_loaded_net_forwards_identically(self, tmp_path):
        net = build_eegnet(channels=6, samples=64, seed=20)
        path = tmp_path / "net.sawt"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        x = np.random.default_rng(21).standard_normal((2, 1, 6, 64)).astype(
            np.float32)
        assert (net.forward(x).logits.tobytes()
                == loaded.forward(x).logits.tobytes())

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sawt"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        net = build_eegnet(channels=6, samples=64, seed=22)
        path = tmp_path / "net.sawt"
        save_checkpoint(net, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

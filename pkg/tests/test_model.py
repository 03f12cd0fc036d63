"""Model assembly tests: architecture census, shape preservation, sampling
behavior per variant, and bit-exact checkpoint round-trips."""

import numpy as np
import pytest

from bayesvox import tensor as T
from bayesvox.model import MeshNet, MeshNetConfig, load_checkpoint, save_checkpoint
from bayesvox.tensor import Tensor


def desk(method="map", **kw):
    return MeshNetConfig.desk_scale(method=method, **kw)


def subvol(side, seed=0):
    return np.random.default_rng(seed).normal(size=(1, side, side, side))


class TestConfig:
    def test_default_layer_count(self):
        assert MeshNetConfig().num_layers == 8

    def test_layer_specs_geometry(self):
        specs = MeshNetConfig().layer_specs()
        assert len(specs) == 8
        assert [s.dilation for s in specs] == [1, 1, 1, 2, 4, 8, 1, 1]
        assert [s.padding for s in specs] == [1, 1, 1, 2, 4, 8, 1, 0]
        assert all(s.kernel_bounds == (1, 1, 1) for s in specs[:7])
        assert specs[7].kernel_bounds == (0, 0, 0)
        assert specs[0].in_channels == 1
        assert specs[7].out_channels == 50

    def test_validation(self):
        with pytest.raises(ValueError):
            MeshNetConfig(method="vi")
        with pytest.raises(ValueError):
            MeshNetConfig(paddings=(1, 1, 1))
        with pytest.raises(ValueError):
            MeshNetConfig(num_classes=1)
        with pytest.raises(ValueError):
            MeshNetConfig(bd_keep_prob=0.0)

    def test_desk_scale_defaults(self):
        cfg = desk()
        assert (cfg.num_classes, cfg.filters, cfg.subvolume_size) == (8, 16, 16)


class TestCensus:
    def test_default_point_census(self):
        # 96*27+96 for layer 1, six hidden 96x96x3^3 layers, 50x96 classifier
        model = MeshNet.build(MeshNetConfig(), np.random.default_rng(0))
        census = model.parameter_census()
        assert census["point_total"] == 1_501_106
        assert census["weights"] == 1_500_384
        assert census["biases"] == 722

    def test_default_ssd_census(self):
        model = MeshNet.build(MeshNetConfig(method="ssd"), np.random.default_rng(0))
        census = model.parameter_census()
        assert census["point_total"] == 1_501_106
        assert census["sigmas"] == census["weights"]
        # one gate per filter in every layer, classifier included
        assert census["dropout_logits"] == 96 * 7 + 50
        assert census["trainable_total"] == 2 * 1_500_384 + 722 + 722

    def test_receptive_field_default(self):
        model = MeshNet.build(MeshNetConfig(), np.random.default_rng(0))
        assert model.receptive_field() == (37, 37, 37)

    def test_receptive_field_desk(self):
        model = MeshNet.build(desk(), np.random.default_rng(0))
        assert model.receptive_field() == (37, 37, 37)


class TestForward:
    @pytest.mark.parametrize("side", [16, 32])
    def test_shape_preserved(self, side):
        cfg = desk(subvolume_size=side)
        model = MeshNet.build(cfg, np.random.default_rng(1))
        out = model.forward(subvol(side), mode="deterministic")
        assert out.data.shape == (8, side, side, side)

    def test_wrong_input_shape(self):
        model = MeshNet.build(desk(), np.random.default_rng(1))
        with pytest.raises(T.ShapeMismatchError):
            model.forward(np.zeros((1, 8, 8, 8)))

    def test_bad_mode(self):
        model = MeshNet.build(desk(), np.random.default_rng(1))
        with pytest.raises(ValueError):
            model.forward(subvol(16), mode="test")

    def test_map_forward_deterministic_twice(self):
        model = MeshNet.build(desk(), np.random.default_rng(2))
        x = subvol(16, seed=3)
        a = model.forward(x, mode="sample")  # map ignores sampling
        b = model.forward(x, mode="sample")
        np.testing.assert_array_equal(a.data, b.data)

    def test_ssd_seeded_replay(self):
        model = MeshNet.build(desk(method="ssd"), np.random.default_rng(4), dtype=np.float64)
        x = subvol(16, seed=5)
        a = model.forward(x, np.random.default_rng(99), mode="sample")
        b = model.forward(x, np.random.default_rng(99), mode="sample")
        np.testing.assert_array_equal(a.data, b.data)

    def test_ssd_sample_needs_rng(self):
        model = MeshNet.build(desk(method="ssd"), np.random.default_rng(4))
        with pytest.raises(ValueError):
            model.forward(subvol(16), mode="sample")

    def test_bd_sampling_varies_and_deterministic_mode_does_not(self):
        model = MeshNet.build(desk(method="bd", bd_keep_prob=0.5), np.random.default_rng(6))
        x = subvol(16, seed=7)
        a = model.forward(x, np.random.default_rng(1), mode="sample")
        b = model.forward(x, np.random.default_rng(2), mode="sample")
        assert not np.array_equal(a.data, b.data)
        c = model.forward(x, mode="deterministic")
        d = model.forward(x, mode="deterministic")
        np.testing.assert_array_equal(c.data, d.data)

    def test_ssd_open_gate_zero_sigma_matches_point_forward(self):
        cfg = desk(method="ssd")
        ssd = MeshNet.build(cfg, np.random.default_rng(8), dtype=np.float64)
        for layer in ssd.layers:
            layer.params.sigma_raw.data[:] = -40.0
            layer.params.dropout_logit.data[:] = 500.0
        x = subvol(16, seed=9)
        sampled = ssd.forward(x, np.random.default_rng(10), mode="sample")
        point = ssd.forward(x, mode="deterministic")
        np.testing.assert_allclose(sampled.data, point.data, atol=1e-5)

    def test_gradient_flows_to_all_parameters(self):
        cfg = desk(method="ssd", subvolume_size=8, filters=4, num_classes=3)
        model = MeshNet.build(cfg, np.random.default_rng(11), dtype=np.float64)
        x = subvol(8, seed=12)
        logits = model.forward(x, np.random.default_rng(13), mode="sample")
        flat = T.reshape(logits, (3, -1))
        labels = np.random.default_rng(14).integers(0, 3, size=flat.data.shape[1])
        T.backward(T.softmax_cross_entropy(flat, labels))
        missing = [name for name, t in model.parameters() if t.grad is None]
        assert missing == []


class TestPredictMC:
    def test_probabilities_form_simplex(self):
        model = MeshNet.build(desk(method="ssd"), np.random.default_rng(15))
        probs = model.predict_mc(subvol(16, seed=16), n_mc=3, rng=np.random.default_rng(17))
        sums = probs.data.sum(axis=0)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        assert probs.data.min() >= 0.0

    def test_n_mc_one_is_single_pass(self):
        model = MeshNet.build(desk(method="bd"), np.random.default_rng(18), dtype=np.float64)
        x = subvol(16, seed=19)
        probs = model.predict_mc(x, n_mc=1, rng=np.random.default_rng(20))
        logits = model.forward(x, np.random.default_rng(20), mode="sample")
        ref = T.softmax(logits.data.astype(np.float64), axis=0)
        np.testing.assert_allclose(probs.data, ref, rtol=1e-12)

    def test_invalid_n_mc(self):
        model = MeshNet.build(desk(), np.random.default_rng(21))
        with pytest.raises(ValueError):
            model.predict_mc(subvol(16), n_mc=0)

    def test_map_needs_no_rng(self):
        model = MeshNet.build(desk(), np.random.default_rng(22))
        probs = model.predict_mc(subvol(16), n_mc=2)
        np.testing.assert_allclose(probs.data.sum(axis=0), 1.0, atol=1e-6)


class TestLayerKLs:
    def test_only_for_ssd(self):
        model = MeshNet.build(desk(), np.random.default_rng(23))
        with pytest.raises(ValueError):
            model.layer_kls()

    def test_one_term_per_layer_all_differentiable(self):
        model = MeshNet.build(desk(method="ssd"), np.random.default_rng(24), dtype=np.float64)
        kls = model.layer_kls()
        assert len(kls) == 8
        total = kls[0]
        for kl in kls[1:]:
            total = total + kl
        T.backward(total)
        assert all(layer.params.mu.grad is not None for layer in model.layers)


class TestCheckpoint:
    def _roundtrip(self, model, tmp_path, seed=1234):
        path = tmp_path / "model.bvxl"
        save_checkpoint(model, path, seed=seed)
        restored, restored_seed = load_checkpoint(path)
        return restored, restored_seed, path

    def test_map_roundtrip_bit_exact(self, tmp_path):
        model = MeshNet.build(desk(), np.random.default_rng(25))
        restored, seed, _ = self._roundtrip(model, tmp_path)
        assert seed == 1234
        assert restored.cfg == model.cfg
        for (na, ta), (nb, tb) in zip(model.parameters(), restored.parameters()):
            assert na == nb
            assert ta.data.dtype == tb.data.dtype
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_ssd_roundtrip_forward_identical(self, tmp_path):
        model = MeshNet.build(desk(method="ssd"), np.random.default_rng(26), dtype=np.float64)
        restored, _, _ = self._roundtrip(model, tmp_path)
        x = subvol(16, seed=27)
        a = model.forward(x, np.random.default_rng(5), mode="sample")
        b = restored.forward(x, np.random.default_rng(5), mode="sample")
        np.testing.assert_array_equal(a.data, b.data)

    def test_restored_parameters_trainable(self, tmp_path):
        model = MeshNet.build(desk(method="ssd", filters=4, subvolume_size=8, num_classes=3),
                              np.random.default_rng(31), dtype=np.float64)
        restored, _, _ = self._roundtrip(model, tmp_path)
        assert all(t.requires_grad for _, t in restored.parameters())

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bvxl"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError) as exc:
            load_checkpoint(path)
        assert "magic" in str(exc.value)

    def test_bad_version_rejected(self, tmp_path):
        model = MeshNet.build(desk(filters=2, num_classes=2, subvolume_size=8),
                              np.random.default_rng(28))
        path = tmp_path / "model.bvxl"
        save_checkpoint(model, path, seed=0)
        raw = bytearray(path.read_bytes())
        raw[4] = 99  # version field
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError) as exc:
            load_checkpoint(path)
        assert "version" in str(exc.value)

    def test_config_survives_nondefault_values(self, tmp_path):
        cfg = MeshNetConfig.desk_scale(
            method="bd", bd_keep_prob=0.75, temperature=0.5, filters=4, num_classes=3
        )
        model = MeshNet.build(cfg, np.random.default_rng(29))
        restored, _, _ = self._roundtrip(model, tmp_path, seed=7)
        assert restored.cfg == cfg

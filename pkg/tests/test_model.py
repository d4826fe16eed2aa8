import json
import struct
import threading

import numpy as np
import pytest

from retgrade import model as M
from retgrade import tensor as T
from retgrade.fundus import DatasetManifest, FundusImage, ManifestEntry, save_png
from helpers import check_gradients, numeric_grad, numeric_grad_smooth, rel_err


TINY = M.ModelConfig(
    input_size=32,
    conv_blocks=((8, 3, 1, 2), (12, 3, 1, 2)),
    attention_channels=12,
    hidden_units=10,
    seed=7,
)


def random_fundus(size=64, seed=0):
    rng = np.random.default_rng(seed)
    return FundusImage(pixels=rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8))


def walk_parameter_count(config):
    """Independent shape walk; intentionally does not consult the model."""
    total = 0
    in_ch = 3
    for out_ch, kernel, _stride, _pool in config.conv_blocks:
        total += out_ch * in_ch * kernel * kernel + out_ch
        in_ch = out_ch
    total += in_ch + 1  # attention score conv
    total += in_ch * config.hidden_units + config.hidden_units
    total += config.hidden_units * config.classes + config.classes
    return total


class TestBuild:
    def test_default_config_output_shape(self):
        m = M.build(M.ModelConfig(seed=1))
        x = T.Tensor(np.zeros((1, 3, 128, 128), dtype=np.float32))
        assert m.forward_probs(x).shape == (1, 5)

    def test_same_seed_identical_weights(self):
        a = M.build(M.ModelConfig(seed=3))
        b = M.build(M.ModelConfig(seed=3))
        for name in a.weights:
            np.testing.assert_array_equal(a.weights[name].data, b.weights[name].data)

    def test_different_seed_differs(self):
        a = M.build(M.ModelConfig(seed=3))
        b = M.build(M.ModelConfig(seed=4))
        assert not np.array_equal(a.weights["block0.kernel"].data,
                                  b.weights["block0.kernel"].data)

    def test_parameter_count_matches_shape_walk(self):
        for config in (M.ModelConfig(), TINY):
            assert M.build(config).parameter_count() == walk_parameter_count(config)

    def test_default_parameter_count_frozen(self):
        # 4 conv blocks (448 + 4640 + 18496 + 36928) + attention (65)
        # + hidden dense (4160) + classifier (325), from the shape walk
        assert walk_parameter_count(M.ModelConfig()) == 65062
        assert M.build(M.ModelConfig()).parameter_count() == 65062

    def test_rejects_collapsing_spatial_extent(self):
        with pytest.raises(ValueError, match="spatial"):
            M.ModelConfig(
                input_size=16,
                conv_blocks=((8, 3, 1, 2), (8, 3, 1, 2), (8, 3, 1, 2)),
                attention_channels=8,
            )

    def test_rejects_attention_channel_mismatch(self):
        with pytest.raises(ValueError, match="attention_channels"):
            M.ModelConfig(conv_blocks=((16, 3, 1, 2),), attention_channels=32)


class TestAttentionPool:
    def test_spatially_constant_features(self):
        rng = np.random.default_rng(0)
        per_channel = rng.standard_normal((2, 4, 1, 1)).astype(np.float32)
        features = T.Tensor(np.broadcast_to(per_channel, (2, 4, 3, 3)).copy())
        w = T.Tensor(rng.standard_normal(4).astype(np.float32))
        b = T.Tensor(np.zeros(1, dtype=np.float32))
        pooled, alpha = M.attention_pool(features, w, b)
        np.testing.assert_allclose(pooled.data, per_channel[:, :, 0, 0], atol=1e-6)
        np.testing.assert_allclose(alpha.sum(axis=1), np.ones(2), atol=1e-6)

    def test_extreme_scores_select_one_location(self):
        features = np.zeros((1, 2, 2, 2), dtype=np.float32)
        features[0, :, 1, 0] = [5.0, -3.0]
        features[0, 0, 0, 0] = 100.0  # drives location (0,0) score, channel 0
        feats = T.Tensor(features)
        w = T.Tensor(np.array([50.0, 0.0], dtype=np.float32))
        b = T.Tensor(np.zeros(1, dtype=np.float32))
        pooled, alpha = M.attention_pool(feats, w, b)
        assert alpha[0, 0] == pytest.approx(1.0)
        np.testing.assert_allclose(pooled.data[0], features[0, :, 0, 0], atol=1e-5)

    @pytest.mark.parametrize("seed", range(5))
    def test_output_inside_convex_envelope(self, seed):
        rng = np.random.default_rng(seed)
        feats = T.Tensor(rng.standard_normal((3, 6, 4, 4)).astype(np.float32))
        w = T.Tensor(rng.standard_normal(6).astype(np.float32))
        b = T.Tensor(rng.standard_normal(1).astype(np.float32))
        pooled, alpha = M.attention_pool(feats, w, b)
        flat = feats.data.reshape(3, 6, 16)
        assert np.all(pooled.data >= flat.min(axis=2) - 1e-6)
        assert np.all(pooled.data <= flat.max(axis=2) + 1e-6)
        assert np.all(alpha >= 0)
        np.testing.assert_allclose(alpha.sum(axis=1), np.ones(3), atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        feats = rng.standard_normal((2, 3, 3, 3))
        w = rng.standard_normal(3)
        b = rng.standard_normal(1)
        v = rng.standard_normal((2, 3))

        def build(ff, ww, bb):
            pooled, _ = M.attention_pool(ff, ww, bb)
            return T.tsum(T.mul(pooled, T.Tensor(v.astype(np.float64))))

        check_gradients(build, [feats, w, b], wrt_indices=[0, 1])

    def test_bias_gradient_exactly_zero(self):
        # shifting every location score equally never moves the softmax
        rng = np.random.default_rng(3)
        feats = T.Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        w = T.Tensor(rng.standard_normal(3), requires_grad=True)
        b = T.Tensor(rng.standard_normal(1), requires_grad=True)
        pooled, _ = M.attention_pool(feats, w, b)
        T.backward(T.tsum(pooled))
        np.testing.assert_array_equal(b.grad, np.zeros(1))

        def fwd(bb):
            p, _ = M.attention_pool(T.Tensor(feats.data), T.Tensor(w.data), T.Tensor(bb))
            return float(p.data.sum())

        numeric = numeric_grad(fwd, [b.data], 0)
        assert abs(numeric[0]) < 1e-9


class TestFullModelGradients:
    def test_weight_gradients_match_finite_differences(self):
        rng = np.random.default_rng(42)
        cfg = M.ModelConfig(
            input_size=16,
            conv_blocks=((4, 3, 1, 2), (6, 3, 1, 2)),
            attention_channels=6,
            hidden_units=8,
            seed=5,
        )
        built = M.build(cfg)
        names = list(built.weights)
        arrays32 = [built.weights[n].data for n in names]
        x = rng.uniform(0, 1, size=(2, 3, 16, 16))
        y = np.zeros((2, 5))
        y[0, 1] = 1.0
        y[1, 3] = 1.0

        def forward(*weight_arrays):
            m = M.Model(cfg, {n: T.Tensor(a) for n, a in zip(names, weight_arrays)})
            probs = m.forward_probs(T.Tensor(x.astype(weight_arrays[0].dtype)))
            return T.cross_entropy(probs, y).item()

        # analytic gradients along the real single-precision training path
        weights32 = {n: T.Tensor(a.copy(), requires_grad=True) for n, a in zip(names, arrays32)}
        m32 = M.Model(cfg, weights32)
        loss = T.cross_entropy(m32.forward_probs(T.Tensor(x.astype(np.float32))), y)
        T.backward(loss)

        total = 0
        total_smooth = 0
        for i, name in enumerate(names):
            numeric, smooth = numeric_grad_smooth(forward, arrays32, wrt=i, eps=1e-3)
            analytic = weights32[name].grad.astype(np.float64)
            if name == "attention.bias":  # identically zero; compare absolutely
                assert np.abs(analytic).max() == 0.0
                assert np.abs(numeric).max() < 1e-9
                continue
            total += smooth.size
            total_smooth += smooth.sum()
            if smooth.any():
                err = rel_err(analytic[smooth], numeric[smooth])
                assert err < 1e-3, f"{name}: rel err {err:.2e}"
        assert total_smooth / total > 0.7, "too many kinked entries to compare"


def manifest_from_images(tmp_path, images_labels, origin="toy"):
    entries = []
    for i, (img, label) in enumerate(images_labels):
        rel = f"{origin}/img{i}.png"
        save_png(img, tmp_path / rel)
        entries.append(ManifestEntry(rel, label, origin, 0))
    return DatasetManifest(entries=entries)


class TestTrain:
    def test_zero_lr_leaves_weights_unchanged(self, tmp_path):
        manifest = manifest_from_images(
            tmp_path, [(random_fundus(32, s), s % 5) for s in range(6)])
        m = M.build(TINY)
        before = {k: t.data.copy() for k, t in m.weights.items()}
        M.train(m, manifest, epochs=2, batch_size=3, lr=0.0, seed=0, root=tmp_path)
        for k, t in m.weights.items():
            np.testing.assert_array_equal(t.data, before[k])

    def test_overfit_single_sample(self, tmp_path):
        manifest = manifest_from_images(tmp_path, [(random_fundus(32, 3), 2)])
        m = M.build(TINY)
        report = M.train(m, manifest, epochs=200, batch_size=1, lr=1e-3,
                         seed=1, root=tmp_path)
        assert report.final_loss < 0.01

    @pytest.mark.parametrize("seed", range(10))
    def test_single_adam_step_decreases_frozen_batch_loss(self, seed):
        rng = np.random.default_rng(seed)
        cfg = M.ModelConfig(
            input_size=16, conv_blocks=((4, 3, 1, 2),), attention_channels=4,
            hidden_units=6, seed=seed)
        m = M.build(cfg)
        x = rng.uniform(0, 1, size=(4, 3, 16, 16)).astype(np.float32)
        y = np.zeros((4, 5), dtype=np.float32)
        y[np.arange(4), rng.integers(0, 5, 4)] = 1.0
        m.set_trainable(True)
        opt = M.Adam(m.weights, lr=1e-4)

        loss0 = T.cross_entropy(m.forward_probs(T.Tensor(x)), y)
        opt.zero_grad()
        T.backward(loss0)
        opt.step()
        loss1 = T.cross_entropy(m.forward_probs(T.Tensor(x)), y)
        assert loss1.item() < loss0.item()

    def test_epoch_metrics_recorded(self, tmp_path):
        manifest = manifest_from_images(
            tmp_path, [(random_fundus(32, s), s % 5) for s in range(8)])
        m = M.build(TINY)
        report = M.train(m, manifest, epochs=3, batch_size=4, lr=1e-3,
                         seed=2, root=tmp_path)
        assert len(report.epoch_loss) == 3
        assert len(report.epoch_accuracy) == 3
        assert all(0.0 <= a <= 1.0 for a in report.epoch_accuracy)

    def test_shuffling_is_seed_deterministic(self, tmp_path):
        manifest = manifest_from_images(
            tmp_path, [(random_fundus(32, s), s % 5) for s in range(10)])
        reports = []
        finals = []
        for _ in range(2):
            m = M.build(TINY)
            reports.append(M.train(m, manifest, epochs=2, batch_size=4, lr=1e-3,
                                   seed=9, root=tmp_path))
            finals.append({k: t.data.copy() for k, t in m.weights.items()})
        assert reports[0].epoch_loss == reports[1].epoch_loss
        for k in finals[0]:
            np.testing.assert_array_equal(finals[0][k], finals[1][k])


class TestPredict:
    def test_zeroed_classifier_gives_uniform_probabilities(self):
        m = M.build(TINY)
        m.weights["classifier.weight"].data[:] = 0
        m.weights["classifier.bias"].data[:] = 0
        result = M.predict(m, random_fundus(48, 5))
        np.testing.assert_allclose(result.probabilities, [0.2] * 5, atol=1e-6)
        assert result.grade == 0  # tie broken toward the lower grade

    def test_repeatable(self):
        m = M.build(TINY)
        img = random_fundus(40, 8)
        a = M.predict(m, img)
        b = M.predict(m, img)
        assert a.probabilities == b.probabilities
        assert a.grade == b.grade

    @pytest.mark.parametrize("seed", range(5))
    def test_probabilities_sum_to_one(self, seed):
        m = M.build(M.ModelConfig(seed=seed, input_size=TINY.input_size,
                                  conv_blocks=TINY.conv_blocks,
                                  attention_channels=TINY.attention_channels,
                                  hidden_units=TINY.hidden_units))
        result = M.predict(m, random_fundus(36, seed))
        assert abs(sum(result.probabilities) - 1.0) < 1e-6
        assert result.grade == int(np.argmax(result.probabilities))

    def test_concurrent_predicts_match_serial(self):
        m = M.build(TINY)
        images = [random_fundus(40, s) for s in range(8)]
        serial = [M.predict(m, img) for img in images]
        results = [None] * len(images)

        def worker(i):
            results[i] = M.predict(m, images[i])

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(len(images))]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        for got, want in zip(results, serial):
            assert got.probabilities == want.probabilities


class TestCheckpoint:
    def test_roundtrip_bit_exact_forward(self, tmp_path):
        m = M.build(TINY)
        img = random_fundus(44, 12)
        before = M.predict(m, img)
        M.save(m, tmp_path / "m.ckpt")
        loaded = M.load(tmp_path / "m.ckpt")
        after = M.predict(loaded, img)
        assert before.probabilities == after.probabilities

    def test_metadata_roundtrip(self, tmp_path):
        m = M.build(TINY)
        m.meta = {"epochs": 4, "final_loss": 0.25}
        M.save(m, tmp_path / "m.ckpt")
        assert M.load(tmp_path / "m.ckpt").meta == {"epochs": 4, "final_loss": 0.25}

    def test_truncated_file_structured_error(self, tmp_path):
        m = M.build(TINY)
        M.save(m, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(M.CheckpointError, match="truncated"):
            M.load(tmp_path / "cut.ckpt")

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOTCKPT" + b"\x00" * 32)
        with pytest.raises(M.CheckpointError, match="magic"):
            M.load(tmp_path / "bad.ckpt")

    def test_unsupported_version(self, tmp_path):
        m = M.build(TINY)
        M.save(m, tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        struct.pack_into("<H", raw, len(M.CHECKPOINT_MAGIC), 99)
        (tmp_path / "v99.ckpt").write_bytes(bytes(raw))
        with pytest.raises(M.CheckpointError, match="version 99"):
            M.load(tmp_path / "v99.ckpt")

    def test_shape_mismatch_against_config(self, tmp_path):
        m = M.build(TINY)
        M.save(m, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        pos = len(M.CHECKPOINT_MAGIC) + 2
        (header_len,) = struct.unpack_from("<I", raw, pos)
        header = json.loads(raw[pos + 4 : pos + 4 + header_len].decode())
        header["tensors"][0]["shape"] = [1, 1, 1, 1]
        new_header = json.dumps(header).encode()
        patched = (raw[:pos] + struct.pack("<I", len(new_header)) + new_header
                   + raw[pos + 4 + header_len :])
        (tmp_path / "shape.ckpt").write_bytes(patched)
        with pytest.raises(M.CheckpointError, match="shape"):
            M.load(tmp_path / "shape.ckpt")

    def test_hand_built_minimal_checkpoint_parses(self):
        cfg = M.ModelConfig(
            input_size=16, conv_blocks=((2, 3, 1, 2),), attention_channels=2,
            hidden_units=3, seed=0)
        rng = np.random.default_rng(0)
        shapes = {
            "block0.kernel": (2, 3, 3, 3),
            "block0.bias": (1, 2, 1, 1),
            "attention.weight": (2,),
            "attention.bias": (1,),
            "head.weight": (2, 3),
            "head.bias": (3,),
            "classifier.weight": (3, 5),
            "classifier.bias": (5,),
        }
        table = []
        blob = b""
        arrays = {}
        for name, shape in shapes.items():
            arr = rng.standard_normal(shape).astype("<f4")
            arrays[name] = arr
            table.append({"name": name, "shape": list(shape), "offset": len(blob)})
            blob += arr.tobytes()
        header = json.dumps({"config": cfg.to_dict(), "tensors": table,
                             "metadata": {"epochs": 0}}).encode()
        raw = (M.CHECKPOINT_MAGIC + struct.pack("<H", 1)
               + struct.pack("<I", len(header)) + header + blob)
        loaded = M.load_bytes(raw, model_id="golden")
        assert loaded.model_id == "golden"
        for name, arr in arrays.items():
            np.testing.assert_array_equal(loaded.weights[name].data, arr)

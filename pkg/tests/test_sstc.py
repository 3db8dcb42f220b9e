import math

import numpy as np
import pytest

from hypertta import autodiff as ad
from hypertta.autodiff import Parameter, Tape
from hypertta.hsi import ConfigError, DataError, HsiCube, extract_patch
from hypertta.sstc import (
    SstcConfig,
    SstcModel,
    attention,
    classify,
    encode,
    load_checkpoint,
    logits,
    mrf_features,
    save_checkpoint,
    smooth_labels,
    smoothed_ce_loss,
    target_entropy,
    train,
)


def small_config(**kw):
    base = dict(bands=4, num_classes=3, patch_size=3, proj_dims=(4, 4, 4), conv_channels=4, heads=2, layers=1)
    base.update(kw)
    return SstcConfig(**base)


def patches(n, cfg, seed=0):
    return np.random.default_rng(seed).random((n, cfg.bands, cfg.patch_size, cfg.patch_size))


# --- MRF front-end -------------------------------------------------------------------


def test_mrf_default_width():
    cfg = SstcConfig(bands=5, num_classes=2)
    assert cfg.model_dim == 96
    out = mrf_features(patches(2, cfg), SstcModel(cfg))
    assert out.shape == (2, 96, 7, 7)


def test_mrf_collapse_is_per_pixel_linear_map():
    cfg = small_config(kernel_sizes=(1,), proj_dims=(4,), conv_channels=4, heads=1)
    model = SstcModel(cfg)
    w = np.random.default_rng(1).normal(size=(4, 4))
    model["mrf0.conv.weight"].data[...] = w[:, :, None, None]
    model["mrf0.proj.weight"].data[...] = np.eye(4)[:, :, None, None]
    x = patches(3, cfg)
    expected = np.maximum(np.einsum("oc,bchw->bohw", w, x), 0)
    np.testing.assert_allclose(mrf_features(x, model).data, expected, atol=1e-12)


def test_mrf_delta_kernels_copy_input_slices():
    cfg = small_config()
    model = SstcModel(cfg)
    for m, k in enumerate(cfg.kernel_sizes):
        kern = np.zeros((4, 4, k, k))
        kern[np.arange(4), np.arange(4), k // 2, k // 2] = 1.0
        model[f"mrf{m}.conv.weight"].data[...] = kern
        model[f"mrf{m}.proj.weight"].data[...] = np.eye(4)[:, :, None, None]
    x = patches(2, cfg)
    out = mrf_features(x, model).data
    np.testing.assert_allclose(out, np.concatenate([x, x, x], axis=1), atol=1e-12)


def test_mrf_band_mismatch():
    cfg = small_config()
    with pytest.raises(ConfigError):
        mrf_features(np.zeros((1, 5, 3, 3)), SstcModel(cfg))


# --- encoder ---------------------------------------------------------------------------


def test_zero_query_key_gives_uniform_attention():
    cfg = small_config()
    model = SstcModel(cfg)
    model["enc0.attn.wq"].data[...] = 0
    model["enc0.attn.wk"].data[...] = 0
    h = ad.Tensor(np.random.default_rng(2).normal(size=(2, 9, 12)))
    out, weights = attention(h, model, 0, return_weights=True)
    np.testing.assert_allclose(weights.data, 1 / 9)
    v = h.data @ model["enc0.attn.wv"].data
    expected = np.broadcast_to(v.mean(axis=1, keepdims=True), v.shape) @ model["enc0.attn.wo"].data
    np.testing.assert_allclose(out.data, expected + model["enc0.attn.bo"].data, atol=1e-12)


def test_attention_rows_sum_to_one():
    model = SstcModel(small_config())
    h = ad.Tensor(np.random.default_rng(3).normal(size=(3, 9, 12)) * 4)
    _, weights = attention(h, model, 0, return_weights=True)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1, atol=1e-6)


def test_encoder_permutation_equivariance():
    model = SstcModel(small_config(layers=2))
    rng = np.random.default_rng(4)
    tokens = rng.normal(size=(2, 9, 12))
    perm = rng.permutation(9)
    base = encode(tokens, model).data
    model["pos_embed"].data[...] = model["pos_embed"].data[perm]
    shuffled = encode(tokens[:, perm], model).data
    np.testing.assert_allclose(shuffled, base[:, perm], atol=1e-12)


# --- classifier ---------------------------------------------------------------------------


def test_classify_outputs_distributions():
    cfg = small_config(patch_size=5)
    probs = classify(patches(6, cfg) * 10, SstcModel(cfg)).data
    assert probs.shape == (6, 3)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)


def test_single_pixel_patch():
    cfg = small_config(patch_size=1)
    assert cfg.tokens == 1 and cfg.center_index == 0
    probs = classify(patches(2, cfg), SstcModel(cfg)).data
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)


def test_identical_patches_identical_rows():
    cfg = small_config()
    x = np.repeat(patches(1, cfg), 2, axis=0)
    probs = classify(x, SstcModel(cfg)).data
    np.testing.assert_array_equal(probs[0], probs[1])


def test_center_token_stable_under_translation():
    cfg = small_config(patch_size=5)
    model = SstcModel(cfg)
    data = np.full((4, 12, 12), 0.3)
    data[:, 4, 4] = [0.9, 0.1, 0.5, 0.7]
    data[:, 7, 8] = [0.9, 0.1, 0.5, 0.7]
    cube = HsiCube(data)
    a = extract_patch(cube, (4, 4), 5).values
    b = extract_patch(cube, (7, 8), 5).values
    pa, pb = (classify(v[None], model).data for v in (a, b))
    np.testing.assert_array_equal(pa, pb)


def test_patch_shape_errors():
    model = SstcModel(small_config())
    with pytest.raises(ConfigError):
        classify(np.zeros((1, 4, 4, 4)), model)
    with pytest.raises(ConfigError):
        classify(np.zeros((1, 4, 5, 5)), model)


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(heads=5)
    with pytest.raises(ConfigError):
        small_config(kernel_sizes=(3, 4, 5))
    with pytest.raises(ConfigError):
        small_config(smoothing=1.5)


# --- loss -----------------------------------------------------------------------------------


def test_smooth_labels_values():
    t = smooth_labels(2, 0.05, 4)
    np.testing.assert_allclose(t, [0.0125, 0.9625, 0.0125, 0.0125])
    np.testing.assert_array_equal(smooth_labels([1, 3], 0.0, 3), [[1, 0, 0], [0, 0, 1]])
    for eps in (0.0, 0.05, 0.3, 1.0):
        for k in (2, 5, 9):
            assert abs(smooth_labels(1, eps, k).sum() - 1) < 1e-15
    with pytest.raises(ValueError):
        smooth_labels(5, 0.05, 4)


def test_ce_loss_values():
    one_hot = np.eye(3)
    assert float(smoothed_ce_loss(one_hot, one_hot).data) == 0.0
    uni = np.full((2, 5), 0.2)
    t = smooth_labels([1, 4], 0.05, 5)
    assert abs(float(smoothed_ce_loss(uni, t).data) - math.log(5)) < 1e-12
    val = float(smoothed_ce_loss(np.array([[0.8, 0.2]]), np.array([[0.975, 0.025]])).data)
    assert abs(val - -(0.975 * math.log(0.8) + 0.025 * math.log(0.2))) < 1e-12
    assert round(val, 4) == 0.2578


def test_ce_loss_clamps_zero_probabilities():
    val = float(smoothed_ce_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).data)
    assert abs(val - 0.5 * -math.log(1e-12)) < 1e-9
    with pytest.raises(ValueError):
        smoothed_ce_loss(np.zeros((1, 2)), np.array([[0.5, 0.5]]))


def test_ce_gradient_wrt_logits():
    rng = np.random.default_rng(5)
    z = Parameter(rng.normal(size=(6, 4)) * 3, "logits")
    t = smooth_labels(rng.integers(1, 5, 6), 0.05, 4)
    with Tape() as tape:
        p = ad.softmax_lastdim(z)
        loss = smoothed_ce_loss(p, t)
    g = tape.backward(loss)["logits"]
    np.testing.assert_allclose(g, (p.data - t) / 6, atol=1e-12)


def test_target_entropy():
    t = smooth_labels(1, 0.05, 4)
    assert abs(target_entropy(0.05, 4) - float(-(t * np.log(t)).sum())) < 1e-15
    assert target_entropy(0.0, 4) == 0.0


# --- training ----------------------------------------------------------------------------


def separable_set(n=128, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(1, 3, n)
    x = rng.random((n, 4, 3, 3)) * 0.3
    x[:, 0] += np.where(y == 1, 0.7, 0.0)[:, None, None]
    x[:, 1] += np.where(y == 2, 0.7, 0.0)[:, None, None]
    return x, y


def test_training_deterministic():
    x, y = separable_set(64)
    cfg = small_config(num_classes=2, epochs=2, batch_size=16)
    a = train(SstcModel(cfg), x, y)
    b = train(SstcModel(cfg), x, y)
    assert a.digest == b.digest
    assert a.step_loss == b.step_loss


def test_training_separable_set():
    x, y = separable_set()
    cfg = small_config(num_classes=2, epochs=10, batch_size=16)
    model = SstcModel(cfg)
    report = train(model, x, y)
    assert max(report.epoch_accuracy) >= 0.99
    assert report.epoch_loss[4] < report.epoch_loss[0]
    floor = target_entropy(cfg.smoothing, 2)
    assert min(report.step_loss) >= floor - 1e-6
    assert np.mean(classify(x, model).data.argmax(axis=1) + 1 == y) >= 0.99


def test_training_input_errors():
    cfg = small_config()
    with pytest.raises(DataError):
        train(SstcModel(cfg), patches(3, cfg), [1, 2])


def test_logits_shape():
    cfg = small_config()
    assert logits(patches(5, cfg), SstcModel(cfg)).shape == (5, 3)


# --- checkpoints ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config(seed=9)
    model = SstcModel(cfg)
    model["ln1.gamma"].data[...] += 0.125
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert back.config == cfg
    assert back.digest() == model.digest()
    for tag, p in model.params.items():
        assert back[tag].data.tobytes() == p.data.tobytes()
    x = patches(3, cfg)
    np.testing.assert_array_equal(classify(x, back).data, classify(x, model).data)


def test_checkpoint_corruption_detected(tmp_path):
    path = save_checkpoint(SstcModel(small_config()), tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[10] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_checkpoint(path)

import numpy as np
import pytest

from lvquant.errors import ConfigError, CorruptedStateError, ShapeError
from lvquant.gradcheck import model_gradient_error
from lvquant.model import (
    ModelConfig,
    Network,
    build_architecture,
    build_network,
    init_params,
    is_regularized,
)

KAPPAS = (1, 3, 5, 7)
PARAMETER_COUNTS = {1: 1783637, 3: 2014037, 5: 2014037, 7: 2087893}


def _st_output(net, windows):
    c = net.config
    B = windows.shape[0]
    enc = net.encoder_forward(windows.reshape(B * c.kappa, 1, c.image_size, c.image_size))
    e = net.arch.encoded_size
    vol = enc.reshape(B, c.kappa, c.encoder_channels, e, e).transpose(0, 2, 1, 3, 4)
    return net.st_forward(np.ascontiguousarray(vol))


@pytest.mark.parametrize("kappa", KAPPAS)
def test_output_shapes_batch20(kappa):
    net = Network(ModelConfig(kappa=kappa))
    x = np.random.default_rng(kappa).random((20, kappa, 80, 80), dtype=np.float32)
    pred, cache = net.forward(x, training=True)
    assert pred.regression.shape == (20, 11) and pred.phase_logits.shape == (20, 2)
    assert cache is not None
    assert _st_output(net, x).shape == (20, 64, 1, 6, 6)


@pytest.mark.parametrize("kappa", KAPPAS)
def test_eval_single_window(kappa):
    net = Network(ModelConfig(kappa=kappa))
    pred, cache = net.forward(np.zeros((1, kappa, 80, 80), np.float32))
    assert cache is None
    assert pred.regression.shape == (1, 11) and pred.phase.shape == (1,)


def test_st_kernels_per_kappa():
    kernels = {k: build_architecture(ModelConfig(kappa=k)).st_kernels for k in KAPPAS}
    assert kernels[5] == [(3, 5, 5), (2, 5, 5)]
    assert kernels[3] == [(3, 5, 5), (2, 5, 5)]
    assert kernels[1] == [(1, 5, 5), (1, 5, 5)]
    assert kernels[7] == [(3, 5, 5), (2, 5, 5), (2, 3, 3)]


def test_encoder_geometry():
    arch = build_architecture(ModelConfig())
    assert arch.encoded_size == 16 and arch.st_size == 6
    net = Network(ModelConfig())
    out = net.encoder_forward(np.random.default_rng(0).random((3, 1, 80, 80), dtype=np.float32))
    assert out.shape == (3, 40, 16, 16)


def test_parameter_counts():
    for k, count in PARAMETER_COUNTS.items():
        assert build_architecture(ModelConfig(kappa=k)).parameter_count() == count


def test_describe_lists_layers():
    text = build_architecture(ModelConfig(kappa=5)).describe()
    assert "kernel=3x5x5" in text and "kernel=2x5x5" in text
    assert "linear 2304->640" in text and "parameters 2014037" in text


def test_invalid_configs():
    for bad in (dict(kappa=4), dict(kappa=9), dict(st_channels=(4,)), dict(encoder_channels=0), dict(kernel=4)):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)


def test_wrong_input_shape():
    net = Network(ModelConfig.miniature(5))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 3, 8, 8)))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 5, 9, 9)))


def test_encoder_weights_shared_across_slices():
    net = Network(ModelConfig.miniature(5, seed=3), dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.random((4, 1, 8, 8))
    # eval mode: per-slice results cannot depend on batch composition
    joint = net.encoder_forward(x)
    for i in range(4):
        np.testing.assert_allclose(net.encoder_forward(x[i:i + 1])[0], joint[i], atol=1e-12)


def test_shared_encoder_equals_separate_runs_on_replicated_input():
    kappa = 5
    net = Network(ModelConfig.miniature(kappa, seed=1), dtype=np.float64)
    rng = np.random.default_rng(2)
    frame = rng.random((3, 1, 8, 8))
    windows = np.repeat(frame, kappa, axis=1)
    pred, _ = net.forward(windows, training=True)

    ref = net.copy()
    slices = [ref.encoder_forward(frame, training=True) for _ in range(kappa)]
    vol = np.stack(slices, axis=2)
    feats = ref.st_forward(vol, training=True)
    pred_ref = ref.heads_forward(feats, training=True)
    np.testing.assert_allclose(pred.regression, pred_ref.regression, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(pred.phase_logits, pred_ref.phase_logits, rtol=1e-10, atol=1e-12)


def test_zero_input_eval_gives_bias_driven_output():
    net = Network(ModelConfig.miniature(3))
    a, _ = net.forward(np.zeros((2, 3, 8, 8), np.float32))
    assert np.all(np.isfinite(a.regression))
    np.testing.assert_array_equal(a.regression[0], a.regression[1])


def test_eval_deterministic_and_train_differs():
    net = Network(ModelConfig.miniature(5))
    x = np.random.default_rng(0).random((4, 5, 8, 8), dtype=np.float32)
    a, _ = net.forward(x)
    b, _ = net.forward(x)
    np.testing.assert_array_equal(a.regression, b.regression)
    t, _ = net.forward(x, training=True)
    assert not np.allclose(t.regression, a.regression)


def test_training_forward_updates_running_stats():
    net = Network(ModelConfig.miniature(5))
    before = {k: v.copy() for k, v in net.buffers.items()}
    x = np.random.default_rng(0).random((4, 5, 8, 8), dtype=np.float32)
    net.forward(x)
    assert all(np.array_equal(before[k], net.buffers[k]) for k in before)
    net.forward(x, training=True)
    assert any(not np.array_equal(before[k], net.buffers[k]) for k in before)


def test_backward_zero_upstream_gives_zero_grads():
    net = Network(ModelConfig.miniature(5), dtype=np.float64)
    x = np.random.default_rng(0).random((2, 5, 8, 8))
    _, cache = net.forward(x, training=True)
    grads = net.backward(cache, np.zeros((2, 11)), np.zeros((2, 2)))
    assert set(grads) == set(net.params)
    assert all(not g.any() for g in grads.values())


def test_backward_requires_training_cache_and_same_params():
    net = Network(ModelConfig.miniature(5))
    x = np.zeros((2, 5, 8, 8), np.float32)
    with pytest.raises(CorruptedStateError):
        net.backward(None, np.zeros((2, 11)), np.zeros((2, 2)))
    _, cache = net.forward(x, training=True)
    with pytest.raises(ShapeError):
        net.backward(cache, np.zeros((3, 11)), np.zeros((3, 2)))
    net.params = {k: v.copy() for k, v in net.params.items()}
    with pytest.raises(CorruptedStateError):
        net.backward(cache, np.zeros((2, 11)), np.zeros((2, 2)))


@pytest.mark.parametrize("kappa", KAPPAS)
def test_miniature_gradients_match_finite_differences(kappa):
    assert model_gradient_error(kappa, seed=0) < 1e-4


def test_init_deterministic_and_seed_sensitive():
    a = init_params(ModelConfig(kappa=1, seed=5))
    b = init_params(ModelConfig(kappa=1, seed=5))
    c = init_params(ModelConfig(kappa=1, seed=6))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_he_init_variance():
    params = init_params(ModelConfig(kappa=5))
    for name, w in params.items():
        if not name.endswith(".weight") or w.size < 500:
            continue
        fan_in = w.shape[0] if w.ndim == 2 else int(np.prod(w.shape[1:]))
        assert abs(w.var() / (2.0 / fan_in) - 1) < 0.2, name
    for name, v in params.items():
        if name.endswith(".gamma"):
            assert np.all(v == 1)
        elif name.endswith((".beta", ".bias")):
            assert not v.any()


def test_regularized_names():
    params, _ = build_network(ModelConfig.miniature(5))
    reg = [k for k in params if is_regularized(k)]
    assert reg and all(k.endswith(".weight") for k in reg)
    assert not any(is_regularized(k) for k in params if k.endswith((".bias", ".gamma", ".beta")))


def test_network_rejects_mismatched_params():
    params = init_params(ModelConfig.miniature(5))
    with pytest.raises(CorruptedStateError):
        Network(ModelConfig.miniature(7), params)


def test_predict_batches_match_single_pass():
    net = Network(ModelConfig.miniature(5))
    x = np.random.default_rng(0).random((7, 5, 8, 8), dtype=np.float32)
    whole, _ = net.forward(x)
    chunked = net.predict(x, batch_size=3)
    np.testing.assert_allclose(chunked.regression, whole.regression, rtol=1e-5, atol=1e-6)

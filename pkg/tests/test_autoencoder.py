import numpy as np
import pytest

from leakguard import nn
from leakguard.autoencoder import (Autoencoder, TrainConfig, default_latent_dim, encode,
                                   init_autoencoder, reconstruct, reconstruction_mse,
                                   train_autoencoder)
from leakguard.errors import DomainError, ShapeError, TrainingError
from leakguard.numeric import make_rng


def zero_model(k=4, m=2, enc_bias=(0.5, -1.0), dec_bias=(0.1, 0.2, 0.3, 0.4)):
    enc = [nn.Layer(np.zeros((k, m)), np.array(enc_bias), "linear")]
    dec = [nn.Layer(np.zeros((m, k)), np.array(dec_bias), "linear")]
    return Autoencoder(enc, dec, k, m)


def manifold(n=200, k=10, seed=4):
    t = make_rng(seed).uniform(-1, 1, n)
    return 0.8 * np.sin(np.pi * t[:, None] / 2 + np.arange(k))


def numeric_grad(layers, x, target, loss, eps=1e-5):
    out = []
    for layer in layers:
        grads = []
        for param in (layer.weight, layer.bias):
            g = np.zeros_like(param)
            for idx in np.ndindex(param.shape):
                old = param[idx]
                param[idx] = old + eps
                up, _ = nn.loss_and_grads(layers, x, target, loss)
                param[idx] = old - eps
                down, _ = nn.loss_and_grads(layers, x, target, loss)
                param[idx] = old
                g[idx] = (up - down) / (2 * eps)
            grads.append(g)
        out.append(grads)
    return out


def assert_grads_close(layers, x, target, loss):
    _, analytic = nn.loss_and_grads(layers, x, target, loss)
    numeric = numeric_grad(layers, x, target, loss)
    for (dw, db), (nw, nb) in zip(analytic, numeric):
        for a, n in ((dw, nw), (db, nb)):
            scale = np.maximum(np.abs(a), np.abs(n))
            mask = scale > 1e-7
            assert np.all(np.abs(a - n)[mask] <= 1e-4 * scale[mask])
            assert np.all(np.abs(a - n)[~mask] <= 1e-9)


def test_gradient_check_three_layer_autoencoder():
    rng = make_rng(21)
    layers = nn.build_stack(rng, (6, 5, 3, 6))
    for layer in layers:
        layer.bias[:] = rng.uniform(-0.3, 0.3, layer.bias.shape)
    x = rng.uniform(-1, 1, (7, 6))
    assert_grads_close(layers, x, x, "mse")


def test_gradient_check_mlp_classifier():
    rng = make_rng(22)
    layers = nn.build_stack(rng, (4, 6, 5, 3))
    x = rng.standard_normal((9, 4))
    y = rng.integers(0, 3, 9)
    assert_grads_close(layers, x, y, "xent")


def test_train_manifold_reaches_low_error():
    x = manifold()
    model = train_autoencoder(x, TrainConfig(latent_dim=2, optimizer="adam", learning_rate=1e-3))
    assert model.loss_trace[-1] < 0.05
    assert np.mean(model.reconstruction_mse(x)) == pytest.approx(min(model.loss_trace), rel=1e-12)


def test_training_never_worse_than_init():
    x = manifold()
    model = train_autoencoder(x, TrainConfig(latent_dim=2, epochs=5))
    assert np.mean(model.reconstruction_mse(x)) <= model.loss_trace[0]
    assert len(model.loss_trace) == 6


def test_zero_epochs_returns_initialization():
    x = manifold()
    cfg = TrainConfig(latent_dim=2, epochs=0)
    trained = train_autoencoder(x, cfg)
    init = init_autoencoder(10, cfg)
    for a, b in zip(trained.layers, init.layers):
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
    assert trained.loss_trace == [pytest.approx(np.mean(init.reconstruction_mse(x)))]


def test_training_errors():
    x = manifold(n=10)
    with pytest.raises(DomainError):
        train_autoencoder(x, TrainConfig(batch_size=11))
    with pytest.raises(DomainError):
        train_autoencoder(x[:1], TrainConfig(batch_size=1))
    with pytest.raises(DomainError):
        train_autoencoder(x * 2, TrainConfig(batch_size=2))
    with pytest.raises(DomainError):
        TrainConfig(learning_rate=0)


def test_divergence_names_epoch():
    x = manifold(n=50)
    with pytest.raises(TrainingError) as exc:
        train_autoencoder(x, TrainConfig(latent_dim=2, learning_rate=1e6, batch_size=10))
    assert exc.value.epoch == 1
    assert "epoch 1" in str(exc.value)


def test_encode_zero_weights_gives_bias():
    m = zero_model()
    assert encode(m, [0.3, -0.2, 0.9, 1.0]).tolist() == [0.5, -1.0]
    assert reconstruct(m, [0.3, -0.2, 0.9, 1.0]).tolist() == [0.1, 0.2, 0.3, 0.4]


def test_encode_matches_manual_arithmetic():
    w1 = np.array([[1.0, -2.0], [0.5, 0.0], [0.0, 1.0]])
    b1 = np.array([0.1, -0.3])
    w2 = np.array([[2.0, 1.0], [-1.0, 0.5]])
    b2 = np.array([0.0, 0.25])
    enc = [nn.Layer(w1, b1, "relu"), nn.Layer(w2, b2, "linear")]
    dec = [nn.Layer(np.zeros((2, 3)), np.zeros(3))]
    m = Autoencoder(enc, dec, 3, 2)
    x = [0.4, -0.6, 0.2]
    h = [max(0.0, 0.4 * 1.0 + -0.6 * 0.5 + 0.2 * 0.0 + 0.1), max(0.0, 0.4 * -2.0 + 0.2 * 1.0 - 0.3)]
    z = [h[0] * 2.0 + h[1] * -1.0, h[0] * 1.0 + h[1] * 0.5 + 0.25]
    assert encode(m, x) == pytest.approx(z, abs=1e-15)


def test_encode_is_deterministic_and_pure():
    m = init_autoencoder(12, TrainConfig(seed=5))
    before = [l.weight.copy() for l in m.layers]
    x = make_rng(1).uniform(-1, 1, 12)
    assert np.array_equal(m.encode(x), m.encode(x))
    m.reconstruct(x)
    m.reconstruction_mse(x)
    assert all(np.array_equal(a, l.weight) for a, l in zip(before, m.layers))


def test_shape_errors():
    m = zero_model()
    for bad in ([1.0, 2.0], [], np.zeros((2, 2, 4))):
        with pytest.raises(ShapeError):
            m.encode(bad)
    with pytest.raises(ShapeError):
        reconstruction_mse(m, [1.0])


def test_reconstruction_mse_hand_arithmetic():
    m = zero_model(k=2, m=1, enc_bias=(0.0,), dec_bias=(0.0, 0.0))
    assert reconstruction_mse(m, [1.0, 1.0]) == 1.0
    exact = zero_model(k=2, m=1, enc_bias=(0.0,), dec_bias=(0.3, -0.7))
    assert reconstruction_mse(exact, [0.3, -0.7]) == 0.0


def test_reconstruction_mse_matches_encode_decode():
    m = init_autoencoder(9, TrainConfig(seed=2, latent_dim=3))
    x = make_rng(3).uniform(-1, 1, 9)
    xhat = m.decode(m.encode(x))
    assert m.reconstruction_mse(x) == pytest.approx(sum((a - b) ** 2 for a, b in zip(x, xhat)) / 9, rel=1e-14)


def test_architecture_defaults():
    assert default_latent_dim(561) == 71
    assert default_latent_dim(8) == 2
    m = init_autoencoder(24, TrainConfig())
    assert [l.fan_out for l in m.encoder] == [64, 3]
    assert [l.activation for l in m.layers] == ["relu", "linear", "relu", "linear"]
    with pytest.raises(DomainError):
        Autoencoder(m.encoder, m.decoder, 24, 24)


def test_out_of_distribution_separation(small_models):
    ae, test = small_models["ae"], small_models["test"]
    uniform_q = make_rng(7).uniform(-1, 1, (500, ae.input_dim))
    gap = np.mean(ae.reconstruction_mse(uniform_q)) - np.mean(ae.reconstruction_mse(test.features))
    assert gap > 0
    # a training point reconstructs better than the 95th percentile of random inputs
    p95 = np.percentile(ae.reconstruction_mse(uniform_q), 95)
    assert ae.reconstruction_mse(small_models["fit"].features[0]) < p95

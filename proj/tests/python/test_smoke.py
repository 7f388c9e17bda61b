import numpy as np
import pytest

import unetvl as u


def test_chebyshev_matches_trig_form():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(50, 4))
    T = u.chebyshev_polynomials(x, 12).numpy()
    assert T.shape == (50, 4, 13)
    for m in range(13):
        np.testing.assert_allclose(T[..., m], np.cos(m * np.arccos(x)), atol=1e-10)


def test_gradient_flows_to_numpy_leaf():
    x = u.Tensor(np.linspace(-2, 2, 6).reshape(3, 2), requires_grad=True)
    y = u.sum(u.square(u.tanh(x)))
    y.backward()
    xs = np.linspace(-2, 2, 6).reshape(3, 2)
    expected = 2 * np.tanh(xs) * (1 - np.tanh(xs) ** 2)
    np.testing.assert_allclose(x.grad(), expected, rtol=1e-12)


@pytest.mark.parametrize("kind", ["chebyshev", "bspline", "rbf", "mlp", "linear"])
def test_projection_shape_and_count(kind):
    p = u.Projection(kind, 6, 5, seed=3)
    y = p(np.zeros((7, 6))).numpy()
    assert y.shape == (7, 5)
    assert p.num_parameters == u.projection_param_count(kind, 6, 5)
    assert p.num_parameters == sum(a.size for a in p.parameters().values())


def test_chunkwise_matches_sequential():
    rng = np.random.default_rng(1)
    n, h, d = 32, 2, 4
    q, k, v = (rng.normal(size=(n, h * d)) for _ in range(3))
    ig, fg = rng.normal(size=(n, h)), rng.normal(size=(n, h))
    ref = u.mlstm_sequence(q, k, v, ig, fg).numpy()
    assert np.array_equal(u.mlstm_chunkwise(q, k, v, ig, fg, 1).numpy(), ref)
    for c in (4, 8, 32):
        np.testing.assert_allclose(u.mlstm_chunkwise(q, k, v, ig, fg, c).numpy(), ref, atol=1e-8)
    assert u.mlstm_state_bytes(q, k, v, ig, fg) == u.mlstm_state_bytes(q[:8], k[:8], v[:8], ig[:8], fg[:8])


def test_model_forward_and_parameter_count():
    cfg = u.ModelConfig.micro()
    model = u.UNETVL(cfg, seed=5)
    vol = np.random.default_rng(2).uniform(size=(1, cfg.H, cfg.W, cfg.D))
    logits = model(vol).numpy()
    assert logits.shape == (cfg.num_classes, cfg.H, cfg.W, cfg.D)
    assert model.num_parameters == u.count_parameters(cfg)["total"]
    assert model.predict(vol).shape == (cfg.H, cfg.W, cfg.D)
    taps = model.encoder_taps(np.zeros((cfg.num_tokens, cfg.embed_dim)))
    assert sorted(taps) == list(cfg.taps)
    assert all(t.shape == (cfg.num_tokens, cfg.embed_dim) for t in taps.values())


def test_kan_adds_parameters():
    cfg = u.ModelConfig()
    kan = u.count_parameters(cfg)["total"]
    cfg.projection = "linear"
    assert u.count_parameters(cfg)["total"] < kan


def test_bad_config_raises_value_error():
    cfg = u.ModelConfig.micro()
    cfg.patch = 3
    with pytest.raises(ValueError):
        cfg.validate()
    with pytest.raises(u.ConfigError):
        u.train("nonsense = 1")


def test_dice_metric():
    gt = np.array([0, 1, 1, 2, 2, 2], dtype=np.uint8)
    r = u.dice_metric(gt, gt, 3)
    assert r["mean"] == 1.0
    pred = np.array([0, 1, 0, 2, 2, 0], dtype=np.uint8)
    r = u.dice_metric(pred, gt, 3)
    np.testing.assert_allclose(r["per_class"], [2 / 3, 0.8])


def test_gradcheck_and_planted_fault():
    assert u.gradcheck("chebyshev")["passed"]
    assert not u.gradcheck("chebyshev", planted_fault=True)["passed"]
    assert "model" in u.gradcheck_components()


def test_bench_rows_and_state():
    r = u.bench([64, 128, 256])
    assert len(r["rows"]) == 6
    states = {row["state_bytes"] for row in r["rows"] if row["block"] == "vil"}
    assert len(states) == 1
    assert r["attention_memory_slope"] > r["vil_memory_slope"]


def test_short_training_is_deterministic():
    cfg = "extent = 16\nbatch_size = 2\ntrain_size = 4\nval_size = 2\nsteps = 2\n"
    a = u.train(cfg)
    assert a == u.train(cfg)
    assert a[-1].startswith("epoch=") and "val_dice=" in a[-1]

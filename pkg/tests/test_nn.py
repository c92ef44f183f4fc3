import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundedge import nn
from groundedge.nn import (TrainingFault, WindowDataset, WindowSample, bce_loss, detect_edges,
                           df_loss, forward, init_model, label_at, loss_and_grad, make_windows,
                           sliding_windows, total_loss, train, transitions_from_classes)
from groundedge.physics import DisturbanceSeries
from groundedge.spectral import FusedFeatureSeries


def loop_forward(params, x):
    """Straight loop implementation of the layer stack for one window."""
    def conv(a, w, b):
        h, width, _ = a.shape
        out = np.zeros((h - 2, width, w.shape[3]))
        for i in range(h - 2):
            for j in range(width):
                for f in range(w.shape[3]):
                    out[i, j, f] = b[f] + sum(a[i + k, j, c] * w[k, 0, c, f]
                                              for k in range(3) for c in range(a.shape[2]))
        return np.maximum(out, 0)

    def pool(a):
        h = a.shape[0] // 2
        return np.array([np.maximum(a[2 * i], a[2 * i + 1]) for i in range(h)])

    a = pool(conv(x[:, :, None], params["conv1_w"], params["conv1_b"]))
    a = pool(conv(a, params["conv2_w"], params["conv2_b"]))
    flat = a.reshape(-1)
    h = np.maximum(flat @ params["dense1_w"] + params["dense1_b"], 0)
    z = h @ params["dense2_w"] + params["dense2_b"]
    e = np.exp(z - z.max())
    return e / e.sum()


def dataset(n=16, seed=0):
    rng = np.random.default_rng(seed)
    return WindowDataset(rng.exponential(size=(n, 100, 3)), rng.integers(0, 2, n),
                         rng.uniform(0, 1, n), np.full(n, 0.5))


def test_architecture_shapes():
    m = init_model(seed=0)
    shapes = {k: v.shape for k, v in m.params.items()}
    assert shapes["conv1_w"] == (3, 1, 1, 16)
    assert shapes["conv2_w"] == (3, 1, 16, 32)
    assert shapes["dense1_w"] == (23 * 3 * 32, 16)
    assert shapes["dense2_w"] == (16, 2)
    assert m.n_params == 37010


def test_forward_sums_to_one():
    m = init_model(seed=3)
    p = forward(m, np.random.default_rng(0).exponential(size=(100, 3)))
    assert p.shape == (2,)
    assert abs(p.sum() - 1) <= 1e-9 and np.all((p >= 0) & (p <= 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 1e6))
def test_forward_normalized_for_any_input(seed, scale):
    x = np.random.default_rng(seed).uniform(0, 1, (100, 3)) * scale
    p = forward(init_model(seed=seed % 7), x)
    assert abs(p.sum() - 1) <= 1e-9 and np.all((p >= 0) & (p <= 1))


def test_zero_weights_give_even_split():
    m = init_model(seed=0)
    for k in m.params:
        m.params[k][:] = 0
    assert np.allclose(forward(m, np.ones((100, 3))), [0.5, 0.5], atol=0)


def test_forward_matches_loop_oracle():
    m = init_model(seed=42, log_input=False)
    x = np.random.default_rng(1).normal(size=(100, 3))
    assert np.allclose(forward(m, x), loop_forward(m.params, x), rtol=0, atol=1e-9)


def test_forward_is_deterministic_and_batched():
    m = init_model(seed=1)
    x = np.random.default_rng(2).exponential(size=(5, 100, 3))
    batch = forward(m, x)
    assert np.array_equal(batch, forward(m, x))
    assert np.allclose(batch[3], forward(m, x[3]), atol=1e-15)


def test_forward_shape_errors():
    m = init_model()
    with pytest.raises(ValueError):
        forward(m, np.zeros((99, 3)))
    with pytest.raises(ValueError):
        forward(m, np.full((100, 3), np.nan))


def test_df_loss_values():
    assert df_loss(1.0, 1.0, 0.5) == 0.0
    assert df_loss(0.0, 1.0, 0.5) == pytest.approx(math.e - 1)
    assert df_loss(0.0, 1.0, 0.5) == pytest.approx(1.71828, abs=1e-5)
    assert df_loss(0.0, 0.1, 0.5) == 0.0
    assert df_loss(1.0, 0.1, 0.5) == pytest.approx(math.e - 1)
    # the gate is inclusive at equality
    assert df_loss(1.0, 0.5, 0.5) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 10), st.floats(0, 10))
def test_df_loss_non_negative(y_hat, f, T):
    assert df_loss(y_hat, f, T) >= 0


def test_bce_values():
    assert bce_loss(1, 1 - 1e-7) == pytest.approx(1e-7, rel=1e-3)
    assert bce_loss(1, 0.5) == pytest.approx(math.log(2))
    assert bce_loss(0, 0.5) == pytest.approx(0.6931, abs=1e-4)
    assert np.isfinite(bce_loss(1, 0.0)) and np.isfinite(bce_loss(0, 1.0))


def test_total_loss_composition():
    m = init_model(seed=0)
    ds = dataset(8)
    y_hat = forward(m, ds.x)[:, 1]
    assert total_loss(m, ds, lam=0) == pytest.approx(np.mean(bce_loss(ds.y, y_hat)))
    both = np.mean(bce_loss(ds.y, y_hat) + 1.0 * df_loss(y_hat, ds.f_mag, ds.T))
    assert total_loss(m, ds, lam=1.0) == pytest.approx(both)


def test_total_loss_single_sample_arithmetic():
    # pick y_hat with L_S = 0.5, then L_F follows from the gate
    y_hat = math.exp(-0.5)
    l_s = float(bce_loss(1, y_hat))
    l_f = float(df_loss(y_hat, 0.0, 1.0))
    assert l_s == pytest.approx(0.5)
    assert l_s + 1.0 * l_f == pytest.approx(0.5 + math.exp(y_hat) - 1)


@pytest.mark.parametrize("lam", [0.0, 0.5, 2.0])
def test_gradient_matches_finite_differences(lam):
    m = init_model(seed=7)
    ds = dataset(8, seed=1)
    m.fit_input_scaling(ds.x)
    _, grads = loss_and_grad(m, ds, lam)
    rng = np.random.default_rng(0)
    for name in nn.PARAM_NAMES:
        w = m.params[name]
        for j in rng.choice(w.size, min(20, w.size), replace=False):
            idx = np.unravel_index(j, w.shape)
            old = w[idx]
            w[idx] = old + 1e-6
            up = total_loss(m, ds, lam)
            w[idx] = old - 1e-6
            down = total_loss(m, ds, lam)
            w[idx] = old
            fd = (up - down) / 2e-6
            an = grads[name][idx]
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6), (name, idx, fd, an)


def test_zero_epochs_leaves_model_unchanged():
    m = init_model(seed=0)
    out, hist = train(m, dataset(), epochs=0)
    assert hist == {"loss": [], "accuracy": []}
    for k in m.params:
        assert np.array_equal(out.params[k], m.params[k])


def test_training_is_deterministic():
    ds = dataset(64)
    a, ha = train(init_model(seed=1), ds, epochs=2, seed=5)
    b, hb = train(init_model(seed=1), ds, epochs=2, seed=5)
    assert ha == hb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_training_separates_constructed_classes():
    rng = np.random.default_rng(0)
    n = 200
    y = rng.integers(0, 2, n)
    x = rng.exponential(size=(n, 100, 3)) * np.where(y, 20.0, 1.0)[:, None, None]
    ds = WindowDataset(x, y, np.zeros(n), np.ones(n))
    model, hist = train(init_model(seed=0), ds, epochs=200, batch_size=32, seed=0)
    epoch = nn.epochs_to_accuracy(hist, 0.95)
    assert epoch is not None and epoch <= 200
    assert nn.accuracy(model, ds) >= 0.95


def test_divergence_raises():
    with pytest.raises(TrainingFault), np.errstate(all="ignore"):
        train(init_model(seed=0), dataset(32), epochs=3, lr=1e100)


def test_empty_dataset_rejected():
    empty = WindowDataset(np.zeros((0, 100, 3)), np.zeros(0), np.zeros(0), np.zeros(0))
    with pytest.raises(ValueError):
        train(init_model(), empty, epochs=1)


def test_dataset_from_samples():
    s = WindowSample(np.ones((100, 3)), 1, 0.2, 0.1)
    ds = WindowDataset.from_samples([s, s])
    assert len(ds) == 2 and ds[1].y == 1 and ds.x.shape == (2, 100, 3)


def test_transition_midpoint_rule():
    assert transitions_from_classes([0, 0, 1, 1], [1, 2, 3, 4]) == [2.5]
    assert transitions_from_classes([1, 1, 1], [1, 2, 3]) == []
    assert transitions_from_classes([0, 1, 0], [1, 2, 3]) == [1.5, 2.5]


def test_sliding_windows_and_labels():
    c = np.arange(30.0).reshape(10, 3)
    x, last = sliding_windows(c, 4, 2)
    assert x.shape == (4, 4, 3)
    assert list(last) == [3, 5, 7, 9]
    assert np.array_equal(x[1], c[2:6])
    assert list(label_at([1.0, 4.0, 5.0, 7.0], [4.0, 6.0])) == [0, 1, 1, 0]
    with pytest.raises(ValueError):
        sliding_windows(c, 11)


def step_features(n=400, t_edge=3.0, offset=0):
    t = np.arange(n) * 0.01 + 1.0
    c = np.where(t[:, None] >= t_edge, 100.0, 1.0) * np.ones((n, 3))
    return FusedFeatureSeries(c, t)


def threshold_model():
    """Hand-set weights: class 1 when the end of the window is high."""
    m = init_model(seed=0, log_input=False)
    for k in m.params:
        m.params[k][:] = 0
    # route the last row's first channel straight through to the logits
    m.params["conv1_w"][2, 0, 0, 0] = 1.0
    m.params["conv2_w"][2, 0, 0, 0] = 1.0
    m.params["dense1_w"][22 * 3 * 32 + 0, 0] = 1.0
    m.params["dense2_w"][0] = [-1.0, 1.0]
    m.params["dense2_b"][:] = [10.0, -10.0]
    m.input_mean = np.zeros(3)
    m.input_std = np.ones(3)
    return m


def test_detect_edges_on_step_features():
    found = detect_edges(threshold_model(), step_features())
    assert len(found) == 1
    assert abs(found[0] - 3.0) < 0.1


def test_detect_edges_translation_consistent():
    m = threshold_model()
    base = step_features()
    k = 37
    shifted = FusedFeatureSeries(np.r_[np.ones((k, 3)), base.c[:-k]], base.frame_times)
    a = detect_edges(m, base)
    b = detect_edges(m, shifted)
    assert len(a) == len(b) == 1
    assert b[0] - a[0] == pytest.approx(k * base.frame_dt)


def test_detect_edges_gating():
    m = threshold_model()
    feats = step_features()
    t = np.arange(0, 5, 0.01)
    no_alert = DisturbanceSeries(t, np.zeros((len(t), 3)), np.zeros(len(t)),
                                 np.zeros(len(t), bool), np.zeros(len(t)))
    assert detect_edges(m, feats, disturbance=no_alert) == []
    alert = no_alert.alert.copy()
    alert[305] = True
    with_alert = DisturbanceSeries(t, no_alert.f_w, no_alert.magnitude, alert, no_alert.threshold)
    assert len(detect_edges(m, feats, disturbance=with_alert)) == 1


def test_detect_edges_too_short():
    with pytest.raises(ValueError):
        detect_edges(init_model(), FusedFeatureSeries(np.ones((50, 3)), np.arange(50) * 0.01))


def test_make_windows_labels_and_gate():
    feats = step_features()
    t = np.arange(0, 6, 0.01)
    mag = np.where(np.isclose(t, 3.5), 2.0, 0.1)
    d = DisturbanceSeries(t, np.zeros((len(t), 3)), mag, mag > 1, np.ones(len(t)))
    ds = make_windows(feats, d, [3.0], window=100, stride=1)
    assert len(ds) == 301
    assert np.array_equal(ds.y, (ds.t_ref >= 3.0).astype(int))
    assert np.array_equal(ds.f_mag >= ds.T, np.isclose(ds.t_ref, 3.5))


def test_model_json_roundtrip(tmp_path):
    m = init_model(seed=9, lam=2.0)
    m.fit_input_scaling(np.random.default_rng(0).exponential(size=(4, 100, 3)))
    m.meta["epochs"] = 3
    path = tmp_path / "model.json"
    nn.save_model(m, path)
    back = nn.load_model(path)
    assert back.lam == 2.0 and back.meta == {"epochs": 3}
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
    x = np.random.default_rng(1).exponential(size=(100, 3))
    assert np.array_equal(forward(back, x), forward(m, x))


def test_model_json_rejects_other_files():
    with pytest.raises(ValueError):
        nn.model_from_dict({"format": "something"})

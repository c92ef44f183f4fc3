import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundedge import compress as C
from groundedge.nn import WEIGHT_NAMES, WindowDataset, forward, init_model


def weights_of(model):
    return np.concatenate([model.params[k].ravel() for k in WEIGHT_NAMES])


def test_sparsity_schedule_boundaries_and_value():
    s = C.PruneSchedule(0.0, 0.8, 100, 3)
    assert C.sparsity_at(s, 0) == 0.0
    assert C.sparsity_at(s, 100) == pytest.approx(0.8)
    assert C.sparsity_at(s, 50) == pytest.approx(0.7)
    assert C.sparsity_at(s, 500) == pytest.approx(0.8)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 0.5), st.floats(0.5, 0.99), st.integers(1, 1000), st.floats(0.5, 5))
def test_sparsity_schedule_monotone(s_i, s_f, t_e, p):
    sched = C.PruneSchedule(s_i, s_f, t_e, p)
    vals = [C.sparsity_at(sched, t) for t in np.linspace(0, t_e, 25)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        C.PruneSchedule(0.5, 0.2)
    with pytest.raises(ValueError):
        C.PruneSchedule(0.0, 1.0)
    with pytest.raises(ValueError):
        C.PruneSchedule(0.0, 0.5, 0)


def test_quantize_unit_range():
    q, qp = C.quantize(np.linspace(-1, 1, 11), 8)
    assert qp.scale == pytest.approx(2 / 255)
    assert qp.scale == pytest.approx(0.0078431, abs=1e-7)
    assert qp.zero_point == 128
    assert q.min() >= 0 and q.max() <= 255


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50), st.sampled_from([4, 8, 16]))
def test_quantization_error_bound(values, bits):
    r = np.array(values)
    q, qp = C.quantize(r, bits)
    assert np.all((q >= 0) & (q <= 2 ** bits - 1))
    err = np.abs(C.dequantize(q, qp) - r)
    assert err.max() <= qp.scale / 2 + 1e-12 * max(1.0, np.abs(r).max())


def test_quantize_constant_tensor():
    q, qp = C.quantize(np.zeros(5), 8)
    assert qp.scale == 1.0 and qp.zero_point == 0
    assert np.all(q == q[0])
    assert np.all(C.dequantize(q, qp) == 0)


def test_quantize_bits_checked():
    with pytest.raises(ValueError):
        C.quantize(np.arange(3.0), 7)


def test_compression_ratio_values():
    assert C.compression_ratio(0.5, 8) == 8.0
    assert C.compression_ratio(0.0, 32) == 1.0
    assert C.REFERENCE_SIZES[0] / C.REFERENCE_SIZES[1] == pytest.approx(9.87, abs=0.005)


def test_prune_zero_target_is_identity():
    m = init_model(seed=2)
    c = C.prune(m, 0.0)
    for k in m.params:
        assert np.array_equal(c.base.params[k], m.params[k])


def test_prune_small_example():
    m = init_model(seed=0)
    for k in WEIGHT_NAMES:
        m.params[k][:] = 1.0
    m.params["dense2_w"].flat[:4] = [0.1, -0.5, 0.3, -0.05]
    n = weights_of(m).size
    # prune exactly the two smallest magnitudes among all weights
    c = C.prune(m, 2 / n + 1e-12)
    assert list(c.base.params["dense2_w"].flat[:4]) == [0.0, -0.5, 0.3, 0.0]
    assert c.n_zero == 2


def test_prune_matches_sort_oracle():
    m = init_model(seed=5)
    w = weights_of(m)
    n = w.size
    c = C.prune(m, 0.9)
    theta = np.sort(np.abs(w))[int(np.floor(0.9 * n))]
    assert abs(c.n_zero - math.floor(0.9 * n)) <= 1
    kept = weights_of(c.base)
    assert np.all(np.abs(kept[kept != 0]) >= theta)
    assert c.threshold == theta
    # biases untouched
    assert np.array_equal(c.base.params["dense1_b"], m.params["dense1_b"])


def test_prune_is_idempotent():
    m = init_model(seed=8)
    once = C.prune(m, 0.7)
    twice = C.prune(once, 0.7)
    for k in m.params:
        assert np.array_equal(once.base.params[k], twice.base.params[k])


def test_prune_does_not_mutate_input():
    m = init_model(seed=1)
    before = weights_of(m).copy()
    C.prune(m, 0.5)
    assert np.array_equal(weights_of(m), before)


def test_quantized_model_keeps_masks_and_bound():
    m = init_model(seed=3)
    m.params["dense1_b"][:] = np.linspace(-0.1, 0.1, 16)
    c = C.compress(m, 0.9, 8)
    model = c.to_model()
    for k in WEIGHT_NAMES:
        assert np.all(model.params[k][~c.masks[k]] == 0)
    for err, half_scale in C.dequantization_errors(c).values():
        assert err <= half_scale + 1e-12


def test_compact_roundtrip(tmp_path):
    m = init_model(seed=4)
    c = C.compress(m, 0.8, 8)
    path = tmp_path / "compact.json"
    C.save_compact(c, path)
    back = C.load_compact(path)
    for k in c.q:
        assert np.array_equal(back.q[k], c.q[k])
        assert back.quant[k] == c.quant[k]
    for k in c.masks:
        assert np.array_equal(back.masks[k], c.masks[k])
    x = np.random.default_rng(0).exponential(size=(100, 3))
    assert np.array_equal(forward(back.to_model(), x), forward(c.to_model(), x))


def test_size_report():
    m = init_model(seed=0)
    rep = C.size_report(C.compress(m, 0.5, 8))
    assert rep["float_bytes"] == 4 * m.n_params
    assert rep["formula_ratio"] == 8.0
    assert rep["compact_bytes"] < rep["float_bytes"]
    assert rep["reference_ratio"] == pytest.approx(141837 / 14375)


def test_prune_during_training_reaches_final_sparsity():
    rng = np.random.default_rng(0)
    n = 64
    y = rng.integers(0, 2, n)
    ds = WindowDataset(rng.exponential(size=(n, 100, 3)) * np.where(y, 5.0, 1.0)[:, None, None],
                       y, np.zeros(n), np.ones(n))
    sched = C.PruneSchedule(0.0, 0.8, t_e=8, p_exp=3)
    compact, hist = C.prune_during_training(init_model(seed=0), ds, sched, epochs=4,
                                            batch_size=16, frequency=2)
    assert len(hist["loss"]) == 4
    assert abs(compact.n_zero - math.floor(0.8 * compact.n_weights)) <= 1

"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL`` line that is printed in the
terminal summary. The synthetic-detection criteria share one trained model
produced by a full experiment run on ``configs/acceptance.json``.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from groundedge import compress as C
from groundedge import nn
from groundedge.config import load_config
from groundedge.evaluation import run_experiment
from groundedge.physics import CfarConfig, cfar_alpha, estimate_disturbance, fr_cfar
from groundedge.pipeline import (ROLE_TEST, build_dataset, flight_seed, process_record,
                                 simulate_flight, train_model, training_flights)
from groundedge.simulator import (DroneParams, GroundEffectModel, MissionConfig, Scene, Segment,
                                  SensorNoise, fly_mission)
from groundedge.spectral import cross_spectrum, stft
from scipy.signal import windows

CONFIG_PATH = Path(__file__).resolve().parents[1] / "configs" / "acceptance.json"

pytestmark = pytest.mark.slow


def record(n: int, ok: bool, detail: str, elapsed: float, budget: float) -> bool:
    in_time = elapsed < budget
    status = "PASS" if ok and in_time else "FAIL"
    ACCEPTANCE_LINES.append(f"criterion {n}: {status}  {detail}  [{elapsed:.1f} s / {budget:g} s]")
    return ok and in_time


@pytest.fixture(scope="session")
def config():
    return load_config(CONFIG_PATH)


@pytest.fixture(scope="session")
def experiment(config, tmp_path_factory):
    out = tmp_path_factory.mktemp("eval_a")
    t0 = time.perf_counter()
    result = run_experiment(config, out_dir=str(out))
    return result, out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def test_windows(config):
    flights = [process_record(simulate_flight(config, flight_seed(config.seed, ROLE_TEST, 0, i)),
                              config) for i in range(config.eval.n_test)]
    return build_dataset(flights, config)


def test_criterion_1_formula_fidelity():
    t0 = time.perf_counter()
    alpha = cfar_alpha(1e-6, 50)
    cr = C.compression_ratio(0.5, 8)
    _, qp = C.quantize(np.linspace(-1, 1, 101), 8)
    ok = (abs(alpha - 15.92) <= 0.01 and cr == 8.0 and abs(qp.scale - 2 / 255) < 1e-15
          and qp.zero_point == 128)
    detail = f"alpha={alpha:.4f} CR={cr} S={qp.scale:.7f} Z={qp.zero_point}"
    assert record(1, ok, detail, time.perf_counter() - t0, 1.0)


def test_criterion_2_cfar_false_alarm_rate():
    t0 = time.perf_counter()
    cfg = CfarConfig(p_fa=1e-2, leading_window=50, guard_cells=15)
    rates = []
    for seed in range(5):
        x = np.random.default_rng(seed).exponential(size=100_000 + cfg.warmup)
        rates.append(fr_cfar(x, cfg)[0][cfg.warmup:].mean())
    ok = all(0.33e-2 <= r <= 3e-2 for r in rates)
    detail = "rates=" + ",".join(f"{r:.5f}" for r in rates)
    assert record(2, ok, detail, time.perf_counter() - t0, 10.0)


def test_criterion_3_disturbance_round_trip():
    t0 = time.perf_counter()
    params = DroneParams()
    steps = [(1.0, 0.02), (2.5, 0.06), (4.0, 0.1), (5.5, 0.04), (7.0, 0.0)]

    def injected(t):
        fz = 0.0
        for start, value in steps:
            if t >= start:
                fz = value
        return np.array([0.0, 0.0, fz])

    mission = MissionConfig(noise=SensorNoise(0.0, 0.0), duration=8.0,
                            ground_effect=GroundEffectModel(kind="none"))
    rec = fly_mission(Scene((Segment(-1.0, 6.0),)), params, mission, seed=0,
                      external_force=injected)
    d = estimate_disturbance(rec, params)
    truth = np.array([injected(t) for t in rec.imu_t])
    rms = float(np.sqrt(np.mean((d.f_w[:, 2] - truth[:, 2]) ** 2)))
    assert record(3, rms <= 1e-3, f"rms_z={rms:.3e} N", time.perf_counter() - t0, 30.0)


def test_criterion_4_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n = 16
    ds = nn.WindowDataset(rng.exponential(size=(n, 100, 3)), rng.integers(0, 2, n),
                          rng.uniform(0, 1, n), np.full(n, 0.5))
    worst = 0.0
    for lam in (0.0, 0.5, 2.0):
        model = nn.init_model(seed=3, lam=lam)
        model.fit_input_scaling(ds.x)
        _, grads = nn.loss_and_grad(model, ds)
        for name in nn.PARAM_NAMES:
            w = model.params[name]
            for j in rng.choice(w.size, min(20, w.size), replace=False):
                idx = np.unravel_index(j, w.shape)
                old = w[idx]
                w[idx] = old + 1e-6
                up = nn.total_loss(model, ds)
                w[idx] = old - 1e-6
                down = nn.total_loss(model, ds)
                w[idx] = old
                fd = (up - down) / 2e-6
                an = grads[name][idx]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    assert record(4, worst <= 1e-4, f"max_rel_err={worst:.2e}", time.perf_counter() - t0, 30.0)


def test_criterion_5_spectral_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    ws, ov = 199, 198
    w = windows.hann(ws, sym=False)
    worst_eq, worst_parseval = 0.0, 0.0
    for _ in range(100):
        x, y = rng.normal(size=(2, 260))
        G_xy = cross_spectrum(x, y, ws, ov)
        G_xx = cross_spectrum(x, x, ws, ov).real
        G_yy = cross_spectrum(y, y, ws, ov).real
        lhs, rhs = np.abs(G_xy) ** 2, G_xx * G_yy
        worst_eq = max(worst_eq, float(np.max(np.abs(lhs - rhs) / np.maximum(rhs, 1e-300))))
        spec = stft(x, ws, ov)
        energy = np.array([np.sum((w * x[k:k + ws]) ** 2) for k in range(spec.frames.shape[0])])
        worst_parseval = max(worst_parseval,
                             float(np.max(np.abs(spec.frames.sum(axis=1) - energy) / energy)))
    ok = worst_eq <= 1e-9 and worst_parseval <= 1e-9
    detail = f"cross_spectrum_rel={worst_eq:.1e} parseval_rel={worst_parseval:.1e}"
    assert record(5, ok, detail, time.perf_counter() - t0, 5.0)


def test_criterion_6_end_to_end_detection(experiment):
    result, _, elapsed = experiment
    pipe = result.pipeline.penalized_mae
    base = result.baseline.penalized_mae
    ok = len(result.pipeline.flights) == 30 and pipe <= 0.10 and pipe <= 0.5 * base
    detail = (f"pipeline_mae={pipe:.4f} m baseline_mae={base:.4f} m "
              f"missed={result.pipeline.n_missed}/30")
    assert record(6, ok, detail, elapsed, 600.0)


def test_criterion_7_height_trend(experiment):
    result, _, _ = experiment
    t0 = time.perf_counter()
    by_height = {c.height: c.pipeline.penalized_mae for c in result.heights}
    maes = [by_height[h] for h in (0.04, 0.09, 0.12)]
    ok = all(b >= a for a, b in zip(maes, maes[1:]))
    detail = "mae(4,9,12 cm)=" + ",".join(f"{m:.4f}" for m in maes)
    # sweep flights are simulated inside the shared experiment run
    assert record(7, ok, detail, time.perf_counter() - t0, 900.0)


def test_criterion_8_compression_tradeoff(experiment, test_windows):
    result, _, _ = experiment
    t0 = time.perf_counter()
    model = result.model
    compact = C.compress(model, 0.9, 8)
    acc_float = nn.accuracy(model, test_windows)
    acc_comp = nn.accuracy(compact.to_model(), test_windows)
    drop = 100 * (acc_float - acc_comp)
    target_zeros = int(np.floor(0.9 * compact.n_weights))
    errs = C.dequantization_errors(compact)
    within = all(e <= s + 1e-12 for e, s in errs.values())
    ok = drop <= 15 and abs(compact.n_zero - target_zeros) <= 1 and within
    detail = (f"acc {acc_float:.3f}->{acc_comp:.3f} drop={drop:.1f} pts "
              f"zeros={compact.n_zero}/{target_zeros} deq_within_S/2={within}")
    assert record(8, ok, detail, time.perf_counter() - t0, 60.0)


def test_criterion_9_df_loss_ablation(config):
    t0 = time.perf_counter()
    dataset = build_dataset(training_flights(config), config)
    epochs = {}
    for lam in (0.5, 0.0):
        _, hist = train_model(dataset, config, lam=lam, target_accuracy=0.95)
        epochs[lam] = nn.epochs_to_accuracy(hist, 0.95)
    ok = epochs[0.5] is not None and (epochs[0.0] is None or epochs[0.5] <= epochs[0.0])
    detail = f"epochs_to_95%: lambda=0.5 -> {epochs[0.5]}, lambda=0 -> {epochs[0.0]}"
    assert record(9, ok, detail, time.perf_counter() - t0, 600.0)


def test_criterion_10_determinism(config, experiment, tmp_path):
    _, first_dir, _ = experiment
    t0 = time.perf_counter()
    run_experiment(config, out_dir=str(tmp_path))
    a = (first_dir / "summary.json").read_bytes()
    b = (tmp_path / "summary.json").read_bytes()
    ok = a == b
    detail = f"summary.json identical={ok} ({len(a)} bytes)"
    assert record(10, ok, detail, time.perf_counter() - t0, 900.0)

"""Detection scoring, the spectral-correlation baseline and experiment reports.

Distance errors are signed so that early detections are positive::

    error = (gt_t - detected_t) * speed
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import BaselineConfig, RunConfig
from .nn import NetworkModel, save_model
from .spectral import stft_complex, _power_scale
from .telemetry import EdgeEvent, write_series_csv


@dataclass(frozen=True)
class MatchedPair:
    detected_t: float
    gt_t: float
    error: float


@dataclass(frozen=True)
class FlightReport:
    """Scored detections of one flight."""

    matched: tuple[MatchedPair, ...]
    false_positives: tuple[float, ...]
    missed: tuple[float, ...]
    speed: float
    flight_id: str = ""

    def abs_errors(self, miss_penalty: float | None = None) -> list[float]:
        errs = [abs(m.error) for m in self.matched]
        if miss_penalty is not None:
            errs += [miss_penalty] * len(self.missed)
        return errs


@dataclass
class DetectionReport:
    """Per-flight reports plus summary statistics.

    ``miss_penalty`` (metres) is charged for every missed edge in the
    penalised MAE; matched-only statistics ignore misses.
    """

    flights: list[FlightReport] = field(default_factory=list)
    miss_penalty: float = 0.5

    def errors(self) -> np.ndarray:
        return np.array([m.error for f in self.flights for m in f.matched])

    def _abs(self, penalised: bool) -> np.ndarray:
        pen = self.miss_penalty if penalised else None
        return np.array([e for f in self.flights for e in f.abs_errors(pen)])

    @property
    def mae(self) -> float:
        a = self._abs(False)
        return float(a.mean()) if len(a) else float("nan")

    @property
    def penalized_mae(self) -> float:
        a = self._abs(True)
        return float(a.mean()) if len(a) else float("nan")

    @property
    def n_missed(self) -> int:
        return sum(len(f.missed) for f in self.flights)

    @property
    def n_false_positives(self) -> int:
        return sum(len(f.false_positives) for f in self.flights)

    def summary(self) -> dict:
        a = self._abs(False)
        stat = (lambda fn: float(fn(a)) if len(a) else None)
        pmae = self.penalized_mae
        return {
            "flights": len(self.flights),
            "matched": int(len(a)),
            "missed": self.n_missed,
            "false_positives": self.n_false_positives,
            "mae_m": stat(np.mean),
            "median_abs_error_m": stat(np.median),
            "max_abs_error_m": stat(np.max),
            "mean_signed_error_m": float(self.errors().mean()) if len(a) else None,
            "penalized_mae_m": None if np.isnan(pmae) else pmae,
        }


def improvement(method: DetectionReport, baseline: DetectionReport,
                penalized: bool = True) -> float:
    """Relative reduction of MAE versus the baseline, in percent."""
    a = method.penalized_mae if penalized else method.mae
    b = baseline.penalized_mae if penalized else baseline.mae
    if not b > 0:
        return 0.0
    return float(100.0 * (b - a) / b)


def match_and_score(detections, ground_truth, speed: float, max_match: float = 1.0,
                    flight_id: str = "") -> FlightReport:
    """Greedy nearest matching of detections to ground-truth edges.

    Candidate pairs within ``max_match`` seconds are taken in order of
    increasing time error; each edge and each detection is used at most once.
    """
    if speed <= 0:
        raise ValueError("speed must be positive")
    det = sorted(float(d) for d in detections)
    gt = sorted(float(e.t if isinstance(e, EdgeEvent) else e) for e in ground_truth)
    pairs = sorted((abs(d - g), j, i) for i, d in enumerate(det) for j, g in enumerate(gt)
                   if abs(d - g) <= max_match)
    used_d, used_g, matched = set(), set(), []
    for _, j, i in pairs:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        matched.append(MatchedPair(det[i], gt[j], (gt[j] - det[i]) * speed))
    matched.sort(key=lambda m: m.gt_t)
    return FlightReport(tuple(matched),
                        tuple(d for i, d in enumerate(det) if i not in used_d),
                        tuple(g for j, g in enumerate(gt) if j not in used_g),
                        speed, flight_id)


# -- baseline ---------------------------------------------------------------

def _moving_average(x: np.ndarray, n: int) -> np.ndarray:
    if n <= 1:
        return x.copy()
    kernel = np.ones(n) / n
    pad = np.pad(x, (n // 2, n - 1 - n // 2), mode="edge")
    return np.convolve(pad, kernel, mode="valid")


def correlation_score(power: np.ndarray, corr_window: int) -> np.ndarray:
    """Sum over channel pairs of the Pearson correlation in a centred window.

    Pairs where either channel is constant inside the window contribute 0.
    """
    n, c = power.shape
    half = corr_window // 2
    score = np.zeros(n)
    if n < corr_window:
        return score
    view = np.lib.stride_tricks.sliding_window_view(power, corr_window, axis=0)
    centred = view - view.mean(axis=-1, keepdims=True)
    sd = np.sqrt((centred ** 2).sum(axis=-1))
    iu, ju = np.triu_indices(c, k=1)
    num = (centred[:, iu] * centred[:, ju]).sum(axis=-1)
    den = sd[:, iu] * sd[:, ju]
    scale = np.maximum(1.0, power.std(axis=0).max())
    ok = den > (1e-12 * scale) ** 2 * corr_window
    r = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    score[half:half + len(r)] = r.sum(axis=1)
    score[:half] = score[half]
    score[half + len(r):] = score[half + len(r) - 1]
    return score


def baseline_detect(source, config: BaselineConfig = BaselineConfig(), t0: float = 0.0) -> list[float]:
    """Edges from inflection points of the summed channel-power correlation.

    Each channel's per-frame total STFT power is correlated pairwise over
    ``corr_window`` frames, the summed correlation is smoothed over
    ``smooth_s`` seconds, and sign changes of its discrete second derivative
    are reported where the slope is at least ``min_slope_frac`` of the
    steepest slope in the record.
    """
    x = np.asarray(source, dtype=float)
    if x.ndim != 2:
        raise ValueError("baseline expects an (n, channels) array")
    X = stft_complex(x.T, config.window_size, config.overlap)
    power = ((X.real ** 2 + X.imag ** 2) * _power_scale(config.window_size)).sum(axis=-1).T
    hop = config.window_size - config.overlap
    times = t0 + (np.arange(power.shape[0]) * hop + (config.window_size - 1) / 2) / config.fs
    score = correlation_score(power, config.corr_window)
    smooth = _moving_average(score, max(1, int(round(config.smooth_s * config.fs / hop))))
    d1 = np.gradient(smooth)
    d2 = np.gradient(d1)
    peak = np.abs(d1).max()
    if not peak > 1e-12:
        return []
    found = []
    for i in range(len(d2) - 1):
        if d2[i] == 0.0 or d2[i] * d2[i + 1] >= 0:
            continue
        # linear interpolation of the zero crossing
        frac = d2[i] / (d2[i] - d2[i + 1])
        slope = d1[i] + frac * (d1[i + 1] - d1[i])
        if abs(slope) >= config.min_slope_frac * peak:
            found.append(float(times[i] + frac * (times[i + 1] - times[i])))
    return found


# -- experiment -------------------------------------------------------------

@dataclass
class ConditionResult:
    name: str
    height: float
    angle_deg: float
    pipeline: DetectionReport
    baseline: DetectionReport


@dataclass
class ExperimentResult:
    main: ConditionResult
    heights: list[ConditionResult]
    angles: list[ConditionResult]
    model: NetworkModel
    history: dict
    summary: dict

    @property
    def pipeline(self) -> DetectionReport:
        return self.main.pipeline

    @property
    def baseline(self) -> DetectionReport:
        return self.main.baseline


def _round(x, nd=9):
    if isinstance(x, float):
        return float(f"{x:.{nd}g}")
    if isinstance(x, dict):
        return {k: _round(v, nd) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v, nd) for v in x]
    return x


def _condition_summary(c: ConditionResult) -> dict:
    return {"height_m": c.height, "angle_deg": c.angle_deg,
            "pipeline": c.pipeline.summary(), "baseline": c.baseline.summary(),
            "improvement_pct": improvement(c.pipeline, c.baseline)}


def cdf_points(abs_errors) -> tuple[np.ndarray, np.ndarray]:
    e = np.sort(np.asarray(abs_errors, float))
    return e, np.arange(1, len(e) + 1) / max(len(e), 1)


def run_condition(name: str, config: RunConfig, model: NetworkModel, detector, n: int,
                  condition: int, height: float, angle: float,
                  out_dir: str | None = None) -> ConditionResult:
    """Simulate ``n`` test flights for one height/angle and score both methods."""
    from .pipeline import ROLE_TEST, flight_seed, process_record, simulate_flight

    penalty = config.eval.max_match * config.flight.speed
    pipe = DetectionReport(miss_penalty=penalty)
    base = DetectionReport(miss_penalty=penalty)
    for i in range(n):
        seed = flight_seed(config.seed, ROLE_TEST, condition, i)
        flight = process_record(simulate_flight(config, seed, height=height, angle_deg=angle),
                                config)
        fid = f"{name}_{i:03d}"
        speed = flight.record.speed
        p = match_and_score(detector(model, flight), flight.record.ground_truth, speed,
                            config.eval.max_match, fid)
        b = match_and_score(baseline_detect(flight.source, config.eval.baseline,
                                            float(flight.record.imu_t[0])),
                            flight.record.ground_truth, speed, config.eval.max_match, fid)
        pipe.flights.append(p)
        base.flights.append(b)
        if out_dir is not None:
            _write_flight_csv(os.path.join(out_dir, "flights", f"{fid}.csv"), p, b)
    return ConditionResult(name, height, angle, pipe, base)


def _write_flight_csv(path: str, pipe: FlightReport, base: FlightReport) -> None:
    method, status, gt_t, det_t, err = [], [], [], [], []
    for label, rep in (("pipeline", pipe), ("baseline", base)):
        for m in rep.matched:
            method.append(label), status.append("matched")
            gt_t.append(m.gt_t), det_t.append(m.detected_t), err.append(m.error)
        for d in rep.false_positives:
            method.append(label), status.append("false_positive")
            gt_t.append(""), det_t.append(d), err.append("")
        for g in rep.missed:
            method.append(label), status.append("missed")
            gt_t.append(g), det_t.append(""), err.append("")
    write_series_csv(path, ("method", "status", "gt_t", "detected_t", "error_m"),
                     [method, status, gt_t, det_t, err])


def run_experiment(config: RunConfig, out_dir: str | None = None,
                   model: NetworkModel | None = None, detector=None,
                   sweeps: bool = True) -> ExperimentResult:
    """Train (unless ``model`` is given) and compare pipeline and baseline.

    The main condition uses ``eval.n_test`` flights at the configured
    height and angle 0. Height and angle sweeps use ``eval.n_sweep`` flights
    per setting. With ``out_dir`` the run writes per-flight CSVs,
    ``summary.json``, plot-data CSVs and the trained model.
    """
    from .pipeline import build_dataset, pipeline_detect, train_model, training_flights

    history: dict = {}
    if model is None:
        model, history = train_model(build_dataset(training_flights(config), config), config)
    detector = detector or (lambda m, f: pipeline_detect(m, f, config))
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "flights"), exist_ok=True)

    ev = config.eval
    h0 = config.flight.height
    main = run_condition("main", config, model, detector, ev.n_test, 0, h0, 0.0, out_dir)
    heights, angles = [], []
    if sweeps and ev.n_sweep > 0:
        for k, h in enumerate(ev.heights):
            heights.append(main if h == h0 and ev.n_sweep <= ev.n_test else run_condition(
                f"height_{int(round(h * 100))}cm", config, model, detector, ev.n_sweep,
                100 + k, h, 0.0, out_dir))
        for k, a in enumerate(ev.angles):
            angles.append(main if a == 0.0 else run_condition(
                f"angle_{a:+g}deg", config, model, detector, ev.n_sweep, 200 + k, h0, a, out_dir))

    summary = _round({
        "seed": config.seed,
        "main": _condition_summary(main),
        "height_sweep": [_condition_summary(c) for c in heights],
        "angle_sweep": [_condition_summary(c) for c in angles],
        "training": {"epochs": len(history.get("loss", [])),
                     "final_loss": history["loss"][-1] if history.get("loss") else None,
                     "final_accuracy": history["accuracy"][-1] if history.get("accuracy") else None},
    })
    result = ExperimentResult(main, heights, angles, model, history, summary)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: ExperimentResult, out_dir: str) -> None:
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_model(result.model, os.path.join(out_dir, "model.json"))
    for fname, conds, key in (("error_vs_height.csv", result.heights, "height_m"),
                              ("error_vs_angle.csv", result.angles, "angle_deg")):
        cols = [[], [], [], [], []]
        for c in conds:
            for label, rep in (("pipeline", c.pipeline), ("baseline", c.baseline)):
                cols[0].append(c.height if key == "height_m" else c.angle_deg)
                cols[1].append(label)
                cols[2].append(rep.mae)
                cols[3].append(rep.penalized_mae)
                cols[4].append(rep.n_missed)
        write_series_csv(os.path.join(out_dir, fname),
                         (key, "method", "mae_m", "penalized_mae_m", "missed"), cols)
    cols = [[], [], []]
    for label, rep in (("pipeline", result.pipeline), ("baseline", result.baseline)):
        e, p = cdf_points(rep._abs(True))
        cols[0] += [label] * len(e)
        cols[1] += e.tolist()
        cols[2] += p.tolist()
    write_series_csv(os.path.join(out_dir, "cdf.csv"), ("method", "abs_error_m", "cdf"), cols)

"""Disturbance-force estimation and the causal CFAR alert filter.

The disturbance force is what is left of Newton's second law once gravity
and rotor thrust are removed::

    f_w = m a - m g - R f_u,   f_u = (0, 0, thrust)

With an accelerometer that measures specific force ``s = R^T (a - g)`` this
reduces to ``f_w = R (m s - f_u)``. The attitude ``R`` is dead-reckoned from
the gyro. Its magnitude is screened by a cell-averaging CFAR that uses only
a leading (past) window, so an alert at sample ``i`` depends on samples up
to ``i`` only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .simulator import DroneParams, mixer_matrix, orthonormalize, pwm_to_actuation, so3_exp
from .telemetry import FlightRecord, TelemetryError


@dataclass(frozen=True)
class CfarConfig:
    p_fa: float = 1e-6
    leading_window: int = 50
    guard_cells: int = 15

    def __post_init__(self):
        if not 0 < self.p_fa < 1:
            raise ValueError("p_fa must lie in (0, 1)")
        if self.leading_window < 1 or self.guard_cells < 0:
            raise ValueError("leading_window >= 1 and guard_cells >= 0 required")

    @property
    def warmup(self) -> int:
        return self.leading_window + self.guard_cells


@dataclass(frozen=True)
class DisturbanceSeries:
    """Per-sample disturbance force with CFAR screening.

    ``threshold`` is ``inf`` during the warm-up samples where no leading
    window exists yet.
    """

    t: np.ndarray
    f_w: np.ndarray
    magnitude: np.ndarray
    alert: np.ndarray
    threshold: np.ndarray

    @property
    def alert_times(self) -> np.ndarray:
        return self.t[self.alert]


def cfar_alpha(p_fa: float, n: int) -> float:
    """Threshold factor ``N * (P_FA**(-1/N) - 1)``."""
    return n * (p_fa ** (-1.0 / n) - 1.0)


def fr_cfar(x, config: CfarConfig = CfarConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Leading-window cell-averaging CFAR.

    For each cell ``i >= N + G`` the noise level is the mean of
    ``x[i-G-N : i-G]`` and the cell alerts when ``x[i]`` is strictly above
    ``alpha`` times that mean.

    Returns
    -------
    alerts : bool array
    thresholds : float array (``inf`` for the first ``N + G`` cells)
    """
    x = np.asarray(x, dtype=float)
    n, g = config.leading_window, config.guard_cells
    if x.ndim != 1 or len(x) <= n + g:
        raise ValueError(f"series needs more than {n + g} samples for CFAR")
    alpha = cfar_alpha(config.p_fa, n)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(n + g, len(x))
    z_leading = (csum[i - g] - csum[i - g - n]) / n
    thresholds = np.full(len(x), np.inf)
    thresholds[n + g:] = alpha * z_leading
    alerts = x > thresholds
    return alerts, thresholds


def integrate_attitude(t: np.ndarray, gyro: np.ndarray, R0=None,
                       reanchor: np.ndarray | None = None) -> np.ndarray:
    """Dead-reckon ``R`` from body rates with ``dR/dt = R M(omega)``.

    Uses the mean of consecutive gyro samples over each interval and
    re-orthonormalises every step. Where ``reanchor`` is true the attitude
    is reset to level with its current heading kept.
    """
    n = len(t)
    Rs = np.empty((n, 3, 3))
    R = np.eye(3) if R0 is None else np.array(R0, dtype=float)
    Rs[0] = R
    for k in range(1, n):
        dt = t[k] - t[k - 1]
        R = orthonormalize(R @ so3_exp(0.5 * (gyro[k - 1] + gyro[k]) * dt))
        if reanchor is not None and reanchor[k]:
            yaw = math.atan2(R[1, 0], R[0, 0])
            c, s = math.cos(yaw), math.sin(yaw)
            R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        Rs[k] = R
    return Rs


def hover_mask(record: FlightRecord, params: DroneParams, gyro_tol: float = 0.02,
               acc_tol: float = 0.05, hold: int = 50) -> np.ndarray:
    """Samples inside a run of ``hold`` quiet samples (low rates, level thrust)."""
    quiet = (np.linalg.norm(record.gyro, axis=1) < gyro_tol) & (
        np.abs(np.linalg.norm(record.acc, axis=1) - params.g) < acc_tol * params.g)
    run = np.convolve(quiet.astype(int), np.ones(hold, int), mode="full")[:len(quiet)]
    return run >= hold


def estimate_disturbance(record: FlightRecord, params: DroneParams | None,
                         cfar: CfarConfig = CfarConfig(),
                         reanchor_hover: bool = False) -> DisturbanceSeries:
    """Per-sample disturbance force from IMU and PWM telemetry.

    Parameters
    ----------
    record : FlightRecord
        Aligned record; accelerometer in specific-force convention.
    params : DroneParams
        Mass, thrust coefficients and PWM map of the vehicle.
    cfar : CfarConfig
        Settings for the alert screen over ``|f_w|``.
    reanchor_hover : bool
        Reset the dead-reckoned attitude to level during detected hover.
    """
    if params is None:
        raise ValueError("estimate_disturbance needs drone parameters")
    if not record.is_aligned:
        raise TelemetryError("estimate_disturbance requires an aligned record")
    u = pwm_to_actuation(record.pwm, params)
    thrust = u @ mixer_matrix(params)[0]
    anchor = hover_mask(record, params) if reanchor_hover else None
    Rs = integrate_attitude(record.imu_t, record.gyro, reanchor=anchor)
    body = params.mass * record.acc
    body[:, 2] -= thrust
    f_w = np.einsum("kij,kj->ki", Rs, body)
    mag = np.linalg.norm(f_w, axis=1)
    alerts, thresholds = fr_cfar(mag, cfar)
    return DisturbanceSeries(record.imu_t.copy(), f_w, mag, alerts, thresholds)


def label_threshold(disturbance: DisturbanceSeries, config: CfarConfig = CfarConfig()) -> np.ndarray:
    """CFAR threshold trace over ``|f_w|`` for the training loss."""
    return fr_cfar(disturbance.magnitude, config)[1]


def gate_detections(transitions, alerts: DisturbanceSeries, window: float = 0.25) -> list[float]:
    """Keep transitions that have a CFAR alert within ``+-window`` seconds."""
    alert_t = np.sort(alerts.alert_times)
    kept = []
    for tr in transitions:
        j = np.searchsorted(alert_t, tr - window, side="left")
        if j < len(alert_t) and alert_t[j] <= tr + window:
            kept.append(float(tr))
    return kept

"""Quadrotor rigid-body simulator with a parametric ground-effect disturbance.

The vehicle is integrated with semi-implicit Euler at 1 kHz under a
cascaded controller (position/velocity P loops, altitude PID, geometric PD
attitude loop). Telemetry is decimated to 100 Hz. The accelerometer reports
specific force in the body frame, so a level vehicle at rest reads
``(0, 0, +g)``.

Rotor layout (plus configuration): rotor 1 on +x, 2 on +y, 3 on -x, 4 on -y;
rotors 1 and 3 spin so that their reaction torque is negative about z.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit
from scipy import signal

from .telemetry import DEFAULT_PWM_MAX, EdgeEvent, FlightRecord

SIM_DT = 1e-3
TELEMETRY_FS = 100.0


class SimulationFault(RuntimeError):
    """Raised when the vehicle leaves the valid state envelope."""


@dataclass(frozen=True)
class DroneParams:
    """Physical constants of the vehicle (defaults: 35.6 g nano quadrotor).

    ``k_t`` and ``c_q`` map actuation ``u_i`` (squared rotor speed,
    (rad/s)^2) to thrust in N and reaction torque in N*m.
    """

    mass: float = 0.0356
    g: float = 9.81
    k_t: float = 2.88e-8
    l_r: float = 0.046
    c_q: float = 7.24e-10
    inertia: tuple[float, float, float] = (1.657e-5, 1.666e-5, 2.926e-5)
    propeller_radius: float = 0.0231
    pwm_max: float = DEFAULT_PWM_MAX
    hover_pwm_fraction: float = 0.6

    def __post_init__(self):
        scalars = (self.mass, self.g, self.k_t, self.l_r, self.c_q, self.propeller_radius,
                   self.pwm_max)
        if any(not (v > 0) for v in scalars) or any(not (v > 0) for v in self.inertia):
            raise ValueError("drone parameters must be positive")
        if not 0 < self.hover_pwm_fraction < 1:
            raise ValueError("hover_pwm_fraction must lie in (0, 1)")

    @property
    def J(self) -> np.ndarray:
        return np.diag(self.inertia)

    @property
    def u_scale(self) -> float:
        """Actuation at full PWM, chosen so hover PWM balances gravity."""
        return self.mass * self.g / (4 * self.k_t * self.hover_pwm_fraction ** 2)

    @property
    def u_max(self) -> float:
        return self.u_scale

    @staticmethod
    def thrust_coefficient(c_t: float, rho: float, d: float) -> float:
        """``k_T = C_T * rho * D**4``."""
        return c_t * rho * d ** 4

    @classmethod
    def from_dict(cls, d: dict) -> "DroneParams":
        d = dict(d)
        if "inertia" in d:
            d["inertia"] = tuple(d["inertia"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["inertia"] = list(self.inertia)
        return out


@dataclass(frozen=True)
class QuadrotorState:
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    omega: np.ndarray

    @classmethod
    def level(cls, p=(0.0, 0.0, 0.0), v=(0.0, 0.0, 0.0)) -> "QuadrotorState":
        return cls(np.array(p, float), np.array(v, float), np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class Segment:
    x_start: float
    x_end: float
    surface_height: float = 0.0
    material_gain: float = 1.0


@dataclass(frozen=True)
class Scene:
    """Piecewise surface along the world x axis."""

    segments: tuple[Segment, ...]

    def __post_init__(self):
        segs = tuple(s if isinstance(s, Segment) else Segment(**s) for s in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("scene needs at least one segment")
        for s in segs:
            if s.x_end <= s.x_start:
                raise ValueError("segment with non-positive length")
            if s.material_gain < 0:
                raise ValueError("material_gain must be >= 0")
        for a, b in zip(segs, segs[1:]):
            if not math.isclose(a.x_end, b.x_start, abs_tol=1e-12):
                raise ValueError("segments must be contiguous and non-overlapping")

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(tuple(Segment(**s) for s in d["segments"]))

    def to_dict(self) -> dict:
        return {"segments": [asdict(s) for s in self.segments]}

    @property
    def x_range(self) -> tuple[float, float]:
        return self.segments[0].x_start, self.segments[-1].x_end

    @property
    def max_height(self) -> float:
        return max(s.surface_height for s in self.segments)

    def segment_at(self, x: float) -> Segment:
        lo, hi = self.x_range
        if not lo <= x <= hi:
            raise SimulationFault(f"x={x:.3f} m outside scene range [{lo}, {hi}]")
        for s in self.segments:
            if x < s.x_end:
                return s
        return self.segments[-1]

    def boundaries(self) -> list[tuple[float, str]]:
        """Boundary positions with their edge kind."""
        out = []
        for a, b in zip(self.segments, self.segments[1:]):
            kind = "height" if a.surface_height != b.surface_height else "material"
            out.append((a.x_end, kind))
        return out


@dataclass(frozen=True)
class GroundEffectModel:
    """Ground-effect disturbance settings.

    ``jitter_ratio`` scales a 6-8 Hz band-limited random force whose
    standard deviation per axis is ``jitter_ratio`` times the mean lift
    increment (lateral axes further scaled by ``lateral_ratio``). The
    oscillation therefore grows and vanishes with the ground effect itself.
    """

    kind: str = "cheeseman_bennett"
    jitter_ratio: float = 8.0
    lateral_ratio: float = 0.5
    jitter_band: tuple[float, float] = (6.0, 8.0)
    r_offset: tuple[float, float, float] = (0.01, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("none", "cheeseman_bennett"):
            raise ValueError(f"unknown ground effect model {self.kind!r}")
        if self.jitter_ratio < 0 or self.lateral_ratio < 0:
            raise ValueError("jitter gains must be >= 0")


@dataclass(frozen=True)
class ControllerConfig:
    kp_pos: float = 4.0
    kp_vel: float = 4.0
    kp_z: float = 25.0
    ki_z: float = 10.0
    kd_z: float = 10.0
    kp_att: float = 400.0
    kd_att: float = 28.0
    max_tilt: float = 0.35


@dataclass(frozen=True)
class SensorNoise:
    acc_std: float = 0.05
    gyro_std: float = 0.01


@dataclass(frozen=True)
class MissionConfig:
    """Straight, level pass across the scene."""

    speed: float = 0.5
    height: float = 0.04
    duration: float = 8.0
    start_x: float = 0.0
    angle_deg: float = 0.0
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    noise: SensorNoise = field(default_factory=SensorNoise)
    ground_effect: GroundEffectModel = field(default_factory=GroundEffectModel)


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@njit(cache=True)
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


@njit(cache=True)
def so3_exp(w):
    """Rodrigues' formula for ``expm(skew(w))``."""
    th = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    K2 = K @ K
    if th < 1e-9:
        return np.eye(3) + K + 0.5 * K2
    return np.eye(3) + (math.sin(th) / th) * K + ((1.0 - math.cos(th)) / (th * th)) * K2


@njit(cache=True)
def orthonormalize(R):
    """One Newton step towards the nearest rotation (polar factor)."""
    return R @ (1.5 * np.eye(3) - 0.5 * (R.T @ R))


@njit(cache=True)
def _step(p, v, R, w, u, f_w, tau_w, mass, g, inertia, H0, dt):
    wrench = H0 @ u
    a = (R[:, 2] * wrench[0] + f_w) / mass
    a[2] -= g
    rhs = _cross(inertia * w, w) + wrench[1:] + tau_w
    v2 = v + dt * a
    p2 = p + dt * v2
    w2 = w + dt * (rhs / inertia)
    R2 = orthonormalize(R @ so3_exp(w2 * dt))
    return p2, v2, R2, w2


@njit(cache=True)
def _ge_lift(height, thrust, prop_radius, gain):
    z = max(height, prop_radius / 2.0)
    ratio = (prop_radius / (4.0 * z)) ** 2
    return thrust * (1.0 / (1.0 - ratio) - 1.0) * gain


@njit(cache=True)
def _control(p, v, R, w, p_ref, v_ref, z_int, gains, mass, g, inertia, Minv, u_max, dt):
    kp_pos, kp_vel, kp_z, ki_z, kd_z, kp_att, kd_att, max_tilt = (
        gains[0], gains[1], gains[2], gains[3], gains[4], gains[5], gains[6], gains[7])
    e_p = p_ref - p
    z_int[0] += e_p[2] * dt
    a_des = np.empty(3)
    a_des[0] = kp_vel * (v_ref[0] + kp_pos * e_p[0] - v[0])
    a_des[1] = kp_vel * (v_ref[1] + kp_pos * e_p[1] - v[1])
    a_des[2] = g + kp_z * e_p[2] + ki_z * z_int[0] + kd_z * (v_ref[2] - v[2])
    tilt_lim = math.tan(max_tilt) * a_des[2]
    horiz = math.sqrt(a_des[0] ** 2 + a_des[1] ** 2)
    if tilt_lim > 0.0 and horiz > tilt_lim:
        a_des[0] *= tilt_lim / horiz
        a_des[1] *= tilt_lim / horiz
    b3 = a_des / math.sqrt(a_des[0] ** 2 + a_des[1] ** 2 + a_des[2] ** 2)
    b2 = _cross(b3, np.array([1.0, 0.0, 0.0]))
    b2 /= math.sqrt(b2[0] ** 2 + b2[1] ** 2 + b2[2] ** 2)
    R_d = np.empty((3, 3))
    R_d[:, 0] = _cross(b2, b3)
    R_d[:, 1] = b2
    R_d[:, 2] = b3
    E = R_d.T @ R - R.T @ R_d
    e_R = 0.5 * np.array([E[2, 1], E[0, 2], E[1, 0]])
    tau = inertia * (-kp_att * e_R - kd_att * w) + _cross(w, inertia * w)
    thrust = mass * (a_des[0] * R[0, 2] + a_des[1] * R[1, 2] + a_des[2] * R[2, 2])
    phi = np.array([thrust, tau[0], tau[1], tau[2]])
    u = Minv @ phi
    for i in range(4):
        u[i] = min(max(u[i], 0.0), u_max)
    return u


@njit(cache=True)
def _mission_loop(n_steps, steps_per_sample, p0, v_ref, phys, inertia, H0, Minv, gains,
                  seg_x, seg_h, seg_gain, ge_on, jitter_ratio, lateral_ratio, r_offset,
                  jitter, f_ext, z_int0, dt):
    mass, g, prop_radius, u_max, u_scale, pwm_max = (
        phys[0], phys[1], phys[2], phys[3], phys[4], phys[5])
    n_samples = n_steps // steps_per_sample
    acc = np.empty((n_samples, 3))
    gyro = np.empty((n_samples, 3))
    pwm = np.empty((n_samples, 4))
    p = p0.copy()
    v = v_ref.copy()
    R = np.eye(3)
    w = np.zeros(3)
    z_int = np.array([z_int0])
    n_seg = seg_h.shape[0]
    for k in range(n_steps):
        t = k * dt
        p_ref = p0 + v_ref * t
        u = _control(p, v, R, w, p_ref, v_ref, z_int, gains, mass, g, inertia, Minv, u_max, dt)
        thrust = H0[0, 0] * u[0] + H0[0, 1] * u[1] + H0[0, 2] * u[2] + H0[0, 3] * u[3]
        f_w = f_ext[k].copy()
        if ge_on:
            if p[0] < seg_x[0] or p[0] > seg_x[n_seg]:
                return acc, gyro, pwm, k, 1
            j = 0
            while j < n_seg - 1 and p[0] >= seg_x[j + 1]:
                j += 1
            z = p[2] - seg_h[j]
            if z <= 0.0:
                return acc, gyro, pwm, k, 2
            lift = _ge_lift(z, thrust, prop_radius, seg_gain[j])
            amp = jitter_ratio * lift
            f_w[0] += amp * lateral_ratio * jitter[k, 0]
            f_w[1] += amp * lateral_ratio * jitter[k, 1]
            f_w[2] += lift + amp * jitter[k, 2]
        tau_w = _cross(r_offset, f_w)
        if k % steps_per_sample == 0:
            i = k // steps_per_sample
            fb = R.T @ f_w
            acc[i, 0] = fb[0] / mass
            acc[i, 1] = fb[1] / mass
            acc[i, 2] = (thrust + fb[2]) / mass
            gyro[i] = w
            for m in range(4):
                pwm[i, m] = pwm_max * math.sqrt(u[m] / u_scale)
        p, v, R, w = _step(p, v, R, w, u, f_w, tau_w, mass, g, inertia, H0, dt)
        err = math.sqrt(((p - p_ref) ** 2).sum())
        if err > 1.0 or math.sqrt((w ** 2).sum()) > 50.0 or not np.isfinite(err):
            return acc, gyro, pwm, k, 3
    return acc, gyro, pwm, n_steps, 0


def mixer_matrix(params: DroneParams) -> np.ndarray:
    kt, kl, cq = params.k_t, params.k_t * params.l_r, params.c_q
    return np.array([
        [kt, kt, kt, kt],
        [0.0, kl, 0.0, -kl],
        [-kl, 0.0, kl, 0.0],
        [-cq, cq, -cq, cq],
    ])


def mixer(u, params: DroneParams) -> np.ndarray:
    """Wrench ``[thrust, tau_x, tau_y, tau_z]`` produced by actuation ``u``."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("actuation must be non-negative")
    return mixer_matrix(params) @ u


def pwm_to_actuation(pwm, params: DroneParams) -> np.ndarray:
    """Quadratic PWM map: ``u_i = (m_i / pwm_max)**2 * u_scale``."""
    return (np.asarray(pwm, dtype=float) / params.pwm_max) ** 2 * params.u_scale


def actuation_to_pwm(u, params: DroneParams) -> np.ndarray:
    return params.pwm_max * np.sqrt(np.asarray(u, dtype=float) / params.u_scale)


def step_dynamics(state: QuadrotorState, u, f_w, tau_w, params: DroneParams,
                  dt: float = SIM_DT) -> QuadrotorState:
    """Advance the rigid body one semi-implicit Euler step.

    Velocity and angular rate are updated first; position and attitude use
    the updated values. The attitude is re-orthonormalised every step.
    """
    if not 0 < dt <= 0.02:
        raise ValueError("dt must lie in (0, 0.02]")
    arrays = [np.asarray(a, dtype=float) for a in
              (state.p, state.v, state.R, state.omega, u, f_w, tau_w)]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise SimulationFault("non-finite input to step_dynamics")
    p, v, R, w = _step(*arrays, params.mass, params.g, np.asarray(params.inertia, float),
                       mixer_matrix(params), dt)
    return QuadrotorState(p, v, R, w)


def ground_effect_lift(height: float, thrust: float, propeller_radius: float,
                       gain: float = 1.0) -> float:
    """Mean extra lift from the in-ground-effect thrust ratio.

    ``thrust * (1 / (1 - (R / 4z)**2) - 1) * gain`` with ``z`` clamped to at
    least half a propeller radius.
    """
    if height <= 0:
        raise SimulationFault(f"vehicle below surface (z={height:.4f} m)")
    return float(_ge_lift(height, thrust, propeller_radius, gain))


def ground_effect(state: QuadrotorState, scene: Scene, thrust: float,
                  model: GroundEffectModel, params: DroneParams,
                  jitter=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Disturbance force and torque at ``state``.

    ``jitter`` is a unit-variance band-limited noise sample (one value per
    axis) supplied by the caller; pass zeros for the mean effect only.
    """
    if model.kind == "none":
        return np.zeros(3), np.zeros(3)
    seg = scene.segment_at(float(state.p[0]))
    z = float(state.p[2]) - seg.surface_height
    lift = ground_effect_lift(z, thrust, params.propeller_radius, seg.material_gain)
    amp = model.jitter_ratio * lift
    jx, jy, jz = jitter
    f_w = np.array([amp * model.lateral_ratio * jx, amp * model.lateral_ratio * jy,
                    lift + amp * jz])
    tau_w = np.cross(np.asarray(model.r_offset, dtype=float), f_w)
    return f_w, tau_w


def band_limited_noise(rng: np.random.Generator, n: int, band: tuple[float, float],
                       fs: float = 1.0 / SIM_DT, channels: int = 3) -> np.ndarray:
    """White noise through a 2nd-order Butterworth band-pass, unit variance.

    A two-second lead-in is generated and discarded so the filter starts in
    steady state.
    """
    lead = int(2 * fs)
    sos = signal.butter(1, band, btype="bandpass", fs=fs, output="sos")
    white = rng.standard_normal((n + lead, channels))
    out = signal.sosfilt(sos, white, axis=0)[lead:]
    impulse = signal.sosfilt(sos, np.r_[1.0, np.zeros(int(20 * fs))])
    return out / math.sqrt(float(np.sum(impulse ** 2)))


def _gains(cfg: ControllerConfig) -> np.ndarray:
    return np.array([cfg.kp_pos, cfg.kp_vel, cfg.kp_z, cfg.ki_z, cfg.kd_z, cfg.kp_att,
                     cfg.kd_att, cfg.max_tilt])


def control(state: QuadrotorState, p_ref, v_ref, z_int: np.ndarray, params: DroneParams,
            cfg: ControllerConfig, dt: float = SIM_DT) -> np.ndarray:
    """One controller update; returns clamped actuation ``u``.

    ``z_int`` is a length-1 array holding the altitude integrator and is
    updated in place.
    """
    M = mixer_matrix(params)
    return _control(np.asarray(state.p, float), np.asarray(state.v, float),
                    np.asarray(state.R, float), np.asarray(state.omega, float),
                    np.asarray(p_ref, float), np.asarray(v_ref, float), z_int, _gains(cfg),
                    params.mass, params.g, np.asarray(params.inertia, float),
                    np.linalg.inv(M), params.u_max, dt)


def fly_mission(scene: Scene, params: DroneParams, mission: MissionConfig, seed: int,
                external_force=None) -> FlightRecord:
    """Fly a straight level pass over ``scene`` and record 100 Hz telemetry.

    Parameters
    ----------
    scene : Scene
    params : DroneParams
    mission : MissionConfig
        Speed, height above the highest surface, duration, start position
        and heading angle (0 = perpendicular to the edges), plus controller,
        sensor-noise and ground-effect settings.
    seed : int
        Seeds jitter and sensor noise; the record is a pure function of the
        arguments.
    external_force : callable, optional
        ``f(t) -> (3,)`` extra disturbance force (N) added to the ground
        effect, used for round-trip tests of the disturbance estimator.

    Returns
    -------
    FlightRecord
        Aligned record with edge events at every scene boundary crossed.
    """
    if mission.speed <= 0:
        raise ValueError("speed must be positive")
    z_min = params.propeller_radius / 2
    if mission.height <= z_min:
        raise ValueError(f"height must exceed z_min={z_min:.4f} m")
    steps_per_sample = int(round(1.0 / (TELEMETRY_FS * SIM_DT)))
    n_samples = int(round(mission.duration * TELEMETRY_FS))
    n_steps = n_samples * steps_per_sample
    ss = np.random.SeedSequence(seed)
    rng_jitter, rng_sensor = (np.random.default_rng(s) for s in ss.spawn(2))
    ge = mission.ground_effect
    ge_on = ge.kind != "none"
    jitter = (band_limited_noise(rng_jitter, n_steps, ge.jitter_band)
              if ge_on and ge.jitter_ratio > 0 else np.zeros((n_steps, 3)))
    f_ext = np.zeros((n_steps, 3))
    if external_force is not None:
        for k in range(n_steps):
            f_ext[k] = external_force(k * SIM_DT)

    heading = math.radians(mission.angle_deg)
    v_ref = mission.speed * np.array([math.cos(heading), math.sin(heading), 0.0])
    z_ref = scene.max_height + mission.height
    p0 = np.array([mission.start_x, 0.0, z_ref])
    H0 = mixer_matrix(params)
    phys = np.array([params.mass, params.g, params.propeller_radius, params.u_max,
                     params.u_scale, params.pwm_max])
    seg_x = np.array([s.x_start for s in scene.segments] + [scene.segments[-1].x_end])
    acc, gyro, pwm, k, status = _mission_loop(
        n_steps, steps_per_sample, p0, v_ref, phys, np.asarray(params.inertia, float), H0,
        np.linalg.inv(H0), _gains(mission.controller), seg_x,
        np.array([s.surface_height for s in scene.segments]),
        np.array([s.material_gain for s in scene.segments]), ge_on, ge.jitter_ratio,
        ge.lateral_ratio, np.asarray(ge.r_offset, float), jitter, f_ext,
        _hover_integrator(scene, params, mission, p0), SIM_DT)
    if status:
        reason = {1: "left the scene x-range", 2: "went below the surface",
                  3: "controller diverged"}[status]
        raise SimulationFault(f"vehicle {reason} at t={k * SIM_DT:.3f} s")

    acc += rng_sensor.normal(0.0, mission.noise.acc_std, acc.shape)
    gyro += rng_sensor.normal(0.0, mission.noise.gyro_std, gyro.shape)

    t_out = np.arange(n_samples) / TELEMETRY_FS
    events = []
    for xb, kind in scene.boundaries():
        if v_ref[0] > 0 and xb > mission.start_x:
            tb = (xb - mission.start_x) / v_ref[0]
            if tb <= t_out[-1]:
                events.append(EdgeEvent(float(tb), kind, float(mission.speed * tb)))
    meta = {"seed": seed, "pwm_max": params.pwm_max, "height": mission.height,
            "angle_deg": mission.angle_deg}
    return FlightRecord(imu_t=t_out, acc=acc, gyro=gyro, motor_t=t_out.copy(), pwm=pwm,
                        ground_truth=tuple(events), speed=mission.speed, meta=meta)


def _hover_integrator(scene, params, mission, p0):
    """Altitude integrator value that cancels the initial mean ground effect."""
    ge = mission.ground_effect
    if ge.kind == "none" or mission.controller.ki_z == 0:
        return 0.0
    seg = scene.segment_at(float(p0[0]))
    lift = ground_effect_lift(p0[2] - seg.surface_height, params.mass * params.g,
                              params.propeller_radius, seg.material_gain)
    return -lift / params.mass / mission.controller.ki_z

"""Flight telemetry data model and the canonical CSV log format.

A log holds one row per sample with IMU readings, the four motor PWM
commands and a ground-truth edge marker::

    t,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,m1,m2,m3,m4,gt_edge,edge_kind,speed

Floats are written with 9 significant digits, ``gt_edge`` is 0/1 and
``edge_kind`` is ``h`` (height), ``m`` (material) or empty.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

HEADER = (
    "t", "acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z",
    "m1", "m2", "m3", "m4", "gt_edge", "edge_kind", "speed",
)
DEFAULT_FS = 100.0
DEFAULT_PWM_MAX = 65535.0

_KIND_CODES = {"height": "h", "material": "m"}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class TelemetryError(ValueError):
    """Base class for telemetry ingestion and validation problems."""


class LogParseError(TelemetryError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class LogValidationError(TelemetryError):
    pass


@dataclass(frozen=True)
class ImuSample:
    t: float
    acc: tuple[float, float, float]
    gyro: tuple[float, float, float]


@dataclass(frozen=True)
class MotorSample:
    t: float
    pwm: tuple[float, float, float, float]


@dataclass(frozen=True)
class EdgeEvent:
    """A surface boundary crossed during the flight.

    ``position`` is the distance along the flight track in metres
    (speed x time).
    """

    t: float
    kind: str
    position: float

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise TelemetryError(f"unknown edge kind {self.kind!r}")


@dataclass(frozen=True)
class FlightRecord:
    """Telemetry of one flight, stored column-wise.

    Attributes
    ----------
    imu_t : (n,) array
        IMU timestamps in seconds.
    acc, gyro : (n, 3) arrays
        Body-frame specific force (m/s^2) and angular rate (rad/s).
    motor_t : (k,) array
        Motor command timestamps.
    pwm : (k, 4) array
        Motor PWM commands m1..m4.
    ground_truth : tuple of EdgeEvent
    speed : float
        Nominal horizontal speed in m/s.
    meta : dict
        Free-form metadata (drone parameters, scene, seed).
    """

    imu_t: np.ndarray
    acc: np.ndarray
    gyro: np.ndarray
    motor_t: np.ndarray
    pwm: np.ndarray
    ground_truth: tuple[EdgeEvent, ...] = ()
    speed: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("imu_t", "acc", "gyro", "motor_t", "pwm"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
        n, k = len(self.imu_t), len(self.motor_t)
        if self.acc.shape != (n, 3) or self.gyro.shape != (n, 3):
            raise LogValidationError("acc/gyro must be (n, 3) matching imu_t")
        if self.pwm.shape != (k, 4):
            raise LogValidationError("pwm must be (k, 4) matching motor_t")
        for name in ("imu_t", "motor_t"):
            t = getattr(self, name)
            if len(t) > 1 and np.any(np.diff(t) <= 0):
                raise LogValidationError(f"{name} is not strictly increasing")
        for name in ("imu_t", "acc", "gyro", "motor_t", "pwm"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise LogValidationError(f"{name} contains non-finite values")
        if np.any(self.pwm < 0):
            raise LogValidationError("negative PWM command")
        pwm_max = self.meta.get("pwm_max", DEFAULT_PWM_MAX)
        if np.any(self.pwm > pwm_max):
            raise LogValidationError(f"PWM command above pwm_max={pwm_max}")
        if n and self.ground_truth:
            lo, hi = self.imu_t[0], self.imu_t[-1]
            for ev in self.ground_truth:
                if not lo - 1e-9 <= ev.t <= hi + 1e-9:
                    raise LogValidationError(f"edge event at t={ev.t} outside record")

    @property
    def n_samples(self) -> int:
        return len(self.imu_t)

    @property
    def is_aligned(self) -> bool:
        """True when both streams share one uniform time grid."""
        if len(self.imu_t) != len(self.motor_t) or len(self.imu_t) < 2:
            return False
        if not np.array_equal(self.imu_t, self.motor_t):
            return False
        dt = np.diff(self.imu_t)
        return bool(np.allclose(dt, dt[0], rtol=1e-6, atol=1e-9))

    @property
    def sample_rate(self) -> float:
        if len(self.imu_t) < 2:
            raise TelemetryError("sample rate undefined for fewer than 2 samples")
        return float((len(self.imu_t) - 1) / (self.imu_t[-1] - self.imu_t[0]))

    def imu(self) -> list[ImuSample]:
        return [ImuSample(float(t), tuple(a), tuple(g))
                for t, a, g in zip(self.imu_t, self.acc.tolist(), self.gyro.tolist())]

    def motors(self) -> list[MotorSample]:
        return [MotorSample(float(t), tuple(m)) for t, m in zip(self.motor_t, self.pwm.tolist())]

    @classmethod
    def from_samples(cls, imu: Sequence[ImuSample], motors: Sequence[MotorSample],
                     ground_truth: Iterable[EdgeEvent] = (), speed: float = 0.0,
                     meta: dict | None = None) -> "FlightRecord":
        return cls(
            imu_t=[s.t for s in imu],
            acc=np.reshape([s.acc for s in imu], (-1, 3)),
            gyro=np.reshape([s.gyro for s in imu], (-1, 3)),
            motor_t=[s.t for s in motors],
            pwm=np.reshape([s.pwm for s in motors], (-1, 4)),
            ground_truth=tuple(ground_truth),
            speed=speed,
            meta=dict(meta or {}),
        )


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def parse_log(data: bytes | str) -> FlightRecord:
    """Parse a telemetry CSV into an aligned :class:`FlightRecord`.

    Raises
    ------
    LogParseError
        On a wrong header or a malformed row (the message names the line).
    LogValidationError
        When timestamps are not strictly increasing.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    lines = text.splitlines()
    if not lines or lines[0].strip() != ",".join(HEADER):
        raise LogParseError(1, "header does not match telemetry schema")
    rows = []
    events = []
    speed = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != len(HEADER):
            raise LogParseError(lineno, f"expected {len(HEADER)} fields, got {len(fields)}")
        try:
            nums = [float(v) for v in fields[:11]]
            gt = int(fields[11])
            row_speed = float(fields[13])
        except ValueError as exc:
            raise LogParseError(lineno, str(exc)) from None
        if gt not in (0, 1):
            raise LogParseError(lineno, f"gt_edge must be 0 or 1, got {gt}")
        code = fields[12]
        if code not in ("", "h", "m"):
            raise LogParseError(lineno, f"unknown edge_kind {code!r}")
        if gt == 1:
            if not code:
                raise LogParseError(lineno, "gt_edge=1 without edge_kind")
            events.append(EdgeEvent(nums[0], _CODE_KINDS[code], row_speed * nums[0]))
        if not all(np.isfinite(nums)):
            raise LogParseError(lineno, "non-finite value")
        rows.append(nums)
        speed = row_speed if speed is None else speed
    arr = np.array(rows, dtype=float).reshape(-1, 11)
    t = arr[:, 0]
    return FlightRecord(imu_t=t, acc=arr[:, 1:4], gyro=arr[:, 4:7],
                        motor_t=t.copy(), pwm=arr[:, 7:11],
                        ground_truth=tuple(events), speed=speed or 0.0)


def emit_log(record: FlightRecord) -> bytes:
    """Serialise an aligned record to the canonical CSV bytes.

    Each edge event is marked on the sample nearest to it.
    """
    if not record.is_aligned and record.n_samples > 1:
        raise TelemetryError("emit_log requires an aligned record")
    t = record.imu_t
    marks: dict[int, str] = {}
    for ev in record.ground_truth:
        idx = int(np.argmin(np.abs(t - ev.t)))
        marks[idx] = _KIND_CODES[ev.kind]
    out = io.StringIO()
    out.write(",".join(HEADER) + "\n")
    speed = _fmt(record.speed)
    acc, gyro, pwm = record.acc.tolist(), record.gyro.tolist(), record.pwm.tolist()
    for i, ti in enumerate(t.tolist()):
        vals = [ti, *acc[i], *gyro[i], *pwm[i]]
        code = marks.get(i, "")
        out.write(",".join(_fmt(v) for v in vals))
        out.write(f",{1 if code else 0},{code},{speed}\n")
    return out.getvalue().encode("utf-8")


def align(record: FlightRecord, fs: float = DEFAULT_FS) -> FlightRecord:
    """Resample IMU and motor streams onto one uniform grid at ``fs``.

    The grid starts at the later of the two first timestamps and stops at
    the earlier of the two last ones. Values are linearly interpolated.
    """
    if len(record.imu_t) < 2 or len(record.motor_t) < 2:
        raise TelemetryError("align needs at least two samples in each stream")
    t0 = max(record.imu_t[0], record.motor_t[0])
    t1 = min(record.imu_t[-1], record.motor_t[-1])
    if t1 <= t0:
        raise TelemetryError("IMU and motor streams do not overlap")
    n = int(np.floor((t1 - t0) * fs + 1e-6)) + 1
    grid = t0 + np.arange(n) / fs

    def resample(t, values):
        return np.column_stack([np.interp(grid, t, values[:, j]) for j in range(values.shape[1])])

    events = tuple(ev for ev in record.ground_truth if grid[0] - 1e-9 <= ev.t <= grid[-1] + 1e-9)
    return replace(record, imu_t=grid, acc=resample(record.imu_t, record.acc),
                   gyro=resample(record.imu_t, record.gyro), motor_t=grid.copy(),
                   pwm=resample(record.motor_t, record.pwm), ground_truth=events)


def build_source_vector(record: FlightRecord) -> np.ndarray:
    """Stack the 9 source channels ``[acc, gyro, m2-m1, m3-m1, m4-m1]``.

    Returns an ``(n, 9)`` array; the record must be aligned.
    """
    if not record.is_aligned:
        raise TelemetryError("build_source_vector requires an aligned record (see align)")
    diffs = record.pwm[:, 1:] - record.pwm[:, :1]
    return np.hstack([record.acc, record.gyro, diffs])


def write_series_csv(path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    """Dump equal-length columns as CSV with 9 significant digits."""
    cols = [np.asarray(c) for c in columns]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*(c.tolist() for c in cols)):
            fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")

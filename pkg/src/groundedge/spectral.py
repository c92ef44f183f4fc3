"""Band-power features from short-time spectra and cascaded cross-spectrum fusion.

Each of the nine source channels is turned into a per-frame power sum over
a narrow band (6-8 Hz by default). Channels of the same sensor are fused by
the square root of the product of their band powers, which is the magnitude
of the cascaded cross-spectrum of the group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import windows

GROUPS = {"a_s": (0, 1, 2), "omega_s": (3, 4, 5), "m_s": (6, 7, 8)}


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralConfig:
    window_size: int = 199
    overlap: int = 198
    band: tuple[float, float] = (6.0, 8.0)
    fs: float = 100.0
    normalize: bool = True

    @property
    def hop(self) -> int:
        return self.window_size - self.overlap


@dataclass(frozen=True)
class Spectrogram:
    """One-sided power per frame, scaled so each frame obeys Parseval.

    ``frames[k].sum() == sum((w * x[k*hop : k*hop + window_size])**2)``.
    ``frame_times`` are window centres.
    """

    frames: np.ndarray
    frame_times: np.ndarray
    bin_freqs: np.ndarray
    window_size: int
    overlap: int


@dataclass(frozen=True)
class BandPowerSeries:
    values: np.ndarray
    band: tuple[float, float]
    frame_times: np.ndarray | None = None


@dataclass(frozen=True)
class FusedFeatureSeries:
    """Per-frame fused features, columns ``[a_s, omega_s, m_s]``."""

    c: np.ndarray
    frame_times: np.ndarray

    def __len__(self):
        return len(self.frame_times)

    @property
    def frame_dt(self) -> float:
        return float(self.frame_times[1] - self.frame_times[0]) if len(self) > 1 else 0.0


def _frames(x: np.ndarray, window_size: int, overlap: int) -> np.ndarray:
    if not 0 <= overlap < window_size:
        raise SpectralError("overlap must satisfy 0 <= overlap < window_size")
    if x.shape[-1] < window_size:
        raise SpectralError(
            f"signal of {x.shape[-1]} samples is shorter than one window ({window_size})")
    hop = window_size - overlap
    return sliding_window_view(x, window_size, axis=-1)[..., ::hop, :]


def stft_complex(x, window_size: int, overlap: int) -> np.ndarray:
    """Hann-windowed one-sided DFT per frame, shape ``(..., n_frames, n_bins)``."""
    x = np.asarray(x, dtype=float)
    w = windows.hann(window_size, sym=False)
    return np.fft.rfft(_frames(x, window_size, overlap) * w, axis=-1)


def _power_scale(window_size: int) -> np.ndarray:
    n_bins = window_size // 2 + 1
    scale = np.full(n_bins, 2.0 / window_size)
    scale[0] = 1.0 / window_size
    if window_size % 2 == 0:
        scale[-1] = 1.0 / window_size
    return scale


def stft(signal, window_size: int = 199, overlap: int = 198, fs: float = 100.0) -> Spectrogram:
    """Power spectrogram of a 1-D signal.

    Frame ``k`` covers samples ``[k*hop, k*hop + window_size)`` and is
    stamped with the time of its centre, relative to the first sample.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise SpectralError("stft expects a 1-D signal")
    X = stft_complex(x, window_size, overlap)
    power = (X.real ** 2 + X.imag ** 2) * _power_scale(window_size)
    hop = window_size - overlap
    times = (np.arange(power.shape[0]) * hop + (window_size - 1) / 2) / fs
    freqs = np.fft.rfftfreq(window_size, d=1.0 / fs)
    return Spectrogram(power, times, freqs, window_size, overlap)


def band_mask(bin_freqs: np.ndarray, f_lo: float, f_hi: float) -> np.ndarray:
    if f_lo > f_hi:
        raise SpectralError("band lower edge above upper edge")
    mask = (bin_freqs >= f_lo) & (bin_freqs <= f_hi)
    if not mask.any():
        raise SpectralError(f"no frequency bins inside [{f_lo}, {f_hi}] Hz")
    return mask


def band_power(spec: Spectrogram, f_lo: float = 6.0, f_hi: float = 8.0) -> BandPowerSeries:
    """Per-frame sum of power over bins whose centre lies in ``[f_lo, f_hi]``."""
    nyquist = spec.bin_freqs[1] * spec.window_size / 2 if len(spec.bin_freqs) > 1 else 0.0
    if f_lo < 0 or f_hi > nyquist + 1e-9:
        raise SpectralError(f"band [{f_lo}, {f_hi}] Hz outside [0, {nyquist:g}] Hz")
    mask = band_mask(spec.bin_freqs, f_lo, f_hi)
    return BandPowerSeries(spec.frames[:, mask].sum(axis=1), (f_lo, f_hi), spec.frame_times)


def ccs_fuse(series) -> np.ndarray:
    """Fuse band powers of one sensor: ``sqrt(prod_i P_i)`` per frame.

    Accepts :class:`BandPowerSeries` objects or plain arrays. A single input
    is returned unchanged.
    """
    arrays = [np.asarray(s.values if isinstance(s, BandPowerSeries) else s, dtype=float)
              for s in series]
    if not arrays:
        raise SpectralError("ccs_fuse needs at least one series")
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise SpectralError("ccs_fuse inputs differ in length")
    if len(arrays) == 1:
        return arrays[0].copy()
    return np.sqrt(np.prod(np.vstack(arrays), axis=0))


def cross_spectrum(x, y, window_size: int = 199, overlap: int = 198) -> np.ndarray:
    """``X(f) * conj(Y(f))`` per frame and bin (unscaled DFT)."""
    return stft_complex(x, window_size, overlap) * np.conj(stft_complex(y, window_size, overlap))


def zscore(x: np.ndarray) -> np.ndarray:
    """Column-wise z-score; constant columns become zero."""
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    out = np.zeros_like(x)
    ok = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    out[:, ok] = (x[:, ok] - mu[ok]) / sd[ok]
    return out


def channel_band_powers(source: np.ndarray, config: SpectralConfig = SpectralConfig()):
    """Band power of each source channel, shape ``(n_frames, n_channels)``."""
    source = np.asarray(source, dtype=float)
    x = zscore(source) if config.normalize else source
    X = stft_complex(x.T, config.window_size, config.overlap)
    freqs = np.fft.rfftfreq(config.window_size, d=1.0 / config.fs)
    mask = band_mask(freqs, *config.band)
    Xb = X[..., mask]
    scale = _power_scale(config.window_size)[mask]
    return ((Xb.real ** 2 + Xb.imag ** 2) * scale).sum(axis=-1).T


def extract_features(source, t0: float = 0.0,
                     config: SpectralConfig = SpectralConfig()) -> FusedFeatureSeries:
    """Nine-channel source vector to the three fused features.

    Parameters
    ----------
    source : (n, 9) array
        ``[acc_xyz, gyro_xyz, m2-m1, m3-m1, m4-m1]`` sampled at ``config.fs``.
    t0 : float
        Timestamp of the first sample; frame times are offset by it.
    """
    source = np.asarray(source, dtype=float)
    if source.ndim != 2 or source.shape[1] != 9:
        raise SpectralError(f"expected (n, 9) source, got {source.shape}")
    if not np.all(np.isfinite(source)):
        raise SpectralError("source contains non-finite values")
    bp = channel_band_powers(source, config)
    c = np.column_stack([ccs_fuse([bp[:, i] for i in idx]) for idx in GROUPS.values()])
    n_frames = bp.shape[0]
    times = t0 + (np.arange(n_frames) * config.hop + (config.window_size - 1) / 2) / config.fs
    return FusedFeatureSeries(c, times)

"""Chrominance-based pulse (rPPG) ground truth from a tracked forehead patch."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

N_BINS = 50
N_RESAMPLE = 128
PASSBAND = (0.7, 4.0)
N_TAPS = 61


class RppgError(ValueError):
    pass


@dataclass
class RgbTrace:
    r: np.ndarray
    g: np.ndarray
    b: np.ndarray
    fps: float

    def __post_init__(self):
        if not (len(self.r) == len(self.g) == len(self.b)):
            raise RppgError("r, g, b traces must have equal length")
        if not self.fps > 0:
            raise RppgError("fps must be positive")

    def channels(self) -> np.ndarray:
        return np.stack([self.r, self.g, self.b])


@dataclass
class ChromSignals:
    x_f: np.ndarray
    y_f: np.ndarray
    gamma: float
    degenerate: bool = False


@dataclass
class RppgSpectrum:
    f: np.ndarray          # 50 bins, unit norm or all zero
    raw_norm: float        # L2 norm before normalization
    hz_per_bin: float

    @property
    def peak_bin(self) -> int:
        """1-based index of the strongest bin (bin k = k cycles per clip)."""
        return int(np.argmax(self.f)) + 1

    @property
    def peak_hz(self) -> float:
        return self.peak_bin * self.hz_per_bin


def track_region(frames: np.ndarray, shapes: Sequence[np.ndarray], region: np.ndarray,
                 fps: float) -> RgbTrace:
    """Mean color of the pixels covered by the projected ``region`` vertices, per frame."""
    n_frames, h, w, _ = frames.shape
    if len(shapes) != n_frames:
        raise RppgError(f"need one shape per frame: {len(shapes)} shapes for {n_frames} frames")
    trace = np.empty((n_frames, 3))
    for t, shape in enumerate(shapes):
        xy = shape[:2, region]
        col = np.floor(xy[0]).astype(np.int64)
        row = np.floor(xy[1]).astype(np.int64)
        ok = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        if not ok.any():
            raise RppgError(f"tracked patch is empty in frame {t}")
        pix = np.unique(row[ok] * w + col[ok])
        trace[t] = frames[t].reshape(-1, 3)[pix].mean(axis=0, dtype=np.float64)
    return RgbTrace(trace[:, 0], trace[:, 1], trace[:, 2], fps)


def skin_tone_normalize(trace: RgbTrace) -> RgbTrace:
    ch = trace.channels()
    mu = ch.mean(axis=1)
    if np.any(mu <= 0):
        raise RppgError("channel with non-positive temporal mean cannot be normalized")
    out = ch / mu[:, None]
    return RgbTrace(out[0], out[1], out[2], trace.fps)


def design_bandpass(fps: float, band: tuple[float, float] = PASSBAND, n_taps: int = N_TAPS) -> np.ndarray:
    """Hamming-windowed sinc bandpass: difference of two unit-DC lowpass filters."""
    n = np.arange(n_taps) - (n_taps - 1) / 2
    win = np.hamming(n_taps)

    def lowpass(fc):
        h = 2 * fc / fps * np.sinc(2 * fc / fps * n) * win
        return h / h.sum()

    return lowpass(band[1]) - lowpass(band[0])


def bandpass(signal: np.ndarray, fps: float) -> np.ndarray:
    """Zero-phase (centered, symmetric) FIR filtering with reflection padding."""
    signal = np.asarray(signal, dtype=np.float64)
    if fps < 8.0:
        raise RppgError(f"fps {fps} puts Nyquist below the {PASSBAND[1]} Hz passband edge")
    if signal.size < 32:
        raise RppgError("bandpass needs at least 32 samples")
    h = design_bandpass(fps)
    half = (N_TAPS - 1) // 2
    padded = np.pad(signal, half, mode="reflect")
    return np.convolve(padded, h, mode="valid")


def chrom_combine(r_f: np.ndarray, g_f: np.ndarray, b_f: np.ndarray) -> tuple[ChromSignals, np.ndarray]:
    r_f, g_f, b_f = (np.asarray(c, dtype=np.float64) for c in (r_f, g_f, b_f))
    if not (r_f.shape == g_f.shape == b_f.shape):
        raise RppgError("chrominance inputs must have equal length")
    x_f = 3 * r_f - 2 * g_f
    y_f = 1.5 * r_f + g_f - 1.5 * b_f
    sy = y_f.std()
    degenerate = sy < 1e-12
    if degenerate:
        warnings.warn("chrominance y_f is constant; using gamma = 1", RuntimeWarning, stacklevel=2)
    gamma = 1.0 if degenerate else float(x_f.std() / sy)
    p = 3 * (1 - gamma / 2) * r_f - 2 * (1 + gamma / 2) * g_f + (3 * gamma / 2) * b_f
    return ChromSignals(x_f, y_f, gamma, degenerate), p


def spectrum(p: np.ndarray, fps: float) -> RppgSpectrum:
    """Resample p to 128 points over the clip, take |DFT| bins 1..50, unit-normalize."""
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    if n < N_BINS:
        raise RppgError(f"need at least {N_BINS} samples, got {n}")
    pos = np.arange(N_RESAMPLE) * n / N_RESAMPLE
    q = np.interp(pos, np.arange(n), p)
    mag = np.abs(np.fft.fft(q))[1:N_BINS + 1]
    norm = float(np.linalg.norm(mag))
    f = mag / norm if norm > 1e-9 else np.zeros(N_BINS)
    return RppgSpectrum(f, norm, fps / n)


def extract(frames: np.ndarray, shapes: Sequence[np.ndarray], region: np.ndarray,
            fps: float) -> RppgSpectrum:
    trace = skin_tone_normalize(track_region(frames, shapes, region, fps))
    r_f, g_f, b_f = (bandpass(c, fps) for c in trace.channels())
    _, p = chrom_combine(r_f, g_f, b_f)
    return spectrum(p, fps)


def bin_of(freq_hz: float, n_frames: int, fps: float) -> int:
    """Spectrum bin (1-based) nearest to ``freq_hz`` for a clip of ``n_frames``."""
    return int(round(freq_hz * n_frames / fps))

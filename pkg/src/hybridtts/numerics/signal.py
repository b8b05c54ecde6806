"""Shared signal-processing primitives: STFT magnitudes, mel features,
median filtering, linear resampling, and sinusoidal time embeddings.

The STFT stays inside the autodiff graph (frame extraction + windowing +
DFT-matrix matmul), since reconstruction losses differentiate through it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

_MAG_EPS = 1e-6  # smooths sqrt at zero; magnitude of silence still reads ~0


@dataclass
class Spectrogram:
    fft_size: int
    hop: int
    magnitudes: Tensor  # [frames, bins], bins = fft_size // 2 + 1

    @property
    def frames(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def bins(self) -> int:
        return self.magnitudes.shape[1]


@lru_cache(maxsize=None)
def _dft_matrices(fft_size: int) -> tuple[np.ndarray, np.ndarray]:
    n = np.arange(fft_size)[:, None]
    k = np.arange(fft_size // 2 + 1)[None, :]
    ang = -2.0 * np.pi * n * k / fft_size
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


@lru_cache(maxsize=None)
def hann_window(size: int) -> np.ndarray:
    # periodic taper
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / size)).astype(np.float32)


def stft_magnitude(wave: Tensor, fft_size: int, hop: int | None = None) -> Spectrogram:
    """Magnitude spectrogram of a 1-D wave with a periodic Hann window.

    hop defaults to fft_size // 4. Waves shorter than one window are
    zero-padded into a single frame.
    """
    if wave.ndim != 1:
        raise ValueError("stft_magnitude expects a 1-D waveform")
    if hop is None:
        hop = fft_size // 4
    if not (fft_size >= hop > 0):
        raise ValueError("need fft_size >= hop > 0")

    n = wave.shape[0]
    if n < fft_size:
        wave = T.pad(wave, ((0, fft_size - n),))
    x = wave.reshape(1, wave.shape[0], 1)
    frames = T.unfold1d(x, fft_size, hop)  # [1, F, fft, 1]
    frames = frames.reshape(frames.shape[1], fft_size)
    win = hann_window(fft_size)
    if frames.dtype == np.float64:
        win = win.astype(np.float64)
    frames = frames * Tensor(win)
    cos_m, sin_m = _dft_matrices(fft_size)
    if frames.dtype == np.float64:
        cos_m, sin_m = cos_m.astype(np.float64), sin_m.astype(np.float64)
    re = frames @ Tensor(cos_m)
    im = frames @ Tensor(sin_m)
    mag = (re * re + im * im + _MAG_EPS**2).sqrt() - _MAG_EPS
    return Spectrogram(fft_size=fft_size, hop=hop, magnitudes=mag)


@lru_cache(maxsize=None)
def mel_filterbank(n_bins: int, n_mels: int, sample_rate: int, fft_size: int) -> np.ndarray:
    """[n_bins, n_mels] triangular mel filters (HTK mel scale)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_bins) * sample_rate / fft_size
    fb = np.zeros((n_bins, n_mels), dtype=np.float32)
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_freqs - lo) / max(ctr - lo, 1e-9)
        down = (hi - bin_freqs) / max(hi - ctr, 1e-9)
        fb[:, m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def log_mel(wave: Tensor, sample_rate: int, fft_size: int = 1024, n_mels: int = 80) -> Tensor:
    spec = stft_magnitude(wave, fft_size)
    fb = mel_filterbank(spec.bins, n_mels, sample_rate, fft_size)
    mel = spec.magnitudes @ Tensor(fb)
    return (mel + 1e-5).log()


def median_filter_1d(x: Tensor | np.ndarray, width: int) -> np.ndarray:
    """Same-length median filter with edge replication. Width must be odd."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if width % 2 == 0:
        raise ValueError("median filter width must be odd")
    n = data.shape[-1]
    if width > n:
        raise ValueError(f"width {width} exceeds length {n}")
    half = width // 2
    padded = np.concatenate(
        [np.repeat(data[..., :1], half, axis=-1), data, np.repeat(data[..., -1:], half, axis=-1)],
        axis=-1,
    )
    win = np.lib.stride_tricks.sliding_window_view(padded, width, axis=-1)
    return np.median(win, axis=-1).astype(data.dtype)


def linear_interp(x: Tensor | np.ndarray, target_len: int) -> np.ndarray:
    """Piecewise-linear resampling of the last axis, endpoints preserved."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    n = data.shape[-1]
    if target_len == n:
        return data.copy()
    if n == 1:
        return np.repeat(data, target_len, axis=-1)
    if target_len == 1:
        return data[..., :1].copy()
    pos = np.arange(target_len) * (n - 1) / (target_len - 1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, n - 2)
    frac = (pos - lo).astype(data.dtype)
    return data[..., lo] * (1.0 - frac) + data[..., lo + 1] * frac


def sinusoidal_embed(t: float, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Interleaved sin/cos encoding of a scalar t in [0, 1].

    t is stretched by `scale` so the standard 10000^(2i/dim) frequency ladder
    resolves the unit interval; t = 0 gives [0, 1, 0, 1, ...].
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(half) / dim))
    ang = scale * float(t) * freqs
    out = np.empty(dim, dtype=np.float32)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out

"""Framing, STFT/iSTFT, log-mel filterbank features, and exact-SNR mixing.

Conventions (fixed across the package): 25 ms Hann-windowed frames with a
10 ms hop, 512-point FFT, 80 triangular mel filters spanning 0-8000 Hz on
the standard 2595*log10(1+f/700) mel scale, and a 1e-10 floor under the
log. The iSTFT uses weighted overlap-add with the analysis window, which
reconstructs interior samples exactly for this window/hop pair.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .corpus import SAMPLE_RATE, Waveform
from .errors import DataError

LOG_FLOOR = 1e-10
N_MELS = 80


@dataclass(frozen=True)
class FrameConfig:
    frame_len: int = 400  # 25 ms at 16 kHz
    hop: int = 160  # 10 ms
    fft_size: int = 512

    def __post_init__(self):
        if self.frame_len > self.fft_size:
            raise DataError("frame_len must not exceed fft_size")
        if self.hop > self.frame_len:
            raise DataError("hop must not exceed frame_len")

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            raise DataError(
                f"waveform of {n_samples} samples shorter than one frame ({self.frame_len})"
            )
        return 1 + (n_samples - self.frame_len) // self.hop


DEFAULT_FRAMES = FrameConfig()


@lru_cache(maxsize=8)
def _hann(frame_len: int) -> np.ndarray:
    # Periodic Hann: constant overlap-add for the 400/160 configuration.
    n = np.arange(frame_len)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / frame_len))


def stft(waveform: Waveform, cfg: FrameConfig = DEFAULT_FRAMES) -> np.ndarray:
    """Complex spectrogram, shape (n_frames, fft_size//2 + 1)."""
    x = waveform.samples
    t = cfg.n_frames(x.size)
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(t)[:, None]
    frames = x[idx] * _hann(cfg.frame_len)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def istft(spec: np.ndarray, cfg: FrameConfig = DEFAULT_FRAMES) -> Waveform:
    """Weighted overlap-add inverse; output length (T-1)*hop + frame_len."""
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, : cfg.frame_len]
    window = _hann(cfg.frame_len)
    t = frames.shape[0]
    out_len = (t - 1) * cfg.hop + cfg.frame_len
    acc = np.zeros(out_len)
    norm = np.zeros(out_len)
    wsq = window * window
    for i in range(t):
        start = i * cfg.hop
        acc[start : start + cfg.frame_len] += frames[i] * window
        norm[start : start + cfg.frame_len] += wsq
    out = acc / np.maximum(norm, 1e-12)
    return Waveform(out)


@lru_cache(maxsize=4)
def mel_filterbank(
    n_mels: int = N_MELS,
    fft_size: int = 512,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = 0.0,
    f_max: float = 8000.0,
) -> np.ndarray:
    """Triangular mel filters as a (n_mels, fft_size//2 + 1) weight matrix."""

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges_hz = from_mel(np.linspace(to_mel(f_min), to_mel(f_max), n_mels + 2))
    bin_freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    weights = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        weights[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    weights.setflags(write=False)
    return weights


def lmfb(waveform: Waveform, cfg: FrameConfig = DEFAULT_FRAMES) -> np.ndarray:
    """Log mel filterbank energies, shape (n_frames, 80)."""
    power = np.abs(stft(waveform, cfg)) ** 2
    mel_energy = power @ mel_filterbank(fft_size=cfg.fft_size).T
    return np.log(np.maximum(mel_energy, LOG_FLOOR))


# ---------------------------------------------------------------------------
# SNR mixing


def measure_snr(speech: Waveform, noise: Waveform) -> float:
    """10*log10 of whole-signal power ratio between speech and noise."""
    if len(speech) != len(noise):
        raise DataError("measure_snr requires equal-length signals")
    p_noise = float(np.sum(noise.samples**2))
    if p_noise == 0.0:
        raise DataError("noise power is zero")
    p_speech = float(np.sum(speech.samples**2))
    return 10.0 * np.log10(p_speech / p_noise)


def fit_noise_length(noise: Waveform, n_samples: int, rng: np.random.Generator) -> Waveform:
    """Loop short noise, or crop long noise at a random (seeded) offset."""
    x = noise.samples
    if x.size < n_samples:
        reps = -(-n_samples // x.size)
        x = np.tile(x, reps)[:n_samples]
    elif x.size > n_samples:
        start = int(rng.integers(0, x.size - n_samples + 1))
        x = x[start : start + n_samples]
    return Waveform(x.copy())


def mix_at_snr(
    speech: Waveform,
    noise: Waveform,
    snr_db: float,
    rng: np.random.Generator | None = None,
) -> tuple[Waveform, Waveform]:
    """Mix noise into speech at an exact whole-signal SNR.

    Returns (mixture, scaled_noise); the scaled noise is length-adapted to
    the speech (looped or seeded-crop) and gained so that
    measure_snr(speech, scaled_noise) == snr_db up to float rounding.
    """
    if not np.isfinite(snr_db):
        raise DataError("snr_db must be finite")
    if speech.rms() == 0.0:
        raise DataError("speech has zero RMS")
    if noise.rms() == 0.0:
        raise DataError("noise has zero RMS")
    rng = rng or np.random.default_rng(0)
    fitted = fit_noise_length(noise, len(speech), rng)
    gain = (speech.rms() / fitted.rms()) * 10.0 ** (-snr_db / 20.0)
    scaled = Waveform(gain * fitted.samples)
    return Waveform(speech.samples + scaled.samples), scaled


# ---------------------------------------------------------------------------
# feature cache files: 16-byte header (magic, version, T, F) + f32 rows

_CACHE_MAGIC = b"LMFB"
_CACHE_VERSION = 1


def write_feature_cache(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise DataError("feature cache expects a 2-D (T, F) array")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<III", _CACHE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_feature_cache(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _CACHE_MAGIC:
            raise DataError(f"not a feature cache file: {path}")
        version, t, f = struct.unpack("<III", fh.read(12))
        if version != _CACHE_VERSION:
            raise DataError(f"unsupported feature cache version {version}")
        data = np.frombuffer(fh.read(t * f * 4), dtype="<f4")
        if data.size != t * f:
            raise DataError(f"truncated feature cache: {path}")
    return data.reshape(t, f).astype(np.float64)

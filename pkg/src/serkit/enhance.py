"""Frozen waveform-in/waveform-out speech enhancers.

The downstream model treats enhancement as an opaque, deterministic,
fixed-parameter front end selected by name. Three references are
provided:

* ``identity``      - passes audio through untouched (control condition).
* ``specsub``       - blind magnitude spectral subtraction with a noise
                      floor, noise estimated as a low percentile of the
                      per-bin magnitude distribution.
* ``oracle_wiener`` - per-bin Wiener gain computed from a known clean
                      reference; stands in for a strong pretrained
                      enhancer on synthetic mixtures where the clean
                      component is available.

All enhancers operate as a real gain on the mixture STFT (noisy phase is
reused) and reconstruct with weighted overlap-add at the input length.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .corpus import Waveform
from .dsp import DEFAULT_FRAMES, FrameConfig, istft, measure_snr, stft
from .errors import DataError


def _pad_for_framing(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Zero-pad so overlap-add synthesis covers every input sample."""
    if x.size <= cfg.frame_len:
        target = cfg.frame_len
    else:
        hops = -(-(x.size - cfg.frame_len) // cfg.hop)
        target = cfg.frame_len + hops * cfg.hop
    return np.pad(x, (0, target - x.size))


def padded_stft(waveform: Waveform, cfg: FrameConfig = DEFAULT_FRAMES) -> np.ndarray:
    return stft(Waveform(_pad_for_framing(waveform.samples, cfg)), cfg)


def apply_gains(waveform: Waveform, gains: np.ndarray, cfg: FrameConfig = DEFAULT_FRAMES) -> Waveform:
    """Apply a (T, bins) real gain matrix in the STFT domain."""
    spec = padded_stft(waveform, cfg)
    if gains.shape != spec.shape:
        raise DataError(f"gain shape {gains.shape} does not match STFT {spec.shape}")
    out = istft(spec * gains, cfg).samples
    return Waveform(out[: len(waveform)])


class Enhancer:
    """Deterministic enhancement with parameters frozen at construction."""

    name: str

    def gains(self, noisy: Waveform, clean_ref: Waveform | None = None) -> np.ndarray:
        raise NotImplementedError

    def enhance(self, noisy: Waveform, clean_ref: Waveform | None = None) -> Waveform:
        return apply_gains(noisy, self.gains(noisy, clean_ref))

    def checksum(self) -> str:
        payload = f"{type(self).__name__}|{self.name}|{sorted(vars(self).items())!r}"
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class IdentityEnhancer(Enhancer):
    name: str = "identity"

    def gains(self, noisy, clean_ref=None):
        return np.ones_like(padded_stft(noisy), dtype=np.float64)

    def enhance(self, noisy, clean_ref=None):
        # Bit-exact pass-through, no analysis/synthesis round trip.
        return Waveform(noisy.samples.copy())


@dataclass(frozen=True)
class SpectralSubtractEnhancer(Enhancer):
    """Magnitude subtraction against a per-bin percentile noise estimate.

    The estimate exploits any low-energy frames present in the signal
    (e.g. pauses); the enhanced magnitude never drops below
    ``floor_ratio`` times the noise estimate.
    """

    name: str = "specsub"
    noise_percentile: float = 10.0
    floor_ratio: float = 0.01

    def gains(self, noisy, clean_ref=None):
        mag = np.abs(padded_stft(noisy))
        noise_mag = np.percentile(mag, self.noise_percentile, axis=0)
        enhanced = np.maximum(mag - noise_mag, self.floor_ratio * noise_mag)
        out = np.zeros_like(mag)
        np.divide(enhanced, mag, out=out, where=mag > 0)
        return out


@dataclass(frozen=True)
class OracleWienerEnhancer(Enhancer):
    """Per-bin Wiener gain s2/(s2+n2) from the known clean component."""

    name: str = "oracle_wiener"

    def gains(self, noisy, clean_ref=None):
        if clean_ref is None:
            raise DataError("oracle_wiener requires the clean reference waveform")
        if len(clean_ref) != len(noisy):
            raise DataError("clean reference length does not match noisy input")
        s2 = np.abs(padded_stft(clean_ref)) ** 2
        n2 = np.abs(padded_stft(Waveform(noisy.samples - clean_ref.samples))) ** 2
        denom = s2 + n2
        out = np.zeros_like(s2)
        np.divide(s2, denom, out=out, where=denom > 0)
        return out


ENHANCERS = {
    "identity": IdentityEnhancer,
    "specsub": SpectralSubtractEnhancer,
    "oracle_wiener": OracleWienerEnhancer,
}


def make_enhancer(name: str) -> Enhancer:
    try:
        return ENHANCERS[name]()
    except KeyError:
        raise DataError(
            f"unknown enhancer '{name}' (available: {', '.join(sorted(ENHANCERS))})"
        ) from None


def spectral_subtract(noisy: Waveform) -> Waveform:
    return SpectralSubtractEnhancer().enhance(noisy)


def oracle_wiener(noisy: Waveform, clean_ref: Waveform) -> Waveform:
    return OracleWienerEnhancer().enhance(noisy, clean_ref)


def component_snr(
    enhancer: Enhancer, speech: Waveform, scaled_noise: Waveform
) -> tuple[float, float]:
    """(input SNR, output SNR) with the enhancer's gain applied separately
    to the speech and noise components (shadow filtering)."""
    mixture = Waveform(speech.samples + scaled_noise.samples)
    g = enhancer.gains(mixture, clean_ref=speech)
    speech_out = apply_gains(speech, g)
    noise_out = apply_gains(scaled_noise, g)
    return measure_snr(speech, scaled_noise), measure_snr(speech_out, noise_out)

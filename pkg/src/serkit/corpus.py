"""Deterministic synthetic emotional-speech corpus and manifest handling.

The corpus stands in for a licensed acted-emotion dataset at desk scale:
four emotion classes realized as harmonic tones whose fundamental, pitch
slope, and amplitude-modulation rate are class dependent, spread over five
two-speaker sessions so a leave-one-speaker-out protocol applies. Noise
files come in two disjoint families so "seen" and "unseen" noise
conditions can be evaluated separately.

Every synthesized sample is a pure function of its parameters and seed;
rebuilding a corpus with the same config yields byte-identical files.
"""

from __future__ import annotations

import json
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .seeding import generator

SAMPLE_RATE = 16000
EMOTIONS = ("angry", "happy", "neutral", "sad")
NOISE_KINDS = ("white", "pink", "tonal_babble", "impulsive")
MATCHED_NOISE_KINDS = ("white", "tonal_babble")
UNMATCHED_NOISE_KINDS = ("pink", "impulsive")
LEAD_IN_S = 0.25

# Per-class tone parameters: base fundamental (Hz), relative pitch slope
# (fraction per second), and amplitude-modulation rate (Hz).
_CLASS_PARAMS = {
    "angry": (300.0, 0.08, 8.0),
    "happy": (240.0, 0.04, 5.0),
    "neutral": (180.0, 0.00, 2.0),
    "sad": (120.0, -0.05, 1.0),
}


@dataclass(frozen=True)
class Waveform:
    """Mono 16 kHz audio with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", arr)
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"16 kHz required, got {self.sample_rate} Hz")
        if arr.ndim != 1 or arr.size < 1:
            raise DataError("waveform must be a non-empty 1-D sample array")
        if not np.isfinite(arr).all():
            raise DataError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    path: str
    emotion: str
    speaker: str
    session: str
    duration_s: float


@dataclass(frozen=True)
class NoiseRecord:
    id: str
    path: str
    noise_set: str  # "matched" | "unmatched"


@dataclass
class Manifest:
    utterances: list[UtteranceRecord]
    noises: list[NoiseRecord]
    root: Path = field(default_factory=Path)

    def utterance_path(self, rec: UtteranceRecord) -> Path:
        return self.root / rec.path

    def noise_path(self, rec: NoiseRecord) -> Path:
        return self.root / rec.path

    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def sessions(self) -> list[str]:
        return sorted({u.session for u in self.utterances})

    def noises_in_set(self, noise_set: str) -> list[NoiseRecord]:
        return [n for n in self.noises if n.noise_set == noise_set]


# ---------------------------------------------------------------------------
# synthesis


def _speaker_f0_offset(speaker: str) -> float:
    rng = generator("speaker-f0", speaker)
    return float(rng.uniform(-15.0, 15.0))


def synth_utterance(emotion: str, speaker: str, duration_s: float, seed: int) -> Waveform:
    """Synthesize one pseudo-utterance: 0.25 s of silence, then a harmonic
    tone with class-dependent f0/slope/AM and a speaker-dependent f0 offset."""
    if emotion not in EMOTIONS:
        raise DataError(f"unknown emotion class '{emotion}'")
    if not 1.0 <= duration_s <= 3.0:
        raise DataError(f"utterance duration {duration_s} outside [1.0, 3.0] s")
    base_f0, slope, am_rate = _CLASS_PARAMS[emotion]
    rng = generator("utterance", emotion, speaker, round(duration_s, 6), seed)

    n_total = int(round(duration_s * SAMPLE_RATE))
    n_lead = int(LEAD_IN_S * SAMPLE_RATE)
    n_tone = n_total - n_lead
    t = np.arange(n_tone) / SAMPLE_RATE

    f0 = base_f0 + _speaker_f0_offset(speaker) + rng.uniform(-5.0, 5.0)
    inst_freq = f0 * (1.0 + slope * t)
    phase = 2.0 * np.pi * np.cumsum(inst_freq) / SAMPLE_RATE
    phase0 = rng.uniform(0.0, 2.0 * np.pi)

    tone = np.zeros(n_tone)
    for k in range(1, 6):
        tone += (1.0 / k) * np.sin(k * (phase + phase0))
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    tone *= 1.0 + 0.3 * np.sin(2.0 * np.pi * am_rate * t + am_phase)

    fade = int(0.010 * SAMPLE_RATE)
    ramp = 0.5 * (1.0 - np.cos(np.linspace(0.0, np.pi, fade)))
    tone[:fade] *= ramp
    tone[-fade:] *= ramp[::-1]

    peak_target = rng.uniform(0.35, 0.45)
    tone *= peak_target / np.max(np.abs(tone))

    samples = np.zeros(n_total)
    samples[n_lead:] = tone
    return Waveform(samples)


def synth_noise(kind: str, duration_s: float, seed: int) -> Waveform:
    """Synthesize a noise clip of the given kind; peak is kept <= 0.9."""
    if kind not in NOISE_KINDS:
        raise DataError(f"unknown noise kind '{kind}'")
    if not 1.0 <= duration_s <= 6.0:
        raise DataError(f"noise duration {duration_s} outside [1.0, 6.0] s")
    rng = generator("noise", kind, round(duration_s, 6), seed)
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE

    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        shaping = np.ones_like(freqs)
        nz = freqs > 0
        shaping[nz] = 1.0 / np.sqrt(freqs[nz])
        shaping[0] = 0.0
        x = np.fft.irfft(spec * shaping, n=n)
    elif kind == "tonal_babble":
        x = np.zeros(n)
        for _ in range(8):
            freq = math.exp(rng.uniform(math.log(90.0), math.log(1200.0)))
            amp = rng.uniform(0.3, 1.0)
            am = 0.5 * (1.0 + np.sin(2.0 * np.pi * rng.uniform(0.5, 3.0) * t + rng.uniform(0, 2 * np.pi)))
            x += amp * am * np.sin(2.0 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        x += 0.02 * rng.standard_normal(n)
    else:  # impulsive
        x = 0.05 * rng.standard_normal(n)
        n_impulses = max(1, int(duration_s * 6))
        decay = np.exp(-np.arange(int(0.005 * SAMPLE_RATE)) / (0.001 * SAMPLE_RATE))
        for _ in range(n_impulses):
            pos = rng.integers(0, n - decay.size)
            amp = rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
            x[pos : pos + decay.size] += amp * decay

    x *= 0.15 / np.sqrt(np.mean(x**2))
    peak = np.max(np.abs(x))
    if peak > 0.9:
        x *= 0.9 / peak
    return Waveform(x)


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM 16-bit little-endian mono 16 kHz)


def write_wav(path, waveform: Waveform) -> None:
    clipped = np.clip(waveform.samples, -1.0, 1.0)
    ints = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(ints.tobytes())


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            frames = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise DataError(f"not a readable RIFF/WAVE file: {path} ({exc})") from exc
    if channels != 1:
        raise DataError(f"mono required, got {channels} channels: {path}")
    if rate != SAMPLE_RATE:
        raise DataError(f"16 kHz required, got {rate} Hz: {path}")
    if width != 2:
        raise DataError(f"PCM 16-bit required, got {8 * width}-bit: {path}")
    ints = np.frombuffer(frames, dtype="<i2")
    return Waveform(ints.astype(np.float64) / 32767.0)


# ---------------------------------------------------------------------------
# corpus build and manifest I/O


@dataclass(frozen=True)
class CorpusConfig:
    sessions: int = 5
    speakers_per_session: int = 2
    utterances_per_speaker_per_class: int = 5
    noises_per_kind: int = 10
    noise_duration_s: float = 5.0
    duration_range_s: tuple[float, float] = (1.0, 2.0)
    seed: int = 0


def build_corpus(out_dir, config: CorpusConfig = CorpusConfig()) -> Manifest:
    """Generate WAV files plus a manifest under ``out_dir``.

    Speakers are named <session>a/<session>b and partitioned by session.
    The matched noise set holds white + tonal_babble clips, the unmatched
    set pink + impulsive.
    """
    out = Path(out_dir)
    utt_dir = out / "wav" / "utt"
    noise_dir = out / "wav" / "noise"
    try:
        utt_dir.mkdir(parents=True, exist_ok=True)
        noise_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create corpus directory {out}: {exc}") from exc

    utterances: list[UtteranceRecord] = []
    for s in range(1, config.sessions + 1):
        session = f"s{s}"
        for which in "ab"[: config.speakers_per_session]:
            speaker = f"{session}{which}"
            for emotion in EMOTIONS:
                for k in range(config.utterances_per_speaker_per_class):
                    uid = f"{speaker}_{emotion}_{k:02d}"
                    rng = generator("corpus", config.seed, "duration", uid)
                    duration = round(float(rng.uniform(*config.duration_range_s)), 3)
                    seed = int(generator("corpus", config.seed, "utt-seed", uid).integers(2**31))
                    wav = synth_utterance(emotion, speaker, duration, seed)
                    rel = f"wav/utt/{uid}.wav"
                    write_wav(out / rel, wav)
                    utterances.append(
                        UtteranceRecord(uid, rel, emotion, speaker, session, duration)
                    )

    noises: list[NoiseRecord] = []
    for kind in NOISE_KINDS:
        noise_set = "matched" if kind in MATCHED_NOISE_KINDS else "unmatched"
        for k in range(config.noises_per_kind):
            nid = f"noise_{kind}_{k:03d}"
            seed = int(generator("corpus", config.seed, "noise-seed", nid).integers(2**31))
            wav = synth_noise(kind, config.noise_duration_s, seed)
            rel = f"wav/noise/{nid}.wav"
            write_wav(out / rel, wav)
            noises.append(NoiseRecord(nid, rel, noise_set))

    manifest = Manifest(utterances, noises, root=out)
    save_manifest(out / "manifest.json", manifest)
    return manifest


def save_manifest(path, manifest: Manifest) -> None:
    payload = {
        "utterances": [
            {
                "id": u.id,
                "path": u.path,
                "emotion": u.emotion,
                "speaker": u.speaker,
                "session": u.session,
                "duration_s": u.duration_s,
            }
            for u in manifest.utterances
        ],
        "noises": [
            {"id": n.id, "path": n.path, "noise_set": n.noise_set}
            for n in manifest.noises
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")


def load_manifest(path) -> Manifest:
    """Load and validate a manifest; paths are resolved relative to it."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc

    root = path.parent
    utterances = []
    ids: set[str] = set()
    for entry in payload.get("utterances", []):
        try:
            rec = UtteranceRecord(
                id=entry["id"],
                path=entry["path"],
                emotion=entry["emotion"],
                speaker=entry["speaker"],
                session=entry["session"],
                duration_s=float(entry["duration_s"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed utterance record in {path}: {exc}") from exc
        if rec.emotion not in EMOTIONS:
            raise DataError(f"unknown emotion '{rec.emotion}' for utterance {rec.id}")
        if rec.id in ids:
            raise DataError(f"duplicate id '{rec.id}' in manifest")
        ids.add(rec.id)
        if not (root / rec.path).exists():
            raise DataError(f"missing file for utterance {rec.id}: {root / rec.path}")
        utterances.append(rec)

    speaker_sessions: dict[str, str] = {}
    for u in utterances:
        prior = speaker_sessions.setdefault(u.speaker, u.session)
        if prior != u.session:
            raise DataError(f"speaker '{u.speaker}' appears in sessions {prior} and {u.session}")

    noises = []
    for entry in payload.get("noises", []):
        try:
            rec = NoiseRecord(id=entry["id"], path=entry["path"], noise_set=entry["noise_set"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed noise record in {path}: {exc}") from exc
        if rec.noise_set not in ("matched", "unmatched"):
            raise DataError(f"unknown noise_set '{rec.noise_set}' for noise {rec.id}")
        if rec.id in ids:
            raise DataError(f"duplicate id '{rec.id}' in manifest")
        ids.add(rec.id)
        if not (root / rec.path).exists():
            raise DataError(f"missing file for noise {rec.id}: {root / rec.path}")
        noises.append(rec)

    return Manifest(utterances, noises, root=root)

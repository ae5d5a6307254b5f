"""Deterministic audio preprocessing.

Waveforms are resampled, loudness normalised, stripped of silence and turned
into log-mel spectrograms under one of two presets: ``CONTENT`` (80 bins,
64 ms window, 16 ms hop, valid framing) feeds the content separator and
``SPEAKER`` (40 bins, 25 ms window, 10 ms hop, centered framing) feeds the
speaker encoders.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import (
    AudioTooShort,
    ConfigError,
    EmptyAudio,
    SilentAudio,
    UtteranceTooShort,
)

SAMPLE_RATE = 16000
TARGET_DBFS = -30.0
LOG_EPS = 1e-6


@dataclass
class AudioSegment:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    name: str
    n_mels: int
    window_ms: float
    hop_ms: float
    framing: str  # "valid" | "centered"
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = math.log(LOG_EPS)
    sample_rate: int = SAMPLE_RATE

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    def num_frames(self, n_samples: int) -> int:
        if self.framing == "valid":
            if n_samples < self.win_length:
                return 0
            return 1 + (n_samples - self.win_length) // self.hop_length
        return -(-n_samples // self.hop_length)


CONTENT = MelConfig("content", n_mels=80, window_ms=64.0, hop_ms=16.0, framing="valid")
SPEAKER = MelConfig("speaker", n_mels=40, window_ms=25.0, hop_ms=10.0, framing="centered")
PRESETS = {CONTENT.name: CONTENT, SPEAKER.name: SPEAKER}


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (n_mels, T)
    config_id: str
    source_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class VADConfig:
    """Energy detector over fixed windows with two-threshold hysteresis.

    A frame switches on when its RMS level exceeds ``on_dbfs`` and only
    switches off again once it drops below ``on_dbfs - hysteresis_db``.
    Higher ``aggressiveness`` raises both thresholds.
    """

    frame_ms: float = 30.0
    base_dbfs: float = -50.0
    aggressiveness: float = 1.0
    db_per_level: float = 5.0
    hysteresis_db: float = 6.0

    @property
    def on_dbfs(self) -> float:
        return self.base_dbfs + self.db_per_level * self.aggressiveness

    @property
    def off_dbfs(self) -> float:
        return self.on_dbfs - self.hysteresis_db


@dataclass
class FrameBatch:
    data: np.ndarray  # (S*U, num_frames, n_mels)
    speakers: list
    # (speaker, utterance index, crop offset) per row of ``data``
    crops: list = field(default_factory=list)


def read_wav(path) -> AudioSegment:
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioSegment(np.clip(x, -1.0, 1.0), int(rate))


def write_wav(path, audio: AudioSegment, subtype: str = "PCM_16") -> None:
    x = np.clip(audio.samples, -1.0, 1.0)
    if subtype == "PCM_16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    elif subtype == "FLOAT":
        data = x.astype("<f4")
    else:
        raise ConfigError(f"unsupported WAV subtype {subtype!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), audio.sample_rate, data)


def resample(audio: AudioSegment, target_rate: int = SAMPLE_RATE) -> AudioSegment:
    if len(audio) == 0:
        raise EmptyAudio("cannot resample an empty signal")
    if target_rate <= 0:
        raise ConfigError(f"target_rate must be positive, got {target_rate}")
    if audio.sample_rate == target_rate:
        return AudioSegment(audio.samples.copy(), target_rate)
    ratio = Fraction(target_rate, audio.sample_rate)
    y = signal.resample_poly(audio.samples, ratio.numerator, ratio.denominator)
    return AudioSegment(np.clip(y, -1.0, 1.0), target_rate)


def rms_dbfs(samples: np.ndarray) -> float:
    rms = float(np.sqrt(np.mean(np.square(samples))))
    if rms == 0.0:
        return -math.inf
    return 20.0 * math.log10(rms)


def normalize_loudness(audio: AudioSegment, target_dbfs: float = TARGET_DBFS) -> AudioSegment:
    """Scale to a target RMS level in dBFS, then clip to [-1, 1].

    The level is only exact when the scaled signal does not clip, i.e. when
    its crest factor is below ``-target_dbfs`` dB.
    """
    level = rms_dbfs(audio.samples)
    if not math.isfinite(level):
        raise SilentAudio("cannot normalise an all-zero signal")
    gain = 10.0 ** ((target_dbfs - level) / 20.0)
    return AudioSegment(np.clip(audio.samples * gain, -1.0, 1.0), audio.sample_rate)


def _frame_levels(samples: np.ndarray, frame_len: int) -> np.ndarray:
    n_frames = -(-len(samples) // frame_len)
    padded = np.zeros(n_frames * frame_len)
    padded[: len(samples)] = samples
    frames = padded.reshape(n_frames, frame_len)
    # the last partial frame is measured over its real samples only
    counts = np.full(n_frames, frame_len, dtype=np.float64)
    counts[-1] = len(samples) - (n_frames - 1) * frame_len
    power = np.sum(frames**2, axis=1) / counts
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(power)


def voiced_mask(audio: AudioSegment, vad: VADConfig = VADConfig()) -> tuple[np.ndarray, int]:
    """Per-frame voiced flags and the frame length in samples."""
    frame_len = max(1, int(round(vad.frame_ms * audio.sample_rate / 1000)))
    levels = _frame_levels(audio.samples, frame_len)
    mask = np.zeros(levels.shape[0], dtype=bool)
    active = False
    for i, lv in enumerate(levels):
        if active:
            active = lv >= vad.off_dbfs
        else:
            active = lv >= vad.on_dbfs
        mask[i] = active
    return mask, frame_len


def voiced_segments(audio: AudioSegment, vad: VADConfig = VADConfig()) -> list[tuple[int, int]]:
    """Sample ranges ``[start, end)`` of contiguous voiced runs."""
    mask, frame_len = voiced_mask(audio, vad)
    segments = []
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            segments.append((start * frame_len, min(i * frame_len, len(audio))))
            start = None
    if start is not None:
        segments.append((start * frame_len, len(audio)))
    return segments


def trim_silence(audio: AudioSegment, vad: VADConfig = VADConfig()) -> AudioSegment:
    """Drop unvoiced frames and concatenate the rest in original order."""
    if len(audio) == 0:
        raise EmptyAudio("cannot trim an empty signal")
    segments = voiced_segments(audio, vad)
    if not segments:
        raise SilentAudio("no voiced frames detected")
    kept = np.concatenate([audio.samples[a:b] for a, b in segments])
    return AudioSegment(kept, audio.sample_rate)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters with unit peak, evenly spaced on the HTK mel scale.

    Returns an ``(n_mels, n_fft // 2 + 1)`` matrix.
    """
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def stft_magnitude(samples: np.ndarray, config: MelConfig) -> np.ndarray:
    """Hann-windowed magnitude spectra, ``(n_fft // 2 + 1, T)``.

    The FFT size equals the window length. Centered framing zero-pads half a
    window on both sides and keeps ``ceil(len / hop)`` frames.
    """
    win, hop = config.win_length, config.hop_length
    n_frames = config.num_frames(len(samples))
    if config.framing == "centered":
        samples = np.pad(samples, (win // 2, win // 2))
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * signal.get_window("hann", win, fftbins=True)[None, :]
    return np.abs(np.fft.rfft(frames, n=win, axis=1)).T


def mel_spectrogram(audio: AudioSegment, config: MelConfig, source_id: str = "") -> MelSpectrogram:
    if audio.sample_rate != config.sample_rate:
        raise ConfigError(
            f"expected {config.sample_rate} Hz audio for the {config.name} preset, got {audio.sample_rate} Hz"
        )
    n = len(audio)
    if config.framing == "valid" and n < config.win_length:
        raise AudioTooShort(f"{n} samples is shorter than one {config.win_length}-sample window")
    if n == 0:
        raise AudioTooShort("empty signal")
    mag = stft_magnitude(audio.samples, config)
    fb = mel_filterbank(config.n_mels, config.win_length, config.sample_rate, config.fmin, config.fmax)
    mel = np.log(fb @ mag + LOG_EPS)
    values = np.maximum(mel, config.log_floor).astype(np.float32)
    return MelSpectrogram(values, config.name, source_id)


def preprocess(audio: AudioSegment, config: MelConfig, vad: VADConfig | None = None, source_id: str = "") -> MelSpectrogram:
    """Resample, normalise and (optionally) trim silence before the mel transform."""
    audio = normalize_loudness(resample(audio, config.sample_rate))
    if vad is not None:
        audio = trim_silence(audio, vad)
    return mel_spectrogram(audio, config, source_id)


def sample_partial_frames(
    mels: Mapping[str, Sequence[MelSpectrogram]],
    num_utterances: int,
    num_frames: int,
    seed=None,
    pad: bool = False,
) -> FrameBatch:
    """Stack random contiguous crops into a ``[S*U, num_frames, n_mels]`` batch.

    Utterances are drawn without replacement when a speaker has enough of
    them. Utterances shorter than ``num_frames`` raise unless ``pad`` is set,
    in which case they are tiled along time before cropping.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rows, crops = [], []
    speakers = list(mels)
    for spk in speakers:
        utts = mels[spk]
        if not utts:
            raise UtteranceTooShort(f"speaker {spk!r} has no utterances")
        replace = len(utts) < num_utterances
        chosen = rng.choice(len(utts), size=num_utterances, replace=replace)
        for u in chosen:
            values = utts[u].values
            length = values.shape[1]
            if length < num_frames:
                if not pad:
                    raise UtteranceTooShort(
                        f"utterance {utts[u].source_id or u} of speaker {spk!r} has {length} < {num_frames} frames"
                    )
                values = np.tile(values, (1, -(-num_frames // length)))
                length = values.shape[1]
            offset = int(rng.integers(0, length - num_frames + 1))
            rows.append(values[:, offset : offset + num_frames].T)
            crops.append((spk, int(u), offset))
    return FrameBatch(np.stack(rows).astype(np.float32), speakers, crops)

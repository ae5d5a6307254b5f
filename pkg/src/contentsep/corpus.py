"""Speech manifests, session policies and the synthetic stand-in corpus.

A manifest row is one audio file. Rows sharing ``(speaker_id, session)``
belong to the same recording session; after :func:`augment_sessions` every
session is its own sample keyed ``speaker_id#session``.
"""
from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import audio
from .errors import AlreadyAugmented, ConfigError, DuplicateRecord, ParseError

FIELDS = ("speaker_id", "session", "label", "age", "sex", "mmse", "audio_path")
LABELS = {"CN": 0, "IM": 1}
SESSION_SEP = "#"


@dataclass(frozen=True)
class SpeechRecord:
    speaker_id: str
    session: int
    label: str
    age: float
    sex: str
    mmse: int | None
    audio_path: str

    @property
    def base_speaker(self) -> str:
        return self.speaker_id.split(SESSION_SEP, 1)[0]

    @property
    def y(self) -> int:
        return LABELS[self.label]


@dataclass
class Manifest:
    records: list[SpeechRecord] = field(default_factory=list)
    augmented: bool = False
    root: Path | None = None  # directory relative audio paths resolve against

    def __len__(self):
        return len(self.records)

    def resolve(self, record: SpeechRecord) -> Path:
        p = Path(record.audio_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def samples(self) -> "OrderedDict[str, list[SpeechRecord]]":
        """Classification samples: one per ``speaker#session`` once augmented.

        Before augmentation each speaker contributes only its earliest session.
        """
        groups: OrderedDict[str, list[SpeechRecord]] = OrderedDict()
        if self.augmented:
            for r in self.records:
                groups.setdefault(r.speaker_id, []).append(r)
            return groups
        first = {}
        for r in self.records:
            first[r.speaker_id] = min(first.get(r.speaker_id, r.session), r.session)
        for r in self.records:
            if r.session == first[r.speaker_id]:
                groups.setdefault(r.speaker_id, []).append(r)
        return groups

    def sample_labels(self) -> "OrderedDict[str, int]":
        return OrderedDict((k, rs[0].y) for k, rs in self.samples().items())

    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})


def _validate(r: SpeechRecord, row: int | None = None):
    if not r.speaker_id:
        raise ParseError("empty speaker_id", row)
    if r.session < 0:
        raise ParseError(f"session must be >= 0, got {r.session}", row)
    if r.label not in LABELS:
        raise ParseError(f"label must be CN or IM, got {r.label!r}", row)
    if r.sex not in ("M", "F"):
        raise ParseError(f"sex must be M or F, got {r.sex!r}", row)
    if r.mmse is not None and not 0 <= r.mmse <= 30:
        raise ParseError(f"mmse must lie in [0, 30], got {r.mmse}", row)


def _check_unique(records):
    seen = set()
    for r in records:
        key = (r.speaker_id, r.session, r.audio_path)
        if key in seen:
            raise DuplicateRecord(f"duplicate record {key}")
        seen.add(key)


def load_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != FIELDS:
            raise ParseError(f"header must be {','.join(FIELDS)}, got {reader.fieldnames}", 1)
        for row_no, row in enumerate(reader, start=2):
            try:
                mmse = row["mmse"].strip()
                rec = SpeechRecord(
                    speaker_id=row["speaker_id"].strip(),
                    session=int(row["session"]),
                    label=row["label"].strip(),
                    age=float(row["age"]),
                    sex=row["sex"].strip(),
                    mmse=int(mmse) if mmse else None,
                    audio_path=row["audio_path"].strip(),
                )
            except (TypeError, ValueError, AttributeError) as exc:
                raise ParseError(str(exc), row_no) from exc
            _validate(rec, row_no)
            records.append(rec)
    _check_unique(records)
    augmented = bool(records) and all(SESSION_SEP in r.speaker_id for r in records)
    return Manifest(records, augmented, path.parent)


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for r in manifest.records:
            age = repr(float(r.age))
            w.writerow([r.speaker_id, r.session, r.label, age, r.sex, "" if r.mmse is None else r.mmse, r.audio_path])


def augment_sessions(manifest: Manifest) -> Manifest:
    """Treat every (speaker, session) as a distinct speaker ``speaker#session``."""
    if manifest.augmented:
        raise AlreadyAugmented("manifest is already session-augmented")
    records = [replace(r, speaker_id=f"{r.speaker_id}{SESSION_SEP}{r.session}") for r in manifest.records]
    return Manifest(records, True, manifest.root)


def combine_speaker_sessions(manifest: Manifest, policy: str = "combined") -> "OrderedDict[str, list[SpeechRecord]]":
    """Group records for speaker-encoder training.

    ``combined`` merges all sessions of a base speaker; ``not-combined``
    keeps one group per ``speaker#session``.
    """
    if policy not in ("combined", "not-combined"):
        raise ConfigError(f"session policy must be 'combined' or 'not-combined', got {policy!r}")
    groups: OrderedDict[str, list[SpeechRecord]] = OrderedDict()
    for r in manifest.records:
        key = r.base_speaker if policy == "combined" else f"{r.base_speaker}{SESSION_SEP}{r.session}"
        groups.setdefault(key, []).append(r)
    return groups


def reference_visit_manifest(seed: int = 0) -> Manifest:
    """One row per visit reproducing the Pitt cookie-theft count structure.

    292 speakers (98 CN, 194 IM) with 552 visits (242 CN, 310 IM); the sex
    split per class matches before and after augmentation. Ages and MMSE are
    random draws inside the reported ranges.
    """
    rng = np.random.default_rng(seed)
    # (label, sex, sessions per speaker, number of such speakers)
    layout = [
        ("CN", "M", 3, 9), ("CN", "M", 2, 30),
        ("CN", "F", 3, 37), ("CN", "F", 2, 22),
        ("IM", "M", 2, 52), ("IM", "M", 1, 16),
        ("IM", "F", 2, 64), ("IM", "F", 1, 62),
    ]  # fmt: skip
    records = []
    idx = 0
    for label, sex, n_sessions, n_speakers in layout:
        for _ in range(n_speakers):
            spk = f"{idx:03d}"
            idx += 1
            age0 = float(np.clip(rng.normal(64.0 if label == "CN" else 71.2, 8.0), 46, 88))
            for s in range(n_sessions):
                if label == "CN":
                    mmse = int(np.clip(round(rng.normal(29.1, 1.1)), 24, 30))
                else:
                    mmse = int(np.clip(round(rng.normal(19.8, 5.5)), 1, 30))
                records.append(SpeechRecord(spk, s, label, round(age0 + s, 1), sex, mmse, f"{spk}-{s}.wav"))
    return Manifest(records, False)


# --- synthetic corpus -------------------------------------------------------

VOWEL_FORMANTS = np.array(
    [
        [730.0, 1090.0, 2440.0],
        [270.0, 2290.0, 3010.0],
        [300.0, 870.0, 2240.0],
        [530.0, 1840.0, 2480.0],
        [570.0, 840.0, 2410.0],
    ]
)
FORMANT_BANDWIDTHS = np.array([80.0, 100.0, 130.0])


@dataclass
class CorpusSpec:
    n_speakers: int = 20
    utterances_per_speaker: int = 10  # per session
    sessions_per_speaker: int = 1
    content_classes: int = 2
    seed: int = 0
    duration: float = 3.0
    sample_rate: int = audio.SAMPLE_RATE
    progression: float = 0.0  # chance a CN speaker turns IM at each later session
    prefix: str = "spk"


@dataclass
class SpeakerProfile:
    f0: float
    formant_scale: float
    tilt_db: float
    bandwidth_scale: float
    vibrato_hz: float


# (syllable duration range, gap range, pause probability, pause range) per class
_RHYTHM = {
    "CN": ((0.14, 0.22), (0.07, 0.11), 0.05, (0.15, 0.3)),
    "IM": ((0.22, 0.34), (0.09, 0.15), 0.3, (0.3, 0.6)),
}


def _draw_profile(rng) -> SpeakerProfile:
    return SpeakerProfile(
        f0=float(np.exp(rng.uniform(np.log(85.0), np.log(255.0)))),
        formant_scale=float(rng.uniform(0.82, 1.22)),
        tilt_db=float(rng.uniform(-12.0, -5.0)),
        bandwidth_scale=float(rng.uniform(0.7, 1.5)),
        vibrato_hz=float(rng.uniform(3.0, 7.0)),
    )


def _drift(p: SpeakerProfile, rng) -> SpeakerProfile:
    return replace(
        p,
        f0=p.f0 * float(1 + rng.normal(0, 0.03)),
        formant_scale=p.formant_scale * float(1 + rng.normal(0, 0.01)),
    )


def _syllable(profile: SpeakerProfile, vowel: int, dur: float, sr: int, rng) -> np.ndarray:
    n = int(dur * sr)
    t = np.arange(n) / sr
    contour = profile.f0 * (1 + 0.04 * np.sin(2 * np.pi * profile.vibrato_hz * t)) * (1 + rng.uniform(-0.08, 0.08))
    phase = 2 * np.pi * np.cumsum(contour) / sr
    formants = VOWEL_FORMANTS[vowel] * profile.formant_scale
    bws = FORMANT_BANDWIDTHS * profile.bandwidth_scale
    n_harm = int(7600 // (contour.max()))
    k = np.arange(1, n_harm + 1)
    f = k * profile.f0
    env = np.sum(1.0 / (1.0 + ((f[:, None] - formants[None, :]) / bws[None, :]) ** 2), axis=1)
    env *= 10 ** (profile.tilt_db * np.log2(np.maximum(f, 50.0) / 100.0) / 20.0)
    wave = (env[:, None] * np.sin(k[:, None] * phase[None, :])).sum(axis=0)
    # short noisy onset standing in for a consonant
    onset = min(n, int(0.025 * sr))
    wave[:onset] += rng.normal(0, 0.3 * np.abs(wave).max(), onset) * np.linspace(1, 0, onset)
    ramp = min(n // 2, int(0.02 * sr))
    shape = np.ones(n)
    shape[:ramp] = np.linspace(0, 1, ramp)
    shape[n - ramp :] = np.linspace(1, 0, ramp)
    return wave * shape


def synthesize_utterance(profile: SpeakerProfile, label: str, duration: float, sr: int, rng) -> np.ndarray:
    (d_lo, d_hi), (g_lo, g_hi), p_pause, (pz_lo, pz_hi) = _RHYTHM[label]
    n = int(duration * sr)
    out = np.zeros(n)
    cursor = rng.uniform(0.05, 0.15)
    while True:
        dur = rng.uniform(d_lo, d_hi)
        if cursor + dur > duration - 0.05:
            break
        syl = _syllable(profile, int(rng.integers(len(VOWEL_FORMANTS))), dur, sr, rng)
        start = int(cursor * sr)
        out[start : start + syl.shape[0]] += syl
        cursor += dur + rng.uniform(g_lo, g_hi)
        if rng.random() < p_pause:
            cursor += rng.uniform(pz_lo, pz_hi)
    out /= max(np.abs(out).max(), 1e-9)
    out = 0.5 * out + rng.normal(0, 5e-5, n)
    return np.clip(out, -1.0, 1.0)


def generate_synthetic_corpus(spec: CorpusSpec, out_dir) -> Manifest:
    """Write a seeded corpus of synthetic speech and its manifest.

    Speakers differ by pitch, formant scaling, spectral tilt and bandwidth.
    Impaired (IM) sessions speak slower syllables with longer gaps and more
    pauses; that rhythm cue is independent of the speaker profile.
    """
    if spec.n_speakers < 2:
        raise ConfigError("a synthetic corpus needs at least 2 speakers")
    if spec.content_classes not in (1, 2):
        raise ConfigError("content_classes must be 1 or 2")
    if spec.utterances_per_speaker < 1 or spec.sessions_per_speaker < 1:
        raise ConfigError("need at least one utterance and one session per speaker")
    out_dir = Path(out_dir)
    root_rng = np.random.default_rng(spec.seed)
    impaired = np.zeros(spec.n_speakers, dtype=bool)
    if spec.content_classes == 2:
        impaired[root_rng.permutation(spec.n_speakers)[: spec.n_speakers // 2]] = True
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_speakers)
    records = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        base = _draw_profile(rng)
        spk = f"{spec.prefix}{i:03d}"
        label = "IM" if impaired[i] else "CN"
        age = float(np.clip(rng.normal(71.2 if label == "IM" else 64.0, 8.0), 46, 88))
        sex = "F" if base.f0 > 165.0 else "M"
        for s in range(spec.sessions_per_speaker):
            if s > 0 and label == "CN" and spec.content_classes == 2 and rng.random() < spec.progression:
                label = "IM"
            profile = _drift(base, rng) if s > 0 else base
            mmse = int(np.clip(round(rng.normal(29.1, 1.1) if label == "CN" else rng.normal(19.8, 5.5)), 0, 30))
            for u in range(spec.utterances_per_speaker):
                wave = synthesize_utterance(profile, label, spec.duration, spec.sample_rate, rng)
                rel = f"wav/{spk}_s{s}_u{u:02d}.wav"
                audio.write_wav(out_dir / rel, audio.AudioSegment(wave, spec.sample_rate))
                records.append(SpeechRecord(spk, s, label, round(age + s, 1), sex, mmse, rel))
    manifest = Manifest(records, False, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def voiced_segment_rate(segment: audio.AudioSegment, vad: audio.VADConfig = audio.VADConfig()) -> float:
    """Voiced runs per second after loudness normalisation."""
    seg = audio.normalize_loudness(audio.resample(segment))
    return len(audio.voiced_segments(seg, vad)) / seg.duration

"""GE2E speaker encoder.

A stacked LSTM reads a 40-bin log-mel crop, the last hidden state is
projected to 256 dimensions and L2-normalised. Training uses the softmax
variant of the generalized end-to-end loss with a learnable affine ``(w, b)``
on cosine similarities. ``mode="finetune"`` updates only the projection and
``(w, b)``.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import audio
from .errors import (
    ConfigError,
    ConfigMismatch,
    DegenerateBatch,
    DegenerateTrials,
    EmptyInput,
    MixedSpeakers,
)
from .tensorio import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EMBED_DIM = 256
SEGMENT_FRAMES = 160
W_MIN = 1e-4
FINETUNE_PREFIXES = ("projection.", "similarity_w", "similarity_b")
RECURRENT_PREFIXES = ("lstm.",)


@dataclass
class SpeakerEmbedding:
    values: np.ndarray
    level: str = "utterance"  # "utterance" | "speaker"
    speaker_id: str = ""
    normalized: bool = True


@dataclass
class SpeakerEncoderConfig:
    n_mels: int = 40
    hidden: int = 256
    num_layers: int = 3
    embed_dim: int = EMBED_DIM
    w_init: float = 10.0
    b_init: float = -5.0

    @classmethod
    def desk(cls):
        return cls(hidden=64)


@dataclass
class SpeakerTrainConfig:
    steps: int = 2000
    speakers_per_batch: int = 8
    utterances_per_speaker: int = 5
    num_frames: int = SEGMENT_FRAMES
    lr: float = 1e-3
    grad_clip: float = 3.0
    pad_short: bool = True
    seed: int = 0
    log_every: int = 50


class SpeakerEncoder(nn.Module):
    def __init__(self, config: SpeakerEncoderConfig | None = None):
        super().__init__()
        self.config = config or SpeakerEncoderConfig()
        c = self.config
        self.lstm = nn.LSTM(c.n_mels, c.hidden, c.num_layers, batch_first=True)
        self.projection = nn.Linear(c.hidden, c.embed_dim)
        self.similarity_w = nn.Parameter(torch.tensor(float(c.w_init)))
        self.similarity_b = nn.Parameter(torch.tensor(float(c.b_init)))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(batch, frames, n_mels) -> (batch, embed_dim), unit norm."""
        _, (hidden, _) = self.lstm(frames)
        return F.normalize(self.projection(hidden[-1]), p=2, dim=-1)


def _window_starts(n_frames: int, width: int = SEGMENT_FRAMES, hop: int = SEGMENT_FRAMES // 2) -> list[int]:
    """Window offsets at 50% overlap; a final window is aligned to the end when needed."""
    if n_frames <= width:
        return [0]
    starts = list(range(0, n_frames - width + 1, hop))
    if starts[-1] + width < n_frames:
        starts.append(n_frames - width)
    return starts


def _check_speaker_mel(mel: audio.MelSpectrogram, n_mels: int):
    if mel.config_id != audio.SPEAKER.name or mel.values.shape[0] != n_mels:
        raise ConfigMismatch(
            f"speaker encoder expects {n_mels}-bin '{audio.SPEAKER.name}' mels, "
            f"got {mel.values.shape[0]}-bin '{mel.config_id}'"
        )


@torch.no_grad()
def embed_utterance(mel: audio.MelSpectrogram, model: SpeakerEncoder, speaker_id: str = "") -> SpeakerEmbedding:
    """Utterance embedding; long inputs are windowed, averaged and re-normalised."""
    _check_speaker_mel(mel, model.config.n_mels)
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(mel.values.T))
    windows = torch.stack([x[s : s + SEGMENT_FRAMES] for s in _window_starts(x.shape[0])])
    emb = model(windows).mean(dim=0)
    emb = F.normalize(emb, p=2, dim=-1)
    return SpeakerEmbedding(emb.numpy().astype(np.float64), "utterance", speaker_id, True)


def average_speaker_embedding(utterance_embs: Sequence[SpeakerEmbedding]) -> SpeakerEmbedding:
    """Component-wise mean of utterance embeddings. Not re-normalised."""
    if not utterance_embs:
        raise EmptyInput("no utterance embeddings to average")
    ids = {e.speaker_id for e in utterance_embs}
    if len(ids) > 1:
        raise MixedSpeakers(f"embeddings from several speakers: {sorted(ids)}")
    if any(e.level != "utterance" for e in utterance_embs):
        raise ConfigError("only utterance-level embeddings can be averaged")
    mean = np.mean(np.stack([e.values for e in utterance_embs]), axis=0)
    return SpeakerEmbedding(mean, "speaker", ids.pop(), False)


def one_hot_speaker_embedding(speaker_index: int, n_speakers: int) -> np.ndarray:
    if not 0 <= speaker_index < n_speakers:
        raise IndexError(f"speaker index {speaker_index} out of range for {n_speakers} speakers")
    vec = np.zeros(n_speakers, dtype=np.float32)
    vec[speaker_index] = 1.0
    return vec


def _similarity(emb: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    S, U, _ = emb.shape
    if U < 2:
        raise DegenerateBatch("GE2E needs at least 2 utterances per speaker")
    centroids = emb.mean(dim=1)  # (S, D)
    loo = (emb.sum(dim=1, keepdim=True) - emb) / (U - 1)  # (S, U, D)
    unit = F.normalize(emb, dim=-1)
    cos = torch.einsum("sud,kd->suk", unit, F.normalize(centroids, dim=-1))
    own = (unit * F.normalize(loo, dim=-1)).sum(dim=-1)  # (S, U)
    mask = torch.eye(S, dtype=torch.bool, device=emb.device).unsqueeze(1).expand(S, U, S)
    cos = torch.where(mask, own.unsqueeze(-1).expand(S, U, S), cos)
    return w * cos + b


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def ge2e_similarity_matrix(embeddings, w=1.0, b=0.0):
    """``[S, U, S]`` scaled cosine similarities with leave-one-out own centroids.

    Accepts numpy or torch input and returns the same kind.
    """
    emb, was_numpy = _as_tensor(embeddings)
    if emb.ndim != 3 or emb.shape[0] < 2:
        raise DegenerateBatch(f"expected [S>=2, U>=2, D] embeddings, got shape {tuple(emb.shape)}")
    w_t, _ = _as_tensor(w)
    b_t, _ = _as_tensor(b)
    if float(w_t.detach()) <= 0:
        raise ConfigError("similarity scale w must be positive")
    sim = _similarity(emb, w_t.to(emb.dtype), b_t.to(emb.dtype))
    return sim.numpy() if was_numpy else sim


def ge2e_loss(sim):
    """Sum over (speaker, utterance) of -log softmax at the true speaker."""
    s, was_numpy = _as_tensor(sim)
    S, U, _ = s.shape
    target = torch.arange(S, device=s.device).repeat_interleave(U)
    loss = F.cross_entropy(s.reshape(S * U, S), target, reduction="sum")
    return float(loss) if was_numpy else loss


def _usable(mels: Mapping[str, Sequence[audio.MelSpectrogram]], num_frames: int, pad: bool):
    out = {}
    for spk, utts in mels.items():
        ok = [m for m in utts if pad or m.n_frames >= num_frames]
        if len(ok) >= 2:
            out[spk] = ok
    return out


def train_ge2e(
    model: nn.Module,
    mels: Mapping[str, Sequence[audio.MelSpectrogram]],
    config: SpeakerTrainConfig,
    trainable_prefixes=None,
    stop_when=None,
):
    """GE2E optimisation loop shared by every model exposing ``similarity_w/b``.

    Trains ``model`` in place. Only parameters whose names start with one of
    ``trainable_prefixes`` are updated (all when None).
    """
    usable = _usable(mels, config.num_frames, config.pad_short)
    if len(usable) < 2:
        raise DegenerateBatch("need at least 2 speakers with 2 usable utterances each")
    if config.utterances_per_speaker < 2:
        raise DegenerateBatch("GE2E needs at least 2 utterances per speaker")
    torch.manual_seed(config.seed)
    for name, p in model.named_parameters():
        p.requires_grad_(trainable_prefixes is None or name.startswith(tuple(trainable_prefixes)))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    speakers = sorted(usable)
    n_spk = min(config.speakers_per_batch, len(speakers))
    history: list[float] = []
    model.train()
    for step in range(config.steps):
        chosen = [speakers[i] for i in sorted(rng.choice(len(speakers), n_spk, replace=False))]
        batch = audio.sample_partial_frames(
            {k: usable[k] for k in chosen},
            config.utterances_per_speaker,
            config.num_frames,
            rng,
            pad=config.pad_short,
        )
        emb = model(torch.from_numpy(batch.data)).view(n_spk, config.utterances_per_speaker, -1)
        loss = ge2e_loss(_similarity(emb, model.similarity_w, model.similarity_b))
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        with torch.no_grad():
            model.similarity_w.clamp_(min=W_MIN)
        history.append(loss.item())
        if config.log_every and step % config.log_every == 0:
            log.info("step=%d ge2e=%.4f", step, history[-1])
        if stop_when is not None and stop_when(step, history):
            break
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return history


def train_speaker_encoder(
    mels: Mapping[str, Sequence[audio.MelSpectrogram]],
    config: SpeakerTrainConfig | None = None,
    mode: str = "full",
    init: SpeakerEncoder | None = None,
    encoder_config: SpeakerEncoderConfig | None = None,
    stop_when=None,
):
    """Train (``mode="full"``) or finetune a speaker encoder with GE2E.

    ``mels`` maps a speaker key to that speaker's utterance spectrograms.
    Finetuning updates only the output projection and ``(w, b)``; the LSTM
    stack is left bit-identical. ``init`` is copied, never modified.
    Returns ``(model, history)`` where history is the per-step loss list.
    ``stop_when(step, history)`` may end training early.
    """
    config = config or SpeakerTrainConfig()
    if mode not in ("full", "finetune"):
        raise ConfigError(f"mode must be 'full' or 'finetune', got {mode!r}")
    torch.manual_seed(config.seed)
    if init is not None:
        model = copy.deepcopy(init)
    elif mode == "finetune":
        raise ConfigError("finetuning needs an initial model")
    else:
        model = SpeakerEncoder(encoder_config or SpeakerEncoderConfig())
    prefixes = FINETUNE_PREFIXES if mode == "finetune" else None
    history = train_ge2e(model, mels, config, prefixes, stop_when)
    return model, history


def equal_error_rate(scores, is_target=None) -> float:
    """EER of a verification trial list.

    ``scores`` is either a sequence of ``(score, is_target)`` pairs or, with
    ``is_target`` given, a score array. A trial is accepted when
    ``score >= threshold``. If no threshold gives exactly equal false-accept
    and false-reject rates, the two rate curves are linearly interpolated
    between the straddling thresholds.
    """
    if is_target is None:
        pairs = list(scores)
        s = np.array([p[0] for p in pairs], dtype=np.float64)
        t = np.array([bool(p[1]) for p in pairs])
    else:
        s = np.asarray(scores, dtype=np.float64)
        t = np.asarray(is_target, dtype=bool)
    n_tar, n_non = int(t.sum()), int((~t).sum())
    if n_tar == 0 or n_non == 0:
        raise DegenerateTrials("EER needs both target and non-target trials")
    thresholds = np.append(np.unique(s), np.inf)
    s_tar, s_non = np.sort(s[t]), np.sort(s[~t])
    # false accept: non-targets at or above; false reject: targets below
    far = 1.0 - np.searchsorted(s_non, thresholds, side="left") / n_non
    frr = np.searchsorted(s_tar, thresholds, side="left") / n_tar
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0 or k == 0:
        return float(far[k])
    alpha = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(far[k - 1] + alpha * (far[k] - far[k - 1]))


def verification_trials(embeddings: Sequence[SpeakerEmbedding]):
    """Cosine scores and target flags over all unordered embedding pairs."""
    X = np.stack([e.values / np.linalg.norm(e.values) for e in embeddings])
    ids = np.array([e.speaker_id for e in embeddings])
    iu, ju = np.triu_indices(len(embeddings), k=1)
    scores = np.einsum("nd,nd->n", X[iu], X[ju])
    return scores, ids[iu] == ids[ju]


def format_eer_report(values: Mapping[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def parse_eer_report(text: str) -> dict[str, str]:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def save_speaker_encoder(path, model: SpeakerEncoder) -> None:
    save_checkpoint(path, model, {"kind": "speaker_encoder", **asdict(model.config)})


def load_speaker_encoder(path) -> SpeakerEncoder:
    tensors, meta = load_checkpoint(path)
    meta.pop("kind", None)
    model = SpeakerEncoder(SpeakerEncoderConfig(**meta))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model

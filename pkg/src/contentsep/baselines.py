"""Comparison speaker embeddings: d-vector and x-vector extractors.

Both read ``SPEAKER``-preset log-mels. The d-vector is a 3-layer LSTM whose
outputs are combined by attentive pooling (256 dims, trained with GE2E);
the x-vector is a time-delay stack with statistics pooling whose first
segment-level layer gives a 512-dim embedding (trained as a speaker
classifier).
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
from .errors import AudioTooShort, DegenerateBatch, DegenerateSequence, EmptyInput
from .speaker_encoder import SpeakerTrainConfig, _as_tensor, _check_speaker_mel, train_ge2e
from .tensorio import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

DVECTOR_DIM = 256
XVECTOR_DIM = 512


@dataclass
class DVector:
    values: np.ndarray
    source_id: str = ""


@dataclass
class XVector:
    values: np.ndarray
    source_id: str = ""


def attention_weights(scores):
    s, was_numpy = _as_tensor(scores)
    w = torch.softmax(s, dim=-1)
    return w.numpy() if was_numpy else w


def attentive_pooling(frames, weight, bias=0.0):
    """Softmax-weighted sum of frames, scores ``frames @ weight + bias``."""
    h, was_numpy = _as_tensor(frames)
    if h.shape[-2] == 0:
        raise EmptyInput("attentive pooling of an empty sequence")
    w, _ = _as_tensor(weight)
    b, _ = _as_tensor(bias)
    scores = h @ w.to(h.dtype).reshape(-1) + b.to(h.dtype)
    alpha = torch.softmax(scores, dim=-1)
    out = (alpha.unsqueeze(-1) * h).sum(dim=-2)
    return out.numpy() if was_numpy else out


def statistics_pooling(frames):
    """Per-dimension mean and population standard deviation, concatenated.

    ``frames`` is ``(..., T, D)``; the result is ``(..., 2 * D)``.
    """
    h, was_numpy = _as_tensor(frames)
    if h.shape[-2] < 2:
        raise DegenerateSequence(f"statistics pooling needs at least 2 frames, got {h.shape[-2]}")
    mean = h.mean(dim=-2)
    std = torch.sqrt(torch.clamp(((h - mean.unsqueeze(-2)) ** 2).mean(dim=-2), min=0.0))
    out = torch.cat([mean, std], dim=-1)
    return out.numpy() if was_numpy else out


@dataclass
class DVectorConfig:
    n_mels: int = 40
    hidden: int = 768
    num_layers: int = 3
    embed_dim: int = DVECTOR_DIM
    w_init: float = 10.0
    b_init: float = -5.0

    @classmethod
    def desk(cls):
        return cls(hidden=64)


class DVectorNet(nn.Module):
    def __init__(self, config: DVectorConfig | None = None):
        super().__init__()
        self.config = config or DVectorConfig()
        c = self.config
        self.lstm = nn.LSTM(c.n_mels, c.hidden, c.num_layers, batch_first=True)
        self.attention = nn.Linear(c.hidden, 1)
        self.embedding = nn.Linear(c.hidden, c.embed_dim)
        self.similarity_w = nn.Parameter(torch.tensor(float(c.w_init)))
        self.similarity_b = nn.Parameter(torch.tensor(float(c.b_init)))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        out, _ = self.lstm(frames)
        pooled = attentive_pooling(out, self.attention.weight[0], self.attention.bias[0])
        return F.normalize(self.embedding(pooled), p=2, dim=-1)


@torch.no_grad()
def d_vector(mel: audio.MelSpectrogram, model: DVectorNet) -> DVector:
    _check_speaker_mel(mel, model.config.n_mels)
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(mel.values.T)).unsqueeze(0)
    return DVector(model(x)[0].numpy().astype(np.float64), mel.source_id)


def train_d_vector(mels, config: SpeakerTrainConfig | None = None, model_config: DVectorConfig | None = None, stop_when=None):
    config = config or SpeakerTrainConfig()
    torch.manual_seed(config.seed)
    model = DVectorNet(model_config or DVectorConfig())
    history = train_ge2e(model, mels, config, None, stop_when)
    return model, history


class TimeDelayLayer(nn.Module):
    """Dilated 1-D convolution over time, no padding, then ReLU and batch norm."""

    def __init__(self, c_in, c_out, context: int, dilation: int = 1, activation: bool = True):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel_size=2 * context + 1, dilation=dilation)
        self.activation = activation
        self.norm = nn.BatchNorm1d(c_out) if activation else None

    @property
    def receptive_half(self) -> int:
        return self.conv.dilation[0] * (self.conv.kernel_size[0] - 1) // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        if self.activation:
            x = self.norm(F.relu(x))
        return x


@dataclass
class XVectorConfig:
    n_mels: int = 40
    frame_width: int = 512
    stats_width: int = 1536
    embed_dim: int = XVECTOR_DIM
    n_speakers: int = 2

    @classmethod
    def desk(cls, n_speakers: int = 2):
        return cls(frame_width=128, stats_width=384, n_speakers=n_speakers)


class XVectorNet(nn.Module):
    # (context, dilation) per frame-level layer
    LAYOUT = ((2, 1), (1, 2), (1, 3), (0, 1), (0, 1))

    def __init__(self, config: XVectorConfig | None = None):
        super().__init__()
        self.config = config or XVectorConfig()
        c = self.config
        widths = [c.n_mels, c.frame_width, c.frame_width, c.frame_width, c.frame_width, c.stats_width]
        self.frames = nn.ModuleList(
            TimeDelayLayer(a, b, ctx, dil) for (a, b), (ctx, dil) in zip(zip(widths[:-1], widths[1:]), self.LAYOUT)
        )
        self.segment6 = nn.Linear(2 * c.stats_width, c.embed_dim)
        self.segment7 = nn.Linear(c.embed_dim, c.embed_dim)
        self.output = nn.Linear(c.embed_dim, c.n_speakers)

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * sum(layer.receptive_half for layer in self.frames)

    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        """(batch, T, n_mels) -> (batch, embed_dim) from the first segment layer."""
        x = frames.transpose(1, 2)
        for layer in self.frames:
            x = layer(x)
        return self.segment6(statistics_pooling(x.transpose(1, 2)))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.embed(frames))
        return self.output(F.relu(self.segment7(x)))


@torch.no_grad()
def x_vector(mel: audio.MelSpectrogram, model: XVectorNet) -> XVector:
    _check_speaker_mel(mel, model.config.n_mels)
    if mel.n_frames < model.receptive_field + 1:
        raise AudioTooShort(f"{mel.n_frames} frames; the time-delay stack needs {model.receptive_field + 1}")
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(mel.values.T)).unsqueeze(0)
    return XVector(model.embed(x)[0].numpy().astype(np.float64), mel.source_id)


def train_x_vector(
    mels: Mapping[str, Sequence[audio.MelSpectrogram]],
    config: SpeakerTrainConfig | None = None,
    model_config: XVectorConfig | None = None,
    stop_when=None,
):
    """Speaker-classification training on random crops; returns ``(model, history)``."""
    config = config or SpeakerTrainConfig()
    speakers = sorted(k for k, v in mels.items() if v)
    if len(speakers) < 2:
        raise DegenerateBatch("x-vector training needs at least 2 speakers")
    torch.manual_seed(config.seed)
    mc = copy.deepcopy(model_config) if model_config else XVectorConfig()
    mc.n_speakers = len(speakers)
    model = XVectorNet(mc)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    n_spk = min(config.speakers_per_batch, len(speakers))
    history = []
    model.train()
    for step in range(config.steps):
        idx = sorted(rng.choice(len(speakers), n_spk, replace=False))
        batch = audio.sample_partial_frames(
            {speakers[i]: mels[speakers[i]] for i in idx},
            config.utterances_per_speaker,
            config.num_frames,
            rng,
            pad=True,
        )
        target = torch.tensor(np.repeat(idx, config.utterances_per_speaker))
        loss = F.cross_entropy(model(torch.from_numpy(batch.data)), target)
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        history.append(loss.item())
        if config.log_every and step % config.log_every == 0:
            log.info("step=%d xent=%.4f", step, history[-1])
        if stop_when is not None and stop_when(step, history):
            break
    model.eval()
    return model, history


def save_baseline(path, model) -> None:
    kind = "dvector" if isinstance(model, DVectorNet) else "xvector"
    save_checkpoint(path, model, {"kind": kind, **asdict(model.config)})


def load_baseline(path):
    tensors, meta = load_checkpoint(path)
    kind = meta.pop("kind")
    model = DVectorNet(DVectorConfig(**meta)) if kind == "dvector" else XVectorNet(XVectorConfig(**meta))
    state = model.state_dict()
    model.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in tensors.items()})
    model.eval()
    return model

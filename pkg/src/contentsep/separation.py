"""Autoencoder that separates content from speaker identity.

The content encoder reads an 80-bin mel spectrogram with the speaker
conditioning vector appended to every frame and emits a bottleneck code of
64 channels at 1/32 of the frame rate (32 forward + 32 backward LSTM
units). The decoder upsamples the code back to frame rate, appends the
conditioning vector again and produces an initial reconstruction; a
post-network adds a residual on top of it.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import audio
from .errors import ConfigMismatch, MissingSpeaker, ShapeError
from .speaker_encoder import (
    SpeakerEncoder,
    average_speaker_embedding,
    embed_utterance,
    one_hot_speaker_embedding,
)
from .tensorio import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

DOWNSAMPLE = 32
NECK = 32


@dataclass
class ContentEmbedding:
    values: np.ndarray  # (64, K)
    source_id: str = ""
    n_frames: int = 0  # frame count of the source mel before padding

    @property
    def forward_half(self) -> np.ndarray:
        return self.values[:NECK]

    @property
    def backward_half(self) -> np.ndarray:
        return self.values[NECK:]


@dataclass
class ReconstructionPair:
    initial: np.ndarray
    residual: np.ndarray
    final: np.ndarray


@dataclass
class SeparationLossBreakdown:
    recon: float
    recon0: float
    content: float
    mu: float
    lam: float
    total: float


@dataclass
class SeparatorConfig:
    cond_dim: int = 256
    n_mels: int = 80
    enc_channels: int = 512
    neck: int = NECK
    freq: int = DOWNSAMPLE
    dec_channels: int = 512
    dec_lstm: int = 1024
    dec_layers: int = 3
    post_channels: int = 512
    post_layers: int = 5
    # fixed affine map of the log-mel range [log_floor, ~2] onto roughly [-2, 2]
    mel_center: float = -6.0
    mel_scale: float = 4.0

    @classmethod
    def desk(cls, cond_dim: int = 256):
        return cls(cond_dim=cond_dim, enc_channels=128, dec_channels=128, dec_lstm=192, post_channels=96)


@dataclass
class SeparatorTrainConfig:
    steps: int = 5000
    batch_size: int = 8
    crop_frames: int = 128
    lr: float = 1e-3
    mu: float = 1.0
    lam: float = 1.0
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None


def _conv_block(c_in, c_out, activation=nn.ReLU):
    layers = [
        nn.Conv1d(c_in, c_out, kernel_size=5, padding=2),
        nn.GroupNorm(max(1, c_out // 16), c_out),
    ]
    if activation is not None:
        layers.append(activation())
    return nn.Sequential(*layers)


class ContentEncoder(nn.Module):
    def __init__(self, c: SeparatorConfig):
        super().__init__()
        self.freq = c.freq
        self.neck = c.neck
        self.center, self.scale = c.mel_center, c.mel_scale
        chans = [c.n_mels + c.cond_dim, c.enc_channels, c.enc_channels, c.enc_channels]
        self.convolutions = nn.ModuleList(_conv_block(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.lstm = nn.LSTM(c.enc_channels, c.neck, 2, batch_first=True, bidirectional=True)

    def forward(self, mel: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """(B, n_mels, T), (B, cond_dim) -> codes (B, T // freq, 2 * neck)."""
        mel = (mel - self.center) / self.scale
        x = torch.cat([mel, cond.unsqueeze(-1).expand(-1, -1, mel.shape[-1])], dim=1)
        for conv in self.convolutions:
            x = conv(x)
        out, _ = self.lstm(x.transpose(1, 2))
        fwd = out[:, self.freq - 1 :: self.freq, : self.neck]
        bwd = out[:, :: self.freq, self.neck :]
        return torch.cat([fwd, bwd], dim=-1)


class Decoder(nn.Module):
    def __init__(self, c: SeparatorConfig):
        super().__init__()
        self.freq = c.freq
        self.center, self.scale = c.mel_center, c.mel_scale
        chans = [2 * c.neck + c.cond_dim, c.dec_channels, c.dec_channels, c.dec_channels]
        self.convolutions = nn.ModuleList(_conv_block(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.lstm = nn.LSTM(c.dec_channels, c.dec_lstm, c.dec_layers, batch_first=True)
        self.projection = nn.Linear(c.dec_lstm, c.n_mels)

    def forward(self, codes: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """codes (B, K, 2 * neck) -> initial estimate (B, n_mels, K * freq)."""
        up = codes.repeat_interleave(self.freq, dim=1)
        x = torch.cat([up, cond.unsqueeze(1).expand(-1, up.shape[1], -1)], dim=-1).transpose(1, 2)
        for conv in self.convolutions:
            x = conv(x)
        out, _ = self.lstm(x.transpose(1, 2))
        return self.projection(out).transpose(1, 2) * self.scale + self.center


class Postnet(nn.Module):
    def __init__(self, c: SeparatorConfig):
        super().__init__()
        chans = [c.n_mels] + [c.post_channels] * (c.post_layers - 1) + [c.n_mels]
        blocks = [_conv_block(a, b, nn.Tanh) for a, b in zip(chans[:-2], chans[1:-1])]
        blocks.append(_conv_block(chans[-2], chans[-1], None))
        self.convolutions = nn.ModuleList(blocks)
        self.center, self.scale = c.mel_center, c.mel_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - self.center) / self.scale
        for conv in self.convolutions:
            x = conv(x)
        return x * self.scale


class Separator(nn.Module):
    def __init__(self, config: SeparatorConfig | None = None):
        super().__init__()
        self.config = config or SeparatorConfig()
        self.encoder = ContentEncoder(self.config)
        self.decoder = Decoder(self.config)
        self.postnet = Postnet(self.config)

    def forward(self, mel: torch.Tensor, cond: torch.Tensor):
        """Returns ``(codes, initial, residual, codes_of_final)``."""
        codes = self.encoder(mel, cond)
        initial = self.decoder(codes, cond)
        residual = self.postnet(initial)
        final = initial + residual
        return codes, initial, residual, self.encoder(final, cond)


def padded_length(n_frames: int, freq: int = DOWNSAMPLE) -> int:
    return max(freq, -(-n_frames // freq) * freq)


def pad_mel(values: np.ndarray, freq: int = DOWNSAMPLE, floor: float = audio.CONTENT.log_floor) -> np.ndarray:
    """Right-pad along time with ``floor`` up to a multiple of ``freq``."""
    T = values.shape[1]
    target = padded_length(T, freq)
    if target == T:
        return values
    return np.pad(values, ((0, 0), (0, target - T)), constant_values=floor)


def _cond_tensor(conditioning, model: Separator) -> torch.Tensor:
    vec = np.asarray(conditioning, dtype=np.float32).reshape(-1)
    if vec.shape[0] != model.config.cond_dim:
        raise ConfigMismatch(f"conditioning width {vec.shape[0]} != separator cond_dim {model.config.cond_dim}")
    return torch.from_numpy(vec).unsqueeze(0)


@torch.no_grad()
def content_encode(mel: audio.MelSpectrogram, conditioning, model: Separator) -> ContentEmbedding:
    if mel.config_id != audio.CONTENT.name or mel.values.shape[0] != model.config.n_mels:
        raise ConfigMismatch(
            f"content encoder expects {model.config.n_mels}-bin '{audio.CONTENT.name}' mels, "
            f"got {mel.values.shape[0]}-bin '{mel.config_id}'"
        )
    cond = _cond_tensor(conditioning, model)
    model.eval()
    x = torch.from_numpy(pad_mel(mel.values, model.config.freq).astype(np.float32)).unsqueeze(0)
    codes = model.encoder(x, cond)[0]  # (K, 64)
    return ContentEmbedding(codes.T.numpy().copy(), mel.source_id, mel.n_frames)


@torch.no_grad()
def decode(content: ContentEmbedding, conditioning, model: Separator) -> ReconstructionPair:
    if content.values.ndim != 2 or content.values.shape[0] != 2 * model.config.neck:
        raise ShapeError(f"content embedding must have {2 * model.config.neck} rows, got {content.values.shape}")
    cond = _cond_tensor(conditioning, model)
    model.eval()
    codes = torch.from_numpy(content.values.T.astype(np.float32).copy()).unsqueeze(0)
    initial = model.decoder(codes, cond)
    residual = model.postnet(initial)
    # widened so the float32 sum is exact and final - initial == residual
    initial_np = initial[0].numpy().astype(np.float64)
    residual_np = residual[0].numpy().astype(np.float64)
    return ReconstructionPair(initial_np, residual_np, initial_np + residual_np)


def _loss_terms(X, initial, final, C, C_hat, mu, lam):
    recon = torch.mean(torch.abs(final - X))
    recon0 = torch.mean(torch.abs(initial - X))
    content = torch.mean(torch.abs(C_hat - C))
    return recon, recon0, content, recon + mu * recon0 + lam * content


def separation_loss(X, pair: ReconstructionPair, C, C_hat, mu: float = 1.0, lam: float = 1.0) -> SeparationLossBreakdown:
    """Reconstruction (post-net and initial) plus content-consistency L1 terms.

    The content term is the element-wise absolute difference averaged over
    the whole code tensor. A reconstruction of a right-padded mel is
    compared on the original frames only.
    """
    X = np.asarray(getattr(X, "values", X), dtype=np.float64)
    C = np.asarray(getattr(C, "values", C), dtype=np.float64)
    C_hat = np.asarray(getattr(C_hat, "values", C_hat), dtype=np.float64)
    initial, final = pair.initial, pair.final
    if X.ndim == 2 and final.ndim == 2 and final.shape[1] == padded_length(X.shape[1]) > X.shape[1]:
        initial, final = initial[:, : X.shape[1]], final[:, : X.shape[1]]
    if X.shape != final.shape or X.shape != initial.shape:
        raise ShapeError(f"mel shape {X.shape} does not match reconstruction {pair.final.shape}")
    if C.shape != C_hat.shape:
        raise ShapeError(f"content shapes differ: {C.shape} vs {C_hat.shape}")
    t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float64))  # noqa: E731
    recon, recon0, content, total = _loss_terms(t(X), t(initial), t(final), t(C), t(C_hat), mu, lam)
    return SeparationLossBreakdown(float(recon), float(recon0), float(content), mu, lam, float(total))


def train_separator(
    mels: Mapping[str, Sequence[audio.MelSpectrogram]],
    conditioning: Mapping[str, np.ndarray],
    config: SeparatorTrainConfig | None = None,
    model_config: SeparatorConfig | None = None,
    init: Separator | None = None,
    stop_when=None,
    progress=None,
):
    """Optimise encoder, decoder and post-net on same-speaker reconstruction.

    ``mels`` maps speaker key to content-preset spectrograms; every key must
    have a vector in ``conditioning``. The conditioning vectors are treated
    as constants. ``progress`` (a text stream) receives one record per
    logged step. Returns ``(model, history)`` with per-step loss tuples
    ``(recon, recon0, content, total)``.
    """
    config = config or SeparatorTrainConfig()
    missing = [k for k in mels if k not in conditioning]
    if missing:
        raise MissingSpeaker(f"no conditioning vector for {missing[:5]}")
    cond_dim = len(next(iter(conditioning.values())))
    torch.manual_seed(config.seed)
    if init is not None:
        model = copy.deepcopy(init)
    else:
        model = Separator(model_config or SeparatorConfig(cond_dim=cond_dim))
    if model.config.cond_dim != cond_dim:
        raise ConfigMismatch(f"conditioning width {cond_dim} != separator cond_dim {model.config.cond_dim}")
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    keys = sorted(mels)
    cond_table = {k: torch.as_tensor(np.asarray(conditioning[k], dtype=np.float32)) for k in keys}
    history: list[tuple[float, float, float, float]] = []
    model.train()
    for step in range(config.steps):
        chosen = [keys[i] for i in rng.choice(len(keys), config.batch_size, replace=len(keys) < config.batch_size)]
        rows = []
        for k in chosen:
            batch = audio.sample_partial_frames({k: mels[k]}, 1, config.crop_frames, rng, pad=True)
            rows.append(batch.data[0].T)
        X = torch.from_numpy(np.stack(rows))
        cond = torch.stack([cond_table[k] for k in chosen])
        codes, initial, residual, codes_hat = model(X, cond)
        # the input's codes act as the consistency target; letting gradients reach
        # them too rewards shrinking every code towards a constant
        recon, recon0, content, total = _loss_terms(
            X, initial, initial + residual, codes.detach(), codes_hat, config.mu, config.lam
        )
        opt.zero_grad()
        total.backward()
        opt.step()
        history.append((recon.item(), recon0.item(), content.item(), total.item()))
        if config.log_every and step % config.log_every == 0:
            line = "step={} recon={:.6f} recon0={:.6f} content={:.6f} total={:.6f}".format(step, *history[-1])
            log.info(line)
            if progress is not None:
                progress.write(line + "\n")
        if config.checkpoint_every and config.checkpoint_dir and (step + 1) % config.checkpoint_every == 0:
            save_separator(Path(config.checkpoint_dir) / f"separator_step{step + 1}.cstc", model)
        if stop_when is not None and stop_when(step, history):
            break
    model.eval()
    return model, history


def parse_progress_line(line: str) -> dict[str, float]:
    out = {}
    for item in line.split():
        key, value = item.split("=", 1)
        out[key] = int(value) if key == "step" else float(value)
    return out


def speaker_conditioning(
    groups: Mapping[str, Sequence[audio.MelSpectrogram]], encoder: SpeakerEncoder
) -> dict[str, np.ndarray]:
    """Speaker-level conditioning: mean of each group's utterance embeddings."""
    table = {}
    for key, utts in groups.items():
        embs = [embed_utterance(m, encoder, key) for m in utts]
        table[key] = average_speaker_embedding(embs).values.astype(np.float32)
    return table


def one_hot_conditioning(keys: Sequence[str]) -> dict[str, np.ndarray]:
    ordered = sorted(set(keys))
    return {k: one_hot_speaker_embedding(i, len(ordered)) for i, k in enumerate(ordered)}


def extract_content(
    mels: Sequence[audio.MelSpectrogram],
    key: str,
    conditioning: Mapping[str, np.ndarray],
    model: Separator,
    source_id: str | None = None,
) -> ContentEmbedding:
    """Content embedding of a whole sample.

    The sample's utterances are joined along time and encoded with the
    speaker-level vector stored under ``key``.
    """
    if key not in conditioning:
        raise MissingSpeaker(f"no conditioning vector for speaker {key!r}")
    joined = audio.MelSpectrogram(
        np.concatenate([m.values for m in mels], axis=1), audio.CONTENT.name, source_id or key
    )
    return content_encode(joined, conditioning[key], model)


def save_separator(path, model: Separator) -> None:
    save_checkpoint(path, model, {"kind": "separator", **asdict(model.config)})


def load_separator(path) -> Separator:
    tensors, meta = load_checkpoint(path)
    meta.pop("kind", None)
    model = Separator(SeparatorConfig(**meta))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model

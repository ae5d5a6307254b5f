import io
import math

import numpy as np
import pytest
import torch
from conftest import random_mels
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from contentsep import audio
from contentsep import separation as sp
from contentsep import speaker_encoder as se
from contentsep.errors import ConfigMismatch, MissingSpeaker, ShapeError
from contentsep.tensorio import state_hash

TINY = sp.SeparatorConfig(cond_dim=4, enc_channels=16, dec_channels=16, dec_lstm=16, post_channels=16)


def tiny_separator(seed=0, config=TINY):
    torch.manual_seed(seed)
    return sp.Separator(config).eval()


def content_mel(frames, seed=0):
    rng = np.random.default_rng(seed)
    return audio.MelSpectrogram(rng.normal(-4, 1, (80, frames)).astype(np.float32), "content", f"m{seed}")


COND = np.array([0.5, -0.5, 0.5, -0.5], dtype=np.float32)


# --- content_encode ---------------------------------------------------------


@pytest.mark.parametrize("T,K", [(96, 3), (64, 2), (100, 4), (32, 1), (33, 2)])
def test_content_shape(T, K):
    out = sp.content_encode(content_mel(T), COND, tiny_separator())
    assert out.values.shape == (64, K)
    assert out.n_frames == T
    assert out.forward_half.shape == (32, K) and out.backward_half.shape == (32, K)


def test_padding_policy_right_pads_with_floor():
    padded = sp.pad_mel(np.zeros((80, 100), np.float32))
    assert padded.shape == (80, 128)
    assert np.all(padded[:, 100:] == np.float32(audio.CONTENT.log_floor))
    assert np.all(padded[:, :100] == 0)
    assert [sp.padded_length(t) for t in (1, 32, 33, 64, 100)] == [32, 32, 64, 64, 128]


@settings(max_examples=40, deadline=None)
@given(T=st.integers(32, 2048))
def test_content_shape_property(T):
    out = sp.content_encode(content_mel(T), COND, tiny_separator())
    assert out.values.shape == (64, math.ceil(T / 32))


def test_downsampling_phase():
    model = tiny_separator(1)
    mel = content_mel(96, seed=2)
    x = torch.from_numpy(mel.values).unsqueeze(0)
    cond = torch.from_numpy(COND).unsqueeze(0)
    with torch.no_grad():
        x = (x - TINY.mel_center) / TINY.mel_scale
        h = torch.cat([x, cond.unsqueeze(-1).expand(-1, -1, 96)], dim=1)
        for conv in model.encoder.convolutions:
            h = conv(h)
        out, _ = model.encoder.lstm(h.transpose(1, 2))
    out = out[0].numpy()
    code = sp.content_encode(mel, COND, model)
    for col, t in enumerate((31, 63, 95)):
        np.testing.assert_array_equal(code.forward_half[:, col], out[t, :32])
    for col, t in enumerate((0, 32, 64)):
        np.testing.assert_array_equal(code.backward_half[:, col], out[t, 32:])


def test_content_encode_deterministic_and_checked():
    model = tiny_separator()
    a = sp.content_encode(content_mel(70), COND, model)
    b = sp.content_encode(content_mel(70), COND, model)
    np.testing.assert_array_equal(a.values, b.values)
    with pytest.raises(ConfigMismatch):
        sp.content_encode(content_mel(70), np.ones(5), model)
    with pytest.raises(ConfigMismatch):
        sp.content_encode(audio.MelSpectrogram(np.zeros((40, 70), np.float32), "speaker"), COND, model)


# --- decode -----------------------------------------------------------------


def test_decode_additivity_and_length():
    model = tiny_separator(3)
    rng = np.random.default_rng(0)
    for _ in range(100):
        K = int(rng.integers(1, 5))
        content = sp.ContentEmbedding(rng.normal(size=(64, K)).astype(np.float32))
        cond = rng.normal(size=4).astype(np.float32)
        pair = sp.decode(content, cond, model)
        assert pair.final.shape == (80, 32 * K)
        assert np.array_equal(pair.final - pair.initial - pair.residual, np.zeros_like(pair.final))
        assert np.array_equal(pair.final, pair.initial + pair.residual)


def test_zero_postnet_gives_zero_residual():
    model = tiny_separator(4)
    with torch.no_grad():
        for p in model.postnet.parameters():
            p.zero_()
    pair = sp.decode(sp.ContentEmbedding(np.ones((64, 2), np.float32)), COND, model)
    np.testing.assert_array_equal(pair.final, pair.initial)


def test_decode_checks():
    model = tiny_separator()
    with pytest.raises(ConfigMismatch):
        sp.decode(sp.ContentEmbedding(np.ones((64, 2), np.float32)), np.ones(3), model)
    with pytest.raises(ShapeError):
        sp.decode(sp.ContentEmbedding(np.ones((60, 2), np.float32)), COND, model)


# --- loss -------------------------------------------------------------------


def pair_of(initial, final):
    initial = np.asarray(initial, dtype=np.float64)
    final = np.asarray(final, dtype=np.float64)
    return sp.ReconstructionPair(initial, final - initial, final)


def test_loss_hand_arithmetic():
    out = sp.separation_loss(np.zeros((2, 2)), pair_of(np.ones((2, 2)), np.ones((2, 2))), np.zeros((2, 1)), np.zeros((2, 1)))
    assert (out.recon, out.recon0, out.content, out.total) == (1.0, 1.0, 0.0, 2.0)


def test_loss_zero_at_perfect_reconstruction():
    X = np.random.default_rng(0).normal(size=(80, 32))
    C = np.random.default_rng(1).normal(size=(64, 1))
    out = sp.separation_loss(X, pair_of(X, X), C, C)
    assert out.total == 0.0


def test_loss_matches_direct_summation():
    rng = np.random.default_rng(2)
    X, initial, final = rng.normal(size=(3, 80, 32))
    C, C_hat = rng.normal(size=(2, 64, 1))
    out = sp.separation_loss(X, pair_of(initial, final), C, C_hat)
    assert out.recon == pytest.approx(oracles.mean_abs(final, X), rel=1e-12)
    assert out.recon0 == pytest.approx(oracles.mean_abs(initial, X), rel=1e-12)
    assert out.content == pytest.approx(oracles.mean_abs(C_hat, C), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), mu=st.floats(0, 5), lam=st.floats(0, 5))
def test_loss_composition_and_non_negativity(seed, mu, lam):
    rng = np.random.default_rng(seed)
    X, initial, final = rng.normal(size=(3, 8, 32))
    C, C_hat = rng.normal(size=(2, 64, 1))
    out = sp.separation_loss(X, pair_of(initial, final), C, C_hat, mu, lam)
    assert min(out.recon, out.recon0, out.content, out.total) >= 0
    assert out.total == pytest.approx(out.recon + mu * out.recon0 + lam * out.content, rel=1e-12)
    assert (out.mu, out.lam) == (mu, lam)


def test_loss_masks_padded_frames():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(80, 100))
    initial, final = rng.normal(size=(2, 80, 128))
    C = np.zeros((64, 4))
    out = sp.separation_loss(X, pair_of(initial, final), C, C)
    assert out.recon == pytest.approx(oracles.mean_abs(final[:, :100], X))


def test_loss_shape_errors():
    with pytest.raises(ShapeError):
        sp.separation_loss(np.zeros((80, 30)), sp.ReconstructionPair(np.zeros((80, 31)), np.zeros((80, 31)), np.zeros((80, 31))), np.zeros((64, 1)), np.zeros((64, 1)))
    with pytest.raises(ShapeError):
        sp.separation_loss(np.zeros((80, 32)), pair_of(np.zeros((80, 32)), np.zeros((80, 32))), np.zeros((64, 1)), np.zeros((64, 2)))


# --- training ---------------------------------------------------------------

QUICK = sp.SeparatorTrainConfig(steps=2, crop_frames=64, lr=1e-3, log_every=1)


def test_zero_steps_identical_to_init():
    init = tiny_separator()
    mels = random_mels(2, 2, 70, n_mels=80, config_id="content")
    table = {k: COND for k in mels}
    model, hist = sp.train_separator(mels, table, sp.SeparatorTrainConfig(steps=0), init=init)
    assert hist == [] and state_hash(model) == state_hash(init)


def test_one_hot_conditioning_width():
    mels = random_mels(8, 2, 70, n_mels=80, config_id="content")
    table = sp.one_hot_conditioning(list(mels))
    model, _ = sp.train_separator(mels, table, sp.SeparatorTrainConfig(steps=1, crop_frames=64, log_every=0),
                                  model_config=sp.SeparatorConfig(cond_dim=8, enc_channels=16, dec_channels=16, dec_lstm=16, post_channels=16))
    assert model.config.cond_dim == 8
    assert sorted(table) == sorted(mels)
    assert all(v.sum() == 1 for v in table.values())


def test_missing_conditioning():
    mels = random_mels(2, 2, 70, n_mels=80, config_id="content")
    with pytest.raises(MissingSpeaker):
        sp.train_separator(mels, {"s0": COND}, QUICK, model_config=TINY)
    with pytest.raises(ConfigMismatch):
        sp.train_separator(mels, {k: np.ones(3) for k in mels}, QUICK, model_config=TINY)


def test_progress_log_checkpoints_and_freeze(tmp_path):
    smels = random_mels(2, 2, 170)
    cmels = random_mels(2, 2, 70, n_mels=80, config_id="content")
    torch.manual_seed(0)
    encoder = se.SpeakerEncoder(se.SpeakerEncoderConfig(hidden=8, embed_dim=4))
    before = state_hash(encoder)
    table = sp.speaker_conditioning(smels, encoder)
    stream = io.StringIO()
    cfg = sp.SeparatorTrainConfig(steps=4, crop_frames=64, log_every=1, checkpoint_every=2, checkpoint_dir=str(tmp_path))
    model, hist = sp.train_separator(cmels, table, cfg, model_config=TINY, progress=stream)
    assert state_hash(encoder) == before
    lines = stream.getvalue().splitlines()
    assert len(lines) == 4
    rec = sp.parse_progress_line(lines[-1])
    assert set(rec) == {"step", "recon", "recon0", "content", "total"}
    assert rec["step"] == 3 and rec["total"] == pytest.approx(hist[-1][3], abs=1e-6)
    assert sorted(p.name for p in tmp_path.glob("*.cstc")) == ["separator_step2.cstc", "separator_step4.cstc"]
    assert state_hash(sp.load_separator(tmp_path / "separator_step4.cstc")) == state_hash(model)


def test_training_is_seeded():
    mels = random_mels(2, 2, 70, n_mels=80, config_id="content")
    table = {k: COND for k in mels}
    cfg = sp.SeparatorTrainConfig(steps=2, crop_frames=64, log_every=0)
    a, ha = sp.train_separator(mels, table, cfg, model_config=TINY)
    b, hb = sp.train_separator(mels, table, cfg, model_config=TINY)
    assert ha == hb and state_hash(a) == state_hash(b)


# --- extraction -------------------------------------------------------------


def test_conditioning_of_single_utterance_is_its_embedding():
    torch.manual_seed(0)
    encoder = se.SpeakerEncoder(se.SpeakerEncoderConfig(hidden=8, embed_dim=4))
    smels = random_mels(1, 1, 170)
    table = sp.speaker_conditioning(smels, encoder)
    single = se.embed_utterance(smels["s0"][0], encoder).values
    np.testing.assert_allclose(table["s0"], single, atol=1e-7)


def test_conditioning_of_three_utterances_is_mean():
    torch.manual_seed(0)
    encoder = se.SpeakerEncoder(se.SpeakerEncoderConfig(hidden=8, embed_dim=4))
    smels = random_mels(1, 3, 170)
    table = sp.speaker_conditioning(smels, encoder)
    embs = [se.embed_utterance(m, encoder).values for m in smels["s0"]]
    expected = [(embs[0][d] + embs[1][d] + embs[2][d]) / 3 for d in range(4)]
    np.testing.assert_allclose(table["s0"], expected, atol=1e-7)


def test_extract_content_joins_utterances_and_is_deterministic():
    model = tiny_separator(5)
    mels = [content_mel(40, 1), content_mel(50, 2)]
    a = sp.extract_content(mels, "spk", {"spk": COND}, model, "sample-1")
    b = sp.extract_content(mels, "spk", {"spk": COND}, model, "sample-1")
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.shape == (64, 3) and a.source_id == "sample-1" and a.n_frames == 90
    with pytest.raises(MissingSpeaker):
        sp.extract_content(mels, "other", {"spk": COND}, model)


def test_separator_checkpoint_roundtrip(tmp_path):
    model = tiny_separator(6)
    sp.save_separator(tmp_path / "sep.cstc", model)
    back = sp.load_separator(tmp_path / "sep.cstc")
    assert back.config == model.config and state_hash(back) == state_hash(model)

import math

import numpy as np
import pytest
import torch
from conftest import random_mels
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from contentsep import audio
from contentsep import baselines as bl
from contentsep import speaker_encoder as se
from contentsep.errors import AudioTooShort, ConfigMismatch, DegenerateSequence, EmptyInput
from contentsep.tensorio import state_hash


def speaker_mel(frames, seed=0):
    rng = np.random.default_rng(seed)
    return audio.MelSpectrogram(rng.normal(size=(40, frames)).astype(np.float32), "speaker", "x")


# --- pooling ----------------------------------------------------------------


def test_uniform_attention_is_frame_mean():
    frames = np.random.default_rng(0).normal(size=(7, 5))
    out = bl.attentive_pooling(frames, np.zeros(5), 0.3)
    np.testing.assert_allclose(out, frames.mean(axis=0), atol=1e-12)


def test_single_frame_attention():
    frame = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_allclose(bl.attentive_pooling(frame, np.array([4.0, 1.0, 0.0])), frame[0])


def test_attention_hand_softmax():
    # scores ln2 and 0 -> weights 2/3 and 1/3
    frames = np.array([[math.log(2), 3.0], [0.0, 6.0]])
    weight = np.array([1.0, 0.0])
    np.testing.assert_allclose(bl.attention_weights(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3])
    np.testing.assert_allclose(bl.attentive_pooling(frames, weight), [2 / 3 * math.log(2), 4.0])


def test_attention_empty():
    with pytest.raises(EmptyInput):
        bl.attentive_pooling(np.zeros((0, 3)), np.zeros(3))


def test_statistics_pooling_hand_values():
    np.testing.assert_array_equal(bl.statistics_pooling(np.array([[0.0], [2.0]])), [1.0, 1.0])
    const = np.full((6, 3), 2.5)
    np.testing.assert_array_equal(bl.statistics_pooling(const), [2.5, 2.5, 2.5, 0, 0, 0])
    with pytest.raises(DegenerateSequence):
        bl.statistics_pooling(np.ones((1, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), T=st.integers(2, 40), D=st.integers(1, 8))
def test_statistics_pooling_permutation_invariant(seed, T, D):
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(T, D))
    out = bl.statistics_pooling(frames)
    np.testing.assert_allclose(out, bl.statistics_pooling(frames[rng.permutation(T)]), atol=1e-12)
    np.testing.assert_allclose(out, np.concatenate([frames.mean(0), frames.std(0)]), atol=1e-12)


# --- d-vector ---------------------------------------------------------------


def test_d_vector_width_and_determinism():
    torch.manual_seed(0)
    model = bl.DVectorNet(bl.DVectorConfig(hidden=16))
    for T in (50, 160, 333):
        a = bl.d_vector(speaker_mel(T), model)
        assert a.values.shape == (256,)
    np.testing.assert_array_equal(bl.d_vector(speaker_mel(90), model).values, bl.d_vector(speaker_mel(90), model).values)
    with pytest.raises(ConfigMismatch):
        bl.d_vector(audio.MelSpectrogram(np.zeros((80, 90), np.float32), "content"), model)


def test_d_vector_order_sensitive():
    torch.manual_seed(1)
    model = bl.DVectorNet(bl.DVectorConfig(hidden=16))
    mel = speaker_mel(60, 2)
    rev = audio.MelSpectrogram(mel.values[:, ::-1].copy(), "speaker")
    assert not np.allclose(bl.d_vector(mel, model).values, bl.d_vector(rev, model).values)


def test_d_vector_matches_step_by_step_forward():
    cfg = bl.DVectorConfig(n_mels=40, hidden=3, num_layers=3, embed_dim=256)
    torch.manual_seed(2)
    model = bl.DVectorNet(cfg)
    with torch.no_grad():  # small fixed weights
        for p in model.parameters():
            p.copy_(torch.linspace(-0.3, 0.3, p.numel()).reshape(p.shape))
    mel = speaker_mel(3, 4)
    seq = list(mel.values.T.astype(np.float64))
    for layer in range(3):
        g = lambda n: getattr(model.lstm, f"{n}_l{layer}").detach().double().numpy()  # noqa: E731
        seq = oracles.lstm_layer(seq, g("weight_ih"), g("weight_hh"), g("bias_ih"), g("bias_hh"))
    att_w = model.attention.weight.detach().double().numpy()[0]
    att_b = float(model.attention.bias.detach()[0])
    alpha = oracles.softmax([att_w @ h + att_b for h in seq])
    pooled = sum(a * h for a, h in zip(alpha, seq))
    emb = model.embedding.weight.detach().double().numpy() @ pooled + model.embedding.bias.detach().double().numpy()
    expected = emb / np.linalg.norm(emb)
    np.testing.assert_allclose(bl.d_vector(mel, model).values, expected, atol=1e-5)


# --- x-vector ---------------------------------------------------------------


def test_time_delay_valid_length():
    layer = bl.TimeDelayLayer(1, 1, context=1, dilation=2, activation=False)
    assert layer(torch.zeros(1, 1, 7)).shape == (1, 1, 3)


def test_time_delay_matches_unrolled_convolution():
    layer = bl.TimeDelayLayer(2, 3, context=1, dilation=2, activation=False)
    with torch.no_grad():
        layer.conv.weight.copy_(torch.arange(18, dtype=torch.float32).reshape(3, 2, 3) / 10)
        layer.conv.bias.copy_(torch.tensor([0.1, -0.2, 0.3]))
    x = np.random.default_rng(0).normal(size=(2, 9))
    expected = oracles.dilated_conv1d(x, layer.conv.weight.detach().double().numpy(), layer.conv.bias.detach().double().numpy(), 2)
    with torch.no_grad():
        got = layer(torch.from_numpy(x).float().unsqueeze(0))[0].double().numpy()
    np.testing.assert_allclose(got, expected, atol=1e-5)
    # with activation: relu then batch norm at its initial running statistics
    act = bl.TimeDelayLayer(2, 3, context=1, dilation=2).eval()
    act.conv.load_state_dict(layer.conv.state_dict())
    with torch.no_grad():
        got = act(torch.from_numpy(x).float().unsqueeze(0))[0].double().numpy()
    np.testing.assert_allclose(got, np.maximum(expected, 0) / math.sqrt(1 + 1e-5), atol=1e-5)


def test_x_vector_layout_and_width():
    torch.manual_seed(0)
    model = bl.XVectorNet(bl.XVectorConfig(frame_width=16, stats_width=24, n_speakers=3))
    assert model.receptive_field == 15
    assert [l.receptive_half for l in model.frames] == [2, 2, 3, 0, 0]
    assert model.segment6.in_features == 48
    assert bl.XVectorNet().segment6.in_features == 3072
    for T in (16, 100, 400):
        assert bl.x_vector(speaker_mel(T), model).values.shape == (512,)
    np.testing.assert_array_equal(bl.x_vector(speaker_mel(50), model).values, bl.x_vector(speaker_mel(50), model).values)
    with pytest.raises(AudioTooShort):
        bl.x_vector(speaker_mel(15), model)


# --- training / persistence -------------------------------------------------

QUICK = se.SpeakerTrainConfig(steps=2, speakers_per_batch=3, utterances_per_speaker=2, num_frames=32, log_every=0)


def test_train_and_roundtrip_baselines(tmp_path):
    mels = random_mels(3, 3, 40)
    dvec, dh = bl.train_d_vector(mels, QUICK, bl.DVectorConfig(hidden=8))
    xvec, xh = bl.train_x_vector(mels, QUICK, bl.XVectorConfig(frame_width=8, stats_width=8))
    assert len(dh) == 2 and len(xh) == 2
    assert xvec.config.n_speakers == 3
    for name, model in (("d", dvec), ("x", xvec)):
        bl.save_baseline(tmp_path / f"{name}.cstc", model)
        back = bl.load_baseline(tmp_path / f"{name}.cstc")
        assert type(back) is type(model) and state_hash(back) == state_hash(model)
    again, _ = bl.train_x_vector(mels, QUICK, bl.XVectorConfig(frame_width=8, stats_width=8))
    assert state_hash(again) == state_hash(xvec)

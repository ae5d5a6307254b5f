"""
Separating content from speaker identity
========================================

Train the content separator with speaker-level conditioning, look at the
shape of the content codes and check that the decoder relies on the
conditioning vector: swapping in another speaker's vector makes the
reconstruction worse.

    python demos/02_content_separation.py [out_dir]
"""
# %%
import sys
from pathlib import Path

import numpy as np

from contentsep import audio, corpus
from contentsep import separation as sp
from contentsep import speaker_encoder as se

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/content")
manifest = corpus.generate_synthetic_corpus(corpus.CorpusSpec(n_speakers=8, utterances_per_speaker=5, seed=1), out)
groups = corpus.combine_speaker_sessions(manifest, "combined")


def load(preset, vad=None):
    return {k: [audio.preprocess(audio.read_wav(manifest.resolve(r)), preset, vad) for r in rs] for k, rs in groups.items()}


speaker_mels, content_mels = load(audio.SPEAKER, audio.VADConfig()), load(audio.CONTENT)

# %% speaker-level conditioning: mean of utterance embeddings, not re-normalised
encoder, _ = se.train_speaker_encoder(
    speaker_mels, se.SpeakerTrainConfig(steps=150, speakers_per_batch=6, log_every=0),
    encoder_config=se.SpeakerEncoderConfig.desk(),
)
table = sp.speaker_conditioning(speaker_mels, encoder)
print({k: round(float(np.linalg.norm(v)), 3) for k, v in list(table.items())[:3]})

# %% separator: progress records go to stdout
model, history = sp.train_separator(
    content_mels, table, sp.SeparatorTrainConfig(steps=400, log_every=100), sp.SeparatorConfig.desk(), progress=sys.stdout
)

# %% codes are 64 x ceil(T / 32): 32 forward and 32 backward channels
key = next(iter(content_mels))
mel = content_mels[key][0]
code = sp.content_encode(mel, table[key], model)
print("mel", mel.values.shape, "-> code", code.values.shape)

# %% own speaker vs. someone else's
other = next(k for k in table if k != key)
for name, cond in (("own", table[key]), ("other", table[other])):
    pair = sp.decode(code, cond, model)
    print(f"{name:>5} speaker: L1 {np.abs(pair.final[:, : mel.n_frames] - mel.values).mean():.3f}")

sp.save_separator(out / "separator.cstc", model)

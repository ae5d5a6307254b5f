"""
Speaker embeddings on a synthetic corpus
========================================

Generate a small seeded corpus, train a desk-sized GE2E encoder on it,
measure the equal error rate and draw a 2-D projection of the embeddings.

    python demos/01_speaker_encoder.py [out_dir]
"""
# %%
import sys
from pathlib import Path

import numpy as np

from contentsep import audio, corpus, experiments
from contentsep import speaker_encoder as se

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/speaker")
manifest = corpus.generate_synthetic_corpus(corpus.CorpusSpec(n_speakers=12, utterances_per_speaker=6, seed=0), out)
print(len(manifest), "utterances from", len(manifest.speakers()), "speakers")

# %% 40-bin speaker features, silence trimmed by the energy VAD
groups = corpus.combine_speaker_sessions(manifest, "combined")
mels = {
    k: [audio.preprocess(audio.read_wav(manifest.resolve(r)), audio.SPEAKER, audio.VADConfig()) for r in rs]
    for k, rs in groups.items()
}
first = next(iter(mels.values()))[0]
print("speaker mel:", first.values.shape, "floor", audio.SPEAKER.log_floor)

# %% train; the loss should drop well below its starting value
cfg = se.SpeakerTrainConfig(steps=300, speakers_per_batch=6, log_every=50)
model, history = se.train_speaker_encoder(mels, cfg, encoder_config=se.SpeakerEncoderConfig.desk())
print(f"GE2E loss {history[0]:.2f} -> {np.mean(history[-20:]):.2f}")

# %% verification: every pair of utterances is a trial
embs = [se.embed_utterance(m, model, k) for k, ms in mels.items() for m in ms]
scores, targets = se.verification_trials(embs)
print(f"EER over {len(scores)} trials: {se.equal_error_rate(scores, targets):.3f}")

# %% one point per utterance, coloured by speaker
points = experiments.project_embeddings_2d([e.values for e in embs], seed=0)
experiments.plot_projection(points, [e.speaker_id for e in embs], out / "speakers.png", "utterance embeddings")
print("wrote", out / "speakers.png")

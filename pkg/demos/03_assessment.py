"""
CN vs. IM assessment and the conditioning comparison
====================================================

The classification harness end to end: split, search, 5-fold CV and a
majority vote over the fold models. First the metric arithmetic on two
confusion matrices, then the three conditioning modes on a synthetic
corpus (much smaller than the acceptance run, so expect noisy numbers).

    python demos/03_assessment.py [artifact_dir]
"""
# %%
import dataclasses
import sys

import numpy as np

from contentsep import assessment, experiments

for tp, fp, tn, fn in ((47, 25, 24, 15), (43, 22, 27, 19)):
    m = assessment.Metrics.from_confusion(tp, fp, tn, fn)
    print(f"TP={tp} FP={fp} TN={tn} FN={fn} ->", m.rounded(4))

# %% the split keeps class proportions with largest-remainder rounding
labels = np.array([0] * 242 + [1] * 310)
train, ev = assessment.stratified_split(labels, 111 / 552)
print(len(train), len(ev), np.bincount(labels[ev]))

# %% content codes under each conditioning mode
base = experiments.ExperimentConfig(
    classifiers=["LinearHead", "LDA"],
    corpus_speakers=20,
    corpus_utterances=2,
    pretrain_speakers=12,
    pretrain_utterances=4,
    speaker_pretrain_steps=150,
    speaker_finetune_steps=60,
    separator_steps=300,
    n_trials=5,
    artifact_dir=sys.argv[1] if len(sys.argv) > 1 else "demo_out/artifacts",
)
for cfg in experiments.condition_matrix("conditioning", base):
    report = experiments.run_condition(cfg)
    print(experiments.summarize_report(report), "\n")

# %% the report keeps every fold's predictions; the vote can be redone by hand
folds = np.array(report.results["LDA"]["fold_predictions"])
print("recomputed vote matches:", np.array_equal(assessment.majority_vote(folds), report.results["LDA"]["ensembled_predictions"]))
print(dataclasses.asdict(report.ensembled("LDA")))

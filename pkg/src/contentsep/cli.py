"""Command-line entry point: ``contentsep <command> ...``.

Config-driven commands (``extract``, ``experiment``) read a flat
``key = value`` file via ``--config``; ``--seed`` overrides its seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import assessment, audio, corpus, experiments, separation, speaker_encoder
from .errors import ContentSepError
from .tensorio import load_tensors, save_tensors

log = logging.getLogger("contentsep")


def _config(args, **overrides) -> experiments.ExperimentConfig:
    extra = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        extra["seed"] = args.seed
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        extra[key.strip()] = value.strip()
    return experiments.load_config(args.config, extra).validate()


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _load_mels(manifest: corpus.Manifest, groups, preset: audio.MelConfig):
    vad = audio.VADConfig() if preset is audio.SPEAKER else None
    out = OrderedDict()
    for key, records in groups.items():
        out[key] = [audio.preprocess(audio.read_wav(manifest.resolve(r)), preset, vad, r.audio_path) for r in records]
    return out


# -- commands ----------------------------------------------------------------


def cmd_preprocess(args):
    preset = audio.PRESETS[args.preset]
    vad = audio.VADConfig(aggressiveness=args.vad_level) if args.vad else None
    tensors = OrderedDict()
    for path in args.audio:
        mel = audio.preprocess(audio.read_wav(path), preset, vad, str(path))
        tensors[Path(path).stem] = mel.values
        print(f"{path}: {mel.values.shape[0]} x {mel.n_frames}")
    save_tensors(args.out, tensors)


def cmd_gen_corpus(args):
    spec = corpus.CorpusSpec(
        n_speakers=args.speakers,
        utterances_per_speaker=args.utterances,
        sessions_per_speaker=args.sessions,
        content_classes=args.classes,
        seed=_seed(args),
        duration=args.duration,
        progression=args.progression,
    )
    manifest = corpus.generate_synthetic_corpus(spec, args.out)
    print(f"wrote {len(manifest)} utterances of {len(manifest.speakers())} speakers to {args.out}")


def cmd_train_speaker(args):
    manifest = corpus.load_manifest(args.manifest)
    mels = _load_mels(manifest, corpus.combine_speaker_sessions(manifest, args.policy), audio.SPEAKER)
    cfg = speaker_encoder.SpeakerTrainConfig(
        steps=args.steps, speakers_per_batch=args.speakers_per_batch, utterances_per_speaker=args.utterances_per_speaker,
        lr=args.lr, seed=_seed(args), log_every=0,
    )  # fmt: skip
    init = speaker_encoder.load_speaker_encoder(args.init) if args.init else None
    enc_cfg = speaker_encoder.SpeakerEncoderConfig.desk() if args.scale == "desk" else speaker_encoder.SpeakerEncoderConfig()
    model, history = speaker_encoder.train_speaker_encoder(mels, cfg, args.mode, init, enc_cfg)
    speaker_encoder.save_speaker_encoder(args.out, model)
    embs = [speaker_encoder.embed_utterance(m, model, key) for key, ms in mels.items() for m in ms]
    scores, targets = speaker_encoder.verification_trials(embs)
    report = OrderedDict(
        mode=args.mode,
        steps=len(history),
        speakers=len(mels),
        initial_loss=f"{history[0]:.6f}" if history else "nan",
        final_loss=f"{history[-1]:.6f}" if history else "nan",
        trials=len(scores),
        eer=f"{speaker_encoder.equal_error_rate(scores, targets):.6f}",
        checkpoint=args.out,
    )
    sys.stdout.write(speaker_encoder.format_eer_report(report))


def cmd_train_sep(args):
    manifest = corpus.load_manifest(args.manifest)
    policy = "not-combined" if args.conditioning == "one-hot" else args.policy
    groups = corpus.combine_speaker_sessions(manifest, policy)
    if args.conditioning == "one-hot":
        table = separation.one_hot_conditioning(list(groups))
    else:
        if not args.encoder:
            raise ContentSepError("--encoder is required unless --conditioning one-hot")
        encoder = speaker_encoder.load_speaker_encoder(args.encoder)
        table = separation.speaker_conditioning(_load_mels(manifest, groups, audio.SPEAKER), encoder)
    cond_dim = len(next(iter(table.values())))
    model_cfg = separation.SeparatorConfig.desk(cond_dim) if args.scale == "desk" else separation.SeparatorConfig(cond_dim)
    cfg = separation.SeparatorTrainConfig(
        steps=args.steps, lr=args.lr, seed=_seed(args), log_every=args.log_every,
        checkpoint_every=args.checkpoint_every, checkpoint_dir=str(Path(args.out).parent),
    )  # fmt: skip
    model, _ = separation.train_separator(
        _load_mels(manifest, groups, audio.CONTENT), table, cfg, model_cfg, progress=sys.stdout
    )
    separation.save_separator(args.out, model)
    save_tensors(Path(args.out).with_suffix(".cond.cstc"), table)


def cmd_extract(args):
    cfg = _config(args, embedding=args.embedding, conditioning=args.conditioning, session_policy=args.policy)
    exp = experiments.Experiment(cfg)
    embs = exp.embeddings()
    exp.save_embeddings(embs, args.out)
    labels = exp.samples_manifest().sample_labels()
    meta = {"embedding": cfg.embedding, "conditioning": cfg.conditioning, "labels": {k: labels[k] for k in embs}}
    Path(args.out).with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    shapes = {tuple(v.shape) for v in embs.values()}
    print(f"wrote {len(embs)} {cfg.embedding} embeddings {sorted(shapes)[:3]} to {args.out}")


def _metrics_record(kind, fold, m) -> str:
    if m is None:
        return f"model={kind} fold={fold} metrics=undefined"
    d = dataclasses.asdict(m)
    return f"model={kind} fold={fold} " + " ".join(
        f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items()
    )


def cmd_classify(args):
    embs = load_tensors(args.embeddings)
    meta = json.loads(Path(args.embeddings).with_suffix(".json").read_text())
    keys = list(embs)
    y = np.array([meta["labels"][k] for k in keys])
    content = embs[keys[0]].ndim == 2
    X_flat = np.stack([assessment.pool_content_embedding(embs[k]) if content else embs[k] for k in keys])
    X_head = np.stack([assessment.pooled_head_input(embs[k]) for k in keys]) if content else X_flat
    seed = _seed(args)
    train, ev = assessment.stratified_split(y, args.eval_fraction, seed)
    results = {}
    for kind in args.classifier:
        X = X_head if kind == "LinearHead" else X_flat
        res = assessment.evaluate_classifier(kind, X[train], y[train], X[ev], y[ev], args.trials, args.folds, seed)
        for f, m in enumerate(res.fold_metrics):
            print(_metrics_record(kind, f, m))
        print(_metrics_record(kind, "ensembled", res.ensembled))
        results[kind] = experiments._result_dict(res)
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")


def cmd_experiment(args):
    base = _config(args)
    configs = experiments.condition_matrix(args.matrix, base) if args.matrix else [base]
    for cfg in configs:
        report = experiments.run_condition(cfg)
        print(experiments.summarize_report(report))


def cmd_plot(args):
    embs = load_tensors(args.embeddings)
    meta_path = Path(args.embeddings).with_suffix(".json")
    labels_by_key = json.loads(meta_path.read_text())["labels"] if meta_path.exists() else {}
    keys = list(embs)[: args.max_points] if args.max_points else list(embs)
    if args.color_by == "speaker":
        labels = [k.split(corpus.SESSION_SEP)[0] for k in keys]
    else:
        names = {0: "CN", 1: "IM"}
        labels = [names.get(labels_by_key.get(k), "?") for k in keys]
    points = experiments.project_embeddings_2d([embs[k] for k in keys], _seed(args))
    experiments.plot_projection(points, labels, args.out, args.title or Path(args.embeddings).stem)
    print(f"plotted {len(keys)} points to {args.out}")


def cmd_report(args):
    report = experiments.read_report(args.report)
    print(experiments.summarize_report(report))
    if args.compare:
        other = experiments.read_report(args.compare)
        same = report.comparable() == other.comparable()
        print("identical (ignoring timestamps)" if same else "reports differ")
        return 0 if same else 1
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contentsep", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config file)")
    p.add_argument("--config", default=None, help="flat key = value experiment config")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="wav files -> log-mel tensors")
    s.add_argument("audio", nargs="+")
    s.add_argument("--preset", choices=sorted(audio.PRESETS), default="content")
    s.add_argument("--vad", action="store_true", help="trim unvoiced frames first")
    s.add_argument("--vad-level", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("gen-corpus", help="write a seeded synthetic corpus and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=20)
    s.add_argument("--utterances", type=int, default=10)
    s.add_argument("--sessions", type=int, default=1)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--duration", type=float, default=3.0)
    s.add_argument("--progression", type=float, default=0.0)
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("train-speaker", help="GE2E training or finetuning; prints an EER report")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=["full", "finetune"], default="full")
    s.add_argument("--init", help="checkpoint to start from (required for finetune)")
    s.add_argument("--out", required=True)
    s.add_argument("--policy", choices=list(experiments.POLICIES), default="combined")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--speakers-per-batch", type=int, default=8)
    s.add_argument("--utterances-per-speaker", type=int, default=5)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--scale", choices=["desk", "reference"], default="desk")
    s.set_defaults(func=cmd_train_speaker)

    s = sub.add_parser("train-sep", help="train the content separator")
    s.add_argument("--manifest", required=True)
    s.add_argument("--conditioning", choices=list(experiments.CONDITIONINGS), default="finetuned")
    s.add_argument("--encoder", help="speaker-encoder checkpoint for learned conditioning")
    s.add_argument("--policy", choices=list(experiments.POLICIES), default="combined")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=5000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--scale", choices=["desk", "reference"], default="desk")
    s.set_defaults(func=cmd_train_sep)

    s = sub.add_parser("extract", help="per-sample embeddings for a configured experiment")
    s.add_argument("--embedding", choices=list(experiments.EMBEDDINGS))
    s.add_argument("--conditioning", choices=list(experiments.CONDITIONINGS))
    s.add_argument("--policy", choices=list(experiments.POLICIES))
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("classify", help="search, k-fold CV and majority vote on an embedding file")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--classifier", type=lambda v: [k.strip() for k in v.split(",")], default=["LDA"])
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--eval-fraction", type=float, default=0.2)
    s.add_argument("--out")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("experiment", help="run one condition, or a whole comparison")
    s.add_argument("--matrix", choices=list(experiments.MATRICES), help="run every condition of a comparison")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("plot", help="2-D projection of an embedding file")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--color-by", choices=["label", "speaker"], default="label")
    s.add_argument("--max-points", type=int, default=0)
    s.add_argument("--title", default="")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("report", help="summarise a report; --compare checks determinism")
    s.add_argument("report")
    s.add_argument("--compare")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "classify":
        for kind in args.classifier:
            if kind not in assessment.KINDS:
                print(f"error: unknown classifier {kind!r}; choose from {', '.join(assessment.KINDS)}", file=sys.stderr)
                return 2
    try:
        return args.func(args) or 0
    except (ContentSepError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Experiment orchestration.

:class:`Experiment` resolves every artifact a condition needs (corpora,
speaker encoders, separators, baseline extractors, embeddings), building and
caching the missing ones under ``artifact_dir`` when ``build`` is on, then
runs split -> search -> k-fold CV -> majority vote -> metrics.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import platform
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import sklearn
import torch
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE

from . import assessment, audio, baselines, corpus, separation, speaker_encoder
from .errors import ConfigError, DegenerateInput, MissingArtifact
from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)

EMBEDDINGS = ("content", "speaker", "dvector", "xvector")
CONDITIONINGS = ("pretrained", "finetuned", "one-hot")
POLICIES = ("combined", "not-combined")


@dataclass
class ExperimentConfig:
    embedding: str = "content"
    conditioning: str = "finetuned"
    session_policy: str = "not-combined"
    classifiers: list = field(default_factory=lambda: ["LinearHead"])
    seed: int = 0
    manifest: str = ""  # empty: generate a synthetic corpus under artifact_dir
    artifact_dir: str = "artifacts"
    report: str = ""
    build: bool = True
    model_scale: str = "desk"  # "desk" | "reference"
    corpus_speakers: int = 40
    corpus_sessions: int = 2
    corpus_utterances: int = 3
    corpus_duration: float = 3.0
    corpus_progression: float = 0.0
    pretrain_speakers: int = 30
    pretrain_utterances: int = 6
    speaker_pretrain_steps: int = 400
    speaker_finetune_steps: int = 200
    speaker_batch: int = 6
    separator_steps: int = 1500
    separator_lr: float = 1e-3
    baseline_steps: int = 300
    n_trials: int = 50
    folds: int = 5
    eval_fraction: float = 0.2

    def validate(self):
        if self.embedding not in EMBEDDINGS:
            raise ConfigError(f"embedding must be one of {EMBEDDINGS}, got {self.embedding!r}")
        if self.conditioning not in CONDITIONINGS:
            raise ConfigError(f"conditioning must be one of {CONDITIONINGS}, got {self.conditioning!r}")
        if self.session_policy not in POLICIES:
            raise ConfigError(f"session_policy must be one of {POLICIES}, got {self.session_policy!r}")
        if self.embedding == "speaker" and self.conditioning == "one-hot":
            raise ConfigError("speaker embeddings need a trained encoder; one-hot has none")
        if self.folds % 2 == 0:
            raise ConfigError(f"folds={self.folds} allows voting ties; use an odd number")
        for kind in self.classifiers:
            if kind not in assessment.KINDS:
                raise ConfigError(f"unknown classifier {kind!r}")
        if self.model_scale not in ("desk", "reference"):
            raise ConfigError(f"model_scale must be 'desk' or 'reference', got {self.model_scale!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value: str, typ):
    value = value.strip()
    if typ in (bool, "bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    if typ in (list, "list"):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    fields = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    values = dataclasses.asdict(base or ExperimentConfig())
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in fields:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _coerce(value, fields[key])
    return ExperimentConfig(**values)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    if overrides:
        text += "\n" + "\n".join(f"{k} = {v}" for k, v in overrides.items())
    return parse_config_text(text)


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, list):
            v = ",".join(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _fingerprint(*parts) -> str:
    return hashlib.sha1(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:12]


@dataclass
class EvalReport:
    config: dict
    conditioning_dim: int | None
    n_samples: int
    n_train: int
    n_eval: int
    eval_ids: list
    eval_labels: list
    results: dict  # classifier kind -> result dict
    seeds: dict
    environment: dict
    created: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def comparable(self) -> dict:
        """Everything except the creation timestamp."""
        d = self.to_dict()
        d.pop("created", None)
        return d

    def ensembled(self, kind: str) -> assessment.Metrics:
        return assessment.Metrics(**self.results[kind]["ensembled"])


def _result_dict(r: assessment.ClassifierResult) -> dict:
    return {
        "hyperparams": r.hyperparams,
        "search_score": r.search_score,
        "folds": [dataclasses.asdict(m) if m is not None else None for m in r.fold_metrics],
        "fold_predictions": r.fold_predictions,
        "ensembled_predictions": r.ensembled_predictions,
        "ensembled": dataclasses.asdict(r.ensembled),
    }


def emit_report(report: EvalReport, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def summarize_report(report: EvalReport) -> str:
    cfg = report.config
    head = f"{cfg['embedding']} / {cfg['conditioning']} / {cfg['session_policy']} (seed {cfg['seed']})"
    rows = [head, f"{'model':<11}{'Acc.':>8}{'F1':>8}{'Spec.':>8}{'Recall':>8}"]
    for kind, res in report.results.items():
        m = res["ensembled"]
        rows.append(f"{kind:<11}{m['accuracy']:8.4f}{m['f1']:8.4f}{m['specificity']:8.4f}{m['recall']:8.4f}")
    return "\n".join(rows)


class Experiment:
    """Artifact resolution and execution for one :class:`ExperimentConfig`."""

    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()
        self.dir = Path(config.artifact_dir)
        self._mels: dict[Path, tuple[audio.MelSpectrogram, audio.MelSpectrogram]] = {}
        self._cache: dict = {}

    # -- corpora ---------------------------------------------------------
    def _require(self, path: Path, stage: str):
        if not path.exists() and not self.config.build:
            raise MissingArtifact(stage, str(path))

    def corpus_fingerprint(self) -> str:
        c = self.config
        if c.manifest:
            return _fingerprint("manifest", str(Path(c.manifest).resolve()))
        return _fingerprint(
            "corpus", c.seed, c.corpus_speakers, c.corpus_sessions, c.corpus_utterances, c.corpus_duration, c.corpus_progression
        )

    def manifest(self) -> corpus.Manifest:
        if "manifest" in self._cache:
            return self._cache["manifest"]
        c = self.config
        if c.manifest:
            path = Path(c.manifest)
            if not path.exists():
                raise MissingArtifact("manifest", str(path))
            m = corpus.load_manifest(path)
        else:
            path = self.dir / f"corpus-{self.corpus_fingerprint()}" / "manifest.csv"
            self._require(path, "gen-corpus")
            if path.exists():
                m = corpus.load_manifest(path)
            else:
                spec = corpus.CorpusSpec(
                    n_speakers=c.corpus_speakers,
                    utterances_per_speaker=c.corpus_utterances,
                    sessions_per_speaker=c.corpus_sessions,
                    seed=c.seed,
                    duration=c.corpus_duration,
                    progression=c.corpus_progression,
                )
                m = corpus.generate_synthetic_corpus(spec, path.parent)
        self._cache["manifest"] = m
        return m

    def samples_manifest(self) -> corpus.Manifest:
        m = self.manifest()
        return m if m.augmented else corpus.augment_sessions(m)

    def pretrain_fingerprint(self) -> str:
        c = self.config
        return _fingerprint("pretrain", c.seed, c.pretrain_speakers, c.pretrain_utterances, c.corpus_duration)

    def pretrain_manifest(self) -> corpus.Manifest:
        """Disjoint synthetic speakers standing in for large-scale pretraining data."""
        if "pretrain" in self._cache:
            return self._cache["pretrain"]
        c = self.config
        path = self.dir / f"pretrain-{self.pretrain_fingerprint()}" / "manifest.csv"
        self._require(path, "gen-corpus")
        if path.exists():
            m = corpus.load_manifest(path)
        else:
            spec = corpus.CorpusSpec(
                n_speakers=c.pretrain_speakers,
                utterances_per_speaker=c.pretrain_utterances,
                sessions_per_speaker=1,
                content_classes=2,
                seed=c.seed + 10_000,
                duration=c.corpus_duration,
                prefix="pre",
            )
            m = corpus.generate_synthetic_corpus(spec, path.parent)
        self._cache["pretrain"] = m
        return m

    # -- features --------------------------------------------------------
    def mels(self, manifest: corpus.Manifest, record: corpus.SpeechRecord):
        path = manifest.resolve(record)
        if path not in self._mels:
            if not path.exists():
                raise MissingArtifact("preprocess", f"audio file {path}")
            seg = audio.read_wav(path)
            self._mels[path] = (
                audio.preprocess(seg, audio.SPEAKER, audio.VADConfig(), str(path)),
                audio.preprocess(seg, audio.CONTENT, None, str(path)),
            )
        return self._mels[path]

    def grouped_mels(self, manifest, groups, which: int):
        return OrderedDict((k, [self.mels(manifest, r)[which] for r in rs]) for k, rs in groups.items())

    # -- models ----------------------------------------------------------
    def _speaker_train_config(self, steps):
        c = self.config
        return speaker_encoder.SpeakerTrainConfig(
            steps=steps, speakers_per_batch=c.speaker_batch, utterances_per_speaker=5, seed=c.seed, log_every=100
        )

    def _encoder_config(self):
        if self.config.model_scale == "desk":
            return speaker_encoder.SpeakerEncoderConfig.desk()
        return speaker_encoder.SpeakerEncoderConfig()

    def speaker_encoder(self, which: str, policy: str | None = None) -> speaker_encoder.SpeakerEncoder:
        c = self.config
        policy = policy or c.session_policy
        key = ("spk", which, policy if which == "finetuned" else None)
        if key in self._cache:
            return self._cache[key]
        base_fp = _fingerprint(self.pretrain_fingerprint(), c.speaker_pretrain_steps, c.speaker_batch, c.model_scale, c.seed)
        if which == "pretrained":
            path = self.dir / f"speaker-pretrained-{base_fp}.cstc"
        else:
            fp = _fingerprint(base_fp, self.corpus_fingerprint(), c.speaker_finetune_steps, policy)
            path = self.dir / f"speaker-finetuned-{fp}.cstc"
        self._require(path, "train-speaker")
        if path.exists():
            model = speaker_encoder.load_speaker_encoder(path)
        elif which == "pretrained":
            pm = self.pretrain_manifest()
            groups = self.grouped_mels(pm, corpus.combine_speaker_sessions(pm, "combined"), 0)
            model, _ = speaker_encoder.train_speaker_encoder(
                groups, self._speaker_train_config(c.speaker_pretrain_steps), "full", encoder_config=self._encoder_config()
            )
            speaker_encoder.save_speaker_encoder(path, model)
        else:
            m = self.manifest()
            groups = self.grouped_mels(m, corpus.combine_speaker_sessions(m, policy), 0)
            model, _ = speaker_encoder.train_speaker_encoder(
                groups,
                self._speaker_train_config(c.speaker_finetune_steps),
                "finetune",
                init=self.speaker_encoder("pretrained"),
            )
            speaker_encoder.save_speaker_encoder(path, model)
        self._cache[key] = model
        return model

    def conditioning_key(self, record: corpus.SpeechRecord, conditioning: str, policy: str) -> str:
        if conditioning == "one-hot" or policy == "not-combined":
            return f"{record.base_speaker}{corpus.SESSION_SEP}{record.session}"
        return record.base_speaker

    def conditioning_table(self, conditioning: str | None = None, policy: str | None = None) -> dict:
        """Speaker-level conditioning vector per conditioning key."""
        conditioning = conditioning or self.config.conditioning
        policy = policy or self.config.session_policy
        key = ("cond", conditioning, policy)
        if key in self._cache:
            return self._cache[key]
        m = self.manifest()
        if conditioning == "one-hot":
            table = separation.one_hot_conditioning([self.conditioning_key(r, "one-hot", policy) for r in m.records])
        else:
            groups = OrderedDict()
            for r in m.records:
                groups.setdefault(self.conditioning_key(r, conditioning, policy), []).append(r)
            table = separation.speaker_conditioning(self.grouped_mels(m, groups, 0), self.speaker_encoder(conditioning, policy))
        self._cache[key] = table
        return table

    def separator(self, conditioning: str | None = None, policy: str | None = None) -> separation.Separator:
        c = self.config
        conditioning = conditioning or c.conditioning
        policy = policy or c.session_policy
        if conditioning == "one-hot":
            policy = "not-combined"
        key = ("sep", conditioning, policy)
        if key in self._cache:
            return self._cache[key]
        fp = _fingerprint(
            self.corpus_fingerprint(),
            self.pretrain_fingerprint() if conditioning != "one-hot" else None,
            conditioning,
            policy,
            c.speaker_pretrain_steps,
            c.speaker_finetune_steps,
            c.speaker_batch,
            c.separator_steps,
            c.separator_lr,
            c.model_scale,
            c.seed,
        )
        path = self.dir / f"separator-{conditioning}-{fp}.cstc"
        self._require(path, "train-sep")
        if path.exists():
            model = separation.load_separator(path)
        else:
            table = self.conditioning_table(conditioning, policy)
            m = self.manifest()
            groups = OrderedDict()
            for r in m.records:
                groups.setdefault(self.conditioning_key(r, conditioning, policy), []).append(r)
            cond_dim = len(next(iter(table.values())))
            mc = separation.SeparatorConfig.desk(cond_dim) if c.model_scale == "desk" else separation.SeparatorConfig(cond_dim)
            tc = separation.SeparatorTrainConfig(steps=c.separator_steps, lr=c.separator_lr, seed=c.seed)
            with open(path.with_suffix(".log"), "w") as progress:
                model, _ = separation.train_separator(
                    self.grouped_mels(m, groups, 1), table, tc, model_config=mc, progress=progress
                )
            separation.save_separator(path, model)
        self._cache[key] = model
        return model

    def baseline(self, kind: str):
        c = self.config
        if ("base", kind) in self._cache:
            return self._cache[("base", kind)]
        fp = _fingerprint(self.pretrain_fingerprint(), kind, c.baseline_steps, c.speaker_batch, c.model_scale, c.seed)
        path = self.dir / f"{kind}-{fp}.cstc"
        self._require(path, "train-baseline")
        if path.exists():
            model = baselines.load_baseline(path)
        else:
            pm = self.pretrain_manifest()
            groups = self.grouped_mels(pm, corpus.combine_speaker_sessions(pm, "combined"), 0)
            tc = self._speaker_train_config(c.baseline_steps)
            desk = c.model_scale == "desk"
            if kind == "dvector":
                model, _ = baselines.train_d_vector(groups, tc, baselines.DVectorConfig.desk() if desk else None)
            else:
                model, _ = baselines.train_x_vector(groups, tc, baselines.XVectorConfig.desk() if desk else None)
            baselines.save_baseline(path, model)
        self._cache[("base", kind)] = model
        return model

    # -- embeddings ------------------------------------------------------
    def conditioning_dim(self) -> int | None:
        c = self.config
        if c.embedding != "content":
            return None
        return len(next(iter(self.conditioning_table().values())))

    def embeddings(self) -> "OrderedDict[str, np.ndarray]":
        """One embedding per sample; content codes keep their (64, K) shape."""
        c = self.config
        sm = self.samples_manifest()
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        if c.embedding == "content":
            table = self.conditioning_table()
            model = self.separator()
            for key, rs in sm.samples().items():
                cond_key = self.conditioning_key(rs[0], c.conditioning, c.session_policy)
                mels = [self.mels(sm, r)[1] for r in rs]
                out[key] = separation.extract_content(mels, cond_key, table, model, key).values
        elif c.embedding == "speaker":
            enc = self.speaker_encoder(c.conditioning)
            for key, rs in sm.samples().items():
                embs = [speaker_encoder.embed_utterance(self.mels(sm, r)[0], enc, key) for r in rs]
                out[key] = speaker_encoder.average_speaker_embedding(embs).values
        else:
            model = self.baseline(c.embedding)
            fn = baselines.d_vector if c.embedding == "dvector" else baselines.x_vector
            for key, rs in sm.samples().items():
                out[key] = np.mean([fn(self.mels(sm, r)[0], model).values for r in rs], axis=0)
        return out

    def save_embeddings(self, embeddings, path) -> None:
        save_tensors(path, embeddings)

    # -- run -------------------------------------------------------------
    def run(self) -> EvalReport:
        c = self.config
        embs = self.embeddings()
        labels = self.samples_manifest().sample_labels()
        keys = list(embs)
        y = np.array([labels[k] for k in keys])
        if c.embedding == "content":
            X_pooled = np.stack([assessment.pool_content_embedding(embs[k]) for k in keys])
            X_head = np.stack([assessment.pooled_head_input(embs[k]) for k in keys])
        else:
            X_pooled = X_head = np.stack([embs[k] for k in keys])
        train_idx, eval_idx = assessment.stratified_split(y, c.eval_fraction, c.seed)
        results = {}
        for kind in c.classifiers:
            X = X_head if kind == "LinearHead" else X_pooled
            res = assessment.evaluate_classifier(
                kind, X[train_idx], y[train_idx], X[eval_idx], y[eval_idx], c.n_trials, c.folds, c.seed
            )
            results[kind] = _result_dict(res)
            log.info("%s: ensembled accuracy %.4f", kind, res.ensembled.accuracy)
        return EvalReport(
            config=c.to_dict(),
            conditioning_dim=self.conditioning_dim(),
            n_samples=len(keys),
            n_train=int(train_idx.size),
            n_eval=int(eval_idx.size),
            eval_ids=[keys[i] for i in eval_idx],
            eval_labels=y[eval_idx].tolist(),
            results=results,
            seeds={"experiment": c.seed, "pretrain_corpus": c.seed + 10_000, "split": c.seed, "folds": c.seed},
            environment={
                "python": platform.python_version(),
                "numpy": np.__version__,
                "torch": torch.__version__,
                "sklearn": sklearn.__version__,
            },
            created=time.strftime("%Y-%m-%dT%H:%M:%S"),
        )


def run_condition(config: ExperimentConfig) -> EvalReport:
    """Build whatever the condition needs, evaluate it and persist the report."""
    exp = Experiment(config)
    report = exp.run()
    path = Path(config.report) if config.report else exp.dir / "reports" / (
        f"{config.embedding}-{config.conditioning}-{config.session_policy}-seed{config.seed}.json"
    )
    emit_report(report, path)
    return report


MATRICES = ("embeddings", "conditioning", "sessions")


def condition_matrix(name: str, base: ExperimentConfig) -> list[ExperimentConfig]:
    """Configurations for one comparison.

    ``embeddings``: every embedding kind with all classifiers; ``conditioning``:
    content codes under each conditioning mode; ``sessions``: content codes
    with and without merging a speaker's sessions for the encoder.
    """
    r = dataclasses.replace
    if name == "embeddings":
        kinds = list(assessment.KINDS)
        return [
            r(base, embedding="xvector", classifiers=kinds),
            r(base, embedding="dvector", classifiers=kinds),
            r(base, embedding="speaker", conditioning="finetuned", classifiers=kinds),
            r(base, embedding="content", conditioning="finetuned", classifiers=kinds),
        ]
    if name == "conditioning":
        return [r(base, embedding="content", conditioning=m) for m in CONDITIONINGS]
    if name == "sessions":
        return [r(base, embedding="content", conditioning="finetuned", session_policy=p) for p in POLICIES]
    raise ConfigError(f"unknown condition matrix {name!r}; choose from {MATRICES}")


def project_embeddings_2d(embeddings, seed: int = 0) -> np.ndarray:
    """Neighbour-preserving 2-D layout (t-SNE, PCA initialised), one row per input."""
    X = np.asarray([np.asarray(e, dtype=np.float64).reshape(-1) for e in embeddings])
    if X.shape[0] < 2:
        raise DegenerateInput("need at least 2 embeddings to project")
    if X.shape[0] < 5:
        return PCA(n_components=2, random_state=seed).fit_transform(X) if X.shape[1] >= 2 else np.c_[X, np.zeros(len(X))]
    perplexity = min(30.0, (X.shape[0] - 1) / 3.0)
    return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(X)


def plot_projection(points, labels, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points = np.asarray(points)
    fig, ax = plt.subplots(figsize=(5, 5))
    for lab in sorted(set(labels)):
        idx = [i for i, v in enumerate(labels) if v == lab]
        ax.scatter(points[idx, 0], points[idx, 1], s=14, label=str(lab))
    ax.legend(fontsize=7, markerscale=1.2)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def load_embeddings(path) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict(load_tensors(path))

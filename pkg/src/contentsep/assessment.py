"""CN-vs-IM classification harness.

Positive class is IM (label 1). Content embeddings are pooled to 512-dim
vectors for the classical classifiers; the linear head sees the 64-channel
code directly (a per-frame linear map before pooling).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import optuna
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis
from sklearn.ensemble import RandomForestClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC
from sklearn.tree import DecisionTreeClassifier

from .errors import ConfigError, DegenerateLabels, EmptyEmbedding, ShapeError, TieRisk

log = logging.getLogger(__name__)

CN, IM = 0, 1
POOL_BINS = 8
KINDS = ("LDA", "SVM", "DT", "RF", "LinearHead")
LINEAR_HEAD_LR = 0.004


@dataclass
class Metrics:
    accuracy: float
    f1: float
    specificity: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_confusion(cls, tp: int, fp: int, tn: int, fn: int) -> "Metrics":
        if tp + fn == 0 or tn + fp == 0:
            raise DegenerateLabels("recall and specificity need both classes among the labels")
        f1_den = 2 * tp + fp + fn
        return cls(
            accuracy=(tp + tn) / (tp + fp + tn + fn),
            f1=2 * tp / f1_den if f1_den else 0.0,
            specificity=tn / (tn + fp),
            recall=tp / (tp + fn),
            tp=int(tp),
            fp=int(fp),
            tn=int(tn),
            fn=int(fn),
        )

    def rounded(self, digits: int = 4) -> tuple[float, float, float, float]:
        return tuple(round(v, digits) for v in (self.accuracy, self.f1, self.specificity, self.recall))


def compute_metrics(predictions, labels) -> Metrics:
    p = np.asarray(predictions).astype(int).reshape(-1)
    y = np.asarray(labels).astype(int).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError(f"{p.shape[0]} predictions for {y.shape[0]} labels")
    tp = int(np.sum((p == IM) & (y == IM)))
    fp = int(np.sum((p == IM) & (y == CN)))
    tn = int(np.sum((p == CN) & (y == CN)))
    fn = int(np.sum((p == CN) & (y == IM)))
    return Metrics.from_confusion(tp, fp, tn, fn)


def adaptive_pool_matrix(K: int, n_bins: int = POOL_BINS) -> np.ndarray:
    """``(K, n_bins)`` averaging matrix.

    Bin ``b`` covers columns ``[floor(b*K/n), ceil((b+1)*K/n))``, so bins are
    disjoint and equal-sized whenever ``n`` divides ``K`` and never empty.
    """
    if K <= 0:
        raise EmptyEmbedding("cannot pool an embedding with no time steps")
    P = np.zeros((K, n_bins))
    for b in range(n_bins):
        lo = (b * K) // n_bins
        hi = -(-((b + 1) * K) // n_bins)
        P[lo:hi, b] = 1.0 / (hi - lo)
    return P


def pool_content_embedding(C, n_bins: int = POOL_BINS) -> np.ndarray:
    """Average-pool the time axis to ``n_bins`` and flatten row-major (64 x 8 = 512)."""
    values = np.asarray(getattr(C, "values", C), dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"content embedding must be 2-D, got shape {values.shape}")
    return (values @ adaptive_pool_matrix(values.shape[1], n_bins)).reshape(-1)


class LinearHead(nn.Module):
    """Per-frame linear map, adaptive average pooling, linear projection to 2 logits.

    Vector features are treated as a single frame with ``n_bins=1``.
    """

    def __init__(self, in_channels: int = 64, n_bins: int = POOL_BINS):
        super().__init__()
        self.n_bins = n_bins
        self.frame = nn.Linear(in_channels, in_channels)
        self.classifier = nn.Linear(in_channels * n_bins, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(batch, channels, K) -> (batch, 2)."""
        h = self.frame(x.transpose(1, 2)).transpose(1, 2)
        pooled = F.adaptive_avg_pool1d(h, self.n_bins)
        return self.classifier(pooled.flatten(1))

    def forward_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        """Same logits from already-pooled input (batch, channels, n_bins).

        The frame map is affine and pooling averages, so the two commute.
        """
        h = self.frame(pooled.transpose(1, 2)).transpose(1, 2)
        return self.classifier(h.flatten(1))


@torch.no_grad()
def linear_head_forward(C, head: LinearHead) -> np.ndarray:
    values = np.asarray(getattr(C, "values", C), dtype=np.float32)
    if values.ndim != 2 or values.shape[0] != head.frame.in_features:
        raise ShapeError(f"head expects ({head.frame.in_features}, K) input, got {values.shape}")
    head.eval()
    return head(torch.from_numpy(values).unsqueeze(0))[0].numpy()


def pooled_head_input(C, n_bins: int = POOL_BINS) -> np.ndarray:
    """(channels, n_bins) matrix the linear head consumes for a content embedding."""
    values = np.asarray(getattr(C, "values", C), dtype=np.float64)
    return values @ adaptive_pool_matrix(values.shape[1], n_bins)


class LinearHeadClassifier:
    """sklearn-style wrapper training a :class:`LinearHead` full-batch with AdamW."""

    def __init__(self, lr: float = LINEAR_HEAD_LR, weight_decay: float = 0.0, epochs: int = 300, seed: int = 0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed
        self.head = None

    @staticmethod
    def _as_input(X) -> torch.Tensor:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 2:
            X = X[:, :, None]
        return torch.from_numpy(X)

    def fit(self, X, y):
        x = self._as_input(X)
        target = torch.as_tensor(np.asarray(y), dtype=torch.long)
        torch.manual_seed(self.seed)
        self.head = LinearHead(x.shape[1], x.shape[2])
        opt = torch.optim.AdamW(self.head.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        self.head.train()
        for _ in range(self.epochs):
            loss = F.cross_entropy(self.head.forward_pooled(x), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.head.eval()
        return self

    @torch.no_grad()
    def predict(self, X) -> np.ndarray:
        return self.head.forward_pooled(self._as_input(X)).argmax(dim=1).numpy()


def _check_labels(y, min_per_class: int = 2):
    y = np.asarray(y).astype(int)
    counts = np.bincount(y, minlength=2)
    if len(counts) > 2 or counts.min() < min_per_class:
        raise DegenerateLabels(f"need >= {min_per_class} samples of each of 2 classes, got counts {counts.tolist()}")
    return y


def build_classifier(kind: str, hyperparams: dict | None = None, seed: int = 0):
    hp = dict(hyperparams or {})
    if kind == "LDA":
        shrinkage = hp.get("shrinkage") if hp.get("use_shrinkage") else None
        if shrinkage is None:
            return LinearDiscriminantAnalysis(solver="svd")
        return LinearDiscriminantAnalysis(solver="lsqr", shrinkage=shrinkage)
    if kind == "SVM":
        return make_pipeline(
            StandardScaler(),
            SVC(C=hp.get("C", 1.0), kernel=hp.get("kernel", "rbf"), gamma=hp.get("gamma", "scale"), random_state=seed),
        )
    if kind == "DT":
        return DecisionTreeClassifier(
            max_depth=hp.get("max_depth"), min_samples_leaf=hp.get("min_samples_leaf", 1), random_state=seed
        )
    if kind == "RF":
        return RandomForestClassifier(
            n_estimators=hp.get("n_estimators", 100),
            max_depth=hp.get("max_depth"),
            max_features=hp.get("max_features", "sqrt"),
            random_state=seed,
        )
    if kind == "LinearHead":
        return LinearHeadClassifier(
            lr=hp.get("lr", LINEAR_HEAD_LR), weight_decay=hp.get("weight_decay", 0.0), epochs=hp.get("epochs", 300), seed=seed
        )
    raise ConfigError(f"unknown classifier kind {kind!r}; expected one of {KINDS}")


def train_classifier(kind: str, features, labels, hyperparams: dict | None = None, seed: int = 0):
    y = _check_labels(labels)
    X = np.asarray(features)
    if X.shape[0] != y.shape[0]:
        raise ShapeError(f"{X.shape[0]} feature rows for {y.shape[0]} labels")
    if kind != "LinearHead" and X.ndim != 2:
        X = X.reshape(X.shape[0], -1)
    return build_classifier(kind, hyperparams, seed).fit(X, y)


def predict(model, features) -> np.ndarray:
    X = np.asarray(features)
    if not isinstance(model, LinearHeadClassifier) and X.ndim != 2:
        X = X.reshape(X.shape[0], -1)
    return np.asarray(model.predict(X)).astype(int)


# name -> ("float", lo, hi, log) | ("int", lo, hi) | ("categorical", choices)
SEARCH_SPACES = {
    "SVM": {
        "C": ("float", 1e-2, 1e2, True),
        "kernel": ("categorical", ["linear", "rbf"]),
        "gamma": ("float", 1e-4, 1.0, True),
    },
    "DT": {"max_depth": ("int", 2, 20), "min_samples_leaf": ("int", 1, 10)},
    "RF": {
        "n_estimators": ("int", 50, 500),
        "max_depth": ("int", 2, 20),
        "max_features": ("categorical", ["sqrt", "log2"]),
    },
    "LDA": {"use_shrinkage": ("categorical", [False, True]), "shrinkage": ("float", 0.0, 1.0, False)},
    "LinearHead": {"lr": ("float", 1e-4, 1e-2, True), "weight_decay": ("float", 1e-6, 1e-2, True)},
}


@dataclass
class TrialConfig:
    kind: str
    hyperparams: dict
    seed: int
    score: float = math.nan
    n_trials: int = 0


def stratified_split(labels, eval_fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Train/eval index arrays preserving class proportions.

    ``|eval| = floor(eval_fraction * N + 0.5)``; per-class eval quotas are
    the proportional shares rounded by largest remainder (ties to the lower
    label). Members are drawn from a seeded permutation of each class.
    """
    y = np.asarray(labels).astype(int)
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateLabels("stratified split needs both classes present")
    N = y.shape[0]
    n_eval = int(math.floor(eval_fraction * N + 0.5))
    shares = np.array([n_eval * np.sum(y == c) / N for c in classes])
    quota = np.floor(shares).astype(int)
    order = sorted(range(len(classes)), key=lambda i: (-(shares[i] - quota[i]), classes[i]))
    for i in order[: n_eval - quota.sum()]:
        quota[i] += 1
    rng = np.random.default_rng(seed)
    eval_idx = []
    for c, q in zip(classes, quota):
        members = np.flatnonzero(y == c)
        eval_idx.extend(rng.permutation(members)[:q].tolist())
    eval_idx = np.sort(np.array(eval_idx, dtype=int))
    train_idx = np.setdiff1d(np.arange(N), eval_idx)
    return train_idx, eval_idx


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold index per sample.

    Each class is shuffled and dealt round-robin; the dealing position carries
    over from one class to the next so fold sizes stay within one sample.
    """
    y = np.asarray(labels).astype(int)
    folds = np.full(y.shape[0], -1, dtype=int)
    rng = np.random.default_rng(seed)
    pos = 0
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        if members.size < k:
            raise DegenerateLabels(f"class {c} has {members.size} < {k} members")
        for m in rng.permutation(members):
            folds[m] = pos % k
            pos += 1
    return folds


def cv_score(kind: str, hyperparams: dict, X, y, folds: np.ndarray, seed: int = 0) -> float:
    """Mean held-out accuracy over the folds in ``folds``."""
    X = np.asarray(X)
    y = np.asarray(y).astype(int)
    scores = []
    for f in np.unique(folds):
        tr, va = folds != f, folds == f
        model = train_classifier(kind, X[tr], y[tr], hyperparams, seed)
        scores.append(float(np.mean(predict(model, X[va]) == y[va])))
    return float(np.mean(scores))


def _suggest(trial: optuna.Trial, space: dict) -> dict:
    params = {}
    for name, spec in space.items():
        if spec[0] == "float":
            params[name] = trial.suggest_float(name, spec[1], spec[2], log=spec[3])
        elif spec[0] == "int":
            params[name] = trial.suggest_int(name, spec[1], spec[2])
        elif spec[0] == "categorical":
            params[name] = trial.suggest_categorical(name, list(spec[1]))
        else:
            raise ConfigError(f"unknown search dimension type {spec[0]!r}")
    return params


def hyperparameter_search(
    kind: str,
    X,
    y,
    n_trials: int = 50,
    seed: int = 0,
    folds: np.ndarray | None = None,
    k: int = 5,
    space: dict | None = None,
    sampler: str = "tpe",
) -> TrialConfig:
    """Seeded search maximising mean CV accuracy on the training data.

    ``sampler="grid"`` enumerates categorical dimensions exhaustively.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    space = SEARCH_SPACES[kind] if space is None else space
    y = _check_labels(y)
    if folds is None:
        folds = stratified_kfold(y, k, seed)
    if sampler == "grid":
        grid = {name: list(spec[1]) for name, spec in space.items() if spec[0] == "categorical"}
        smp = optuna.samplers.GridSampler(grid, seed=seed)
    else:
        smp = optuna.samplers.TPESampler(seed=seed)
    optuna.logging.set_verbosity(optuna.logging.WARNING)
    study = optuna.create_study(direction="maximize", sampler=smp)
    study.optimize(lambda t: cv_score(kind, _suggest(t, space), X, y, folds, seed), n_trials=n_trials)
    best = study.best_trial
    return TrialConfig(kind, dict(best.params), seed, float(best.value), len(study.trials))


def majority_vote(predictions) -> np.ndarray:
    """Per-column mode of a ``(k, n)`` prediction matrix; ``k`` must be odd."""
    P = np.asarray(predictions).astype(int)
    if P.ndim != 2:
        raise ShapeError(f"expected a (voters, samples) matrix, got shape {P.shape}")
    if P.shape[0] % 2 == 0:
        raise TieRisk(f"{P.shape[0]} voters can tie; use an odd number")
    n_labels = int(P.max()) + 1 if P.size else 1
    counts = np.stack([np.sum(P == c, axis=0) for c in range(n_labels)])
    return counts.argmax(axis=0)


@dataclass
class ClassifierResult:
    kind: str
    hyperparams: dict
    search_score: float
    fold_metrics: list = field(default_factory=list)
    fold_predictions: list = field(default_factory=list)
    ensembled_predictions: list = field(default_factory=list)
    ensembled: Metrics | None = None


def evaluate_classifier(
    kind: str,
    X_train,
    y_train,
    X_eval,
    y_eval,
    n_trials: int = 50,
    k: int = 5,
    seed: int = 0,
) -> ClassifierResult:
    """Search, k-fold CV on the training split, majority vote on the eval split."""
    if k % 2 == 0:
        raise TieRisk(f"k={k} fold models can tie under majority voting; use an odd k")
    X_train, X_eval = np.asarray(X_train), np.asarray(X_eval)
    y_train = _check_labels(y_train, min_per_class=k)
    y_eval = np.asarray(y_eval).astype(int)
    folds = stratified_kfold(y_train, k, seed)
    best = hyperparameter_search(kind, X_train, y_train, n_trials, seed, folds)
    result = ClassifierResult(kind, best.hyperparams, best.score)
    votes = []
    for f in range(k):
        tr, va = folds != f, folds == f
        model = train_classifier(kind, X_train[tr], y_train[tr], best.hyperparams, seed)
        result.fold_metrics.append(_safe_metrics(predict(model, X_train[va]), y_train[va]))
        votes.append(predict(model, X_eval))
    result.fold_predictions = [v.tolist() for v in votes]
    ensembled = majority_vote(np.stack(votes))
    result.ensembled_predictions = ensembled.tolist()
    result.ensembled = compute_metrics(ensembled, y_eval)
    return result


def _safe_metrics(pred, y):
    try:
        return compute_metrics(pred, y)
    except DegenerateLabels:
        return None

"""Evaluation protocols on frozen or fine-tuned encoders, plus aggregation helpers."""

from __future__ import annotations

import copy
import csv
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy.stats import rankdata
from torch import nn

from .augment import AugmentConfig, SeriesBatch, augment
from .encoder import encode
from .metrics import MetricPair, fce_metric, fd_metric, metric_pair  # noqa: F401  (re-exported)

logger = logging.getLogger(__name__)

# 10^-4 .. 10^4 plus C = "infinity" realized as 1e8
SVM_C_GRID = tuple(10.0 ** i for i in range(-4, 5)) + (1e8,)
DEFAULT_NU_MULTIPLIERS = (0.1, 0.5, 1.0, 2.0, 5.0)


class Protocol(str, enum.Enum):
    LINEAR = "linear"
    FINETUNE = "finetune"
    KNN = "knn"
    SVM = "svm"


@dataclass
class EvalConfig:
    """Optimizer and protocol settings for the supervised evaluations."""

    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 256
    augment: bool = True
    seed: int = 0
    finetune_epochs: int = 100
    lr_encoder: float = 1e-4
    lr_classifier: float = 1e-3
    finetune_weight_decay: float = 1e-3
    knn_k: int = 5
    svm_kernel: str = "linear"
    svm_max_iter: int = 1_000_000


@dataclass
class EvalReport:
    protocol: str
    dataset: str
    framework: str
    seed: int
    metrics: dict[str, float] = field(default_factory=dict)
    fd_metric: float | None = None
    fce_metric: float | None = None
    curves: list[dict] = field(default_factory=list)
    split: dict = field(default_factory=dict)

    @property
    def primary_metric(self) -> str:
        for key in ("macro_auc", "accuracy", "macro_f1"):
            if key in self.metrics:
                return key
        raise KeyError("report has no primary metric")

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: Mapping) -> "EvalReport":
        return cls(**rec)


def write_reports(reports: Iterable[EvalReport], path) -> None:
    with open(path, "a") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record()) + "\n")


def read_reports(path) -> list[EvalReport]:
    with open(path) as fh:
        return [EvalReport.from_record(json.loads(line)) for line in fh if line.strip()]


SUMMARY_COLUMNS = ("dataset", "framework", "metric_mean", "metric_std", "seed_count")


def summarize(reports: Sequence[EvalReport], metric: str | None = None) -> list[dict]:
    """Mean and std over seeds per (dataset, framework); std is the sample std."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in reports:
        key = metric or r.primary_metric
        groups.setdefault((r.dataset, r.framework), []).append(r.metrics[key])
    rows = []
    for (dataset, framework), vals in sorted(groups.items()):
        arr = np.asarray(vals, dtype=float)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append(dict(dataset=dataset, framework=framework, metric_mean=float(arr.mean()),
                         metric_std=std, seed_count=len(arr)))
    return rows


def write_summary_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _check_labels(train: SeriesBatch, test: SeriesBatch) -> None:
    if train.labels is None or test.labels is None:
        raise ValueError("evaluation needs labelled train and test batches")
    if train.multilabel != test.multilabel:
        raise ValueError("train and test label formats differ")
    if train.multilabel and train.labels.shape[1] != test.labels.shape[1]:
        raise ValueError(f"train has {train.labels.shape[1]} labels, test has {test.labels.shape[1]}")
    if not train.multilabel and not set(np.unique(test.labels)) <= set(np.unique(train.labels)):
        raise ValueError("test set contains classes absent from the training set")


def _n_outputs(train: SeriesBatch, test: SeriesBatch) -> int:
    if train.multilabel:
        return train.labels.shape[1]
    return int(max(train.labels.max(), test.labels.max())) + 1


def _classifier(dim: int, n_out: int, seed: int) -> nn.Linear:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    clf = nn.Linear(dim, n_out).double()
    torch.random.set_rng_state(gen_state)
    return clf


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _loss_fn(multilabel: bool):
    return nn.BCEWithLogitsLoss() if multilabel else nn.CrossEntropyLoss()


def _targets(labels: np.ndarray, multilabel: bool) -> torch.Tensor:
    return torch.as_tensor(labels, dtype=torch.float64 if multilabel else torch.long)


def _scores(logits: torch.Tensor, labels: np.ndarray, multilabel: bool, prefix: str = "test") -> dict[str, float]:
    loss = float(_loss_fn(multilabel)(logits, _targets(labels, multilabel)))
    if multilabel:
        return {"macro_auc": macro_auc(torch.sigmoid(logits).numpy(), labels), f"{prefix}_loss": loss}
    acc = float((logits.argmax(1).numpy() == labels).mean())
    return {"accuracy": acc, f"{prefix}_loss": loss}


def _cosine(optimizer, total_steps: int):
    return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(total_steps, 1))


def linear_eval(encoder: nn.Module, train: SeriesBatch, test: SeriesBatch, cfg: EvalConfig | None = None,
                valid: SeriesBatch | None = None, dataset: str = "", framework: str = "") -> EvalReport:
    """Train one affine classifier on frozen GAP features.

    The encoder stays in inference mode throughout and its weights are not
    touched. Training inputs receive amplitude-resize and vertical-shift
    augmentation when ``cfg.augment`` is set; test inputs are never augmented.
    """
    cfg = cfg or EvalConfig()
    _check_labels(train, test)
    multilabel = train.multilabel
    rng = np.random.default_rng(cfg.seed)
    aug_cfg = AugmentConfig.for_phase("part1_linear_eval")

    clean_train = encode(encoder, train).double()
    clf = _classifier(clean_train.shape[1], _n_outputs(train, test), cfg.seed)
    opt = torch.optim.AdamW(clf.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps = cfg.epochs * math.ceil(len(train) / cfg.batch_size)
    sched = _cosine(opt, steps)
    loss_fn = _loss_fn(multilabel)
    curves = []
    for epoch in range(cfg.epochs):
        feats = encode(encoder, augment(train, aug_cfg, rng)).double() if cfg.augment else clean_train
        total = 0.0
        for idx in _batches(len(train), cfg.batch_size, rng):
            loss = loss_fn(clf(feats[idx]), _targets(train.labels[idx], multilabel))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        curves.append({"epoch": epoch + 1, "train_loss": total / len(train)})

    with torch.no_grad():
        metrics = _scores(clf(encode(encoder, test).double()), test.labels, multilabel)
        if valid is not None:
            metrics.update({k: v for k, v in _scores(clf(encode(encoder, valid).double()), valid.labels,
                                                     multilabel, "valid").items() if k.endswith("loss")})
    return EvalReport("linear", dataset, framework, cfg.seed, metrics, curves=curves)


def finetune_eval(encoder: nn.Module, train_subset: SeriesBatch, test: SeriesBatch, cfg: EvalConfig | None = None,
                  valid: SeriesBatch | None = None, dataset: str = "", framework: str = "") -> EvalReport | None:
    """Jointly train a copy of the encoder and a linear classifier.

    Encoder and classifier sit in separate AdamW parameter groups with their
    own learning rates; batch-norm statistics update during training. Returns
    None with a warning if the subset misses a class present in the test set.
    """
    cfg = cfg or EvalConfig()
    try:
        _check_labels(train_subset, test)
    except ValueError as err:
        if train_subset.labels is not None and "absent" in str(err):
            logger.warning("%s: fine-tuning skipped, %s", dataset or "dataset", err)
            return None
        raise
    multilabel = train_subset.multilabel
    rng = np.random.default_rng(cfg.seed)
    aug_cfg = AugmentConfig.for_phase("part1_linear_eval")
    model = copy.deepcopy(encoder)
    dtype = next(model.parameters()).dtype
    clf = _classifier(model.representation_dim, _n_outputs(train_subset, test), cfg.seed)
    opt = torch.optim.AdamW([
        {"params": model.parameters(), "lr": cfg.lr_encoder},
        {"params": clf.parameters(), "lr": cfg.lr_classifier},
    ], weight_decay=cfg.finetune_weight_decay)
    steps = cfg.finetune_epochs * math.ceil(len(train_subset) / cfg.batch_size)
    sched = _cosine(opt, steps)
    loss_fn = _loss_fn(multilabel)
    curves = []
    for epoch in range(cfg.finetune_epochs):
        model.train()
        data = augment(train_subset, aug_cfg, rng) if cfg.augment else train_subset
        total = 0.0
        for idx in _batches(len(data), cfg.batch_size, rng):
            if len(idx) < 2:
                continue  # batch norm needs two samples
            x = torch.as_tensor(data.values[idx], dtype=dtype)
            loss = loss_fn(clf(model(x).double()), _targets(data.labels[idx], multilabel))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        curves.append({"epoch": epoch + 1, "train_loss": total / len(data)})

    with torch.no_grad():
        metrics = _scores(clf(encode(model, test).double()), test.labels, multilabel)
        if valid is not None:
            metrics.update({k: v for k, v in _scores(clf(encode(model, valid).double()), valid.labels,
                                                     multilabel, "valid").items() if k.endswith("loss")})
    report = EvalReport("finetune", dataset, framework, cfg.seed, metrics, curves=curves)
    report.split["train_size"] = len(train_subset)
    return report


def knn_predict(train_feats: np.ndarray, train_labels: np.ndarray, test_feats: np.ndarray, k: int = 5) -> np.ndarray:
    """Exhaustive Euclidean k-nearest-neighbor vote.

    Single-label: majority class, ties broken toward the smallest label.
    Multi-label: each label is predicted positive when more than half of the
    neighbors carry it.
    """
    train_feats = np.asarray(train_feats, dtype=np.float64)
    test_feats = np.asarray(test_feats, dtype=np.float64)
    if k > len(train_feats):
        raise ValueError(f"k={k} exceeds the training set size {len(train_feats)}")
    if k < 1:
        raise ValueError("k must be positive")
    d = torch.cdist(torch.as_tensor(test_feats), torch.as_tensor(train_feats)).numpy()
    # stable sort keeps the lower training index on equal distances
    nn_idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    votes = train_labels[nn_idx]
    if train_labels.ndim == 2:
        return (votes.sum(axis=1) * 2 > k).astype(np.int64)
    n_classes = int(train_labels.max()) + 1
    counts = np.stack([(votes == c).sum(axis=1) for c in range(n_classes)], axis=1)
    return counts.argmax(axis=1)


def knn_eval(encoder: nn.Module, train: SeriesBatch, test: SeriesBatch, k: int = 5,
             task: str | None = None) -> float:
    """k-NN accuracy (single-label) or macro-F1 (multi-label) on frozen features."""
    from sklearn.metrics import f1_score

    _check_labels(train, test)
    task = task or ("multilabel" if train.multilabel else "classification")
    pred = knn_predict(encode(encoder, train).numpy(), train.labels, encode(encoder, test).numpy(), k)
    if task == "multilabel":
        return float(f1_score(test.labels, pred, average="macro", zero_division=0))
    return float((pred == test.labels).mean())


def svm_grid_scores(train_feats: np.ndarray, train_labels: np.ndarray, test_feats: np.ndarray,
                    test_labels: np.ndarray, c_grid: Sequence[float] = SVM_C_GRID, kernel: str = "linear",
                    max_iter: int = 1_000_000) -> dict[float, float]:
    from sklearn.svm import SVC

    if len(np.unique(train_labels)) < 2:
        raise ValueError("SVM needs at least two classes in the training set")
    scores = {}
    for c in c_grid:
        clf = SVC(C=c, kernel=kernel, max_iter=max_iter)
        clf.fit(train_feats, train_labels)
        scores[c] = float((clf.predict(test_feats) == test_labels).mean())
    return scores


def svm_eval(encoder: nn.Module, train: SeriesBatch, test: SeriesBatch, c_grid: Sequence[float] = SVM_C_GRID,
             kernel: str = "linear", max_iter: int = 1_000_000) -> float:
    """Best test accuracy of an SVM over the penalty grid, on frozen features."""
    _check_labels(train, test)
    if train.multilabel:
        raise ValueError("SVM evaluation is defined for single-label datasets")
    scores = svm_grid_scores(encode(encoder, train).numpy(), train.labels, encode(encoder, test).numpy(),
                             test.labels, c_grid, kernel, max_iter)
    return max(scores.values())


def _binary_auc(score: np.ndarray, label: np.ndarray) -> float:
    """Mann-Whitney form of ROC-AUC with midranks for tied scores."""
    ranks = rankdata(score)
    pos = label == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean ROC-AUC over labels that have both classes present."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching N x K matrices")
    aucs = []
    for k in range(labels.shape[1]):
        n_pos = int(labels[:, k].sum())
        if 0 < n_pos < len(labels):
            aucs.append(_binary_auc(scores[:, k], labels[:, k]))
    if not aucs:
        raise ValueError("every label is degenerate (all positive or all negative)")
    return float(np.mean(aucs))


def mean_rank(table) -> dict[str, float]:
    """Average per-dataset rank of each framework (1 = best, ties averaged).

    ``table`` maps dataset -> {framework: metric}. Datasets with a missing or
    NaN cell for any framework are dropped.
    """
    frameworks: list[str] = []
    for row in table.values():
        for name in row:
            if name not in frameworks:
                frameworks.append(name)
    ranks = []
    for row in table.values():
        vals = [row.get(f) for f in frameworks]
        if any(v is None or (isinstance(v, float) and math.isnan(v)) for v in vals):
            continue
        ranks.append(rankdata(-np.asarray(vals, dtype=float), method="average"))
    if not ranks:
        raise ValueError("mean rank needs at least one complete dataset row")
    mean = np.mean(ranks, axis=0)
    return {f: float(m) for f, m in zip(frameworks, mean)}


def spread(reports: Sequence[EvalReport], metric: str = "accuracy") -> float:
    vals = [r.metrics[metric] for r in reports]
    return float(max(vals) - min(vals))


def sensitivity_sweep(cfg, multipliers=DEFAULT_NU_MULTIPLIERS, seed=None, data=None, out_dir=None) -> list[EvalReport]:
    """Pretrain and linear-evaluate ``cfg`` once per nu multiplier (see training.sensitivity_sweep)."""
    from .training import sensitivity_sweep as _sweep

    return _sweep(cfg, multipliers, seed, data, out_dir)

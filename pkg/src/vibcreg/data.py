"""Dataset loading, preprocessing and splitting for UCR, UEA and PTB-XL layouts.

Directory contracts (``root`` is the value of ``--dataset-root`` or the
``VIBCREG_DATA_ROOT`` environment variable)::

    <root>/UCR/<name>/<name>_TRAIN.tsv      label-first, tab separated
    <root>/UEA/<name>/<name>_TRAIN.ts       sktime .ts text format
    <root>/PTBXL/ptbxl_database.csv         plus scp_statements.csv and records100/
"""

from __future__ import annotations

import ast
import enum
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .augment import SeriesBatch

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "VIBCREG_DATA_ROOT"
PTBXL_FOLDS = tuple(range(1, 11))
ZNORM_STABILIZER = 1e-8


class Archive(str, enum.Enum):
    UCR = "UCR"
    UEA = "UEA"
    PTBXL = "PTBXL"


class DatasetNotFoundError(FileNotFoundError):
    pass


class UnsupportedDatasetError(ValueError):
    """Varying-length or missing-value datasets, which the protocols exclude."""


class SplitScheme(str, enum.Enum):
    STRATIFIED_80_20 = "stratified_80_20"
    ARCHIVE_GIVEN = "archive_given"
    PTBXL_FOLDS = "ptbxl_folds"


class Preprocessing(str, enum.Enum):
    ZNORM_ARCSINH = "znorm_arcsinh"
    ZNORM = "znorm"
    NONE = "none"


@dataclass
class DatasetDescriptor:
    name: str
    archive: Archive
    n_samples: int
    n_classes: int
    channels: int
    length: int
    source_paths: tuple[str, ...] = ()
    n_train: int | None = None
    class_names: tuple[str, ...] = ()
    folds: np.ndarray | None = field(default=None, repr=False)

    @property
    def multilabel(self) -> bool:
        return self.archive is Archive.PTBXL


@dataclass(frozen=True)
class SplitPlan:
    scheme: SplitScheme = SplitScheme.STRATIFIED_80_20
    seed: int = 0
    subset_fraction: float = 1.0
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ValueError(f"subset_fraction must be in (0, 1], got {self.subset_fraction}")


@dataclass
class SplitIndices:
    train: np.ndarray
    test: np.ndarray
    valid: np.ndarray | None = None


def data_root(root: str | os.PathLike | None = None) -> Path:
    root = root if root is not None else os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DatasetNotFoundError(f"no dataset root given and {DATA_ROOT_ENV} is unset")
    return Path(root)


def _archive_dir(root, archive: Archive) -> Path:
    """Accept either the archive directory itself or its parent."""
    base = data_root(root)
    sub = base / archive.value
    return sub if sub.is_dir() else base


@lru_cache(maxsize=1)
def dataset_summary() -> dict[str, dict]:
    """Published size statistics of the part-1 datasets, GunPoint and PTB-XL."""
    return json.loads(resources.files("vibcreg.resources").joinpath("ucr_summary.json").read_text())


def _remap_labels(raw: np.ndarray) -> tuple[np.ndarray, tuple[str, ...]]:
    classes, labels = np.unique(raw, return_inverse=True)
    names = tuple(str(int(c)) if isinstance(c, float) and float(c).is_integer() else str(c) for c in classes)
    return labels.astype(np.int64), names


def _read_ucr_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DatasetNotFoundError(f"missing file {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.replace(",", "\t").split()
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field")
    if not rows:
        raise ValueError(f"{path} is empty")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise UnsupportedDatasetError(f"{path}: ragged rows (widths {sorted(widths)})")
    arr = np.asarray(rows)
    if np.isnan(arr).any():
        raise UnsupportedDatasetError(f"{path}: contains missing values")
    return arr[:, 1:], arr[:, 0]


def load_ucr(name: str, root_dir=None) -> tuple[SeriesBatch, SeriesBatch, DatasetDescriptor]:
    """Load a univariate UCR dataset with its archive-given train/test split."""
    folder = _archive_dir(root_dir, Archive.UCR) / name
    if not folder.is_dir():
        raise DatasetNotFoundError(f"UCR dataset {name!r} not found under {folder.parent}")
    paths = [folder / f"{name}_TRAIN.tsv", folder / f"{name}_TEST.tsv"]
    x_tr, y_tr = _read_ucr_file(paths[0])
    x_te, y_te = _read_ucr_file(paths[1])
    if x_tr.shape[1] != x_te.shape[1]:
        raise UnsupportedDatasetError(f"{name}: train/test lengths differ ({x_tr.shape[1]} vs {x_te.shape[1]})")
    labels, class_names = _remap_labels(np.concatenate([y_tr, y_te]))
    n_tr = len(x_tr)
    desc = DatasetDescriptor(
        name=name, archive=Archive.UCR, n_samples=n_tr + len(x_te), n_classes=len(class_names),
        channels=1, length=x_tr.shape[1], source_paths=tuple(map(str, paths)), n_train=n_tr,
        class_names=class_names)
    return SeriesBatch(x_tr, labels[:n_tr]), SeriesBatch(x_te, labels[n_tr:]), desc


def parse_ts_file(path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Parse an equal-length .ts file into (N x C x L values, raw labels, header)."""
    path = Path(path)
    if not path.is_file():
        raise DatasetNotFoundError(f"missing file {path}")
    header: dict[str, str] = {}
    series, labels = [], []
    in_data = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not in_data:
                if line.lower() == "@data":
                    in_data = True
                elif line.startswith("@"):
                    key, _, value = line[1:].partition(" ")
                    header[key.lower()] = value.strip()
                continue
            parts = line.split(":")
            has_label = header.get("classlabel", "false").split()[0].lower() == "true"
            dims = parts[:-1] if has_label else parts
            if has_label:
                labels.append(parts[-1].strip())
            if any("?" in d or "nan" in d.lower() for d in dims):
                raise UnsupportedDatasetError(f"{path}:{lineno}: missing values are not supported")
            if any("(" in d for d in dims):
                raise UnsupportedDatasetError(f"{path}: timestamped series are not supported")
            series.append([np.asarray(d.split(","), dtype=np.float64) for d in dims])
    if header.get("equallength", "true").lower() == "false":
        raise UnsupportedDatasetError(f"{path}: varying-length dataset")
    lengths = {len(dim) for s in series for dim in s}
    channels = {len(s) for s in series}
    if len(lengths) != 1 or len(channels) != 1:
        raise UnsupportedDatasetError(f"{path}: varying-length dataset (lengths {sorted(lengths)[:5]})")
    values = np.asarray(series)
    return values, np.asarray(labels), header


def load_uea(name: str, root_dir=None) -> tuple[SeriesBatch, SeriesBatch, DatasetDescriptor]:
    """Load a multivariate UEA dataset in .ts format (or a converted .npz)."""
    folder = _archive_dir(root_dir, Archive.UEA) / name
    npz = folder / f"{name}.npz"
    if npz.is_file() and not (folder / f"{name}_TRAIN.ts").is_file():
        return load_npz(npz, name)
    if not folder.is_dir():
        raise DatasetNotFoundError(f"UEA dataset {name!r} not found under {folder.parent}")
    paths = [folder / f"{name}_TRAIN.ts", folder / f"{name}_TEST.ts"]
    x_tr, y_tr, header = parse_ts_file(paths[0])
    x_te, y_te, _ = parse_ts_file(paths[1])
    if x_tr.shape[1:] != x_te.shape[1:]:
        raise UnsupportedDatasetError(f"{name}: train/test shapes differ {x_tr.shape[1:]} vs {x_te.shape[1:]}")
    labels, class_names = _remap_labels(np.concatenate([y_tr, y_te]))
    n_tr = len(x_tr)
    desc = DatasetDescriptor(
        name=name, archive=Archive.UEA, n_samples=n_tr + len(x_te), n_classes=len(class_names),
        channels=x_tr.shape[1], length=x_tr.shape[2], source_paths=tuple(map(str, paths)),
        n_train=n_tr, class_names=class_names)
    return SeriesBatch(x_tr, labels[:n_tr]), SeriesBatch(x_te, labels[n_tr:]), desc


def convert_uea_to_npz(name: str, root_dir=None, out_path=None) -> Path:
    """Write a dataset as a single .npz container (values, labels, split sizes)."""
    train, test, desc = load_uea(name, root_dir)
    out = Path(out_path) if out_path else Path(desc.source_paths[0]).parent / f"{name}.npz"
    np.savez_compressed(
        out, x_train=train.values, y_train=train.labels, x_test=test.values, y_test=test.labels,
        class_names=np.asarray(desc.class_names))
    return out


def load_npz(path, name: str | None = None) -> tuple[SeriesBatch, SeriesBatch, DatasetDescriptor]:
    path = Path(path)
    with np.load(path) as f:
        x_tr, y_tr, x_te, y_te = f["x_train"], f["y_train"], f["x_test"], f["y_test"]
        class_names = tuple(str(c) for c in f["class_names"])
    desc = DatasetDescriptor(
        name=name or path.stem, archive=Archive.UEA, n_samples=len(x_tr) + len(x_te),
        n_classes=len(class_names), channels=x_tr.shape[1], length=x_tr.shape[2],
        source_paths=(str(path),), n_train=len(x_tr), class_names=class_names)
    return SeriesBatch(x_tr, y_tr), SeriesBatch(x_te, y_te), desc


def load_ptbxl(root_dir=None, sampling_rate: int = 100) -> tuple[list[SeriesBatch], DatasetDescriptor]:
    """Load PTB-XL as ten fold batches with a binary statement matrix.

    Labels are all diagnostic, form and rhythm statements listed in
    ``scp_statements.csv`` (71 in the public release), regardless of
    likelihood.
    """
    import pandas as pd
    import wfdb

    folder = _archive_dir(root_dir, Archive.PTBXL)
    db_path, stmt_path = folder / "ptbxl_database.csv", folder / "scp_statements.csv"
    for p in (db_path, stmt_path):
        if not p.is_file():
            raise DatasetNotFoundError(f"missing PTB-XL annotation file {p}")
    db = pd.read_csv(db_path, index_col="ecg_id")
    statements = pd.read_csv(stmt_path, index_col=0)
    codes = sorted(statements.index.astype(str))
    col = {c: i for i, c in enumerate(codes)}
    file_col = {100: "filename_lr", 500: "filename_hr"}.get(sampling_rate)
    if file_col is None:
        raise ValueError(f"sampling_rate must be 100 or 500, got {sampling_rate}")

    missing = [int(i) for i, f in db[file_col].items() if not (folder / f"{f}.hea").is_file()]
    if missing:
        raise DatasetNotFoundError(f"missing {len(missing)} PTB-XL records, e.g. ecg_id {missing[:20]}")

    signals = np.stack([wfdb.rdsamp(str(folder / f))[0].T for f in db[file_col]])
    labels = np.zeros((len(db), len(codes)), dtype=np.int64)
    for row, scp in enumerate(db["scp_codes"]):
        for code in ast.literal_eval(scp):
            if code in col:
                labels[row, col[code]] = 1
    folds = db["strat_fold"].to_numpy().astype(np.int64)
    desc = DatasetDescriptor(
        name="PTB-XL", archive=Archive.PTBXL, n_samples=len(db), n_classes=len(codes),
        channels=signals.shape[1], length=signals.shape[2],
        source_paths=(str(db_path), str(stmt_path)), class_names=tuple(codes), folds=folds)
    batches = [SeriesBatch(signals[folds == k], labels[folds == k]) for k in PTBXL_FOLDS]
    return batches, desc


def load_dataset(name: str, root_dir=None) -> tuple[SeriesBatch, SeriesBatch, DatasetDescriptor]:
    """Dispatch by name: PTB-XL, then UCR, then UEA.

    For PTB-XL the returned batches are training folds 1-8 and the test fold;
    use ``load_ptbxl`` for the validation fold.
    """
    if name.upper().replace("-", "") == "PTBXL":
        folds, desc = load_ptbxl(root_dir)
        return concatenate(folds[:8]), folds[9], desc
    try:
        return load_ucr(name, root_dir)
    except DatasetNotFoundError:
        try:
            return load_uea(name, root_dir)
        except DatasetNotFoundError:
            raise DatasetNotFoundError(f"dataset {name!r} not found in UCR or UEA under {data_root(root_dir)}")


def concatenate(batches: list[SeriesBatch]) -> SeriesBatch:
    labels = None
    if all(b.labels is not None for b in batches):
        labels = np.concatenate([b.labels for b in batches])
    return SeriesBatch(np.concatenate([b.values for b in batches]), labels)


def preprocess(x: SeriesBatch, scheme: Preprocessing | str = Preprocessing.ZNORM_ARCSINH) -> SeriesBatch:
    """Per-sample, per-channel z-normalization, optionally followed by arcsinh.

    Constant series become all zeros.
    """
    scheme = Preprocessing(scheme)
    if scheme is Preprocessing.NONE:
        return x.with_values(x.values.copy())
    v = x.values.astype(np.float64)
    mu = v.mean(axis=2, keepdims=True)
    sd = v.std(axis=2, keepdims=True)
    flat = sd < ZNORM_STABILIZER
    out = np.where(flat, 0.0, (v - mu) / np.where(flat, 1.0, sd))
    if scheme is Preprocessing.ZNORM_ARCSINH:
        out = np.arcsinh(out)
    return x.with_values(out)


def _stratified_subset(idx: np.ndarray, labels: np.ndarray, fraction: float, seed: int) -> np.ndarray | None:
    from sklearn.model_selection import StratifiedShuffleSplit

    if fraction >= 1.0:
        return idx
    y = labels[idx]
    n_classes = len(np.unique(y))
    n_keep = int(np.floor(fraction * len(idx)))
    counts = np.bincount(y)
    if n_keep < n_classes or counts[counts > 0].min() < 2:
        warnings.warn(f"subset of {n_keep} samples cannot hold all {n_classes} classes; skipping", RuntimeWarning)
        return None
    sss = StratifiedShuffleSplit(n_splits=1, train_size=n_keep, random_state=seed)
    keep, _ = next(sss.split(np.zeros(len(idx)), y))
    if len(np.unique(y[keep])) < n_classes:
        warnings.warn("stratified subset misses a class; skipping", RuntimeWarning)
        return None
    return np.sort(idx[keep])


def make_split(descriptor: DatasetDescriptor, plan: SplitPlan, labels: np.ndarray | None = None) -> SplitIndices | None:
    """Index sets for a split plan.

    STRATIFIED_80_20 and ARCHIVE_GIVEN index the concatenation train + test
    as returned by the loaders. PTBXL_FOLDS indexes the fold-ordered sample
    set and reads fold membership from ``descriptor.folds``.

    Returns None (with a warning) when a training subset is too small to
    contain every class.
    """
    from sklearn.model_selection import StratifiedShuffleSplit

    scheme = SplitScheme(plan.scheme)
    n = descriptor.n_samples
    if scheme is SplitScheme.PTBXL_FOLDS:
        if descriptor.folds is None:
            raise ValueError(f"{descriptor.name}: descriptor has no fold assignment")
        folds = np.sort(descriptor.folds)  # fold-ordered, matching load_ptbxl's batches
        idx = np.arange(n)
        train = idx[folds <= 8]
        if plan.subset_fraction == 0.125:
            train = idx[folds == 1]
        elif plan.subset_fraction < 1.0:
            rng = np.random.default_rng(plan.seed)
            train = np.sort(rng.choice(train, int(round(plan.subset_fraction * len(train))), replace=False))
        return SplitIndices(train=train, test=idx[folds == 10], valid=idx[folds == 9])

    if labels is None:
        raise ValueError(f"{scheme.value} split needs labels")
    labels = np.asarray(labels)
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for a dataset of {n} samples")
    if scheme is SplitScheme.ARCHIVE_GIVEN:
        if descriptor.n_train is None:
            raise ValueError(f"{descriptor.name}: no archive-given split")
        train, test = np.arange(descriptor.n_train), np.arange(descriptor.n_train, n)
    else:
        sss = StratifiedShuffleSplit(n_splits=1, test_size=plan.test_fraction, random_state=plan.seed)
        train, test = next(sss.split(np.zeros(n), labels))
        train, test = np.sort(train), np.sort(test)
    train = _stratified_subset(train, labels, plan.subset_fraction, plan.seed)
    if train is None:
        logger.warning("%s: skipped, %.0f%% subset too small", descriptor.name, 100 * plan.subset_fraction)
        return None
    return SplitIndices(train=train, test=test)


def apply_split(data: SeriesBatch, split: SplitIndices) -> tuple[SeriesBatch, SeriesBatch, SeriesBatch | None]:
    valid = data.subset(split.valid) if split.valid is not None else None
    return data.subset(split.train), data.subset(split.test), valid


def descriptor_from_arrays(name: str, archive: Archive, batches: list[SeriesBatch]) -> dict:
    """Recompute descriptor statistics from loaded arrays."""
    all_ = concatenate(batches)
    n_classes = all_.labels.shape[1] if all_.multilabel else len(np.unique(all_.labels))
    return {"n_samples": len(all_), "n_classes": int(n_classes), "channels": all_.channels, "length": all_.length}

"""Synthetic datasets in the UCR, UEA and PTB-XL on-disk layouts, for tests and CI."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PTBXL_LEADS = ("I", "II", "III", "AVR", "AVL", "AVF", "V1", "V2", "V3", "V4", "V5", "V6")
PTBXL_CODES = ("NORM", "MI", "STTC", "AFIB", "SR")


def _patterns(n: int, length: int, rng: np.random.Generator, n_classes: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Step-up / step-down / sine / triangle bursts at random positions on noise."""
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    x = rng.normal(0, 0.3, size=(n, length))
    t = np.arange(length // 4)
    for i, c in enumerate(y):
        start = rng.integers(0, length - len(t))
        seg = {0: np.where(t < len(t) // 2, -1.0, 1.0),
               1: np.where(t < len(t) // 2, 1.0, -1.0),
               2: np.sin(2 * np.pi * t / len(t)) * 1.5,
               3: 1.5 - np.abs(t - len(t) / 2) / (len(t) / 6)}[int(c) % 4]
        x[i, start:start + len(t)] += seg
    return x, y + 1


def write_ucr(root, name: str = "SyntheticPatterns", n_train: int = 60, n_test: int = 60,
              length: int = 64, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    folder = Path(root) / "UCR" / name
    folder.mkdir(parents=True, exist_ok=True)
    for split, n in (("TRAIN", n_train), ("TEST", n_test)):
        x, y = _patterns(n, length, rng)
        rows = np.column_stack([y, x])
        np.savetxt(folder / f"{name}_{split}.tsv", rows, delimiter="\t", fmt=["%d"] + ["%.6f"] * length)
    return folder


def _ts_lines(x: list[np.ndarray], y: np.ndarray) -> list[str]:
    lines = []
    for series, label in zip(x, y):
        dims = [",".join(f"{v:.6f}" for v in ch) for ch in series]
        lines.append(":".join(dims) + f":{label}")
    return lines


def write_uea(root, name: str = "SyntheticMotions", n_train: int = 24, n_test: int = 24, channels: int = 3,
              length: int = 64, seed: int = 0, varying: bool = False) -> Path:
    rng = np.random.default_rng(seed)
    folder = Path(root) / "UEA" / name
    folder.mkdir(parents=True, exist_ok=True)
    classes = ("walk", "run", "rest")
    for split, n in (("TRAIN", n_train), ("TEST", n_test)):
        y = np.array([classes[i % len(classes)] for i in range(n)])
        xs = []
        for i in range(n):
            length_i = length - (i % 3) * 4 if varying else length
            t = np.linspace(0, 1, length_i)
            freq = 1 + classes.index(y[i]) * 2
            xs.append(np.stack([np.sin(2 * np.pi * freq * t + ch) + rng.normal(0, 0.2, length_i)
                                for ch in range(channels)]))
        header = [f"@problemName {name}", "@timeStamps false", "@missing false", "@univariate false",
                  f"@dimensions {channels}", f"@equalLength {'false' if varying else 'true'}"]
        if not varying:
            header.append(f"@seriesLength {length}")
        header += [f"@classLabel true {' '.join(classes)}", "@data"]
        (folder / f"{name}_{split}.ts").write_text("\n".join(header + _ts_lines(xs, y)) + "\n")
    return folder


def write_ptbxl(root, records_per_fold: int = 3, length: int = 1000, seed: int = 0) -> Path:
    """A tiny PTB-XL tree: annotation tables plus 100 Hz WFDB records."""
    import pandas as pd
    import wfdb

    rng = np.random.default_rng(seed)
    folder = Path(root) / "PTBXL"
    rows = []
    ecg_id = 0
    for fold in range(1, 11):
        for _ in range(records_per_fold):
            ecg_id += 1
            sub = f"records100/{(ecg_id // 1000) * 1000:05d}"
            (folder / sub).mkdir(parents=True, exist_ok=True)
            name = f"{ecg_id:05d}_lr"
            t = np.arange(length) / 100.0
            hr = rng.uniform(0.8, 1.6)
            sig = np.stack([np.sin(2 * np.pi * hr * t + k) * 0.5 + rng.normal(0, 0.05, length)
                            for k in range(len(PTBXL_LEADS))], axis=1)
            wfdb.wrsamp(name, fs=100, units=["mV"] * len(PTBXL_LEADS), sig_name=list(PTBXL_LEADS),
                        p_signal=sig, fmt=["16"] * len(PTBXL_LEADS), write_dir=str(folder / sub))
            picked = rng.choice(PTBXL_CODES, size=rng.integers(0, 3), replace=False)
            codes = {str(c): float(rng.choice([0.0, 50.0, 100.0])) for c in picked}
            rows.append({"ecg_id": ecg_id, "patient_id": float(ecg_id), "scp_codes": repr(codes),
                         "strat_fold": fold, "filename_lr": f"{sub}/{name}",
                         "filename_hr": f"records500/{sub[-5:]}/{ecg_id:05d}_hr"})
    pd.DataFrame(rows).to_csv(folder / "ptbxl_database.csv", index=False)
    statements = pd.DataFrame({"description": [f"statement {c}" for c in PTBXL_CODES]}, index=list(PTBXL_CODES))
    statements.to_csv(folder / "scp_statements.csv")
    return folder


def make_fixtures(root, seed: int = 0) -> dict[str, Path]:
    """Write every synthetic dataset under ``root``."""
    root = Path(root)
    out = {
        "ucr": write_ucr(root, seed=seed),
        "uea": write_uea(root, seed=seed),
        "uea_varying": write_uea(root, name="SyntheticVarying", seed=seed, varying=True),
        "ptbxl": write_ptbxl(root, seed=seed),
    }
    logger.info("wrote fixtures under %s", root)
    return out

"""Training-curve figures: kNN accuracy, FD and FcE metrics against epoch."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PLOT_METRICS = {"knn": "5-kNN score", "fd": "FD metric", "fce": "FcE metric"}
SMOOTHING_WINDOW = 10


def ema(values, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Exponential moving average with alpha = 2 / (window + 1)."""
    values = np.asarray(values, dtype=float)
    alpha = 2.0 / (window + 1)
    out = np.empty_like(values)
    acc = values[0] if len(values) else 0.0
    for i, v in enumerate(values):
        acc = v if i == 0 else alpha * v + (1 - alpha) * acc
        out[i] = acc
    return out


def read_run(run_dir) -> tuple[dict, list[dict]]:
    """Config dict and curve records of a run directory."""
    import yaml

    run_dir = Path(run_dir)
    curves_path = run_dir / "curves.jsonl"
    if not curves_path.is_file():
        raise FileNotFoundError(f"no curves.jsonl in {run_dir}")
    cfg = yaml.safe_load((run_dir / "config.yaml").read_text()) if (run_dir / "config.yaml").is_file() else {}
    with open(curves_path) as fh:
        curves = [json.loads(line) for line in fh if line.strip()]
    return cfg, curves


def _is_ptbxl(name: str) -> bool:
    return name.upper().replace("-", "") == "PTBXL"


def plot_runs(run_dirs, out_dir) -> list[Path]:
    """One figure per dataset and metric, one line per framework run.

    Files are named ``<dataset>_<metric>.png``. The FcE axis is log-scaled;
    PTB-XL curves are EMA-smoothed.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grouped: dict[str, list[tuple[str, list[dict]]]] = {}
    for d in run_dirs:
        cfg, curves = read_run(d)
        if not curves:
            raise ValueError(f"empty curves in {d}")
        label = f"{cfg.get('framework', Path(d).name)} (seed {Path(d).name.removeprefix('seed_')})"
        grouped.setdefault(cfg.get("dataset", Path(d).name), []).append((label, curves))
    if not grouped:
        raise ValueError("no runs to plot")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for dataset, runs in sorted(grouped.items()):
        for metric, ylabel in PLOT_METRICS.items():
            series = [(lab, [(c["epoch"], c[metric]) for c in cur if metric in c]) for lab, cur in runs]
            series = [(lab, pts) for lab, pts in series if pts]
            if not series:
                continue
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for lab, pts in series:
                x, y = np.array(pts).T
                if _is_ptbxl(dataset):
                    y = ema(y)
                ax.plot(x, y, label=lab)
            if metric == "fce":
                ax.set_yscale("log")
            ax.set_xlabel("epoch")
            ax.set_ylabel(ylabel)
            ax.set_title(dataset)
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / f"{dataset}_{metric}.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
    return written

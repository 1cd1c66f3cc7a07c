"""Pretraining loop, checkpoints, and the pretrain-then-evaluate pipeline.

Checkpoint format (a ``torch.save`` dict)::

    encoder          encoder state_dict
    heads            every other framework tensor (projector, predictor,
                     momentum target, discriminator), IterNorm buffers included
    whitening        IterNorm running_mean / running_whitening, keyed by module
    optimizer        optimizer state_dict
    scheduler        LR scheduler state_dict or None
    epoch            number of completed epochs
    config           RunConfig as a dict
    config_hash      RunConfig.hash()
    rng              {"numpy": bit-generator state, "torch": CPU generator state}
    curves           per-epoch records written so far
"""

from __future__ import annotations

import json
import logging
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import (
    AugmentConfig,
    SeriesBatch,
    crop_length_for,
    make_view_pair,
    two_crop_schedule,
)
from .config import ConfigError, RunConfig
from .data import (
    Archive,
    Preprocessing,
    SplitPlan,
    SplitScheme,
    apply_split,
    concatenate,
    load_dataset,
    load_ptbxl,
    make_split,
    preprocess,
)
from .encoder import EncoderConfig
from .evaluation import DEFAULT_NU_MULTIPLIERS, EvalConfig, EvalReport, finetune_eval, knn_eval, linear_eval, svm_eval
from .frameworks import (
    FrameworkName,
    PretrainStepResult,
    SSLFramework,
    build_framework,
    default_spec,
    make_tnc_views,
    pretrain_step,
)
from .whitening import IterNorm

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"
CURVES_NAME = "curves.jsonl"


class CheckpointMismatchError(RuntimeError):
    pass


@dataclass
class PreparedData:
    train: SeriesBatch
    test: SeriesBatch
    valid: SeriesBatch | None
    name: str
    archive: Archive
    split: dict = field(default_factory=dict)


def is_ptbxl(name: str) -> bool:
    return name.upper().replace("-", "") == "PTBXL"


def default_preprocessing(cfg: RunConfig) -> Preprocessing:
    if cfg.preprocessing is not None:
        return Preprocessing(cfg.preprocessing)
    if is_ptbxl(cfg.dataset):
        return Preprocessing.NONE
    return Preprocessing.ZNORM_ARCSINH if cfg.phase == "part1" else Preprocessing.ZNORM


def prepare_data(cfg: RunConfig, seed: int) -> PreparedData | None:
    """Load, preprocess and split the configured dataset for one seed.

    Part-1 re-splits train + test 80/20 (stratified, seeded); part-2 keeps
    the archive split; PTB-XL uses folds 1-8 / 9 / 10. Returns None when the
    requested training subset is too small.
    """
    scheme = default_preprocessing(cfg)
    if is_ptbxl(cfg.dataset):
        folds, desc = load_ptbxl(cfg.dataset_root)
        data = preprocess(concatenate(folds), scheme)
        plan = SplitPlan(SplitScheme.PTBXL_FOLDS, seed, cfg.subset_fraction)
    else:
        train, test, desc = load_dataset(cfg.dataset, cfg.dataset_root)
        data = preprocess(concatenate([train, test]), scheme)
        kind = SplitScheme.STRATIFIED_80_20 if cfg.phase == "part1" else SplitScheme.ARCHIVE_GIVEN
        plan = SplitPlan(kind, seed, cfg.subset_fraction)
    split = make_split(desc, plan, data.labels)
    if split is None:
        return None
    tr, te, va = apply_split(data, split)
    info = {"scheme": plan.scheme.value, "seed": seed, "subset_fraction": plan.subset_fraction,
            "train_size": len(tr), "test_size": len(te)}
    return PreparedData(tr, te, va, desc.name, desc.archive, info)


def build_from_config(cfg: RunConfig, channels: int) -> SSLFramework:
    overrides = {"nu_multiplier": cfg.nu_multiplier}
    if cfg.projector_dim is not None:
        overrides["projector_dim"] = cfg.projector_dim
    if cfg.hidden_dim is not None:
        overrides["hidden_dim"] = cfg.hidden_dim
    spec = default_spec(cfg.framework, phase=cfg.phase, **overrides)
    enc = EncoderConfig(in_channels=channels, stage_channels=tuple(cfg.stage_channels),
                        blocks_per_stage=cfg.blocks_per_stage)
    return build_framework(spec, enc, lr=cfg.lr, weight_decay=cfg.weight_decay)


def resolve_crop_length(cfg: RunConfig, dataset: str, length: int) -> int | None:
    """Configured crop, else the tabulated one (part-1 / PTB-XL); None = two-crop schedule."""
    if cfg.crop_length is not None:
        return min(int(cfg.crop_length), length)
    if cfg.phase == "part1" or is_ptbxl(dataset):
        crop = crop_length_for(dataset)
        return length if crop is None else min(crop, length)
    return None


def _batch_starts(n: int, batch_size: int) -> list[int]:
    # a trailing batch of one sample cannot feed batch statistics
    return [i for i in range(0, n, batch_size) if min(batch_size, n - i) >= 2]


def version_stamp() -> str:
    from . import __version__

    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                              cwd=Path(__file__).parent, timeout=5)
        git = desc.stdout.strip() if desc.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        git = "unknown"
    return f"vibcreg {__version__} git {git}\n"


class Pretrainer:
    """Owns one framework, its data order RNG, scheduler and checkpoints."""

    def __init__(self, cfg: RunConfig, train: SeriesBatch, seed: int, run_dir=None,
                 knn_data: tuple[SeriesBatch, SeriesBatch] | None = None, dataset: str | None = None):
        self.cfg = cfg
        self.train_data = train
        self.seed = seed
        self.dataset = dataset or cfg.dataset
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.knn_data = knn_data
        torch.manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.framework = build_from_config(cfg, train.channels)
        self.crop_length = resolve_crop_length(cfg, self.dataset, train.length)
        self.is_tnc = FrameworkName(cfg.framework) is FrameworkName.TNC
        self.two_crop = self.crop_length is None and not self.is_tnc
        phase_key = f"{cfg.phase}_pretrain"
        self.aug_cfg = AugmentConfig.for_phase(phase_key, self.crop_length, amplitude_center=cfg.amplitude_center)
        self.epoch = 0
        self.curves: list[dict] = []
        self.steps_per_epoch = len(_batch_starts(len(train), cfg.batch_size)) * (2 if self.two_crop else 1)
        if self.steps_per_epoch == 0:
            raise ValueError(f"{self.dataset}: training set of {len(train)} cannot form a batch of two")
        if cfg.schedule == "cosine":
            total = max(1, cfg.pretrain_epochs * self.steps_per_epoch)
            self.framework.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
                self.framework.optimizer, T_max=total)

    @property
    def tnc_window(self) -> int:
        crop = self.crop_length or self.train_data.length
        return min(crop, self.train_data.length // 2)

    def _step(self, batch: SeriesBatch) -> PretrainStepResult:
        fw = self.framework
        if self.is_tnc:
            ref, pos, neg = make_tnc_views(batch, self.tnc_window, self.rng)
            return pretrain_step(fw, ref, pos, neg)
        if self.two_crop:
            return two_crop_schedule(batch, lambda a, b: pretrain_step(fw, a, b), self.rng, self.aug_cfg,
                                     dataset_name=self.dataset)
        view_a, view_b = make_view_pair(batch, self.aug_cfg, self.rng, self.crop_length)
        return pretrain_step(fw, view_a, view_b)

    def train_epoch(self) -> dict:
        x = self.train_data
        order = self.rng.permutation(len(x))
        results = []
        for start in _batch_starts(len(x), self.cfg.batch_size):
            results.append(self._step(x.subset(order[start:start + self.cfg.batch_size])))
        self.epoch += 1
        avg = PretrainStepResult.average(results)
        rec = {"epoch": self.epoch, "loss": avg.total_loss, **{f"loss_{k}": v for k, v in avg.term_breakdown.items()},
               "fd": avg.fd_metric, "fce": avg.fce_metric, "lr": self.framework.optimizer.param_groups[0]["lr"]}
        final = self.epoch == self.cfg.pretrain_epochs
        if self.knn_data is not None and self.cfg.knn_every > 0 and (self.epoch % self.cfg.knn_every == 0 or final):
            rec["knn"] = knn_eval(self.framework.encoder, *self.knn_data, k=self.cfg.knn_k)
        self.curves.append(rec)
        logger.info("epoch %d loss %.4f fd %.4f fce %.4f%s", self.epoch, rec["loss"], rec["fd"], rec["fce"],
                    f" knn {rec['knn']:.4f}" if "knn" in rec else "")
        return rec

    def run(self, until_epoch: int | None = None) -> list[dict]:
        until = self.cfg.pretrain_epochs if until_epoch is None else min(until_epoch, self.cfg.pretrain_epochs)
        if self.run_dir is not None and self.epoch == 0:
            self.save_checkpoint()
        while self.epoch < until:
            rec = self.train_epoch()
            if self.run_dir is not None:
                with open(self.run_dir / CURVES_NAME, "a") as fh:
                    fh.write(json.dumps(rec) + "\n")
                if self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == until:
                    self.save_checkpoint()
        return self.curves

    # checkpoints ------------------------------------------------------------------

    def state(self) -> dict:
        fw = self.framework
        full = fw.state_dict()
        heads = {k: v for k, v in full.items() if not k.startswith("encoder.")}
        whitening = {name: {"running_mean": m.running_mean.clone(), "running_whitening": m.running_whitening.clone()}
                     for name, m in fw.named_modules() if isinstance(m, IterNorm)}
        return {
            "encoder": fw.encoder.state_dict(),
            "heads": heads,
            "whitening": whitening,
            "optimizer": fw.optimizer.state_dict(),
            "scheduler": fw.scheduler.state_dict() if fw.scheduler is not None else None,
            "epoch": self.epoch,
            "seed": self.seed,
            "dataset": self.dataset,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "rng": {"numpy": self.rng.bit_generator.state, "torch": torch.get_rng_state()},
            "curves": list(self.curves),
        }

    def save_checkpoint(self, path=None) -> Path:
        path = Path(path) if path is not None else self.run_dir / CHECKPOINT_NAME
        tmp = path.with_suffix(".tmp")
        torch.save(self.state(), tmp)
        tmp.replace(path)
        return path

    def load_state(self, ckpt: dict) -> None:
        if ckpt["config_hash"] != self.cfg.hash():
            raise CheckpointMismatchError("checkpoint was written with a different training configuration")
        fw = self.framework
        fw.load_state_dict({**{f"encoder.{k}": v for k, v in ckpt["encoder"].items()}, **ckpt["heads"]})
        fw.optimizer.load_state_dict(ckpt["optimizer"])
        if fw.scheduler is not None and ckpt["scheduler"] is not None:
            fw.scheduler.load_state_dict(ckpt["scheduler"])
        self.epoch = int(ckpt["epoch"])
        self.rng.bit_generator.state = ckpt["rng"]["numpy"]
        torch.set_rng_state(ckpt["rng"]["torch"])
        self.curves = list(ckpt["curves"])


def load_checkpoint(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def framework_from_checkpoint(ckpt: dict, channels: int) -> SSLFramework:
    cfg = RunConfig.from_dict(ckpt["config"])
    fw = build_from_config(cfg, channels)
    fw.load_state_dict({**{f"encoder.{k}": v for k, v in ckpt["encoder"].items()}, **ckpt["heads"]})
    fw.eval()
    return fw


def seed_run_dir(cfg: RunConfig, seed: int, out_dir=None) -> Path:
    base = Path(out_dir or cfg.out_dir)
    return base / cfg.dataset / cfg.framework / f"seed_{seed}"


def init_run_dir(run_dir: Path, cfg: RunConfig, seed: int) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.yaml")
    with open(run_dir / "seeds.log", "a") as fh:
        fh.write(f"seed {seed}\n")
    (run_dir / "VERSION").write_text(version_stamp())


def pretrain(cfg: RunConfig, data: PreparedData, seed: int, run_dir=None, resume: bool = False,
             track_knn: bool = True) -> Pretrainer:
    """Pretrain one seed; with ``resume`` continue from ``run_dir``'s checkpoint."""
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_path = run_dir / CHECKPOINT_NAME
        if not resume and ckpt_path.exists():
            (run_dir / CURVES_NAME).unlink(missing_ok=True)
        init_run_dir(run_dir, cfg, seed)
    knn = (data.train, data.test) if track_knn and data.train.labels is not None else None
    trainer = Pretrainer(cfg, data.train, seed, run_dir, knn_data=knn, dataset=data.name)
    if resume:
        if run_dir is None:
            raise ConfigError("resume needs a run directory")
        trainer.load_state(load_checkpoint(run_dir))
        logger.info("resumed %s at epoch %d", run_dir, trainer.epoch)
        # drop curve lines written after the checkpoint
        with open(run_dir / CURVES_NAME, "w") as fh:
            for rec in trainer.curves:
                fh.write(json.dumps(rec) + "\n")
    trainer.run()
    return trainer


def evaluate_encoder(cfg: RunConfig, encoder, data: PreparedData, seed: int, protocol: str | None = None,
                     framework: str | None = None) -> EvalReport | None:
    """Run one evaluation protocol on a pretrained encoder."""
    protocol = protocol or cfg.protocol
    framework = framework or cfg.framework
    multilabel = data.train.multilabel
    if protocol == "svm" and multilabel:
        raise ConfigError(f"svm protocol is not defined for multi-label dataset {data.name}")
    if protocol == "macro_auc" and not multilabel:
        raise ConfigError(f"macro_auc requested for single-label dataset {data.name}")
    if protocol == "macro_auc":
        protocol = "linear"
    ecfg = EvalConfig(epochs=cfg.linear_epochs, finetune_epochs=cfg.finetune_epochs, seed=seed,
                      batch_size=cfg.batch_size, knn_k=cfg.knn_k, augment=cfg.phase == "part1")
    if protocol == "linear":
        report = linear_eval(encoder, data.train, data.test, ecfg, data.valid, data.name, framework)
    elif protocol == "finetune":
        report = finetune_eval(encoder, data.train, data.test, ecfg, data.valid, data.name, framework)
    elif protocol == "knn":
        key = "macro_f1" if multilabel else "accuracy"
        report = EvalReport("knn", data.name, framework, seed,
                            {key: knn_eval(encoder, data.train, data.test, k=cfg.knn_k)})
    elif protocol == "svm":
        report = EvalReport("svm", data.name, framework, seed, {"accuracy": svm_eval(encoder, data.train, data.test)})
    else:
        raise ConfigError(f"unknown protocol {protocol!r}; choose linear, finetune, knn, svm or macro_auc")
    if report is not None:
        report.split = dict(data.split)
    return report


def pretrain_and_evaluate(cfg: RunConfig, seed: int, data: PreparedData | None = None, run_dir=None,
                          protocol: str | None = None, track_knn: bool = False) -> EvalReport | None:
    """Full pretraining for one seed followed by one evaluation protocol."""
    data = data if data is not None else prepare_data(cfg, seed)
    if data is None:
        return None
    trainer = pretrain(cfg, data, seed, run_dir, track_knn=track_knn)
    report = evaluate_encoder(cfg, trainer.framework.encoder, data, seed, protocol)
    if report is not None and trainer.curves:
        report.fd_metric = trainer.curves[-1]["fd"]
        report.fce_metric = trainer.curves[-1]["fce"]
        report.curves = trainer.curves
    return report


def sensitivity_sweep(cfg: RunConfig, multipliers=DEFAULT_NU_MULTIPLIERS, seed: int | None = None,
                      data: PreparedData | None = None, out_dir=None) -> list[EvalReport]:
    """Pretrain + linear-evaluate once per nu multiplier of the framework default."""
    from dataclasses import replace

    seed = cfg.seeds[0] if seed is None else seed
    data = data if data is not None else prepare_data(cfg, seed)
    reports = []
    for m in multipliers:
        run_cfg = replace(cfg, nu_multiplier=float(m))
        run_dir = None
        if out_dir is not None:
            run_dir = Path(out_dir) / cfg.dataset / cfg.framework / f"nu_x{m:g}" / f"seed_{seed}"
        report = pretrain_and_evaluate(run_cfg, seed, data, run_dir, protocol="linear")
        report.split["nu_multiplier"] = float(m)
        report.split["nu"] = default_spec(cfg.framework, cfg.phase, nu_multiplier=float(m)).weights.nu_cov
        reports.append(report)
    return reports

"""Command-line entry point: pretrain, evaluate, plot, sweep-nu, make-fixtures."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig
from .evaluation import DEFAULT_NU_MULTIPLIERS

logger = logging.getLogger("vibcreg")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seeds"] = list(args.seed)
    if getattr(args, "dataset_root", None):
        updates["dataset_root"] = args.dataset_root
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    return replace(cfg, **updates) if updates else cfg


def cmd_pretrain(args) -> int:
    from .training import pretrain, prepare_data, seed_run_dir

    cfg = _load_config(args)
    for seed in cfg.seeds:
        data = prepare_data(cfg, seed)
        if data is None:
            logger.warning("seed %d: dataset %s skipped", seed, cfg.dataset)
            continue
        run_dir = seed_run_dir(cfg, seed)
        trainer = pretrain(cfg, data, seed, run_dir, resume=args.resume)
        logger.info("seed %d done: %d epochs, checkpoint in %s", seed, trainer.epoch, run_dir)
    return 0


def _checkpoint_paths(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    direct = path / "checkpoint.pt"
    if direct.is_file():
        return [direct]
    found = sorted(path.rglob("checkpoint.pt"))
    if not found:
        raise FileNotFoundError(f"no checkpoint found at {path}")
    return found


def cmd_evaluate(args) -> int:
    from .evaluation import summarize, write_reports, write_summary_csv
    from .training import evaluate_encoder, framework_from_checkpoint, load_checkpoint, prepare_data

    reports = []
    for ckpt_path in _checkpoint_paths(Path(args.checkpoint)):
        ckpt = load_checkpoint(ckpt_path)
        cfg = RunConfig.from_dict(ckpt["config"])
        if args.config:
            cfg = replace(RunConfig.load(args.config), **{k: getattr(cfg, k) for k in ("framework", "phase")})
        if args.dataset_root:
            cfg = replace(cfg, dataset_root=args.dataset_root)
        seed = int(ckpt["seed"])
        data = prepare_data(cfg, seed)
        if data is None:
            continue
        fw = framework_from_checkpoint(ckpt, data.train.channels)
        report = evaluate_encoder(cfg, fw.encoder, data, seed, args.protocol)
        if report is not None:
            reports.append(report)
            logger.info("%s seed %d: %s", ckpt_path, seed, report.metrics)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "reports.jsonl")
    write_summary_csv(summarize(reports), out / "summary.csv")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_runs

    run_dirs = []
    for d in args.runs:
        p = Path(d)
        run_dirs += [c.parent for c in sorted(p.rglob("curves.jsonl"))] if not (p / "curves.jsonl").exists() else [p]
    if not run_dirs:
        raise FileNotFoundError("no curves.jsonl found under the given run directories")
    for path in plot_runs(run_dirs, args.out or "figures"):
        print(path)
    return 0


def cmd_sweep_nu(args) -> int:
    from .evaluation import spread, write_reports
    from .training import sensitivity_sweep

    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        reports = sensitivity_sweep(cfg, tuple(args.multipliers), seed, out_dir=out)
        write_reports(reports, out / "sweep.jsonl")
        print(json.dumps({"framework": cfg.framework, "dataset": cfg.dataset, "seed": seed,
                          "accuracies": {r.split["nu_multiplier"]: r.metrics.get("accuracy") for r in reports},
                          "spread": spread(reports)}))
    return 0


def cmd_make_fixtures(args) -> int:
    from .fixtures import make_fixtures

    seed = args.seed[0] if args.seed else 0
    for kind, path in make_fixtures(args.out or "fixtures", seed=seed).items():
        print(f"{kind}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vibcreg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, nargs="+", help="override the configured seeds")
        p.add_argument("--dataset-root", help="dataset root (default: $VIBCREG_DATA_ROOT)")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", help="evaluate pretrained checkpoints")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file or directory of runs")
    p.add_argument("--protocol", default=None, choices=["linear", "finetune", "knn", "svm", "macro_auc"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="plot kNN / FD / FcE training curves")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="figure directory")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("sweep-nu", help="sensitivity of linear accuracy to the covariance weight")
    common(p)
    p.add_argument("--multipliers", type=float, nargs="+", default=list(DEFAULT_NU_MULTIPLIERS))
    p.set_defaults(func=cmd_sweep_nu)

    p = sub.add_parser("make-fixtures", help="write synthetic UCR/UEA/PTB-XL datasets")
    common(p, config=False)
    p.set_defaults(func=cmd_make_fixtures)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as err:
        logger.error("%s", err)
        return 2


if __name__ == "__main__":
    sys.exit(main())

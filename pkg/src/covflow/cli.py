"""Command-line workflow: synth, train, stats, score, eval, corrupt, sample.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import corruptions, metrics, scoring
from .dataio import (CheckpointError, FormatError, load_dataset, load_model, read_netpbm,
                     save_dataset, synth_dataset, write_netpbm)
from .freq import decompose
from .model import MODES, ModelConfig, build_model, sample
from .training import TrainConfig, TrainingDiverged, split_dataset, train

log = logging.getLogger("covflow")

DATA_ROOT_ENV = "COVFLOW_DATA_ROOT"
CONFIG_SECTIONS = {"model", "train", "corruptions", "seed", "threads"}


class ConfigError(ValueError):
    pass


class DataError(OSError):
    pass


def data_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(cfg) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def echo(run: dict):
    print(json.dumps(run, sort_keys=True), file=sys.stderr)


def load_images(p: str) -> np.ndarray:
    path = data_path(p)
    try:
        images, _ = load_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from None
    return images


def stats_path(ckpt: str) -> Path:
    return Path(str(ckpt) + ".stats.json")


def open_model(ckpt: str):
    try:
        return load_model(ckpt)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {ckpt}") from None
    except CheckpointError as exc:
        raise DataError(str(exc)) from None


def open_stats(ckpt: str, model, required: bool):
    path = stats_path(ckpt)
    if not path.exists():
        if required:
            raise ConfigError(f"no statistics sidecar {path}; run `covflow stats` first")
        return None
    stats = scoring.load_stats(path)
    if stats.model_fingerprint != model.fingerprint():
        raise ConfigError(f"{path}: statistics fingerprint does not match the checkpoint")
    return stats


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    shape = tuple(args.shape)
    images = synth_dataset(args.count, shape, args.smoothness, args.seed)
    run = {"command": "synth", "count": args.count, "shape": list(shape),
           "smoothness": args.smoothness, "seed": args.seed}
    echo(run)
    save_dataset(args.out, images, name=Path(args.out).name, provenance={"kind": "synthetic", **run})
    return 0


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    images = load_images(args.data)
    model_cfg = dict(cfg.get("model", {}))
    train_cfg = dict(cfg.get("train", {}))
    for key, val in (("mode", args.mode), ("K", args.k), ("hidden", args.hidden),
                     ("blocks", args.blocks), ("sigma", args.sigma)):
        if val is not None:
            model_cfg[key] = val
    for key, val in (("alpha", args.alpha), ("epochs", args.epochs), ("lr_max", args.lr),
                     ("batch_size", args.batch_size)):
        if val is not None:
            train_cfg[key] = val
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    model_cfg.setdefault("seed", seed)
    train_cfg.setdefault("seed", seed)
    c, h, w = images.shape[1:]
    model_cfg.update(channels=c, height=h, width=w)
    try:
        mc = ModelConfig.from_dict(model_cfg)
        tc = TrainConfig.from_dict(train_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    run = {"command": "train", "data": str(data_path(args.data)), "model": mc.to_dict(),
           "train": tc.to_dict()}
    echo(run)
    out = Path(args.out)
    Path(str(out) + ".run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    model = build_model(mc)
    resume = None
    if args.resume:
        prev, ckpt = open_model(args.out)
        if ckpt.train_state is None:
            raise ConfigError(f"{args.out} has no training state to resume from")
        model, resume = prev, ckpt.train_state
    result = train(images, model, tc, checkpoint_path=out, log_path=str(out) + ".log.csv", resume=resume)
    log.info("validation bpd %.4f -> %.4f", result.initial_val_bpd, result.final_val_bpd)
    return 0


def cmd_stats(args) -> int:
    model, ckpt = open_model(args.checkpoint)
    images = load_images(args.data)
    split = args.split
    if split == "val":
        if ckpt.train_state is None:
            raise ConfigError("checkpoint has no training record; use --split all")
        tc = TrainConfig.from_dict(ckpt.train_state["train_config"])
        _, images = split_dataset(images, tc.val_fraction, tc.seed)
    if len(images) < 2:
        raise ConfigError(f"statistics split has {len(images)} samples; need at least 2")
    run = {"command": "stats", "checkpoint": args.checkpoint, "data": str(data_path(args.data)),
           "split": split, "seed": args.seed, "n": len(images)}
    echo(run)
    try:
        stats = scoring.compute_stats(images, model, args.seed, split="validation" if split == "val" else "all")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    scoring.save_stats(stats_path(args.checkpoint), stats)
    return 0


def cmd_score(args) -> int:
    model, _ = open_model(args.checkpoint)
    stats = open_stats(args.checkpoint, model, required=args.metric in ("nsd", "all"))
    images = load_images(args.data)
    run = {"command": "score", "checkpoint": args.checkpoint, "data": str(data_path(args.data)),
           "metric": args.metric, "seed": args.seed}
    echo(run)
    scoring.score_dataset(images, model, stats if args.metric in ("nsd", "all") else None, args.seed,
                          csv_path=args.out, with_grad=args.metric != "ll", threads=args.threads)
    return 0


def cmd_eval(args) -> int:
    model, _ = open_model(args.checkpoint)
    stats = open_stats(args.checkpoint, model, required=True)
    clean = load_images(args.clean)
    suite_dir = data_path(args.suite)
    try:
        suite = corruptions.load_suite(suite_dir)
    except FileNotFoundError:
        raise DataError(f"no suite.json in {suite_dir}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    run = {"command": "eval", "checkpoint": args.checkpoint, "clean": str(data_path(args.clean)),
           "suite": str(suite_dir), "seed": args.seed}
    echo(run)
    scores_dir = Path(args.scores_dir) if args.scores_dir else None
    if scores_dir:
        scores_dir.mkdir(parents=True, exist_ok=True)

    def run_scores(images, name):
        path = scores_dir / f"{name}.csv" if scores_dir else None
        recs = scoring.score_dataset(images, model, stats, args.seed, csv_path=path, threads=args.threads)
        return metrics.oriented_scores(recs)

    id_scores = run_scores(clean, "clean")
    ood = {}
    for cond in suite["conditions"]:
        key = (cond["kind"], cond["severity"])
        try:
            images = load_images(str(suite_dir / cond["path"]))
        except DataError as exc:
            log.warning("%s", exc)
            ood[key] = None
            continue
        ood[key] = run_scores(images, f"{cond['kind']}-{cond['severity']}")
    report = metrics.aggregate_report(id_scores, ood)
    report.to_csv(args.out)
    for m in metrics.METRICS:
        log.info("%-10s average auroc %.4f fpr95 %.4f", m, report.average(m), report.average(m, key="fpr95"))
    return 0


def cmd_corrupt(args) -> int:
    cfg = read_config(args.config)
    images = load_images(args.data)
    section = cfg.get("corruptions", {})
    extra = set(section) - {"tables"}
    if extra:
        raise ConfigError(f"unknown keys in corruptions section: {sorted(extra)}")
    tables = dict(section.get("tables", {}))
    unknown = set(tables) - set(corruptions.KINDS)
    if unknown:
        raise ConfigError(f"unknown corruption kinds in tables: {sorted(unknown)}")
    kinds = args.kinds or list(corruptions.KINDS)
    for k in kinds:
        if k not in corruptions.KINDS:
            raise ConfigError(f"unknown corruption kind {k!r}")
    sevs = args.severities or list(corruptions.SEVERITIES)
    resolved = {**corruptions.DEFAULT_TABLES, **tables}
    run = {"command": "corrupt", "data": str(data_path(args.data)), "kinds": kinds,
           "severities": sevs, "seed": args.seed, "tables": resolved}
    echo(run)
    try:
        corruptions.build_ood_suite(images, args.out, kinds, sevs, args.seed, resolved, run_config=run,
                                    threads=args.threads)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return 0


def cmd_sample(args) -> int:
    if not args.temperature >= 0:
        raise ConfigError(f"temperature must be >= 0, got {args.temperature}")
    model, _ = open_model(args.checkpoint)
    if model.config.mode != "high-conditional-sdl":
        raise ConfigError(f"sampling needs a conditional checkpoint, got mode {model.config.mode!r}")
    try:
        image = read_netpbm(data_path(args.image))
    except FileNotFoundError:
        raise DataError(f"conditioning image not found: {args.image}") from None
    except FormatError as exc:
        raise DataError(str(exc)) from None
    if image.shape != model.config.shape:
        raise DataError(f"conditioning image has shape {image.shape}, model expects {model.config.shape}")
    run = {"command": "sample", "checkpoint": args.checkpoint, "image": args.image,
           "temperature": args.temperature, "seed": args.seed}
    echo(run)
    low = decompose(image[None], model.config.sigma).low
    high = sample(model, low, args.temperature, args.seed)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = model.config.high_range
    write_netpbm(out / f"high.{_ext(image)}", np.clip((high - lo) / (hi - lo), 0, 1), maxval=65535)
    np.save(out / "high.npy", high)
    write_netpbm(out / f"reconstruction.{_ext(image)}", np.clip(low[0] + high, 0, 1), maxval=65535)
    write_netpbm(out / f"low.{_ext(image)}", np.clip(low[0], 0, 1), maxval=65535)
    write_netpbm(out / f"conditioning.{_ext(image)}", image)
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    return 0


def _ext(image):
    return "ppm" if image.shape[0] == 3 else "pgm"


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic texture dataset")
    s.add_argument("out")
    s.add_argument("--count", type=int, default=2000)
    s.add_argument("--shape", type=int, nargs=3, default=[3, 16, 16], metavar=("C", "H", "W"))
    s.add_argument("--smoothness", type=float, default=1.5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a flow")
    s.add_argument("data")
    s.add_argument("out", help="checkpoint path")
    s.add_argument("--config")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--k", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--blocks", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", action="store_true", help="continue from the checkpoint at OUT")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("stats", help="ID normalization statistics for NSD")
    s.add_argument("checkpoint")
    s.add_argument("data")
    s.add_argument("--split", choices=("val", "all"), default="val")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("score", help="per-sample scores CSV")
    s.add_argument("checkpoint")
    s.add_argument("data")
    s.add_argument("--metric", choices=("ll", "typicality", "nsd", "all"), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("eval", help="AUROC/FPR95 report over an OOD suite")
    s.add_argument("checkpoint")
    s.add_argument("clean")
    s.add_argument("suite")
    s.add_argument("--out", required=True)
    s.add_argument("--scores-dir")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("corrupt", help="build a corrupted OOD suite")
    s.add_argument("data")
    s.add_argument("out")
    s.add_argument("--kinds", nargs="+")
    s.add_argument("--severities", type=int, nargs="+")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    s.set_defaults(fn=cmd_corrupt)

    s = sub.add_parser("sample", help="sample a high-frequency component for an image")
    s.add_argument("checkpoint")
    s.add_argument("image", help="conditioning image (PPM/PGM)")
    s.add_argument("--temperature", type=float, default=0.7)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

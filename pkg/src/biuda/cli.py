"""Command-line entry point.

Subcommands: synth, train, train-upper, eval, report, repro. Configuration
is a flat key space: built-in defaults, overridden by a JSON --config file,
overridden by explicit flags / --set pairs; the resolved result is written
verbatim into each run directory as config.json.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import data as data_mod
from . import metrics as metrics_mod
from .errors import ConfigurationError, DataError, NumericalError, ReportError
from .losses import LossWeights
from .networks import NetworkConfig
from .train import TrainConfig, VARIANTS, load_checkpoint, train, train_upper_bound

DIRECTIONS = ("forward", "backward", "both")


def _flat_defaults() -> dict:
    synth = data_mod.SynthConfig()
    net = NetworkConfig()
    tr = TrainConfig()
    cfg: dict = {
        # dataset
        "image_size": synth.image_size,
        "num_cases": synth.num_cases,
        "slices_per_case": synth.slices_per_case,
        "num_classes": synth.num_classes,
        "num_folds": synth.num_folds,
        # networks
        "base_channels": net.base_channels,
        "content_stride": net.content_stride,
        "content_channels": net.content_channels,
        "pattern_dim": net.pattern_dim,
        "num_adain_blocks": net.num_adain_blocks,
        "num_down_units": net.num_down_units,
        "dual_discriminator": net.dual_discriminator,
        "pool_scales": list(net.pool_scales),
        # training
        "iterations": tr.iterations,
        "batch_size": tr.batch_size,
        "lr_content": tr.lr_content,
        "momentum": tr.momentum,
        "lr_pattern": tr.lr_pattern,
        "lr_generator": tr.lr_generator,
        "lr_discriminator": tr.lr_discriminator,
        "adam_beta1": tr.adam_betas[0],
        "adam_beta2": tr.adam_betas[1],
        "poly_power": tr.poly_power,
        "augment": tr.augment,
        "weight_cpc": tr.weights.cpc,
        "weight_lc": tr.weights.lc,
        "weight_cycle": tr.weights.cycle,
        "weight_gan": tr.weights.gan,
        "dice_eps": tr.weights.dice_eps,
        "log_eps": tr.weights.log_eps,
        # run
        "seed": 0,
        "variant": tr.variant,
        "direction": "both",
        "fold": 0,
    }
    for d, app in enumerate(data_mod.default_appearances()):
        for key, value in asdict(app).items():
            cfg[f"domain{d}_{key}"] = value
    return cfg


def resolve_config(config_path: Optional[str], overrides: dict) -> dict:
    cfg = _flat_defaults()
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}")
        for key, value in loaded.items():
            if key not in cfg:
                raise ConfigurationError(f"unknown config key {key!r} in {path}")
            cfg[key] = value
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in cfg:
            raise ConfigurationError(f"unknown config key {key!r}")
        cfg[key] = value
    return cfg


def synth_config_from(cfg: dict) -> data_mod.SynthConfig:
    apps = []
    for d in (0, 1):
        apps.append(
            data_mod.AppearanceParams(
                polarity=int(cfg[f"domain{d}_polarity"]),
                blur_sigma=float(cfg[f"domain{d}_blur_sigma"]),
                noise_std=float(cfg[f"domain{d}_noise_std"]),
                texture_freq=float(cfg[f"domain{d}_texture_freq"]),
                texture_amp=float(cfg[f"domain{d}_texture_amp"]),
            )
        )
    return data_mod.SynthConfig(
        image_size=int(cfg["image_size"]),
        num_cases=int(cfg["num_cases"]),
        slices_per_case=int(cfg["slices_per_case"]),
        num_classes=int(cfg["num_classes"]),
        num_folds=int(cfg["num_folds"]),
        appearance=(apps[0], apps[1]),
        seed=int(cfg["seed"]),
    )


def net_config_from(cfg: dict, num_classes: int) -> NetworkConfig:
    return NetworkConfig(
        base_channels=int(cfg["base_channels"]),
        content_stride=int(cfg["content_stride"]),
        content_channels=int(cfg["content_channels"]) if cfg["content_channels"] else None,
        pattern_dim=int(cfg["pattern_dim"]),
        num_adain_blocks=int(cfg["num_adain_blocks"]),
        num_down_units=int(cfg["num_down_units"]),
        num_classes=num_classes,
        dual_discriminator=bool(cfg["dual_discriminator"]),
        pool_scales=tuple(cfg["pool_scales"]),
    )


def train_config_from(cfg: dict, variant: Optional[str] = None) -> TrainConfig:
    return TrainConfig(
        iterations=int(cfg["iterations"]),
        batch_size=int(cfg["batch_size"]),
        lr_content=float(cfg["lr_content"]),
        momentum=float(cfg["momentum"]),
        lr_pattern=float(cfg["lr_pattern"]),
        lr_generator=float(cfg["lr_generator"]),
        lr_discriminator=float(cfg["lr_discriminator"]),
        adam_betas=(float(cfg["adam_beta1"]), float(cfg["adam_beta2"])),
        poly_power=float(cfg["poly_power"]),
        weights=LossWeights(
            cpc=float(cfg["weight_cpc"]),
            lc=float(cfg["weight_lc"]),
            cycle=float(cfg["weight_cycle"]),
            gan=float(cfg["weight_gan"]),
            dice_eps=float(cfg["dice_eps"]),
            log_eps=float(cfg["log_eps"]),
        ),
        variant=variant or str(cfg["variant"]),
        augment=bool(cfg["augment"]),
        seed=int(cfg["seed"]),
    )


def _write_resolved(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def _parse_sets(pairs: Optional[Sequence[str]]) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    overrides = _parse_sets(args.set)
    for key in ("seed", "image_size", "num_cases", "slices_per_case", "num_classes", "num_folds"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    cfg = resolve_config(args.config, overrides)
    synth_cfg = synth_config_from(cfg)
    bundle = data_mod.synth_dataset(synth_cfg)
    out = Path(args.out)
    data_mod.save_dataset(bundle, out)
    _write_resolved(cfg, out)
    print(f"wrote {len(bundle.samples)} samples to {out}")
    return 0


def _direction_domains(direction: str) -> tuple[int, int]:
    """(source domain, target domain) for a direction keyword."""
    if direction == "forward":
        return 0, 1
    if direction == "backward":
        return 1, 0
    raise ConfigurationError(f"direction must be forward or backward, got {direction!r}")


def cmd_train(args: argparse.Namespace) -> int:
    overrides = _parse_sets(args.set)
    for key in ("seed", "iterations", "batch_size", "variant", "direction", "fold"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    cfg = resolve_config(args.config, overrides)
    bundle = data_mod.load_dataset(args.data)
    fold = int(cfg["fold"])
    directions = [cfg["direction"]] if cfg["direction"] != "both" else ["forward", "backward"]
    variant = str(cfg["variant"])
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    for direction in directions:
        src, tgt = _direction_domains(direction)
        source_samples = bundle.select(domain=src, exclude_fold=fold)
        target_samples = bundle.select(domain=tgt, exclude_fold=fold)
        run_dir = Path(args.out) / f"{direction}_{variant}"
        run_cfg = dict(cfg)
        run_cfg["direction"] = direction
        _write_resolved(run_cfg, run_dir)
        net_cfg = net_config_from(cfg, bundle.manifest.num_classes)
        train_cfg = train_config_from(cfg, variant)
        train(net_cfg, train_cfg, source_samples, target_samples, out_dir=run_dir)
        print(f"trained {direction}/{variant} -> {run_dir}")
    return 0


def cmd_train_upper(args: argparse.Namespace) -> int:
    overrides = _parse_sets(args.set)
    for key in ("seed", "iterations", "batch_size", "fold"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    cfg = resolve_config(args.config, overrides)
    bundle = data_mod.load_dataset(args.data)
    fold = int(cfg["fold"])
    domains = [int(args.domain)] if args.domain != "both" else [0, 1]
    for domain in domains:
        samples = bundle.select(domain=domain, exclude_fold=fold)
        if any(s.mask is None for s in samples):
            raise ConfigurationError(f"domain {domain} lacks masks; cannot train a bound")
        run_dir = Path(args.out) / f"upper_domain{domain}"
        run_cfg = dict(cfg)
        run_cfg["variant"] = "source_only"
        run_cfg["direction"] = f"domain{domain}"
        _write_resolved(run_cfg, run_dir)
        net_cfg = net_config_from(cfg, bundle.manifest.num_classes)
        train_cfg = train_config_from(cfg, "source_only")
        train_upper_bound(net_cfg, train_cfg, samples, out_dir=run_dir)
        print(f"trained upper bound domain{domain} -> {run_dir}")
    return 0


def _run_dirs(root: Path) -> list[tuple[str, str, int, Path]]:
    """(method, direction, eval domain, run dir) for every completed run."""
    runs = []
    for child in sorted(root.iterdir()):
        if not (child / "checkpoint.pt").is_file():
            continue
        name = child.name
        if name == "upper_domain0":
            runs.append(("upper_bound", metrics_mod.BOUND_SOURCE_DOMAIN, 0, child))
        elif name == "upper_domain1":
            runs.append(("upper_bound", metrics_mod.BOUND_TARGET_DOMAIN, 1, child))
        elif "_" in name:
            direction, _, variant = name.partition("_")
            if direction in ("forward", "backward") and variant in VARIANTS:
                target = 1 if direction == "forward" else 0
                runs.append((variant, direction, target, child))
    order = {metrics_mod.BOUND_SOURCE_DOMAIN: 0, metrics_mod.BOUND_TARGET_DOMAIN: 1}
    variant_rank = {v: i for i, v in enumerate(VARIANTS)}
    runs.sort(
        key=lambda r: (
            0 if r[1] in order else 1,
            order.get(r[1], 0),
            variant_rank.get(r[0], 99),
            r[1],
        )
    )
    return runs


def cmd_eval(args: argparse.Namespace) -> int:
    bundle = data_mod.load_dataset(args.data)
    root = Path(args.out)
    if not root.is_dir():
        raise ConfigurationError(f"output root not found: {root}")
    runs = _run_dirs(root)
    if not runs:
        raise ConfigurationError(f"no completed runs under {root}")
    rows: list[metrics_mod.MetricsRow] = []
    for method, direction, domain, run_dir in runs:
        run_cfg = json.loads((run_dir / "config.json").read_text())
        fold = int(run_cfg.get("fold", 0))
        ckpt = load_checkpoint(run_dir / "checkpoint.pt")
        class_rows = metrics_mod.evaluate(ckpt, bundle, fold=fold, domain=domain)
        for r in class_rows:
            r.method = method
            r.direction = direction
            rows.append(r)
        mean_dice, mean_f1 = metrics_mod.mean_scores(class_rows)
        print(
            f"{method:12s} {direction:8s} mean dice "
            f"{mean_dice if mean_dice is not None else float('nan'):6.2f}"
        )
    metrics_mod.write_metrics_csv(rows, root / "metrics.csv")
    print(f"wrote {root / 'metrics.csv'}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.out)
    metrics_path = root / "metrics.csv"
    if not metrics_path.is_file():
        raise ConfigurationError(f"missing {metrics_path}; run eval first")
    rows = metrics_mod.read_metrics_csv(metrics_path)
    paths = metrics_mod.report(rows, root)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_repro(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(args.data) if args.data else out / "dataset"
    base = ["--config", args.config] if args.config else []
    sets = [f"--set={s}" for s in (args.set or [])]
    if args.data is None:
        rc = main(["synth", "--out", str(data_dir), *base, *sets]
                  + (["--seed", str(args.seed)] if args.seed is not None else []))
        if rc:
            return rc
    common = ["--data", str(data_dir), "--out", str(out), *base, *sets]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    if args.iterations is not None:
        common += ["--iterations", str(args.iterations)]
    rc = main(["train-upper", "--domain", "both", *common])
    if rc:
        return rc
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for variant in variants:
        rc = main(["train", "--direction", "both", "--variant", variant, *common])
        if rc:
            return rc
    rc = main(["eval", "--data", str(data_dir), "--out", str(out)])
    if rc:
        return rc
    return main(["report", "--out", str(out)])


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biuda",
        description="Bidirectional unsupervised domain adaptation on a synthetic benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, data: bool = False) -> None:
        p.add_argument("--config", help="JSON file of flat config keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        if data:
            p.add_argument("--data", required=True, help="dataset root directory")

    p_synth = sub.add_parser("synth", help="generate and save a synthetic two-domain dataset")
    add_common(p_synth)
    p_synth.add_argument("--image-size", dest="image_size", type=int)
    p_synth.add_argument("--cases", dest="num_cases", type=int)
    p_synth.add_argument("--slices", dest="slices_per_case", type=int)
    p_synth.add_argument("--classes", dest="num_classes", type=int)
    p_synth.add_argument("--folds", dest="num_folds", type=int)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="run UDA training for a direction and variant")
    add_common(p_train, data=True)
    p_train.add_argument("--direction", choices=DIRECTIONS)
    p_train.add_argument("--variant", choices=VARIANTS)
    p_train.add_argument("--fold", type=int)
    p_train.add_argument("--iterations", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.set_defaults(func=cmd_train)

    p_upper = sub.add_parser("train-upper", help="train a supervised single-domain bound")
    add_common(p_upper, data=True)
    p_upper.add_argument("--domain", choices=("0", "1", "both"), default="both")
    p_upper.add_argument("--fold", type=int)
    p_upper.add_argument("--iterations", type=int)
    p_upper.add_argument("--batch-size", dest="batch_size", type=int)
    p_upper.set_defaults(func=cmd_train_upper)

    p_eval = sub.add_parser("eval", help="score every completed run on its held-out fold")
    add_common(p_eval, data=True)
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="emit drop tables and the drop chart")
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=cmd_report)

    p_repro = sub.add_parser(
        "repro", help="synth + bounds + all variants both directions + eval + report"
    )
    add_common(p_repro)
    p_repro.add_argument("--data", help="reuse an existing dataset root")
    p_repro.add_argument("--iterations", type=int)
    p_repro.add_argument("--variants", help="comma-separated subset of variants")
    p_repro.set_defaults(func=cmd_repro)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    if os.environ.get("BIUDA_DETERMINISTIC") == "1":
        torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DataError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

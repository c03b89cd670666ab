"""Command-line entry point.

Settings resolve in three layers: built-in defaults, then the JSON file
given with --config, then explicit flags.  --seed governs every random
stream of a command; per-grid-point seeds are derived from it.  Exit
codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .data import DatasetConfig
from .experiments import (
    EXPERIMENT_KINDS,
    ExperimentSpec,
    MiTaskConfig,
    default_train_config,
    run_experiment,
)
from .training import TrainConfig
from .validation import ConfigError, NumericError

_DEFAULT_OUT_DIR = "eqco-out"
_TOP_LEVEL_KEYS = {
    "seed",
    "out_dir",
    "train",
    "dataset",
    "mi",
    "k_values",
    "n_values",
    "modes",
    "alpha",
    "scale_lr",
    "per_step",
    "train_frac",
}


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eqco",
        description="Desk-scale contrastive learning experiments with the equivalent margin rule.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        p.add_argument("--out-dir", type=Path, help="output directory (or $EQCO_OUT_DIR)")
        p.add_argument("--k", type=int, help="negatives per query")
        p.add_argument("--alpha", type=float, help="virtual negative count for eqco mode")
        p.add_argument("--tau", type=float, help="softmax temperature")
        p.add_argument("--margin-mode", choices=["fixed", "eqco"], help="margin rule")
        p.add_argument("--margin", type=float, help="fixed-mode margin value")
        p.add_argument("--neg-source", choices=["bank", "batch", "subsample"], help="negative sourcing")
        p.add_argument("--epochs", type=int, help="training epochs")
        p.add_argument("--n-queries", type=int, help="queries per batch")
        p.add_argument("--base-lr", type=float, help="learning rate at the reference batch size")
        p.add_argument("--beta", type=float, help="momentum-encoder coefficient")
        p.add_argument("--k-grid", type=_int_list, help="comma-separated K grid for sweeps")
        p.add_argument("--n-grid", type=_int_list, help="comma-separated N grid for n_sweep")
        p.add_argument("--modes", type=str, help="comma-separated margin modes, e.g. eqco,fixed")
        p.add_argument("--lr-scaling", choices=["on", "off"], help="linear lr scaling in n_sweep")
        p.add_argument("--per-step", action="store_true", help="log every step in mi_sweep")
        p.add_argument("--train-frac", type=float, help="probe train split fraction")
        p.add_argument("--rho", type=float, help="Gaussian pair correlation for mi_sweep")
        p.add_argument("--dim", type=int, help="Gaussian pair dimension for mi_sweep")
        p.add_argument("--steps-per-epoch", type=int, help="mi_sweep steps per epoch")
        p.add_argument("--mc-samples", type=int, help="samples for the theoretical bound oracle")
        p.add_argument("--checkpoint", type=Path, help="encoder checkpoint (probe)")
    return parser


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(doc) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _sub_config(cls, doc: dict, section: str):
    values = dict(doc.get(section, {}))
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {section} config: {exc}") from exc


def build_spec(args: argparse.Namespace) -> ExperimentSpec:
    doc = _load_config(args.config)

    base_train = default_train_config(args.command).to_dict()
    if "train" in doc:
        file_train = dict(doc["train"])
        file_loss = dict(file_train.pop("loss", {}))
        base_train["loss"].update(file_loss)
        base_train.update(file_train)
    train_doc = TrainConfig.from_dict(base_train).to_dict()
    loss_doc = train_doc["loss"]
    if args.k is not None:
        loss_doc["k"] = args.k
    if args.tau is not None:
        loss_doc["tau"] = args.tau
    if args.margin_mode is not None:
        loss_doc["margin_mode"] = args.margin_mode
    if args.margin is not None:
        loss_doc["margin"] = args.margin
    if args.alpha is not None:
        loss_doc["alpha"] = args.alpha
    for flag, key in [
        (args.neg_source, "neg_source"),
        (args.epochs, "epochs"),
        (args.n_queries, "n_queries"),
        (args.base_lr, "base_lr"),
        (args.beta, "beta"),
    ]:
        if flag is not None:
            train_doc[key] = flag
    train = TrainConfig.from_dict(train_doc)

    dataset = _sub_config(DatasetConfig, doc, "dataset")

    mi_doc = dict(doc.get("mi", {}))
    for flag, key in [
        (args.rho, "rho"),
        (args.dim, "dim"),
        (args.tau, "tau"),
        (args.epochs, "epochs"),
        (args.n_queries, "n_queries"),
        (args.base_lr, "base_lr"),
        (args.beta, "beta"),
        (args.steps_per_epoch, "steps_per_epoch"),
        (args.mc_samples, "bound_mc_samples"),
    ]:
        if flag is not None:
            mi_doc[key] = flag
    try:
        mi = MiTaskConfig(**mi_doc)
    except TypeError as exc:
        raise ConfigError(f"bad mi config: {exc}") from exc

    out_dir = args.out_dir or doc.get("out_dir") or os.environ.get("EQCO_OUT_DIR") or _DEFAULT_OUT_DIR
    seed = args.seed if args.seed is not None else doc.get("seed", 0)

    modes = doc.get("modes", ["eqco", "fixed"])
    if args.modes is not None:
        modes = [m for m in args.modes.split(",") if m]

    scale_lr = doc.get("scale_lr", True)
    if args.lr_scaling is not None:
        scale_lr = args.lr_scaling == "on"

    return ExperimentSpec(
        kind=args.command,
        out_dir=Path(out_dir),
        seed=int(seed),
        train=train,
        dataset=dataset,
        mi=mi,
        k_values=tuple(args.k_grid) if args.k_grid is not None else tuple(doc.get("k_values", ())),
        n_values=tuple(args.n_grid) if args.n_grid is not None else tuple(doc.get("n_values", ())),
        modes=tuple(modes),
        alpha=args.alpha if args.alpha is not None else doc.get("alpha"),
        scale_lr=bool(scale_lr),
        per_step=bool(args.per_step or doc.get("per_step", False)),
        train_frac=args.train_frac if args.train_frac is not None else doc.get("train_frac", 0.5),
        checkpoint=args.checkpoint,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = build_spec(args)
    except (ConfigError, ValueError) as exc:
        print(f"eqco: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        run_experiment(spec)
    except ConfigError as exc:
        print(f"eqco: configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"eqco: numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands: gen-data, train-base, assess, splice, finetune, evaluate,
compare, sweep-models, ablate. Exit codes: 0 success, 1 validation error
(bad config, bad inputs, malformed files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError, load, save, validate_compatible
from .compatibility import AssessmentNetworks, HistogramSpec, assess
from .data import (
    TASK_CLASSIFICATION,
    TASK_RANKING,
    gen_classification,
    gen_interactions,
    load_dataset,
    ranking_candidates,
    save_dataset,
)
from .harness import (
    EVAL_NEGATIVES,
    RANKING_KS,
    ConfigError,
    ExperimentConfig,
    ablation_assessment,
    ablation_splicing,
    derive_seed,
    run_compare,
    sweep_model_count,
)
from .metrics import classification_metrics, rank_by_score, ranking_metrics
from .models import default_config, finetune, fit_assessment, predict, train_base
from .splicing import hard_splice, soft_splice

VALIDATION_ERRORS = (ConfigError, CheckpointError, ValueError, FileNotFoundError,
                     IsADirectoryError, KeyError)


def _add_common(parser: argparse.ArgumentParser, *flags: str) -> None:
    if "config" in flags:
        parser.add_argument("--config", type=Path, help="JSON experiment config")
    if "out" in flags:
        parser.add_argument("--out", type=Path, required=True, help="output path")
    if "seed" in flags:
        parser.add_argument("--seed", type=int, default=0, help="random seed")
    if "mode" in flags:
        parser.add_argument("--mode", choices=["hard", "soft"], default="soft",
                            help="splicing mode")
    if "bins" in flags:
        parser.add_argument("--bins", type=int, default=64,
                            help="histogram bin count for entropy")
    if "models" in flags:
        parser.add_argument("--models", type=Path, nargs="+", required=True,
                            help="checkpoint path(s)")
    if "data" in flags:
        parser.add_argument("--data", type=Path, required=True, help="dataset npz")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paramsplice",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--task", choices=[TASK_CLASSIFICATION, TASK_RANKING], required=True)
    _add_common(p, "seed", "out")
    p.add_argument("--samples", type=int, default=7000)
    p.add_argument("--features", type=int, default=16)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--users", type=int, default=150)
    p.add_argument("--items", type=int, default=300)
    p.add_argument("--latent", type=int, default=8)

    p = sub.add_parser("train-base", help="train one base model")
    _add_common(p, "data", "seed", "out")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("assess", help="compute compatibility for N checkpoints")
    _add_common(p, "models", "bins", "seed", "mode", "out")
    p.add_argument("--train-data", type=Path, default=None,
                   help="dataset npz; if given, train the assessment networks")
    p.add_argument("--epochs", type=int, default=3, help="assessment training epochs")

    p = sub.add_parser("splice", help="merge N checkpoints into one")
    _add_common(p, "models", "bins", "seed", "mode", "out")
    p.add_argument("--networks", type=Path, default=None,
                   help="assessment-networks checkpoint; fresh init otherwise")

    p = sub.add_parser("finetune", help="fine-tune a spliced checkpoint")
    _add_common(p, "models", "data", "seed", "out")
    p.add_argument("--epochs", type=int, default=1)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    _add_common(p, "models", "data", "seed")
    p.add_argument("--out", type=Path, default=None, help="optional metrics JSON path")

    p = sub.add_parser("compare", help="run the full method comparison")
    _add_common(p, "config", "out")

    p = sub.add_parser("sweep-models", help="compare across model counts")
    _add_common(p, "config", "out")
    p.add_argument("--counts", type=int, nargs="+", default=[2, 3, 4, 5, 6, 7, 8],
                   help="model counts to sweep")

    p = sub.add_parser("ablate", help="run the ablation studies")
    _add_common(p, "config", "out")
    p.add_argument("--kind", choices=["assessment", "splicing", "both"], default="both")
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    config = ExperimentConfig.from_json(args.config)
    if args.out is not None:
        config = ExperimentConfig.from_dict({**config.to_dict(), "out_dir": str(args.out)})
    return config


def _cmd_gen_data(args) -> None:
    if args.task == TASK_CLASSIFICATION:
        data = gen_classification(args.seed, args.samples, args.features,
                                  args.classes, args.separation)
    else:
        data = gen_interactions(args.seed, args.users, args.items, args.latent)
    save_dataset(data, args.out)
    print(f"wrote {args.task} dataset to {args.out}")


def _cmd_train_base(args) -> None:
    data = load_dataset(args.data)
    overrides = {} if args.epochs is None else {"epochs": args.epochs}
    config = default_config(data.task, seed=args.seed, **overrides)
    model = train_base(config, data)
    save(model, args.out)
    print(f"trained {model.architecture} -> {args.out}")


def _load_models(paths) -> list:
    models = [load(p) for p in paths]
    if len(models) >= 2:
        validate_compatible(models)
    return models


def _cmd_assess(args) -> None:
    models = _load_models(args.models)
    spec = HistogramSpec(args.bins)
    if args.train_data is not None:
        data = load_dataset(args.train_data)
        networks = fit_assessment(models, data, args.mode, spec, args.epochs,
                                  seed=args.seed).networks
    else:
        networks = AssessmentNetworks.initialize(args.seed)
    compat = assess(models, networks, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save(networks.to_parameter_set(), out / "networks.ckpt")
    for k in range(len(models)):
        entries = tuple((name, compat.weights[name][k]) for name, _ in models[0].items())
        save(checkpoint.ParameterSet(models[0].architecture, entries),
             out / f"compat_model{k}.ckpt")
    summary = {name: {f"model_{k}": float(compat.weights[name][k].data.mean())
                      for k in range(len(models))}
               for name in models[0].names}
    with open(out / "summary.json", "w", encoding="utf-8") as handle:
        json.dump({"bins": args.bins, "mean_weight_per_matrix": summary}, handle, indent=2)
    print(f"wrote assessment outputs to {out}")


def _cmd_splice(args) -> None:
    models = _load_models(args.models)
    if len(models) < 2:
        raise ConfigError("splicing needs at least two checkpoints")
    spec = HistogramSpec(args.bins)
    if args.networks is not None:
        networks = AssessmentNetworks.from_parameter_set(load(args.networks))
    else:
        networks = AssessmentNetworks.initialize(args.seed)
    compat = assess(models, networks, spec)
    spliced = (soft_splice if args.mode == "soft" else hard_splice)(models, compat)
    save(spliced, args.out)
    print(f"spliced {len(models)} models ({args.mode}) -> {args.out}")


def _cmd_finetune(args) -> None:
    if len(args.models) != 1:
        raise ConfigError("finetune takes exactly one checkpoint")
    model = load(args.models[0])
    data = load_dataset(args.data)
    tuned = finetune(model, data, epochs=args.epochs, seed=args.seed)
    save(tuned, args.out)
    print(f"fine-tuned for {args.epochs} epoch(s) -> {args.out}")


def _cmd_evaluate(args) -> None:
    if len(args.models) != 1:
        raise ConfigError("evaluate takes exactly one checkpoint")
    model = load(args.models[0])
    data = load_dataset(args.data)
    if data.task == TASK_CLASSIFICATION:
        inputs, labels = data.split("test")
        metrics = classification_metrics(predict(model, inputs), labels)
    else:
        users, candidates = ranking_candidates(data, derive_seed(args.seed, "eval"),
                                               EVAL_NEGATIVES)
        scores = np.take_along_axis(predict(model, users), candidates, axis=1)
        ranked = np.take_along_axis(candidates, rank_by_score(scores), axis=1)
        metrics = {}
        for k in RANKING_KS:
            metrics.update(ranking_metrics(ranked, candidates[:, 0], k))
    print(json.dumps(metrics, indent=2, sort_keys=True))
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as handle:
            json.dump(metrics, handle, indent=2, sort_keys=True)


def _cmd_compare(args) -> None:
    report = run_compare(_load_config(args))
    print(f"wrote compare report ({len(report.rows)} rows) to {report.config.out_dir}")


def _cmd_sweep(args) -> None:
    report = sweep_model_count(_load_config(args), list(args.counts))
    print(f"wrote sweep report ({len(report.rows)} rows) to {report.config.out_dir}")


def _cmd_ablate(args) -> None:
    config = _load_config(args)
    if args.kind in ("assessment", "both"):
        report = ablation_assessment(config)
        print(f"wrote assessment ablation ({len(report.rows)} rows)")
    if args.kind in ("splicing", "both"):
        report = ablation_splicing(config)
        print(f"wrote splicing ablation ({len(report.rows)} rows)")


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-base": _cmd_train_base,
    "assess": _cmd_assess,
    "splice": _cmd_splice,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
    "sweep-models": _cmd_sweep,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth, train, evaluate, gradcheck.

Exit codes are a stable contract: 0 success, 2 usage or configuration
error, 3 numerical failure (training divergence, failed gradient check).

Every command writes a resolved-config JSON into its output directory so
a run can be replayed bit-exactly from the flags recorded there.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .dro import DEFAULT_BETA
from .gradcheck import run_gradcheck
from .losses import LOSS_KINDS, LabelMap, brats_distance_matrix, load_distance_matrix
from .metrics import (aggregate, ensemble_mean_softmax, evaluate_case,
                      format_aggregate_table, postprocess_et, write_aggregate_csv,
                      write_case_csv)
from .model import (Model, ModelSpec, TrainConfig, TrainingDiverged, load_model,
                    predict_tta, save_model, train, write_training_log)
from .optim import OPTIMIZER_KINDS
from .synthdata import MANIFEST_NAME, SynthConfig, generate, load, read_manifest

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# The four experiment arms: default ingredients, a better optimizer, a
# semantically informed loss, and robust sampling.  "ensemble" trains all
# four so their mean-softmax combination can be evaluated in one go.
PRESETS = {
    "baseline": {"loss": "dice_ce", "population": "erm", "optimizer": "sgd"},
    "ranger": {"loss": "dice_ce", "population": "erm", "optimizer": "ranger"},
    "gwdl": {"loss": "gwdl_ce", "population": "erm", "optimizer": "sgd"},
    "dro": {"loss": "dice_ce", "population": "dro", "optimizer": "sgd"},
}

DEFAULT_LR = {"sgd": 1e-2, "adam": 3e-3, "radam": 3e-3, "ranger": 3e-3}


def parse_grid(text: str) -> tuple:
    parts = text.split("x")
    if len(parts) not in (2, 3):
        raise ValueError(f"grid must be AxB or AxBxC, got {text!r}")
    try:
        grid = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"grid must be AxB or AxBxC with integer extents, got {text!r}")
    return grid


def parse_subgroups(text: str) -> dict:
    out = {}
    for chunk in text.split(","):
        name, sep, count = chunk.partition(":")
        if not sep or not name:
            raise ValueError(f"subgroups must be name:count[,name:count...], got {text!r}")
        try:
            out[name] = int(count)
        except ValueError:
            raise ValueError(f"subgroup count for {name!r} is not an integer: {count!r}")
    return out


def _write_run_config(out_dir: str, doc: dict) -> None:
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _dataset_path(path: str) -> str:
    return os.path.join(path, MANIFEST_NAME) if os.path.isdir(path) else path


def cmd_synth(args) -> int:
    config = SynthConfig(
        grid=parse_grid(args.grid),
        subgroup_cases=parse_subgroups(args.subgroups),
        sigma=args.sigma,
        no_et_fraction=args.no_et_frac,
        seed=args.seed,
    )
    manifest = generate(config, args.out)
    _write_run_config(args.out, {
        "command": "synth",
        "out": args.out,
        "grid": args.grid,
        "subgroups": args.subgroups,
        "sigma": args.sigma,
        "no_et_frac": args.no_et_frac,
        "seed": args.seed,
    })
    print(f"wrote {len(manifest.cases)} cases to {args.out}")
    return EXIT_OK


def _resolve_arm(args, preset: str | None) -> dict:
    base = PRESETS.get(preset, {})
    loss = args.loss or base.get("loss", "dice_ce")
    population = args.population or base.get("population", "erm")
    optimizer = args.optimizer or base.get("optimizer", "sgd")
    lr = args.lr if args.lr is not None else DEFAULT_LR[optimizer]
    beta = args.beta if args.beta is not None else DEFAULT_BETA
    return {
        "loss": loss,
        "population": population,
        "optimizer": optimizer,
        "lr": lr,
        "beta": beta,
    }


def _train_one(arm: dict, args, cases, manifest, tag: str | None, out_dir: str) -> dict:
    needs_matrix = "gwdl" in arm["loss"]
    matrix = None
    if needs_matrix:
        matrix = (load_distance_matrix(args.distance_matrix)
                  if args.distance_matrix else brats_distance_matrix())
    hidden = args.hidden if args.model == "mlp" else None
    spec = ModelSpec(
        kind=args.model,
        input_features=manifest.feature_width,
        num_classes=manifest.num_classes,
        hidden_width=hidden,
        seed=args.seed + 2,  # keep init, shuffle and sampler streams apart
    )
    config = TrainConfig(
        loss=arm["loss"],
        distance_matrix=matrix,
        sampler_mode="dro" if arm["population"] == "dro" else "erm_shuffle",
        beta=arm["beta"],
        optimizer=arm["optimizer"],
        lr=arm["lr"],
        lookahead_k=args.lookahead_k,
        lookahead_alpha=args.lookahead_alpha,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    trained = train(Model.init(spec), cases, config)
    suffix = f"_{tag}" if tag else ""
    model_path = os.path.join(out_dir, f"model{suffix}.json")
    save_model(trained, model_path)
    write_training_log(trained, os.path.join(out_dir, f"training_log{suffix}.csv"))
    final = trained.training_log[-1].loss if trained.training_log else float("nan")
    print(f"trained {tag or 'model'}: {config.epochs} epochs, final mean loss {final:.6f}")
    return {
        **arm,
        "model_kind": args.model,
        "hidden_width": hidden,
        "distance_matrix": (args.distance_matrix or "builtin") if needs_matrix else None,
        "lookahead_k": args.lookahead_k,
        "lookahead_alpha": args.lookahead_alpha,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "model_file": os.path.basename(model_path),
    }


def cmd_train(args) -> int:
    manifest_path = _dataset_path(args.dataset)
    manifest = read_manifest(manifest_path)
    cases = load(manifest_path)
    os.makedirs(args.out, exist_ok=True)

    if args.preset == "ensemble":
        arms = {}
        for tag in PRESETS:
            arm = _resolve_arm(args, tag)
            arms[tag] = _train_one(arm, args, cases, manifest, tag, args.out)
        _write_run_config(args.out, {
            "command": "train",
            "dataset": args.dataset,
            "out": args.out,
            "preset": "ensemble",
            "arms": arms,
        })
        return EXIT_OK

    arm = _resolve_arm(args, args.preset)
    resolved = _train_one(arm, args, cases, manifest, None, args.out)
    _write_run_config(args.out, {
        "command": "train",
        "dataset": args.dataset,
        "out": args.out,
        "preset": args.preset,
        **resolved,
    })
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest_path = _dataset_path(args.dataset)
    manifest = read_manifest(manifest_path)
    cases = load(manifest_path)
    models = []
    for path in args.models:
        trained = load_model(path)
        if trained.spec.input_features != manifest.feature_width:
            raise ValueError(
                f"model {path} expects {trained.spec.input_features} features, "
                f"dataset provides {manifest.feature_width}"
            )
        if trained.spec.num_classes != manifest.num_classes:
            raise ValueError(
                f"model {path} has {trained.spec.num_classes} classes, "
                f"dataset declares {manifest.num_classes}"
            )
        models.append(trained.model())
    os.makedirs(args.out, exist_ok=True)
    spacing = manifest.spacing_mm

    def eval_one(case):
        preds = []
        for m in models:
            if args.tta:
                preds.append(predict_tta(m, case.features, case.labels.spatial_shape))
            else:
                preds.append(m.forward(case.features))
        ens = ensemble_mean_softmax(preds)
        labels = np.argmax(ens.voxels, axis=1)
        pred_map = LabelMap(labels, manifest.num_classes, case.labels.spatial_shape)
        pred_map = postprocess_et(pred_map)
        return evaluate_case(pred_map, case.labels, spacing, case_id=case.case_id)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            per_case = list(pool.map(eval_one, cases))
    else:
        per_case = [eval_one(c) for c in cases]

    stats = aggregate(per_case)
    write_case_csv(per_case, os.path.join(args.out, "metrics.csv"))
    write_aggregate_csv(stats, os.path.join(args.out, "aggregate.csv"))
    table = format_aggregate_table(stats)
    with open(os.path.join(args.out, "aggregate.txt"), "w") as fh:
        fh.write(table)
    _write_run_config(args.out, {
        "command": "evaluate",
        "models": list(args.models),
        "dataset": args.dataset,
        "out": args.out,
        "tta": bool(args.tta),
        "jobs": args.jobs,
        "seed": args.seed,
    })
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = [args.loss] if args.loss else None
    results = run_gradcheck(kinds, trials=args.trials, seed=args.seed,
                            inject_bug=args.inject_bug)
    all_ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        all_ok &= r.passed
        print(f"{r.kind:8s} trials={r.trials} "
              f"worst prob-space rel err {r.worst_prob_err:.3e} "
              f"worst param-space rel err {r.worst_param_err:.3e} {status}")
    return EXIT_OK if all_ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segopt",
        description="Training-optimization toolkit for segmentation: synthetic "
                    "datasets, robust training, evaluation, gradient checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic nested-region dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--grid", default="16x16", help="grid extents, e.g. 16x16 or 16x16x8")
    p.add_argument("--subgroups", default="common:8",
                   help="cases per subgroup, e.g. common:40,rare:4")
    p.add_argument("--sigma", type=float, default=0.3, help="feature noise level")
    p.add_argument("--no-et-frac", type=float, default=0.0,
                   help="fraction of cases without an enhancing-tumor region")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--dataset", required=True, help="manifest path or dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--model", choices=("linear", "mlp"), default="linear")
    p.add_argument("--hidden", type=int, default=16, help="hidden width (mlp only)")
    p.add_argument("--loss", choices=LOSS_KINDS, default=None)
    p.add_argument("--population", choices=("erm", "dro"), default=None,
                   help="erm: uniform shuffling; dro: hardness-weighted sampling")
    p.add_argument("--beta", type=float, default=None,
                   help="hardness-weighting strength (dro)")
    p.add_argument("--optimizer", choices=OPTIMIZER_KINDS, default=None)
    p.add_argument("--lr", type=float, default=None,
                   help="initial learning rate (per-optimizer default otherwise)")
    p.add_argument("--lookahead-k", type=int, default=6)
    p.add_argument("--lookahead-alpha", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--distance-matrix", default=None,
                   help="JSON distance-matrix file (builtin 4-class matrix otherwise)")
    p.add_argument("--preset", choices=("baseline", "ranger", "gwdl", "dro", "ensemble"),
                   default=None,
                   help="experiment arm shorthand; explicit flags override its choices")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate one model or an ensemble")
    p.add_argument("models", nargs="+", help="model JSON files; several mean-softmax ensemble")
    p.add_argument("--dataset", required=True, help="manifest path or dataset directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--tta", action="store_true", help="average predictions over axis flips")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers across cases")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--loss", choices=LOSS_KINDS, default=None,
                   help="single loss kind (all kinds otherwise)")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

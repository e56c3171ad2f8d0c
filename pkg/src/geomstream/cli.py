"""Command-line surface: dataset generation, training, evaluation, symmetry
auditing, and checkpoint inspection.

Exit codes: 0 success, 1 config/format error, 2 I/O error, 3 numeric failure,
4 audit failure.  Config files are flat JSON; command-line flags override file
values; the GEOMF_SEED environment variable overrides both.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields as dc_fields

import numpy as np

from . import model as M
from . import nbody as N
from . import training as TR
from . import verify as V
from .tensor import NumericError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_AUDIT = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}", EXIT_IO)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}", EXIT_CONFIG)
    if not isinstance(obj, dict):
        raise CliError(f"config file {path} must hold a flat JSON object", EXIT_CONFIG)
    return obj


def _merged(args: argparse.Namespace, file_cfg: dict, keys: list[str]) -> dict:
    """File values first, then any flag the user actually passed."""
    merged = {}
    for key in keys:
        if key in file_cfg:
            merged[key] = file_cfg[key]
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            merged[key] = flag_val
    return merged


def _model_config(settings: dict) -> M.ModelConfig:
    allowed = {f.name for f in dc_fields(M.ModelConfig)}
    unknown = set(settings) - allowed
    if unknown:
        raise CliError(f"unknown model config fields: {sorted(unknown)}", EXIT_CONFIG)
    try:
        return M.ModelConfig(**settings)
    except M.ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG)


def _file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _default_threads() -> int:
    return os.cpu_count() or 1


MODEL_KEYS = ["layers", "width", "heads", "ffn_width", "kernels", "vocab",
              "symmetry", "seed", "dropout_embedding", "dropout_attention",
              "dropout_hidden", "droppath"]


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--layers", type=int, help="transformer blocks (default 4)")
    p.add_argument("--width", type=int, help="hidden width d (default 80)")
    p.add_argument("--heads", type=int, help="attention heads (default 8)")
    p.add_argument("--ffn-width", dest="ffn_width", type=int,
                   help="feed-forward width (default 80)")
    p.add_argument("--kernels", type=int, help="Gaussian basis kernels (default 64)")
    p.add_argument("--vocab", type=int, help="particle type vocabulary (default 2)")
    p.add_argument("--symmetry", choices=["se3", "e3"],
                   help="symmetry mode (default se3)")
    p.add_argument("--dropout-embedding", dest="dropout_embedding", type=float,
                   help="input dropout rate (default 0.0)")
    p.add_argument("--dropout-attention", dest="dropout_attention", type=float,
                   help="attention probability dropout (default 0.0)")
    p.add_argument("--dropout-hidden", dest="dropout_hidden", type=float,
                   help="hidden activation dropout (default 0.0)")
    p.add_argument("--droppath", type=float,
                   help="stochastic residual-branch drop rate (default 0.0)")


def cmd_gen_data(args) -> int:
    file_cfg = _load_config_file(args.config)
    sets = _merged(args, file_cfg, ["seed", "particles", "steps", "dt",
                                    "train_size", "valid_size", "test_size"])
    seed = TR.resolve_seed(int(sets.get("seed", 0)))
    n = int(sets.get("particles", 5))
    steps = int(sets.get("steps", N.STEPS))
    dt = float(sets.get("dt", N.DT))
    sizes = {"train": int(sets.get("train_size", N.DEFAULT_SPLIT_SIZES["train"])),
             "valid": int(sets.get("valid_size", N.DEFAULT_SPLIT_SIZES["valid"])),
             "test": int(sets.get("test_size", N.DEFAULT_SPLIT_SIZES["test"]))}
    try:
        N.generate_dataset(args.out, sizes, seed=seed, n=n, steps=steps,
                           dt=dt, workers=args.threads)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO)
    except N.SimulationError as exc:
        raise CliError(str(exc), EXIT_NUMERIC)
    for split in N.SPLITS:
        print(f"{split}: {sizes[split]} trajectories seed_base="
              f"{seed + N.SPLIT_OFFSETS[split]}")
    print(f"wrote {args.out} sha256/16={_file_hash(args.out)}")
    return EXIT_OK


def _load_splits(path: str) -> dict:
    try:
        _, splits = N.load_dataset(path)
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc}", EXIT_CONFIG)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    return splits


def _split_arrays(splits: dict, split: str):
    recs = splits.get(split, [])
    if not recs:
        raise CliError(f"dataset holds no {split!r} records", EXIT_CONFIG)
    return N.records_to_arrays(recs)


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_cfg = _model_config(_merged(args, file_cfg, MODEL_KEYS))
    sets = _merged(args, file_cfg, ["epochs", "lr", "batch", "patience", "seed"])
    seed = TR.resolve_seed(int(sets.get("seed", 0)))
    model_cfg.seed = seed

    splits = _load_splits(args.data)
    train_data = _split_arrays(splits, "train")
    valid_data = _split_arrays(splits, "valid")
    model = M.Model(model_cfg)
    try:
        result = TR.train(
            model, train_data, valid_data,
            epochs=int(sets.get("epochs", 2000)),
            lr=float(sets.get("lr", TR.DEFAULT_LR)),
            batch=int(sets.get("batch", TR.DEFAULT_BATCH)),
            patience=int(sets.get("patience", TR.DEFAULT_PATIENCE)),
            seed=seed,
            metrics_path=args.metrics,
            checkpoint_path=args.checkpoint,
            clip_norm=args.clip_norm,
        )
    except TR.TrainingError as exc:
        raise CliError(str(exc), EXIT_NUMERIC)
    except NumericError as exc:
        raise CliError(str(exc), EXIT_NUMERIC)
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO)
    print(f"epochs={result.epochs_run} best_epoch={result.best_epoch} "
          f"best_valid_mse={result.best_valid_mse:.6g} "
          f"stopped_early={result.stopped_early}")
    if args.eval_test:
        test = _split_arrays(splits, "test")
        mse = TR.evaluate(model, *test)
        print(f"test_mse={mse:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    splits = _load_splits(args.data)
    types, p0, v0, p1 = _split_arrays(splits, args.split)
    if args.baseline == "linear":
        horizon = N.DT * N.STEPS
        if args.horizon is not None:
            horizon = args.horizon
        mse = TR.linear_baseline(p0, v0, p1, horizon)
        print(f"baseline_mse={mse:.6g}")
        return EXIT_OK
    if not args.checkpoint:
        raise CliError("--checkpoint required unless --baseline is given",
                       EXIT_CONFIG)
    try:
        model = M.load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {args.checkpoint}: {exc}",
                       EXIT_CONFIG)
    except M.CheckpointError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    mse = TR.evaluate(model, types, p0, v0, p1)
    print(f"mse={mse:.6g}")
    return EXIT_OK


def cmd_check(args) -> int:
    file_cfg = _load_config_file(args.config)
    if args.checkpoint:
        try:
            model = M.load_checkpoint(args.checkpoint)
        except (OSError, M.CheckpointError) as exc:
            raise CliError(str(exc), EXIT_CONFIG)
    else:
        settings = _merged(args, file_cfg, MODEL_KEYS)
        if args.mode is not None:
            settings["symmetry"] = args.mode
        settings.setdefault("layers", 2)
        settings.setdefault("width", 16)
        settings.setdefault("ffn_width", 16)
        settings.setdefault("heads", 2)
        settings.setdefault("kernels", 8)
        model_cfg = _model_config(settings)
        seed = TR.resolve_seed(model_cfg.seed)
        model = M.Model(model_cfg).randomize(seed + 1)
    if args.mutate is not None and args.mutate not in V.MUTATIONS:
        raise CliError(f"unknown mutation {args.mutate!r}; choose from "
                       f"{', '.join(V.MUTATIONS)}", EXIT_CONFIG)
    seed = TR.resolve_seed(model.cfg.seed)
    report = V.run_checks(model, trials=args.trials, seed=seed,
                          mutation=args.mutate,
                          include_gradients=args.gradients)
    text = report.to_ndjson()
    if args.report:
        try:
            with open(args.report, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as exc:
            raise CliError(f"cannot write report {args.report}: {exc}", EXIT_IO)
    sys.stdout.write(text)
    return EXIT_OK if report.passed else EXIT_AUDIT


def cmd_inspect(args) -> int:
    try:
        with open(args.checkpoint, "rb") as fh:
            header = fh.readline()
        manifest = json.loads(header.decode("utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read {args.checkpoint}: {exc}", EXIT_IO)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CliError(f"not a checkpoint: {exc}", EXIT_CONFIG)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geomstream",
        description="Two-stream geometric transformer: data generation, "
                    "training, evaluation, and symmetry audits.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate a charged N-body trajectory "
                                        "dataset (train/valid/test splits in "
                                        "one file)")
    g.add_argument("--out", required=True, help="output dataset path")
    g.add_argument("--config", help="JSON config file (flags override)")
    g.add_argument("--seed", type=int, help="base seed (default 0)")
    g.add_argument("--particles", type=int, help="particles per system (default 5)")
    g.add_argument("--steps", type=int, help="integrator steps (default 1000)")
    g.add_argument("--dt", type=float, help="integrator time step (default 1e-3)")
    g.add_argument("--train-size", dest="train_size", type=int,
                   help="training trajectories (default 3000)")
    g.add_argument("--valid-size", dest="valid_size", type=int,
                   help="validation trajectories (default 2000)")
    g.add_argument("--test-size", dest="test_size", type=int,
                   help="test trajectories (default 2000)")
    g.add_argument("--threads", type=int, default=_default_threads(),
                   help="simulation workers; output is identical for any value "
                        "(default: available cores)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True, help="dataset file (train and "
                                                 "valid splits are used)")
    t.add_argument("--eval-test", action="store_true",
                   help="also print the final test-split MSE")
    t.add_argument("--config", help="JSON config file (flags override)")
    t.add_argument("--checkpoint", help="path for the best-validation checkpoint")
    t.add_argument("--metrics", help="path for the ndjson metrics log")
    t.add_argument("--epochs", type=int, help="maximum epochs (default 2000)")
    t.add_argument("--lr", type=float, help="Adam learning rate (default 3e-4)")
    t.add_argument("--batch", type=int, help="batch size (default 100)")
    t.add_argument("--patience", type=int,
                   help="early-stopping patience in epochs (default 200)")
    t.add_argument("--clip-norm", dest="clip_norm", type=float,
                   help="global gradient-norm clip (e.g. 5.0; default off)")
    t.add_argument("--seed", type=int, help="training seed (default 0)")
    t.add_argument("--threads", type=int, default=_default_threads(),
                   help="accepted for interface symmetry; training is "
                        "single-threaded and deterministic regardless")
    _add_model_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or the linear "
                                    "baseline) on a dataset split")
    e.add_argument("--data", required=True, help="dataset file")
    e.add_argument("--split", choices=list(N.SPLITS), default="test",
                   help="split to evaluate (default test)")
    e.add_argument("--checkpoint", help="checkpoint to evaluate")
    e.add_argument("--baseline", choices=["linear"],
                   help="evaluate p0 + v0*T instead of a model")
    e.add_argument("--horizon", type=float,
                   help="baseline time horizon T (default steps*dt = 1.0)")
    e.add_argument("--threads", type=int, default=_default_threads(),
                   help="accepted for interface symmetry; evaluation is "
                        "deterministic regardless")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("check", help="run randomized symmetry and gradient "
                                     "audits; exit 4 when any check fails")
    c.add_argument("--config", help="JSON config file (flags override)")
    c.add_argument("--checkpoint", help="audit a trained checkpoint instead of "
                                        "a random model")
    c.add_argument("--mode", choices=["se3", "e3"],
                   help="symmetry mode; e3 adds the reflection check")
    c.add_argument("--trials", type=int, default=100,
                   help="random trials per check (default 100)")
    c.add_argument("--seed", type=int, help="audit seed (default 0)")
    c.add_argument("--mutate", metavar="NAME",
                   help="install a documented defect first; the audit must "
                        f"then fail (one of: {', '.join(V.MUTATIONS)})")
    c.add_argument("--gradients", action="store_true",
                   help="also run the per-parameter finite-difference audit "
                        "(tiny models only; slow)")
    c.add_argument("--report", help="also write the ndjson report here")
    c.add_argument("--threads", type=int, default=_default_threads(),
                   help="accepted for interface symmetry; checks are "
                        "deterministic regardless")
    _add_model_flags(c)
    c.set_defaults(fn=cmd_check)

    i = sub.add_parser("inspect", help="print a checkpoint's manifest")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(fn=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except V.ModeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TR.TrainingError as exc:
        # reaches here only for pre-run problems (e.g. a bad GEOMF_SEED);
        # in-run numeric failures are mapped to EXIT_NUMERIC by the commands
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

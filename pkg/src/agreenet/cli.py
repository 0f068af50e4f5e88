"""Command-line entry points.

Every command takes a JSON config (``--config``) whose sections are::

    {
      "seed": 0,
      "data": "path/to/data.jsonl"            # or {"path": ..., "format": "csv"}
      "synth": {"n_samples": ..., ...},       # alternative to "data"
      "model": {"hidden": [64, 64], "variant": "distributional", ...},
      "loss": {"classifier_loss": "focal_ce", "agreement_loss": "ar", ...},
      "train": {"paradigm": "learn2agree", "epochs": 50, ...},
      "out": "runs/exp1",
      "repeat_seeds": [0, 1, 2],
      "axes": {"classifier_loss": ["focal_ce", "wkl"], ...}   # matrix only
    }

Values resolve as flags > file > defaults, and every report echoes the fully
resolved config.  A synth section without its own ``seed`` draws the data
seed from the run seed, so each run seed also gets its own dataset.

Exit codes: 0 success, 2 configuration/input error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dataset import AnnotationSet, DataValidationError, load_annotations
from .losses import LossConfig
from .metrics import NoOverlapError, annotator_vs_rest
from .model import ModelConfig, TwoStreamModel, grad_check
from .synth import CalibrationError, SynthSpec, generate, write_dataset
from .trainer import ConfigError, TrainConfig, evaluate, sub_rng, sub_seed, train

log = logging.getLogger("agreenet")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MATRIX_AXES = ("classifier_loss", "agreement_variant", "agreement_loss", "paradigm", "seed")
TOP_LEVEL_KEYS = {"seed", "data", "synth", "model", "loss", "train", "out", "repeat_seeds", "axes", "grad_check"}
MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"input_dim"}
LOSS_KEYS = {f.name for f in fields(LossConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"loss", "seed"}


class RuntimeFailure(RuntimeError):
    """A run that started but could not produce its result."""


# --- config resolution ---------------------------------------------------------


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")


def resolve(raw: dict, args: argparse.Namespace) -> dict:
    """Merge flags over the file over defaults; returns a plain, fully populated dict."""
    _check_keys("config", raw, TOP_LEVEL_KEYS)
    cfg = {k: v for k, v in raw.items()}
    for key in ("seed", "out"):
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    cfg.setdefault("seed", 0)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if getattr(args, "data", None):
        cfg["data"] = args.data
        cfg.pop("synth", None)

    model = dict(cfg.get("model", {}))
    _check_keys("model", model, MODEL_KEYS)
    loss = dict(cfg.get("loss", {}))
    _check_keys("loss", loss, LOSS_KEYS)
    tr = dict(cfg.get("train", {}))
    _check_keys("train", tr, TRAIN_KEYS)
    for flag in ("paradigm", "epochs"):
        v = getattr(args, flag, None)
        if v is not None:
            tr[flag] = v
    # single-stream paradigms have no agreement stream unless one is asked for explicitly
    if tr.get("paradigm", "learn2agree") != "learn2agree" and "agreement_loss" not in loss:
        loss["agreement_loss"] = None

    try:
        loss_cfg = LossConfig(**loss)
        model_cfg = ModelConfig(input_dim=1, **model)
        train_cfg = TrainConfig(loss=loss_cfg, seed=cfg["seed"], **tr)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg["model"] = {k: v for k, v in model_cfg.to_dict().items() if k != "input_dim"}
    cfg["loss"] = loss_cfg.to_dict()
    cfg["train"] = {k: v for k, v in train_cfg.to_dict().items() if k not in ("loss", "seed")}
    if isinstance(cfg["train"]["eval_split"], tuple):
        cfg["train"]["eval_split"] = list(cfg["train"]["eval_split"])
    if "repeat_seeds" in cfg:
        seeds = cfg["repeat_seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("repeat_seeds must be a non-empty list of non-negative integers")
    return cfg


def _require_data_source(cfg: dict) -> None:
    if ("data" in cfg) == ("synth" in cfg):
        raise ConfigError("exactly one of 'data' (a file) or 'synth' (an inline spec) is required")


def _synth_spec(section: dict, run_seed: int) -> SynthSpec:
    section = dict(section)
    section.setdefault("seed", sub_seed(run_seed, "data"))
    try:
        return SynthSpec.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None


def load_data(cfg: dict, seed: int) -> AnnotationSet:
    _require_data_source(cfg)
    if "synth" in cfg:
        try:
            return generate(_synth_spec(cfg["synth"], seed)).data
        except CalibrationError as exc:
            raise ConfigError(f"synth: {exc}") from None
    src = cfg["data"]
    path, fmt = (src, None) if isinstance(src, str) else (src.get("path"), src.get("format"))
    try:
        return load_annotations(path, fmt)
    except FileNotFoundError:
        raise ConfigError(f"data file not found: {path}") from None
    except DataValidationError as exc:
        raise ConfigError(str(exc)) from None


def build(cfg: dict, seed: int, data: AnnotationSet):
    model_cfg = ModelConfig(input_dim=data.dim, **cfg["model"])
    loss_cfg = LossConfig(**cfg["loss"])
    train_cfg = TrainConfig(loss=loss_cfg, seed=seed, **cfg["train"])
    return TwoStreamModel(model_cfg, sub_rng(seed, "init")), train_cfg


def _echo(cfg: dict, seed: int) -> dict:
    echo = {k: v for k, v in cfg.items() if k not in ("out",)}
    echo["seed"] = seed
    if "synth" in echo:
        echo["synth"] = _synth_spec(echo["synth"], seed).to_dict()
    return echo


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _out_dir(cfg: dict, default: str) -> Path:
    out = Path(cfg.get("out") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- one training run --------------------------------------------------------------


def run_training(cfg: dict, seed: int, data: AnnotationSet | None = None):
    """Train and evaluate one seed; returns ``(model, history, report_dict)``."""
    if data is None:
        data = load_data(cfg, seed)
    model, train_cfg = build(cfg, seed, data)
    model, history = train(model, data, train_cfg)
    eval_set = data.subset(history.eval_index) if history.eval_index.size else data
    l2a = train_cfg.paradigm == "learn2agree"
    try:
        rep = evaluate(model, eval_set, train_cfg.threshold, use_regularized=l2a)
    except NoOverlapError as exc:
        raise RuntimeFailure(f"agreement ratio undefined on the evaluation split: {exc}") from None
    report = {
        "config": _echo(cfg, seed),
        "seed": seed,
        "evaluation": {**rep.to_dict(), "excluded_pairs": rep.excluded_pairs,
                       "split": "held-out" if history.eval_index.size else "training"},
        "n_train": int(history.train_index.size),
        "final_epoch": history.rows[-1],
    }
    return model, history, report


# --- commands ----------------------------------------------------------------------


def cmd_synth(args, raw: dict) -> int:
    section = raw.get("synth", raw)
    section = {k: v for k, v in section.items() if k != "out"}
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None
    try:
        result = generate(spec)
    except CalibrationError as exc:
        raise ConfigError(f"synth: {exc}") from None
    out = Path(args.out or raw.get("out") or "synth_out")
    paths = write_dataset(result, out)
    side = result.sidecar()
    log.info("wrote %s (%d samples, %d annotators)", paths["dataset"], spec.n_samples, len(spec.annotators) + 1)
    _emit(args, {"files": {k: str(v) for k, v in paths.items()}, "kappa_vs_reference": side["kappa_vs_reference"],
                 "seed": spec.seed})
    return EXIT_OK


def cmd_train(args, raw: dict) -> int:
    cfg = resolve(raw, args)
    _require_data_source(cfg)
    seeds = cfg.get("repeat_seeds", [cfg["seed"]])
    out = _out_dir(cfg, "train_out")
    summary = {}
    for seed in seeds:
        target = out if len(seeds) == 1 else out / f"seed_{seed}"
        target.mkdir(parents=True, exist_ok=True)
        model, history, report = run_training(cfg, seed)
        model.save(target / "checkpoint.json", extra={"seed": seed})
        history.write_csv(target / "history.csv")
        (target / "report.json").write_text(_dump(report), encoding="utf-8")
        summary[str(seed)] = report["evaluation"]["delta"]
        log.info("seed %d: delta = %.4f -> %s", seed, report["evaluation"]["delta"], target)
    _emit(args, {"delta": summary, "out": str(out)})
    return EXIT_OK


def cmd_evaluate(args, raw: dict) -> int:
    cfg = resolve(raw, args)
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint")
    try:
        model = TwoStreamModel.load(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    data = load_data(cfg, cfg["seed"])
    if data.dim != model.config.input_dim:
        raise ConfigError(f"checkpoint expects d={model.config.input_dim}, data has d={data.dim}")
    threshold = cfg["train"]["threshold"]
    try:
        rep = evaluate(model, data, threshold, use_regularized=not args.unregularized)
    except NoOverlapError as exc:
        raise RuntimeFailure(str(exc)) from None
    report = {"config": _echo(cfg, cfg["seed"]), "seed": cfg["seed"], "checkpoint": str(args.checkpoint),
              "use_regularized": not args.unregularized,
              "evaluation": {**rep.to_dict(), "excluded_pairs": rep.excluded_pairs}}
    out = _out_dir(cfg, "eval_out")
    (out / "report.json").write_text(_dump(report), encoding="utf-8")
    _emit(args, {"delta": rep.delta, "out": str(out)})
    return EXIT_OK


def _cell_config(cfg: dict, cell: dict) -> dict:
    c = json.loads(json.dumps(cfg))
    for axis, value in cell.items():
        if axis == "classifier_loss":
            c["loss"]["classifier_loss"] = value
        elif axis == "agreement_loss":
            c["loss"]["agreement_loss"] = value
        elif axis == "agreement_variant":
            c["model"]["variant"] = value
        elif axis == "paradigm":
            c["train"]["paradigm"] = value
            if value != "learn2agree" and "agreement_loss" not in cell:
                c["loss"]["agreement_loss"] = None
    return c


def _matrix_job(job):
    cfg, cell, seed = job
    _, _, report = run_training(cfg, seed)
    return cell, seed, report["evaluation"]["delta"]


def matrix_cells(cfg: dict):
    axes = cfg.get("axes")
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("matrix needs a non-empty 'axes' object")
    _check_keys("axes", axes, set(MATRIX_AXES))
    for name, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axis '{name}' is empty")
    if "seed" in axes:
        seeds = axes["seed"]
    else:
        seeds = cfg.get("repeat_seeds", [cfg["seed"]])
    names = sorted(a for a in axes if a != "seed")
    combos = sorted(itertools.product(*(axes[a] for a in names)), key=lambda t: tuple(map(str, t)))
    cells = [dict(zip(names, combo)) for combo in combos]
    for cell in cells:
        c = _cell_config(cfg, cell)
        try:
            TrainConfig(loss=LossConfig(**c["loss"]), **c["train"])
            ModelConfig(input_dim=1, **c["model"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"matrix cell {cell}: {exc}") from None
    return names, cells, sorted(seeds)


def cmd_matrix(args, raw: dict) -> int:
    cfg = resolve(raw, args)
    _require_data_source(cfg)
    names, cells, seeds = matrix_cells(cfg)
    jobs = [(_cell_config(cfg, cell), cell, seed) for cell in cells for seed in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_matrix_job, jobs))
    else:
        results = [_matrix_job(j) for j in jobs]
    rows = [{**cell, "seed": seed, "delta": delta} for cell, seed, delta in results]
    aggregates = []
    for cell in cells:
        vals = np.array([r["delta"] for r in rows if all(r[a] == cell[a] for a in names)])
        aggregates.append({**cell, "n_seeds": int(vals.size), "delta_mean": float(vals.mean()),
                           "delta_std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0})
    out = _out_dir(cfg, "matrix_out")
    _write_csv(out / "matrix_runs.csv", names + ["seed", "delta"], rows)
    _write_csv(out / "matrix_aggregate.csv", names + ["n_seeds", "delta_mean", "delta_std"], aggregates)
    doc = {"config": _echo(cfg, cfg["seed"]), "axes": names, "seeds": seeds, "runs": rows, "aggregate": aggregates}
    (out / "matrix.json").write_text(_dump(doc), encoding="utf-8")
    _emit(args, {"cells": len(cells), "runs": len(rows), "out": str(out)})
    return EXIT_OK


def cmd_annotator_baseline(args, raw: dict) -> int:
    cfg = resolve(raw, args)
    data = load_data(cfg, cfg["seed"])
    if data.n_annotators < 3:
        raise ConfigError(
            f"annotator-baseline needs J >= 3 (got {data.n_annotators}): with two annotators the "
            "remaining pool has no pair, so the agreement-ratio denominator is undefined"
        )
    table = {}
    for j, name in enumerate(data.annotator_ids):
        try:
            rep = annotator_vs_rest(data, j)
        except NoOverlapError as exc:
            raise RuntimeFailure(f"annotator {name}: {exc}") from None
        table[name] = {"delta": rep.delta, "n_eval": rep.n_eval}
    out = _out_dir(cfg, "baseline_out")
    doc = {"config": _echo(cfg, cfg["seed"]), "seed": cfg["seed"], "annotators": table}
    (out / "annotator_baseline.json").write_text(_dump(doc), encoding="utf-8")
    _emit(args, {k: v["delta"] for k, v in table.items()})
    return EXIT_OK


def cmd_grad_check(args, raw: dict) -> int:
    raw = dict(raw)
    gc = dict(raw.pop("grad_check", {}))
    _check_keys("grad_check", gc, {"input_dim", "batch_size", "n_annotators", "tolerance"})
    raw.setdefault("model", {"hidden": [6], "n_bins": 4, "indicator_hidden": 4})
    cfg = resolve(raw, args)
    seed = cfg["seed"]
    d, b, j = int(gc.get("input_dim", 3)), int(gc.get("batch_size", 6)), int(gc.get("n_annotators", 3))
    if not (1 <= b <= 8 and d >= 1 and j >= 1):
        raise ConfigError("grad_check needs 1 <= batch_size <= 8, input_dim >= 1, n_annotators >= 1")
    loss_cfg = LossConfig(**cfg["loss"])
    tol = float(gc.get("tolerance", 1e-3 if loss_cfg.classifier_loss == "wkl" else 1e-4))
    model = TwoStreamModel(ModelConfig(input_dim=d, **cfg["model"]), sub_rng(seed, "init"))
    rng = sub_rng(seed, "data")
    x = rng.standard_normal((b, d))
    labels = rng.integers(0, 2, (b, j))
    labels[:, 0] = np.arange(b) % 2
    rep = grad_check(model, x, labels, loss_cfg, tolerance=tol, paradigm=cfg["train"]["paradigm"])
    doc = {"config": _echo(cfg, seed), "seed": seed, "tolerance": tol, "passed": rep.passed,
           "n_params": model.n_params, "errors": rep.errors, "failed_blocks": rep.failed_blocks}
    if cfg.get("out"):
        out = _out_dir(cfg, "")
        (out / "grad_check.json").write_text(_dump(doc), encoding="utf-8")
    _emit(args, {"passed": rep.passed, "max_error": rep.max_error, "failed_blocks": rep.failed_blocks})
    if not rep.passed:
        log.error("gradient check failed on %s", rep.failed_blocks)
        return EXIT_RUNTIME
    return EXIT_OK


# --- plumbing ----------------------------------------------------------------------


def _write_csv(path: Path, columns: list, rows: list) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: ("" if r[c] is None else repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns})
    path.write_text(buf.getvalue(), encoding="utf-8")


def _emit(args, payload) -> None:
    if not args.quiet:
        sys.stdout.write(_dump(payload))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "matrix": cmd_matrix,
    "annotator-baseline": cmd_annotator_baseline,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors; no stdout summary")

    parser = argparse.ArgumentParser(prog="agreenet", description="Agreement-aware multi-annotator learning.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic multi-annotator dataset")
    for name, helptext in (("train", "train one model per seed"), ("matrix", "run an ablation grid")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="dataset file (replaces data/synth from the config)")
        p.add_argument("--paradigm", choices=["majority_voting", "learn_from_all", "learn2agree"])
        p.add_argument("--epochs", type=int)
        if name == "matrix":
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p = sub.add_parser("evaluate", parents=[common], help="agreement ratio of a saved model")
    p.add_argument("--checkpoint", help="checkpoint written by train")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--unregularized", action="store_true", help="threshold p_hat instead of p_tilde")
    p = sub.add_parser("annotator-baseline", parents=[common], help="each annotator against the rest")
    p.add_argument("--data", help="dataset file")
    sub.add_parser("grad-check", parents=[common], help="finite-difference check of the backward pass")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        raw = _read_config(args.config)
        return COMMANDS[args.command](args, raw)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except RuntimeFailure as exc:
        log.error("runtime error: %s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else escaped a started run
        log.error("runtime error: %s: %s", type(exc).__name__, exc, exc_info=not args.quiet)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

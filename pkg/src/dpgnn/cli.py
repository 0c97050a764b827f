"""Command-line entry point: ``dpgnn {inspect,cv,grid,ablate,export}``.

Failures exit non-zero and print exactly one JSON object on stderr, e.g.
``{"error": "ConfigError", "field": "lr", "message": "must be > 0"}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import plotting, reporting
from .autodiff import CheckpointError
from .config import ConfigError, RunConfig, load_config_file, resolve
from .graph_data import DatasetFormatError, dataset_statistics, parse_tu_dataset, stratified_kfold
from .model import DpGnnModel, export_embeddings
from .training import ablation_study, grid_search, summarize_folds, train_fold

log = logging.getLogger("dpgnn")


GRID_KEYS = ("grid_hidden", "grid_lr", "grid_first_tf", "grid_lambdas")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag -> RunConfig field
OVERRIDES = {
    "dataset": str, "name": str, "seed": int, "out": str, "workers": int, "precision": int,
    "folds": int, "hidden": int, "lr": float, "epochs": int, "batch": int, "layers": int,
    "first_tf": str, "lambda2": float, "lambda3": float, "lambda4": float, "lambda5": float,
}


def _add_run_flags(p):
    p.add_argument("--config", help="flat YAML config file; flags override its values")
    for key, typ in OVERRIDES.items():
        flag = "--" + key.replace("_", "-")
        kw = {"type": typ, "default": None, "dest": key}
        if key == "precision":
            kw["choices"] = (32, 64)
        p.add_argument(flag, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", help="print dataset statistics")
    _add_run_flags(p)

    p = sub.add_parser("cv", help="10-fold cross-validation of one configuration")
    _add_run_flags(p)
    p.add_argument("--no-checkpoints", action="store_true", help="skip saving per-fold models")

    p = sub.add_parser("grid", help="cross-validate every point of a hyperparameter grid")
    _add_run_flags(p)
    p.add_argument("--grid-hidden", type=int, nargs="+", dest="grid_hidden")
    p.add_argument("--grid-lr", type=float, nargs="+", dest="grid_lr")
    p.add_argument("--grid-first-tf", nargs="+", dest="grid_first_tf")
    p.add_argument("--grid-lambdas", nargs="+", dest="grid_lambdas", metavar="L2,L3,L4,L5",
                   help="comma-separated weight vectors, e.g. 0,0,0,0 1,0,0,1")

    p = sub.add_parser("ablate", help="single-task probes plus their helpful combination")
    _add_run_flags(p)

    p = sub.add_parser("export", help="write graph representations from a checkpoint")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", help="embeddings CSV (default: next to the checkpoint)")
    return parser


def _resolve(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in OVERRIDES}
    for key in ("grid_hidden", "grid_lr", "grid_first_tf"):
        if getattr(args, key, None):
            overrides[key] = getattr(args, key)
    if getattr(args, "grid_lambdas", None):
        try:
            overrides["grid_lambdas"] = [[float(x) for x in s.split(",")] for s in args.grid_lambdas]
        except ValueError:
            raise ConfigError("grid_lambdas", "expected comma-separated numbers") from None
    return resolve(file_values, overrides)


def _echo(cfg: RunConfig) -> dict:
    return {k: v for k, v in cfg.to_dict().items() if k not in GRID_KEYS}


def _run_dir(cfg: RunConfig, kind: str) -> str:
    grid_keys = () if kind == "grid" else GRID_KEYS
    path = os.path.join(cfg.out, f"{kind}-{cfg.name}-{cfg.digest(*grid_keys)}")
    os.makedirs(path, exist_ok=True)
    return path


def cmd_inspect(cfg: RunConfig, out=None):
    out = out or sys.stdout
    ds = parse_tu_dataset(cfg.dataset, cfg.name)
    st = dataset_statistics(ds)
    print("dataset #G C_G C_N AvgN AvgE MaxNeighb", file=out)
    print(f"{st.name} {st.row()}", file=out)
    return st


def _fold_job(args):
    ds, fold, tc, ckpt, meta = args
    model, recs = train_fold(ds, fold, tc)
    log.info("fold %d: final train %.4f, best val %.4f", fold.fold_index,
             recs[-1].train_accuracy, max(r.validation_accuracy for r in recs))
    if ckpt:
        model.save(ckpt, {**meta, "fold_index": fold.fold_index,
                          "validation_ids": list(fold.validation_ids)})
    return recs


def _cross_validate(ds, cfg: RunConfig, run_dir=None, save_checkpoints=False):
    tc = cfg.train_config()
    folds = stratified_kfold(ds, cfg.folds, cfg.seed)
    meta = {"run_config": _echo(cfg)}
    jobs = [(ds, f, tc, os.path.join(run_dir, f"fold{f.fold_index}.npz")
             if save_checkpoints and run_dir else None, meta) for f in folds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            records = list(pool.map(_fold_job, jobs))
    else:
        records = [_fold_job(j) for j in jobs]
    return summarize_folds(records, tc.to_dict())


def cmd_cv(cfg: RunConfig, out=None, save_checkpoints=True):
    out = out or sys.stdout
    ds = parse_tu_dataset(cfg.dataset, cfg.name)
    run_dir = _run_dir(cfg, "cv")
    echo = _echo(cfg)
    result = _cross_validate(ds, cfg, run_dir, save_checkpoints)
    reporting.write_curves(os.path.join(run_dir, "curves.csv"), result, echo)
    reporting.write_summary(os.path.join(run_dir, "summary.json"), result, echo)
    plotting.plot_training_curves(result, os.path.join(run_dir, "curves.png"),
                                  title=f"{cfg.name} {cfg.train_config().weights.label()}",
                                  config=echo)
    label = "ExpGNN-equivalent baseline" if cfg.train_config().weights.is_baseline else "DP-GNN"
    print(f"{cfg.name} {label}: {reporting.format_accuracy(result)}", file=out)
    print(f"outputs: {run_dir}", file=out)
    return result, run_dir


def cmd_grid(cfg: RunConfig, out=None):
    out = out or sys.stdout
    ds = parse_tu_dataset(cfg.dataset, cfg.name)
    run_dir = _run_dir(cfg, "grid")
    entries = grid_search(ds, cfg.grid(), cfg.train_config(), k=cfg.folds, workers=cfg.workers,
                          store=os.path.join(run_dir, "points"))
    reporting.write_ranking(os.path.join(run_dir, "ranking.csv"), entries, cfg.to_dict())
    for rank, e in enumerate(entries[:10], 1):
        acc = f"{e.accuracy:.4f}" if e.result else f"failed ({e.error})"
        c = e.config
        print(f"{rank:>3} {acc} hidden={c.hidden_dim} lr={c.initial_lr:g} "
              f"first_tf={c.first_layer_transform} lambda={c.weights.label()}", file=out)
    print(f"outputs: {run_dir}", file=out)
    return entries, run_dir


def cmd_ablate(cfg: RunConfig, out=None, runner=None):
    out = out or sys.stdout
    ds = parse_tu_dataset(cfg.dataset, cfg.name)
    run_dir = _run_dir(cfg, "ablate")
    report = ablation_study(ds, cfg.train_config(), k=cfg.folds, workers=cfg.workers,
                            runner=runner)
    echo = _echo(cfg)
    text = reporting.write_ablation(os.path.join(run_dir, "ablation.txt"),
                                    os.path.join(run_dir, "ablation.csv"), report, echo, cfg.name)
    plotting.plot_ablation(report, os.path.join(run_dir, "ablation.png"), title=cfg.name,
                           config=echo)
    print(text, file=out)
    print(f"outputs: {run_dir}", file=out)
    return report, run_dir


def cmd_export(cfg: RunConfig, checkpoint, output=None, explicit=(), out=None):
    out = out or sys.stdout
    model, meta = DpGnnModel.load(checkpoint)
    saved = meta.get("run_config", {})
    root = cfg.dataset if "dataset" in explicit or "dataset" not in saved else saved["dataset"]
    name = cfg.name if "name" in explicit or "name" not in saved else saved["name"]
    ds = parse_tu_dataset(root, name)
    if output is None:
        output = os.path.splitext(checkpoint)[0] + ".embeddings.csv"
    echo = {"checkpoint": os.path.basename(checkpoint), "dataset": name, **meta}
    echo.pop("validation_ids", None)
    n = export_embeddings(model, ds, output, meta.get("validation_ids"),
                          reporting.config_comment(echo))
    print(f"wrote {n} rows to {output}", file=out)
    return output


def _fail(kind, message, **extra):
    payload = {"error": kind, "message": str(message).replace("\n", " "), **extra}
    print(json.dumps(payload), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        cfg = _resolve(args)
        if args.command == "inspect":
            cmd_inspect(cfg)
        elif args.command == "cv":
            cmd_cv(cfg, save_checkpoints=not args.no_checkpoints)
        elif args.command == "grid":
            cmd_grid(cfg)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        elif args.command == "export":
            explicit = {k for k in ("dataset", "name") if getattr(args, k) is not None}
            cmd_export(cfg, args.checkpoint, args.output, explicit)
    except UsageError as exc:
        _fail("UsageError", exc)
        return 2
    except ConfigError as exc:
        _fail("ConfigError", exc.message, field=exc.field)
        return 2
    except DatasetFormatError as exc:
        _fail("DatasetFormatError", exc.message, file=exc.path, line=exc.line)
        return 1
    except CheckpointError as exc:
        _fail("CheckpointError", exc)
        return 1
    except KeyboardInterrupt:
        _fail("Interrupted", "interrupted")
        return 130
    except Exception as exc:
        _fail(type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Writers for curves, summaries, rankings and ablation tables.

Every file starts with (or, for JSON, contains) the fully resolved run
configuration so a result can be reproduced from the file alone. Delimited
files carry it on a leading ``#`` comment line.
"""

from __future__ import annotations

import csv
import json

from .training import LOSS_KEYS, AblationReport, CvResult, GridEntry

CURVE_COLUMNS = ["fold", "epoch", "lr", "train_acc", "val_acc", *LOSS_KEYS]


def config_comment(config: dict) -> str:
    return "config=" + json.dumps(config, sort_keys=True)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_curves(path, result: CvResult, config: dict) -> int:
    """One row per (fold, epoch); returns the number of data rows."""
    n = 0
    with open(path, "w", newline="") as fh:
        fh.write(f"# {config_comment(config)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for fold, recs in enumerate(result.fold_records):
            for r in recs:
                w.writerow([fold, r.epoch, _fmt(r.lr), _fmt(r.train_accuracy),
                            _fmt(r.validation_accuracy)] + [_fmt(r.losses[k]) for k in LOSS_KEYS])
                n += 1
    return n


def read_curves(path) -> list[dict]:
    with open(path) as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return list(rows)


def write_summary(path, result: CvResult, config: dict) -> dict:
    summary = result.summary()
    summary["run_config"] = config
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def format_accuracy(result: CvResult) -> str:
    return (f"{100 * result.best_mean_validation_accuracy:.1f} ± {100 * result.std:.1f} "
            f"(epoch {result.selected_epoch + 1} of {len(result.mean_validation_accuracy)})")


def write_ranking(path, entries: list[GridEntry], config: dict) -> None:
    keys = list(entries[0].config.to_dict()) if entries else []
    with open(path, "w", newline="") as fh:
        fh.write(f"# {config_comment(config)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "accuracy", "std", "selected_epoch", "status", "digest", *keys])
        for rank, e in enumerate(entries, 1):
            cfg = e.config.to_dict()
            if e.result is not None:
                head = [rank, _fmt(e.result.best_mean_validation_accuracy), _fmt(e.result.std),
                        e.result.selected_epoch, "ok"]
            else:
                head = [rank, "", "", "", f"failed: {e.error}"]
            w.writerow(head + [e.config.digest()] + [cfg[k] for k in keys])


def format_ablation(report: AblationReport, dataset: str = "") -> str:
    """Table-style text: one lambda vector and accuracy per line, baseline first."""
    lines = [f"{'lambda':<20}{dataset or 'accuracy':>10}"]
    for r in report.rows[:-1]:
        lines.append(f"{r.weights.label():<20}{r.accuracy:>10.4f}")
    c = report.combined
    lines.append(f"{'combined lambda':<20}{c.weights.label():>10}")
    lines.append(f"{'accuracy':<20}{c.accuracy:>10.4f}")
    return "\n".join(lines)


def write_ablation(path_txt, path_csv, report: AblationReport, config: dict,
                   dataset: str = "") -> str:
    text = format_ablation(report, dataset)
    with open(path_txt, "w") as fh:
        fh.write(f"# {config_comment(config)}\n")
        fh.write(text + "\n")
    with open(path_csv, "w", newline="") as fh:
        fh.write(f"# {config_comment(config)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "lambda", "lambda2", "lambda3", "lambda4", "lambda5", "accuracy"])
        for r in report.rows:
            w.writerow([r.label, r.weights.label(), *(f"{v:g}" for v in r.weights.as_tuple()),
                        _fmt(r.accuracy)])
    return text

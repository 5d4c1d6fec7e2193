"""CSV and JSON report writers.

Per-epoch CSV columns, in order::

    epoch, ce, bce, mse, omega, total, unlabelled_acc, config_digest

``unlabelled_acc`` is ``nan`` for stages without a clustering head. Sweep
CSV columns are ``k, unlabelled_acc, base_checkpoint, config_digest`` and
the incremental CSV has ``old_acc, new_acc, all_acc, n_old_samples,
n_new_samples, config_digest``. Floats are written with ``repr`` so values
round-trip exactly and reruns produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict

EPOCH_COLUMNS = ("epoch", "ce", "bce", "mse", "omega", "total", "unlabelled_acc", "config_digest")
SWEEP_COLUMNS = ("k", "unlabelled_acc", "base_checkpoint", "config_digest")
INCREMENTAL_COLUMNS = ("old_acc", "new_acc", "all_acc", "n_old_samples", "n_new_samples",
                       "config_digest")


def _cell(value):
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def write_epoch_csv(path, report):
    rows = [{**asdict(e), "config_digest": report.config_digest} for e in report.epochs]
    _write_rows(path, EPOCH_COLUMNS, rows)


def read_epoch_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {k: float(v) for k, v in row.items() if k not in ("epoch", "config_digest")}
        parsed["epoch"] = int(row["epoch"])
        parsed["config_digest"] = row["config_digest"]
        out.append(parsed)
    return out


def write_sweep_csv(path, rows, config_digest: str):
    _write_rows(path, SWEEP_COLUMNS, [{**asdict(r), "config_digest": config_digest} for r in rows])


def write_incremental_csv(path, report, config_digest: str):
    _write_rows(path, INCREMENTAL_COLUMNS, [{**asdict(report), "config_digest": config_digest}])


def _clean(obj):
    # JSON has no NaN; write null instead
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_summary(report, extra=None) -> dict:
    """Final metrics of a stage, tied to its config digest and seed."""
    last = asdict(report.epochs[-1]) if report.epochs else {}
    out = {
        "stage": report.stage,
        "seed": report.seed,
        "config_digest": report.config_digest,
        "epochs": len(report.epochs),
        "final": last,
        "checkpoint": report.checkpoint_path,
    }
    summary_extra = {k: v for k, v in report.extra.items() if not isinstance(v, list)}
    summary_extra.update(extra or {})
    out["metrics"] = summary_extra
    return out

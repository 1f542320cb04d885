"""Result export: results.csv, results.json and subspace.csv."""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

from .. import __version__
from .runner import TaskRecord, UnlearnRun

CSV_HEADER = ("strategy", "lambda", "task_index", "class_id", "retain_acc", "forget_acc_cum",
              "forget_acc_task", "free_dims", "effective_rank", "wall_ms")
VERSION = f"ortho_unlearn {__version__}"


def _num(x):
    return repr(float(x))


def _csv_rows(runs):
    for run in runs:
        for r in run.records:
            yield (run.strategy, _num(run.lam), r.task_index, r.class_id, _num(r.retain_acc),
                   _num(r.forget_acc_cum), _num(r.forget_acc_task), r.free_dims, r.effective_rank,
                   _num(r.wall_ms))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _run_dict(run: UnlearnRun):
    d = dataclasses.asdict(run)
    d["lam"] = float(run.lam)
    return d


def emit_results(runs, output_dir, cfg=None):
    """Write the three result files into ``output_dir``; returns their paths.

    The CSV holds one row per task per (strategy, lambda); the baseline
    (k = 0) row lives in the JSON and in subspace.csv.
    """
    if not runs:
        raise ValueError("no runs to emit")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("results.csv", "results.json", "subspace.csv")}

    _write_csv(paths["results.csv"], CSV_HEADER, _csv_rows(runs))
    sub = ((run.strategy, _num(run.lam), r.task_index, r.free_dims)
           for run in runs for r in [run.baseline] + run.records)
    _write_csv(paths["subspace.csv"], ("strategy", "lambda", "k", "free_dims"), sub)

    doc = {
        "version": VERSION,
        "config": cfg.as_dict() if cfg is not None else None,
        "runs": [_run_dict(r) for r in runs],
    }
    paths["results.json"].write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return paths


def load_results(path):
    """Parse results.json back into (version, config dict, list of UnlearnRun)."""
    doc = json.loads(Path(path).read_text())
    runs = []
    for d in doc["runs"]:
        d = dict(d)
        d["baseline"] = TaskRecord(**d["baseline"])
        d["records"] = [TaskRecord(**r) for r in d["records"]]
        runs.append(UnlearnRun(**d))
    return doc["version"], doc["config"], runs

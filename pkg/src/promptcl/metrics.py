"""Continual-learning metrics and report emission.

The accuracy matrix a[t][j] holds test accuracy on task j measured after
training task t (lower-triangular). Final average accuracy is the mean of
the last row; final forgetting is the mean, over non-final tasks, of the
best earlier accuracy minus the final one.
"""

import csv
import json
import os

import numpy as np


class MetricError(ValueError):
    pass


class AccuracyMatrix:
    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise MetricError("num_tasks must be >= 1")
        self.num_tasks = num_tasks
        self.a = np.full((num_tasks, num_tasks), np.nan)

    def record(self, after_task: int, on_task: int, acc: float) -> None:
        if on_task > after_task:
            raise MetricError(f"a[{after_task}][{on_task}] is upper-triangular")
        if not 0.0 <= acc <= 1.0:
            raise MetricError(f"accuracy {acc} outside [0, 1]")
        self.a[after_task, on_task] = float(acc)

    def row(self, t: int) -> np.ndarray:
        return self.a[t, :t + 1]


def faa(matrix: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks measured after the final task."""
    last = matrix.row(matrix.num_tasks - 1)
    if np.isnan(last).any():
        raise MetricError("final accuracy row is incomplete")
    return float(last.mean())


def final_forgetting(matrix: AccuracyMatrix) -> float:
    """Mean over tasks j < T of max_{t<T} a[t][j] - a[T][j]."""
    T = matrix.num_tasks
    if T == 1:
        raise MetricError("forgetting is undefined for a single task")
    tri = matrix.a[np.tril_indices(T)]
    if np.isnan(tri).any():
        raise MetricError("accuracy matrix is incomplete")
    # drops are clamped at 0 so improving tasks don't report negative forgetting
    drops = [max(0.0, matrix.a[j:T - 1, j].max() - matrix.a[T - 1, j])
             for j in range(T - 1)]
    return float(np.mean(drops))


def retrieval_confusion(owner_of, selections) -> np.ndarray:
    """Bucket selected classes by owning task.

    ``owner_of``: class id -> task index. ``selections``: list over query
    tasks i of the class ids chosen for task i's test queries. Returns
    C[i][j] = fraction of task-i queries whose chosen class belongs to task j.
    """
    t = len(selections)
    C = np.zeros((t, t))
    for i, chosen in enumerate(selections):
        if len(chosen) == 0:
            raise MetricError(f"no selections recorded for task {i}")
        for cid in chosen:
            C[i, owner_of[cid]] += 1.0
        C[i] /= len(chosen)
    return C


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def matrix_rows(matrix: AccuracyMatrix):
    rows = []
    for t in range(matrix.num_tasks):
        row = [t]
        for j in range(matrix.num_tasks):
            row.append(float(matrix.a[t, j]) if j <= t else "")
        rows.append(row)
    return rows


def read_matrix_csv(path) -> AccuracyMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    out = AccuracyMatrix(len(rows))
    for row in rows:
        t = int(row[0])
        for j, cell in enumerate(row[1:]):
            if cell != "":
                out.record(t, j, float(cell))
    return out


def report(out_dir, per_seed, confusions=None, extras=None):
    """Write per-seed accuracy matrices, confusion CSVs, and a JSON summary.

    ``per_seed``: dict seed -> AccuracyMatrix. ``confusions``: optional dict
    seed -> (owner array unused) confusion matrix. Returns written paths.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise MetricError(f"cannot create output dir {out_dir}: {exc}") from exc
    paths = []
    faas, ffs = {}, {}
    for seed in sorted(per_seed):
        matrix = per_seed[seed]
        header = ["after_task"] + [f"task_{j}" for j in range(matrix.num_tasks)]
        path = os.path.join(out_dir, f"accuracy_seed{seed}.csv")
        _write_csv(path, header, matrix_rows(matrix))
        paths.append(path)
        faas[seed] = faa(matrix)
        if matrix.num_tasks > 1:
            ffs[seed] = final_forgetting(matrix)
    if confusions:
        for seed in sorted(confusions):
            C = confusions[seed]
            header = ["query_task"] + [f"task_{j}" for j in range(C.shape[1])]
            rows = [[i] + [float(v) for v in C[i]] for i in range(C.shape[0])]
            path = os.path.join(out_dir, f"confusion_seed{seed}.csv")
            _write_csv(path, header, rows)
            paths.append(path)
    fvals = [faas[s] for s in sorted(faas)]
    summary = {
        "seeds": sorted(per_seed),
        "faa_per_seed": {str(s): faas[s] for s in sorted(faas)},
        "faa_mean": float(np.mean(fvals)),
        "faa_std": float(np.std(fvals)),
    }
    if ffs:
        gvals = [ffs[s] for s in sorted(ffs)]
        summary["ff_per_seed"] = {str(s): ffs[s] for s in sorted(ffs)}
        summary["ff_mean"] = float(np.mean(gvals))
        summary["ff_std"] = float(np.std(gvals))
    if extras:
        summary.update(extras)
    spath = os.path.join(out_dir, "summary.json")
    try:
        with open(spath, "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise MetricError(f"cannot write {spath}: {exc}") from exc
    paths.append(spath)
    return paths

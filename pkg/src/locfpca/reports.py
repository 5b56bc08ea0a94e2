"""Deterministic file emission and re-ingestion for pipeline outputs.

Every writer goes through a temp-file rename so an output file is either
complete or absent.  Floats are written with repr (shortest round-trip),
so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

import numpy as np

__all__ = [
    "write_text_atomic",
    "write_matrix_csv",
    "read_matrix_csv",
    "write_eigenfunctions_csv",
    "read_eigenfunctions_csv",
    "write_scores_csv",
    "write_profile_csv",
    "write_results_csv",
    "write_json",
    "read_json",
]


def _fmt(value) -> str:
    return repr(float(value))


def write_text_atomic(path, text: str) -> None:
    """Write text through a temporary file and an atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    """Square matrix with 1-based row/column index headers."""
    matrix = np.asarray(matrix, dtype=float)
    n_rows, n_cols = matrix.shape
    rows = [[""] + [str(c + 1) for c in range(n_cols)]]
    for r in range(n_rows):
        rows.append([str(r + 1)] + [_fmt(v) for v in matrix[r]])
    write_text_atomic(path, _csv_text(rows))


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_cols = len(header) - 1
        data = [[float(v) for v in row[1:]] for row in reader if row]
    out = np.asarray(data, dtype=float)
    if out.shape[1] != n_cols:
        raise ValueError(f"ragged matrix csv {path}")
    return out


def write_eigenfunctions_csv(path, levels: dict, n_variates: int, n_points: int) -> None:
    """One row per (level, rank, variate, time_index); function-scale values.

    ``levels`` maps level name to an (R, MP) array.
    """
    rows = [["level", "rank", "variate", "time_index", "value"]]
    for level in sorted(levels):
        mat = np.asarray(levels[level], dtype=float)
        for rank in range(mat.shape[0]):
            curve = mat[rank].reshape(n_variates, n_points)
            for m in range(n_variates):
                for p in range(n_points):
                    rows.append(
                        [level, str(rank + 1), str(m + 1), str(p + 1), _fmt(curve[m, p])]
                    )
    write_text_atomic(path, _csv_text(rows))


def read_eigenfunctions_csv(path):
    """Returns ({level: (R, MP) array}, n_variates, n_points)."""
    entries = {}
    max_m = 0
    max_p = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for level, rank, variate, time_index, value in reader:
            key = (level, int(rank))
            entries.setdefault(key, {})[(int(variate), int(time_index))] = float(value)
            max_m = max(max_m, int(variate))
            max_p = max(max_p, int(time_index))
    out = {}
    for (level, rank), cells in sorted(entries.items()):
        curve = np.zeros((max_m, max_p))
        for (m, p), v in cells.items():
            curve[m - 1, p - 1] = v
        out.setdefault(level, []).append((rank, curve.reshape(-1)))
    levels = {
        level: np.vstack([curve for _, curve in sorted(items)])
        for level, items in out.items()
    }
    return levels, max_m, max_p


def write_scores_csv(path, xi_z: np.ndarray, xi_w: np.ndarray) -> None:
    """Function-scale scores; replicate column empty on subject rows."""
    rows = [["level", "subject", "replicate", "rank", "value"]]
    n, r1 = xi_z.shape
    for i in range(n):
        for r in range(r1):
            rows.append(["subject", str(i + 1), "", str(r + 1), _fmt(xi_z[i, r])])
    n, j, r2 = xi_w.shape
    for i in range(n):
        for jj in range(j):
            for r in range(r2):
                rows.append(
                    ["replicate", str(i + 1), str(jj + 1), str(r + 1), _fmt(xi_w[i, jj, r])]
                )
    write_text_atomic(path, _csv_text(rows))


def write_profile_csv(path, profile) -> None:
    """Dissociation profile rows (replicate_j, replicate_k, statistic), 1-based."""
    rows = [["replicate_j", "replicate_k", "statistic"]]
    for (a, b), value in profile:
        rows.append([str(a + 1), str(b + 1), _fmt(value)])
    write_text_atomic(path, _csv_text(rows))


def write_results_csv(path, result_rows) -> None:
    """Tidy simulation results (replicate, method, level, rank, metric, value)."""
    rows = [["replicate", "method", "level", "rank", "metric", "value"]]
    for row in result_rows:
        rows.append(
            [
                str(row["replicate"]),
                row["method"],
                row["level"],
                str(row["rank"]),
                row["metric"],
                _fmt(row["value"]),
            ]
        )
    write_text_atomic(path, _csv_text(rows))


def write_json(path, payload) -> None:
    write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)

"""Multilevel multivariate functional observations on a shared dense time grid.

The observation tensor is indexed (subject i, replicate j, variate m, time p).
All downstream matrix computations use the stacked vector convention: the M
per-variate blocks of length P are concatenated, so entry (m, p) of a curve
sits at flat index m*P + p (0-based).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    AlreadyDemeaned,
    DuplicateCell,
    MissingCell,
    NonFiniteValue,
)

LONG_CSV_FIELDS = ("subject_id", "replicate_id", "variate_id", "time_index", "value")

_BINARY_HEADER = struct.Struct("<4q")  # N, J, M, P as little-endian int64

_DEMEAN_TOL = 1e-10


def default_time_grid(n_points: int) -> np.ndarray:
    """Equispaced grid t_p = (p-1)/(P-1) on [0, 1]."""
    if n_points == 1:
        return np.zeros(1)
    return np.linspace(0.0, 1.0, n_points)


@dataclass(frozen=True)
class FunctionalDataset:
    """Balanced tensor of functional observations plus grid metadata.

    Parameters
    ----------
    values : ndarray of shape (N, J, M, P)
        Observations for N subjects, J replicates, M variates, P time points.
        Every cell must be finite.
    time_grid : ndarray of shape (P,)
        Strictly increasing time points; metadata only.
    demeaned : bool
        True once the per-replicate cross-subject mean has been removed.
        When set, the mean over subjects of every (j, m, p) cell must be
        zero to within 1e-10.

    The instance is immutable: arrays are copied and marked read-only, so a
    dataset can be shared freely across parallel workers.
    """

    values: np.ndarray
    time_grid: np.ndarray
    demeaned: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 4:
            raise ValueError(f"values must be 4-dimensional, got shape {values.shape}")
        if min(values.shape) < 1:
            raise ValueError(f"every dimension must be positive, got shape {values.shape}")
        if not np.isfinite(values).all():
            bad = np.argwhere(~np.isfinite(values))[0]
            raise NonFiniteValue(f"non-finite value at (i,j,m,p)={tuple(int(x) + 1 for x in bad)}")
        grid = np.array(self.time_grid, dtype=np.float64)
        if grid.shape != (values.shape[3],):
            raise ValueError(f"time_grid has length {grid.shape}, expected ({values.shape[3]},)")
        if grid.size > 1 and not (np.diff(grid) > 0).all():
            raise ValueError("time_grid must be strictly increasing")
        if self.demeaned:
            worst = np.abs(values.mean(axis=0)).max()
            if worst > _DEMEAN_TOL:
                raise ValueError(
                    f"demeaned=True but per-replicate subject means reach {worst:.2e}"
                )
        values.setflags(write=False)
        grid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "time_grid", grid)

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def n_replicates(self) -> int:
        return self.values.shape[1]

    @property
    def n_variates(self) -> int:
        return self.values.shape[2]

    @property
    def n_points(self) -> int:
        return self.values.shape[3]

    @property
    def dims(self) -> dict:
        n, j, m, p = self.values.shape
        return {"N": n, "J": j, "M": m, "P": p}

    def stacked(self) -> np.ndarray:
        """Return the MP x (N*J) matrix of stacked observation vectors.

        Columns are ordered subject-major, replicate-minor:
        (1,1), ..., (1,J), (2,1), ..., (N,J).
        """
        n, j, m, p = self.values.shape
        return self.values.reshape(n * j, m * p).T.copy()

    def subset_subjects(self, indices) -> "FunctionalDataset":
        """Dataset restricted to the given subject indices (0-based).

        The demeaned flag is carried over: subsets of centered data are
        treated as centered, the residual subset mean being part of the
        downstream estimation error.
        """
        idx = np.asarray(indices, dtype=int)
        sub = self.values[idx]
        # bypass the strict demeaned check; the flag is inherited by contract
        out = FunctionalDataset(sub, self.time_grid, demeaned=False)
        object.__setattr__(out, "demeaned", self.demeaned)
        return out


def replicate_means(ds: FunctionalDataset) -> np.ndarray:
    """Pointwise per-replicate mean over subjects, shape (J, M, P)."""
    return ds.values.mean(axis=0)


def demean_by_replicate(ds: FunctionalDataset) -> FunctionalDataset:
    """Remove the cross-subject mean of every (replicate, variate, time) cell.

    This removes the fixed effects (overall mean plus replicate-specific
    shift) so that covariance estimation can treat the data as zero-mean.

    Raises
    ------
    AlreadyDemeaned
        If ``ds.demeaned`` is already True.
    """
    if ds.demeaned:
        raise AlreadyDemeaned("dataset is already demeaned")
    centered = ds.values - ds.values.mean(axis=0, keepdims=True)
    return FunctionalDataset(centered, ds.time_grid, demeaned=True)


def load_dataset(path, format: str = "long-csv") -> FunctionalDataset:
    """Read a dataset from disk.

    ``long-csv`` is one row per cell with header
    ``subject_id,replicate_id,variate_id,time_index,value``; ids are
    densified to 1..N, 1..J, 1..M, 1..P in order of first appearance.
    ``binary`` is the flat little-endian layout written by
    :func:`write_dataset`.
    """
    if format == "long-csv":
        return _load_long_csv(path)
    if format == "binary":
        return _load_binary(path)
    raise ValueError(f"unknown format {format!r}")


def write_dataset(ds: FunctionalDataset, path, format: str = "long-csv") -> None:
    """Write a dataset to disk in ``long-csv`` or ``binary`` format."""
    if format == "long-csv":
        _write_long_csv(ds, path)
    elif format == "binary":
        _write_binary(ds, path)
    else:
        raise ValueError(f"unknown format {format!r}")


def _load_long_csv(path) -> FunctionalDataset:
    index_maps = [{} for _ in range(4)]  # id -> dense 0-based index
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LONG_CSV_FIELDS:
            raise ValueError(
                f"expected header {','.join(LONG_CSV_FIELDS)!r}, got {header!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"line {lineno}: expected 5 fields, got {len(row)}")
            keys = tuple(field.strip() for field in row[:4])
            value = float(row[4])
            if not np.isfinite(value):
                raise NonFiniteValue(f"line {lineno}: non-finite value for cell {keys}")
            dense = tuple(
                index_maps[axis].setdefault(keys[axis], len(index_maps[axis]))
                for axis in range(4)
            )
            records.append((dense, keys, value))

    shape = tuple(len(m) for m in index_maps)
    if 0 in shape:
        raise ValueError("empty dataset")
    filled = np.zeros(shape, dtype=bool)
    values = np.zeros(shape)
    for dense, keys, value in records:
        if filled[dense]:
            raise DuplicateCell(f"duplicate cell {keys}")
        filled[dense] = True
        values[dense] = value
    if not filled.all():
        missing = np.argwhere(~filled)[0]
        labels = [
            next(k for k, v in index_maps[axis].items() if v == missing[axis])
            for axis in range(4)
        ]
        raise MissingCell(f"missing cell {tuple(labels)}")
    return FunctionalDataset(values, default_time_grid(shape[3]))


def _write_long_csv(ds: FunctionalDataset, path) -> None:
    n, j, m, p = ds.values.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LONG_CSV_FIELDS)
        for i in range(n):
            for jj in range(j):
                for mm in range(m):
                    for pp in range(p):
                        writer.writerow(
                            (i + 1, jj + 1, mm + 1, pp + 1, repr(float(ds.values[i, jj, mm, pp])))
                        )


def _load_binary(path) -> FunctionalDataset:
    with open(path, "rb") as fh:
        head = fh.read(_BINARY_HEADER.size)
        if len(head) != _BINARY_HEADER.size:
            raise ValueError("truncated binary header")
        shape = _BINARY_HEADER.unpack(head)
        if min(shape) < 1:
            raise ValueError(f"invalid dimensions in header: {shape}")
        count = int(np.prod(shape))
        data = np.fromfile(fh, dtype="<f8", count=count)
    if data.size != count:
        raise MissingCell(f"expected {count} values, found {data.size}")
    return FunctionalDataset(data.reshape(shape), default_time_grid(shape[3]))


def _write_binary(ds: FunctionalDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_BINARY_HEADER.pack(*ds.values.shape))
        ds.values.astype("<f8").tofile(fh)

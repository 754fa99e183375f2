"""Offline design/score datasets: CSV I/O, splitting, normalization and
mediocre-design selection."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import STREAM_SPLIT, make_rng

STD_FLOOR = 1e-8


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class OfflineDataset:
    """Labeled designs ``X`` (N x d) with scores ``y`` (N,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.float64).reshape(-1)
        if X.ndim != 2:
            raise DatasetError(f"designs must be a 2-D array, got shape {X.shape}")
        if X.shape[0] == 0:
            raise DatasetError("empty dataset")
        if X.shape[1] == 0:
            raise DatasetError("designs need at least one feature")
        if X.shape[0] != y.shape[0]:
            raise DatasetError(f"{X.shape[0]} designs but {y.shape[0]} scores")
        if not np.all(np.isfinite(X)):
            raise DatasetError("non-finite design entry")
        if not np.all(np.isfinite(y)):
            raise DatasetError("non-finite score")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx: Sequence[int] | np.ndarray) -> "OfflineDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return OfflineDataset(self.X[idx], self.y[idx])


def load_csv(path: str | Path) -> OfflineDataset:
    """Read ``x0,...,x{d-1},y`` rows. Every column except ``y`` is a feature,
    in file order."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty dataset") from None
        if "y" not in header:
            raise DatasetError(f"{path}: missing 'y' column in header {header}")
        y_col = header.index("y")
        feat_cols = [j for j in range(len(header)) if j != y_col]
        rows_x: list[list[float]] = []
        rows_y: list[float] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}"
                )
            vals = []
            for j, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DatasetError(
                        f"{path}: row {lineno}, column {j} ({header[j]!r}): "
                        f"cannot parse {cell!r} as a number"
                    ) from None
            rows_x.append([vals[j] for j in feat_cols])
            rows_y.append(vals[y_col])
    if not rows_y:
        raise DatasetError(f"{path}: empty dataset")
    return OfflineDataset(np.array(rows_x), np.array(rows_y))


def format_float(v: float) -> str:
    return repr(float(v))


def write_csv(ds: OfflineDataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["y"])
        for x, y in zip(ds.X, ds.y):
            w.writerow([format_float(v) for v in x] + [format_float(y)])


@dataclass(frozen=True)
class DatasetSplit:
    train_idx: np.ndarray
    valid_idx: np.ndarray
    pool_idx: np.ndarray

    def to_json(self) -> dict:
        return {
            "train_idx": self.train_idx.tolist(),
            "valid_idx": self.valid_idx.tolist(),
            "pool_idx": self.pool_idx.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        return cls(*(np.asarray(obj[k], dtype=np.int64) for k in ("train_idx", "valid_idx", "pool_idx")))


def save_split(split: DatasetSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.to_json()), encoding="utf-8")


def load_split(path: str | Path) -> DatasetSplit:
    return DatasetSplit.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def split(
    ds: OfflineDataset,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    k: int | None = None,
) -> DatasetSplit:
    """Seeded shuffle, then contiguous train/valid/pool blocks.

    Valid and pool get ``round(fraction * N)`` rows; train takes whatever
    remains of ``round(sum(fractions) * N)``.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr):
        raise DatasetError(f"fractions must be three positive numbers, got {fractions}")
    if sum(fr) > 1.0 + 1e-9:
        raise DatasetError(f"fractions sum to {sum(fr)} > 1")
    n = len(ds)
    n_valid = _round_half_up(fr[1] * n)
    n_pool = _round_half_up(fr[2] * n)
    n_train = min(_round_half_up(sum(fr) * n), n) - n_valid - n_pool
    if k is not None and n_pool < k:
        raise DatasetError(f"retrieval pool has {n_pool} samples, fewer than K={k}")
    if n_train <= 0:
        raise DatasetError(f"training subset is empty for N={n} and fractions {fractions}")
    perm = make_rng(seed, STREAM_SPLIT).permutation(n)
    return DatasetSplit(
        train_idx=perm[:n_train].copy(),
        valid_idx=perm[n_train : n_train + n_valid].copy(),
        pool_idx=perm[n_train + n_valid : n_train + n_valid + n_pool].copy(),
    )


@dataclass(frozen=True)
class Normalizer:
    """Z-score statistics (population std, floored at 1e-8)."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def normalize_x(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def denormalize_x(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.x_std + self.x_mean

    def normalize_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def denormalize_y(self, z):
        return np.asarray(z, dtype=np.float64) * self.y_std + self.y_mean

    def to_json(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Normalizer":
        return cls(
            np.asarray(obj["x_mean"], dtype=np.float64),
            np.asarray(obj["x_std"], dtype=np.float64),
            float(obj["y_mean"]),
            float(obj["y_std"]),
        )


def fit_normalizer(ds: OfflineDataset, idx: Sequence[int] | np.ndarray | None = None) -> Normalizer:
    if idx is None:
        idx = np.arange(len(ds))
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise DatasetError("cannot fit a normalizer on an empty index set")
    X, y = ds.X[idx], ds.y[idx]
    return Normalizer(
        x_mean=X.mean(axis=0),
        x_std=np.maximum(X.std(axis=0), STD_FLOOR),
        y_mean=float(y.mean()),
        y_std=float(max(y.std(), STD_FLOOR)),
    )


def select_mediocre(
    ds: OfflineDataset, *, threshold: float | None = None, bottom_k: int | None = None
) -> np.ndarray:
    """Indices of mediocre designs: ``y < threshold`` (raw score units), or
    the ``bottom_k`` lowest scores ordered by (score, index)."""
    if (threshold is None) == (bottom_k is None):
        raise DatasetError("give exactly one of threshold or bottom_k")
    if threshold is not None:
        return np.flatnonzero(ds.y < threshold)
    if bottom_k < 0 or bottom_k > len(ds):
        raise DatasetError(f"bottom_k={bottom_k} outside [0, {len(ds)}]")
    order = np.lexsort((np.arange(len(ds)), ds.y))
    return order[:bottom_k]


def bin_select(ds: OfflineDataset, dim: int, n_bins: int, per_bin: int) -> np.ndarray:
    """Equal-width bins over the range of feature ``dim``; the ``per_bin``
    lowest-score rows of every non-empty bin, bin by bin."""
    if not 0 <= dim < ds.dim:
        raise DatasetError(f"dim={dim} outside [0, {ds.dim})")
    if n_bins < 1:
        raise DatasetError("n_bins must be >= 1")
    v = ds.X[:, dim]
    lo, hi = v.min(), v.max()
    if hi > lo:
        bins = np.floor((v - lo) / (hi - lo) * n_bins).astype(np.int64)
        bins = np.minimum(bins, n_bins - 1)
    else:
        bins = np.zeros(len(ds), dtype=np.int64)
    # sort by (bin, score, index), then keep the head of each bin
    order = np.lexsort((np.arange(len(ds)), ds.y, bins))
    sorted_bins = bins[order]
    first = np.searchsorted(sorted_bins, sorted_bins, side="left")
    rank = np.arange(len(ds)) - first
    return order[rank < per_bin]

"""Ground-truth black-box functions and synthetic dataset generation."""
from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._rng import STREAM_DATA, make_rng
from .dataset import OfflineDataset

HARTMANN3_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN3_A = np.array(
    [
        [3.0, 10.0, 30.0],
        [0.1, 10.0, 35.0],
        [3.0, 10.0, 30.0],
        [0.1, 10.0, 35.0],
    ]
)
HARTMANN3_P = 1e-4 * np.array(
    [
        [3689.0, 1170.0, 2673.0],
        [4699.0, 4387.0, 7470.0],
        [1091.0, 8732.0, 5547.0],
        [381.0, 5743.0, 8828.0],
    ]
)
for _arr in (HARTMANN3_ALPHA, HARTMANN3_A, HARTMANN3_P):
    _arr.setflags(write=False)

HARTMANN3_ARGMAX = (0.114614, 0.555649, 0.852547)
HARTMANN3_MAX = 3.86278


class OracleError(RuntimeError):
    pass


def hartmann3(x: np.ndarray) -> np.ndarray | float:
    """Hartmann (3D) in its maximization form, sum_i alpha_i exp(-sum_j A_ij (x_j - P_ij)^2).

    Accepts one design of shape (3,) or a batch of shape (n, 3). Points
    outside the unit cube are evaluated as-is.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.ndim != 2 or X.shape[1] != 3:
        raise OracleError(f"hartmann3 expects designs with d=3, got shape {x.shape}")
    sq = (X[:, None, :] - HARTMANN3_P[None, :, :]) ** 2
    inner = np.sum(HARTMANN3_A[None, :, :] * sq, axis=2)
    out = np.exp(-inner) @ HARTMANN3_ALPHA
    return float(out[0]) if single else out


def generate_hartmann_dataset(n_total: int = 12000, trim: int = 1000, seed: int = 0) -> OfflineDataset:
    """Uniform samples on the unit cube with the ``trim`` best and ``trim``
    worst scores removed (rank cut, ties resolved by sample index)."""
    if trim < 0 or n_total <= 2 * trim:
        raise ValueError(f"need n_total > 2*trim, got n_total={n_total}, trim={trim}")
    X = make_rng(seed, STREAM_DATA).random((n_total, 3))
    y = hartmann3(X)
    order = np.lexsort((np.arange(n_total), y))
    keep = np.sort(order[trim : n_total - trim])
    return OfflineDataset(X[keep], y[keep])


@dataclass(frozen=True)
class OracleHandle:
    """Either the built-in Hartmann (3D) function or an external command.

    The external command receives one comma-separated design per line on
    stdin and must print one score per line on stdout.
    """

    kind: str = "hartmann3"
    command: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("hartmann3", "external"):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        if self.kind == "external" and not self.command:
            raise ValueError("external oracle needs a command")

    @property
    def dim(self) -> int | None:
        return 3 if self.kind == "hartmann3" else None

    def to_json(self) -> dict:
        return {"kind": self.kind, "command": self.command}


def _run_external(command: str, X: np.ndarray) -> list[float]:
    payload = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in X)
    proc = subprocess.run(
        shlex.split(command), input=payload, capture_output=True, text=True, check=False
    )
    if proc.returncode != 0:
        raise OracleError(f"exit status {proc.returncode}: {proc.stderr.strip()[:500]}")
    lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
    if len(lines) != len(X):
        raise OracleError(f"expected {len(X)} scores, got {len(lines)}")
    scores = []
    for i, ln in enumerate(lines):
        try:
            scores.append(float(ln))
        except ValueError:
            raise OracleError(f"design {i}: unparseable score {ln!r}") from None
    return scores


def evaluate_batch(oracle: OracleHandle, designs: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    """Score designs in input order."""
    X = np.asarray(designs, dtype=np.float64)
    if X.size == 0:
        return np.zeros(0)
    X = np.atleast_2d(X)
    if oracle.kind == "hartmann3":
        return hartmann3(X)
    try:
        return np.asarray(_run_external(oracle.command, X))
    except OracleError as batch_err:
        # locate the offending design by replaying one at a time
        for i, row in enumerate(X):
            try:
                _run_external(oracle.command, row[None, :])
            except OracleError as err:
                raise OracleError(f"external oracle failed on design {i}: {err}") from None
        raise OracleError(f"external oracle failed on the batch: {batch_err}") from None

"""Aggregation of a retrieval set into ``(x_aggr, y_aggr)``.

Two ways to obtain the K weights:

* parametric: shifted-softmax attention ``gamma * softmax(c_i^T A q / sqrt(d)) - (gamma - 1) / K``,
  which keeps the weights summing to one but lets them go negative so the
  aggregate can leave the convex hull of the neighbours;
* non-parametric: ridge weights ``(C C^T + lam I)^-1 C q`` rescaled to unit L1 norm.

Candidates are stored row-wise, ``(K, d)`` for one query or ``(B, K, d)``
for a batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .retrieval import RetrievalSet

RIDGE_DEGENERATE_L1 = 1e-10


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class AggregationKind:
    """``kind`` is "parametric" (uses ``gamma``) or "nonparametric" (uses ``lam``).
    The attention matrix itself lives on the model."""

    kind: str = "nonparametric"
    gamma: float = 2.0
    lam: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in ("parametric", "nonparametric"):
            raise AggregationError(f"unknown aggregation {self.kind!r}")
        if self.gamma < 1:
            raise AggregationError(f"gamma must be >= 1, got {self.gamma}")
        if not self.lam > 0:
            raise AggregationError(f"ridge lambda must be positive, got {self.lam}")

    @property
    def parametric(self) -> bool:
        return self.kind == "parametric"

    def to_json(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "lam": self.lam}


@dataclass(frozen=True)
class Aggregate:
    x_aggr: np.ndarray
    y_aggr: float
    weights: np.ndarray


def softmax_prime(scores: np.ndarray, gamma: float, k: int | None = None) -> np.ndarray:
    """Shifted softmax along the last axis. ``scores`` are already scaled."""
    s = np.asarray(scores, dtype=np.float64)
    k = s.shape[-1] if k is None else k
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)
    if gamma == 1:
        return p
    return gamma * p - (gamma - 1.0) / k


def attention_scores(A: np.ndarray, queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    d = queries.shape[-1]
    return np.einsum("...kd,de,...e->...k", candidates, A, queries) / np.sqrt(d)


def attention_weights(A: np.ndarray, query: np.ndarray, candidates: np.ndarray, gamma: float) -> np.ndarray:
    """Weights for one query ``(d,)`` against ``(K, d)`` candidates, or batched
    ``(B, d)`` against ``(B, K, d)``."""
    A = np.asarray(A, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.shape[-1] != query.shape[-1] or A.shape != (query.shape[-1],) * 2:
        raise AggregationError("attention dimensions disagree")
    return softmax_prime(attention_scores(A, query, candidates), gamma)


def attention_weights_backward(
    A: np.ndarray, query: np.ndarray, candidates: np.ndarray, gamma: float, grad_w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull ``dL/dw`` back to ``dL/dA`` (summed over the batch) and ``dL/dquery``."""
    d = query.shape[-1]
    s = attention_scores(A, query, candidates)
    p = softmax_prime(s, 1.0)
    gp = gamma * np.asarray(grad_w, dtype=np.float64)
    gs = p * (gp - np.sum(p * gp, axis=-1, keepdims=True)) / np.sqrt(d)
    # score_k = c_k^T A q  =>  dA = sum_k gs_k c_k q^T,  dq = A^T sum_k gs_k c_k
    v = np.einsum("...k,...kd->...d", gs, candidates)
    if v.ndim == 1:
        dA = np.outer(v, query)
    else:
        dA = np.einsum("bd,be->de", v, query)
    dq = v @ A
    return dA, dq


def _cholesky_solve(G: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve SPD systems ``G x = b`` for stacked ``G (B, K, K)``, ``b (B, K)``."""
    L = np.linalg.cholesky(G)
    n = b.shape[-1]
    z = np.empty_like(b)
    for i in range(n):
        z[:, i] = (b[:, i] - np.einsum("bj,bj->b", L[:, i, :i], z[:, :i])) / L[:, i, i]
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        x[:, i] = (z[:, i] - np.einsum("bj,bj->b", L[:, i + 1 :, i], x[:, i + 1 :])) / L[:, i, i]
    return x


def ridge_solution(candidates: np.ndarray, query: np.ndarray, lam: float) -> np.ndarray:
    """Unnormalized ridge weights solving the K x K system."""
    C = np.asarray(candidates, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    single = C.ndim == 2
    if single:
        C, q = C[None], q[None]
    k = C.shape[1]
    G = np.einsum("bkd,bjd->bkj", C, C) + lam * np.eye(k)
    rhs = np.einsum("bkd,bd->bk", C, q)
    w = _cholesky_solve(G, rhs)
    return w[0] if single else w


def ridge_weights(candidates: np.ndarray, query: np.ndarray, lam: float) -> np.ndarray:
    """Ridge weights rescaled to unit L1 norm; uniform when the solution is
    numerically zero."""
    if not lam > 0:
        raise AggregationError(f"ridge lambda must be positive, got {lam}")
    w = ridge_solution(candidates, query, lam)
    l1 = np.sum(np.abs(w), axis=-1, keepdims=True)
    k = w.shape[-1]
    degenerate = l1 < RIDGE_DEGENERATE_L1
    return np.where(degenerate, 1.0 / k, w / np.where(degenerate, 1.0, l1))


def aggregate_arrays(cand_X: np.ndarray, cand_y: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched form of :func:`aggregate` on raw arrays."""
    x_aggr = np.einsum("...k,...kd->...d", weights, cand_X)
    y_aggr = np.einsum("...k,...k->...", weights, cand_y)
    return x_aggr, y_aggr


def aggregate(rset: RetrievalSet, weights: np.ndarray) -> Aggregate:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(rset),):
        raise AggregationError(f"{weights.shape[0]} weights for a retrieval set of size {len(rset)}")
    x_aggr, y_aggr = aggregate_arrays(rset.X, rset.y, weights)
    return Aggregate(x_aggr=x_aggr, y_aggr=float(y_aggr), weights=weights)

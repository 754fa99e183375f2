"""Top-K retrieval of pool samples by a similarity kernel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("inner", "rbf", "cosine")


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityKind:
    kind: str = "rbf"
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise RetrievalError(f"unknown similarity {self.kind!r}; choose from {KINDS}")
        if self.kind == "rbf" and not self.sigma > 0:
            raise RetrievalError(f"rbf bandwidth must be positive, got {self.sigma}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma}


def similarity(kind: SimilarityKind, xi: np.ndarray, xj: np.ndarray) -> float:
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    if xi.shape != xj.shape:
        raise RetrievalError(f"dimension mismatch {xi.shape} vs {xj.shape}")
    return float(similarity_matrix(kind, xi[None, :], xj[None, :])[0, 0])


def similarity_matrix(kind: SimilarityKind, Q: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Similarities between every query row of ``Q`` and pool row of ``P``."""
    if kind.kind == "inner":
        return Q @ P.T
    if kind.kind == "cosine":
        qn = np.linalg.norm(Q, axis=1)
        pn = np.linalg.norm(P, axis=1)
        if np.any(qn == 0) or np.any(pn == 0):
            raise RetrievalError("cosine similarity is undefined for a zero vector")
        return (Q @ P.T) / np.outer(qn, pn)
    # squared distances from explicit differences (not the expanded quadratic
    # form) so identical vectors score exactly 1.0; chunked to bound memory
    out = np.empty((Q.shape[0], P.shape[0]))
    step = max(1, 4_000_000 // max(1, P.shape[0] * P.shape[1]))
    for s in range(0, Q.shape[0], step):
        diff = Q[s : s + step, None, :] - P[None, :, :]
        out[s : s + step] = np.sum(diff * diff, axis=2)
    return np.exp(-out / (2.0 * kind.sigma**2))


@dataclass(frozen=True)
class RetrievalSet:
    """K pool entries ordered by decreasing similarity to one query."""

    X: np.ndarray
    y: np.ndarray
    similarities: np.ndarray
    source_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def top_k_indices(sims: np.ndarray, k: int) -> np.ndarray:
    """Per row, the column indices of the ``k`` largest entries, ordered by
    (similarity desc, index asc)."""
    n_q, m = sims.shape
    if k > m:
        raise RetrievalError(f"K={k} exceeds pool size {m}")
    if k == 0:
        return np.zeros((n_q, 0), dtype=np.int64)
    if k < m:
        # partition narrows the candidates; rows with ties at the K-th value
        # fall back to the full row so the lower index wins
        part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
        part_sims = np.take_along_axis(sims, part, axis=1)
        kth = part_sims.min(axis=1)
        order = np.lexsort((part, -part_sims), axis=1)
        out = np.take_along_axis(part, order, axis=1)
        tied = np.flatnonzero(np.sum(sims >= kth[:, None], axis=1) > k)
        for r in tied:
            cand = np.flatnonzero(sims[r] >= kth[r])
            out[r] = cand[np.lexsort((cand, -sims[r, cand]))[:k]]
        return out
    cols = np.broadcast_to(np.arange(m), sims.shape)
    return np.lexsort((cols, -sims), axis=1)[:, :k]


def retrieve_batch(
    pool_X: np.ndarray, queries: np.ndarray, k: int, kind: SimilarityKind
) -> tuple[np.ndarray, np.ndarray]:
    """Indices (n_q, k) into the pool and their similarities."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != pool_X.shape[1]:
        raise RetrievalError(f"query dim {queries.shape[1]} != pool dim {pool_X.shape[1]}")
    sims = similarity_matrix(kind, queries, pool_X)
    idx = top_k_indices(sims, k)
    return idx, np.take_along_axis(sims, idx, axis=1)


def retrieve(
    pool_X: np.ndarray, pool_y: np.ndarray, query: np.ndarray, k: int, kind: SimilarityKind
) -> RetrievalSet:
    idx, sims = retrieve_batch(pool_X, np.asarray(query)[None, :], k, kind)
    idx, sims = idx[0], sims[0]
    return RetrievalSet(X=pool_X[idx], y=pool_y[idx], similarities=sims, source_idx=idx)

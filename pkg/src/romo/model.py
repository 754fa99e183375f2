"""Surrogate + retrieval-enhanced ensemble and its constrained training.

The ensemble predicts ``h = beta * f(x) + (1 - beta) * g(x, x_aggr, y_aggr)``.
Training minimises ``0.5 * L_s + L_a`` subject to ``L_c <= tau`` by
alternating an Adam step on the network parameters with projected dual
ascent on the multiplier. Everything model-facing runs in normalized units.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import neuralnet as nn
from ._rng import STREAM_INIT_ATTN, STREAM_INIT_F, STREAM_INIT_G, STREAM_SHUFFLE, make_rng
from .aggregation import (
    AggregationKind,
    aggregate_arrays,
    attention_weights,
    attention_weights_backward,
    ridge_weights,
)
from .dataset import DatasetSplit, Normalizer, OfflineDataset, fit_normalizer
from .retrieval import SimilarityKind, retrieve_batch

log = logging.getLogger(__name__)

# neighbours per query; see README for how it was chosen
DEFAULT_K = 20

METHODS = ("grad", "rem_p", "rem_n", "romo_p", "romo_n")
METHOD_LABELS = {
    "grad": "Grad.",
    "rem_p": "REM_p",
    "rem_n": "REM_n",
    "romo_p": "ROMO_p",
    "romo_n": "ROMO_n",
}


class TrainingError(RuntimeError):
    pass


def parse_method(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    if key not in METHODS:
        raise ValueError(f"unknown method {name!r}; valid methods: {', '.join(METHODS)}")
    return key


def method_aggregation(method: str) -> str | None:
    if method == "grad":
        return None
    return "parametric" if method.endswith("_p") else "nonparametric"


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    net_lr: float = 1e-3
    tau: float = 0.01
    dual_lr: float = 0.01
    seed: int = 0
    patience: int = 20
    hidden: tuple[int, ...] = (64, 64)
    beta: float = 0.5
    align_weight: float = 1.0
    dual_init: float = 0.0
    freeze_dual: bool = False

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("epochs", "batch_size", "patience"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.net_lr > 0 and self.dual_lr >= 0 and self.tau >= 0):
            raise ValueError("net_lr must be positive, dual_lr and tau non-negative")
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.dual_init < 0:
            raise ValueError("dual_init must be >= 0")


@dataclass
class RomoModel:
    """Trained networks plus the (normalized) retrieval pool they consult.

    ``grad`` carries only ``f_net`` (beta = 1); ``rem_*`` only ``g_net``
    (beta = 0); ``romo_*`` both.
    """

    method: str
    f_net: nn.Mlp | None
    g_net: nn.Mlp | None
    beta: float
    agg: AggregationKind
    sim: SimilarityKind
    k: int
    normalizer: Normalizer
    pool_X: np.ndarray
    pool_y: np.ndarray
    attn: np.ndarray | None = None
    lambda_dual: float = 0.0
    pool_idx: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.pool_X.shape[1]

    @property
    def uses_retrieval(self) -> bool:
        return self.g_net is not None

    def trainable(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        if self.f_net is not None:
            out += self.f_net.params()
        if self.g_net is not None:
            out += self.g_net.params()
            if self.attn is not None:
                out.append(self.attn)
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.trainable()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, s in zip(self.trainable(), snap):
            p[...] = s


def new_model(
    method: str,
    normalizer: Normalizer,
    pool_X: np.ndarray,
    pool_y: np.ndarray,
    cfg: TrainConfig,
    k: int = DEFAULT_K,
    sim: SimilarityKind | None = None,
    agg: AggregationKind | None = None,
    pool_idx: np.ndarray | None = None,
) -> RomoModel:
    """Fresh networks for ``method``; pool arrays must already be normalized."""
    method = parse_method(method)
    sim = sim or SimilarityKind()
    agg_kind = method_aggregation(method)
    base = agg or AggregationKind()
    agg = AggregationKind(agg_kind or base.kind, base.gamma, base.lam)
    d = pool_X.shape[1]
    hidden = list(cfg.hidden)
    f_net = g_net = attn = None
    if method in ("grad", "romo_p", "romo_n"):
        f_net = nn.init([d, *hidden, 1], make_rng(cfg.seed, STREAM_INIT_F))
    if method != "grad":
        g_net = nn.init([2 * d + 1, *hidden, 1], make_rng(cfg.seed, STREAM_INIT_G))
        if agg.parametric:
            # zero attention starts from uniform neighbour weights
            attn = np.zeros((d, d))
    beta = {"grad": 1.0, "rem_p": 0.0, "rem_n": 0.0}.get(method, cfg.beta)
    return RomoModel(
        method=method,
        f_net=f_net,
        g_net=g_net,
        beta=beta,
        agg=agg,
        sim=sim,
        k=k,
        normalizer=normalizer,
        pool_X=np.asarray(pool_X, dtype=np.float64),
        pool_y=np.asarray(pool_y, dtype=np.float64),
        attn=attn,
        lambda_dual=cfg.dual_init,
        pool_idx=pool_idx,
    )


# -- retrieval + aggregation ---------------------------------------------------


def neighbours(model: RomoModel, Xn: np.ndarray) -> np.ndarray:
    idx, _ = retrieve_batch(model.pool_X, Xn, model.k, model.sim)
    return idx


def aggregate_weights(model: RomoModel, Xn: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    cand = model.pool_X[nbr]
    if model.agg.parametric:
        return attention_weights(model.attn, Xn, cand, model.agg.gamma)
    return ridge_weights(cand, Xn, model.agg.lam)


def build_aggregates(
    model: RomoModel, Xn: np.ndarray, nbr: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(x_aggr, y_aggr, weights)`` for a batch of normalized queries."""
    Xn = np.atleast_2d(Xn)
    if nbr is None:
        nbr = neighbours(model, Xn)
    w = aggregate_weights(model, Xn, nbr)
    x_aggr, y_aggr = aggregate_arrays(model.pool_X[nbr], model.pool_y[nbr], w)
    return x_aggr, y_aggr, w


def g_input(Xn: np.ndarray, x_aggr: np.ndarray, y_aggr: np.ndarray) -> np.ndarray:
    return np.concatenate([Xn, x_aggr, np.reshape(y_aggr, (-1, 1))], axis=1)


def predict(
    model: RomoModel, Xn: np.ndarray, agg: tuple[np.ndarray, np.ndarray] | None = None
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """``(h, f_val, g_val)`` in normalized score units.

    ``agg`` is an optional precomputed ``(x_aggr, y_aggr)`` for the same
    queries; otherwise retrieval runs against the model's pool.
    """
    Xn = np.atleast_2d(np.asarray(Xn, dtype=np.float64))
    if Xn.shape[1] != model.dim:
        raise ValueError(f"queries have {Xn.shape[1]} features, model expects {model.dim}")
    f_val = nn.forward(model.f_net, Xn) if model.f_net is not None else None
    g_val = None
    if model.g_net is not None:
        if agg is None:
            x_aggr, y_aggr, _ = build_aggregates(model, Xn)
        else:
            x_aggr, y_aggr = agg
        g_val = nn.forward(model.g_net, g_input(Xn, x_aggr, y_aggr))
    if f_val is None:
        h = g_val
    elif g_val is None:
        h = f_val
    else:
        h = model.beta * f_val + (1.0 - model.beta) * g_val
    return h, f_val, g_val


def predict_raw(model: RomoModel, X: np.ndarray) -> np.ndarray:
    """Ensemble prediction for raw-unit designs, in raw score units."""
    h, _, _ = predict(model, model.normalizer.normalize_x(np.atleast_2d(X)))
    return model.normalizer.denormalize_y(h)


def losses(f_val: np.ndarray, g_val: np.ndarray, y: np.ndarray, beta: float) -> tuple[float, float, float]:
    """``(L_s, L_a, L_c)`` from network outputs."""
    f_val, g_val, y = (np.asarray(a, dtype=np.float64) for a in (f_val, g_val, y))
    if y.size == 0:
        raise ValueError("empty batch")
    h = beta * f_val + (1.0 - beta) * g_val
    return (
        float(np.mean((h - y) ** 2)),
        float(np.mean((f_val - g_val) ** 2)),
        float(np.mean(f_val) - np.mean(g_val)),
    )


# -- objective -----------------------------------------------------------------


@dataclass
class StepMetrics:
    objective: float
    l_s: float
    l_a: float
    l_c: float
    lambda_dual: float


def objective(
    model: RomoModel,
    Xn: np.ndarray,
    yn: np.ndarray,
    nbr: np.ndarray | None,
    lambda_dual: float,
    cfg: TrainConfig,
    agg_cache: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[StepMetrics, list[np.ndarray]]:
    """Batch objective and its gradient, aligned with ``model.trainable()``.

    Romo methods use ``0.5 L_s + align_weight * L_a + lambda (L_c - tau)``;
    ``grad`` and ``rem_*`` regress their single network with ``0.5 L_s``.
    ``agg_cache`` short-circuits non-parametric aggregation, whose weights do
    not depend on any parameter.
    """
    B = len(yn)
    f_val = g_val = None
    if model.f_net is not None:
        f_val = nn.forward(model.f_net, Xn)
    if model.g_net is not None:
        if nbr is None and (agg_cache is None or model.agg.parametric):
            nbr = neighbours(model, Xn)
        if agg_cache is not None and not model.agg.parametric:
            x_aggr, y_aggr = agg_cache
            w = None
        else:
            x_aggr, y_aggr, w = build_aggregates(model, Xn, nbr)
        g_in = g_input(Xn, x_aggr, y_aggr)
        g_val = nn.forward(model.g_net, g_in)

    tau = cfg.tau
    if f_val is not None and g_val is not None:
        b = model.beta
        h = b * f_val + (1 - b) * g_val
        diff = f_val - g_val
        l_s = float(np.mean((h - yn) ** 2))
        l_a = float(np.mean(diff**2))
        l_c = float(np.mean(f_val) - np.mean(g_val))
        obj = 0.5 * l_s + cfg.align_weight * l_a + lambda_dual * (l_c - tau)
        r = (h - yn) / B
        df = b * r + cfg.align_weight * 2 * diff / B + lambda_dual / B
        dg = (1 - b) * r - cfg.align_weight * 2 * diff / B - lambda_dual / B
    elif f_val is not None:
        l_s = float(np.mean((f_val - yn) ** 2))
        l_a = l_c = 0.0
        obj = 0.5 * l_s
        df, dg = (f_val - yn) / B, None
    else:
        l_s = float(np.mean((g_val - yn) ** 2))
        l_a = l_c = 0.0
        obj = 0.5 * l_s
        df, dg = None, (g_val - yn) / B

    grads: list[np.ndarray] = []
    if model.f_net is not None:
        _, fb = nn.forward_backward(model.f_net, Xn, df)
        grads += fb.param_grads()
    if model.g_net is not None:
        _, gb = nn.forward_backward(model.g_net, g_in, dg)
        grads += gb.param_grads()
        if model.attn is not None:
            d = model.dim
            gx = gb.input_grad[:, d : 2 * d]
            gy = gb.input_grad[:, 2 * d]
            cand_X, cand_y = model.pool_X[nbr], model.pool_y[nbr]
            grad_w = np.einsum("bkd,bd->bk", cand_X, gx) + cand_y * gy[:, None]
            dA, _ = attention_weights_backward(model.attn, Xn, cand_X, model.agg.gamma, grad_w)
            grads.append(dA)
    metrics = StepMetrics(obj, l_s, l_a, l_c, lambda_dual)
    return metrics, grads


def dual_update(lambda_dual: float, l_c: float, cfg: TrainConfig) -> float:
    if cfg.freeze_dual:
        return lambda_dual
    return max(0.0, lambda_dual + cfg.dual_lr * (l_c - cfg.tau))


def train_step(
    model: RomoModel,
    Xn: np.ndarray,
    yn: np.ndarray,
    nbr: np.ndarray | None,
    adam: nn.AdamState,
    cfg: TrainConfig,
    agg_cache: tuple[np.ndarray, np.ndarray] | None = None,
) -> StepMetrics:
    """One primal Adam step then one projected dual step, both evaluated at
    the pre-step parameters."""
    metrics, grads = objective(model, Xn, yn, nbr, model.lambda_dual, cfg, agg_cache)
    if not math.isfinite(metrics.objective) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingError(
            f"non-finite loss (objective={metrics.objective}, L_s={metrics.l_s}, "
            f"L_a={metrics.l_a}, L_c={metrics.l_c}, lambda={model.lambda_dual})"
        )
    nn.adam_update(model.trainable(), grads, adam, cfg.net_lr)
    if model.method.startswith("romo"):
        model.lambda_dual = dual_update(model.lambda_dual, metrics.l_c, cfg)
    return metrics


# -- training loop -------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    COLUMNS = ("epoch", "l_s", "l_a", "l_c", "lambda_dual", "valid_mse")

    def to_csv(self, path: str | Path) -> None:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join(repr(r[c]) if c != "epoch" else str(r[c]) for c in self.COLUMNS))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def full_losses(model: RomoModel, Xn: np.ndarray, yn: np.ndarray, nbr: np.ndarray | None) -> tuple[float, float, float]:
    """Dataset-level ``(L_s, L_a, L_c)``; ``L_a``/``L_c`` are 0 unless both nets exist."""
    agg = None
    if model.g_net is not None:
        x_aggr, y_aggr, _ = build_aggregates(model, Xn, nbr)
        agg = (x_aggr, y_aggr)
    h, f_val, g_val = predict(model, Xn, agg)
    l_s = float(np.mean((h - yn) ** 2))
    if f_val is None or g_val is None:
        return l_s, 0.0, 0.0
    return l_s, float(np.mean((f_val - g_val) ** 2)), float(np.mean(f_val) - np.mean(g_val))


def train(
    ds: OfflineDataset,
    split: DatasetSplit,
    method: str,
    cfg: TrainConfig | None = None,
    k: int = DEFAULT_K,
    sim: SimilarityKind | None = None,
    agg: AggregationKind | None = None,
) -> tuple[RomoModel, TrainLog]:
    """Fit ``method`` on the training subset, early-stopping on validation MSE
    of the ensemble prediction; the best-validation parameters are kept."""
    cfg = cfg or TrainConfig()
    method = parse_method(method)
    if len(split.pool_idx) < k:
        raise ValueError(f"retrieval pool has {len(split.pool_idx)} samples, fewer than K={k}")
    norm = fit_normalizer(ds, split.train_idx)
    pool_X = norm.normalize_x(ds.X[split.pool_idx])
    pool_y = norm.normalize_y(ds.y[split.pool_idx])
    model = new_model(method, norm, pool_X, pool_y, cfg, k=k, sim=sim, agg=agg, pool_idx=split.pool_idx)

    Xt, yt = norm.normalize_x(ds.X[split.train_idx]), norm.normalize_y(ds.y[split.train_idx])
    has_valid = len(split.valid_idx) > 0
    Xv, yv = norm.normalize_x(ds.X[split.valid_idx]), norm.normalize_y(ds.y[split.valid_idx])

    # training and validation queries never move, so their neighbour sets
    # (and, for ridge weights, their aggregates) are fixed for the whole run
    nbr_t = nbr_v = agg_t = None
    if model.uses_retrieval:
        nbr_t = neighbours(model, Xt)
        nbr_v = neighbours(model, Xv) if has_valid else None
        if not model.agg.parametric:
            x_aggr, y_aggr, _ = build_aggregates(model, Xt, nbr_t)
            agg_t = (x_aggr, y_aggr)

    adam = nn.AdamState.zeros_like(model.trainable())
    rng = make_rng(cfg.seed, STREAM_SHUFFLE)
    tlog = TrainLog()
    best = (math.inf, model.snapshot(), model.lambda_dual)
    stale = 0
    n = len(yt)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            bi = perm[s : s + cfg.batch_size]
            train_step(
                model,
                Xt[bi],
                yt[bi],
                None if nbr_t is None else nbr_t[bi],
                adam,
                cfg,
                None if agg_t is None else (agg_t[0][bi], agg_t[1][bi]),
            )
        l_s, l_a, l_c = full_losses(model, Xt, yt, nbr_t)
        if has_valid:
            v_mse = full_losses(model, Xv, yv, nbr_v)[0]
        else:
            v_mse = l_s
        tlog.append(epoch=epoch, l_s=l_s, l_a=l_a, l_c=l_c, lambda_dual=model.lambda_dual, valid_mse=v_mse)
        log.debug("epoch %d L_s=%.5f L_a=%.5f L_c=%.5f lambda=%.4f valid=%.5f", epoch, l_s, l_a, l_c, model.lambda_dual, v_mse)
        if v_mse < best[0]:
            best = (v_mse, model.snapshot(), model.lambda_dual)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.restore(best[1])
    model.lambda_dual = best[2]
    return model, tlog


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "romo-checkpoint/1"


def checkpoint_dict(model: RomoModel, cfg: TrainConfig | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "method": model.method,
        "beta": model.beta,
        "k": model.k,
        "aggregation": model.agg.to_json(),
        "similarity": model.sim.to_json(),
        "f_net": model.f_net.to_json() if model.f_net is not None else None,
        "g_net": model.g_net.to_json() if model.g_net is not None else None,
        "attention": model.attn.tolist() if model.attn is not None else None,
        "normalizer": model.normalizer.to_json(),
        "lambda_dual": model.lambda_dual,
        "pool_idx": model.pool_idx.tolist() if model.pool_idx is not None else None,
        "train_config": asdict(cfg) if cfg is not None else None,
    }


def save_checkpoint(model: RomoModel, path: str | Path, cfg: TrainConfig | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, cfg)), encoding="utf-8")


def model_from_dict(obj: dict, ds: OfflineDataset) -> RomoModel:
    """Rebuild a model; the retrieval pool is re-read from ``ds`` rows ``pool_idx``."""
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint (format={obj.get('format')!r})")
    norm = Normalizer.from_json(obj["normalizer"])
    pool_idx = np.asarray(obj["pool_idx"], dtype=np.int64)
    if pool_idx.size and (pool_idx.max() >= len(ds) or ds.dim != len(norm.x_mean)):
        raise ValueError("checkpoint pool does not match the dataset")
    return RomoModel(
        method=obj["method"],
        f_net=nn.Mlp.from_json(obj["f_net"]) if obj["f_net"] else None,
        g_net=nn.Mlp.from_json(obj["g_net"]) if obj["g_net"] else None,
        beta=float(obj["beta"]),
        agg=AggregationKind(**obj["aggregation"]),
        sim=SimilarityKind(**obj["similarity"]),
        k=int(obj["k"]),
        normalizer=norm,
        pool_X=norm.normalize_x(ds.X[pool_idx]),
        pool_y=norm.normalize_y(ds.y[pool_idx]),
        attn=np.asarray(obj["attention"], dtype=np.float64) if obj["attention"] is not None else None,
        lambda_dual=float(obj["lambda_dual"]),
        pool_idx=pool_idx,
    )


def load_checkpoint(path: str | Path, ds: OfflineDataset) -> RomoModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")), ds)

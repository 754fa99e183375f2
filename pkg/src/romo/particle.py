"""Masked gradient ascent of design particles against a trained surrogate."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import neuralnet as nn
from .model import RomoModel, build_aggregates, g_input, neighbours

TRAJECTORY_CAP = 1024


class AscentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConstraintMask:
    """``optimizable[j]`` is True when dimension ``j`` may move."""

    optimizable: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.optimizable, dtype=bool).reshape(-1)
        object.__setattr__(self, "optimizable", m)

    @classmethod
    def fixing(cls, d: int, fixed: list[int] | tuple[int, ...] = ()) -> "ConstraintMask":
        m = np.ones(d, dtype=bool)
        for j in fixed:
            if not 0 <= j < d:
                raise ValueError(f"fixed dimension {j} outside [0, {d})")
            m[j] = False
        return cls(m)

    @property
    def n_free(self) -> int:
        return int(self.optimizable.sum())


def parse_fix_spec(spec: str, d: int) -> ConstraintMask:
    """``"2"`` or ``"2,5-8"`` -> mask holding those dimensions constant."""
    fixed: list[int] = []
    spec = spec.strip()
    if spec:
        for part in spec.split(","):
            part = part.strip()
            try:
                if "-" in part:
                    lo, hi = (int(v) for v in part.split("-", 1))
                    if hi < lo:
                        raise ValueError
                    fixed.extend(range(lo, hi + 1))
                else:
                    fixed.append(int(part))
            except ValueError:
                raise ValueError(f"malformed mask spec {spec!r} at {part!r}") from None
    return ConstraintMask.fixing(d, sorted(set(fixed)))


class Surrogate(Protocol):
    def value_and_grad(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class ModelSurrogate:
    """``h`` and ``dh/dx`` of a trained model at normalized positions.

    Retrieval and aggregation are recomputed at every call but treated as
    constants when differentiating; only the direct ``x`` inputs of both
    networks contribute to the gradient.
    """

    def __init__(self, model: RomoModel):
        self.model = model

    def value_and_grad(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.model
        d = m.dim
        h = np.zeros(len(X))
        grad = np.zeros_like(X)
        if m.f_net is not None:
            f_val, fb = nn.forward_backward(m.f_net, X, 1.0)
            h += m.beta * f_val
            grad += m.beta * fb.input_grad
        if m.g_net is not None:
            x_aggr, y_aggr, _ = build_aggregates(m, X, neighbours(m, X))
            g_val, gb = nn.forward_backward(m.g_net, g_input(X, x_aggr, y_aggr), 1.0)
            wg = 1.0 - m.beta if m.f_net is not None else 1.0
            h += wg * g_val
            grad += wg * gb.input_grad[:, :d]
        return h, grad


class FunctionSurrogate:
    """Wraps plain ``value(X)`` / ``grad(X)`` callables, e.g. analytic test models."""

    def __init__(self, value: Callable[[np.ndarray], np.ndarray], grad: Callable[[np.ndarray], np.ndarray]):
        self._value, self._grad = value, grad

    def value_and_grad(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self._value(X), dtype=np.float64), np.asarray(self._grad(X), dtype=np.float64)


def as_surrogate(model) -> Surrogate:
    return ModelSurrogate(model) if isinstance(model, RomoModel) else model


@dataclass
class ParticleState:
    positions: np.ndarray
    mask: ConstraintMask
    step: int = 0
    record: bool = False
    stride: int = 1
    trajectory: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def start(cls, particles: np.ndarray, mask: ConstraintMask, record: bool = False, stride: int = 1) -> "ParticleState":
        P = np.array(particles, dtype=np.float64, ndmin=2)
        if P.shape[1] != mask.optimizable.size:
            raise ValueError(f"particles have {P.shape[1]} dims, mask has {mask.optimizable.size}")
        return cls(P, mask, record=record, stride=max(1, int(stride)))

    def log(self, h: np.ndarray) -> None:
        """Record the current positions with their predicted scores."""
        if self.record and self.step % self.stride == 0 and len(self.trajectory) < TRAJECTORY_CAP:
            self.trajectory.append((self.step, self.positions.copy(), np.asarray(h).copy()))


def _evaluate(surrogate: Surrogate, state: ParticleState) -> tuple[np.ndarray, np.ndarray]:
    h, grad = surrogate.value_and_grad(state.positions)
    bad = np.flatnonzero(~np.all(np.isfinite(grad), axis=1) | ~np.isfinite(h))
    if bad.size:
        raise AscentError(f"non-finite gradient for particle {int(bad[0])} at step {state.step}")
    return h, grad


def _apply(state: ParticleState, delta: np.ndarray) -> None:
    opt = state.mask.optimizable
    # only free columns are written, so fixed coordinates stay bit-identical
    state.positions[:, opt] += delta[:, opt]
    state.step += 1


def ascent_step(model, state: ParticleState, eta: float) -> np.ndarray:
    """One masked ascent step in place; returns predicted scores at the
    pre-step positions."""
    h, grad = _evaluate(as_surrogate(model), state)
    state.log(h)
    _apply(state, eta * grad)
    return h


@dataclass(frozen=True)
class Protocol1:
    max_steps: int = 1000
    converge_tol: float = 1e-6
    eta: float = 0.05


@dataclass(frozen=True)
class Protocol2:
    T: int = 250
    Q: int = 10
    eta: float = 0.05

    def __post_init__(self) -> None:
        if not 1 <= self.Q <= self.T:
            raise ValueError(f"need 1 <= Q <= T, got Q={self.Q}, T={self.T}")


@dataclass
class Protocol1Result:
    best_positions: np.ndarray
    best_h: np.ndarray
    best_step: np.ndarray
    steps: int
    state: ParticleState


def run_protocol1(
    model, particles: np.ndarray, mask: ConstraintMask, cfg: Protocol1, record: bool = False, stride: int = 1
) -> Protocol1Result:
    """Ascend until the proposed update is below ``converge_tol`` (sup norm
    over all particles and free dims) or ``max_steps``; keep each particle's
    best-predicted visited position."""
    if not cfg.eta > 0:
        raise ValueError("eta must be positive")
    surrogate = as_surrogate(model)
    state = ParticleState.start(particles, mask, record, stride)
    best_pos = state.positions.copy()
    best_h = np.full(len(best_pos), -np.inf)
    best_step = np.zeros(len(best_pos), dtype=np.int64)
    opt = mask.optimizable
    while True:
        h, grad = _evaluate(surrogate, state)
        state.log(h)
        better = h > best_h
        best_h[better] = h[better]
        best_pos[better] = state.positions[better]
        best_step[better] = state.step
        if state.step >= cfg.max_steps:
            break
        delta = cfg.eta * grad
        if not opt.any() or np.max(np.abs(delta[:, opt])) < cfg.converge_tol:
            break
        _apply(state, delta)
    return Protocol1Result(best_pos, best_h, best_step, state.step, state)


@dataclass
class Protocol2Result:
    positions: np.ndarray  # (N, Q, d) after steps T-Q+1 .. T
    predicted: np.ndarray  # (N, Q)
    state: ParticleState


def run_protocol2(
    model, particles: np.ndarray, mask: ConstraintMask, cfg: Protocol2, record: bool = False, stride: int = 1
) -> Protocol2Result:
    """Exactly ``T`` steps; returns the last ``Q`` positions of every particle."""
    if not cfg.eta > 0:
        raise ValueError("eta must be positive")
    surrogate = as_surrogate(model)
    state = ParticleState.start(particles, mask, record, stride)
    n, d = state.positions.shape
    out_pos = np.empty((n, cfg.Q, d))
    out_h = np.empty((n, cfg.Q))
    first_kept = cfg.T - cfg.Q + 1
    for t in range(cfg.T + 1):
        h, grad = _evaluate(surrogate, state)
        state.log(h)
        if t >= first_kept:
            out_pos[:, t - first_kept] = state.positions
            out_h[:, t - first_kept] = h
        if t < cfg.T:
            _apply(state, cfg.eta * grad)
    return Protocol2Result(out_pos, out_h, state)


def write_trajectory_csv(state: ParticleState, path: str | Path, to_raw: Callable[[np.ndarray], np.ndarray] | None = None, h_to_raw=None) -> None:
    """Rows ``particle_id, step, x0..x{d-1}, predicted_h``."""
    d = state.positions.shape[1]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["particle_id", "step", *[f"x{j}" for j in range(d)], "predicted_h"])
        for step, pos, h in state.trajectory:
            if to_raw is not None:
                pos = to_raw(pos)
            if h_to_raw is not None:
                h = h_to_raw(h)
            for i in range(len(pos)):
                w.writerow([i, step, *[repr(float(v)) for v in pos[i]], repr(float(h[i]))])

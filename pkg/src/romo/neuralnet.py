"""Dense tanh networks with hand-written reverse mode, and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import make_rng


class NetError(ValueError):
    pass


@dataclass
class Mlp:
    """``weights[l]`` has shape ``(fan_in, fan_out)``; hidden layers use tanh,
    the scalar output is linear."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_dims), [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def to_json(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Mlp":
        net = cls(
            list(obj["layer_dims"]),
            [np.asarray(W, dtype=np.float64) for W in obj["weights"]],
            [np.asarray(b, dtype=np.float64) for b in obj["biases"]],
        )
        _check_shapes(net)
        return net


def _check_shapes(net: Mlp) -> None:
    dims = net.layer_dims
    if len(net.weights) != len(dims) - 1 or len(net.biases) != len(dims) - 1:
        raise NetError("layer count does not match layer_dims")
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        if W.shape != (dims[l], dims[l + 1]) or b.shape != (dims[l + 1],):
            raise NetError(f"layer {l} has shapes {W.shape}, {b.shape} for dims {dims}")


def init(layer_dims: list[int], seed: int | np.random.Generator = 0) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    dims = [int(v) for v in layer_dims]
    if len(dims) < 2 or any(v < 1 for v in dims) or dims[-1] != 1:
        raise NetError(f"invalid layer_dims {layer_dims}: need >= 2 positive sizes ending in 1")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(dims, weights, biases)


def _as_batch(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.layer_dims[0]:
        raise NetError(f"input of shape {x.shape} for a network expecting {net.layer_dims[0]} features")
    return X, single


def _forward_trace(net: Mlp, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    acts = [X]
    h = X
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        h = z if l == last else np.tanh(z)
        acts.append(h)
    return h[:, 0], acts


def forward(net: Mlp, x: np.ndarray) -> np.ndarray | float:
    """Scalar prediction for one input ``(d,)`` or a vector for ``(B, d)``."""
    X, single = _as_batch(net, x)
    out, _ = _forward_trace(net, X)
    return float(out[0]) if single else out


@dataclass
class GradBundle:
    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    input_grad: np.ndarray

    def param_grads(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weight_grads, self.bias_grads):
            out += [W, b]
        return out


def forward_backward(net: Mlp, x: np.ndarray, upstream) -> tuple[np.ndarray, GradBundle]:
    """Outputs plus gradients of ``sum_b upstream_b * net(x_b)``.

    Parameter gradients are summed over the batch; ``input_grad`` keeps one
    row per input.
    """
    X, single = _as_batch(net, x)
    out, acts = _forward_trace(net, X)
    g = np.broadcast_to(np.asarray(upstream, dtype=np.float64), out.shape).reshape(-1, 1)
    w_grads: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    for l in range(len(net.weights) - 1, -1, -1):
        if l < len(net.weights) - 1:
            g = g * (1.0 - acts[l + 1] ** 2)
        w_grads[l] = acts[l].T @ g
        b_grads[l] = g.sum(axis=0)
        g = g @ net.weights[l].T
    input_grad = g[0] if single else g
    return out, GradBundle(w_grads, b_grads, input_grad)


def backward(net: Mlp, x: np.ndarray, upstream) -> GradBundle:
    return forward_backward(net, x, upstream)[1]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_update(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam step over matching lists of arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise NetError("parameter, gradient and moment lists differ in length")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(net: Mlp, grads: GradBundle, state: AdamState | None, lr: float = 1e-3) -> tuple[Mlp, AdamState]:
    params = net.params()
    if state is None:
        state = AdamState.zeros_like(params)
    adam_update(params, grads.param_grads(), state, lr)
    return net, state

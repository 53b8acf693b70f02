"""Two-layer ReLU networks with exact reverse-mode gradients and Adam.

The same architecture serves both the forecaster and the adversary.  The
canonical flat parameter layout is (W1 row-major, b1, W2 row-major, b2); the
Adam state, serialization, and the equilibrium checks all rely on it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, NonFiniteGradient


@dataclass
class Mlp:
    W1: np.ndarray  # (hidden, in)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (out, hidden)
    b2: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    @property
    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.W1.ravel(), self.b1, self.W2.ravel(), self.b2]
        )

    def with_params(self, flat: np.ndarray) -> "Mlp":
        """Rebuild an Mlp of the same shape from a flat parameter vector."""
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise DimensionMismatch(
                f"expected {self.n_params} parameters, got {flat.size}"
            )
        h, i, o = self.hidden_dim, self.in_dim, self.out_dim
        k = 0
        W1 = flat[k : k + h * i].reshape(h, i).copy(); k += h * i
        b1 = flat[k : k + h].copy(); k += h
        W2 = flat[k : k + o * h].reshape(o, h).copy(); k += o * h
        b2 = flat[k : k + o].copy()
        return Mlp(W1, b1, W2, b2)

    def to_json(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "hidden_dim": self.hidden_dim,
            "out_dim": self.out_dim,
            "params": [format(v, ".17g") for v in self.flatten()],
        }

    @staticmethod
    def from_json(doc: dict) -> "Mlp":
        proto = mlp_init(doc["in_dim"], doc["hidden_dim"], doc["out_dim"], seed=0)
        return proto.with_params(np.array([float(v) for v in doc["params"]]))


@dataclass
class ForwardCache:
    input: np.ndarray
    hidden_preactivation: np.ndarray
    hidden_activation: np.ndarray
    output: np.ndarray


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros(n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return AdamState(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def mlp_init(in_dim: int, hidden_dim: int, out_dim: int, seed: int,
             zero_output_layer: bool = False) -> Mlp:
    """Seeded fan-in Gaussian init (std sqrt(2/fan_in)).

    With zero_output_layer the second layer starts at exactly zero, so the
    network's output is identically zero -- used so the adversary begins as
    the identity perturbation.
    """
    if min(in_dim, hidden_dim, out_dim) < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    s1 = np.sqrt(2.0 / in_dim)
    W1 = rng.normal(0.0, s1, size=(hidden_dim, in_dim))
    b1 = rng.normal(0.0, s1, size=hidden_dim)
    if zero_output_layer:
        W2 = np.zeros((out_dim, hidden_dim))
        b2 = np.zeros(out_dim)
    else:
        s2 = np.sqrt(2.0 / hidden_dim)
        W2 = rng.normal(0.0, s2, size=(out_dim, hidden_dim))
        b2 = rng.normal(0.0, s2, size=out_dim)
    return Mlp(W1, b1, W2, b2)


def mlp_forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """y = W2 relu(W1 x + b1) + b2.

    x may be a vector or an (in_dim, N) batch; shapes propagate through the
    cache so the matching backward call works either way.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] != mlp.in_dim:
        raise DimensionMismatch(f"input length {x.shape[0]} vs in_dim {mlp.in_dim}")
    bcol = (slice(None), None) if x.ndim == 2 else slice(None)
    pre = mlp.W1 @ x + mlp.b1[bcol]
    act = np.maximum(pre, 0.0)
    y = mlp.W2 @ act + mlp.b2[bcol]
    return y, ForwardCache(x, pre, act, y)


def mlp_backward(mlp: Mlp, cache: ForwardCache,
                 dL_dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact reverse-mode gradients given upstream dL/dy.

    For a batched cache the parameter gradients are summed over the batch.
    Returns (flat parameter gradient, dL/dx).  The ReLU subgradient at 0 is 0.
    """
    dL_dy = np.asarray(dL_dy, dtype=float)
    if dL_dy.shape != cache.output.shape:
        raise DimensionMismatch(
            f"upstream shape {dL_dy.shape} vs output shape {cache.output.shape}"
        )
    batched = cache.input.ndim == 2
    if batched:
        dW2 = dL_dy @ cache.hidden_activation.T
        db2 = dL_dy.sum(axis=1)
    else:
        dW2 = np.outer(dL_dy, cache.hidden_activation)
        db2 = dL_dy
    dact = mlp.W2.T @ dL_dy
    dpre = dact * (cache.hidden_preactivation > 0.0)
    if batched:
        dW1 = dpre @ cache.input.T
        db1 = dpre.sum(axis=1)
    else:
        dW1 = np.outer(dpre, cache.input)
        db1 = dpre
    dL_dx = mlp.W1.T @ dpre
    grads = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
    return grads, dL_dx


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              direction: str = "minimize") -> tuple[np.ndarray, AdamState]:
    """One Adam update with bias correction.

    direction="maximize" negates the gradient before the update, which is
    bitwise identical to minimizing -grads.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise DimensionMismatch("params, grads, and moments must share a shape")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("non-finite gradient passed to adam_step")
    if direction == "maximize":
        grads = -grads
    elif direction != "minimize":
        raise ValueError(f"unknown direction {direction!r}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


def save_mlp(mlp: Mlp, path) -> None:
    with open(path, "w") as fh:
        json.dump(mlp.to_json(), fh, indent=1)


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        return Mlp.from_json(json.load(fh))

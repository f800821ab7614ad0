"""Feedforward networks in plain numpy: forward, backprop, Adam, storage.

Deliberately self-contained. The agent training loop needs gradients of an
externally evaluated loss with respect to the network outputs (finite
differences through the power flow), so besides ordinary supervised
training on smooth L1 there is :func:`backprop_action_grads`, which seeds
the backward pass with caller-supplied output gradients.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = [
    "MlpConfig",
    "Mlp",
    "AdamState",
    "Standardizer",
    "adam_step",
    "smooth_l1",
    "backprop_action_grads",
    "train_supervised",
    "save_mlp",
    "load_mlp",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1

_OUT_ACTS = ("identity", "tanh", "sigmoid")


@dataclass(frozen=True)
class MlpConfig:
    n_in: int
    hidden: tuple[int, ...]
    n_out: int
    out_activation: str = "identity"
    seed: int = 0

    def __post_init__(self):
        if self.out_activation not in _OUT_ACTS:
            raise ValueError(f"unknown output activation {self.out_activation!r}")
        if self.n_in < 1 or self.n_out < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer sizes must be positive")

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _out_act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "tanh":
        return np.tanh(z)
    # sign-split sigmoid keeps exp() off the overflowing branch
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _out_act_deriv(name: str, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(a)
    if name == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


class Mlp:
    """Fully connected network, relu hidden layers, configurable output.

    Weights are stored as (fan_in, fan_out) matrices applied from the right
    to row-vector batches. Initialization is uniform in
    +-1/sqrt(fan_in) per layer from the seeded generator, so a config
    determines the initial network exactly.
    """

    def __init__(self, config: MlpConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        sizes = [config.n_in, *config.hidden, config.n_out]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x: np.ndarray) -> np.ndarray:
        single = x.ndim == 1
        a = np.atleast_2d(x)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ w + b, 0.0)
        a = _out_act(self.config.out_activation, a @ self.weights[-1] + self.biases[-1])
        return a[0] if single else a

    def _forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ w + b, 0.0)
            acts.append(a)
        out = _out_act(self.config.out_activation, a @ self.weights[-1] + self.biases[-1])
        acts.append(out)
        return out, acts

    def backward(
        self, acts: list[np.ndarray], grad_out: np.ndarray
    ) -> list[np.ndarray]:
        """Parameter gradients given d(loss)/d(output), summed over the batch.

        ``acts`` comes from :meth:`_forward_cached`; ``grad_out`` must hold
        the gradient with respect to the post-activation outputs.
        """
        grads: list[np.ndarray] = [np.empty(0)] * (2 * len(self.weights))
        delta = grad_out * _out_act_deriv(self.config.out_activation, acts[-1])
        for layer in range(len(self.weights) - 1, -1, -1):
            a_prev = acts[layer]
            grads[2 * layer] = a_prev.T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (acts[layer] > 0.0)
        return grads


@dataclass
class AdamState:
    """First and second moment buffers plus the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def smooth_l1(
    pred: np.ndarray, target: np.ndarray, beta: float = 1.0
) -> tuple[float, np.ndarray]:
    """Mean-reduced smooth L1 loss and its gradient with respect to pred.

    Quadratic 0.5 d^2 / beta inside |d| < beta, linear |d| - beta/2 outside.
    """
    d = pred - target
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d))
    n = d.size
    return float(loss.sum() / n), grad / n


def backprop_action_grads(
    mlp: Mlp, x: np.ndarray, grad_actions: np.ndarray
) -> list[np.ndarray]:
    """Parameter gradients for an external loss on the network outputs.

    ``grad_actions`` holds d(loss)/d(action) per sample, typically estimated
    by finite differences through the power flow; the chain rule through
    the output activation and all layers happens here.
    """
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_actions)
    if x2.shape[0] != g2.shape[0]:
        raise ValueError("batch sizes of inputs and action gradients differ")
    _, acts = mlp._forward_cached(x2)
    return mlp.backward(acts, g2)


def train_supervised(
    mlp: Mlp,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int = 200,
    batch_size: int = 256,
    lr: float = 1e-3,
    beta: float = 1.0,
    seed: int = 0,
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> dict:
    """Minibatch Adam on smooth L1. Returns per-epoch loss history."""
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y row counts differ")
    rng = np.random.default_rng(seed)
    state = AdamState.for_params(mlp.params)
    n = x.shape[0]
    hist: dict = {"train_loss": [], "val_loss": []}
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            out, acts = mlp._forward_cached(xb)
            loss, grad = smooth_l1(out, yb, beta=beta)
            grads = mlp.backward(acts, grad)
            adam_step(mlp.params, grads, state, lr=lr)
            total += loss * len(idx)
        hist["train_loss"].append(total / n)
        if x_val is not None:
            val_loss, _ = smooth_l1(mlp.forward(x_val), y_val, beta=beta)
            hist["val_loss"].append(val_loss)
    return hist


class Standardizer:
    """Per-feature zero-mean unit-variance scaling with frozen statistics."""

    def __init__(self, mean: np.ndarray | None = None, std: np.ndarray | None = None):
        self.mean = mean
        self.std = std

    def fit(self, x: np.ndarray) -> "Standardizer":
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        # constant features pass through unscaled instead of dividing by zero
        self.std = np.where(std > 1e-12, std, 1.0)
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


def save_mlp(
    path,
    mlp: Mlp,
    extras: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    """Persist a network as npz: weights, config json, schema and hash."""
    header = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(mlp.config),
        "config_hash": mlp.config.hash(),
        "meta": meta or {},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    for key, arr in (extras or {}).items():
        arrays[f"x_{key}"] = arr
    np.savez(path, **arrays)


def load_mlp(path) -> tuple[Mlp, dict[str, np.ndarray], dict]:
    """Load a stored network. Returns (mlp, extras, meta).

    A schema from the future raises; a config whose stored hash does not
    match its content only warns, the weights may still be useful.
    """
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header["schema_version"] > SCHEMA_VERSION:
            raise ValueError(
                f"model schema {header['schema_version']} is newer than "
                f"supported {SCHEMA_VERSION}"
            )
        cfg_d = header["config"]
        cfg = MlpConfig(
            n_in=cfg_d["n_in"],
            hidden=tuple(cfg_d["hidden"]),
            n_out=cfg_d["n_out"],
            out_activation=cfg_d["out_activation"],
            seed=cfg_d["seed"],
        )
        if cfg.hash() != header["config_hash"]:
            warnings.warn("stored config hash mismatch, file may be corrupted")
        mlp = Mlp(cfg)
        for i in range(len(mlp.weights)):
            mlp.weights[i] = data[f"w{i}"].copy()
            mlp.biases[i] = data[f"b{i}"].copy()
        extras = {
            key[2:]: data[key].copy() for key in data.files if key.startswith("x_")
        }
    return mlp, extras, header["meta"]

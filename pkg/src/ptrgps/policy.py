"""MLP policy: initialization, forward/backward passes, minibatch Adam training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError
from .socp import TrajectoryIterate
from .transcription import TemporalGrid, closed_loop_rollout
from .vehicle import N_U, N_X, VehicleParams

DEFAULT_DIMS = (N_X, 50, 50, 50, N_U)


@dataclass
class Mlp:
    """Fully connected net, ReLU on hidden layers, identity on the output.

    ``weights[l]`` has shape (fan_out, fan_in).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for W, b in zip(self.weights, self.biases) for a in (W, b)])

    def set_flat(self, theta: np.ndarray) -> None:
        pos = 0
        for W, b in zip(self.weights, self.biases):
            for a in (W, b):
                a[...] = theta[pos: pos + a.size].reshape(a.shape)
                pos += a.size

    def apply(self, z: np.ndarray) -> np.ndarray:
        """Forward pass on already-normalized inputs, batch along axis 0."""
        h = z
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if l < last:
                h = np.maximum(h, 0.0)
        return h

    def loss_and_grad(self, z: np.ndarray, target: np.ndarray):
        """Mean squared-norm loss over the batch and its parameter gradients."""
        acts = [z]
        pre = []
        h = z
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W.T + b
            pre.append(a)
            h = np.maximum(a, 0.0) if l < last else a
            acts.append(h)
        n = z.shape[0]
        diff = h - target
        loss = float(np.sum(diff * diff) / n)
        delta = 2.0 * diff / n
        gW = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for l in range(last, -1, -1):
            gW[l] = delta.T @ acts[l]
            gb[l] = delta.sum(axis=0)
            if l > 0:
                delta = (delta @ self.weights[l]) * (pre[l - 1] > 0)
        return loss, gW, gb


@dataclass
class Normalizer:
    """Per-feature affine standardization, z = (x - shift) / scale."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if np.any(self.scale <= 0):
            raise InvalidInputError("normalizer scales must be positive")

    @classmethod
    def identity(cls, n: int = N_X) -> "Normalizer":
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, x: np.ndarray, min_scale: float = 1e-3) -> "Normalizer":
        x = np.asarray(x, dtype=float)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > min_scale, std, 1.0))

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.shift


@dataclass
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be at least 1")


@dataclass
class PairDataset:
    """State/control training pairs tagged with their origin (trajectory, sample, node)."""

    states: np.ndarray
    controls: np.ndarray
    traj_id: np.ndarray = None
    sample_id: np.ndarray = None
    node: np.ndarray = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, N_X)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, N_U)
        n = len(self.states)
        if len(self.controls) != n:
            raise InvalidInputError("states and controls must pair up")
        for name in ("traj_id", "sample_id", "node"):
            v = getattr(self, name)
            setattr(self, name, np.zeros(n, dtype=np.int64) if v is None
                    else np.asarray(v, dtype=np.int64))
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.controls))):
            raise InvalidInputError("dataset contains non-finite values")

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def concat(cls, parts: list["PairDataset"]) -> "PairDataset":
        return cls(
            np.concatenate([d.states for d in parts]),
            np.concatenate([d.controls for d in parts]),
            np.concatenate([d.traj_id for d in parts]),
            np.concatenate([d.sample_id for d in parts]),
            np.concatenate([d.node for d in parts]),
        )


def init_xavier(dims, rng: np.random.Generator) -> Mlp:
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def forward(mlp: Mlp, normalizer: Normalizer, x) -> np.ndarray:
    """Thrust command(s) for raw state(s) ``x`` (14,) or (n, 14)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("policy input must be finite")
    single = x.ndim == 1
    out = mlp.apply(normalizer.normalize(np.atleast_2d(x)))
    return out[0] if single else out


class Adam:
    def __init__(self, mlp: Mlp, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(a) for a in _params(mlp)]
        self.v = [np.zeros_like(a) for a in _params(mlp)]

    def step(self, mlp: Mlp, grads: list[np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        lr_t = c.learning_rate * np.sqrt(1 - c.beta2**self.t) / (1 - c.beta1**self.t)
        for p, g, m, v in zip(_params(mlp), grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= lr_t * m / (np.sqrt(v) + c.eps)


def _params(mlp: Mlp) -> list[np.ndarray]:
    return [a for W, b in zip(mlp.weights, mlp.biases) for a in (W, b)]


def train_supervised(
    mlp: Mlp,
    normalizer: Normalizer,
    dataset: PairDataset,
    cfg: TrainConfig,
    on_epoch: Callable[[int, Mlp], None] | None = None,
    optimizer: Adam | None = None,
) -> list[float]:
    """Minibatch Adam on the mean squared control error; updates ``mlp`` in place.

    Returns the per-epoch mean training loss. The shuffle order depends only
    on ``cfg.seed``; the final minibatch of an epoch may be partial.
    """
    if len(dataset) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    z = normalizer.normalize(dataset.states)
    y = dataset.controls
    opt = optimizer or Adam(mlp, cfg)
    n = len(dataset)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            loss, gW, gb = mlp.loss_and_grad(z[idx], y[idx])
            opt.step(mlp, [g for pair in zip(gW, gb) for g in pair])
            total += loss * len(idx)
        history.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, mlp)
    return history


def n_minibatches(n_rows: int, batch_size: int) -> int:
    return -(-n_rows // batch_size)


def policy_rollout(mlp: Mlp, normalizer: Normalizer, x0, grid: TemporalGrid,
                   p: VehicleParams) -> TrajectoryIterate:
    """Closed-loop ZOH rollout of the policy on the nonlinear dynamics."""
    xs, us = closed_loop_rollout(x0, lambda x: forward(mlp, normalizer, x), grid, p)
    return TrajectoryIterate(xs, us, np.zeros((grid.K - 1, N_X)))

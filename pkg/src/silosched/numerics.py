"""Dense linear algebra, a small analytic-gradient MLP, and robust statistics.

All vectors are 1-D float64 numpy arrays; matrices are 2-D. Forward passes
return a tape object that must be handed back to the matching backward call
(a tape from stale parameters raises StaleTapeError). No autodiff: every
gradient here is derived by hand and checked against finite differences in
the test suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


class EmptyFeasibleSet(ValueError):
    """Raised when a softmax mask has no feasible entry."""


class StaleTapeError(RuntimeError):
    """Raised when a backward pass receives a tape from different parameters."""


def as_vec(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected 1-D vector, got shape {v.shape}")
    return v


# ---------------------------------------------------------------- layers


@dataclass
class LinearLayer:
    """Affine map y = W x + b with weights [out, in] and bias [out]."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-D and bias 1-D")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} != rows {self.weights.shape[0]}"
            )

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    @classmethod
    def random(cls, rng: np.random.Generator, out_dim: int, in_dim: int) -> "LinearLayer":
        # uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]
        bound = 1.0 / math.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        b = rng.uniform(-bound, bound, size=out_dim)
        return cls(w, b)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_flat(cls, flat: np.ndarray, out_dim: int, in_dim: int) -> "LinearLayer":
        n_w = out_dim * in_dim
        return cls(flat[:n_w].reshape(out_dim, in_dim).copy(), flat[n_w:n_w + out_dim].copy())


@dataclass
class LinearTape:
    """Cached input of one linear forward pass, bound to its layer."""

    layer: LinearLayer
    x: np.ndarray


def linear_forward(layer: LinearLayer, x: np.ndarray) -> Tuple[np.ndarray, LinearTape]:
    """y = W x + b. Accepts x of shape [in] or batched [..., in]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != layer in_dim {layer.in_dim}")
    y = x @ layer.weights.T + layer.bias
    return y, LinearTape(layer, x)


def linear_backward(
    layer: LinearLayer, tape: LinearTape, upstream: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dW, db, dx) for upstream of shape [..., out].

    Batch axes are summed into the parameter gradients.
    """
    if tape.layer is not layer:
        raise StaleTapeError("tape was produced by a different layer instance")
    upstream = np.asarray(upstream, dtype=np.float64)
    x = tape.x
    if x.ndim == 1:
        dw = np.outer(upstream, x)
        db = upstream.copy()
    else:
        flat_up = upstream.reshape(-1, layer.out_dim)
        flat_x = x.reshape(-1, layer.in_dim)
        dw = flat_up.T @ flat_x
        db = flat_up.sum(axis=0)
    dx = upstream @ layer.weights
    return dw, db, dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(pre: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient through max(0, pre); the subgradient at 0 is taken as 0."""
    return np.where(pre > 0.0, upstream, 0.0)


# ---------------------------------------------------------------- MLP


@dataclass
class MlpTape:
    net: "Mlp"
    layer_tapes: List[LinearTape]
    pre_activations: List[np.ndarray]


@dataclass
class Mlp:
    """Fixed-topology MLP: linear layers with ReLU between them, linear output."""

    layers: List[LinearLayer]

    @classmethod
    def random(cls, rng: np.random.Generator, dims: Sequence[int]) -> "Mlp":
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        return cls([LinearLayer.random(rng, dims[i + 1], dims[i]) for i in range(len(dims) - 1)])

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, MlpTape]:
        tapes: List[LinearTape] = []
        pres: List[np.ndarray] = []
        h = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h, tape = linear_forward(layer, h)
            tapes.append(tape)
            if i != last:
                pres.append(h)
                h = relu(h)
        return h, MlpTape(self, tapes, pres)

    def backward(
        self, tape: MlpTape, upstream: np.ndarray
    ) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Exact gradients of sum(upstream * output) w.r.t. all params and the input.

        Returns ([(dW, db) per layer, input order], dx).
        """
        if tape.net is not self:
            raise StaleTapeError("tape was produced by a different network instance")
        grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)  # type: ignore
        g = np.asarray(upstream, dtype=np.float64)
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            dw, db, g = linear_backward(self.layers[i], tape.layer_tapes[i], g)
            grads[i] = (dw, db)
            if i > 0:
                g = relu_backward(tape.pre_activations[i - 1], g)
        return grads, g

    def flatten(self) -> np.ndarray:
        return np.concatenate([l.flatten() for l in self.layers])

    def load_flat(self, flat: np.ndarray) -> "Mlp":
        """New Mlp with the same topology and parameters taken from `flat`."""
        layers = []
        off = 0
        for l in self.layers:
            n = l.n_params
            layers.append(LinearLayer.from_flat(flat[off:off + n], l.out_dim, l.in_dim))
            off += n
        if off != flat.size:
            raise ValueError(f"flat size {flat.size} != parameter count {off}")
        return Mlp(layers)


def flatten_grads(grads: List[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for dw, db in grads:
        parts.append(dw.ravel())
        parts.append(db)
    return np.concatenate(parts)


# ---------------------------------------------------------------- softmax / similarity


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over entries where mask is true; masked entries are exactly 0.

    Works on the last axis for batched inputs. Computed with a max shift over
    the feasible entries for numerical stability.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if scores.shape != mask.shape:
        raise ValueError(f"scores shape {scores.shape} != mask shape {mask.shape}")
    if not mask.any(axis=-1).all():
        raise EmptyFeasibleSet("mask has no feasible entry")
    shifted = np.where(mask, scores, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    exp = np.where(mask, np.exp(shifted), 0.0)
    return exp / exp.sum(axis=-1, keepdims=True)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """a.b / (|a||b|); 0 when either norm is below 1e-12 (neutral for zero fingerprints)."""
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------- robust stats


def median_mad(xs: Sequence[float]) -> Tuple[float, float]:
    """(median, median absolute deviation), both with the mean-of-two-middles convention."""
    arr = np.asarray(xs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("median_mad of empty input")
    med = float(np.median(arr))
    mad = float(np.median(np.abs(arr - med)))
    return med, mad


def empirical_cvar(xs: Sequence[float], alpha: float) -> Tuple[float, float]:
    """Nearest-rank sample quantile and the tail mean beyond it.

    eta_hat is the ceil(alpha*B)-th order statistic (1-indexed, ascending);
    cvar = eta_hat + (1 / ((1-alpha) B)) * sum(max(0, x - eta_hat)).
    """
    arr = np.sort(np.asarray(xs, dtype=np.float64))
    b = arr.size
    if b == 0:
        raise ValueError("empirical_cvar of empty sample")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    rank = max(1, math.ceil(alpha * b))
    eta_hat = float(arr[rank - 1])
    excess = np.maximum(arr - eta_hat, 0.0).sum()
    cvar = eta_hat + excess / ((1.0 - alpha) * b)
    return eta_hat, float(cvar)

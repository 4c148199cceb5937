"""MLP feature extractor with a cosine-prototype classification head.

All parameters live in one flat float64 vector so that masks and sparse
residuals can address any scalar by a single global index.  Layer ``i`` maps
``x @ W_i + b_i``; hidden layers apply the activation, the last layer is a
linear projection to the feature space.  Logits are cosine similarities
between the normalized feature and each normalized prototype, divided by the
temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .tensor import Rng, ShapeError

NORM_EPS = 1e-12


class Block(NamedTuple):
    name: str
    kind: str  # "weight", "bias" or "proto"
    layer: int
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    feature_dim: int
    n_classes: int
    activation: str = "tanh"
    temperature: float = 0.07
    blocks: tuple[Block, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if len(self.hidden_dims) < 1:
            raise ValueError("need at least one hidden layer")
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim, self.n_classes)
        if min(dims) < 1:
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        blocks = []
        offset = 0
        widths = self.layer_widths
        for i in range(len(widths) - 1):
            for kind, shape in (("weight", (widths[i], widths[i + 1])), ("bias", (widths[i + 1],))):
                b = Block(f"{kind[0]}{i}", kind, i, shape, offset)
                blocks.append(b)
                offset += b.size
        blocks.append(Block("prototypes", "proto", len(widths) - 1,
                            (self.n_classes, self.feature_dim), offset))
        object.__setattr__(self, "blocks", tuple(blocks))

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.feature_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    @property
    def size(self) -> int:
        last = self.blocks[-1]
        return last.offset + last.size

    def indices(self, *kinds: str) -> np.ndarray:
        """Sorted global indices of every block whose kind is in ``kinds``."""
        parts = [np.arange(b.offset, b.offset + b.size) for b in self.blocks if b.kind in kinds]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(parts).astype(np.int64)

    def maskable_indices(self, include_head: bool = True) -> np.ndarray:
        kinds = ("weight", "proto") if include_head else ("weight",)
        return self.indices(*kinds)

    def matrix_blocks(self, include_head: bool = False) -> list[Block]:
        kinds = ("weight", "proto") if include_head else ("weight",)
        return [b for b in self.blocks if b.kind in kinds]


class ParamSet:
    """Flat parameter vector viewed through a :class:`NetworkSpec` layout."""

    __slots__ = ("spec", "flat")

    def __init__(self, spec: NetworkSpec, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.size,):
            raise ShapeError(f"expected flat vector of length {spec.size}, got {flat.shape}")
        self.spec = spec
        self.flat = flat

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "ParamSet":
        return cls(spec, np.zeros(spec.size))

    def block(self, b: Block) -> np.ndarray:
        return self.flat[b.slice].reshape(b.shape)

    def weight(self, i: int) -> np.ndarray:
        return self.block(self.spec.blocks[2 * i])

    def bias(self, i: int) -> np.ndarray:
        return self.block(self.spec.blocks[2 * i + 1])

    @property
    def prototypes(self) -> np.ndarray:
        return self.block(self.spec.blocks[-1])

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, self.flat.copy())

    def replace(self, flat: np.ndarray) -> "ParamSet":
        return ParamSet(self.spec, flat)

    def __len__(self) -> int:
        return self.spec.size

    def __repr__(self) -> str:
        return f"ParamSet(size={self.spec.size}, norm={np.linalg.norm(self.flat):.4g})"


def init_params(spec: NetworkSpec, rng: Rng) -> ParamSet:
    """Scaled-Gaussian init (std 1/sqrt(fan_in)), zero biases, Gaussian prototypes."""
    p = ParamSet.zeros(spec)
    for b in spec.blocks:
        if b.kind == "weight":
            p.flat[b.slice] = rng.standard_normal(b.size) / np.sqrt(b.shape[0])
        elif b.kind == "proto":
            p.flat[b.slice] = rng.standard_normal(b.size)
    return p


@dataclass(frozen=True)
class LossKind:
    """Cross-entropy, or logit-adjusted cross-entropy when ``priors`` is set."""

    priors: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.priors is not None:
            pri = np.asarray(self.priors, dtype=np.float64)
            if np.any(pri <= 0) or abs(pri.sum() - 1.0) > 1e-9:
                raise ValueError("priors must be positive and sum to 1")
            object.__setattr__(self, "priors", tuple(float(v) for v in pri))

    @classmethod
    def cross_entropy(cls) -> "LossKind":
        return cls(None)

    @classmethod
    def logit_adjusted(cls, priors) -> "LossKind":
        return cls(tuple(priors))

    @property
    def name(self) -> str:
        return "ce" if self.priors is None else "la"

    def offsets(self, n_classes: int) -> np.ndarray:
        if self.priors is None:
            return np.zeros(n_classes)
        if len(self.priors) != n_classes:
            raise ShapeError(f"{len(self.priors)} priors for {n_classes} classes")
        return np.log(np.asarray(self.priors))


CROSS_ENTROPY = LossKind()


def _act(spec: NetworkSpec, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)


def _act_grad(spec: NetworkSpec, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if spec.activation == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(np.float64)


def _check_input(params: ParamSet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ShapeError(f"expected input of shape (batch, {params.spec.input_dim}), got {x.shape}")
    return x


def features(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Unnormalized features ``h(x)``, shape (batch, feature_dim)."""
    h = _check_input(params, x)
    spec = params.spec
    for i in range(spec.n_layers):
        h = h @ params.weight(i) + params.bias(i)
        if i < spec.n_layers - 1:
            h = _act(spec, h)
    return h


def normalize_rows(v: np.ndarray) -> np.ndarray:
    return v / (np.linalg.norm(v, axis=1, keepdims=True) + NORM_EPS)


def head_logits(feats: np.ndarray, prototypes: np.ndarray, temperature: float) -> np.ndarray:
    return normalize_rows(feats) @ normalize_rows(prototypes).T / temperature


def forward(params: ParamSet, x: np.ndarray) -> np.ndarray:
    return head_logits(features(params, x), params.prototypes, params.spec.temperature)


def predict(params: ParamSet, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, x), axis=1)


def regress(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Scalar regression readout: unnormalized features dotted with prototype row 0."""
    return features(params, x) @ params.prototypes[0]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(logits: np.ndarray, labels: np.ndarray, kind: LossKind = CROSS_ENTROPY) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits + kind.offsets(logits.shape[1])
    logp = _log_softmax(z)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _normalize_backward(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    # d/dv of v / (|v| + eps), applied row-wise to the upstream gradient g
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    denom = norm + NORM_EPS
    safe = np.where(norm > 0, norm, 1.0)
    dot = np.sum(v * g, axis=1, keepdims=True)
    return g / denom - v * dot / (denom * denom * safe)


def backward(params: ParamSet, x: np.ndarray, labels: np.ndarray,
             kind: LossKind = CROSS_ENTROPY) -> tuple[float, ParamSet]:
    """Mean loss and its exact gradient with respect to every parameter."""
    spec = params.spec
    x = _check_input(params, x)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]

    pre, post = [], [x]
    h = x
    for i in range(spec.n_layers):
        z = h @ params.weight(i) + params.bias(i)
        pre.append(z)
        h = _act(spec, z) if i < spec.n_layers - 1 else z
        post.append(h)
    feats = h
    protos = params.prototypes
    fh = normalize_rows(feats)
    ph = normalize_rows(protos)
    logits = fh @ ph.T / spec.temperature

    logp = _log_softmax(logits + kind.offsets(spec.n_classes))
    value = float(-logp[np.arange(n), labels].mean())
    dz = np.exp(logp)
    dz[np.arange(n), labels] -= 1.0
    dz /= n

    grad = ParamSet.zeros(spec)
    dfh = dz @ ph / spec.temperature
    dph = dz.T @ fh / spec.temperature
    grad.prototypes[...] = _normalize_backward(protos, dph)
    dh = _normalize_backward(feats, dfh)
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1:
            dh = dh * _act_grad(spec, pre[i], post[i + 1])
        grad.weight(i)[...] = post[i].T @ dh
        grad.bias(i)[...] = dh.sum(axis=0)
        if i > 0:
            dh = dh @ params.weight(i).T
    return value, grad


def class_mean_prototypes(params: ParamSet, x: np.ndarray, y: np.ndarray,
                          n_classes: int | None = None) -> np.ndarray:
    """Mean normalized feature of each class, used to (re)initialize the head."""
    n_classes = params.spec.n_classes if n_classes is None else n_classes
    fh = normalize_rows(features(params, x))
    protos = np.zeros((n_classes, params.spec.feature_dim))
    for c in range(n_classes):
        sel = y == c
        if not np.any(sel):
            raise ValueError(f"probe set has no samples of class {c}")
        protos[c] = fh[sel].mean(axis=0)
    return protos


def with_head(params: ParamSet, spec: NetworkSpec, prototypes: np.ndarray) -> ParamSet:
    """Copy the feature extractor of ``params`` under ``spec`` with a new head.

    ``spec`` may differ from ``params.spec`` only in the class count.
    """
    old = params.spec
    if (old.input_dim, old.hidden_dims, old.feature_dim) != (spec.input_dim, spec.hidden_dims, spec.feature_dim):
        raise ShapeError("feature extractor shapes differ")
    out = ParamSet.zeros(spec)
    body = spec.blocks[-1].offset
    out.flat[:body] = params.flat[:body]
    out.prototypes[...] = prototypes
    return out

"""Residual parameterizations shared by every finetuning method.

A finetuned model is always ``anchor + residual``.  The residual is either
dense, a :class:`SparseDelta` holding values only at a kept index set ``S``
(scaled by ``1/(1-p)`` for mixout-style methods), or a low-rank
:class:`LoraDelta`.  After training the residual is folded into the anchor,
so inference runs on a plain :class:`~maskft.net.ParamSet`.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .net import Block, NetworkSpec, ParamSet
from .tensor import ShapeError

METHODS = ("full", "linear-probe", "lora", "random-mask", "mixout", "gmixout", "moving-avg")
MASKED_METHODS = ("random-mask", "mixout", "gmixout")


@dataclass(frozen=True)
class MethodKind:
    """Finetuning method selector and its method-specific knobs.

    ``p`` is the masking probability (sparsity ``1 - p``), ``lam`` the anchor
    EMA coefficient and ``episodes``/``period`` the number of gmixout episodes
    or the number of steps per episode (``period`` wins when both are set).
    ``mask_head`` puts the prototype matrix under the mask (or under LoRA);
    otherwise the head is trained densely.
    """

    name: str
    p: float = 0.0
    rank: int = 8
    alpha: float | None = None
    lam: float = 0.5
    episodes: int | None = 30
    period: int | None = None
    mask_head: bool = True
    ema: float = 0.99

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}; expected one of {', '.join(METHODS)}")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"p must lie in [0, 1), got {self.p}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.episodes is not None and self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.period is not None and self.period < 1:
            raise ValueError("period must be >= 1")
        if self.name == "gmixout" and self.episodes is None and self.period is None:
            raise ValueError("gmixout needs episodes or period")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema must lie in [0, 1)")

    @property
    def sparsity(self) -> float:
        return 1.0 - self.p

    @property
    def rescale(self) -> float:
        return rescale_for(self.name, self.p)


class SparseDelta:
    """Values ``Δ_S`` stored only at the sorted global indices ``S``."""

    __slots__ = ("indices", "values")

    def __init__(self, indices, values=None):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 1:
            raise ShapeError("indices must be 1-d")
        if indices.size > 1 and np.any(np.diff(indices) <= 0):
            raise ValueError("indices must be strictly increasing")
        if values is None:
            values = np.zeros(indices.size)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != indices.shape:
            raise ShapeError(f"{values.size} values for {indices.size} indices")
        if not np.all(np.isfinite(values)):
            raise ValueError("sparse delta values must be finite")
        self.indices = indices
        self.values = values

    @classmethod
    def empty(cls) -> "SparseDelta":
        return cls(np.zeros(0, dtype=np.int64))

    @property
    def stored_values(self) -> int:
        """Number of float values actually held in memory."""
        return int(self.values.size)

    def __len__(self) -> int:
        return int(self.indices.size)

    def check_bounds(self, size: int) -> None:
        if self.indices.size and (self.indices[0] < 0 or self.indices[-1] >= size):
            raise IndexError(f"sparse index out of range for parameter vector of length {size}")

    def scatter(self, size: int) -> np.ndarray:
        self.check_bounds(size)
        out = np.zeros(size)
        out[self.indices] = self.values
        return out

    def gather(self, dense: np.ndarray) -> np.ndarray:
        self.check_bounds(dense.shape[0])
        return dense[self.indices]

    def __repr__(self) -> str:
        return f"SparseDelta(nnz={self.indices.size})"


@dataclass
class LoraDelta:
    """Per weight matrix factors ``A`` (m×r) and ``B`` (r×n); residual ``alpha*A@B``."""

    spec: NetworkSpec
    blocks: list[Block]
    a: list[np.ndarray]
    b: list[np.ndarray]
    rank: int
    alpha: float

    @classmethod
    def init(cls, spec: NetworkSpec, rank: int, alpha: float | None, rng,
             include_head: bool = False) -> "LoraDelta":
        """A = 0 and B ~ N(0, 1/r) so the initial residual is exactly zero."""
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        blocks = spec.matrix_blocks(include_head)
        a = [np.zeros((blk.shape[0], rank)) for blk in blocks]
        b = [rng.standard_normal((rank, blk.shape[1])) / np.sqrt(rank) for blk in blocks]
        return cls(spec, blocks, a, b, rank, 1.0 / rank if alpha is None else float(alpha))

    @property
    def n_params(self) -> int:
        return sum(a.size + b.size for a, b in zip(self.a, self.b))

    def values(self) -> np.ndarray:
        return np.concatenate([np.concatenate([a.ravel(), b.ravel()]) for a, b in zip(self.a, self.b)])

    def set_values(self, vec: np.ndarray) -> None:
        pos = 0
        for i, (a, b) in enumerate(zip(self.a, self.b)):
            self.a[i] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
            self.b[i] = vec[pos:pos + b.size].reshape(b.shape)
            pos += b.size
        if pos != vec.size:
            raise ShapeError(f"expected {pos} LoRA values, got {vec.size}")

    def grad(self, dense_grad: np.ndarray) -> np.ndarray:
        """Chain rule from a dense flat gradient to the factor vector."""
        parts = []
        for blk, a, b in zip(self.blocks, self.a, self.b):
            g = dense_grad[blk.slice].reshape(blk.shape)
            parts.append((self.alpha * g @ b.T).ravel())
            parts.append((self.alpha * a.T @ g).ravel())
        return np.concatenate(parts)


def lora_materialize(lora: LoraDelta) -> dict[str, np.ndarray]:
    """Dense residual ``alpha*A@B`` for each adapted weight matrix, by block name."""
    out = {}
    for blk, a, b in zip(lora.blocks, lora.a, lora.b):
        if a.shape[1] != b.shape[0] or (a.shape[0], b.shape[1]) != blk.shape:
            raise ShapeError(f"LoRA factors {a.shape}, {b.shape} do not fit {blk.name}{blk.shape}")
        out[blk.name] = lora.alpha * (a @ b)
    return out


def lora_flat(lora: LoraDelta) -> np.ndarray:
    flat = np.zeros(lora.spec.size)
    by_name = {blk.name: blk for blk in lora.blocks}
    for name, m in lora_materialize(lora).items():
        flat[by_name[name].slice] = m.ravel()
    return flat


def rescale_for(method: str, p: float) -> float:
    """``1/(1-p)`` for mixout and gmixout; every other method uses 1."""
    if method in ("mixout", "gmixout"):
        return 1.0 / (1.0 - p)
    return 1.0


def add_sparse(flat: np.ndarray, delta: SparseDelta, rescale: float = 1.0) -> np.ndarray:
    """In place ``flat[S] += rescale * Δ_S``; all other entries are not touched."""
    delta.check_bounds(flat.shape[0])
    flat[delta.indices] += rescale * delta.values
    return flat


def effective_params(anchor: ParamSet, delta: SparseDelta, rescale: float = 1.0,
                     dense: SparseDelta | None = None) -> ParamSet:
    """``anchor + rescale*scatter(S, Δ_S)`` plus an optional unscaled part.

    ``dense`` carries residuals that are always trainable (biases); it is added
    with scale 1.  Coordinates outside both index sets are copied bit for bit.
    """
    if not rescale > 0:
        raise ValueError("rescale must be positive")
    flat = anchor.flat.copy()
    add_sparse(flat, delta, rescale)
    if dense is not None:
        add_sparse(flat, dense)
    return anchor.replace(flat)


def merge_for_inference(anchor: ParamSet, residual, rescale: float = 1.0,
                        dense: SparseDelta | None = None) -> ParamSet:
    """Fold a residual into the anchor, leaving a plain ParamSet.

    ``residual`` is a SparseDelta, a LoraDelta or a dense flat array.
    """
    if isinstance(residual, SparseDelta):
        return effective_params(anchor, residual, rescale, dense)
    if isinstance(residual, LoraDelta):
        flat = anchor.flat + rescale * lora_flat(residual)
    else:
        residual = np.asarray(residual, dtype=np.float64)
        if residual.shape != anchor.flat.shape:
            raise ShapeError("dense residual does not match anchor")
        flat = anchor.flat + rescale * residual
    if dense is not None:
        add_sparse(flat, dense)
    return anchor.replace(flat)


def sparse_grad_project(dense_grad: ParamSet | np.ndarray, indices: np.ndarray,
                        rescale: float = 1.0) -> np.ndarray:
    """Gradient with respect to ``Δ_S``: the dense gradient gathered at S, times rescale."""
    g = dense_grad.flat if isinstance(dense_grad, ParamSet) else np.asarray(dense_grad)
    return rescale * g[np.asarray(indices, dtype=np.int64)]


# ---------------------------------------------------------------------------
# binary container
#
# little endian throughout:
#   magic   4 bytes  b"GMXL"
#   version u32      (=1)
#   kind    u32      0 = ParamSet, 1 = SparseDelta
#   ParamSet:    u32 input_dim, u32 n_hidden, u32 hidden[n_hidden], u32 feature_dim,
#                u32 n_classes, u32 activation (0 tanh, 1 relu), f64 temperature,
#                u32 n_blocks, then per block: u32 ndim, u32 dims[ndim];
#                u64 n_values, f64 payload[n_values]
#   SparseDelta: u64 n, u64 size (global index space), i64 indices[n], f64 values[n]
# ---------------------------------------------------------------------------

MAGIC = b"GMXL"
VERSION = 1
_ACT = {"tanh": 0, "relu": 1}


class ContainerError(ValueError):
    pass


def _u32(buf: io.BytesIO) -> int:
    return struct.unpack("<I", _read(buf, 4))[0]


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ContainerError("truncated container")
    return data


def dumps(obj: ParamSet | SparseDelta, size: int | None = None) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    if isinstance(obj, ParamSet):
        s = obj.spec
        out.write(struct.pack("<II", VERSION, 0))
        out.write(struct.pack("<II", s.input_dim, len(s.hidden_dims)))
        out.write(struct.pack(f"<{len(s.hidden_dims)}I", *s.hidden_dims))
        out.write(struct.pack("<IIId", s.feature_dim, s.n_classes, _ACT[s.activation], s.temperature))
        out.write(struct.pack("<I", len(s.blocks)))
        for blk in s.blocks:
            out.write(struct.pack(f"<I{len(blk.shape)}I", len(blk.shape), *blk.shape))
        out.write(struct.pack("<Q", obj.flat.size))
        out.write(obj.flat.astype("<f8").tobytes())
    elif isinstance(obj, SparseDelta):
        if size is None:
            size = int(obj.indices[-1]) + 1 if len(obj) else 0
        obj.check_bounds(size)
        out.write(struct.pack("<II", VERSION, 1))
        out.write(struct.pack("<QQ", len(obj), size))
        out.write(obj.indices.astype("<i8").tobytes())
        out.write(obj.values.astype("<f8").tobytes())
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    return out.getvalue()


def loads(data: bytes) -> ParamSet | SparseDelta:
    buf = io.BytesIO(data)
    if _read(buf, 4) != MAGIC:
        raise ContainerError("bad magic bytes")
    version, kind = struct.unpack("<II", _read(buf, 8))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if kind == 0:
        input_dim, n_hidden = struct.unpack("<II", _read(buf, 8))
        hidden = struct.unpack(f"<{n_hidden}I", _read(buf, 4 * n_hidden))
        feature_dim, n_classes, act, temp = struct.unpack("<IIId", _read(buf, 20))
        acts = {v: k for k, v in _ACT.items()}
        spec = NetworkSpec(input_dim, hidden, feature_dim, n_classes, acts[act], temp)
        n_blocks = _u32(buf)
        shapes = []
        for _ in range(n_blocks):
            ndim = _u32(buf)
            shapes.append(struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim)))
        if tuple(shapes) != tuple(b.shape for b in spec.blocks):
            raise ContainerError("shape table does not match network layout")
        (n,) = struct.unpack("<Q", _read(buf, 8))
        flat = np.frombuffer(_read(buf, 8 * n), dtype="<f8").astype(np.float64)
        return ParamSet(spec, flat)
    if kind == 1:
        n, size = struct.unpack("<QQ", _read(buf, 16))
        idx = np.frombuffer(_read(buf, 8 * n), dtype="<i8").astype(np.int64)
        vals = np.frombuffer(_read(buf, 8 * n), dtype="<f8").astype(np.float64)
        delta = SparseDelta(idx, vals)
        delta.check_bounds(size)
        return delta
    raise ContainerError(f"unknown payload kind {kind}")


def save(path: str | Path, obj: ParamSet | SparseDelta, size: int | None = None) -> None:
    Path(path).write_bytes(dumps(obj, size))


def load(path: str | Path) -> ParamSet | SparseDelta:
    return loads(Path(path).read_bytes())

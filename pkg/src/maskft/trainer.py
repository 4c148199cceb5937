"""AdamW, warmup+cosine schedule and the masked-update training loop.

Every method trains a residual on top of an anchor:

* ``full``          dense residual on every parameter
* ``moving-avg``    full finetuning, evaluated at an EMA of the iterates
* ``linear-probe``  dense residual on the prototype matrix only
* ``lora``          low-rank residual per weight matrix, dense biases
* ``random-mask``   one fixed index set, residual stored sparsely
* ``mixout``        dense residual, fresh mask and ``1/(1-p)`` rescale every
                    step, anchor fixed
* ``gmixout``       fresh mask every ``k`` steps; at each episode boundary the
                    residual is folded into the anchor with an EMA, then reset

Weight decay acts on the residual, i.e. it pulls toward the anchor.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import net
from .net import CROSS_ENTROPY, LossKind, ParamSet
from .param import LoraDelta, MethodKind, SparseDelta, add_sparse, lora_flat
from .tensor import bernoulli_indices, stream

log = logging.getLogger(__name__)

ANCHOR_MODES = ("integrate", "literal")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, lr: float, grad_norm: float, loss: float):
        super().__init__(
            f"non-finite loss {loss} at iteration {iteration} (lr={lr:.3g}, grad norm={grad_norm:.3g})"
        )
        self.iteration = iteration
        self.lr = lr
        self.grad_norm = grad_norm


def adamw_step(values, grads, m, v, t, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """One decoupled-weight-decay Adam step; returns ``(values, m, v)``.

    ``t`` is the 1-based step count used for bias correction.
    """
    values = values * (1.0 - lr * weight_decay)
    m = beta1 * m + (1.0 - beta1) * grads
    v = beta2 * v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    values = values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return values, m, v


def lr_at(iteration: int, total: int, peak: float, warmup_fraction: float) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay to 0 at ``total``."""
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    warmup = int(round(warmup_fraction * total))
    if iteration < warmup:
        return peak * iteration / warmup
    if total == warmup:
        return peak
    progress = (iteration - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class FinetuneConfig:
    method: MethodKind
    iterations: int = 300
    lr: float = 1e-2
    weight_decay: float = 0.1
    batch_size: int = 32
    warmup_fraction: float = 0.05
    seed: int = 0
    loss: LossKind = CROSS_ENTROPY
    anchor_update: str = "integrate"
    reset_moments: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.anchor_update not in ANCHOR_MODES:
            raise ValueError(f"anchor_update must be one of {ANCHOR_MODES}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.method.name == "gmixout":
            _ = self.period  # raises when floor(T / I) == 0

    @property
    def period(self) -> int:
        """Steps per mask: ``k`` for gmixout, 1 for mixout, ``T`` otherwise."""
        m = self.method
        if m.name == "mixout":
            return 1
        if m.name != "gmixout":
            return self.iterations
        if m.period is not None:
            return m.period
        k = self.iterations // m.episodes
        if k < 1:
            raise ValueError(f"floor(T/I) = floor({self.iterations}/{m.episodes}) must be >= 1")
        return k


# ---------------------------------------------------------------------------
# residual parameterizations
# ---------------------------------------------------------------------------


class _Residual:
    """Trainable residual on top of an anchor."""

    budget = 0  # trainable scalars counted against the method's budget
    dense_params = 0  # always-trainable extras (biases)

    def values(self) -> np.ndarray:
        raise NotImplementedError

    def set_values(self, vec: np.ndarray) -> None:
        raise NotImplementedError

    def effective(self, anchor: ParamSet) -> np.ndarray:
        raise NotImplementedError

    def grad(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def merged(self, anchor: ParamSet) -> ParamSet:
        return anchor.replace(self.effective(anchor))

    @property
    def nnz(self) -> int:
        return self.budget

    @property
    def resident_delta_values(self) -> int:
        """Stored residual values, excluding the always-dense extras."""
        return self.values().size - self.dense_params


class DenseResidual(_Residual):
    def __init__(self, indices: np.ndarray, dense_params: int = 0):
        self.indices = indices
        self.delta = np.zeros(indices.size)
        self.budget = indices.size - dense_params
        self.dense_params = dense_params

    def values(self):
        return self.delta

    def set_values(self, vec):
        self.delta = vec

    def effective(self, anchor):
        flat = anchor.flat.copy()
        flat[self.indices] += self.delta
        return flat

    def grad(self, g):
        return g[self.indices]


class MaskedResidual(_Residual):
    """Sparse residual on a sampled index set plus dense always-on entries."""

    def __init__(self, maskable: np.ndarray, dense_idx: np.ndarray, p: float, rescale: float):
        self.maskable = maskable
        self.p = p
        self.rescale = rescale
        self.delta = SparseDelta.empty()
        self.dense = SparseDelta(dense_idx)
        self.dense_params = dense_idx.size

    def resample(self, rng) -> None:
        pos = bernoulli_indices(self.maskable.size, 1.0 - self.p, rng)
        self.delta = SparseDelta(self.maskable[pos])

    @property
    def budget(self):
        return len(self.delta)

    @property
    def nnz(self):
        return len(self.delta)

    def values(self):
        return np.concatenate([self.delta.values, self.dense.values])

    def set_values(self, vec):
        n = len(self.delta)
        self.delta.values = vec[:n]
        self.dense.values = vec[n:]

    def effective(self, anchor):
        flat = anchor.flat.copy()
        add_sparse(flat, self.delta, self.rescale)
        add_sparse(flat, self.dense)
        return flat

    def grad(self, g):
        return np.concatenate([self.rescale * g[self.delta.indices], g[self.dense.indices]])

    def reset(self) -> None:
        self.delta = SparseDelta(self.delta.indices)
        self.dense = SparseDelta(self.dense.indices)


class MixoutResidual(_Residual):
    """Dense residual over every maskable entry, seen through a per-step mask."""

    def __init__(self, maskable: np.ndarray, dense_idx: np.ndarray, p: float, rescale: float):
        self.maskable = maskable
        self.dense_idx = dense_idx
        self.p = p
        self.rescale = rescale
        self.delta = np.zeros(maskable.size)
        self.bias = np.zeros(dense_idx.size)
        self.pos = np.arange(maskable.size)
        self.budget = maskable.size
        self.dense_params = dense_idx.size

    def resample(self, rng) -> None:
        self.pos = bernoulli_indices(self.maskable.size, 1.0 - self.p, rng)

    @property
    def nnz(self):
        return self.pos.size

    def values(self):
        return np.concatenate([self.delta, self.bias])

    def set_values(self, vec):
        self.delta = vec[:self.maskable.size]
        self.bias = vec[self.maskable.size:]

    def effective(self, anchor):
        flat = anchor.flat.copy()
        flat[self.maskable[self.pos]] += self.rescale * self.delta[self.pos]
        flat[self.dense_idx] += self.bias
        return flat

    def grad(self, g):
        gd = np.zeros(self.maskable.size)
        gd[self.pos] = self.rescale * g[self.maskable[self.pos]]
        return np.concatenate([gd, g[self.dense_idx]])

    def merged(self, anchor):
        # the rescale makes the expected masked residual equal to the full one
        flat = anchor.flat.copy()
        flat[self.maskable] += self.delta
        flat[self.dense_idx] += self.bias
        return anchor.replace(flat)


class LoraResidual(_Residual):
    def __init__(self, lora: LoraDelta, dense_idx: np.ndarray):
        self.lora = lora
        self.dense_idx = dense_idx
        self.bias = np.zeros(dense_idx.size)
        self.budget = lora.n_params
        self.dense_params = dense_idx.size

    def values(self):
        return np.concatenate([self.lora.values(), self.bias])

    def set_values(self, vec):
        n = self.lora.n_params
        self.lora.set_values(vec[:n])
        self.bias = vec[n:]

    def effective(self, anchor):
        flat = anchor.flat + lora_flat(self.lora)
        flat[self.dense_idx] += self.bias
        return flat

    def grad(self, g):
        return np.concatenate([self.lora.grad(g), g[self.dense_idx]])


def make_residual(method: MethodKind, spec: net.NetworkSpec, seed: int) -> _Residual:
    bias = spec.indices("bias")
    proto = spec.indices("proto")
    if method.name in ("full", "moving-avg"):
        return DenseResidual(np.arange(spec.size, dtype=np.int64), dense_params=bias.size)
    if method.name == "linear-probe":
        return DenseResidual(proto)
    head_dense = np.zeros(0, dtype=np.int64) if method.mask_head else proto
    dense_idx = np.union1d(bias, head_dense).astype(np.int64)
    if method.name == "lora":
        lora = LoraDelta.init(spec, method.rank, method.alpha, stream(seed, "init", "lora"),
                              include_head=method.mask_head)
        return LoraResidual(lora, dense_idx)
    maskable = spec.maskable_indices(method.mask_head)
    if method.name == "mixout":
        return MixoutResidual(maskable, dense_idx, method.p, method.rescale)
    return MaskedResidual(maskable, dense_idx, method.p, method.rescale)


# ---------------------------------------------------------------------------
# state and logs
# ---------------------------------------------------------------------------


def checksum(params: ParamSet) -> str:
    return hashlib.sha256(params.flat.tobytes()).hexdigest()[:16]


@dataclass
class TrajectoryLog:
    rows: list[tuple[int, int, float, float, int]] = field(default_factory=list)
    anchor_checksums: list[str] = field(default_factory=list)

    def record(self, iteration, episode, loss, lr, nnz):
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("iterations must be logged in increasing order")
        self.rows.append((iteration, episode, loss, lr, nnz))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["iter", "episode", "loss", "lr", "nnz"])
        for it, ep, loss, lr, nnz in self.rows:
            w.writerow([it, ep, repr(loss), repr(lr), nnz])
        return out.getvalue()


@dataclass
class TrainState:
    anchor: ParamSet
    residual: _Residual
    m: np.ndarray
    v: np.ndarray
    iteration: int = 0
    episode: int = 0
    adam_t: int = 0
    mask_rng: np.random.Generator | None = None
    order_rng: np.random.Generator | None = None
    ema: np.ndarray | None = None

    def reset_moments(self) -> None:
        n = self.residual.values().size
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.adam_t = 0


def init_state(config: FinetuneConfig, anchor: ParamSet) -> TrainState:
    res = make_residual(config.method, anchor.spec, config.seed)
    state = TrainState(anchor.copy(), res, np.zeros(0), np.zeros(0),
                       mask_rng=stream(config.seed, "mask"), order_rng=stream(config.seed, "order"))
    if isinstance(res, (MaskedResidual, MixoutResidual)):
        res.resample(state.mask_rng)
    state.reset_moments()
    if config.method.name == "moving-avg":
        state.ema = anchor.flat.copy()
    return state


def merge_anchor(state: TrainState, config: FinetuneConfig) -> None:
    """Fold the current gmixout residual into the anchor with the EMA rule."""
    res = state.residual
    lam = config.method.lam
    if config.anchor_update == "integrate":
        flat = state.anchor.flat.copy()
    else:
        flat = lam * state.anchor.flat
    flat[res.delta.indices] += (1.0 - lam) * (res.rescale * res.delta.values)
    flat[res.dense.indices] += (1.0 - lam) * res.dense.values
    state.anchor = state.anchor.replace(flat)


def run_episode_boundary(state: TrainState, config: FinetuneConfig, resample: bool = True) -> TrainState:
    """Anchor EMA update, residual reset, moment reset and a fresh mask.

    In ``integrate`` mode the anchor moves toward the episode-end weights:
    ``Φ_i = λΦ_{i-1} + (1-λ)(Φ_{i-1} + rescale·scatter(S, Δ_S))``.  ``literal``
    mode applies ``Φ_i = λΦ_{i-1} + (1-λ)·rescale·scatter(S, Δ_S)`` verbatim.
    """
    res = state.residual
    if not isinstance(res, MaskedResidual):
        raise TypeError("episode boundaries only apply to gmixout state")
    merge_anchor(state, config)
    old_idx = np.concatenate([res.delta.indices, res.dense.indices])
    res.reset()
    if resample:
        res.resample(state.mask_rng)
        state.episode += 1
    if config.reset_moments:
        state.reset_moments()
    else:
        # carry moments by global index; newly sampled entries start at zero
        new_idx = np.concatenate([res.delta.indices, res.dense.indices])
        size = state.anchor.spec.size
        for name in ("m", "v"):
            full = np.zeros(size)
            full[old_idx] = getattr(state, name)
            setattr(state, name, full[new_idx])
    return state


def _batches(n: int, batch_size: int, rng):
    batch_size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


@dataclass
class TrainResult:
    params: ParamSet
    log: TrajectoryLog
    checkpoints: list[tuple[int, ParamSet]]
    state: TrainState
    config: FinetuneConfig
    seconds_per_step: float
    peak_resident_delta: int


def train(config: FinetuneConfig, anchor: ParamSet, x: np.ndarray, y: np.ndarray,
          on_step=None) -> TrainResult:
    """Finetune ``anchor`` on ``(x, y)`` with the configured method.

    ``on_step(state)`` is called after every optimizer step.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y lengths differ")
    method = config.method
    T = config.iterations
    k = config.period
    state = init_state(config, anchor)
    res = state.residual
    batches = _batches(x.shape[0], config.batch_size, state.order_rng)
    tlog = TrajectoryLog()
    tlog.anchor_checksums.append(checksum(state.anchor))
    checkpoints = []
    peak_resident = res.resident_delta_values
    gmix = method.name == "gmixout"
    log.debug("training %s for %d steps (k=%d, anchor update %s)", method.name, T, k, config.anchor_update)

    start = time.perf_counter()
    for it in range(T):
        if gmix and it % k == 0 and it > 0:
            run_episode_boundary(state, config)
            tlog.anchor_checksums.append(checksum(state.anchor))
        elif method.name == "mixout" and it > 0:
            res.resample(state.mask_rng)
        peak_resident = max(peak_resident, res.resident_delta_values)

        idx = next(batches)
        eff = state.anchor.replace(res.effective(state.anchor))
        lr = lr_at(it, T, config.lr, config.warmup_fraction)
        value, grad = net.backward(eff, x[idx], y[idx], config.loss)
        g = res.grad(grad.flat)
        if not np.isfinite(value) or not np.all(np.isfinite(g)):
            raise TrainingDiverged(it, lr, float(np.linalg.norm(g)), value)
        tlog.record(it, state.episode, value, lr, res.nnz)

        state.adam_t += 1
        vals, state.m, state.v = adamw_step(res.values(), g, state.m, state.v, state.adam_t,
                                            lr, config.weight_decay)
        res.set_values(vals)
        state.iteration = it + 1
        if state.ema is not None:
            state.ema = method.ema * state.ema + (1.0 - method.ema) * res.effective(state.anchor)
        if config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            checkpoints.append((state.iteration, state.anchor.replace(res.effective(state.anchor))))
        if on_step is not None:
            on_step(state)
    elapsed = time.perf_counter() - start

    if gmix:
        # terminal boundary: fold the last episode in, no new mask
        run_episode_boundary(state, config, resample=False)
        final = state.anchor.copy()
    elif state.ema is not None:
        final = state.anchor.replace(state.ema.copy())
    else:
        final = res.merged(state.anchor)
    return TrainResult(final, tlog, checkpoints, state, config, elapsed / T, peak_resident)


def effective_now(state: TrainState) -> ParamSet:
    """Training-time effective parameters of the current state."""
    return state.anchor.replace(state.residual.effective(state.anchor))

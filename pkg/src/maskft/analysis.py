"""Evaluation metrics, weight-space ensembles and analytic checks.

Includes the bias/variance/covariance/locality estimator for ensembles of
scalar regressors and the closed-form expected loss of a quadratic objective
under random Bernoulli masking with ``1/(1-p)`` rescaling.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import net
from .data import Split, SplitBundle
from .net import ParamSet
from .tensor import ShapeError


class EmptySplitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# classification metrics
# ---------------------------------------------------------------------------


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def macro_f1(cm: np.ndarray) -> float:
    """Mean per-class F1 with 0/0 treated as 0."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def per_class_recall(cm: np.ndarray) -> np.ndarray:
    support = cm.sum(axis=1)
    return np.divide(np.diag(cm), support, out=np.zeros(len(cm)), where=support > 0)


def balanced_accuracy(cm: np.ndarray) -> float:
    support = cm.sum(axis=1)
    return float(per_class_recall(cm)[support > 0].mean())


def accuracy(cm: np.ndarray) -> float:
    return float(np.trace(cm) / cm.sum())


@dataclass
class EvalReport:
    id_accuracy: float
    ood_accuracy: dict[str, float]
    balanced_accuracy: float
    macro_f1: float
    confusion: np.ndarray
    group_accuracy: dict[str, float] = field(default_factory=dict)
    ood_macro_f1: dict[str, float] = field(default_factory=dict)

    @property
    def ood_average(self) -> float:
        if not self.ood_accuracy:
            return float("nan")
        return float(np.mean(list(self.ood_accuracy.values())))

    def row(self) -> dict[str, float]:
        """Flat metric dict in a stable column order."""
        out = {"id_acc": self.id_accuracy, "ood_avg": self.ood_average,
               "balanced_acc": self.balanced_accuracy, "macro_f1": self.macro_f1}
        for g in ("many", "medium", "few"):
            out[f"{g}_acc"] = self.group_accuracy.get(g, float("nan"))
        for name in sorted(self.ood_accuracy):
            out[f"ood[{name}]"] = self.ood_accuracy[name]
        return out


def _confusion_for(predict, split: Split, n_classes: int, name: str) -> np.ndarray:
    if len(split) == 0:
        raise EmptySplitError(f"split {name!r} is empty")
    return confusion_matrix(split.y, predict(split.x), n_classes)


def evaluate_predictions(predict, bundle: SplitBundle) -> EvalReport:
    """Report for any ``predict(x) -> labels`` callable."""
    C = bundle.n_classes
    cm = _confusion_for(predict, bundle.id_test, C, "id-test")
    ood, ood_f1 = {}, {}
    for name, split in bundle.ood.items():
        ocm = _confusion_for(predict, split, C, name)
        ood[name] = accuracy(ocm)
        ood_f1[name] = macro_f1(ocm)
    recall = per_class_recall(cm)
    groups = {g: float(recall[cls].mean()) for g, cls in bundle.groups.items() if cls}
    return EvalReport(accuracy(cm), ood, balanced_accuracy(cm), macro_f1(cm), cm, groups, ood_f1)


def evaluate(params: ParamSet, bundle: SplitBundle) -> EvalReport:
    return evaluate_predictions(lambda x: net.predict(params, x), bundle)


# ---------------------------------------------------------------------------
# weight-space ensembles
# ---------------------------------------------------------------------------


def _check_same(params: list[ParamSet]) -> None:
    if not params:
        raise ValueError("need at least one parameter set")
    spec = params[0].spec
    for p in params[1:]:
        if p.spec != spec:
            raise ShapeError("parameter sets have different layouts")


def soup(params: list[ParamSet], weights=None) -> ParamSet:
    """Coordinate-wise (weighted) average of parameter sets."""
    _check_same(params)
    stack = np.stack([p.flat for p in params])
    if weights is None:
        flat = stack.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(params),):
            raise ShapeError("one weight per parameter set")
        flat = w @ stack
    return params[0].replace(flat)


def wise_ft(zero_shot: ParamSet, finetuned: ParamSet, coeff: float = 0.5) -> ParamSet:
    """``(1 - coeff) * zero_shot + coeff * finetuned``."""
    if not 0.0 <= coeff <= 1.0:
        raise ValueError("coeff must lie in [0, 1]")
    _check_same([zero_shot, finetuned])
    return zero_shot.replace((1.0 - coeff) * zero_shot.flat + coeff * finetuned.flat)


# ---------------------------------------------------------------------------
# bias / variance / covariance / locality
# ---------------------------------------------------------------------------


@dataclass
class BVCLReport:
    bias_squared: float
    variance: float
    covariance: float
    locality: float
    n_members: int
    reconstructed_error: float
    direct_error: float
    mode: str

    def row(self) -> dict[str, float]:
        return {"mode": self.mode, "n_members": self.n_members, "bias2": self.bias_squared,
                "variance": self.variance, "covariance": self.covariance, "locality": self.locality,
                "reconstructed": self.reconstructed_error, "direct": self.direct_error}


def bvcl_terms(preds: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Dataset-averaged bias², variance and pairwise covariance of member predictions.

    ``preds`` has shape (members, samples).  Covariance averages over all
    ordered member pairs ``i != j`` with the unbiased ``1/(M(M-1))`` weight.
    """
    M = preds.shape[0]
    fbar = preds.mean(axis=0)
    dev = preds - fbar
    bias2 = (y - fbar) ** 2
    var = (dev ** 2).mean(axis=0)
    total = dev.sum(axis=0)
    cov = (total ** 2 - (dev ** 2).sum(axis=0)) / (M * (M - 1))
    return float(bias2.mean()), float(var.mean()), float(cov.mean())


def bvcl_estimate(models: list[ParamSet], x: np.ndarray, y: np.ndarray,
                  mode: str = "prediction-ensemble") -> BVCLReport:
    """Decompose the squared error of an ensemble of scalar regressors.

    ``prediction-ensemble`` scores the average prediction (the decomposition is
    then exact); ``weight-average`` scores the single model at the averaged
    weights, which matches the decomposition up to a term quadratic in the
    spread of the member weights.
    """
    if len(models) < 2:
        raise ValueError("need at least two members: covariance is undefined for one")
    if mode not in ("prediction-ensemble", "weight-average"):
        raise ValueError(f"unknown mode {mode!r}")
    _check_same(models)
    y = np.asarray(y, dtype=np.float64)
    preds = np.stack([net.regress(m, x) for m in models])
    M = len(models)
    bias2, var, cov = bvcl_terms(preds, y)
    wa = soup(models)
    locality = float(max(np.sum((m.flat - wa.flat) ** 2) for m in models))
    if mode == "prediction-ensemble":
        direct = float(np.mean((y - preds.mean(axis=0)) ** 2))
    else:
        direct = float(np.mean((y - net.regress(wa, x)) ** 2))
    recon = bias2 + var / M + (M - 1) / M * cov
    return BVCLReport(bias2, var, cov, locality, M, recon, direct, mode)


# ---------------------------------------------------------------------------
# quadratic model of masked updates
# ---------------------------------------------------------------------------


@dataclass
class QuadraticProblem:
    """``L(Φ0 + d) = c + g·d + ½ dᵀHd`` around the anchor."""

    g: np.ndarray
    H: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        self.H = np.asarray(self.H, dtype=np.float64)
        n = self.g.size
        if self.H.shape != (n, n):
            raise ShapeError("Hessian must be n×n for an n-vector gradient")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-12:
            raise ValueError("Hessian must be symmetric")
        if n and np.linalg.eigvalsh(self.H)[0] < -1e-12:
            raise ValueError("Hessian must be positive semidefinite")

    @classmethod
    def random(cls, n: int, rng, with_gradient: bool = True, min_eig: float = 0.1) -> "QuadraticProblem":
        a = rng.standard_normal((n, n))
        H = a @ a.T / n + min_eig * np.eye(n)
        H = 0.5 * (H + H.T)
        g = rng.standard_normal(n) if with_gradient else np.zeros(n)
        return cls(g, H, float(rng.standard_normal()))

    def value(self, d: np.ndarray) -> np.ndarray:
        """Loss at ``Φ0 + d``; ``d`` may be a batch of shape (..., n)."""
        d = np.asarray(d, dtype=np.float64)
        return self.c + d @ self.g + 0.5 * np.einsum("...i,ij,...j->...", d, self.H, d)

    @property
    def strong_convexity(self) -> float:
        return float(np.linalg.eigvalsh(self.H)[0])

    @property
    def min_diagonal(self) -> float:
        return float(np.min(np.diag(self.H)))


def mixout_quadratic_expected_loss(problem: QuadraticProblem, delta: np.ndarray, p: float) -> float:
    """Exact ``E_M[L(Φ0 + M⊙Δ/(1-p))]`` for independent Bernoulli(1-p) masks."""
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    delta = np.asarray(delta, dtype=np.float64)
    penalty = p / (2.0 * (1.0 - p)) * float(np.sum(np.diag(problem.H) * delta ** 2))
    return float(problem.value(delta)) + penalty


def mixout_lower_bound(problem: QuadraticProblem, delta: np.ndarray, p: float,
                       curvature: float | None = None) -> float:
    """``L(Φ0) + μ/(2(1-p))·‖Δ‖²`` with μ the strong-convexity constant by default."""
    mu = problem.strong_convexity if curvature is None else curvature
    return problem.c + mu / (2.0 * (1.0 - p)) * float(np.sum(np.asarray(delta) ** 2))


def mixout_quadratic_monte_carlo(problem: QuadraticProblem, delta: np.ndarray, p: float,
                                 n_masks: int, rng, chunk: int = 200_000) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the masked loss."""
    delta = np.asarray(delta, dtype=np.float64)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_masks:
        m = min(chunk, n_masks - done)
        keep = rng.random((m, delta.size)) < 1.0 - p
        vals = problem.value(keep * delta / (1.0 - p))
        total += vals.sum()
        total_sq += (vals ** 2).sum()
        done += m
    mean = total / n_masks
    var = max(total_sq / n_masks - mean ** 2, 0.0) * n_masks / (n_masks - 1)
    return float(mean), float(np.sqrt(var / n_masks))


# ---------------------------------------------------------------------------
# training cost counters
# ---------------------------------------------------------------------------


@dataclass
class TrainingCost:
    method: str
    trainable_params: int
    dense_params: int
    resident_delta_values: int
    resident_values: int
    madds_forward: int
    madds_step: int
    seconds_per_step: float

    def row(self, with_time: bool = False) -> dict:
        out = {"trainable_params": self.trainable_params, "dense_params": self.dense_params,
               "resident_delta": self.resident_delta_values, "resident_values": self.resident_values,
               "madds_forward": self.madds_forward, "madds_step": self.madds_step}
        if with_time:
            out["seconds_per_step"] = self.seconds_per_step
        return out


def forward_madds(spec: net.NetworkSpec, batch: int) -> int:
    """Multiply-adds of one forward pass: every linear layer plus the prototype head."""
    widths = spec.layer_widths
    per_sample = sum(widths[i] * widths[i + 1] for i in range(len(widths) - 1))
    per_sample += spec.feature_dim * spec.n_classes
    return per_sample * batch


def training_cost_report(result) -> TrainingCost:
    """Counters for a finished :func:`maskft.trainer.train` run."""
    cfg = result.config
    spec = result.params.spec
    res = result.state.residual
    batch = cfg.batch_size
    fwd = forward_madds(spec, batch)
    name = cfg.method.name
    if name == "linear-probe":
        # backward only reaches the head: weight gradient plus prototype normalization
        step = fwd + 2 * spec.feature_dim * spec.n_classes * batch
    else:
        step = 3 * fwd
        if name == "lora":
            lora = res.lora
            # materialize alpha*A@B and two factor gradients per adapted matrix
            step += sum(3 * lora.rank * blk.shape[0] * blk.shape[1] for blk in lora.blocks)
    trainable = res.budget
    delta_values = result.peak_resident_delta
    n_values = delta_values + res.dense_params
    return TrainingCost(name, int(trainable), int(res.dense_params), int(delta_values),
                        int(3 * n_values), int(fwd), int(step), float(result.seconds_per_step))


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return out.getvalue()

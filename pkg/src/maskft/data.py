"""Synthetic in-distribution / shifted task generators and CSV ingestion.

Classes are Gaussian clusters around unit-norm means.  Shifted test sets are
produced from fresh clean draws:

* ``rotation``: every input is rotated by a fixed orthogonal map that turns
  every vector by the same angle (equal rotation in ``d/2`` random planes)
* ``noise``: additive isotropic Gaussian corruption
* ``longtail``: exponentially decaying train counts with a balanced test set

The pretraining split is a broader superset task: more classes, and inputs
rotated by angles drawn across the whole shift range, so that an anchor
trained on it is robust to the downstream shifts.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .param import MAGIC, VERSION, ContainerError
from .tensor import stream

SPLIT_NAMES = ("pretrain", "id-train", "id-val", "id-test")


@dataclass(frozen=True)
class Shift:
    kind: str  # "rotation" (degrees), "noise" (std) or "longtail" (imbalance ratio)
    value: float

    def __post_init__(self):
        if self.kind not in ("rotation", "noise", "longtail"):
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if self.kind == "noise" and self.value < 0:
            raise ValueError("noise std must be non-negative")
        if self.kind == "longtail" and not 0 < self.value <= 1:
            raise ValueError("imbalance ratio must lie in (0, 1]")

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.value:g}"

    @classmethod
    def parse(cls, text: str) -> "Shift":
        kind, _, value = text.strip().partition(":")
        if not value:
            raise ValueError(f"shift {text!r} should look like kind:value")
        return cls(kind.strip(), float(value))


@dataclass(frozen=True)
class TaskSpec:
    n_classes: int = 6
    input_dim: int = 16
    samples_per_class: int = 40
    shifts: tuple[Shift, ...] = (Shift("rotation", 60.0),)
    seed: int = 0
    cluster_std: float = 0.35
    val_per_class: int = 20
    test_per_class: int = 100
    pretrain_classes: int = 12
    pretrain_per_class: int = 200
    pretrain_max_angle: float = 90.0
    probe_per_class: int = 5

    def __post_init__(self):
        object.__setattr__(self, "shifts", tuple(self.shifts))
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2")
        if self.pretrain_classes < self.n_classes:
            raise ValueError("pretraining task must contain the downstream classes")
        if min(self.samples_per_class, self.test_per_class, self.pretrain_per_class) < 1:
            raise ValueError("per-class sample counts must be >= 1")
        if self.cluster_std < 0:
            raise ValueError("cluster_std must be non-negative")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    source_x: np.ndarray | None = None  # clean inputs before a covariate shift

    def __len__(self) -> int:
        return int(self.y.size)

    @classmethod
    def empty(cls, dim: int) -> "Split":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    def counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.y, minlength=n_classes)


@dataclass
class SplitBundle:
    n_classes: int
    pretrain: Split
    id_train: Split
    id_val: Split
    id_test: Split
    ood: dict[str, Split] = field(default_factory=dict)
    pretrain_classes: int = 0
    rotations: dict[str, np.ndarray] = field(default_factory=dict)
    groups: dict[str, list[int]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def splits(self) -> dict[str, Split]:
        out = {"pretrain": self.pretrain, "id-train": self.id_train,
               "id-val": self.id_val, "id-test": self.id_test}
        out.update({f"ood:{k}": v for k, v in self.ood.items()})
        return out

    def manifest(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "pretrain_classes": self.pretrain_classes,
            "class_counts": {k: s.counts(max(self.n_classes, self.pretrain_classes)).tolist()
                             for k, s in self.splits().items()},
            "groups": self.groups,
            **self.meta,
        }


def rotation_basis(dim: int, seed: int) -> np.ndarray:
    """Random orthonormal basis shared by every rotation of one task."""
    basis, _ = np.linalg.qr(stream(seed, "task", "rotation-basis").standard_normal((dim, dim)))
    return basis


def rotation_matrix(basis: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate by ``degrees`` in each consecutive plane of ``basis`` (one fixed axis when dim is odd)."""
    dim = basis.shape[0]
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    block = np.eye(dim)
    for j in range(0, dim - 1, 2):
        block[j:j + 2, j:j + 2] = [[c, -s], [s, c]]
    return basis @ block @ basis.T


def class_means(spec: TaskSpec) -> np.ndarray:
    """Unit-norm cluster centres for every pretraining class; downstream classes come first."""
    means = stream(spec.seed, "task", "means").standard_normal((spec.pretrain_classes, spec.input_dim))
    return means / np.linalg.norm(means, axis=1, keepdims=True)


class _Ids:
    def __init__(self):
        self.next = 0

    def take(self, n: int) -> np.ndarray:
        out = np.arange(self.next, self.next + n, dtype=np.int64)
        self.next += n
        return out


def _draw(means, counts, std, rng, ids: _Ids) -> Split:
    y = np.repeat(np.arange(len(counts)), counts).astype(np.int64)
    x = means[y] + std * rng.standard_normal((y.size, means.shape[1]))
    return Split(x, y, ids.take(y.size))


def _shifted(shift: Shift, clean: Split, basis: np.ndarray, seed: int) -> tuple[Split, np.ndarray | None]:
    if shift.kind == "rotation":
        rot = rotation_matrix(basis, shift.value)
        return Split(clean.x @ rot.T, clean.y, clean.ids, source_x=clean.x), rot
    noise_rng = stream(seed, "data", "corruption", shift.name)
    noise = shift.value * noise_rng.standard_normal(clean.x.shape) if shift.value > 0 else 0.0
    return Split(clean.x + noise, clean.y, clean.ids, source_x=clean.x), None


def _pretrain_split(spec: TaskSpec, means, basis, ids: _Ids) -> Split:
    rng = stream(spec.seed, "data", "pretrain")
    counts = np.full(spec.pretrain_classes, spec.pretrain_per_class)
    split = _draw(means, counts, spec.cluster_std, rng, ids)
    angles = rng.uniform(-spec.pretrain_max_angle, spec.pretrain_max_angle, size=len(split))
    # equal-angle rotations in shared planes compose additively, so rotate per sample in closed form
    coords = split.x @ basis
    theta = np.deg2rad(angles)
    c, s = np.cos(theta), np.sin(theta)
    out = coords.copy()
    for j in range(0, spec.input_dim - 1, 2):
        out[:, j] = c * coords[:, j] - s * coords[:, j + 1]
        out[:, j + 1] = s * coords[:, j] + c * coords[:, j + 1]
    split.x = out @ basis.T
    return split


def longtail_counts(n_max: int, n_classes: int, ratio: float) -> np.ndarray:
    """``n_c = round(n_max * ratio^(c/(C-1)))``, at least 1."""
    if not 0 < ratio <= 1:
        raise ValueError("imbalance ratio must lie in (0, 1]")
    if n_classes == 1:
        return np.array([n_max])
    c = np.arange(n_classes)
    return np.maximum(1, np.round(n_max * ratio ** (c / (n_classes - 1)))).astype(np.int64)


def count_groups(counts: np.ndarray) -> dict[str, list[int]]:
    """Many / medium / few partition by the 66th and 33rd count percentiles."""
    hi, lo = np.percentile(counts, [66, 33])
    many = [int(c) for c in np.flatnonzero(counts > hi)]
    few = [int(c) for c in np.flatnonzero(counts < lo)]
    medium = [int(c) for c in range(len(counts)) if c not in many and c not in few]
    return {"many": many, "medium": medium, "few": few}


def _build(spec: TaskSpec, train_counts: np.ndarray) -> SplitBundle:
    means = class_means(spec)
    basis = rotation_basis(spec.input_dim, spec.seed)
    ids = _Ids()
    down = means[:spec.n_classes]
    pre = _pretrain_split(spec, means, basis, ids)
    train = _draw(down, train_counts, spec.cluster_std, stream(spec.seed, "data", "id-train"), ids)
    val = _draw(down, np.full(spec.n_classes, spec.val_per_class), spec.cluster_std,
                stream(spec.seed, "data", "id-val"), ids)
    test_counts = np.full(spec.n_classes, spec.test_per_class)
    test = _draw(down, test_counts, spec.cluster_std, stream(spec.seed, "data", "id-test"), ids)
    bundle = SplitBundle(spec.n_classes, pre, train, val, test, pretrain_classes=spec.pretrain_classes)
    for shift in spec.shifts:
        if shift.kind == "longtail":
            continue
        clean = _draw(down, test_counts, spec.cluster_std, stream(spec.seed, "data", "ood", shift.name), ids)
        split, rot = _shifted(shift, clean, basis, spec.seed)
        bundle.ood[shift.name] = split
        if rot is not None:
            bundle.rotations[shift.name] = rot
    bundle.meta = {"task": _spec_dict(spec)}
    return bundle


def _spec_dict(spec: TaskSpec) -> dict:
    d = asdict(spec)
    d["shifts"] = [s.name for s in spec.shifts]
    return d


def make_cluster_task(spec: TaskSpec) -> SplitBundle:
    """Balanced cluster task with one shifted test split per configured shift."""
    return _build(spec, np.full(spec.n_classes, spec.samples_per_class))


def make_longtail(spec: TaskSpec, ratio: float | None = None) -> SplitBundle:
    """Cluster task whose training counts decay exponentially; test stays balanced.

    ``ratio`` defaults to the first ``longtail`` entry of ``spec.shifts``, else 0.01.
    """
    if ratio is None:
        lt = [s.value for s in spec.shifts if s.kind == "longtail"]
        ratio = lt[0] if lt else 0.01
    counts = longtail_counts(spec.samples_per_class, spec.n_classes, ratio)
    bundle = _build(spec, counts)
    bundle.groups = count_groups(counts)
    bundle.meta["imbalance_ratio"] = ratio
    bundle.meta["train_counts"] = counts.tolist()
    return bundle


def make_task(spec: TaskSpec) -> SplitBundle:
    if any(s.kind == "longtail" for s in spec.shifts):
        return make_longtail(spec)
    return make_cluster_task(spec)


def class_priors(split: Split, n_classes: int) -> np.ndarray:
    """Empirical class frequencies (each class counted at least once)."""
    counts = np.maximum(split.counts(n_classes), 1).astype(np.float64)
    return counts / counts.sum()


def probe_set(bundle: SplitBundle, per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``per_class`` samples of each downstream class from a shuffled pretraining split."""
    order = stream(seed, "probe").permutation(len(bundle.pretrain))
    xs, ys = [], []
    for c in range(bundle.n_classes):
        sel = order[bundle.pretrain.y[order] == c][:per_class]
        xs.append(bundle.pretrain.x[sel])
        ys.append(bundle.pretrain.y[sel])
    return np.concatenate(xs), np.concatenate(ys)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


class ParseError(ValueError):
    def __init__(self, message: str, lines: list[int] | None = None):
        self.lines = lines or []
        if self.lines:
            message = f"{message} (lines {', '.join(map(str, self.lines))})"
        super().__init__(message)


@dataclass(frozen=True)
class CsvSchema:
    n_classes: int
    label_column: str = "label"
    split_column: str | None = "split"
    default_split: str = "id-train"


def load_csv(path: str | Path, schema: CsvSchema) -> SplitBundle:
    """Parse ``features..., label[, split]`` rows into a bundle.

    Rows without a split column go to ``schema.default_split``.  Split names
    are the bundle names (``pretrain``, ``id-train``, ``id-val``, ``id-test``)
    or ``ood:<name>``.
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("no data rows")
    header = [h.strip() for h in rows[0]]
    if schema.label_column not in header:
        raise ParseError(f"header lacks label column {schema.label_column!r}", [1])
    has_split = schema.split_column is not None and schema.split_column in header
    label_at = header.index(schema.label_column)
    n_feat = label_at
    if n_feat < 1:
        raise ParseError("feature columns must precede the label column", [1])
    expected = n_feat + 1 + int(has_split)
    if len(header) != expected:
        raise ParseError(f"header should be features, label{', split' if has_split else ''}", [1])

    body = [(i + 2, r) for i, r in enumerate(rows[1:]) if any(cell.strip() for cell in r)]
    if not body:
        raise ParseError("no data rows")
    ragged = [ln for ln, r in body if len(r) != expected]
    if ragged:
        raise ParseError(f"expected {expected} cells per row", ragged)

    bad_num, bad_label, bad_split = [], [], []
    parsed: dict[str, tuple[list, list, list]] = {}
    for ln, r in body:
        try:
            feats = [float(v) for v in r[:n_feat]]
            if not all(np.isfinite(feats)):
                raise ValueError
        except ValueError:
            bad_num.append(ln)
            continue
        try:
            label = int(r[label_at].strip())
        except ValueError:
            bad_num.append(ln)
            continue
        if not 0 <= label < schema.n_classes:
            bad_label.append(ln)
            continue
        name = r[-1].strip() if has_split else schema.default_split
        if name not in SPLIT_NAMES and not (name.startswith("ood:") and len(name) > 4):
            bad_split.append(ln)
            continue
        xs, ys, lines = parsed.setdefault(name, ([], [], []))
        xs.append(feats)
        ys.append(label)
        lines.append(ln)
    if bad_num:
        raise ParseError("non-numeric cells", bad_num)
    if bad_label:
        raise ParseError(f"label outside 0..{schema.n_classes - 1}", bad_label)
    if bad_split:
        raise ParseError("unknown split name", bad_split)

    def split_of(name: str) -> Split:
        if name not in parsed:
            return Split.empty(n_feat)
        xs, ys, lines = parsed[name]
        return Split(np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64),
                     np.array(lines, dtype=np.int64) - 2)

    ood = {k[4:]: split_of(k) for k in parsed if k.startswith("ood:")}
    return SplitBundle(schema.n_classes, split_of("pretrain"), split_of("id-train"),
                       split_of("id-val"), split_of("id-test"), ood,
                       pretrain_classes=schema.n_classes, meta={"source": str(path)})


# ---------------------------------------------------------------------------
# bundle persistence: one GMXL split file per split plus manifest.json
# split payload (kind 2): u64 n, u32 d, i64 ids[n], i64 labels[n], f64 x[n*d]
# ---------------------------------------------------------------------------


def dump_split(split: Split) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, 2))
    n, d = split.x.shape
    out.write(struct.pack("<QI", n, d))
    out.write(split.ids.astype("<i8").tobytes())
    out.write(split.y.astype("<i8").tobytes())
    out.write(split.x.astype("<f8").tobytes())
    return out.getvalue()


def load_split(data: bytes) -> Split:
    if data[:4] != MAGIC:
        raise ContainerError("bad magic bytes")
    version, kind = struct.unpack_from("<II", data, 4)
    if version != VERSION or kind != 2:
        raise ContainerError("not a split container")
    n, d = struct.unpack_from("<QI", data, 12)
    pos = 24
    need = pos + 16 * n + 8 * n * d
    if len(data) != need:
        raise ContainerError("truncated container")
    ids = np.frombuffer(data, "<i8", n, pos).astype(np.int64)
    y = np.frombuffer(data, "<i8", n, pos + 8 * n).astype(np.int64)
    x = np.frombuffer(data, "<f8", n * d, pos + 16 * n).astype(np.float64).reshape(n, d)
    return Split(x, y, ids)


def save_bundle(bundle: SplitBundle, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, split in bundle.splits().items():
        fname = name.replace(":", "_") + ".gmxl"
        (directory / fname).write_bytes(dump_split(split))
        files[name] = fname
    manifest = bundle.manifest()
    manifest["files"] = files
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(directory: str | Path) -> SplitBundle:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    splits = {name: load_split((directory / f).read_bytes()) for name, f in manifest["files"].items()}
    ood = {k[4:]: v for k, v in splits.items() if k.startswith("ood:")}
    return SplitBundle(manifest["n_classes"], splits["pretrain"], splits["id-train"],
                       splits["id-val"], splits["id-test"], ood,
                       pretrain_classes=manifest["pretrain_classes"], groups=manifest.get("groups", {}))

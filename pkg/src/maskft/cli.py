"""Command line runner: config-driven sweeps, frontier plots, deltas and oracle checks.

Config files are INI text read with :mod:`configparser`.  See README.md for
the full key reference; a minimal file looks like::

    [experiment]
    seeds = 0, 1

    [method.gmixout]
    p = 0.9
    sweep.lam = 0, 0.5, 1
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import itertools
import json
import logging
import os
import re
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, analysis, data, experiment, param
from .data import CsvSchema, Shift, TaskSpec
from .param import METHODS, MethodKind
from .trainer import FinetuneConfig

log = logging.getLogger("maskft")

WORKERS_ENV = "MASKFT_WORKERS"
DEFAULT_MAX_RUNS = 500
EXTRA_METHODS = ("soup", "wise-ft")
METRIC_COLUMNS = ("id_acc", "ood_avg", "balanced_acc", "macro_f1", "many_acc", "medium_acc", "few_acc")
COST_COLUMNS = ("trainable_params", "dense_params", "resident_delta", "resident_values",
                "madds_forward", "madds_step")


class ConfigError(ValueError):
    """Invalid config; ``line`` and ``column`` point into the file when known."""

    def __init__(self, message: str, path: str = "<config>", line: int | None = None, column: int | None = None):
        self.path, self.line, self.column = path, line, column
        where = path if line is None else f"{path}:{line}:{column or 1}"
        super().__init__(f"{where}: {message}")


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _as_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _as_optional_int(v: str):
    return None if v.strip().lower() in ("none", "") else int(v)


def _as_optional_float(v: str):
    return None if v.strip().lower() in ("none", "") else float(v)


# method-section keys: name -> (converter, target); target is "method", "finetune" or "run"
METHOD_KEYS = {
    "p": (float, "method"), "sparsity": (float, "method"), "rank": (int, "method"),
    "alpha": (_as_optional_float, "method"), "lam": (float, "method"),
    "episodes": (_as_optional_int, "method"), "period": (_as_optional_int, "method"),
    "mask_head": (_as_bool, "method"), "ema": (float, "method"),
    "iterations": (int, "finetune"), "lr": (float, "finetune"), "weight_decay": (float, "finetune"),
    "batch_size": (int, "finetune"), "warmup_fraction": (float, "finetune"),
    "anchor_update": (str, "finetune"), "reset_moments": (_as_bool, "finetune"),
    "checkpoint_every": (int, "finetune"),
    "logit_adjusted": (_as_bool, "run"), "scale_lr_by_sparsity": (_as_bool, "run"),
    "n_models": (int, "run"), "coeff": (float, "run"),
}

TASK_KEYS = {
    "kind": str, "n_classes": int, "input_dim": int, "samples_per_class": int, "shifts": str,
    "cluster_std": float, "val_per_class": int, "test_per_class": int, "pretrain_classes": int,
    "pretrain_per_class": int, "pretrain_max_angle": float, "probe_per_class": int,
    "imbalance_ratio": float, "path": str, "label_column": str, "split_column": str,
}

PRETRAIN_KEYS = [f.name for f in fields(experiment.PretrainConfig)]
EXPERIMENT_KEYS = ("seeds", "output", "max_runs", "zero_shot")


@dataclass
class MethodSection:
    label: str
    method: str
    values: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)  # key -> list of values, in file order
    lines: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    path: str
    text: str
    seeds: list[int]
    output: Path
    max_runs: int
    zero_shot: bool
    task: dict
    pretrain: experiment.PretrainConfig
    methods: list[MethodSection]

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()


def _key_lines(text: str) -> dict[tuple[str, str], tuple[int, int]]:
    """(section, key) -> (line, column of the value) by a plain scan of the file."""
    out = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]\s*$", stripped)
        if m:
            section = m.group(1).strip()
            out[(section, "")] = (n, 1)
            continue
        m = re.match(r"\s*([^=:]+?)\s*[=:]\s*", raw)
        if m and section is not None:
            out[(section, m.group(1).strip().lower())] = (n, m.end() + 1)
    return out


def _split_list(v: str) -> list[str]:
    return [s.strip() for s in v.split(",") if s.strip()]


def parse_config(text: str, path: str = "<config>", base_dir: Path | None = None) -> ExperimentConfig:
    """Parse and fully validate an experiment config.  Raises :class:`ConfigError`."""
    lines = _key_lines(text)

    def err(msg, section, key=""):
        line, col = lines.get((section, key), (None, None))
        return ConfigError(f"[{section}] {key + ': ' if key else ''}{msg}", path, line, col)

    cp = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=path)
    except configparser.Error as e:
        line = getattr(e, "lineno", None)
        raise ConfigError(str(e).splitlines()[0], path, line) from None

    known = {"experiment", "task", "pretrain"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith("method."):
            raise err("unknown section; expected [experiment], [task], [pretrain] or [method.<label>]", sec)

    exp = cp["experiment"] if cp.has_section("experiment") else {}
    for key in exp:
        if key not in EXPERIMENT_KEYS:
            raise err(f"unknown key; expected one of {', '.join(EXPERIMENT_KEYS)}", "experiment", key)
    try:
        seeds = [int(s) for s in _split_list(exp.get("seeds", "0"))]
    except ValueError:
        raise err("seeds must be a comma separated list of integers", "experiment", "seeds") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise err("seeds must be non-empty and distinct", "experiment", "seeds")
    try:
        max_runs = int(exp.get("max_runs", DEFAULT_MAX_RUNS))
    except ValueError as e:
        raise err(str(e), "experiment", "max_runs") from None
    try:
        zero = _as_bool(exp.get("zero_shot", "false"))
    except ValueError as e:
        raise err(str(e), "experiment", "zero_shot") from None
    base_dir = Path(path).parent if base_dir is None else base_dir
    output = Path(exp.get("output", "results"))
    if not output.is_absolute():
        output = Path(os.path.normpath(base_dir / output))

    task = {}
    if cp.has_section("task"):
        for key, raw in cp["task"].items():
            if key not in TASK_KEYS:
                raise err(f"unknown key; expected one of {', '.join(sorted(TASK_KEYS))}", "task", key)
            try:
                task[key] = TASK_KEYS[key](raw)
            except ValueError as e:
                raise err(str(e), "task", key) from None
    task.setdefault("kind", "cluster")
    if task["kind"] not in ("cluster", "longtail", "csv"):
        raise err("kind must be cluster, longtail or csv", "task", "kind")
    if task["kind"] == "csv":
        if "path" not in task:
            raise err("csv tasks need a path", "task")
        p = Path(task["path"])
        task["path"] = str(p if p.is_absolute() else base_dir / p)
        if "n_classes" not in task:
            raise err("csv tasks need n_classes", "task")
        try:
            bundle = build_bundle(task, 0)
        except data.ParseError as e:
            raise err(f"{task['path']}: {e}", "task", "path") from None
        missing = [n for n in ("pretrain", "id-train", "id-test") if len(bundle.splits()[n]) == 0]
        if missing:
            raise err(f"{task['path']} has no rows for split(s) {', '.join(missing)}", "task", "path")
    else:
        try:
            _task_spec(task, 0)
        except ValueError as e:
            key = next((k for k in task if k in str(e)), "")
            raise err(str(e), "task", key) from None

    pre = {}
    if cp.has_section("pretrain"):
        for key, raw in cp["pretrain"].items():
            if key not in PRETRAIN_KEYS:
                raise err(f"unknown key; expected one of {', '.join(PRETRAIN_KEYS)}", "pretrain", key)
            try:
                if key == "hidden_dims":
                    pre[key] = tuple(int(v) for v in _split_list(raw))
                elif key == "activation":
                    pre[key] = raw.strip()
                elif key in ("temperature", "lr", "weight_decay"):
                    pre[key] = float(raw)
                else:
                    pre[key] = int(raw)
            except ValueError as e:
                raise err(str(e), "pretrain", key) from None
    pretrain_cfg = experiment.PretrainConfig(**pre)

    methods = []
    for sec in cp.sections():
        if not sec.startswith("method."):
            continue
        label = sec[len("method."):].strip()
        if not label or not re.fullmatch(r"[A-Za-z0-9_.+-]+", label):
            raise err("method labels may only use letters, digits and _ . + -", sec)
        items = dict(cp[sec])
        name = items.pop("method", label if label in METHODS + EXTRA_METHODS else None)
        if name is None:
            raise err(f"missing 'method' key; expected one of {', '.join(METHODS + EXTRA_METHODS)}", sec)
        if name not in METHODS + EXTRA_METHODS:
            raise err(f"unknown method {name!r}; expected one of {', '.join(METHODS + EXTRA_METHODS)}",
                      sec, "method")
        ms = MethodSection(label, name)
        for key, raw in items.items():
            is_sweep = key.startswith("sweep.")
            fkey = key[len("sweep."):] if is_sweep else key
            if fkey not in METHOD_KEYS:
                raise err(f"{fkey!r} is not a config field; expected one of {', '.join(METHOD_KEYS)}", sec, key)
            conv = METHOD_KEYS[fkey][0]
            try:
                if is_sweep:
                    vals = [conv(v) for v in _split_list(raw)]
                    if not vals:
                        raise ValueError("sweep needs at least one value")
                    ms.sweep[fkey] = vals
                else:
                    ms.values[fkey] = conv(raw)
            except ValueError as e:
                raise err(str(e), sec, key) from None
            ms.lines[fkey] = key
        if "p" in ms.values and "sparsity" in ms.values or "p" in ms.sweep and "sparsity" in ms.sweep:
            raise err("set either p or sparsity, not both", sec)
        for combo in _grid(ms):
            try:
                build_finetune(ms, combo, seeds[0])
            except ValueError as e:
                key = next((ms.lines[k] for k in combo if k in str(e)), "")
                if not key:
                    key = next((ms.lines[k] for k in ms.values if k in str(e)), "")
                raise err(str(e), sec, key) from None
        methods.append(ms)
    if not methods and not zero:
        raise err("no [method.<label>] sections and zero_shot disabled: nothing to run", "experiment")
    labels = [m.label for m in methods]
    if "zero-shot" in labels:
        raise err("the label 'zero-shot' is reserved", "method.zero-shot")

    n_runs = len(seeds) * (sum(len(list(_grid(m))) for m in methods) + (1 if zero else 0))
    if n_runs > max_runs:
        raise err(f"grid x seeds gives {n_runs} runs, above the cap of {max_runs} (raise max_runs)",
                  "experiment", "max_runs" if "max_runs" in exp else "seeds")
    return ExperimentConfig(path, text, seeds, output, max_runs, zero, task, pretrain_cfg, methods)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", str(path)) from None
    return parse_config(text, str(path))


def _grid(ms: MethodSection):
    keys = list(ms.sweep)
    for vals in itertools.product(*(ms.sweep[k] for k in keys)):
        yield dict(zip(keys, vals))


def _task_spec(task: dict, seed: int) -> TaskSpec:
    kw = {k: v for k, v in task.items() if k in {f.name for f in fields(TaskSpec)}}
    if "shifts" in kw:
        kw["shifts"] = tuple(Shift.parse(s) for s in _split_list(kw["shifts"]))
    return TaskSpec(seed=seed, **kw)


def build_bundle(task: dict, seed: int):
    if task["kind"] == "csv":
        schema = CsvSchema(task["n_classes"], task.get("label_column", "label"), task.get("split_column", "split"))
        return data.load_csv(task["path"], schema)
    spec = _task_spec(task, seed)
    if task["kind"] == "longtail":
        return data.make_longtail(spec, task.get("imbalance_ratio"))
    return data.make_task(spec)


def build_finetune(ms: MethodSection, combo: dict, seed: int) -> tuple[FinetuneConfig, dict]:
    """FinetuneConfig for one grid point plus the run-level extras."""
    vals = {**ms.values, **combo}
    mkw, fkw, run = {}, {}, {"logit_adjusted": False, "scale_lr_by_sparsity": False,
                             "n_models": 5, "coeff": 0.5}
    for k, v in vals.items():
        target = METHOD_KEYS[k][1]
        if k == "sparsity":
            mkw["p"] = 1.0 - v
        elif target == "method":
            mkw[k] = v
        elif target == "finetune":
            fkw[k] = v
        else:
            run[k] = v
    base = "full" if ms.method in EXTRA_METHODS else ms.method
    if ms.method in EXTRA_METHODS and mkw:
        raise ValueError(f"{ms.method} builds on full finetuning; method keys {sorted(mkw)} do not apply")
    if run["n_models"] < 1:
        raise ValueError("n_models must be >= 1")
    if not 0.0 <= run["coeff"] <= 1.0:
        raise ValueError("coeff must lie in [0, 1]")
    method = MethodKind(base, **mkw)
    cfg = FinetuneConfig(method, seed=seed, **fkw)
    if run["scale_lr_by_sparsity"]:
        cfg = replace(cfg, lr=cfg.lr * (1.0 - method.p))
    return cfg, run


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


@dataclass
class Job:
    index: int
    label: str
    method: str
    combo: dict
    seed: int

    @property
    def params_text(self) -> str:
        return ";".join(f"{k}={_fmt(v)}" for k, v in self.combo.items())

    @property
    def run_id(self) -> str:
        parts = [self.label] + [f"{k}{_fmt(v)}" for k, v in self.combo.items()] + [f"s{self.seed}"]
        return re.sub(r"[^A-Za-z0-9_.+-]", "_", "-".join(parts))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def plan_jobs(cfg: ExperimentConfig) -> list[Job]:
    jobs = []
    for seed in cfg.seeds:
        if cfg.zero_shot:
            jobs.append(Job(len(jobs), "zero-shot", "zero-shot", {}, seed))
        for ms in cfg.methods:
            for combo in _grid(ms):
                jobs.append(Job(len(jobs), ms.label, ms.method, combo, seed))
    return jobs


def _anchor(cfg: ExperimentConfig, seed: int):
    bundle = build_bundle(cfg.task, seed)
    pre = experiment.pretrain(bundle, cfg.pretrain, seed)
    return bundle, experiment.zero_shot(pre, bundle, cfg.pretrain, seed)


def _run_job(cfg: ExperimentConfig, job: Job, anchor_cache: dict) -> dict:
    """Execute one job; never raises, failures come back as a row."""
    start = time.perf_counter()
    out = {"job": job, "status": "ok", "error": "", "metrics": {}, "cost": {}, "trajectory": None,
           "params": None, "checkpoints": [], "seconds": 0.0, "seconds_per_step": float("nan")}
    try:
        if job.seed not in anchor_cache:
            anchor_cache[job.seed] = _anchor(cfg, job.seed)
        bundle, zs = anchor_cache[job.seed]
        if job.method == "zero-shot":
            final = zs
        else:
            ms = next(m for m in cfg.methods if m.label == job.label)
            ft, run = build_finetune(ms, job.combo, job.seed)
            if job.method == "soup":
                final, results = experiment.model_soup(zs, bundle, ft, run["n_models"], run["logit_adjusted"])
                result = results[0]
            else:
                result = experiment.finetune(zs, bundle, ft, run["logit_adjusted"])
                final = result.params
                if job.method == "wise-ft":
                    final = analysis.wise_ft(zs, final, run["coeff"])
            out["cost"] = analysis.training_cost_report(result).row()
            out["trajectory"] = result.log.to_csv()
            out["checkpoints"] = result.checkpoints
            out["seconds_per_step"] = result.seconds_per_step
        out["metrics"] = analysis.evaluate(final, bundle).row()
        out["params"] = final
    except Exception as e:  # recorded as a failure row, never dropped
        out["status"] = "failed"
        out["error"] = f"{type(e).__name__}: {e}"
        log.debug("run %s failed\n%s", job.run_id, traceback.format_exc())
    out["seconds"] = time.perf_counter() - start
    return out


def _run_chunk(cfg: ExperimentConfig, jobs: list[Job]) -> list[dict]:
    cache: dict = {}
    return [_run_job(cfg, j, cache) for j in jobs]


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def execute(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """Run every job; work is grouped by seed so each worker pretrains an anchor once."""
    jobs = plan_jobs(cfg)
    by_seed = [[j for j in jobs if j.seed == s] for s in cfg.seeds]
    if workers <= 1 or len(by_seed) == 1:
        outs = [o for chunk in by_seed for o in _run_chunk(cfg, chunk)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = [o for part in pool.map(_run_chunk, [cfg] * len(by_seed), by_seed) for o in part]
    return sorted(outs, key=lambda o: o["job"].index)


def _metric_columns(outs: list[dict]) -> list[str]:
    ood = sorted({k for o in outs for k in o["metrics"] if k.startswith("ood[")})
    return list(METRIC_COLUMNS) + ood


def result_rows(outs: list[dict]) -> list[dict]:
    metric_cols = _metric_columns(outs)
    rows = []
    for o in outs:
        j = o["job"]
        row = {"run_id": j.run_id, "label": j.label, "method": j.method, "params": j.params_text,
               "seed": j.seed, "status": o["status"], "error": o["error"]}
        for c in metric_cols:
            row[c] = _cell(o["metrics"].get(c, float("nan")))
        for c in COST_COLUMNS:
            row[c] = o["cost"].get(c, "")
        rows.append(row)
    return rows


def _cell(v) -> str:
    return repr(float(v))


def summary_rows(rows: list[dict]) -> list[dict]:
    """Seed mean and standard deviation per (label, params) group of successful runs."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["label"], r["params"]), []).append(r)
    out = []
    for (label, params_text), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        row = {"label": label, "params": params_text, "n_ok": len(ok), "n_failed": len(rs) - len(ok)}
        for c in ("id_acc", "ood_avg"):
            v = np.array([float(r[c]) for r in ok])
            row[f"{c}_mean"] = _cell(v.mean()) if v.size else "nan"
            row[f"{c}_std"] = _cell(v.std(ddof=1)) if v.size > 1 else "nan"
        out.append(row)
    return out


def write_outputs(cfg: ExperimentConfig, outs: list[dict]) -> Path:
    root = cfg.output
    (root / "trajectories").mkdir(parents=True, exist_ok=True)
    (root / "checkpoints").mkdir(parents=True, exist_ok=True)
    rows = result_rows(outs)
    (root / "results.csv").write_text(analysis.rows_to_csv(rows))
    (root / "summary.csv").write_text(analysis.rows_to_csv(summary_rows(rows)))
    timing = [{"run_id": o["job"].run_id, "seconds": repr(o["seconds"]),
               "seconds_per_step": repr(o["seconds_per_step"])} for o in outs]
    (root / "timings.csv").write_text(analysis.rows_to_csv(timing))
    for o in outs:
        rid = o["job"].run_id
        if o["trajectory"] is not None:
            (root / "trajectories" / f"{rid}.csv").write_text(o["trajectory"])
        if o["params"] is not None:
            param.save(root / "checkpoints" / f"{rid}.gmxl", o["params"])
        for it, p in o["checkpoints"]:
            param.save(root / "checkpoints" / f"{rid}-iter{it}.gmxl", p)
    modes = sorted({ms.values.get("anchor_update", "integrate") for ms in cfg.methods} |
                   {v for ms in cfg.methods for v in ms.sweep.get("anchor_update", [])})
    manifest = {
        "config": cfg.path,
        "config_sha256": cfg.digest,
        "version": __version__,
        "anchor_update": modes,
        "seeds": cfg.seeds,
        "runs": len(rows),
        "failed": sum(r["status"] != "ok" for r in rows),
        "files": {"results": "results.csv", "summary": "summary.csv", "timings": "timings.csv",
                  "trajectories": "trajectories/", "checkpoints": "checkpoints/"},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def run(config_path: str | Path, workers: int | None = None) -> tuple[Path, list[dict]]:
    cfg = load_config(config_path)
    outs = execute(cfg, worker_count() if workers is None else workers)
    return write_outputs(cfg, outs), result_rows(outs)


# ---------------------------------------------------------------------------
# result CSV consumers
# ---------------------------------------------------------------------------


class ResultError(ValueError):
    pass


def read_results(path: str | Path, required: tuple[str, ...] = ()) -> list[dict]:
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            rows = list(reader)
            header = reader.fieldnames or []
    except OSError as e:
        raise ResultError(f"cannot read {path}: {e.strerror}") from None
    missing = [c for c in required if c not in header]
    if missing:
        raise ResultError(f"{path}: missing column(s) {', '.join(missing)}")
    return [r for r in rows if r.get("status", "ok") == "ok"]


def _series_key(r: dict) -> str:
    params_text = r.get("params", "")
    return r["label"] if not params_text else f"{r['label']} ({params_text})"


@dataclass
class SeriesPoint:
    name: str
    x: float
    y: float
    x_err: float
    y_err: float
    n: int
    zero_shot: bool


def frontier_points(rows: list[dict], x: str, y: str) -> list[SeriesPoint]:
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(_series_key(r), []).append(r)
    pts = []
    for name, rs in groups.items():
        xs = np.array([float(r[x]) for r in rs])
        ys = np.array([float(r[y]) for r in rs])
        sd = (lambda v: float(v.std(ddof=1)) if v.size > 1 else 0.0)
        pts.append(SeriesPoint(name, float(xs.mean()), float(ys.mean()), sd(xs), sd(ys), len(rs),
                               rs[0].get("method") == "zero-shot"))
    return pts


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
           "#17becf", "#bcbd22", "#7f7f7f")


def frontier_svg(points: list[SeriesPoint], x_label: str, y_label: str) -> str:
    """Self-contained SVG scatter of seed means with ±1 std error bars."""
    import xml.etree.ElementTree as ET

    if not points:
        raise ResultError("nothing to plot: no successful rows")
    W, H = 640, 480
    left, right, top, bottom = 70, 200, 20, 60
    xs = [v for p in points for v in (p.x - p.x_err, p.x + p.x_err)]
    ys = [v for p in points for v in (p.y - p.y_err, p.y + p.y_err)]

    def padded(lo, hi):
        span = hi - lo
        if span == 0:
            span = abs(lo) * 0.1 or 1.0
            lo, hi = lo - span / 2, hi + span / 2
        return lo - 0.05 * span, hi + 0.05 * span

    x0, x1 = padded(min(xs), max(xs))
    y0, y1 = padded(min(ys), max(ys))
    pw, ph = W - left - right, H - top - bottom

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(W), height=str(H),
                     viewBox=f"0 0 {W} {H}")
    svg.set("data-x-range", f"{x0!r} {x1!r}")
    svg.set("data-y-range", f"{y0!r} {y1!r}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(W), height=str(H), fill="white")
    ET.SubElement(svg, "rect", x=str(left), y=str(top), width=str(pw), height=str(ph),
                  fill="none", stroke="black")
    for i in range(6):
        fx = x0 + (x1 - x0) * i / 5
        fy = y0 + (y1 - y0) * i / 5
        t = ET.SubElement(svg, "text", x=f"{px(fx):.1f}", y=str(top + ph + 18), fill="black")
        t.set("text-anchor", "middle")
        t.set("font-size", "11")
        t.text = f"{fx:.3f}"
        t = ET.SubElement(svg, "text", x=str(left - 6), y=f"{py(fy) + 4:.1f}", fill="black")
        t.set("text-anchor", "end")
        t.set("font-size", "11")
        t.text = f"{fy:.3f}"
    t = ET.SubElement(svg, "text", x=str(left + pw / 2), y=str(H - 15), fill="black")
    t.set("text-anchor", "middle")
    t.text = x_label
    t = ET.SubElement(svg, "text", x="18", y=str(top + ph / 2), fill="black",
                      transform=f"rotate(-90 18 {top + ph / 2})")
    t.set("text-anchor", "middle")
    t.text = y_label

    legend = ET.SubElement(svg, "g", {"class": "legend"})
    for i, p in enumerate(points):
        color = "black" if p.zero_shot else PALETTE[i % len(PALETTE)]
        g = ET.SubElement(svg, "g", {"class": "point", "data-name": p.name, "data-x": repr(p.x),
                                     "data-y": repr(p.y), "data-n": str(p.n)})
        cx, cy = px(p.x), py(p.y)
        if p.x_err or p.y_err:
            ET.SubElement(g, "line", x1=f"{px(p.x - p.x_err):.2f}", x2=f"{px(p.x + p.x_err):.2f}",
                          y1=f"{cy:.2f}", y2=f"{cy:.2f}", stroke=color)
            ET.SubElement(g, "line", x1=f"{cx:.2f}", x2=f"{cx:.2f}", y1=f"{py(p.y - p.y_err):.2f}",
                          y2=f"{py(p.y + p.y_err):.2f}", stroke=color)
        if p.zero_shot:
            s = 7
            ET.SubElement(g, "polygon", fill=color, points=" ".join(
                f"{cx + dx:.2f},{cy + dy:.2f}" for dx, dy in ((0, -s), (s, 0), (0, s), (-s, 0))))
        else:
            ET.SubElement(g, "circle", cx=f"{cx:.2f}", cy=f"{cy:.2f}", r="5", fill=color)
        ly = top + 14 + 18 * i
        e = ET.SubElement(legend, "g", {"class": "legend-entry"})
        ET.SubElement(e, "rect", x=str(W - right + 12), y=str(ly - 9), width="10", height="10", fill=color)
        t = ET.SubElement(e, "text", x=str(W - right + 28), y=str(ly), fill="black")
        t.set("font-size", "11")
        t.text = p.name + (" [zero-shot]" if p.zero_shot else "")
    return ET.tostring(svg, encoding="unicode") + "\n"


def plot(csv_path: str | Path, x: str = "id_acc", y: str = "ood_avg", out: str | Path | None = None) -> Path:
    rows = read_results(csv_path, ("label", x, y))
    out = Path(out) if out is not None else Path(csv_path).with_name("frontier.svg")
    out.write_text(frontier_svg(frontier_points(rows, x, y), x, y))
    return out


def compare(csv_path: str | Path, baseline: str) -> list[dict]:
    """Seed-paired mean (ID, OOD) deltas of every series against ``baseline``.

    ``baseline`` matches a series name (label plus swept params) or a bare label.
    """
    rows = read_results(csv_path, ("label", "seed", "id_acc", "ood_avg"))
    groups: dict[str, dict[str, dict]] = {}
    for r in rows:
        groups.setdefault(_series_key(r), {})[r["seed"]] = r
    base = groups.get(baseline)
    if base is None:
        cand = [k for k in groups if k.split(" (")[0] == baseline]
        if len(cand) == 1:
            base = groups[cand[0]]
        elif len(cand) > 1:
            raise ResultError(f"baseline {baseline!r} is ambiguous; pick one of: {', '.join(cand)}")
    if base is None:
        raise ResultError(f"baseline {baseline!r} not found in {csv_path}; "
                          f"available: {', '.join(groups) or 'none'}")
    out = []
    for name, by_seed in groups.items():
        seeds = sorted(set(by_seed) & set(base), key=lambda s: int(s))
        if not seeds:
            continue
        d_id = [float(by_seed[s]["id_acc"]) - float(base[s]["id_acc"]) for s in seeds]
        d_ood = [float(by_seed[s]["ood_avg"]) - float(base[s]["ood_avg"]) for s in seeds]
        out.append({"series": name, "n_seeds": len(seeds),
                    "delta_id": repr(float(np.mean(d_id))), "delta_ood": repr(float(np.mean(d_ood)))})
    return out


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def quad_oracle(n_problems: int = 5, n_masks: int = 1_000_000, n_bound_trials: int = 200,
                dim: int = 5, seed: int = 0) -> dict:
    """Monte Carlo vs closed form for the masked quadratic, plus the curvature lower bound."""
    from .tensor import stream

    rng = stream(seed, "oracle", "quad")
    mc_rows = []
    for i in range(n_problems):
        prob = analysis.QuadraticProblem.random(dim, rng)
        delta = rng.standard_normal(dim)
        p = float(rng.choice([0.1, 0.5, 0.9]))
        exact = analysis.mixout_quadratic_expected_loss(prob, delta, p)
        mean, se = analysis.mixout_quadratic_monte_carlo(prob, delta, p, n_masks, rng)
        mc_rows.append({"problem": i, "p": p, "exact": exact, "mc": mean, "stderr": se,
                        "z": abs(mean - exact) / se, "ok": abs(mean - exact) <= 4 * se})
    bound_ok = 0
    for _ in range(n_bound_trials):
        prob = analysis.QuadraticProblem.random(dim, rng, with_gradient=False)
        delta = rng.standard_normal(dim)
        p = float(rng.uniform(0.0, 0.99))
        exact = analysis.mixout_quadratic_expected_loss(prob, delta, p)
        bound_ok += exact >= analysis.mixout_lower_bound(prob, delta, p) - 1e-12
    return {"monte_carlo": mc_rows, "bound_trials": n_bound_trials, "bound_holds": int(bound_ok),
            "ok": all(r["ok"] for r in mc_rows) and bound_ok == n_bound_trials}


def bvcl_oracle(n_ensembles: int = 50, seed: int = 0) -> dict:
    """Exact identity for prediction ensembles and the quadratic remainder for weight averages."""
    from . import net
    from .tensor import stream

    rng = stream(seed, "oracle", "bvcl")
    worst = 0.0
    for _ in range(n_ensembles):
        spec = net.NetworkSpec(int(rng.integers(2, 6)), (int(rng.integers(3, 8)),), int(rng.integers(2, 5)), 1)
        centre = net.init_params(spec, rng)
        M = int(rng.integers(3, 8))
        members = [centre.replace(centre.flat + 0.1 * rng.standard_normal(spec.size)) for _ in range(M)]
        x = rng.standard_normal((40, spec.input_dim))
        y = rng.standard_normal(40)
        rep = analysis.bvcl_estimate(members, x, y, "prediction-ensemble")
        worst = max(worst, abs(rep.reconstructed_error - rep.direct_error))
    spec = net.NetworkSpec(4, (6,), 3, 1)
    centre = net.init_params(spec, rng)
    dirs = [rng.standard_normal(spec.size) for _ in range(4)]
    x = rng.standard_normal((60, 4))
    y = rng.standard_normal(60)
    gaps = []
    for eps in (0.01, 0.005, 0.0025):
        members = [centre.replace(centre.flat + eps * d) for d in dirs]
        rep = analysis.bvcl_estimate(members, x, y, "weight-average")
        gaps.append(abs(rep.reconstructed_error - rep.direct_error))
    ratios = [gaps[i] / gaps[i + 1] for i in range(len(gaps) - 1)]
    return {"identity_max_error": worst, "weight_average_gaps": gaps, "halving_ratios": ratios,
            "ok": worst <= 1e-10 and min(ratios) >= 3.5}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maskft", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every method x sweep point x seed of a config")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=None, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    p = sub.add_parser("plot", help="ID-OOD frontier SVG from a result CSV")
    p.add_argument("csv")
    p.add_argument("--x", default="id_acc")
    p.add_argument("--y", default="ood_avg")
    p.add_argument("--out", default=None)
    c = sub.add_parser("compare", help="seed-paired deltas against a baseline series")
    c.add_argument("csv")
    c.add_argument("--baseline", required=True)
    o = sub.add_parser("oracle", help="closed-form checks")
    o.add_argument("which", choices=("quad", "bvcl"))
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--masks", type=int, default=1_000_000, help="Monte Carlo masks per problem (quad)")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            root, rows = run(args.config, args.workers)
            failed = [r for r in rows if r["status"] != "ok"]
            print(f"{len(rows)} runs, {len(failed)} failed -> {root}")
            for r in failed:
                print(f"  {r['run_id']}: {r['error']}", file=sys.stderr)
            return 1 if failed else 0
        if args.command == "plot":
            print(plot(args.csv, args.x, args.y, args.out))
            return 0
        if args.command == "compare":
            rows = compare(args.csv, args.baseline)
            sys.stdout.write(analysis.rows_to_csv(rows))
            return 0
        if args.which == "quad":
            rep = quad_oracle(n_masks=args.masks, seed=args.seed)
            for r in rep["monte_carlo"]:
                print(f"problem {r['problem']} p={r['p']}: exact {r['exact']:.6f} mc {r['mc']:.6f} "
                      f"+- {r['stderr']:.2e} ({r['z']:.2f} se) {'ok' if r['ok'] else 'FAIL'}")
            print(f"lower bound held in {rep['bound_holds']}/{rep['bound_trials']} trials")
        else:
            rep = bvcl_oracle(seed=args.seed)
            print(f"prediction-ensemble identity max error {rep['identity_max_error']:.3e}")
            print("weight-average remainder ratios on halving: "
                  + ", ".join(f"{v:.2f}" for v in rep["halving_ratios"]))
        print("PASS" if rep["ok"] else "FAIL")
        return 0 if rep["ok"] else 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ResultError, data.ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

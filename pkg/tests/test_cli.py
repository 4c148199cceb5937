import csv
import json
from pathlib import Path
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from maskft import cli, param

TASK = """
[task]
n_classes = 3
input_dim = 6
samples_per_class = 8
val_per_class = 2
test_per_class = 10
pretrain_classes = 4
pretrain_per_class = 20
shifts = rotation:45, noise:0.3

[pretrain]
hidden_dims = 8
feature_dim = 4
iterations = 40
"""


def write(tmp_path, body, name="exp.ini"):
    p = tmp_path / name
    p.write_text(body)
    return p


def rows_of(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_minimal_config_gives_one_row(tmp_path):
    cfg = write(tmp_path, "[experiment]\nseeds = 3\n" + TASK + "[method.full]\niterations = 5\n")
    assert cli.main(["run", str(cfg)]) == 0
    rows = rows_of(tmp_path / "results" / "results.csv")
    assert len(rows) == 1 and rows[0]["label"] == "full" and rows[0]["status"] == "ok"
    out = tmp_path / "results"
    assert (out / "trajectories" / "full-s3.csv").read_text().startswith("iter,episode,loss,lr,nnz\n")
    ckpt = param.load(out / "checkpoints" / "full-s3.gmxl")
    assert param.dumps(param.loads(param.dumps(ckpt))) == param.dumps(ckpt)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["runs"] == 1 and manifest["failed"] == 0 and len(manifest["config_sha256"]) == 64
    assert manifest["anchor_update"] == ["integrate"]


SWEEP = "[experiment]\nseeds = 0, 1, 2\n" + TASK + """
[method.gmixout]
p = 0.5
episodes = 2
iterations = 6
sweep.lam = 0, 0.25, 0.5, 0.75, 1
"""


def test_sweep_cardinality_and_determinism(tmp_path):
    cfg = write(tmp_path, SWEEP)
    assert cli.main(["run", str(cfg)]) == 0
    first = (tmp_path / "results" / "results.csv").read_bytes()
    rows = rows_of(tmp_path / "results" / "results.csv")
    assert len(rows) == 15
    assert sorted({r["params"] for r in rows}) == [f"lam={v}" for v in ("0.0", "0.25", "0.5", "0.75", "1.0")]
    assert cli.main(["run", str(cfg)]) == 0
    assert (tmp_path / "results" / "results.csv").read_bytes() == first
    assert "seconds" not in rows[0]


def test_worker_pool_gives_identical_results(tmp_path, monkeypatch):
    cfg = write(tmp_path, SWEEP)
    cli.main(["run", str(cfg)])
    serial = (tmp_path / "results" / "results.csv").read_bytes()
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    assert cli.main(["run", str(cfg)]) == 0
    assert (tmp_path / "results" / "results.csv").read_bytes() == serial


def test_zero_shot_and_extra_methods(tmp_path):
    body = "[experiment]\nseeds = 0\nzero_shot = true\n" + TASK + """
[method.soup]
n_models = 2
iterations = 4

[method.wise]
method = wise-ft
coeff = 0.3
iterations = 4
"""
    assert cli.main(["run", str(write(tmp_path, body))]) == 0
    rows = rows_of(tmp_path / "results" / "results.csv")
    assert [r["method"] for r in rows] == ["zero-shot", "soup", "wise-ft"]
    assert {"ood[rotation-45]", "ood[noise-0.3]"} <= set(rows[0])


def test_failed_run_is_recorded_and_exit_code_1(tmp_path):
    body = "[experiment]\nseeds = 0\n" + TASK + """
[method.full]
iterations = 5

[method.blowup]
method = full
lr = inf
weight_decay = 0
iterations = 20
"""
    cfg = write(tmp_path, body)
    assert cli.main(["run", str(cfg)]) == 1
    rows = rows_of(tmp_path / "results" / "results.csv")
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert "TrainingDiverged" in rows[1]["error"]
    summary = rows_of(tmp_path / "results" / "summary.csv")
    assert summary[1]["n_failed"] == "1"


@pytest.mark.parametrize("body,needle,line", [
    ("[experiment]\nseeds = a\n[method.full]\n", "[experiment] seeds", 2),
    ("[experiment]\nseeds = 0\n[method.full]\nlr = fast\n", "[method.full] lr", 4),
    ("[experiment]\nseeds = 0\n[method.gmixout]\np = 1.5\n", "p must lie", 4),
    ("[experiment]\nseeds = 0\n[method.x]\nmethod = dropout\n", "unknown method", 4),
    ("[experiment]\nseeds = 0\n[method.full]\nsweep.depth = 1, 2\n", "not a config field", 4),
    ("[experiment]\nseeds = 0\n[method.g]\nmethod = gmixout\niterations = 10\nepisodes = 20\n", "floor(T/I)", None),
    ("[experiment]\nseeds = 0\n[colour]\n", "unknown section", 3),
    ("[experiment]\nseeds = 0, 1\nmax_runs = 3\n[method.g]\nmethod = gmixout\nsweep.lam = 0, 1\n", "above the cap", 3),
    ("[experiment]\nseeds = 0\n[task]\nn_classes = 1\n[method.full]\n", "at least two classes", 3),
])
def test_config_errors_exit_2_with_location(tmp_path, capsys, body, needle, line):
    cfg = write(tmp_path, body)
    assert cli.main(["run", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert needle in err
    if line is not None:
        assert f"exp.ini:{line}:" in err
    with pytest.raises(cli.ConfigError):
        cli.load_config(cfg)


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "none.ini")]) == 2
    assert "cannot read config" in capsys.readouterr().err


def fake_results(tmp_path, rows, name="r.csv"):
    p = tmp_path / name
    cols = ["run_id", "label", "method", "params", "seed", "status", "error", "id_acc", "ood_avg"]
    with open(p, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({"run_id": "", "params": "", "status": "ok", "error": "", "method": r["label"], **r})
    return p


def parse_svg(path):
    root = ET.parse(path).getroot()
    ns = {"s": "http://www.w3.org/2000/svg"}
    points = root.findall("s:g[@class='point']", ns)
    legend = root.findall("s:g[@class='legend']/s:g", ns)
    return root, points, legend


def test_plot_single_point(tmp_path):
    csv_path = fake_results(tmp_path, [{"label": "full", "seed": 0, "id_acc": 0.9, "ood_avg": 0.7}])
    out = cli.plot(csv_path)
    root, points, legend = parse_svg(out)
    assert len(points) == 1 and len(legend) == 1
    assert "href" not in out.read_text()


def test_plot_legend_zero_shot_and_padding(tmp_path):
    rows = [{"label": "zero-shot", "seed": s, "id_acc": 0.80 + 0.01 * s, "ood_avg": 0.75} for s in range(3)]
    rows += [{"label": "full", "seed": s, "id_acc": 0.95, "ood_avg": 0.60 + 0.02 * s} for s in range(3)]
    rows[0]["method"] = "zero-shot"
    csv_path = fake_results(tmp_path, rows)
    out = cli.plot(csv_path, out=tmp_path / "f.svg")
    root, points, legend = parse_svg(out)
    assert len(legend) == 2
    assert root.findall(".//{http://www.w3.org/2000/svg}polygon")  # zero-shot marker
    x0, x1 = map(float, root.get("data-x-range").split())
    y0, y1 = map(float, root.get("data-y-range").split())
    xs = [float(p.get("data-x")) for p in points]
    ys = [float(p.get("data-y")) for p in points]
    assert all(x0 < x < x1 for x in xs) and all(y0 < y < y1 for y in ys)
    # data extents include the +-1 std bars, then 5% of the span is added per side
    xbars = [0.80, 0.82, 0.95]
    ybars = [0.75, 0.60, 0.64]
    for (lo, hi), bars in (((x0, x1), xbars), ((y0, y1), ybars)):
        span = max(bars) - min(bars)
        assert lo == pytest.approx(min(bars) - 0.05 * span, abs=1e-12)
        assert hi == pytest.approx(max(bars) + 0.05 * span, abs=1e-12)


def test_plot_missing_columns(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("label,seed,id_acc\nfull,0,0.9\n")
    assert cli.main(["plot", str(p)]) == 2
    assert "missing column(s) ood_avg" in capsys.readouterr().err


def test_compare_examples(tmp_path, capsys):
    rows = [{"label": "a", "seed": 0, "id_acc": 0.80, "ood_avg": 0.70},
            {"label": "b", "seed": 0, "id_acc": 0.85, "ood_avg": 0.70}]
    csv_path = fake_results(tmp_path, rows)
    deltas = {r["series"]: r for r in cli.compare(csv_path, "a")}
    assert float(deltas["a"]["delta_id"]) == 0 and float(deltas["a"]["delta_ood"]) == 0
    assert float(deltas["b"]["delta_id"]) == pytest.approx(0.05, abs=1e-12)
    assert cli.main(["compare", str(csv_path), "--baseline", "zz"]) == 2
    assert "baseline 'zz' not found" in capsys.readouterr().err


def test_compare_pairs_by_seed(tmp_path):
    rows = [{"label": "a", "seed": s, "id_acc": 0.5 + 0.1 * s, "ood_avg": 0.5} for s in range(3)]
    rows += [{"label": "b", "seed": s, "id_acc": 0.6 + 0.1 * s, "ood_avg": 0.4} for s in (1, 2, 3)]
    deltas = {r["series"]: r for r in cli.compare(fake_results(tmp_path, rows), "a")}
    assert deltas["b"]["n_seeds"] == 2
    assert float(deltas["b"]["delta_id"]) == pytest.approx(0.1, abs=1e-12)


def test_oracle_verbs(capsys):
    assert cli.main(["oracle", "bvcl"]) == 0
    assert cli.main(["oracle", "quad", "--masks", "200000"]) == 0
    assert capsys.readouterr().out.count("PASS") == 2


def _csv_task(tmp_path, rows):
    (tmp_path / "d.csv").write_text("f0,f1,label,split\n" + "".join(rows))
    return write(tmp_path, "[experiment]\nseeds = 0\nzero_shot = true\n[task]\nkind = csv\npath = d.csv\n"
                 "n_classes = 2\n[pretrain]\nhidden_dims = 4\nfeature_dim = 2\niterations = 20\n"
                 "[method.full]\niterations = 5\nbatch_size = 4\n")


def test_csv_task_runs(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for split, n in (("pretrain", 20), ("id-train", 8), ("id-test", 8), ("ood:far", 6)):
        for _ in range(n):
            c = int(rng.integers(0, 2))
            x = rng.normal(2.0 * c - 1.0, 0.3, 2) * (3.0 if split == "ood:far" else 1.0)
            rows.append(f"{x[0]},{x[1]},{c},{split}\n")
    assert cli.main(["run", str(_csv_task(tmp_path, rows))]) == 0
    out = rows_of(tmp_path / "results" / "results.csv")
    assert [r["status"] for r in out] == ["ok", "ok"] and "ood[far]" in out[0]


def test_csv_task_errors_are_config_errors(tmp_path, capsys):
    cfg = _csv_task(tmp_path, ["0.5,1.0,0,id-train\n", "-1.5,2.0,1,id-test\n"])
    assert cli.main(["run", str(cfg)]) == 2
    assert "no rows for split(s) pretrain" in capsys.readouterr().err
    cfg = _csv_task(tmp_path, ["0.5,1.0,0,id-train\n", "-1.5,2.0,7,id-test\n"])
    assert cli.main(["run", str(cfg)]) == 2
    assert "label outside 0..1" in capsys.readouterr().err


def test_readme_example_config_parses(tmp_path):
    readme = (Path(__file__).resolve().parent.parent / "README.md").read_text()
    block = readme.split("```ini\n", 1)[1].split("```", 1)[0]
    cfg = cli.parse_config(block, str(tmp_path / "x.ini"))
    assert cfg.zero_shot and cfg.seeds == [0, 1, 2] and cfg.max_runs == 500
    assert [len(list(cli._grid(m))) for m in cfg.methods] == [3]
    assert len(cli.plan_jobs(cfg)) == 12

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskft import data
from maskft.data import CsvSchema, ParseError, Shift, TaskSpec
from maskft.param import ContainerError
from maskft.tensor import stream

SMALL = dict(n_classes=3, input_dim=6, samples_per_class=20, val_per_class=5, test_per_class=40,
             pretrain_classes=5, pretrain_per_class=30)


def test_longtail_counts():
    assert data.longtail_counts(100, 3, 0.01).tolist() == [100, 10, 1]
    assert data.longtail_counts(50, 4, 1.0).tolist() == [50] * 4
    c = data.longtail_counts(200, 10, 0.01)
    assert np.all(np.diff(c) <= 0) and c.min() >= 1
    with pytest.raises(ValueError):
        data.longtail_counts(10, 3, 0.0)


def test_longtail_bundle_balanced_test():
    b = data.make_longtail(TaskSpec(**{**SMALL, "n_classes": 5, "pretrain_classes": 5,
                                       "samples_per_class": 100}), ratio=0.01)
    assert b.id_train.counts(5).tolist() == data.longtail_counts(100, 5, 0.01).tolist()
    assert len(set(b.id_test.counts(5).tolist())) == 1
    assert b.groups["many"] == [0, 1] and b.groups["few"] == [3, 4]


def test_count_groups_partition():
    g = data.count_groups(np.array([100, 46, 22, 10, 5, 2]))
    assert sorted(g["many"] + g["medium"] + g["few"]) == list(range(6))


def test_shift_parsing():
    assert Shift.parse("rotation:45") == Shift("rotation", 45.0)
    assert Shift.parse(" noise : 0.5").name == "noise-0.5"
    for bad in ("rotation", "blur:1", "noise:-1", "longtail:0"):
        with pytest.raises(ValueError):
            Shift.parse(bad)


def test_splits_disjoint_and_label_complete():
    b = data.make_task(TaskSpec(**SMALL, shifts=(Shift("rotation", 30), Shift("noise", 0.2))))
    ids = np.concatenate([s.ids for s in b.splits().values()])
    assert np.unique(ids).size == ids.size
    for s in [b.id_test, *b.ood.values()]:
        assert np.all(s.counts(3) == 40)
    assert set(np.unique(b.pretrain.y)) == set(range(5))


def test_generators_seed_deterministic():
    a = data.make_task(TaskSpec(**SMALL, seed=4))
    b = data.make_task(TaskSpec(**SMALL, seed=4))
    c = data.make_task(TaskSpec(**SMALL, seed=5))
    for k in a.splits():
        assert a.splits()[k].x.tobytes() == b.splits()[k].x.tobytes()
    assert a.id_train.x.tobytes() != c.id_train.x.tobytes()


def test_noise_zero_is_exact_copy():
    b = data.make_task(TaskSpec(**SMALL, shifts=(Shift("noise", 0.0),)))
    s = b.ood["noise-0"]
    assert s.x.tobytes() == s.source_x.tobytes()


def test_inverse_rotation_recovers_clean_inputs():
    b = data.make_task(TaskSpec(**SMALL, shifts=(Shift("rotation", 75),)))
    s = b.ood["rotation-75"]
    rot = b.rotations["rotation-75"]
    assert np.allclose(rot @ rot.T, np.eye(6), atol=1e-12)
    assert np.allclose(s.x @ rot, s.source_x, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.floats(0.0, 180.0), st.integers(0, 2**31))
def test_rotation_turns_every_vector_by_the_same_angle(half_dim, degrees, seed):
    d = 2 * half_dim
    rot = data.rotation_matrix(data.rotation_basis(d, seed), degrees)
    v = stream(seed, "v").standard_normal((10, d))
    cos = np.sum(v * (v @ rot.T), axis=1) / np.sum(v * v, axis=1)
    assert np.allclose(cos, np.cos(np.deg2rad(degrees)), atol=1e-9)


def _nearest_mean_accuracy(train, test, C):
    means = np.stack([train.x[train.y == c].mean(axis=0) for c in range(C)])
    pred = np.argmin(((test.x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    return np.mean(pred == test.y)


def test_zero_rotation_matches_in_distribution():
    gaps = []
    for seed in range(10):
        b = data.make_task(TaskSpec(**{**SMALL, "test_per_class": 1000}, seed=seed,
                                    shifts=(Shift("rotation", 0),), cluster_std=0.5))
        gaps.append(_nearest_mean_accuracy(b.id_train, b.id_test, 3)
                    - _nearest_mean_accuracy(b.id_train, b.ood["rotation-0"], 3))
    assert abs(np.mean(gaps)) < 0.02


def test_quarter_turn_on_antipodal_clusters_is_chance():
    # two antipodal classes in the plane; the ID Bayes rule is the sign of x . mu
    rng = stream(0, "antipodal")
    mu = np.array([1.0, 0.0])
    n = 20_000
    y = rng.integers(0, 2, n)
    x = np.where(y[:, None] == 1, mu, -mu) + 0.3 * rng.standard_normal((n, 2))
    rot = data.rotation_matrix(data.rotation_basis(2, 3), 90.0)
    shifted = x @ rot.T
    # brute-force Bayes posterior under the ID class-conditional densities
    ll1 = -np.sum((shifted - mu) ** 2, axis=1)
    ll0 = -np.sum((shifted + mu) ** 2, axis=1)
    acc = np.mean((ll1 > ll0) == (y == 1))
    assert abs(acc - 0.5) < 0.02
    clean = np.mean((-np.sum((x - mu) ** 2, 1) > -np.sum((x + mu) ** 2, 1)) == (y == 1))
    assert clean > 0.99


def test_probe_set_is_per_class(tmp_path):
    b = data.make_task(TaskSpec(**SMALL))
    px, py = data.probe_set(b, 4, seed=1)
    assert np.bincount(py).tolist() == [4, 4, 4]


def test_class_priors_sum_to_one():
    b = data.make_longtail(TaskSpec(**SMALL), ratio=0.1)
    pri = data.class_priors(b.id_train, 3)
    assert pri.sum() == pytest.approx(1.0) and np.all(np.diff(pri) <= 0)


GOLDEN = """f0,f1,label,split
0.5,1.0,0,id-train
-1.5,2.0,1,id-test
3.0,0.25,1,ood:sketch
2.0,-1.0,0,id-train
"""


def test_csv_golden_partition(tmp_path):
    p = tmp_path / "four.csv"
    p.write_text(GOLDEN)
    b = data.load_csv(p, CsvSchema(2))
    assert b.id_train.x.tolist() == [[0.5, 1.0], [2.0, -1.0]]
    assert b.id_train.y.tolist() == [0, 0]
    assert b.id_test.x.tolist() == [[-1.5, 2.0]] and b.id_test.y.tolist() == [1]
    assert list(b.ood) == ["sketch"] and b.ood["sketch"].x.tolist() == [[3.0, 0.25]]
    assert len(b.id_val) == 0 and len(b.pretrain) == 0


def test_csv_without_split_column_uses_default(tmp_path):
    p = tmp_path / "nosplit.csv"
    p.write_text("a,b,label\n1,2,0\n3,4,1\n")
    b = data.load_csv(p, CsvSchema(2))
    assert len(b.id_train) == 2


@pytest.mark.parametrize("text,message,lines", [
    ("", "no data rows", []),
    ("f0,label,split\n", "no data rows", []),
    ("f0,label,split\n1,0,id-train\n1,2\n1,0,id-test,x\n", "cells per row", [3, 4]),
    ("f0,label,split\n1,0,id-train\n2,2,id-test\n", "label outside", [3]),
    ("f0,label,split\nabc,0,id-train\n", "non-numeric", [2]),
    ("f0,label,split\n1,0,holdout\n", "unknown split", [2]),
])
def test_csv_errors(tmp_path, text, message, lines):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ParseError) as info:
        data.load_csv(p, CsvSchema(2))
    assert message in str(info.value)
    assert info.value.lines == lines


def test_csv_missing_file(tmp_path):
    with pytest.raises(ParseError, match="no such file"):
        data.load_csv(tmp_path / "nope.csv", CsvSchema(2))


def test_bundle_round_trip(tmp_path):
    b = data.make_task(TaskSpec(**SMALL, shifts=(Shift("rotation", 30),)))
    data.save_bundle(b, tmp_path / "bundle")
    back = data.load_bundle(tmp_path / "bundle")
    for k, s in b.splits().items():
        assert back.splits()[k].x.tobytes() == s.x.tobytes()
        assert back.splits()[k].ids.tolist() == s.ids.tolist()
    raw = data.dump_split(b.id_test)
    with pytest.raises(ContainerError):
        data.load_split(raw[:-1])

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskft import analysis, data, net
from maskft.analysis import EmptySplitError, QuadraticProblem
from maskft.data import Split, SplitBundle
from maskft.param import MethodKind
from maskft.tensor import stream
from maskft.trainer import FinetuneConfig, train

from conftest import tiny_spec, toy_data


def test_macro_f1_hand_example():
    cm = np.array([[2, 1], [0, 3]])
    f1_0 = 2 * 2 / (2 * 2 + 1 + 0)
    f1_1 = 2 * 3 / (2 * 3 + 0 + 1)
    assert analysis.macro_f1(cm) == pytest.approx((f1_0 + f1_1) / 2, abs=1e-12)
    assert analysis.macro_f1(cm) == pytest.approx(0.8286, abs=1e-4)


def _bundle(y_test, n_classes):
    x = np.zeros((len(y_test), 1))
    s = Split(x, np.asarray(y_test), np.arange(len(y_test)))
    empty = Split.empty(1)
    return SplitBundle(n_classes, empty, empty, empty, s, {"shifted": s})


def test_perfect_and_constant_predictors():
    y = np.repeat(np.arange(4), 5)
    b = _bundle(y, 4)
    perfect = analysis.evaluate_predictions(lambda x: y, b)
    assert perfect.id_accuracy == 1 and perfect.macro_f1 == 1 and perfect.ood_average == 1
    const = analysis.evaluate_predictions(lambda x: np.zeros(len(x), dtype=int), b)
    assert const.id_accuracy == 0.25 and const.balanced_accuracy == 0.25


def test_empty_split_is_an_error():
    with pytest.raises(EmptySplitError):
        analysis.evaluate_predictions(lambda x: np.zeros(0, dtype=int), _bundle([], 2))


def test_report_row_column_order():
    b = _bundle([0, 1], 2)
    row = analysis.evaluate_predictions(lambda x: np.array([0, 1]), b).row()
    assert list(row)[:4] == ["id_acc", "ood_avg", "balanced_acc", "macro_f1"]
    assert list(row)[-1] == "ood[shifted]"


def test_soup_examples(params):
    assert analysis.soup([params]).flat.tobytes() == params.flat.tobytes()
    neg = params.replace(-params.flat)
    assert np.all(analysis.soup([params, neg]).flat == 0)
    copies = analysis.soup([params] * 7)
    assert np.max(np.abs(copies.flat - params.flat)) <= 1e-15 * max(1, np.abs(params.flat).max())
    with pytest.raises(ValueError):
        analysis.soup([])
    with pytest.raises(ValueError):
        analysis.soup([params, net.init_params(tiny_spec(hidden=(6,)), stream(0))])


def test_wise_ft_examples():
    spec = net.NetworkSpec(1, (1,), 1, 1)
    a = net.ParamSet(spec, np.array([0.0, 2.0, 1.0, 1.0, 1.0]))
    b = net.ParamSet(spec, np.array([2.0, 0.0, 1.0, 1.0, 1.0]))
    assert analysis.wise_ft(a, b, 0.5).flat[:2].tolist() == [1.0, 1.0]
    assert analysis.wise_ft(a, b, 0.0).flat.tobytes() == a.flat.tobytes()
    assert analysis.wise_ft(a, b, 1.0).flat.tobytes() == b.flat.tobytes()
    with pytest.raises(ValueError):
        analysis.wise_ft(a, b, 1.5)


def _ensemble(seed, M, eps=0.1):
    rng = stream(seed, "ens")
    spec = net.NetworkSpec(int(rng.integers(2, 6)), (int(rng.integers(3, 8)),), int(rng.integers(2, 5)), 1)
    centre = net.init_params(spec, rng)
    members = [centre.replace(centre.flat + eps * rng.standard_normal(spec.size)) for _ in range(M)]
    x = rng.standard_normal((30, spec.input_dim))
    y = rng.standard_normal(30)
    return members, x, y


def _brute_force_terms(preds, y):
    # direct pairwise expansion, independent of the vectorized estimator
    M, n = preds.shape
    fbar = preds.mean(axis=0)
    var = np.mean([np.mean((preds[i] - fbar) ** 2) for i in range(M)])
    cov = np.mean([np.mean((preds[i] - fbar) * (preds[j] - fbar))
                   for i in range(M) for j in range(M) if i != j])
    return np.mean((y - fbar) ** 2), var, cov


@pytest.mark.parametrize("seed", range(10))
def test_bvcl_prediction_ensemble_identity(seed):
    M = 3 + seed % 5
    members, x, y = _ensemble(seed, M)
    rep = analysis.bvcl_estimate(members, x, y)
    assert abs(rep.reconstructed_error - rep.direct_error) <= 1e-10
    preds = np.stack([net.regress(m, x) for m in members])
    b2, var, cov = _brute_force_terms(preds, y)
    assert rep.bias_squared == pytest.approx(b2, abs=1e-12)
    assert rep.variance == pytest.approx(var, abs=1e-12)
    assert rep.covariance == pytest.approx(cov, abs=1e-12)


def test_bvcl_identical_members():
    members, x, y = _ensemble(0, 1)
    rep = analysis.bvcl_estimate(members * 4, x, y)
    assert rep.locality == 0
    assert rep.variance == pytest.approx(rep.covariance, abs=1e-15)
    assert rep.reconstructed_error == pytest.approx(rep.bias_squared + rep.variance, abs=1e-15)


@pytest.mark.parametrize("seed", range(6))
def test_bvcl_weight_average_remainder_is_quadratic(seed):
    # radii small enough that the quadratic term dominates the remainder
    rng = stream(seed, "wa")
    spec = net.NetworkSpec(4, (6,), 3, 1)
    centre = net.init_params(spec, rng)
    dirs = [rng.standard_normal(spec.size) for _ in range(4)]
    x, y = rng.standard_normal((60, 4)), rng.standard_normal(60)
    gaps = []
    for eps in (0.01, 0.005, 0.0025):
        rep = analysis.bvcl_estimate([centre.replace(centre.flat + eps * d) for d in dirs], x, y,
                                     "weight-average")
        gaps.append(abs(rep.reconstructed_error - rep.direct_error))
    ratios = np.array(gaps[:-1]) / np.array(gaps[1:])
    assert np.all(ratios >= 3.5)


def test_bvcl_errors():
    members, x, y = _ensemble(0, 1)
    with pytest.raises(ValueError):
        analysis.bvcl_estimate(members, x, y)
    with pytest.raises(ValueError):
        analysis.bvcl_estimate(members * 2, x, y, mode="other")


def test_quadratic_examples():
    prob = QuadraticProblem.random(5, stream(0, "q"))
    d = stream(1, "q").standard_normal(5)
    assert analysis.mixout_quadratic_expected_loss(prob, d, 0.0) == pytest.approx(float(prob.value(d)), abs=1e-14)
    assert analysis.mixout_quadratic_expected_loss(prob, np.zeros(5), 0.7) == prob.c
    with pytest.raises(ValueError):
        QuadraticProblem(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_quadratic_matches_enumeration():
    # all 2^n masks enumerated with their probabilities, no sampling
    prob = QuadraticProblem.random(4, stream(2, "q"))
    d = stream(3, "q").standard_normal(4)
    p = 0.3
    total = 0.0
    for bits in range(16):
        keep = np.array([(bits >> i) & 1 for i in range(4)], dtype=float)
        w = np.prod(np.where(keep == 1, 1 - p, p))
        total += w * float(prob.value(keep * d / (1 - p)))
    assert analysis.mixout_quadratic_expected_loss(prob, d, p) == pytest.approx(total, abs=1e-12)


def test_quadratic_monte_carlo_within_four_sigma():
    rng = stream(4, "mc")
    prob = QuadraticProblem.random(5, rng)
    d = rng.standard_normal(5)
    mean, se = analysis.mixout_quadratic_monte_carlo(prob, d, 0.5, 1_000_000, rng)
    assert abs(mean - analysis.mixout_quadratic_expected_loss(prob, d, 0.5)) <= 4 * se


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.99))
def test_strong_convexity_lower_bound(seed, p):
    rng = stream(seed, "bound")
    prob = QuadraticProblem.random(5, rng, with_gradient=False)
    d = rng.standard_normal(5)
    exact = analysis.mixout_quadratic_expected_loss(prob, d, p)
    assert exact >= analysis.mixout_lower_bound(prob, d, p) - 1e-12
    # the p-weighted penalty alone is bounded below by the smallest diagonal entry
    penalty = exact - float(prob.value(d))
    assert penalty >= p / (2 * (1 - p)) * prob.min_diagonal * np.sum(d * d) - 1e-12


def test_min_diagonal_bound_can_fail():
    # a diagonal-curvature constant does not bound the full quadratic from below
    H = np.array([[1.0, 0.99], [0.99, 1.0]])
    prob = QuadraticProblem(np.zeros(2), H)
    d = np.array([1.0, -1.0])
    p = 0.1
    exact = analysis.mixout_quadratic_expected_loss(prob, d, p)
    assert exact < analysis.mixout_lower_bound(prob, d, p, curvature=prob.min_diagonal)
    assert exact >= analysis.mixout_lower_bound(prob, d, p)


def test_forward_madds_hand_count():
    spec = net.NetworkSpec(3, (4,), 2, 5)
    # layer 0: 3*4, layer 1: 4*2, head: 2*5
    assert analysis.forward_madds(spec, 7) == (12 + 8 + 10) * 7


def _cost(name, **kw):
    spec = tiny_spec()
    anchor = net.init_params(spec, stream(0, "cost"))
    x, y = toy_data(spec, 20, 0)
    cfg = FinetuneConfig(MethodKind(name, **kw), iterations=10, lr=1e-2, batch_size=8)
    return spec, analysis.training_cost_report(train(cfg, anchor, x, y))


def test_cost_counters():
    spec, c = _cost("linear-probe")
    assert c.trainable_params == spec.n_classes * spec.feature_dim
    spec, c = _cost("lora", rank=2)
    assert c.trainable_params == sum(2 * (b.shape[0] + b.shape[1]) for b in spec.matrix_blocks(True))
    spec, c = _cost("mixout", p=0.9)
    assert c.resident_delta_values == spec.maskable_indices(True).size
    spec, c = _cost("full")
    assert c.trainable_params == spec.size - spec.indices("bias").size
    assert c.madds_forward == analysis.forward_madds(spec, 8)
    assert "seconds_per_step" not in c.row() and "seconds_per_step" in c.row(with_time=True)


def test_rows_to_csv_stable():
    rows = [{"b": 1, "a": 2}, {"b": 3, "a": 4}]
    assert analysis.rows_to_csv(rows) == "b,a\n1,2\n3,4\n"
    assert analysis.rows_to_csv([]) == ""

import numpy as np
import pytest

from soundobj.losses import info_nce_pair
from soundobj.numerics import (
    DegenerateInputError,
    GradCheckReport,
    compare_gradients,
    finite_diff_grad,
    l2_normalize,
    log_sum_exp,
    normalize_backward,
    normalize_rows,
    relative_error,
    softmax_rows,
)


@pytest.mark.parametrize(
    "v, expected",
    [([3, 4], [0.6, 0.8]), ([1, 0, 0], [1, 0, 0]), ([2, 2, 2, 2], [0.5, 0.5, 0.5, 0.5])],
)
def test_l2_normalize_examples(v, expected):
    np.testing.assert_allclose(l2_normalize(v), expected, atol=1e-15)


def test_l2_normalize_rejects_zero_and_bad_rank():
    with pytest.raises(DegenerateInputError):
        l2_normalize([0.0, 0.0])
    with pytest.raises(ValueError):
        l2_normalize(np.ones((2, 2)))
    with pytest.raises(ValueError):
        l2_normalize([1.0, np.nan])


def test_l2_normalize_idempotent():
    rng = np.random.default_rng(0)
    for _ in range(100):
        v = rng.normal(size=int(rng.integers(1, 50))) * 10 ** rng.uniform(-5, 5)
        u = l2_normalize(v)
        np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12)


@pytest.mark.parametrize("xs, expected", [([0.0], 0.0), ([0.0, 0.0], np.log(2)), ([1000.0, 1000.0], 1000 + np.log(2))])
def test_log_sum_exp_examples(xs, expected):
    assert log_sum_exp(xs) == pytest.approx(expected, abs=1e-12)


def test_log_sum_exp_shift_invariance():
    rng = np.random.default_rng(1)
    for _ in range(100):
        xs = rng.normal(size=10) * 50
        c = rng.normal() * 500
        assert log_sum_exp(xs + c) == pytest.approx(log_sum_exp(xs) + c, abs=1e-10)


def test_log_sum_exp_matches_shifted_evaluation():
    xs = np.array([1000.0, 1000.0])
    shifted = 999.0 + np.log(np.sum(np.exp(xs - 999.0)))
    assert log_sum_exp(xs) == pytest.approx(shifted, abs=1e-12)


def test_log_sum_exp_empty():
    with pytest.raises(ValueError):
        log_sum_exp([])


def test_softmax_rows_sum_to_one():
    m = np.random.default_rng(2).normal(size=(5, 7)) * 100
    p = softmax_rows(m)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_finite_diff_linear():
    g = finite_diff_grad(lambda x: float(np.dot(x, [2.0, 3.0])), np.array([1.0, 1.0]), 1e-5)
    np.testing.assert_allclose(g, [2.0, 3.0], atol=1e-8)


def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda x: float(np.sum(x**2)), np.array([1.0, -2.0]), 1e-5)
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-7)


def test_finite_diff_does_not_modify_input():
    x = np.array([0.5, 1.5])
    finite_diff_grad(lambda v: float(np.sum(np.sin(v))), x)
    np.testing.assert_array_equal(x, [0.5, 1.5])


def test_finite_diff_infonce_one_embedding():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 5))
    y = rng.normal(size=(3, 5))
    out = info_nce_pair(x, y, 0.5)

    def f(row):
        xx = x.copy()
        xx[1] = row
        return info_nce_pair(xx, y, 0.5).value

    numeric = finite_diff_grad(f, x[1], 1e-5)
    assert relative_error(out.grads["x"][1], numeric) < 1e-5


def test_finite_diff_errors():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, np.zeros(2), h=0.0)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: np.inf, np.zeros(2))


def test_normalize_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 6))
    unit, norms = normalize_rows(m)
    analytic = normalize_backward(w, unit, norms)
    numeric = finite_diff_grad(lambda x: float(np.sum(w * normalize_rows(x)[0])), m)
    assert relative_error(analytic, numeric) < 1e-8


def test_relative_error_and_report():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error([1.0, 2.0], [1.0, 2.2]) == pytest.approx(0.2 / 2.2)
    rep = compare_gradients({"a": np.ones(2), "b": np.zeros(2)}, {"a": np.ones(2), "b": np.full(2, 1e-9)})
    assert rep.max_rel_error == pytest.approx(1e-9)
    assert rep.probe_count == 4
    merged = rep.merge(GradCheckReport(0.5, 1.0, 3))
    assert merged == GradCheckReport(0.5, 1.0, 7)
    with pytest.raises(ValueError):
        relative_error(np.zeros(2), np.zeros(3))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import crra_sample, hh_sample, rel_err
from espest.errors import InvalidInputError, NumericDomainError
from espest.moment_model import (
    Dataset,
    MomentModel,
    builtin_crra,
    builtin_hall_horowitz,
    eval_psi_bar,
    jacobian_bar,
    read_csv,
)


def fd_jacobian(model, X, theta, h=1e-6):
    m = theta.size
    out = np.empty((X.shape[0], m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = h * max(1.0, abs(theta[j]))
        out[:, :, j] = (model.moments(X, theta + e) - model.moments(X, theta - e)) / (2 * e[j])
    return out


def test_hh_psi_at_zero_row(hh_model):
    d = Dataset(np.zeros((2, 2)))
    psi = eval_psi_bar(hh_model, d, [3.0, -0.72])
    assert psi[0] == pytest.approx(math.exp(-0.72) - 1.0, abs=1e-15)
    assert psi[0] == pytest.approx(-0.5132477, abs=1e-6)
    assert psi[1] == 0.0


def test_identical_rows_average_to_one_row(hh_model):
    row = np.array([[0.3, -0.2]])
    one = hh_model.moments(row, np.array([2.0, 0.1]))[0]
    many = eval_psi_bar(hh_model, Dataset(np.repeat(row, 7, axis=0)), [2.0, 0.1])
    np.testing.assert_allclose(many, one, rtol=1e-15)


def test_hh_second_moment_is_y_times_first(hh_model):
    X = np.random.default_rng(0).normal(0, 0.4, (10, 2))
    P = hh_model.moments(X, np.array([3.0, -0.72]))
    np.testing.assert_allclose(P[:, 1], X[:, 1] * P[:, 0], rtol=1e-15)


def test_hh_jacobian_matches_differences(hh_model, theta0):
    X = hh_model.design(hh_sample(11, 25))
    assert rel_err(hh_model.jacobians(X, theta0), fd_jacobian(hh_model, X, theta0)) <= 1e-5
    # d psi_1 / d beta in closed form
    e = np.exp(theta0[1] - theta0[0] * X.sum(1) + 3 * X[:, 1])
    assert rel_err(hh_model.jacobians(X, theta0)[:, 0, 0], -X.sum(1) * e) <= 1e-12


def test_hh_hessian_matches_differences(hh_model):
    X = hh_model.design(hh_sample(12, 30))
    th = np.array([2.5, -0.5])
    H = hh_model.hessians(X, th)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h * max(1, abs(th[j]))
        fd = (hh_model.jacobians(X, th + e) - hh_model.jacobians(X, th - e)) / (2 * e[j])
        assert rel_err(H[..., j], fd, floor=1e-6) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_builtin_jacobians_random_points(seed):
    rng = np.random.default_rng(seed)
    hh = builtin_hall_horowitz()
    crra = builtin_crra()
    for _ in range(20):
        X = rng.normal(0, 0.4, (1, 2))
        th = np.array([rng.uniform(-4, 14), rng.uniform(-4, 4)])
        assert rel_err(hh.jacobians(X, th), fd_jacobian(hh, X, th), floor=1e-8) <= 1e-5
        Xc = crra.design(crra_sample(seed, 5))[:1]
        tc = np.array([rng.uniform(-250, 850)])
        assert rel_err(crra.jacobians(Xc, tc), fd_jacobian(crra, Xc, tc), floor=1e-12) <= 1e-5


def test_crra_theta_zero_is_excess_return(crra_model):
    d = Dataset(np.array([[1.02, 1.10, 1.01], [0.99, 0.95, 1.02], [1.03, 1.20, 1.00]]), ("c_ratio", "r_m", "r_f"))
    np.testing.assert_allclose(eval_psi_bar(crra_model, d, [0.0]), [np.mean([0.09, -0.07, 0.20])], atol=1e-15)


def test_crra_unit_consumption_ratio_is_theta_free(crra_model):
    d = Dataset(np.array([[1.0, 1.1, 1.0], [1.0, 0.9, 1.0], [1.0, 1.3, 1.05]]), ("c_ratio", "r_m", "r_f"))
    a = eval_psi_bar(crra_model, d, [-100.0])
    np.testing.assert_allclose(eval_psi_bar(crra_model, d, [700.0]), a, rtol=0, atol=1e-15)


def test_crra_derivative_at_fifty(crra_model):
    d = Dataset(np.array([[1.02, 1.10, 1.01], [0.99, 0.95, 1.02], [1.03, 1.20, 1.00]]), ("c_ratio", "r_m", "r_f"))
    X = crra_model.design(d)
    th = np.array([50.0])
    assert rel_err(crra_model.jacobians(X, th), fd_jacobian(crra_model, X, th, h=1e-7)) <= 1e-6


def test_crra_rejects_nonpositive_consumption_ratio(crra_model):
    d = Dataset(np.array([[1.0, 1.1, 1.0], [0.0, 0.9, 1.0]]), ("c_ratio", "r_m", "r_f"))
    with pytest.raises(NumericDomainError):
        eval_psi_bar(crra_model, d, [1.0])


def test_crra_columns_resolved_by_name(crra_model):
    d = crra_sample(3, 20)
    shuffled = Dataset(d.rows[:, [2, 0, 1]], ("r_f", "c_ratio", "r_m"))
    np.testing.assert_array_equal(eval_psi_bar(crra_model, d, [20.0]), eval_psi_bar(crra_model, shuffled, [20.0]))


def test_jacobian_bar_unit_for_location(loc_model):
    d = Dataset(np.arange(5.0)[:, None])
    assert jacobian_bar(loc_model, d, [1.3])[0, 0] == 1.0
    w = np.array([0.1, 0.2, 0.3, 0.25, 0.15])
    assert jacobian_bar(loc_model, d, [1.3], weights=w)[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_jacobian_bar_uniform_weights_equal_default(hh_model, theta0):
    d = hh_sample(4, 30)
    a = jacobian_bar(hh_model, d, theta0)
    b = jacobian_bar(hh_model, d, theta0, weights=np.full(30, 1 / 30))
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_jacobian_bar_rejects_bad_weights(hh_model, theta0):
    d = hh_sample(4, 5)
    with pytest.raises(InvalidInputError):
        jacobian_bar(hh_model, d, theta0, weights=[0.5, 0.5, 0.1, 0.0, -0.1])


def test_finite_difference_fallback_without_jacobian():
    model = MomentModel(
        name="cubic", param_dim=1, data_dim=1,
        psi=lambda X, th: th[0] ** 3 - X[:, :1],
        lower=np.array([-5.0]), upper=np.array([5.0]),
    )
    d = Dataset(np.array([[1.0], [2.0], [4.0]]))
    assert jacobian_bar(model, d, [1.5])[0, 0] == pytest.approx(3 * 1.5**2, rel=1e-8)


def test_nonfinite_psi_reports_row(hh_model):
    d = Dataset(np.array([[0.0, 0.0], [-400.0, 0.0], [0.1, 0.1]]))
    with pytest.raises(NumericDomainError) as exc:
        eval_psi_bar(hh_model, d, [3.0, 0.0])
    assert exc.value.row == 1


def test_dataset_validation():
    with pytest.raises(InvalidInputError):
        Dataset(np.array([[1.0, 2.0]]))
    with pytest.raises(InvalidInputError):
        Dataset(np.array([[1.0, np.nan], [1.0, 2.0]]))
    with pytest.raises(InvalidInputError):
        Dataset(np.ones((3, 2)), ("a",))


def test_box_validation():
    with pytest.raises(InvalidInputError):
        builtin_hall_horowitz(lower=(0, 0), upper=(0, 1))


def test_theta_dimension_checked(hh_model):
    with pytest.raises(InvalidInputError):
        eval_psi_bar(hh_model, hh_sample(1, 5), [1.0, 2.0, 3.0])


def test_read_csv_roundtrip(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,y\n0.1,0.2\n-1e-3,3\n")
    d = read_csv(p)
    assert d.column_names == ("x", "y")
    np.testing.assert_array_equal(d.rows, [[0.1, 0.2], [-0.001, 3.0]])


def test_read_csv_reports_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,y\n0.1,0.2\n0.3,abc\n")
    with pytest.raises(InvalidInputError, match=r"d\.csv:3"):
        read_csv(p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-4, 14), st.floats(-4, 4))
def test_psi_bar_permutation_invariant(seed, beta, mu):
    d = hh_sample(seed % 1000, 15)
    perm = np.random.default_rng(seed).permutation(15)
    hh = builtin_hall_horowitz()
    a = eval_psi_bar(hh, d, [beta, mu])
    b = eval_psi_bar(hh, d.take(perm), [beta, mu])
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14 * np.abs(hh.moments(d.rows, np.array([beta, mu]))).max())

import io
import math

import mpmath as mp
import numpy as np
import pytest

from conftest import crra_sample, hh_sample, location_sample, rel_err
from espest.errors import SupportBoundaryError, UnsupportedOperationError
from espest.esp_objective import (
    PROFILE_HEADER,
    EspProblem,
    evaluate,
    gradient_objective,
    profile,
    sigma_tilted,
    write_profile_csv,
)
from espest.estimation import estimate_mm_et
from espest.moment_model import Dataset, MomentModel, builtin_crra, builtin_hall_horowitz, builtin_location
from espest.tilting import solve_tilt


def random_points(model, n, seed, shrink=0.5):
    rng = np.random.default_rng(seed)
    mid, half = (model.lower + model.upper) / 2, (model.upper - model.lower) / 2
    return mid + shrink * half * rng.uniform(-1, 1, (n, model.m))


def in_support_points(model, data, n, seed, around=None, scale=None):
    rng = np.random.default_rng(seed)
    prob = EspProblem(model, data)
    out = []
    while len(out) < n:
        th = around + scale * rng.uniform(-1, 1, model.m)
        ev = prob.evaluate(th)
        if ev.in_support:
            out.append(ev)
    return out


def test_decomposition_identity_hh(hh_model, theta0):
    d = hh_sample(1, 60)
    for ev in in_support_points(hh_model, d, 100, 2, theta0, np.array([2.0, 0.8])):
        assert abs(ev.m1 + ev.m2 + ev.m3 - ev.log_esp_objective) <= 1e-10


def test_decomposition_identity_crra(crra_model):
    d = crra_sample(4)
    for ev in in_support_points(crra_model, d, 100, 3, np.array([30.0]), np.array([80.0])):
        assert abs(ev.m1 + ev.m2 + ev.m3 - ev.log_esp_objective) <= 1e-10


def test_density_is_monotone_transform(hh_model, theta0):
    d = hh_sample(5, 40)
    ev = evaluate(hh_model, d, theta0 + 0.2)
    T, m = 40, 2
    assert ev.log_esp_density == pytest.approx(
        T * ev.log_esp_objective + m / 2 * math.log(T / (2 * math.pi)), abs=1e-9
    )


def test_objective_at_root_is_variance_term(hh_model, theta0):
    d = hh_sample(7, 50)
    root = estimate_mm_et(hh_model, d, [theta0]).theta_hat
    ev = evaluate(hh_model, d, root)
    assert abs(ev.m1) <= 1e-14
    assert ev.log_esp_objective == pytest.approx(-ev.log_det_sigma / 100, abs=1e-12)
    assert ev.log_et_density == pytest.approx(math.log(50 / (2 * math.pi)), abs=1e-10)


def test_location_sigma_is_sample_variance():
    model = builtin_location()
    d = location_sample(3, 30)
    xbar = float(d.rows.mean())
    sol = solve_tilt(model, d, [xbar])
    S = sigma_tilted(model, d, [xbar], sol)
    assert S[0, 0] == pytest.approx(float(np.var(d.rows)), rel=1e-12)


def test_sigma_symmetric(hh_model, theta0):
    d = hh_sample(8, 40)
    for ev in in_support_points(hh_model, d, 50, 9, theta0, np.array([2.0, 0.8])):
        assert np.max(np.abs(ev.sigma_t - ev.sigma_t.T)) <= 1e-12
        assert np.all(np.linalg.eigvalsh(ev.sigma_t) > 0)


def test_sigma_matches_extended_precision(hh_model, theta0):
    mp.mp.dps = 40
    d = hh_sample(10, 200)
    ev = evaluate(hh_model, d, theta0)
    X = hh_model.design(d)
    P, D = hh_model.moments(X, theta0), hh_model.jacobians(X, theta0)
    tau = [mp.mpf(float(v)) for v in ev.tilting.tau]
    e = [mp.exp(tau[0] * mp.mpf(float(p[0])) + tau[1] * mp.mpf(float(p[1]))) for p in P]
    S = mp.fsum(e)
    J = mp.matrix(2, 2)
    V = mp.matrix(2, 2)
    for t in range(200):
        for i in range(2):
            for j in range(2):
                J[i, j] += e[t] * mp.mpf(float(D[t, i, j])) / S
                V[i, j] += e[t] * mp.mpf(float(P[t, i])) * mp.mpf(float(P[t, j])) / S
    Ji = J**-1
    sig = Ji * V * Ji.T
    oracle = np.array([[float(sig[i, j]) for j in range(2)] for i in range(2)])
    assert rel_err(ev.sigma_t, oracle) <= 1e-10


def test_out_of_support_sentinel(hh_model):
    d = Dataset(np.abs(np.random.default_rng(0).normal(0, 0.4, (20, 2))))
    # with x, y >= 0 and mu very negative every psi_1 is < 0
    ev = evaluate(hh_model, d, [0.0, -4.9])
    assert not ev.in_support
    assert ev.log_esp_objective == -math.inf and ev.log_esp_density == -math.inf


def fd_grad(prob, th, h=1e-5):
    g = np.empty(th.size)
    for j in range(th.size):
        e = np.zeros(th.size)
        e[j] = h * max(1.0, abs(th[j]))
        g[j] = (prob.objective(th + e) - prob.objective(th - e)) / (2 * e[j])
    return g


def test_gradient_matches_differences_hh(hh_model, theta0):
    d = hh_sample(50, 50)
    prob = EspProblem(hh_model, d)
    assert rel_err(gradient_objective(hh_model, d, theta0), fd_grad(prob, theta0), floor=1e-3) <= 1e-4


def test_gradient_matches_differences_crra(crra_model):
    d = crra_sample(6)
    prob = EspProblem(crra_model, d)
    th = np.array([25.0])
    assert rel_err(prob.gradient(th), fd_grad(prob, th, h=1e-4), floor=1e-3) <= 1e-4


def test_m1_tau_partial_vanishes(hh_model, theta0):
    d = hh_sample(12, 60)
    prob = EspProblem(hh_model, d)
    parts = prob.tau_partials(theta0 + np.array([0.5, -0.1]))
    assert np.max(np.abs(parts["m1"])) <= 1e-10


def test_gradient_needs_hessian():
    model = MomentModel(
        name="plain", param_dim=1, data_dim=1,
        psi=lambda X, th: th[0] - X[:, :1],
        lower=np.array([-10.0]), upper=np.array([10.0]),
    )
    d = location_sample(1, 20)
    with pytest.raises(UnsupportedOperationError):
        gradient_objective(model, d, [3.0])


def test_gradient_outside_support_raises():
    model = builtin_location()
    d = location_sample(1, 20)
    with pytest.raises(SupportBoundaryError):
        gradient_objective(model, d, [-5.0])


def test_evaluate_is_permutation_invariant(hh_model, theta0):
    d = hh_sample(13, 40)
    perm = np.random.default_rng(1).permutation(40)
    a = evaluate(hh_model, d, theta0 + 0.3)
    b = evaluate(hh_model, d.take(perm), theta0 + 0.3)
    assert b.log_esp_objective == pytest.approx(a.log_esp_objective, abs=1e-13)


def test_too_few_rows_rejected(hh_model):
    from espest.errors import InvalidInputError

    with pytest.raises(InvalidInputError):
        EspProblem(hh_model, Dataset(np.array([[0.1, 0.2], [-0.1, 0.3]])))


def test_profile_normalizes_to_one(crra_model):
    d = crra_sample(2)
    grid = np.linspace(-150, 250, 801)
    rows = profile(crra_model, d, grid)
    esp = np.array([r.norm_esp for r in rows])
    et = np.array([r.norm_et for r in rows])
    assert np.trapezoid(esp, grid) == pytest.approx(1.0, abs=1e-6)
    assert np.trapezoid(et, grid) == pytest.approx(1.0, abs=1e-6)
    assert all(r.norm_esp == 0.0 for r in rows if not r.in_support)
    assert esp.max() > et.max()


def test_profile_single_point_at_root(loc_model):
    d = location_sample(4, 25)
    rows = profile(loc_model, d, [float(d.rows.mean())])
    assert rows[0].log_et_density == pytest.approx(0.5 * math.log(25 / (2 * math.pi)), abs=1e-12)


def test_profile_csv_layout(loc_model):
    d = location_sample(4, 25)
    buf = io.StringIO()
    write_profile_csv(profile(loc_model, d, np.linspace(2, 4, 5)), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(PROFILE_HEADER)
    assert len(lines) == 6
    assert lines[1].split(",")[-1] in ("true", "false")

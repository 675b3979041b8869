"""Wald, LM, ALR and ET tests, chi-square tails and ALR confidence regions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError, NoRootFoundError, SingularMatrixError
from ._format import dumps, fmt
from .esp_objective import EspEvaluation, EspProblem
from .estimation import (
    EstimationResult,
    Restriction,
    estimate_constrained,
    estimate_esp,
    estimate_mm_et,
)
from .moment_model import Dataset, MomentModel

__all__ = [
    "TestResult",
    "ConfidenceRegion",
    "chi2_sf",
    "chi2_quantile",
    "wald_test",
    "lm_test",
    "alr_test",
    "et_test",
    "trinity_tests",
    "invert_confidence_region",
    "default_grid",
    "write_region_csv",
]

_EPS = 1e-16
_TINY = 1e-300


# --- chi-square tails ----------------------------------------------------------


def _gamma_series(a, x):
    """Regularized lower incomplete gamma ``P(a, x)`` by its power series."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a, x):
    """Regularized upper incomplete gamma ``Q(a, x)`` by modified Lentz."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _check_dof(dof):
    if isinstance(dof, bool) or not float(dof).is_integer() or dof < 1:
        raise InvalidInputError(f"degrees of freedom must be a positive integer, got {dof!r}")
    return int(dof)


def chi2_sf(x: float, dof: int) -> float:
    """Chi-square survival function ``P(X > x)``."""
    k = _check_dof(dof)
    x = float(x)
    if math.isnan(x) or x < 0.0:
        raise InvalidInputError(f"chi2_sf needs x >= 0, got {x}")
    if x == 0.0:
        return 1.0
    if math.isinf(x):
        return 0.0
    a, y = 0.5 * k, 0.5 * x
    if y < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _gamma_series(a, y)))
    return min(1.0, max(0.0, _gamma_cf(a, y)))


def _chi2_pdf(x, k):
    if x <= 0.0:
        return 0.0
    a = 0.5 * k
    return math.exp((a - 1.0) * math.log(x) - 0.5 * x - a * math.log(2.0) - math.lgamma(a))


def chi2_quantile(p: float, dof: int) -> float:
    """Point ``x`` with ``P(X <= x) = p``; safeguarded Newton inside a bisection bracket."""
    k = _check_dof(dof)
    p = float(p)
    if not 0.0 < p < 1.0:
        raise InvalidInputError(f"probability must lie in (0, 1), got {p}")
    target = 1.0 - p
    lo, hi = 0.0, max(1.0, float(k))
    while chi2_sf(hi, k) > target:
        lo, hi = hi, 2.0 * hi
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f = chi2_sf(x, k) - target
        if f > 0:
            lo = x
        else:
            hi = x
        dens = _chi2_pdf(x, k)
        nxt = x + f / dens if dens > 0 else math.nan
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        # relative steps, so tiny quantiles (p near 0) are resolved as well
        if abs(nxt - x) <= 1e-14 * x or hi - lo <= 4e-16 * hi:
            return nxt
        x = nxt
    return x


# --- test statistics -----------------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # keep pytest from collecting this class

    kind: str
    statistic: float
    dof: int
    p_value: float
    theta_unconstrained: Optional[np.ndarray] = None
    theta_constrained: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return dumps(
            {"kind": self.kind, "statistic": self.statistic, "dof": self.dof, "p_value": self.p_value}
        )


def _result(kind, stat, dof, th_u=None, th_c=None, **extra):
    p = 0.0 if math.isinf(stat) else chi2_sf(max(stat, 0.0), dof)
    return TestResult(kind, float(stat), int(dof), p, th_u, th_c, dict(extra))


def _quad_inverse(M, v, what):
    try:
        c = np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"{what} is singular or not positive definite") from exc
    z = np.linalg.solve(c, v)
    return float(z @ z)


def _sigma_hat(result: EstimationResult, T: int) -> np.ndarray:
    S = T * np.asarray(result.covariance, float)
    if not np.all(np.isfinite(S)):
        raise SingularMatrixError("covariance estimate is not finite")
    return S


def wald_test(model: MomentModel, data: Dataset, esp_result: EstimationResult, restriction: Restriction) -> TestResult:
    """``T r' [R Sigma R']^{-1} r`` at the unconstrained estimate."""
    T = data.T
    theta = esp_result.theta_hat
    r = restriction.residual(theta)
    R = restriction.jacobian(theta)
    S = _sigma_hat(esp_result, T)
    stat = T * _quad_inverse(R @ S @ R.T, r, "R Sigma R'")
    return _result("wald", stat, restriction.q, th_u=theta)


def lm_test(model: MomentModel, data: Dataset, constrained_result: EstimationResult, restriction: Restriction) -> TestResult:
    """``T gamma' [R Sigma R'] gamma`` with ``Sigma`` at the constrained estimate.

    ``extra`` also carries the score form ``T g' Sigma g`` (``g`` the gradient
    of the log-ESP objective at the constrained point, so ``T g`` is the score
    of the log density) and ``T^2 g' Sigma^{-1} g``, which some references
    print for the same statistic.  Neither enters the p-value.
    """
    if constrained_result.lagrange_multiplier is None:
        raise InvalidInputError("lm_test needs a constrained estimate with a multiplier")
    T = data.T
    theta = constrained_result.theta_hat
    gamma = np.asarray(constrained_result.lagrange_multiplier, float)
    R = restriction.jacobian(theta)
    S = _sigma_hat(constrained_result, T)
    M = R @ S @ R.T
    try:
        np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("R Sigma R' is singular or not positive definite") from exc
    stat = T * float(gamma @ M @ gamma)
    g = -R.T @ gamma
    try:
        inv_form = T * T * float(g @ np.linalg.solve(S, g))
    except np.linalg.LinAlgError:
        inv_form = math.nan
    return _result(
        "lm", stat, restriction.q, th_c=theta,
        score_form=T * float(g @ S @ g), inverse_form=inv_form,
    )


def alr_test(ev_unconstrained: EspEvaluation, ev_constrained: EspEvaluation, dof: int) -> TestResult:
    """Twice the log-ESP density drop from the unconstrained to the constrained point."""
    if not ev_unconstrained.in_support:
        raise InvalidInputError("unconstrained point must be in the ESP support")
    th_u, th_c = ev_unconstrained.theta, ev_constrained.theta
    if not ev_constrained.in_support:
        return _result("alr", math.inf, dof, th_u, th_c)
    T = ev_unconstrained.T
    stat = 2.0 * T * (ev_unconstrained.log_esp_objective - ev_constrained.log_esp_objective)
    return _result("alr", stat, dof, th_u, th_c)


def et_test(
    model: MomentModel, data: Dataset, constrained_result: EstimationResult, weights: str = "uniform"
) -> TestResult:
    """``T tau' V tau`` with ``tau`` the tilt at the constrained estimate.

    ``V`` is the second moment of the moments there, averaged with uniform
    weights by default or with the tilted weights when ``weights="tilted"``.
    """
    if weights not in ("uniform", "tilted"):
        raise InvalidInputError(f"weights must be 'uniform' or 'tilted', got {weights!r}")
    if constrained_result.lagrange_multiplier is None:
        raise InvalidInputError("et_test needs a constrained estimate")
    q = int(np.size(constrained_result.lagrange_multiplier))
    theta = constrained_result.theta_hat
    prob = EspProblem(model, data)
    P = prob.moments(theta)
    sol = prob.tilt(theta, P)
    if not sol.converged:
        return _result("et", math.inf, q, th_c=theta)
    T = prob.T
    V = P.T @ P / T if weights == "uniform" else (P * sol.weights[:, None]).T @ P
    tau = sol.tau
    return _result("et", T * float(tau @ V @ tau), q, th_c=theta)


def trinity_tests(
    model: MomentModel,
    data: Dataset,
    restriction: Restriction,
    starts=None,
    unconstrained: Optional[EstimationResult] = None,
) -> dict:
    """All four statistics for one restriction, keyed by kind."""
    prob = EspProblem(model, data)
    unc = unconstrained if unconstrained is not None else estimate_esp(model, data, starts, problem=prob)
    con = estimate_constrained(model, data, restriction, starts, problem=prob)
    return {
        "wald": wald_test(model, data, unc, restriction),
        "lm": lm_test(model, data, con, restriction),
        "alr": alr_test(prob.evaluate(unc.theta_hat), prob.evaluate(con.theta_hat), restriction.q),
        "et": et_test(model, data, con),
    }


# --- confidence regions ------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceRegion:
    level: float
    kind: str
    grid: np.ndarray
    statistics: np.ndarray
    accepted: np.ndarray
    accepted_intervals: list
    theta_hat: np.ndarray
    critical_value: float

    @property
    def total_length(self) -> float:
        return float(sum(b - a for a, b in self.accepted_intervals))


def default_grid(model: MomentModel, n: int = 1024) -> np.ndarray:
    return np.linspace(model.lower[0], model.upper[0], n)


def _runs(grid, mask):
    out = []
    i, n = 0, len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            out.append((float(grid[i]), float(grid[j])))
            i = j + 1
        else:
            i += 1
    return out


def invert_confidence_region(
    model: MomentModel,
    data: Dataset,
    kind: str = "alr",
    level: float = 0.95,
    grid=None,
    starts=None,
) -> ConfidenceRegion:
    """Grid points whose pinned-parameter test is not rejected at ``level``.

    ``alr`` uses ``2T (L_max - L(theta0))`` with ``L`` the log-ESP objective;
    ``alr-et`` uses the same with ``ln K``.  The reference maximum is the
    larger of the estimate's value and the best grid value, so the statistic
    is never negative.
    """
    if model.m != 1:
        raise InvalidInputError("confidence region inversion needs a scalar parameter")
    if kind not in ("alr", "alr-et"):
        raise InvalidInputError(f"unknown region kind {kind!r}")
    if not 0.0 < level < 1.0:
        raise InvalidInputError(f"level must lie in (0, 1), got {level}")
    g = default_grid(model) if grid is None else np.asarray(grid, float).reshape(-1)
    if g.size < 2:
        raise InvalidInputError("region grid needs at least 2 points")
    if np.any(np.diff(g) <= 0):
        raise InvalidInputError("region grid must be strictly increasing")
    if g[0] < model.lower[0] or g[-1] > model.upper[0]:
        raise InvalidInputError("region grid must lie inside the parameter box")
    prob = EspProblem(model, data)
    T = prob.T
    if kind == "alr":
        est = estimate_esp(model, data, starts, problem=prob)
        vals = np.array([prob.objective(np.array([x])) for x in g])
        ref_val = est.objective_value
    else:
        try:
            est = estimate_mm_et(model, data, starts)
            ref_val = prob.log_k(est.theta_hat)
        except NoRootFoundError:
            est, ref_val = None, -math.inf
        vals = np.array([prob.log_k(np.array([x])) for x in g])
    finite = np.isfinite(vals)
    ref = max(ref_val, vals[finite].max()) if finite.any() else ref_val
    stats = np.where(finite, 2.0 * T * (ref - np.where(finite, vals, 0.0)), math.inf)
    crit = chi2_quantile(level, 1)
    accepted = stats <= crit
    theta_hat = est.theta_hat if est is not None else g[np.argmax(np.where(finite, vals, -np.inf))][None]
    return ConfidenceRegion(
        level=level, kind=kind, grid=g, statistics=stats, accepted=accepted,
        accepted_intervals=_runs(g, accepted), theta_hat=np.asarray(theta_hat, float),
        critical_value=crit,
    )


def write_region_csv(region: ConfidenceRegion, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["theta", "statistic", "accepted"])
    for x, s, a in zip(region.grid, region.statistics, region.accepted):
        w.writerow([fmt(x), fmt(s), fmt(bool(a))])

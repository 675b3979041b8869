"""Empirical saddlepoint objective: tilted sandwich, log-ESP value and gradient.

For a parameter value ``theta`` with tilting solution ``tau`` and tilted
weights ``w`` the log-ESP objective is::

    L(theta) = ln K - ln|Sigma_T| / (2 T)
    Sigma_T  = J^{-1} V J^{-T},  J = sum_t w_t dpsi_t/dtheta',  V = sum_t w_t psi_t psi_t'

and splits into ``M1 + M2 + M3`` with

    M1 = (1 - m/(2T)) ln K
    M2 = ln(|(1/T) sum_t e^{tau'psi_t} dpsi_t/dtheta'|^2) / (2T)
    M3 = -ln|(1/T) sum_t e^{tau'psi_t} psi_t psi_t'| / (2T)

Points where the tilting problem has no solution, or where ``Sigma_T`` is not
positive definite, lie outside the support; their log-density is ``-inf``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.integrate import trapezoid

from . import _kernels as _k
from ._format import fmt
from .errors import InvalidInputError, SupportBoundaryError
from .moment_model import Dataset, MomentModel
from .tilting import TiltingSolution, _tau_jacobian_arrays, solve_tilt_moments

__all__ = [
    "EspEvaluation",
    "EspProblem",
    "sigma_tilted",
    "evaluate",
    "gradient_objective",
    "profile",
    "ProfileRow",
    "write_profile_csv",
    "PROFILE_HEADER",
]

NEG_INF = float("-inf")


@dataclass(frozen=True)
class EspEvaluation:
    theta: np.ndarray
    tilting: TiltingSolution
    T: int
    m: int
    sigma_t: Optional[np.ndarray]
    log_det_sigma: float
    m1: float
    m2: float
    m3: float
    log_esp_objective: float
    log_esp_density: float
    in_support: bool

    @property
    def log_k(self) -> float:
        return self.tilting.log_k

    @property
    def log_et_density(self) -> float:
        if not self.tilting.converged:
            return NEG_INF
        return self.T * self.tilting.log_k + 0.5 * self.m * math.log(self.T / (2.0 * math.pi))


def _logdet_pd(A):
    """Log-determinant of a symmetric positive-definite matrix, or None."""
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    d = np.diagonal(c)
    if not np.all(d > 0):
        return None
    return 2.0 * float(np.log(d).sum())


def _logabsdet(A):
    """``ln|det A|`` from an LU factorization, or None when singular."""
    sign, ld = np.linalg.slogdet(A)
    if sign == 0 or not math.isfinite(ld):
        return None
    return float(ld)


def _inv(M, theta):
    try:
        return np.linalg.inv(M)
    except np.linalg.LinAlgError:
        raise SupportBoundaryError(f"singular tilted matrix at theta={theta}") from None


class EspProblem:
    """A model bound to one dataset; caches the design matrix.

    Most callers use the module-level functions; estimators and Monte-Carlo
    loops hold an ``EspProblem`` to avoid re-validating the data per point.
    """

    def __init__(self, model: MomentModel, data: Dataset, tilt_tol=None, tilt_max_iter=100):
        self.model = model
        self.data = data
        self.X = model.design(data)
        self.T = self.X.shape[0]
        self.m = model.param_dim
        if self.T <= self.m:
            raise InvalidInputError(
                f"need more observations than parameters (T={self.T}, m={self.m})"
            )
        self.tilt_tol = tilt_tol
        self.tilt_max_iter = tilt_max_iter

    # -- pieces ---------------------------------------------------------------

    def moments(self, theta):
        return self.model.moments(self.X, theta)

    def tilt(self, theta, P=None) -> TiltingSolution:
        if P is None:
            P = self.moments(theta)
        return solve_tilt_moments(P, tol=self.tilt_tol, max_iter=self.tilt_max_iter)

    def log_k(self, theta) -> float:
        """ET objective ``ln K(theta)``; ``-inf`` off the support."""
        sol = self.tilt(theta)
        return sol.log_k if sol.converged else NEG_INF

    # -- objective --------------------------------------------------------------

    def evaluate(self, theta) -> EspEvaluation:
        theta = np.asarray(theta, dtype=float).reshape(self.m)
        T, m = self.T, self.m
        P = self.moments(theta)
        sol = self.tilt(theta, P)

        def outside(tilting=sol):
            return EspEvaluation(
                theta=theta, tilting=tilting, T=T, m=m, sigma_t=None,
                log_det_sigma=math.inf, m1=math.nan, m2=math.nan, m3=math.nan,
                log_esp_objective=NEG_INF, log_esp_density=NEG_INF, in_support=False,
            )

        if not sol.converged:
            return outside()
        D = np.ascontiguousarray(self.model.jacobians(self.X, theta))
        ok, ld_v, ld_j, sigma, ld_a, ld_b, s = _k.tilted_sums(P, D, sol.tau, sol.weights)
        if not ok:
            return outside()
        log_det_sigma = ld_v - 2.0 * ld_j
        m1 = (1.0 - m / (2.0 * T)) * sol.log_k
        m2 = (m * s + ld_a) / T
        m3 = -(m * s + ld_b) / (2.0 * T)

        obj = sol.log_k - log_det_sigma / (2.0 * T)
        dens = T * sol.log_k + 0.5 * m * math.log(T / (2.0 * math.pi)) - 0.5 * log_det_sigma
        return EspEvaluation(
            theta=theta, tilting=sol, T=T, m=m, sigma_t=sigma,
            log_det_sigma=log_det_sigma, m1=m1, m2=m2, m3=m3,
            log_esp_objective=obj, log_esp_density=dens, in_support=True,
        )

    def objective(self, theta) -> float:
        """``L(theta)``, or ``-inf`` off the support or outside the parameter box."""
        if not self.model.in_box(theta):
            return NEG_INF
        return self.evaluate(theta).log_esp_objective

    def gradient(self, theta, evaluation: Optional[EspEvaluation] = None) -> np.ndarray:
        """Total derivative of ``theta -> L(theta, tau(theta))``."""
        theta = np.asarray(theta, dtype=float).reshape(self.m)
        H = self.model.hessians(self.X, theta)
        ev = evaluation if evaluation is not None else self.evaluate(theta)
        if not ev.in_support:
            raise SupportBoundaryError(f"theta={theta} is outside the ESP support")
        T, m = self.T, self.m
        P = self.moments(theta)
        D = self.model.jacobians(self.X, theta)
        tau, w = ev.tilting.tau, ev.tilting.weights
        td = np.einsum("k,tkj->tj", tau, D)
        J = np.einsum("t,tij->ij", w, D)
        V = (P * w[:, None]).T @ P
        Jinv, Vinv = _inv(J, theta), _inv(V, theta)
        c1 = 1.0 - m / (2.0 * T)

        # partials in theta at fixed tau
        d_m1 = c1 * (w @ td)
        G2 = np.einsum("t,tijk->jik", w, H) + np.einsum("t,tj,tik->jik", w, td, D)
        d_m2 = np.einsum("ab,jba->j", Jinv, G2) / T
        DP = np.einsum("t,tij,tk->jik", w, D, P)
        G3 = DP + DP.transpose(0, 2, 1) + np.einsum("t,tj,ti,tk->jik", w, td, P, P)
        d_m3 = -np.einsum("ab,jba->j", Vinv, G3) / (2.0 * T)

        # partials in tau at fixed theta
        dt_m1 = c1 * (w @ P)
        G2t = np.einsum("t,tk,tab->kab", w, P, D)
        dt_m2 = np.einsum("ab,kba->k", Jinv, G2t) / T
        G3t = np.einsum("t,tk,ta,tb->kab", w, P, P, P)
        dt_m3 = -np.einsum("ab,kba->k", Vinv, G3t) / (2.0 * T)

        dtau = _tau_jacobian_arrays(P, D, tau, w)
        return (d_m1 + d_m2 + d_m3) + dtau.T @ (dt_m1 + dt_m2 + dt_m3)

    def tau_partials(self, theta, evaluation: Optional[EspEvaluation] = None) -> dict:
        """The three ``dM_i/dtau`` vectors at ``(theta, tau(theta))``."""
        theta = np.asarray(theta, dtype=float).reshape(self.m)
        ev = evaluation if evaluation is not None else self.evaluate(theta)
        if not ev.in_support:
            raise SupportBoundaryError(f"theta={theta} is outside the ESP support")
        T, m = self.T, self.m
        P = self.moments(theta)
        D = self.model.jacobians(self.X, theta)
        w = ev.tilting.weights
        J = np.einsum("t,tij->ij", w, D)
        V = (P * w[:, None]).T @ P
        return {
            "m1": (1.0 - m / (2.0 * T)) * (w @ P),
            "m2": np.einsum("ab,kba->k", _inv(J, theta), np.einsum("t,tk,tab->kab", w, P, D)) / T,
            "m3": -np.einsum("ab,kba->k", _inv(V, theta), np.einsum("t,tk,ta,tb->kab", w, P, P, P))
            / (2.0 * T),
        }


def sigma_tilted(model: MomentModel, data: Dataset, theta, tilting: TiltingSolution) -> np.ndarray:
    """Tilted sandwich ``J^{-1} V J^{-T}`` for a given tilting solution."""
    if not tilting.converged:
        raise SupportBoundaryError("tilting did not converge; theta is outside the support")
    X = model.design(data)
    P = model.moments(X, theta)
    D = model.jacobians(X, theta)
    w = tilting.weights
    J = np.einsum("t,tij->ij", w, D)
    V = (P * w[:, None]).T @ P
    if _logdet_pd(V) is None:
        raise SupportBoundaryError("tilted second moment is not positive definite")
    if _logabsdet(J) is None:
        raise SupportBoundaryError("tilted jacobian is singular")
    S = sla.solve(J, sla.solve(J, V, check_finite=False).T, check_finite=False)
    return 0.5 * (S + S.T)


def evaluate(model: MomentModel, data: Dataset, theta) -> EspEvaluation:
    return EspProblem(model, data).evaluate(theta)


def gradient_objective(model: MomentModel, data: Dataset, theta) -> np.ndarray:
    """Analytic gradient of the log-ESP objective; needs ``psi_hessian``."""
    return EspProblem(model, data).gradient(theta)


PROFILE_HEADER = (
    "theta", "m1", "m2", "m3", "log_esp_objective", "log_esp_density",
    "log_et_density", "norm_esp", "norm_et", "in_support",
)


@dataclass(frozen=True)
class ProfileRow:
    theta: np.ndarray
    m1: float
    m2: float
    m3: float
    log_esp_objective: float
    log_esp_density: float
    log_et_density: float
    norm_esp: float
    norm_et: float
    in_support: bool


def _normalize(grid, logd):
    vals = np.zeros_like(logd)
    ok = np.isfinite(logd)
    if not ok.any():
        return vals
    vals[ok] = np.exp(logd[ok] - logd[ok].max())
    area = trapezoid(vals, grid)
    if area > 0:
        vals = vals / area
    return vals


def profile(model: MomentModel, data: Dataset, grid: Sequence) -> list:
    """Evaluate the decomposition on a grid and emit normalized ET/ESP curves.

    Normalization (scalar parameters only) exponentiates relative to the grid
    maximum and divides by the trapezoid integral; out-of-support points get 0.
    """
    pts = np.asarray(grid, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] == 0:
        raise InvalidInputError("profile grid is empty")
    prob = EspProblem(model, data)
    evs = [prob.evaluate(th) for th in pts]
    log_esp = np.array([e.log_esp_density for e in evs])
    log_et = np.array([e.log_et_density for e in evs])
    if prob.m == 1 and pts.shape[0] >= 2:
        g = pts[:, 0]
        n_esp, n_et = _normalize(g, log_esp), _normalize(g, log_et)
    else:
        n_esp = np.full(len(evs), math.nan)
        n_et = np.full(len(evs), math.nan)
    return [
        ProfileRow(
            theta=e.theta, m1=e.m1, m2=e.m2, m3=e.m3,
            log_esp_objective=e.log_esp_objective, log_esp_density=e.log_esp_density,
            log_et_density=e.log_et_density, norm_esp=float(a), norm_et=float(b),
            in_support=e.in_support,
        )
        for e, a, b in zip(evs, n_esp, n_et)
    ]


def write_profile_csv(rows, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(PROFILE_HEADER)
    for r in rows:
        theta = r.theta[0] if r.theta.size == 1 else ";".join(fmt(v) for v in r.theta)
        writer.writerow([
            fmt(theta) if r.theta.size == 1 else theta,
            fmt(r.m1), fmt(r.m2), fmt(r.m3), fmt(r.log_esp_objective),
            fmt(r.log_esp_density), fmt(r.log_et_density), fmt(r.norm_esp),
            fmt(r.norm_et), fmt(r.in_support),
        ])

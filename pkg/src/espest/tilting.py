"""Exponential tilting: the convex inner problem ``min_tau mean(exp(tau' psi_t))``.

The minimizer ``tau`` reweights the sample so the tilted moments average to
zero.  All sums are evaluated with the largest exponent factored out, so the
tilted weights stay representable when ``tau' psi_t`` is large.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import _kernels as _k
from .errors import InvalidInputError, SingularMatrixError
from .moment_model import Dataset, MomentModel

__all__ = [
    "TiltStatus",
    "TiltingSolution",
    "solve_tilt",
    "solve_tilt_moments",
    "kl_divergence",
    "tau_jacobian",
    "zero_in_hull_interior",
]

ARMIJO_C = 1e-4


class TiltStatus(str, enum.Enum):
    CONVERGED = "converged"
    NO_INTERIOR_SOLUTION = "no-interior-solution"
    MAX_ITERATIONS = "max-iterations"


@dataclass(frozen=True)
class TiltingSolution:
    tau: np.ndarray
    weights: np.ndarray
    log_k: float
    residual_norm: float
    iterations: int
    status: TiltStatus
    tol: float
    log_k_path: np.ndarray = None

    @property
    def k_value(self) -> float:
        return math.exp(self.log_k)

    @property
    def converged(self) -> bool:
        return self.status is TiltStatus.CONVERGED


_STATUS = {
    _k.CONVERGED: TiltStatus.CONVERGED,
    _k.NO_INTERIOR: TiltStatus.NO_INTERIOR_SOLUTION,
    _k.MAX_ITER: TiltStatus.MAX_ITERATIONS,
}


def _tilt_state(P, tau):
    a = P @ tau
    s = a.max()
    e = np.exp(a - s)
    S = e.sum()
    w = e / S
    log_k = s + math.log(S / P.shape[0])
    return w, log_k


def zero_in_hull_interior(P: np.ndarray) -> bool:
    """Whether the origin lies strictly inside the convex hull of the rows of ``P``.

    This is exactly the condition for the tilting problem to have a minimizer.
    """
    T, m = P.shape
    if m == 1:
        return bool(P.min() < 0.0 < P.max())
    if m == 2:
        nz = P[np.any(P != 0.0, axis=1)]
        if nz.shape[0] < 3:
            return False
        ang = np.sort(np.arctan2(nz[:, 1], nz[:, 0]))
        gaps = np.diff(np.concatenate([ang, ang[:1] + 2.0 * math.pi]))
        return bool(gaps.max() < math.pi)
    from scipy.optimize import linprog

    if np.linalg.matrix_rank(P) < m:
        return False
    # a direction tau with P tau <= 0 and sum(P tau) = -1 separates the origin
    res = linprog(
        c=np.zeros(m),
        A_ub=P,
        b_ub=np.zeros(T),
        A_eq=P.sum(axis=0)[None, :],
        b_eq=[-1.0],
        bounds=[(None, None)] * m,
        method="highs",
    )
    return res.status == 2  # infeasible


def solve_tilt_moments(P, tol=None, max_iter=100, tau_init=None) -> TiltingSolution:
    """Solve the tilting problem for a precomputed ``(T, m)`` moment matrix."""
    P = np.ascontiguousarray(P, dtype=float)
    T, m = P.shape
    scale = float(np.abs(P).mean())
    if tol is None:
        tol = 1e-10 * (1.0 + scale)
    bound = 1e4 * (1.0 + 1.0 / scale) if scale > 0 else 1e4
    tau = np.zeros(m) if tau_init is None else np.array(tau_init, dtype=float).reshape(m)

    interior = _k.hull_interior_low_dim(P) if m <= 2 else zero_in_hull_interior(P)
    if not interior:
        w, log_k = _tilt_state(P, tau)
        g = w @ P
        path, it, code, gnorm = np.array([log_k]), 0, _k.NO_INTERIOR, math.sqrt(float(g @ g))
    else:
        tau, w, log_k, it, code, path, gnorm = _k.tilt_newton(P, tau, tol, max_iter, bound, ARMIJO_C)
    return TiltingSolution(
        tau=tau,
        weights=w,
        log_k=log_k,
        residual_norm=math.exp(log_k) * gnorm,
        iterations=it,
        status=_STATUS[code],
        tol=tol,
        log_k_path=path,
    )


def solve_tilt(
    model: MomentModel, data: Dataset, theta, tol=None, max_iter=100, tau_init=None
) -> TiltingSolution:
    """Tilting vector, tilted weights and dual value at ``theta``.

    Newton iterations on the dual use the tilted second moment as Hessian and
    halve the step until the Armijo condition holds.  When the origin is not
    interior to the convex hull of the moments there is no minimizer and the
    status is ``no-interior-solution``.
    """
    X = model.design(data)
    return solve_tilt_moments(model.moments(X, theta), tol=tol, max_iter=max_iter, tau_init=tau_init)


def kl_divergence(weights) -> float:
    """Kullback-Leibler divergence of ``weights`` from the uniform distribution."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if np.any(w <= 0):
        raise InvalidInputError("weights must be strictly positive")
    if abs(w.sum() - 1.0) > 1e-10:
        raise InvalidInputError("weights must sum to 1")
    return float(np.sum(w * np.log(w.size * w)))


def _tau_jacobian_arrays(P, D, tau, w):
    B = (P * w[:, None]).T @ P
    td = np.einsum("k,tkj->tj", tau, D)  # tau' d psi_t / d theta'
    C = np.einsum("t,tij->ij", w, D) + np.einsum("t,ti,tj->ij", w, P, td)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            return -sla.solve(B, C, assume_a="pos", check_finite=False)
    except (sla.LinAlgError, ValueError) as exc:
        raise SingularMatrixError("tilted second-moment matrix is singular") from exc


def tau_jacobian(model: MomentModel, data: Dataset, theta, solution: TiltingSolution) -> np.ndarray:
    """Implicit derivative ``d tau / d theta'`` of the tilting solution."""
    if not solution.converged:
        raise InvalidInputError("tau_jacobian needs a converged tilting solution")
    X = model.design(data)
    P = model.moments(X, theta)
    D = model.jacobians(X, theta)
    return _tau_jacobian_arrays(P, D, solution.tau, solution.weights)

"""MM/ET root finding, ESP maximization and the linearly constrained ESP estimator."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from .errors import (
    EmptySupportError,
    EspError,
    InvalidInputError,
    InvalidRestrictionError,
    NoRootFoundError,
    NumericDomainError,
    UnsupportedOperationError,
)
from .esp_objective import EspProblem
from .moment_model import Dataset, MomentModel, fd_step

__all__ = [
    "EstimationResult",
    "OptimizerTrace",
    "Restriction",
    "coarse_grid",
    "sandwich_covariance",
    "objective_gradient",
    "estimate_mm_et",
    "estimate_et",
    "estimate_esp",
    "estimate_constrained",
]

GRID_PER_DIM = 8
# grid points handed to Nelder-Mead after screening, besides user starts and the MM root
SCREEN_KEEP = 3
# Newton steps taken past the root tolerance while the residual still falls
_ROOT_POLISH = 5


@dataclass(frozen=True)
class OptimizerTrace:
    iterations: int
    restarts: int
    status: str
    evaluations: int = 0


@dataclass(frozen=True)
class EstimationResult:
    method: str
    theta_hat: np.ndarray
    objective_value: float
    covariance: np.ndarray
    lagrange_multiplier: Optional[np.ndarray] = None
    optimizer_trace: OptimizerTrace = field(default_factory=lambda: OptimizerTrace(0, 0, "none"))

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diagonal(self.covariance), 0.0, None))


@dataclass(frozen=True)
class Restriction:
    """Linear restriction ``A theta = b`` with full row rank ``A`` (``q x m``).

    Build with :meth:`fix` to pin coordinates or :meth:`linear` for a general
    affine constraint.
    """

    A: np.ndarray
    b: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.A, dtype=float))
        b = np.array(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise InvalidRestrictionError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
        if A.shape[0] > A.shape[1]:
            raise InvalidRestrictionError("more restrictions than parameters")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise InvalidRestrictionError("restriction entries must be finite")
        if np.linalg.matrix_rank(A) < A.shape[0]:
            raise InvalidRestrictionError("restriction matrix is rank deficient")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def fix(cls, m: int, indices: Sequence[int], values: Sequence[float]) -> "Restriction":
        idx = [int(i) for i in indices]
        vals = np.asarray(values, dtype=float).reshape(-1)
        if len(idx) != vals.size:
            raise InvalidRestrictionError("need one value per pinned index")
        if len(set(idx)) != len(idx) or any(i < 0 or i >= m for i in idx):
            raise InvalidRestrictionError(f"pinned indices must be distinct and in [0, {m})")
        return cls(np.eye(m)[idx], vals, kind="fix")

    @classmethod
    def linear(cls, A, b) -> "Restriction":
        return cls(A, b)

    @property
    def q(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    def residual(self, theta) -> np.ndarray:
        return self.A @ np.asarray(theta, float) - self.b

    def jacobian(self, theta=None) -> np.ndarray:
        return self.A

    def parametrization(self):
        """Particular point and null-space basis: ``theta = p + N z``."""
        if self.kind == "fix":
            pinned = np.flatnonzero(self.A.any(axis=0))
            order = np.argmax(self.A, axis=1)
            p = np.zeros(self.m)
            p[order] = self.b
            free = [j for j in range(self.m) if j not in set(pinned)]
            return p, np.eye(self.m)[:, free]
        p = np.linalg.lstsq(self.A, self.b, rcond=None)[0]
        return p, sla.null_space(self.A)


def coarse_grid(model: MomentModel, per_dim: int = GRID_PER_DIM) -> np.ndarray:
    """Cell midpoints of a ``per_dim``-per-axis partition of the parameter box."""
    axes = [
        lo + (np.arange(per_dim) + 0.5) * (hi - lo) / per_dim
        for lo, hi in zip(model.lower, model.upper)
    ]
    return np.array(list(itertools.product(*axes)), dtype=float)


def _starts(model, starts) -> list:
    out = []
    for s in starts or ():
        s = np.asarray(s, dtype=float).reshape(-1)
        if s.shape != (model.m,):
            raise InvalidInputError(f"start point must have length {model.m}")
        out.append(s)
    return out


def sandwich_covariance(model: MomentModel, data: Dataset, theta, weights=None) -> np.ndarray:
    """``J^{-1} V J^{-T} / T`` at ``theta``; uniform weights unless given (e.g. tilted ones)."""
    X = model.design(data)
    T = X.shape[0]
    P = model.moments(X, theta)
    D = model.jacobians(X, theta)
    w = np.full(T, 1.0 / T) if weights is None else np.asarray(weights, float)
    J = np.einsum("t,tij->ij", w, D)
    V = (P * w[:, None]).T @ P
    try:
        S = np.linalg.solve(J, np.linalg.solve(J, V).T)
    except np.linalg.LinAlgError:
        return np.full((model.m, model.m), math.nan)
    S = 0.5 * (S + S.T) / T
    return S


# --- MM / ET -------------------------------------------------------------------


def _psi_bar(model, X, theta):
    """Mean moment and its root-finding tolerance ``1e-8 (1 + mean|psi|)``; None if not finite."""
    with np.errstate(over="ignore", invalid="ignore"):
        P = np.asarray(model.psi(X, theta), dtype=float)
    g = P.reshape(X.shape[0], -1).mean(axis=0)
    if not np.all(np.isfinite(g)):
        return None, math.inf
    return g, 1e-8 * (1.0 + float(np.abs(P).mean()))


def _jac_bar(model, X, theta):
    if model.psi_jacobian is None:
        return model.jacobians(X, theta).mean(axis=0)
    with np.errstate(over="ignore", invalid="ignore"):
        D = np.asarray(model.psi_jacobian(X, theta), dtype=float)
    return D.reshape(X.shape[0], model.m, model.m).mean(axis=0)


def _newton_root(model, X, theta, max_iter=100):
    """Damped Newton on ``psi_bar`` with iterates clamped to the box.

    Returns ``(theta, residual, tol, iterations)``.
    """
    lo, hi = model.lower, model.upper
    theta = np.clip(theta, lo, hi)
    g, tol = _psi_bar(model, X, theta)
    if g is None:
        return theta, math.inf, tol, 0
    r = math.sqrt(float(g @ g))
    extra = 0
    for it in range(max_iter):
        if r <= tol:
            # a few more full steps take the root down to roundoff
            extra += 1
            if extra > _ROOT_POLISH:
                return theta, r, tol, it
        try:
            step = np.linalg.solve(_jac_bar(model, X, theta), g)
        except (np.linalg.LinAlgError, NumericDomainError):
            return theta, r, tol, it
        if not np.all(np.isfinite(step)):
            return theta, r, tol, it
        alpha = 1.0
        while alpha > (1e-10 if r > tol else 0.2):
            cand = np.clip(theta - alpha * step, lo, hi)
            gc, tc = _psi_bar(model, X, cand)
            if gc is not None:
                rc = math.sqrt(float(gc @ gc))
                if rc < r:
                    break
            alpha *= 0.5
        else:
            return theta, r, tol, it
        theta, g, r, tol = cand, gc, rc, tc
    return theta, r, tol, max_iter


def estimate_mm_et(model: MomentModel, data: Dataset, starts=None) -> EstimationResult:
    """Root of the sample moment conditions (the ET estimate when just identified).

    Damped Newton runs from the user starts, then from the coarse-grid points,
    in that order; the first run that meets the tolerance gives the estimate.
    Residuals below tolerance are roundoff, so they do not rank distinct roots.
    """
    X = model.design(data)
    cands = _starts(model, starts) + list(coarse_grid(model))
    best, best_r, iters = None, math.inf, 0
    for k, s in enumerate(cands):
        th, r, tol, it = _newton_root(model, X, s)
        iters += it
        if r <= tol:
            model.moments(X, th)  # raises on a non-finite row
            return EstimationResult(
                method="mm-et",
                theta_hat=th,
                objective_value=r,
                covariance=sandwich_covariance(model, data, th),
                optimizer_trace=OptimizerTrace(iters, k + 1, "converged", k + 1),
            )
        if r < best_r:
            best, best_r = th, r
    raise NoRootFoundError(
        f"no start reached the root tolerance (best |psi_bar| = {best_r:.3g})",
        best_residual=best_r,
        best_theta=best,
    )


# --- derivative-free maximization ------------------------------------------------


def _maximize_nm(f, x0, step, max_iter):
    """Nelder-Mead on ``-f`` with a right-angled initial simplex; ``-inf`` maps to ``+inf``."""
    x0 = np.asarray(x0, float)
    n = x0.size
    simplex = np.vstack([x0] + [x0 + step[j] * np.eye(n)[j] for j in range(n)])
    count = [0]

    def neg(x):
        count[0] += 1
        v = f(x)
        return -v if math.isfinite(v) else math.inf

    res = minimize(
        neg,
        x0,
        method="Nelder-Mead",
        options={
            "initial_simplex": simplex,
            "xatol": 1e-6 * max(1.0, float(np.max(np.abs(step)))),
            "fatol": 1e-13,
            "maxiter": max_iter,
            "maxfev": 2 * max_iter,
            "adaptive": False,
        },
    )
    val = -float(res.fun) if math.isfinite(res.fun) else -math.inf
    return np.asarray(res.x, float), val, int(res.nit), count[0]


def objective_gradient(problem: EspProblem, theta) -> np.ndarray:
    """Analytic gradient when the model has second derivatives, else central differences."""
    theta = np.asarray(theta, float)
    try:
        return problem.gradient(theta)
    except UnsupportedOperationError:
        pass
    g = np.empty_like(theta)
    for j in range(theta.size):
        h = fd_step(theta[j])
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        g[j] = (problem.objective(up) - problem.objective(dn)) / (up[j] - dn[j])
    return g


def _polish(problem, f, to_theta, z, val, basis, max_steps=20):
    """Newton ascent on ``f(z)`` with a differenced-gradient Hessian.

    ``to_theta`` maps reduced coordinates to parameters and ``basis`` is the
    matching linear map, so the gradient in ``z`` is ``basis' grad``.  Steps
    are kept only when they raise the objective.
    """
    if not problem.model.has_hessian:
        return z, val, 0

    def grad(zz):
        return basis.T @ problem.gradient(to_theta(zz))

    n = z.size
    steps = 0
    for _ in range(max_steps):
        try:
            g = grad(z)
            H = np.empty((n, n))
            for j in range(n):
                h = fd_step(z[j]) * 1e-1
                e = np.zeros(n)
                e[j] = h
                H[:, j] = (grad(z + e) - grad(z - e)) / (2 * h)
        except EspError:
            break
        if not np.all(np.isfinite(H)) or not np.all(np.isfinite(g)):
            break
        H = 0.5 * (H + H.T)
        if np.linalg.norm(g) <= 1e-12 * (1.0 + abs(val)):
            break
        try:
            ev = np.linalg.eigvalsh(H)
            d = -np.linalg.solve(H, g) if ev.max() < 0 else g / max(1.0, float(np.abs(ev).max()))
        except np.linalg.LinAlgError:
            d = g
        alpha, improved = 1.0, False
        while alpha > 1e-8:
            zc = z + alpha * d
            vc = f(zc)
            if vc > val:
                z, val, improved = zc, vc, True
                break
            alpha *= 0.5
        steps += 1
        if not improved:
            break
    return z, val, steps


def _best(cands):
    """Largest objective, then lexicographically smallest parameter."""
    return min(cands, key=lambda c: (-c[1], tuple(c[0])))


def _multistart(f, starts, grid, step, max_iter, polish):
    """Screen ``grid``, run Nelder-Mead from ``starts`` and the best grid points, polish."""
    evals = 0
    gvals = []
    for x in grid:
        gvals.append(f(x))
        evals += 1
    order = sorted(
        (i for i, v in enumerate(gvals) if math.isfinite(v)), key=lambda i: (-gvals[i], i)
    )
    seeds = list(starts) + [grid[i] for i in order[:SCREEN_KEEP]]
    seeds = [s for s in seeds if math.isfinite(f(s))]
    evals += len(starts) + min(len(order), SCREEN_KEEP)
    if not seeds:
        return None, evals, 0, len(starts) + len(grid)
    results = []
    iters = 0
    for s in seeds:
        x, v, it, nfev = _maximize_nm(f, s, step, max_iter)
        evals += nfev
        iters += it
        x, v, k = polish(x, v)
        iters += k
        results.append((x, v))
    return _best(results), evals, iters, len(seeds)


def estimate_et(model: MomentModel, data: Dataset, starts=None) -> EstimationResult:
    """Maximizer of ``ln K`` over the parameter box.

    Coincides with the MM root whenever the root lies in the box; otherwise
    returns the constrained maximizer on the box boundary, with status
    ``"boundary"``.
    """
    prob = EspProblem(model, data)
    try:
        return estimate_mm_et(model, data, starts)
    except NoRootFoundError:
        pass
    lo, hi = model.lower, model.upper

    def f(z):
        return prob.log_k(np.clip(z, lo, hi))

    step = (hi - lo) / 16.0
    grid = coarse_grid(model)
    best, evals, iters, restarts = _multistart(
        f, _starts(model, starts), grid, step, 400 * model.m, lambda x, v: (x, v, 0)
    )
    if best is None:
        raise EmptySupportError("ln K is -inf at every start")
    theta = np.clip(best[0], lo, hi)
    X = model.design(data)
    r = float(np.linalg.norm(model.moments(X, theta).mean(axis=0)))
    return EstimationResult(
        method="mm-et",
        theta_hat=theta,
        objective_value=r,
        covariance=sandwich_covariance(model, data, theta),
        optimizer_trace=OptimizerTrace(iters, restarts, "boundary", evals),
    )


def estimate_esp(
    model: MomentModel, data: Dataset, starts=None, problem=None, mm_root=None
) -> EstimationResult:
    """Maximizer of the log-ESP objective.

    Every coarse-grid point is evaluated; Nelder-Mead then runs from the user
    starts, the MM root (when one exists) and the best few grid points, and
    each run is polished by Newton ascent when second derivatives of the
    moment function are available.  Pass ``mm_root`` to reuse a root found
    earlier instead of solving for it again.
    """
    prob = problem if problem is not None else EspProblem(model, data)
    user = _starts(model, starts)
    if mm_root is not None:
        user.append(np.asarray(mm_root, float).reshape(model.m))
    else:
        try:
            user.append(estimate_mm_et(model, data, user).theta_hat)
        except NoRootFoundError:
            pass
    ident = np.eye(model.m)
    step = (model.upper - model.lower) / 16.0
    best, evals, iters, restarts = _multistart(
        prob.objective,
        user,
        coarse_grid(model),
        step,
        400 * model.m,
        lambda x, v: _polish(prob, prob.objective, lambda z: z, x, v, ident),
    )
    if best is None:
        raise EmptySupportError("every start point lies outside the ESP support")
    theta, val = best
    return EstimationResult(
        method="esp",
        theta_hat=theta,
        objective_value=val,
        covariance=sandwich_covariance(model, data, theta),
        optimizer_trace=OptimizerTrace(iters, restarts, "converged", evals),
    )


def estimate_constrained(
    model: MomentModel, data: Dataset, restriction: Restriction, starts=None, problem=None
) -> EstimationResult:
    """ESP maximizer on ``{theta : A theta = b}`` with its Lagrange multiplier.

    The multiplier solves ``grad L(theta_c) + A' gamma = 0`` in least squares,
    where ``L`` is the log-ESP objective (``ln f / T`` up to a constant).
    """
    if restriction.m != model.m:
        raise InvalidRestrictionError(
            f"restriction is over {restriction.m} parameters, model has {model.m}"
        )
    prob = problem if problem is not None else EspProblem(model, data)
    p, N = restriction.parametrization()
    k = N.shape[1]

    def to_theta(z):
        return p + N @ z

    def f(z):
        return prob.objective(to_theta(z))

    evals = iters = restarts = 0
    if k == 0:
        theta = p.copy()
        val = prob.objective(theta)
        evals = 1
        status = "pinned"
    else:
        user = [N.T @ (s - p) for s in _starts(model, starts)]
        grid = np.array([N.T @ (g - p) for g in coarse_grid(model)])
        grid = np.unique(np.round(grid, 12), axis=0)
        grid = np.array([z for z in grid if model.in_box(to_theta(z))]).reshape(-1, k)
        span = (N.T @ np.diag(model.upper - model.lower) @ N)
        step = np.abs(np.diagonal(span)) / 16.0
        best, evals, iters, restarts = _multistart(
            f, user, list(grid), step, 400 * k,
            lambda z, v: _polish(prob, f, to_theta, z, v, N),
        )
        if best is None:
            raise EmptySupportError("restricted set has no point in the ESP support")
        theta, val = to_theta(best[0]), best[1]
        status = "converged"
    if not math.isfinite(val):
        raise EmptySupportError(f"restricted point {theta} is outside the ESP support")
    g = objective_gradient(prob, theta)
    gamma = np.linalg.lstsq(restriction.A.T, -g, rcond=None)[0]
    return EstimationResult(
        method="esp-constrained",
        theta_hat=theta,
        objective_value=val,
        covariance=sandwich_covariance(model, data, theta),
        lagrange_multiplier=gamma,
        optimizer_trace=OptimizerTrace(iters, restarts, status, evals),
    )

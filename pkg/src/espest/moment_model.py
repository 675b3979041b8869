"""Moment-condition models, datasets and averaged moment evaluation.

A model is a just-identified moment function ``psi(x, theta)`` returning as
many moments as there are parameters.  All callables are vectorized over
observations: they receive the full ``(T, p)`` data matrix and return

* ``psi``           -> ``(T, m)``
* ``psi_jacobian``  -> ``(T, m, m)``, entry ``[t, i, j] = d psi_i / d theta_j``
* ``psi_hessian``   -> ``(T, m, m, m)``, entry ``[t, i, j, k] = d2 psi_i / d theta_j d theta_k``

Models and datasets are immutable, so evaluation is reentrant.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, NumericDomainError

__all__ = [
    "Dataset",
    "MomentModel",
    "read_csv",
    "eval_psi_bar",
    "jacobian_bar",
    "builtin_hall_horowitz",
    "builtin_crra",
    "builtin_location",
    "HALL_HOROWITZ_THETA0",
]

HALL_HOROWITZ_THETA0 = np.array([3.0, -0.72])

_FD_STEP = np.finfo(float).eps ** (1.0 / 3.0)


@dataclass(frozen=True)
class Dataset:
    """``T`` observations of ``p``-dimensional rows."""

    rows: np.ndarray
    column_names: Optional[tuple] = None

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float, copy=True)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.ndim != 2:
            raise InvalidInputError(f"dataset rows must be a 2-d array, got ndim={rows.ndim}")
        if rows.shape[0] < 2:
            raise InvalidInputError(f"dataset needs at least 2 rows, got {rows.shape[0]}")
        bad = ~np.isfinite(rows)
        if bad.any():
            r = int(np.argwhere(bad)[0][0])
            raise InvalidInputError(f"non-finite entry in dataset row {r}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        if self.column_names is not None:
            names = tuple(str(c) for c in self.column_names)
            if len(names) != rows.shape[1]:
                raise InvalidInputError(
                    f"{len(names)} column names for {rows.shape[1]} columns"
                )
            object.__setattr__(self, "column_names", names)

    @property
    def T(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        if self.column_names is None:
            raise InvalidInputError("dataset has no column names to resolve " + ", ".join(names))
        idx = []
        for name in names:
            try:
                idx.append(self.column_names.index(name))
            except ValueError:
                raise InvalidInputError(
                    f"column {name!r} not found; available: {', '.join(self.column_names)}"
                ) from None
        return self.rows[:, idx]

    def take(self, index) -> "Dataset":
        return Dataset(self.rows[np.asarray(index)], self.column_names)


def read_csv(path) -> Dataset:
    """Read a comma-separated file whose first line holds the column names."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if not record or all(not f.strip() for f in record):
                continue
            if len(record) != len(header):
                raise InvalidInputError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(record)}"
                )
            try:
                rows.append([float(f) for f in record])
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: unparsable field in {record!r}") from None
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")
    return Dataset(np.array(rows), tuple(header))


@dataclass(frozen=True)
class MomentModel:
    """A just-identified moment function with optional analytic derivatives.

    ``columns`` names the dataset columns the model reads, in order; when it
    is ``None`` the dataset is used as is and must have ``data_dim`` columns.
    ``check_rows`` may reject data the moment function is undefined on.
    """

    name: str
    param_dim: int
    data_dim: int
    psi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    psi_jacobian: Optional[Callable] = None
    psi_hessian: Optional[Callable] = None
    columns: Optional[tuple] = None
    param_names: Optional[tuple] = None
    check_rows: Optional[Callable[[np.ndarray], None]] = field(default=None, repr=False)

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != (self.param_dim,) or hi.shape != (self.param_dim,):
            raise InvalidInputError("param_box bounds must have length param_dim")
        if not np.all(lo < hi):
            raise InvalidInputError("param_box requires lower < upper componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(self.columns))
            if len(self.columns) != self.data_dim:
                raise InvalidInputError("columns must list data_dim names")
        if self.param_names is None:
            object.__setattr__(
                self, "param_names", tuple(f"theta{j}" for j in range(self.param_dim))
            )

    @property
    def m(self) -> int:
        return self.param_dim

    @property
    def has_jacobian(self) -> bool:
        return self.psi_jacobian is not None

    @property
    def has_hessian(self) -> bool:
        return self.psi_hessian is not None

    def with_box(self, lower, upper) -> "MomentModel":
        """Copy of the model restricted to another parameter box."""
        from dataclasses import replace

        return replace(self, lower=np.asarray(lower, float), upper=np.asarray(upper, float))

    def in_box(self, theta, rel_eps: float = 0.0) -> bool:
        theta = np.asarray(theta, float)
        slack = rel_eps * (self.upper - self.lower)
        return bool(np.all(theta >= self.lower - slack) and np.all(theta <= self.upper + slack))

    def design(self, data: Dataset) -> np.ndarray:
        """Return the ``(T, data_dim)`` matrix the moment function consumes."""
        if self.columns is not None and data.column_names is not None:
            X = data.columns(self.columns)
        else:
            X = data.rows
        if X.shape[1] != self.data_dim:
            raise InvalidInputError(
                f"model {self.name} expects {self.data_dim} data columns, got {X.shape[1]}"
            )
        if self.check_rows is not None:
            self.check_rows(X)
        return X

    def _theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape != (self.param_dim,):
            raise InvalidInputError(
                f"theta must have length {self.param_dim}, got {theta.shape[0]}"
            )
        return theta

    def moments(self, X: np.ndarray, theta) -> np.ndarray:
        """Per-observation moments, shape ``(T, m)``."""
        theta = self._theta(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.asarray(self.psi(X, theta), dtype=float)
        if out.ndim == 1 and self.param_dim == 1:
            out = out[:, None]
        if out.shape != (X.shape[0], self.param_dim):
            raise InvalidInputError(
                f"psi returned shape {out.shape}, expected {(X.shape[0], self.param_dim)}"
            )
        _check_finite(out, "psi")
        return out

    def jacobians(self, X: np.ndarray, theta) -> np.ndarray:
        """Per-observation jacobians ``d psi / d theta'``, shape ``(T, m, m)``."""
        theta = self._theta(theta)
        m = self.param_dim
        if self.psi_jacobian is not None:
            with np.errstate(over="ignore", invalid="ignore"):
                out = np.asarray(self.psi_jacobian(X, theta), dtype=float)
            out = out.reshape(X.shape[0], m, m)
        else:
            out = np.empty((X.shape[0], m, m))
            for j in range(m):
                h = _FD_STEP * max(1.0, abs(theta[j]))
                up, dn = theta.copy(), theta.copy()
                up[j] += h
                dn[j] -= h
                out[:, :, j] = (self.moments(X, up) - self.moments(X, dn)) / (up[j] - dn[j])
        _check_finite(out, "psi jacobian")
        return out

    def hessians(self, X: np.ndarray, theta) -> np.ndarray:
        """Per-observation second derivatives, shape ``(T, m, m, m)``."""
        if self.psi_hessian is None:
            from .errors import UnsupportedOperationError

            raise UnsupportedOperationError(
                f"model {self.name} has no psi_hessian; use finite differences of the objective"
            )
        theta = self._theta(theta)
        m = self.param_dim
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.asarray(self.psi_hessian(X, theta), dtype=float)
        out = out.reshape(X.shape[0], m, m, m)
        _check_finite(out, "psi hessian")
        return out


def _check_finite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise NumericDomainError(f"non-finite {what} at row {row}", row=row)


def _check_weights(weights, T: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape != (T,):
        raise InvalidInputError(f"weights must have length {T}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
        raise InvalidInputError("weights must be nonnegative and sum to 1")
    return w


def eval_psi_bar(model: MomentModel, data: Dataset, theta) -> np.ndarray:
    """Sample average of the moment function at ``theta``."""
    X = model.design(data)
    return model.moments(X, theta).mean(axis=0)


def jacobian_bar(model: MomentModel, data: Dataset, theta, weights=None) -> np.ndarray:
    """Weighted average jacobian ``sum_t w_t d psi_t / d theta'`` (uniform by default)."""
    X = model.design(data)
    D = model.jacobians(X, theta)
    if weights is None:
        return D.mean(axis=0)
    w = _check_weights(weights, X.shape[0])
    return np.einsum("t,tij->ij", w, D)


# --- built-in models -------------------------------------------------------


def _hh_core(X, theta):
    beta, mu = theta
    x, y = X[:, 0], X[:, 1]
    s = x + y
    e = np.exp(mu - beta * s + 3.0 * y)
    return x, y, s, e


def _hh_psi(X, theta):
    _, y, _, e = _hh_core(X, theta)
    u = e - 1.0
    return np.column_stack([u, y * u])


def _hh_jac(X, theta):
    _, y, s, e = _hh_core(X, theta)
    g = np.stack([-s * e, e], axis=-1)  # d psi_1 / d(beta, mu)
    return np.stack([g, y[:, None] * g], axis=1)


def _hh_hess(X, theta):
    _, y, s, e = _hh_core(X, theta)
    h = np.empty((X.shape[0], 2, 2))
    h[:, 0, 0] = s * s * e
    h[:, 0, 1] = h[:, 1, 0] = -s * e
    h[:, 1, 1] = e
    return np.stack([h, y[:, None, None] * h], axis=1)


def builtin_hall_horowitz(lower=(-5.0, -5.0), upper=(15.0, 5.0)) -> MomentModel:
    """Just-identified Hall-Horowitz model, parameters ordered ``(beta, mu)``.

    ``psi_1 = exp(mu - beta (X + Y) + 3 Y) - 1`` and ``psi_2 = Y psi_1``.
    """
    return MomentModel(
        name="hall-horowitz",
        param_dim=2,
        data_dim=2,
        psi=_hh_psi,
        lower=np.asarray(lower, float),
        upper=np.asarray(upper, float),
        psi_jacobian=_hh_jac,
        psi_hessian=_hh_hess,
        param_names=("beta", "mu"),
    )


def _crra_check(X):
    bad = X[:, 0] <= 0
    if bad.any():
        row = int(np.argmax(bad))
        raise NumericDomainError(f"consumption ratio must be positive (row {row})", row=row)


def _crra_parts(X, theta):
    logc = np.log(X[:, 0])
    excess = X[:, 1] - X[:, 2]
    psi = np.exp(-theta[0] * logc) * excess
    return logc, psi


def _crra_psi(X, theta):
    return _crra_parts(X, theta)[1][:, None]


def _crra_jac(X, theta):
    logc, psi = _crra_parts(X, theta)
    return (-logc * psi)[:, None, None]


def _crra_hess(X, theta):
    logc, psi = _crra_parts(X, theta)
    return (logc * logc * psi)[:, None, None, None]


def builtin_crra(
    c_ratio: str = "c_ratio",
    r_m: str = "r_m",
    r_f: str = "r_f",
    lower: float = -300.0,
    upper: float = 900.0,
) -> MomentModel:
    """Consumption-based asset pricing condition ``(C_t/C_{t-1})^{-theta} (R_m - R_f)``.

    The consumption ratio is read as a precomputed column.
    """
    return MomentModel(
        name="crra",
        param_dim=1,
        data_dim=3,
        psi=_crra_psi,
        lower=np.array([lower]),
        upper=np.array([upper]),
        psi_jacobian=_crra_jac,
        psi_hessian=_crra_hess,
        columns=(c_ratio, r_m, r_f),
        param_names=("theta",),
        check_rows=_crra_check,
    )


def builtin_location(lower: float = -1e3, upper: float = 1e3) -> MomentModel:
    """Scalar location model ``psi(x, theta) = theta - x``; its MM root is the mean."""
    return MomentModel(
        name="location",
        param_dim=1,
        data_dim=1,
        psi=lambda X, th: th[0] - X[:, :1],
        lower=np.array([lower]),
        upper=np.array([upper]),
        psi_jacobian=lambda X, th: np.ones((X.shape[0], 1, 1)),
        psi_hessian=lambda X, th: np.zeros((X.shape[0], 1, 1, 1)),
        param_names=("theta",),
    )


def fd_step(theta_j: float) -> float:
    """Central-difference step used for derivative fallbacks."""
    return _FD_STEP * max(1.0, math.fabs(theta_j))

"""Monte-Carlo comparison of the ET and ESP estimators on the Hall-Horowitz design.

Replication ``r`` at sample size ``T`` draws from its own generator seeded by
``SeedSequence(seed, spawn_key=(T, r))``, so results do not depend on how
replications are split across worker processes.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._format import fmt
from .errors import EspError, InvalidInputError
from .estimation import estimate_esp, estimate_et
from .moment_model import HALL_HOROWITZ_THETA0, Dataset, builtin_hall_horowitz

__all__ = [
    "McConfig",
    "McCell",
    "McSummary",
    "simulate_hh_sample",
    "replication_rng",
    "run_replication",
    "run_mc",
    "summarize",
    "write_mc_csv",
    "MC_HEADER",
]

THREADS_ENV = "ESPEST_THREADS"
PARAMS = ("beta", "mu")


@dataclass(frozen=True)
class McConfig:
    sample_size: int = 25
    replications: int = 1000
    seed: int = 0
    true_theta: tuple = tuple(HALL_HOROWITZ_THETA0)
    noise_sd: float = 0.4
    et_beta_cap: float = 15.0
    # ET searches [lower, (cap, upper_mu)]; ESP searches the wider esp box
    lower: tuple = (-15.0, -30.0)
    upper_mu: float = 10.0
    esp_upper: tuple = (35.0, 10.0)

    def __post_init__(self):
        if int(self.replications) < 1:
            raise InvalidInputError("replications must be at least 1")
        if int(self.sample_size) < 3:
            raise InvalidInputError("sample_size must be at least 3")
        if not self.noise_sd > 0:
            raise InvalidInputError("noise_sd must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInputError("seed must be an unsigned 64-bit integer")
        if not self.et_beta_cap > self.lower[0]:
            raise InvalidInputError("et_beta_cap must exceed the lower beta bound")

    @property
    def theta0(self) -> np.ndarray:
        return np.asarray(self.true_theta, dtype=float)


def replication_rng(seed: int, T: int, r: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(T), int(r))))


def simulate_hh_sample(rng: np.random.Generator, T: int, noise_sd: float = 0.4) -> Dataset:
    """``T`` i.i.d. rows of independent ``N(0, noise_sd^2)`` draws ``(X_t, Y_t)``.

    Normals come from numpy's ziggurat sampler, drawn row by row (``X_1, Y_1,
    X_2, ...``).
    """
    Z = noise_sd * rng.standard_normal((int(T), 2))
    return Dataset(Z, column_names=("x", "y"))


def _models(cfg: McConfig):
    et = builtin_hall_horowitz(cfg.lower, (cfg.et_beta_cap, cfg.upper_mu))
    esp = builtin_hall_horowitz(cfg.lower, cfg.esp_upper)
    return et, esp


def run_replication(cfg: McConfig, r: int, models=None):
    """Estimates ``(theta_et, theta_esp)`` for replication ``r``; a failed estimator gives NaNs."""
    et_model, esp_model = models if models is not None else _models(cfg)
    data = simulate_hh_sample(replication_rng(cfg.seed, cfg.sample_size, r), cfg.sample_size, cfg.noise_sd)
    th0 = cfg.theta0
    nan = np.full(2, math.nan)
    root = None
    try:
        et = estimate_et(et_model, data, [th0])
        theta_et = et.theta_hat
        if et.optimizer_trace.status == "converged":
            root = theta_et
    except EspError:
        theta_et = nan
    try:
        theta_esp = estimate_esp(esp_model, data, [th0], mm_root=root).theta_hat
    except EspError:
        theta_esp = nan
    return theta_et, theta_esp


def _chunk(args):
    cfg, rs = args
    models = _models(cfg)
    return [run_replication(cfg, r, models) for r in rs]


@dataclass(frozen=True)
class McCell:
    estimator: str
    param: str
    mse: float
    bias: float
    variance: float
    failures: int


@dataclass(frozen=True)
class McSummary:
    config: McConfig
    cells: list
    estimates: dict = field(repr=False, default_factory=dict)

    def cell(self, estimator: str, param: str) -> McCell:
        for c in self.cells:
            if c.estimator == estimator and c.param == param:
                return c
        raise KeyError((estimator, param))


def summarize(errors: np.ndarray):
    """Population mse, bias and variance of the finite rows of ``errors`` (reps x params)."""
    ok = np.all(np.isfinite(errors), axis=1)
    e = errors[ok]
    failures = int((~ok).sum())
    if e.shape[0] == 0:
        n = errors.shape[1]
        return [(math.nan, math.nan, math.nan, failures)] * n
    bias = e.mean(axis=0)
    dev = e - bias
    var = (dev * dev).mean(axis=0)
    mse = (e * e).mean(axis=0)
    return [(float(mse[j]), float(bias[j]), float(var[j]), failures) for j in range(e.shape[1])]


def _workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def run_mc(config: McConfig, workers: int | None = None) -> McSummary:
    """Simulate, estimate and summarize; failed replications are counted, not summarized."""
    R = int(config.replications)
    n = _workers() if workers is None else max(1, int(workers))
    if n == 1:
        rows = _chunk((config, range(R)))
    else:
        # contiguous blocks keep the output order equal to the replication order
        bounds = np.linspace(0, R, n + 1).astype(int)
        jobs = [(config, range(bounds[i], bounds[i + 1])) for i in range(n)]
        with ProcessPoolExecutor(max_workers=n) as pool:
            rows = [row for part in pool.map(_chunk, jobs) for row in part]
    et = np.array([row[0] for row in rows])
    esp = np.array([row[1] for row in rows])
    th0 = config.theta0
    cells = []
    for name, est in (("ET", et), ("ESP", esp)):
        for p, (mse, bias, var, fails) in zip(PARAMS, summarize(est - th0)):
            cells.append(McCell(name, p, mse, bias, var, fails))
    return McSummary(config, cells, {"ET": et, "ESP": esp})


MC_HEADER = ("T", "estimator", "param", "mse", "bias", "variance", "failures")


def write_mc_csv(summaries, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(MC_HEADER)
    for s in summaries:
        for c in s.cells:
            w.writerow([
                s.config.sample_size, c.estimator, c.param,
                fmt(c.mse), fmt(c.bias), fmt(c.variance), c.failures,
            ])

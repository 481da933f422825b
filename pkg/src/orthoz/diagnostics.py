"""Realized terms of the root-n expansion on simulated data, and checks on them.

With known ``theta0`` and ``h0`` the scaled moment at the truth splits as

    B = (1/sqrt n) sum m(Z_t, theta0, h_hat(X_t))
      = C + D + E

where ``C`` uses ``h0``, ``D`` is the first-order nuisance term
``(1/sqrt n) sum grad_gamma m(Z_t, theta0, h0(X_t)) . (h_hat - h0)(X_t)`` and
``E`` is the second-order remainder. ``E`` is computed from each model's
per-observation Taylor remainder rather than as ``B - C - D``, so the identity
``B = C + D + E`` is a genuine check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike

from .errors import ContractViolation, SingularMatrix
from .numerics import FloatArray, as_vector, inverse, normal_cdf

if TYPE_CHECKING:
    from .firststage import LearnerSpec
    from .moments import MomentModel
    from .montecarlo import DgpSpec

KS_COEFFICIENT = 1.36
KS_SLACK = 0.03
MIN_NORMALITY_SAMPLE = 200
E_BOUND_ATOL = 1e-12


@dataclass
class ProofDecomposition:
    A_hat: FloatArray | None  # inverse empirical Jacobian at (theta_hat, h_hat); None if singular
    A_target: FloatArray | None  # population J^{-1}, when supplied
    B: FloatArray
    C: FloatArray
    D: FloatArray
    E: FloatArray
    E_bound: float
    mse_main: float  # (1/n) sum ||h_hat - h0||^2 over the main sample
    n: int
    lambda_star: float

    @property
    def identity_error(self) -> float:
        """``||B - C - D - E|| / (1 + ||B||)``."""
        gap = self.B - self.C - self.D - self.E
        return float(np.linalg.norm(gap) / (1.0 + np.linalg.norm(self.B)))

    @property
    def A_deviation(self) -> float:
        if self.A_hat is None or self.A_target is None:
            return float("nan")
        return float(np.linalg.norm(self.A_hat - self.A_target))


def decompose(
    model: MomentModel,
    Z: FloatArray,
    theta0: ArrayLike,
    theta_hat: ArrayLike,
    h_hat: Callable | FloatArray,
    h0: Callable | FloatArray,
    lambda_star: float,
    J_inv_target: FloatArray | None = None,
) -> ProofDecomposition:
    """Compute the realized expansion terms on the main sample ``Z``.

    Nuisance arguments may be functions of X or precomputed ``(n, ell)`` arrays.
    """
    if lambda_star < 0:
        raise ContractViolation("lambda_star must be non-negative")
    Z = np.asarray(Z, dtype=float)
    n = Z.shape[0]
    if n == 0:
        raise ContractViolation("main sample must be non-empty")
    th0 = as_vector(theta0, model.d, name="theta0")
    th_hat = as_vector(theta_hat, model.d, name="theta_hat")
    X = model.x(Z)
    G_hat = h_hat if isinstance(h_hat, np.ndarray) else np.asarray(h_hat(X), dtype=float)
    G0 = h0 if isinstance(h0, np.ndarray) else np.asarray(h0(X), dtype=float)
    G_hat = G_hat.reshape(n, model.ell)
    G0 = G0.reshape(n, model.ell)
    delta = G_hat - G0
    root_n = math.sqrt(n)

    B = model.moment(Z, th0, G_hat).sum(axis=0) / root_n
    C = model.moment(Z, th0, G0).sum(axis=0) / root_n
    D = np.einsum("ndl,nl->d", model.grad_gamma(Z, th0, G0), delta) / root_n
    E = model.taylor_remainder(Z, th0, G0, delta).sum(axis=0) / root_n

    mse_main = float(np.mean(np.sum(delta * delta, axis=1))) if model.ell else 0.0
    E_bound = 0.5 * lambda_star * root_n * mse_main

    try:
        A_hat = inverse(model.grad_theta(Z, th_hat, G_hat).mean(axis=0))
    except SingularMatrix:
        A_hat = None
    return ProofDecomposition(
        A_hat=A_hat,
        A_target=None if J_inv_target is None else np.asarray(J_inv_target, dtype=float),
        B=B,
        C=C,
        D=D,
        E=E,
        E_bound=float(E_bound),
        mse_main=mse_main,
        n=n,
        lambda_star=float(lambda_star),
    )


@dataclass(frozen=True)
class EBoundCheck:
    E_abs: FloatArray
    E_bound: float
    passed: bool


def check_E_bound(dec: ProofDecomposition) -> EBoundCheck:
    """``|E_i| <= (lambda*/2) sqrt(n) mean ||h_hat - h0||^2`` for every coordinate."""
    E_abs = np.abs(dec.E)
    return EBoundCheck(E_abs, dec.E_bound, bool(np.all(E_abs <= dec.E_bound + E_BOUND_ATOL)))


@dataclass(frozen=True)
class NormalityResult:
    ks_stat: float
    mean: float
    sd: float
    threshold: float
    passed: bool
    count: int


def ks_statistic(values: ArrayLike) -> float:
    """Two-sided Kolmogorov-Smirnov distance to the standard normal CDF."""
    x = np.sort(np.asarray(values, dtype=float))
    r = x.size
    cdf = normal_cdf(x)
    upper = np.arange(1, r + 1) / r - cdf
    lower = cdf - np.arange(0, r) / r
    return float(max(upper.max(), lower.max()))


def ks_threshold(count: int) -> float:
    return KS_COEFFICIENT / math.sqrt(count) + KS_SLACK


def normality_check(standardized: Sequence[float]) -> NormalityResult:
    x = np.asarray(standardized, dtype=float)
    if x.size < MIN_NORMALITY_SAMPLE:
        raise ContractViolation(f"normality_check needs at least {MIN_NORMALITY_SAMPLE} values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("standardized values must be finite")
    stat = ks_statistic(x)
    threshold = ks_threshold(x.size)
    return NormalityResult(stat, float(x.mean()), float(x.std(ddof=1)), threshold, stat < threshold, int(x.size))


@dataclass(frozen=True)
class TrajectoryRow:
    n: int
    mean_D: float
    mean_E: float
    mean_A_dev: float
    sd_C: float
    replications: int


def term_trajectories(
    model: MomentModel,
    dgp: DgpSpec,
    learner: LearnerSpec,
    n_grid: Sequence[int],
    replications: int,
    seed: int,
    aux_fraction: float = 0.5,
) -> list[TrajectoryRow]:
    """Monte Carlo means of ``|D|``, ``|E|``, ``||A_hat - J^{-1}||`` and the spread of ``C`` per ``n``."""
    from .montecarlo import Cell, run_replication

    grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ContractViolation("n_grid must be strictly increasing")
    if replications < 50:
        raise ContractViolation("term_trajectories needs at least 50 replications")
    rows = []
    for n in grid:
        cell = Cell(dgp=dgp, model=model, learner=learner, n=n, aux_fraction=aux_fraction)
        reps = [run_replication(cell, rep, seed) for rep in range(replications)]
        reps = [r for r in reps if r.converged]
        rows.append(
            TrajectoryRow(
                n=n,
                mean_D=float(np.mean([r.D_abs for r in reps])),
                mean_E=float(np.mean([r.E_abs for r in reps])),
                mean_A_dev=float(np.nanmean([r.A_dev for r in reps])),
                sd_C=float(np.std([r.C for r in reps], ddof=1)),
                replications=len(reps),
            )
        )
    return rows

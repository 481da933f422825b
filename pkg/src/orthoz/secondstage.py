"""Second stage: sample splitting, the Newton Z-estimator and sandwich inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np
from numpy.typing import ArrayLike

from .errors import ContractViolation, EvaluationError, SingularJacobian, SingularMatrix
from .firststage import LearnerSpec, NuisanceFunction, fit
from .moments import MomentModel
from .numerics import FloatArray, as_vector, inverse, normal_quantile, rng_stream, solve_linear

MAX_HALVINGS = 30
JACOBIAN_FLOOR = 1e-12


@dataclass(frozen=True)
class SplitPlan:
    aux_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.aux_fraction < 1.0:
            raise ContractViolation(f"aux_fraction must lie in (0, 1), got {self.aux_fraction}")


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-10
    max_iter: int = 100
    theta_init: tuple[float, ...] | None = None
    alpha: float = 0.05


@dataclass
class EstimateResult:
    theta_hat: FloatArray
    converged: bool
    iterations: int
    residual_norm: float
    n: int
    message: str = ""
    J_hat: FloatArray | None = None
    V_hat: FloatArray | None = None
    Sigma_hat: FloatArray | None = None
    std_errors: FloatArray | None = None
    ci_lower: FloatArray | None = None
    ci_upper: FloatArray | None = None
    alpha: float | None = None
    trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        def conv(v):
            return v.tolist() if isinstance(v, np.ndarray) else v

        return {
            "theta_hat": conv(self.theta_hat),
            "std_errors": conv(self.std_errors),
            "ci_lower": conv(self.ci_lower),
            "ci_upper": conv(self.ci_upper),
            "alpha": self.alpha,
            "J_hat": conv(self.J_hat),
            "V_hat": conv(self.V_hat),
            "Sigma_hat": conv(self.Sigma_hat),
            "n": self.n,
            "newton": {
                "converged": self.converged,
                "iterations": self.iterations,
                "residual_norm": self.residual_norm,
                "residual_trace": list(self.trace),
                "message": self.message,
            },
        }


def split(n: int, plan: SplitPlan) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (aux, main) index sets; ``|aux| = round(aux_fraction * n)`` (half up)."""
    if n < 2:
        raise ContractViolation("need at least two observations to split")
    n_aux = int(math.floor(plan.aux_fraction * n + 0.5))
    if n_aux < 1 or n_aux > n - 1:
        raise ContractViolation(f"aux_fraction {plan.aux_fraction} leaves an empty split of {n} points")
    perm = rng_stream(plan.seed, 0, "split").permutation(n)
    return np.sort(perm[:n_aux]), np.sort(perm[n_aux:])


def _nuisance_values(model: MomentModel, Z: FloatArray, h_hat: Callable) -> FloatArray:
    G = np.asarray(h_hat(model.x(Z)), dtype=float)
    return G.reshape(Z.shape[0], model.ell)


def _mean_checked(values: FloatArray, what: str) -> FloatArray:
    if not np.all(np.isfinite(values)):
        row = int(np.argwhere(~np.isfinite(values.reshape(values.shape[0], -1)))[0, 0])
        raise EvaluationError(f"{what} is non-finite at observation {row}", index=row)
    return values.mean(axis=0)


def empirical_moment(model: MomentModel, Z: FloatArray, theta: ArrayLike, h_hat: Callable | FloatArray) -> FloatArray:
    """``(1/n) sum_t m(Z_t, theta, h_hat(X_t))``.

    ``h_hat`` may be a nuisance function or the precomputed ``(n, ell)`` values.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] == 0:
        raise ContractViolation("main sample must be non-empty")
    th = as_vector(theta, model.d, name="theta")
    G = h_hat if isinstance(h_hat, np.ndarray) else _nuisance_values(model, Z, h_hat)
    return _mean_checked(model.moment(Z, th, G), "moment")


def _jacobian(model, Z, theta, G) -> FloatArray:
    J = _mean_checked(model.grad_theta(Z, theta, G), "grad_theta")
    # pivoting is scale-free, so a Jacobian that is zero up to rounding (e.g. a
    # regressor fully explained by its nuisance) is caught against the data scale
    scale = float(np.max(np.mean(Z * Z, axis=0))) if Z.size else 0.0
    if np.max(np.abs(J)) <= JACOBIAN_FLOOR * (1.0 + scale):
        raise SingularJacobian("empirical Jacobian vanishes relative to the data scale", math.inf)
    return J


def solve_z(
    model: MomentModel,
    Z: FloatArray,
    h_hat: Callable | FloatArray,
    theta_init: ArrayLike | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> EstimateResult:
    """Find a root of the empirical moment by damped Newton iteration.

    Each step ``theta - J(theta)^{-1} mbar(theta)`` is halved (up to 30 times)
    until the residual norm decreases. Non-convergence returns the best
    iterate with ``converged=False``.

    Raises
    ------
    SingularJacobian
        If the empirical Jacobian is singular at an iterate or at the root.
    """
    if not tol > 0:
        raise ContractViolation("tol must be positive")
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] == 0:
        raise ContractViolation("main sample must be non-empty")
    G = h_hat if isinstance(h_hat, np.ndarray) else _nuisance_values(model, Z, h_hat)
    theta = np.zeros(model.d) if theta_init is None else as_vector(theta_init, model.d, name="theta_init").copy()

    mbar = empirical_moment(model, Z, theta, G)
    res = float(np.linalg.norm(mbar))
    trace = [res]
    for it in range(max_iter + 1):
        if res <= tol:
            # a root with a singular Jacobian is not locally identified (e.g. a moment flat in theta)
            try:
                solve_linear(_jacobian(model, Z, theta, G), mbar)
            except SingularMatrix as exc:
                raise SingularJacobian("empirical Jacobian singular at the root", exc.condition) from None
            return EstimateResult(theta, True, it, res, Z.shape[0], "converged", trace=trace)
        if it == max_iter:
            break
        try:
            step = solve_linear(_jacobian(model, Z, theta, G), mbar)
        except SingularMatrix as exc:
            raise SingularJacobian(f"empirical Jacobian singular at iteration {it}", exc.condition) from None
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = theta - scale * step
            cand_mbar = empirical_moment(model, Z, cand, G)
            cand_res = float(np.linalg.norm(cand_mbar))
            if cand_res < res:
                break
            scale *= 0.5
        else:
            trace.append(res)
            return EstimateResult(theta, False, it + 1, res, Z.shape[0], "line search failed to reduce the residual", trace=trace)
        theta, mbar, res = cand, cand_mbar, cand_res
        trace.append(res)
    return EstimateResult(theta, False, max_iter, res, Z.shape[0], f"no convergence after {max_iter} iterations", trace=trace)


def infer(
    model: MomentModel,
    Z: FloatArray,
    result: EstimateResult,
    h_hat: Callable | FloatArray,
    alpha: float = 0.05,
) -> EstimateResult:
    """Plug-in sandwich covariance ``J^{-1} V J^{-T}`` and Wald intervals at (theta_hat, h_hat)."""
    if not result.converged:
        raise ContractViolation("inference requires a converged estimate")
    if not 0.0 < alpha < 1.0:
        raise ContractViolation(f"alpha must lie in (0, 1), got {alpha}")
    Z = np.asarray(Z, dtype=float)
    n = Z.shape[0]
    G = h_hat if isinstance(h_hat, np.ndarray) else _nuisance_values(model, Z, h_hat)
    theta = result.theta_hat
    J = _jacobian(model, Z, theta, G)
    m = model.moment(Z, theta, G)
    V = (m.T @ m) / n
    try:
        J_inv = inverse(J)
    except SingularMatrix as exc:
        raise SingularJacobian("empirical Jacobian singular at the estimate", exc.condition) from None
    Sigma = J_inv @ V @ J_inv.T
    Sigma = 0.5 * (Sigma + Sigma.T)
    se = np.sqrt(np.clip(np.diag(Sigma), 0.0, None) / n)
    z = normal_quantile(1.0 - alpha / 2.0)
    return replace(
        result,
        J_hat=J,
        V_hat=V,
        Sigma_hat=Sigma,
        std_errors=se,
        ci_lower=theta - z * se,
        ci_upper=theta + z * se,
        alpha=alpha,
    )


@dataclass
class TwoStageOutcome:
    result: EstimateResult
    nuisance: NuisanceFunction
    aux_index: np.ndarray
    main_index: np.ndarray


def two_stage(
    model: MomentModel,
    Z: FloatArray,
    learner: LearnerSpec,
    plan: SplitPlan,
    settings: SolverSettings = SolverSettings(),
    truth: Callable[[FloatArray], FloatArray] | None = None,
) -> TwoStageOutcome:
    """Split, fit the nuisance on the auxiliary part only, then solve and infer on the main part.

    A non-converged solve is returned without inference. A model without
    nuisance (``ell = 0``) has nothing to fit, so every row goes to the main part.
    """
    Z = np.asarray(Z, dtype=float)
    if model.ell == 0:
        if Z.shape[0] == 0:
            raise ContractViolation("data must be non-empty")
        aux_idx, main_idx = np.arange(0), np.arange(Z.shape[0])
        nuisance = NuisanceFunction(lambda X: np.zeros((len(X), 0)), 0, None, {"learner": "none", "n_train": 0})
    else:
        aux_idx, main_idx = split(Z.shape[0], plan)
        Z_aux = Z[aux_idx]
        nuisance = fit(learner, model.x(Z_aux), model.nuisance_targets(Z_aux), truth=truth)
    Z_main = Z[main_idx]
    G = _nuisance_values(model, Z_main, nuisance)
    result = solve_z(model, Z_main, G, settings.theta_init, settings.tol, settings.max_iter)
    if result.converged:
        result = infer(model, Z_main, result, G, settings.alpha)
    return TwoStageOutcome(result, nuisance, aux_idx, main_idx)

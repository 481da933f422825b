"""Moment functions m(z, theta, gamma) with analytic derivatives, plus
orthogonality diagnostics.

Models are evaluated in bulk: ``Z`` is an ``(n, p)`` array of observations,
``theta`` a length-``d`` vector and ``G`` an ``(n, ell)`` array holding the
nuisance value plugged in for each row. Derivative arrays carry the
observation axis first:

* ``moment``        -> ``(n, d)``
* ``grad_theta``    -> ``(n, d, d)``
* ``grad_gamma``    -> ``(n, d, ell)``
* ``hessian_gamma`` -> ``(n, d, ell, ell)``
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, ClassVar, Sequence

import numpy as np
from numpy.typing import ArrayLike

from .errors import ContractViolation, EvaluationError, UnsupportedOperation
from .numerics import FloatArray, as_vector, eigen_bound_sym

if TYPE_CHECKING:
    from .montecarlo import DgpSpec

NuisanceMap = Callable[[FloatArray], FloatArray]

ORTHOGONALITY_THRESHOLD = 4.0


@dataclass(frozen=True)
class Observation:
    """A single data point ``z`` and its nuisance-relevant subvector ``x``."""

    z: FloatArray
    x: FloatArray

    @classmethod
    def from_z(cls, z: ArrayLike, x_index: Sequence[int]) -> Observation:
        zz = as_vector(z, name="z")
        idx = list(x_index)
        if any(i < 0 or i >= zz.size for i in idx):
            raise ContractViolation(f"x indices {idx} out of range for z of length {zz.size}")
        return cls(z=zz, x=zz[idx])


def _check_finite(values: FloatArray, what: str) -> FloatArray:
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values.reshape(values.shape[0], -1)))
        row = int(bad[0, 0])
        raise EvaluationError(f"{what} is non-finite at observation {row}", index=row)
    return values


class MomentModel(ABC):
    """Base class for exactly identified moment functions.

    Subclasses set the class-level dimensions and implement the four
    evaluators. ``nuisance_names`` label the conditional functions that make
    up ``h0``; data-generating processes supply the truth for those labels.
    """

    name: ClassVar[str]
    d: ClassVar[int]
    ell: ClassVar[int]
    nuisance_names: ClassVar[tuple[str, ...]] = ()
    # whether E[grad_gamma m | X] = 0 is expected at (theta0, h0); drives pass/fail expectations
    orthogonal: ClassVar[bool] = True

    def __init__(self, x_dim: int = 1):
        if x_dim < 0:
            raise ContractViolation("x_dim must be non-negative")
        self.x_dim = x_dim

    @property
    def z_dim(self) -> int:
        return self.n_leading + self.x_dim

    n_leading: ClassVar[int] = 0

    @property
    def x_index(self) -> tuple[int, ...]:
        return tuple(range(self.n_leading, self.n_leading + self.x_dim))

    # bounds known in closed form, None when data dependent
    sigma_bound: float | None = None
    lambda_bound: float | None = None

    def x(self, Z: FloatArray) -> FloatArray:
        return np.asarray(Z, dtype=float)[:, list(self.x_index)]

    @abstractmethod
    def moment(self, Z: FloatArray, theta: FloatArray, G: FloatArray) -> FloatArray: ...

    @abstractmethod
    def grad_theta(self, Z: FloatArray, theta: FloatArray, G: FloatArray) -> FloatArray: ...

    @abstractmethod
    def grad_gamma(self, Z: FloatArray, theta: FloatArray, G: FloatArray) -> FloatArray: ...

    @abstractmethod
    def hessian_gamma(self, Z: FloatArray, theta: FloatArray, G: FloatArray) -> FloatArray: ...

    @abstractmethod
    def nuisance_targets(self, Z: FloatArray) -> FloatArray:
        """Per-row regression targets whose conditional mean given X is h0(X)."""

    def taylor_remainder(self, Z: FloatArray, theta: FloatArray, G0: FloatArray, delta: FloatArray) -> FloatArray:
        """m(G0 + delta) - m(G0) - grad_gamma m(G0) . delta, per observation."""
        linear = np.einsum("ndl,nl->nd", self.grad_gamma(Z, theta, G0), delta)
        return self.moment(Z, theta, G0 + delta) - self.moment(Z, theta, G0) - linear

    def describe(self) -> dict:
        return {"name": self.name, "d": self.d, "ell": self.ell, "x_dim": self.x_dim}

    def __repr__(self) -> str:
        return f"{type(self).__name__}(x_dim={self.x_dim})"


class PlrMoment(MomentModel):
    """Residual-on-residual partially linear regression moment.

    ``z = (y, w, x...)``, ``gamma = (E[Y|X], E[W|X])`` and

        m = (y - g_y - theta (w - g_w)) (w - g_w).

    The moment is quadratic in gamma with Hessian ``[[0, 1], [1, -2 theta]]``.
    """

    name = "plr"
    d = 1
    ell = 2
    n_leading = 2
    nuisance_names = ("E[Y|X]", "E[W|X]")
    orthogonal = True

    def _residuals(self, Z, theta, G):
        Z = np.asarray(Z, dtype=float)
        v = Z[:, 1] - G[:, 1]
        u = Z[:, 0] - G[:, 0] - theta[0] * v
        return u, v

    def moment(self, Z, theta, G):
        u, v = self._residuals(Z, theta, G)
        return (u * v)[:, None]

    def grad_theta(self, Z, theta, G):
        _, v = self._residuals(Z, theta, G)
        return (-(v * v))[:, None, None]

    def grad_gamma(self, Z, theta, G):
        u, v = self._residuals(Z, theta, G)
        return np.stack([-v, theta[0] * v - u], axis=1)[:, None, :]

    def hessian_gamma(self, Z, theta, G):
        n = np.asarray(Z).shape[0]
        hess = np.array([[0.0, 1.0], [1.0, -2.0 * theta[0]]])
        return np.broadcast_to(hess, (n, 1, 2, 2)).copy()

    def taylor_remainder(self, Z, theta, G0, delta):
        # exact: the moment is quadratic in gamma with a gamma-free Hessian
        return (delta[:, 0] * delta[:, 1] - theta[0] * delta[:, 1] ** 2)[:, None]

    def nuisance_targets(self, Z):
        Z = np.asarray(Z, dtype=float)
        return Z[:, :2].copy()


class NaivePlrMoment(MomentModel):
    """Non-orthogonal partially linear moment ``m = (y - theta w - g) w``.

    The nuisance is ``g0(X) = E[Y - theta0 W | X]``. Its first-stage target
    uses ``theta_ref`` in place of the unknown ``theta0``; simulations set it
    to the true value so that only the missing orthogonality separates this
    moment from :class:`PlrMoment`.
    """

    name = "plr-naive"
    d = 1
    ell = 1
    n_leading = 2
    nuisance_names = ("g0",)
    orthogonal = False

    def __init__(self, x_dim: int = 1, theta_ref: float = 0.0):
        super().__init__(x_dim)
        self.theta_ref = float(theta_ref)

    def moment(self, Z, theta, G):
        Z = np.asarray(Z, dtype=float)
        y, w = Z[:, 0], Z[:, 1]
        return ((y - theta[0] * w - G[:, 0]) * w)[:, None]

    def grad_theta(self, Z, theta, G):
        w = np.asarray(Z, dtype=float)[:, 1]
        return (-(w * w))[:, None, None]

    def grad_gamma(self, Z, theta, G):
        w = np.asarray(Z, dtype=float)[:, 1]
        return (-w)[:, None, None]

    def hessian_gamma(self, Z, theta, G):
        return np.zeros((np.asarray(Z).shape[0], 1, 1, 1))

    def taylor_remainder(self, Z, theta, G0, delta):
        return np.zeros((np.asarray(Z).shape[0], 1))

    def nuisance_targets(self, Z):
        Z = np.asarray(Z, dtype=float)
        return (Z[:, 0] - self.theta_ref * Z[:, 1])[:, None]

    def describe(self) -> dict:
        return {**super().describe(), "theta_ref": self.theta_ref}

    def __repr__(self) -> str:
        return f"NaivePlrMoment(x_dim={self.x_dim}, theta_ref={self.theta_ref})"


class MeanMoment(MomentModel):
    """``m = y - theta``: no nuisance, the Z-estimator is the sample mean."""

    name = "mean"
    d = 1
    ell = 0
    n_leading = 1
    sigma_bound = 0.0
    lambda_bound = 0.0

    def __init__(self, x_dim: int = 0):
        super().__init__(x_dim)

    def moment(self, Z, theta, G):
        return (np.asarray(Z, dtype=float)[:, 0] - theta[0])[:, None]

    def grad_theta(self, Z, theta, G):
        return -np.ones((np.asarray(Z).shape[0], 1, 1))

    def grad_gamma(self, Z, theta, G):
        return np.zeros((np.asarray(Z).shape[0], 1, 0))

    def hessian_gamma(self, Z, theta, G):
        return np.zeros((np.asarray(Z).shape[0], 1, 0, 0))

    def taylor_remainder(self, Z, theta, G0, delta):
        return np.zeros((np.asarray(Z).shape[0], 1))

    def nuisance_targets(self, Z):
        return np.zeros((np.asarray(Z).shape[0], 0))


MODELS: dict[str, type[MomentModel]] = {
    PlrMoment.name: PlrMoment,
    NaivePlrMoment.name: NaivePlrMoment,
    MeanMoment.name: MeanMoment,
}


def get_model(name: str, **kwargs) -> MomentModel:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ContractViolation(f"unknown moment model {name!r}; known: {sorted(MODELS)}") from None
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# single-observation evaluation


def _prepare(model: MomentModel, obs: Observation, theta: ArrayLike, gamma: ArrayLike):
    th = as_vector(theta, model.d, name="theta")
    g = np.asarray(gamma, dtype=float).reshape(-1)
    if g.size != model.ell:
        raise ContractViolation(f"gamma must have length {model.ell}, got {g.size}")
    if not np.all(np.isfinite(g)):
        raise ContractViolation("gamma contains non-finite entries")
    z = np.asarray(obs.z, dtype=float).reshape(1, -1)
    if z.shape[1] < model.z_dim:
        raise ContractViolation(f"{model.name} needs z of length {model.z_dim}, got {z.shape[1]}")
    return z, th, g.reshape(1, model.ell)


def eval_moment(model: MomentModel, obs: Observation, theta: ArrayLike, gamma: ArrayLike) -> FloatArray:
    z, th, g = _prepare(model, obs, theta, gamma)
    return _check_finite(model.moment(z, th, g), "moment")[0]


def eval_grad_theta(model: MomentModel, obs: Observation, theta: ArrayLike, gamma: ArrayLike) -> FloatArray:
    z, th, g = _prepare(model, obs, theta, gamma)
    return _check_finite(model.grad_theta(z, th, g), "grad_theta")[0]


def eval_grad_gamma(model: MomentModel, obs: Observation, theta: ArrayLike, gamma: ArrayLike) -> FloatArray:
    z, th, g = _prepare(model, obs, theta, gamma)
    return _check_finite(model.grad_gamma(z, th, g), "grad_gamma")[0]


def eval_hessian_gamma(model: MomentModel, obs: Observation, theta: ArrayLike, gamma: ArrayLike) -> list[FloatArray]:
    z, th, g = _prepare(model, obs, theta, gamma)
    hess = _check_finite(model.hessian_gamma(z, th, g), "hessian_gamma")[0]
    return [hess[i] for i in range(model.d)]


# ---------------------------------------------------------------------------
# orthogonality diagnostics


@dataclass
class ConditionalOrthogonalityReport:
    grid: FloatArray  # (k, x_dim)
    means: FloatArray  # (k, d, ell) Monte Carlo estimates of E[grad_gamma m | X = x]
    std_errors: FloatArray
    standardized: FloatArray
    max_standardized: float
    orthogonal: bool
    draws_per_point: int


def check_conditional_orthogonality(
    model: MomentModel,
    dgp: DgpSpec,
    theta: ArrayLike,
    grid: Sequence,
    draws_per_point: int,
    rng: np.random.Generator,
) -> ConditionalOrthogonalityReport:
    """Monte Carlo estimate of ``E[grad_gamma m(Z, theta, h0(x)) | X = x]`` on a grid.

    The model is flagged orthogonal when every entry's ``|mean| / SE`` is below 4.
    An entry with zero mean and zero spread counts as exactly orthogonal.
    """
    if draws_per_point < 1000:
        raise ContractViolation("draws_per_point must be at least 1000")
    sampler = getattr(dgp, "sample_conditional", None)
    if sampler is None:
        raise UnsupportedOperation(f"DGP {getattr(dgp, 'name', dgp)!r} has no conditional sampler")
    th = as_vector(theta, model.d, name="theta")
    h0 = dgp.h0(model)
    points = np.asarray(grid, dtype=float).reshape(len(grid), -1)

    means, ses = [], []
    for x in points:
        Z = sampler(rng, x, draws_per_point)
        G = h0(model.x(Z))
        grads = _check_finite(model.grad_gamma(Z, th, G), "grad_gamma")
        means.append(grads.mean(axis=0))
        ses.append(grads.std(axis=0, ddof=1) / np.sqrt(draws_per_point))
    means_arr = np.asarray(means).reshape(len(points), model.d, model.ell)
    ses_arr = np.asarray(ses).reshape(len(points), model.d, model.ell)

    with np.errstate(divide="ignore", invalid="ignore"):
        standardized = np.where(ses_arr > 0, np.abs(means_arr) / ses_arr, np.where(means_arr == 0, 0.0, np.inf))
    worst = float(standardized.max()) if standardized.size else 0.0
    return ConditionalOrthogonalityReport(
        grid=points,
        means=means_arr,
        std_errors=ses_arr,
        standardized=standardized,
        max_standardized=worst,
        orthogonal=worst < ORTHOGONALITY_THRESHOLD,
        draws_per_point=draws_per_point,
    )


def orthogonality_score(
    model: MomentModel,
    theta: ArrayLike,
    h_hat: NuisanceMap,
    h0: NuisanceMap,
    Z: FloatArray,
    with_se: bool = False,
):
    """Sample mean of ``grad_gamma m(Z, theta, h0(X)) . (h_hat(X) - h0(X))``.

    ``Z`` must be independent of the data used to fit ``h_hat``. With
    ``with_se=True`` the per-coordinate standard error is returned as well.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] == 0:
        raise ContractViolation("sample must be non-empty")
    th = as_vector(theta, model.d, name="theta")
    X = model.x(Z)
    G0 = h0(X)
    delta = h_hat(X) - G0
    terms = np.einsum("ndl,nl->nd", _check_finite(model.grad_gamma(Z, th, G0), "grad_gamma"), delta)
    score = terms.mean(axis=0)
    if not with_se:
        return score
    se = terms.std(axis=0, ddof=1) / np.sqrt(Z.shape[0]) if Z.shape[0] > 1 else np.zeros(model.d)
    return score, se


@dataclass(frozen=True)
class BoundEstimate:
    sigma_hat: float
    lambda_hat: float


def estimate_bounds(
    model: MomentModel,
    Z: FloatArray,
    theta_box: tuple[ArrayLike, ArrayLike],
    gamma_box: tuple[ArrayLike, ArrayLike],
    probes: int,
    rng: np.random.Generator,
) -> BoundEstimate:
    """Probe ``sup ||grad_gamma m||`` and the Hessian eigenvalue bound.

    Each probe picks a random observation and uniform ``theta``/``gamma`` in
    the boxes. The maxima are lower bounds on the true suprema.
    """
    if probes < 1:
        raise ContractViolation("probes must be at least 1")
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] == 0:
        raise ContractViolation("samples must be non-empty")
    t_lo, t_hi = (as_vector(b, model.d, name="theta_box") for b in theta_box)
    if model.ell == 0:
        return BoundEstimate(0.0, 0.0)
    g_lo, g_hi = (as_vector(b, model.ell, name="gamma_box") for b in gamma_box)
    if np.any(t_hi < t_lo) or np.any(g_hi < g_lo):
        raise ContractViolation("box upper bounds must not be below lower bounds")

    rows = rng.integers(Z.shape[0], size=probes)
    thetas = rng.uniform(t_lo, t_hi, size=(probes, model.d))
    gammas = rng.uniform(g_lo, g_hi, size=(probes, model.ell))
    sigma = 0.0
    lam = 0.0
    for k in range(probes):
        z = Z[rows[k] : rows[k] + 1]
        g = gammas[k : k + 1]
        grad = model.grad_gamma(z, thetas[k], g)[0]
        sigma = max(sigma, float(np.linalg.norm(grad, ord=2)))
        for hess in model.hessian_gamma(z, thetas[k], g)[0]:
            lam = max(lam, eigen_bound_sym(hess))
    return BoundEstimate(sigma, lam)


@dataclass(frozen=True)
class DerivativeCheck:
    """Worst discrepancy between analytic derivatives and finite differences.

    Errors are relative with a unit floor: ``|a - f| / max(1, |a|)``.
    """

    grad_theta_err: float
    grad_gamma_err: float
    hessian_err: float
    points: int
    grad_tol: float = 1e-5
    hess_tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return (
            self.grad_theta_err < self.grad_tol
            and self.grad_gamma_err < self.grad_tol
            and self.hessian_err < self.hess_tol
        )


def _rel_err(analytic: FloatArray, numeric: FloatArray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def derivative_check(
    model: MomentModel,
    Z: FloatArray,
    rng: np.random.Generator,
    points: int = 100,
    theta_range: float = 2.0,
    G_center: FloatArray | None = None,
) -> DerivativeCheck:
    """Compare analytic derivatives with central differences at random points.

    Each point draws a row of ``Z``, ``theta ~ U(-theta_range, theta_range)^d``
    and ``gamma`` as ``G_center[row]`` (zero if omitted) plus standard normal noise.
    """
    from .numerics import fd_gradient, fd_hessian

    Z = np.asarray(Z, dtype=float)
    worst_t = worst_g = worst_h = 0.0
    for _ in range(points):
        row = int(rng.integers(Z.shape[0]))
        z = Z[row : row + 1]
        theta = rng.uniform(-theta_range, theta_range, model.d)
        center = np.zeros(model.ell) if G_center is None else np.asarray(G_center, dtype=float)[row]
        gamma = center + rng.standard_normal(model.ell)
        g = gamma[None, :]

        fd_t = fd_gradient(lambda t: model.moment(z, t, g)[0], theta)
        worst_t = max(worst_t, _rel_err(model.grad_theta(z, theta, g)[0], fd_t))
        if model.ell == 0:
            continue
        fd_g = fd_gradient(lambda gg: model.moment(z, theta, gg[None, :])[0], gamma)
        worst_g = max(worst_g, _rel_err(model.grad_gamma(z, theta, g)[0], fd_g))
        hess = model.hessian_gamma(z, theta, g)[0]
        for i in range(model.d):
            fd_h = fd_hessian(lambda gg, i=i: model.moment(z, theta, gg[None, :])[0, i], gamma)
            worst_h = max(worst_h, _rel_err(hess[i], fd_h))
    return DerivativeCheck(worst_t, worst_g, worst_h, points)

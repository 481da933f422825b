"""Nonparametric first-stage learners and first-stage rate measurement."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Sequence

import numpy as np
from numpy.polynomial import legendre

from .errors import ContractViolation
from .numerics import FloatArray

if TYPE_CHECKING:
    from .moments import MomentModel
    from .montecarlo import DgpSpec

LEARNER_KINDS = ("kernel", "knn", "series", "oracle", "constant")
CLIP_SD_MULTIPLIER = 10.0
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class LearnerSpec:
    """Hyperparameters of a first-stage learner.

    Kernel bandwidth per x-coordinate is ``bandwidth`` when given, otherwise
    ``bandwidth_scale * sd(x_k) * n ** -bandwidth_rate`` with the rate
    defaulting to ``1 / (4 + dim_x)``. ``clip_bound=None`` selects the
    data-driven default bound.
    """

    kind: str
    bandwidth: float | None = None
    bandwidth_scale: float = 1.06
    bandwidth_rate: float | None = None
    k: int = 5
    degree: int = 3
    ridge: float = 0.0
    value: float = 0.0
    clip_bound: float | None = None
    name: str | None = None

    def __post_init__(self):
        errors = self.validation_errors()
        if errors:
            raise ContractViolation("; ".join(errors))

    def validation_errors(self) -> list[str]:
        errors = []
        if self.kind not in LEARNER_KINDS:
            errors.append(f"learner kind must be one of {LEARNER_KINDS}, got {self.kind!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            errors.append("bandwidth must be positive")
        if not self.bandwidth_scale > 0:
            errors.append("bandwidth_scale must be positive")
        if self.bandwidth_rate is not None and self.bandwidth_rate < 0:
            errors.append("bandwidth_rate must be non-negative")
        if self.k < 1:
            errors.append("k must be at least 1")
        if self.degree < 0:
            errors.append("degree must be non-negative")
        if self.ridge < 0:
            errors.append("ridge penalty must be non-negative")
        if self.clip_bound is not None and not self.clip_bound >= 0:
            errors.append("clip_bound must be non-negative")
        return errors

    @property
    def label(self) -> str:
        return self.name or self.kind


@dataclass
class NuisanceFunction:
    """A fitted map from X to R^ell with optional coordinatewise clipping.

    ``provenance`` records the learner, its hyperparameters and a fingerprint
    of the training data. The kernel learner also counts queries that fell
    back to nearest-neighbour prediction because every weight underflowed.
    """

    raw_predict: Callable[[FloatArray], FloatArray]
    ell: int
    clip_bound: float | None = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def predict(self, X: FloatArray) -> FloatArray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if self.ell == 0:
            return np.zeros((X.shape[0], 0))
        out = np.asarray(self.raw_predict(X), dtype=float).reshape(X.shape[0], self.ell)
        if self.clip_bound is not None:
            out = np.clip(out, -self.clip_bound, self.clip_bound)
        return out

    __call__ = predict


def _fingerprint(X: FloatArray, T: FloatArray) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(X, dtype=float).tobytes())
    digest.update(np.ascontiguousarray(T, dtype=float).tobytes())
    return digest.hexdigest()[:16]


def default_clip_bound(T: FloatArray) -> float:
    """Largest ``|mean_j| + 10 sd_j`` over target coordinates."""
    if T.size == 0:
        return 0.0
    return float(np.max(np.abs(T.mean(axis=0)) + CLIP_SD_MULTIPLIER * T.std(axis=0)))


def kernel_bandwidth(spec: LearnerSpec, X: FloatArray) -> FloatArray:
    n, dim = X.shape
    if spec.bandwidth is not None:
        return np.full(dim, spec.bandwidth)
    rate = spec.bandwidth_rate if spec.bandwidth_rate is not None else 1.0 / (4 + dim)
    sd = X.std(axis=0, ddof=1) if n > 1 else np.ones(dim)
    sd = np.where(sd > 0, sd, 1.0)
    return spec.bandwidth_scale * sd * float(n) ** (-rate)


class _KernelRegressor:
    """Nadaraya-Watson regression with a product Gaussian kernel."""

    def __init__(self, X: FloatArray, T: FloatArray, bandwidth: FloatArray, provenance: dict):
        self.Xs = X / bandwidth
        self.T = T
        self.bandwidth = bandwidth
        self.provenance = provenance
        self._memo: tuple[bytes, FloatArray] | None = None

    def __call__(self, Xq: FloatArray) -> FloatArray:
        key = hashlib.blake2b(np.ascontiguousarray(Xq).tobytes(), digest_size=16).digest() + str(Xq.shape).encode()
        if self._memo is not None and self._memo[0] == key:
            return self._memo[1].copy()
        out = self._predict(Xq)
        self._memo = (key, out)
        return out

    def _predict(self, Xq: FloatArray) -> FloatArray:
        Q = Xq / self.bandwidth
        n_train, dim = self.Xs.shape
        chunk = max(1, _CHUNK_ELEMENTS // n_train)
        out = np.empty((Q.shape[0], self.T.shape[1]))
        buf = np.empty((min(chunk, Q.shape[0]), n_train))
        tmp = np.empty_like(buf) if dim > 1 else None
        for start in range(0, Q.shape[0], chunk):
            q = Q[start : start + chunk]
            w = buf[: q.shape[0]]
            np.subtract(q[:, :1], self.Xs[None, :, 0], out=w)
            np.multiply(w, w, out=w)
            for k in range(1, dim):
                t = tmp[: q.shape[0]]
                np.subtract(q[:, k : k + 1], self.Xs[None, :, k], out=t)
                np.multiply(t, t, out=t)
                w += t
            w *= -0.5
            np.exp(w, out=w)
            totals = w.sum(axis=1)
            safe = np.where(totals > 0, totals, 1.0)
            # column by column so a column's value never depends on which other targets share the fit
            block = np.column_stack([(w @ self.T[:, j]) / safe for j in range(self.T.shape[1])])
            dead = np.flatnonzero(totals == 0)
            if dead.size:
                sq = ((q[dead][:, None, :] - self.Xs[None, :, :]) ** 2).sum(axis=2)
                block[dead] = self.T[np.argmin(sq, axis=1)]
                self.provenance["nn_fallback_queries"] = self.provenance.get("nn_fallback_queries", 0) + int(dead.size)
            out[start : start + chunk] = block
        return out


class _KnnRegressor:
    def __init__(self, X: FloatArray, T: FloatArray, k: int):
        self.X = X
        self.T = T
        self.k = k

    def __call__(self, Xq: FloatArray) -> FloatArray:
        n_train = self.X.shape[0]
        chunk = max(1, _CHUNK_ELEMENTS // n_train)
        out = np.empty((Xq.shape[0], self.T.shape[1]))
        for start in range(0, Xq.shape[0], chunk):
            q = Xq[start : start + chunk]
            sq = ((q[:, None, :] - self.X[None, :, :]) ** 2).sum(axis=2)
            # stable sort keeps the lowest training index first among ties
            nearest = np.argsort(sq, axis=1, kind="stable")[:, : self.k]
            out[start : start + chunk] = self.T[nearest].mean(axis=1)
        return out


class _SeriesRegressor:
    """Additive Legendre polynomial regression with a ridge penalty on non-constant terms."""

    def __init__(self, X: FloatArray, T: FloatArray, degree: int, ridge: float):
        self.lo = X.min(axis=0)
        span = X.max(axis=0) - self.lo
        self.span = np.where(span > 0, span, 1.0)
        self.degree = degree
        F = self._features(X)
        n_feat = F.shape[1]
        if ridge > 0 and n_feat > 1:
            penalty = np.sqrt(ridge) * np.eye(n_feat)[1:]
            F = np.vstack([F, penalty])
            T = np.vstack([T, np.zeros((n_feat - 1, T.shape[1]))])
        self.coef, *_ = np.linalg.lstsq(F, T, rcond=None)

    def _features(self, X: FloatArray) -> FloatArray:
        U = 2.0 * (X - self.lo) / self.span - 1.0
        cols = [np.ones((X.shape[0], 1))]
        if self.degree > 0:
            for k in range(X.shape[1]):
                cols.append(legendre.legvander(U[:, k], self.degree)[:, 1:])
        return np.hstack(cols)

    def __call__(self, Xq: FloatArray) -> FloatArray:
        return self._features(Xq) @ self.coef


def fit(
    spec: LearnerSpec,
    X: FloatArray,
    T: FloatArray,
    truth: Callable[[FloatArray], FloatArray] | None = None,
) -> NuisanceFunction:
    """Regress each column of the targets ``T`` on ``X``.

    ``truth`` is required by the ``oracle`` learner, which returns h0 itself.
    """
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if T.ndim == 1:
        T = T[:, None]
    if X.shape[0] == 0:
        raise ContractViolation("auxiliary sample must be non-empty")
    if T.shape[0] != X.shape[0]:
        raise ContractViolation(f"X has {X.shape[0]} rows but targets have {T.shape[0]}")
    ell = T.shape[1]
    provenance: dict[str, Any] = {
        "learner": spec.label,
        "spec": {k: v for k, v in asdict(spec).items() if v is not None},
        "n_train": int(X.shape[0]),
        "fingerprint": _fingerprint(X, T),
    }
    clip = spec.clip_bound if spec.clip_bound is not None else default_clip_bound(T)
    provenance["clip_bound"] = clip

    if ell == 0:
        return NuisanceFunction(lambda Xq: np.zeros((len(Xq), 0)), 0, clip, provenance)

    if spec.kind == "kernel":
        h = kernel_bandwidth(spec, X)
        provenance["bandwidth"] = h.tolist()
        predictor: Callable = _KernelRegressor(X, T, h, provenance)
    elif spec.kind == "knn":
        if spec.k > X.shape[0]:
            raise ContractViolation(f"k = {spec.k} exceeds the {X.shape[0]} training points")
        predictor = _KnnRegressor(X, T, spec.k)
    elif spec.kind == "series":
        predictor = _SeriesRegressor(X, T, spec.degree, spec.ridge)
    elif spec.kind == "oracle":
        if truth is None:
            raise ContractViolation("the oracle learner needs the true nuisance function")
        predictor = truth
    else:
        value = spec.value
        predictor = lambda Xq: np.full((len(Xq), ell), value)  # noqa: E731
    return NuisanceFunction(predictor, ell, clip, provenance)


def fit_shared(
    spec: LearnerSpec,
    X: FloatArray,
    target_blocks: Sequence[FloatArray],
    truths: Sequence[Callable[[FloatArray], FloatArray] | None] | None = None,
) -> list[NuisanceFunction]:
    """Fit one learner to several target blocks on the same covariates.

    Kernel fits share a single weight computation; each block keeps its own
    clip bound and provenance, and predictions match separate :func:`fit`
    calls exactly.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    blocks = [np.asarray(T, dtype=float).reshape(X.shape[0], -1) for T in target_blocks]
    truths = list(truths) if truths is not None else [None] * len(blocks)
    if spec.kind != "kernel" or len(blocks) < 2:
        return [fit(spec, X, T, truth=t) for T, t in zip(blocks, truths)]

    widths = [T.shape[1] for T in blocks]
    merged = fit(spec, X, np.hstack(blocks))
    shared = merged.raw_predict
    out = []
    start = 0
    for T, width in zip(blocks, widths):
        cols = slice(start, start + width)
        start += width
        provenance = {
            **{k: v for k, v in merged.provenance.items() if k != "fingerprint"},
            "fingerprint": _fingerprint(X, T),
        }
        clip = spec.clip_bound if spec.clip_bound is not None else default_clip_bound(T)
        provenance["clip_bound"] = clip
        out.append(NuisanceFunction(lambda Xq, cols=cols: shared(Xq)[:, cols], width, clip, provenance))
    return out


@dataclass(frozen=True)
class MseResult:
    mse: float
    scaled: float


def mse_against_truth(
    h_hat: Callable[[FloatArray], FloatArray],
    h0: Callable[[FloatArray], FloatArray],
    X_eval: FloatArray,
    n: int | None = None,
) -> MseResult:
    """Mean of ``||h_hat(x) - h0(x)||^2`` over ``X_eval`` and its ``sqrt(n)`` scaling."""
    X_eval = np.asarray(X_eval, dtype=float)
    if X_eval.ndim == 1:
        X_eval = X_eval[:, None]
    if X_eval.shape[0] == 0:
        raise ContractViolation("evaluation sample must be non-empty")
    diff = np.asarray(h_hat(X_eval), dtype=float) - np.asarray(h0(X_eval), dtype=float)
    mse = float(np.mean(np.sum(diff.reshape(X_eval.shape[0], -1) ** 2, axis=1)))
    scale = X_eval.shape[0] if n is None else n
    return MseResult(mse, float(np.sqrt(scale) * mse))


@dataclass
class RateCertificate:
    table: list[tuple[int, float, float]]  # (n, mean sqrt(n) * mse, mean mse)
    verdict: str

    @property
    def ok(self) -> bool:
        return self.verdict == "rate-ok"


def rate_verdict(scaled: Sequence[float]) -> str:
    """``rate-ok`` iff the scaled MSE never increases over the top half of the grid."""
    values = list(scaled)
    top = values[len(values) // 2 :] if len(values) > 2 else values
    ok = all(b <= a for a, b in zip(top, top[1:]))
    return "rate-ok" if ok else "rate-fail"


def rate_certificate(
    spec: LearnerSpec,
    dgp: DgpSpec,
    model: MomentModel,
    n_grid: Sequence[int],
    replications: int,
    rng: np.random.Generator,
    eval_size: int = 2000,
) -> RateCertificate:
    """Monte Carlo table of mean ``sqrt(n) * mse`` for the learner fitted at each ``n``."""
    grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ContractViolation("n_grid must be strictly increasing")
    if replications < 10:
        raise ContractViolation("rate_certificate needs at least 10 replications")
    h0 = dgp.h0(model)
    table = []
    for n in grid:
        scaled, raw = [], []
        for _ in range(replications):
            Z = dgp.sample(rng, n)
            h_hat = fit(spec, model.x(Z), model.nuisance_targets(Z), truth=h0)
            X_eval = model.x(dgp.sample(rng, eval_size))
            res = mse_against_truth(h_hat, h0, X_eval, n=n)
            scaled.append(res.scaled)
            raw.append(res.mse)
        table.append((n, float(np.mean(scaled)), float(np.mean(raw))))
    return RateCertificate(table, rate_verdict([row[1] for row in table]))

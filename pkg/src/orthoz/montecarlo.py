"""Data-generating processes with known truth, the replication engine and
aggregation of replication rows into per-cell summaries.

Every random draw is keyed by ``(master seed, replication index, purpose tag)``
so a row depends only on its cell and index, never on scheduling.
"""

from __future__ import annotations

import csv
import math
from abc import ABC, abstractmethod
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .diagnostics import MIN_NORMALITY_SAMPLE, check_E_bound, decompose, normality_check
from .errors import ContractViolation, EvaluationError, SingularMatrix
from .firststage import LearnerSpec, NuisanceFunction, fit_shared
from .moments import MomentModel, estimate_bounds, get_model
from .numerics import FloatArray, inverse, rng_stream
from .secondstage import SplitPlan, infer, solve_z, split

ORACLE_DRAWS = 1_000_000
BOUND_PROBES = 8


def truncated_normal(rng: np.random.Generator, sd: float, bound: float, size: int) -> FloatArray:
    """N(0, sd^2) restricted to [-bound, bound] by resampling rejected draws."""
    out = rng.normal(0.0, sd, size)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, sd, int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def default_g0(x):
    return np.sin(np.pi * x) * x**2


def default_m0(x):
    return x + 0.5 * np.cos(np.pi * x)


class DgpSpec(ABC):
    """A simulation design with known ``theta0`` and nuisance truth."""

    name: str
    theta0: FloatArray
    x_dim: int

    @abstractmethod
    def sample(self, rng: np.random.Generator, n: int) -> FloatArray: ...

    @abstractmethod
    def sample_conditional(self, rng: np.random.Generator, x: FloatArray, count: int) -> FloatArray: ...

    @abstractmethod
    def truth(self, label: str, X: FloatArray) -> FloatArray:
        """Closed-form conditional function ``label`` (e.g. ``"E[W|X]"``) at the rows of X."""

    @abstractmethod
    def key(self) -> tuple: ...

    def model(self, name: str) -> MomentModel:
        """Instantiate a moment model compatible with this design."""
        if name == "plr-naive":
            return get_model(name, x_dim=self.x_dim, theta_ref=float(self.theta0[0]))
        return get_model(name, x_dim=self.x_dim)

    def h0(self, model: MomentModel) -> Callable[[FloatArray], FloatArray]:
        labels = model.nuisance_names

        def h0(X: FloatArray) -> FloatArray:
            X = np.asarray(X, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if not labels:
                return np.zeros((X.shape[0], 0))
            return np.column_stack([self.truth(label, X) for label in labels])

        return h0


class PlrDgp(DgpSpec):
    """Partially linear design with compact support.

    X ~ U(-1, 1); W = m0(X) + nu, nu ~ N(0, 0.5^2) cut at +-3;
    Y = theta0 W + g0(X) + eps, eps ~ N(0, 1) cut at +-4. Rows are ``(y, w, x)``.
    """

    name = "plr"
    x_dim = 1

    def __init__(
        self,
        theta0: float = 1.0,
        g0: Callable = default_g0,
        m0: Callable = default_m0,
        nu_sd: float = 0.5,
        nu_bound: float = 3.0,
        eps_sd: float = 1.0,
        eps_bound: float = 4.0,
    ):
        self.theta0 = np.array([float(theta0)])
        self.g0 = g0
        self.m0 = m0
        self.nu_sd = nu_sd
        self.nu_bound = nu_bound
        self.eps_sd = eps_sd
        self.eps_bound = eps_bound

    def _draw(self, rng, x: FloatArray) -> FloatArray:
        n = x.shape[0]
        w = self.m0(x) + truncated_normal(rng, self.nu_sd, self.nu_bound, n)
        y = self.theta0[0] * w + self.g0(x) + truncated_normal(rng, self.eps_sd, self.eps_bound, n)
        return np.column_stack([y, w, x])

    def sample(self, rng, n):
        return self._draw(rng, rng.uniform(-1.0, 1.0, n))

    def sample_conditional(self, rng, x, count):
        return self._draw(rng, np.full(count, float(np.ravel(x)[0])))

    def truth(self, label, X):
        x = np.asarray(X, dtype=float)[:, 0]
        if label == "E[W|X]":
            return self.m0(x)
        if label == "E[Y|X]":
            return self.theta0[0] * self.m0(x) + self.g0(x)
        if label == "g0":
            return self.g0(x)
        raise ContractViolation(f"PLR design has no nuisance {label!r}")

    def key(self):
        return (
            self.name,
            float(self.theta0[0]),
            self.g0,
            self.m0,
            self.nu_sd,
            self.nu_bound,
            self.eps_sd,
            self.eps_bound,
        )


class MeanDgp(DgpSpec):
    """Y ~ N(mu, sd^2) with no covariates; rows are ``(y,)``."""

    name = "mean"
    x_dim = 0

    def __init__(self, theta0: float = 0.0, sd: float = 1.0):
        self.theta0 = np.array([float(theta0)])
        self.sd = sd

    def sample(self, rng, n):
        return (self.theta0[0] + self.sd * rng.standard_normal(n))[:, None]

    def sample_conditional(self, rng, x, count):
        return self.sample(rng, count)

    def truth(self, label, X):
        raise ContractViolation(f"mean design has no nuisance {label!r}")

    def key(self):
        return (self.name, float(self.theta0[0]), self.sd)


DGPS: dict[str, type[DgpSpec]] = {"plr": PlrDgp, "mean": MeanDgp}


def get_dgp(name: str, **params) -> DgpSpec:
    try:
        return DGPS[name](**params)
    except KeyError:
        raise ContractViolation(f"unknown DGP {name!r}; known: {sorted(DGPS)}") from None


_POPULATION_CACHE: dict[tuple, tuple[FloatArray, FloatArray]] = {}


def population_moments(dgp: DgpSpec, model: MomentModel, draws: int = ORACLE_DRAWS, seed: int = 0) -> tuple[FloatArray, FloatArray]:
    """Oracle Monte Carlo ``J = E[grad_theta m]`` and ``V = E[m m^T]`` at ``(theta0, h0)``; cached."""
    key = (dgp.key(), repr(model), draws, seed)
    if key not in _POPULATION_CACHE:
        Z = dgp.sample(rng_stream(seed, 0, f"oracle/{dgp.name}"), draws)
        G = dgp.h0(model)(model.x(Z))
        J = model.grad_theta(Z, dgp.theta0, G).mean(axis=0)
        m = model.moment(Z, dgp.theta0, G)
        _POPULATION_CACHE[key] = (J, (m.T @ m) / draws)
    return _POPULATION_CACHE[key]


@dataclass
class Cell:
    dgp: DgpSpec
    model: MomentModel
    learner: LearnerSpec
    n: int
    aux_fraction: float = 0.5
    alpha: float = 0.05
    tol: float = 1e-10
    max_iter: int = 100


RESULT_COLUMNS = (
    "dgp", "moment", "learner", "n", "rep", "theta_hat", "se", "ci_lo", "ci_hi", "covered",
    "D_abs", "E_abs", "E_bound", "E_bound_pass", "converged",
    "theta0", "A_dev", "C", "identity_err",
)  # fmt: skip


@dataclass
class ReplicationRow:
    dgp: str
    moment: str
    learner: str
    n: int
    rep: int
    theta_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    covered: bool
    D_abs: float
    E_abs: float
    E_bound: float
    E_bound_pass: bool
    converged: bool
    theta0: float
    A_dev: float
    C: float
    identity_err: float

    @property
    def cell_key(self) -> tuple:
        return (self.dgp, self.moment, self.learner, self.n)


def _failed_row(cell: Cell, rep: int, theta_hat: float = float("nan")) -> ReplicationRow:
    nan = float("nan")
    return ReplicationRow(
        cell.dgp.name, cell.model.name, cell.learner.label, cell.n, rep, theta_hat, nan, nan, nan, False,
        nan, nan, nan, False, False, float(cell.dgp.theta0[0]), nan, nan, nan,
    )  # fmt: skip


def _data_tag(dgp: DgpSpec, n: int) -> str:
    return f"data/{dgp.name}/{n}"


def run_group(cells: Sequence[Cell], rep: int, master_seed: int) -> list[ReplicationRow]:
    """Run one replication of several cells sharing the design, ``n`` and split.

    The data, split and each learner's fit are computed once and shared; every
    row is bitwise identical to running its cell alone.
    """
    if not cells:
        return []
    first = cells[0]
    for c in cells:
        if c.dgp.key() != first.dgp.key() or c.n != first.n or c.aux_fraction != first.aux_fraction:
            raise ContractViolation("cells in a group must share the design, n and aux_fraction")
    dgp, n = first.dgp, first.n
    if dgp.theta0.size != 1:
        raise ContractViolation("replication rows support scalar parameters only")

    Z = dgp.sample(rng_stream(master_seed, rep, _data_tag(dgp, n)), n)
    split_seed = int(rng_stream(master_seed, rep, f"split/{n}").integers(2**63 - 1))
    aux_idx, main_idx = split(n, SplitPlan(first.aux_fraction, split_seed))
    Z_aux, Z_main = Z[aux_idx], Z[main_idx]

    # one shared fit per learner across all moment models using it
    nuisances: dict[int, NuisanceFunction] = {}
    by_learner: dict[LearnerSpec, list[int]] = {}
    for i, c in enumerate(cells):
        by_learner.setdefault(c.learner, []).append(i)
    for spec, members in by_learner.items():
        models = [cells[i].model for i in members]
        X_aux = models[0].x(Z_aux)
        if any(m.x_index != models[0].x_index for m in models):
            raise ContractViolation("models sharing a learner must use the same covariates")
        fitted = fit_shared(
            spec,
            X_aux,
            [m.nuisance_targets(Z_aux) for m in models],
            truths=[dgp.h0(m) for m in models],
        )
        nuisances.update(zip(members, fitted))

    return [_finish(c, rep, master_seed, Z_main, nuisances[i]) for i, c in enumerate(cells)]


def _finish(cell: Cell, rep: int, master_seed: int, Z_main: FloatArray, nuisance: NuisanceFunction) -> ReplicationRow:
    model, dgp = cell.model, cell.dgp
    theta0 = dgp.theta0
    X_main = model.x(Z_main)
    G_hat = nuisance(X_main)
    G0 = dgp.h0(model)(X_main)
    try:
        result = solve_z(model, Z_main, G_hat, None, cell.tol, cell.max_iter)
        if not result.converged:
            return _failed_row(cell, rep, float(result.theta_hat[0]))
        result = infer(model, Z_main, result, G_hat, cell.alpha)
    except (SingularMatrix, EvaluationError):
        return _failed_row(cell, rep)

    if model.ell:
        both = np.vstack([G_hat, G0])
        gamma_box = (both.min(axis=0), both.max(axis=0))
    else:
        gamma_box = (np.zeros(0), np.zeros(0))
    bounds = estimate_bounds(
        model,
        Z_main,
        (theta0, theta0),
        gamma_box,
        BOUND_PROBES,
        rng_stream(master_seed, rep, f"bounds/{cell.n}/{model.name}/{cell.learner.label}"),
    )
    J, _ = population_moments(dgp, model)
    dec = decompose(model, Z_main, theta0, result.theta_hat, G_hat, G0, bounds.lambda_hat, inverse(J))
    bound = check_E_bound(dec)
    theta_hat = float(result.theta_hat[0])
    lo, hi = float(result.ci_lower[0]), float(result.ci_upper[0])
    return ReplicationRow(
        dgp=dgp.name,
        moment=model.name,
        learner=cell.learner.label,
        n=cell.n,
        rep=rep,
        theta_hat=theta_hat,
        se=float(result.std_errors[0]),
        ci_lo=lo,
        ci_hi=hi,
        covered=bool(lo <= theta0[0] <= hi),
        D_abs=float(np.linalg.norm(dec.D)),
        E_abs=float(np.linalg.norm(dec.E)),
        E_bound=dec.E_bound,
        E_bound_pass=bound.passed,
        converged=True,
        theta0=float(theta0[0]),
        A_dev=dec.A_deviation,
        C=float(dec.C[0]),
        identity_err=dec.identity_error,
    )


def run_replication(cell: Cell, rep: int, master_seed: int) -> ReplicationRow:
    """Draw data for ``(master_seed, rep)``, run the two-stage estimator and the proof decomposition."""
    return run_group([cell], rep, master_seed)[0]


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentConfig:
    dgp: str = "plr"
    dgp_params: dict = field(default_factory=dict)
    moments: list[str] = field(default_factory=lambda: ["plr", "plr-naive"])
    learners: dict[str, LearnerSpec] = field(default_factory=dict)
    n_grid: list[int] = field(default_factory=lambda: [500, 1000, 2000, 4000, 8000])
    aux_fraction: float = 0.5
    replications: int = 1000
    seed: int = 0
    alpha: float = 0.05
    tol: float = 1e-10
    max_iter: int = 100
    output_dir: str = "results"

    def validate(self) -> list[str]:
        errors = []
        if self.replications < 1:
            errors.append("experiment.replications must be at least 1")
        if not self.n_grid:
            errors.append("experiment.n_grid must be non-empty")
        elif any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            errors.append("experiment.n_grid must be strictly increasing")
        elif self.n_grid[0] < 4:
            errors.append("experiment.n_grid entries must be at least 4")
        if not 0.0 < self.aux_fraction < 1.0:
            errors.append("experiment.aux_fraction must lie in (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            errors.append("experiment.alpha must lie in (0, 1)")
        if self.seed < 0:
            errors.append("experiment.seed must be non-negative")
        if not self.learners:
            errors.append("at least one learner must be configured")
        if not self.moments:
            errors.append("at least one moment model must be configured")
        return errors

    def build_dgp(self) -> DgpSpec:
        return get_dgp(self.dgp, **self.dgp_params)

    def cells_for(self, n: int, dgp: DgpSpec | None = None) -> list[Cell]:
        dgp = dgp or self.build_dgp()
        return [
            Cell(dgp, dgp.model(m), spec, n, self.aux_fraction, self.alpha, self.tol, self.max_iter)
            for m in self.moments
            for spec in self.learners.values()
        ]


def _group_task(args: tuple[ExperimentConfig, int, int]) -> list[ReplicationRow]:
    config, n, rep = args
    return run_group(config.cells_for(n), rep, config.seed)


def run_experiment(config: ExperimentConfig, workers: int = 1, progress: Callable[[int, int], None] | None = None) -> list[ReplicationRow]:
    """All (cell, replication) rows, ordered by moment, learner, n and replication."""
    errors = config.validate()
    if errors:
        raise ContractViolation("; ".join(errors))
    tasks = [(config, n, rep) for n in config.n_grid for rep in range(config.replications)]
    rows: list[ReplicationRow] = []
    if workers <= 1:
        for i, task in enumerate(tasks):
            rows.extend(_group_task(task))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, group in enumerate(pool.map(_group_task, tasks, chunksize=8)):
                rows.extend(group)
                if progress:
                    progress(i + 1, len(tasks))
    moment_order = {m: i for i, m in enumerate(config.moments)}
    learner_order = {spec.label: i for i, spec in enumerate(config.learners.values())}
    rows.sort(key=lambda r: (moment_order[r.moment], learner_order[r.learner], r.n, r.rep))
    return rows


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class AggregateRow:
    dgp: str
    moment: str
    learner: str
    n: int
    theta0: float
    replications: int
    excluded: int
    bias: float
    sd: float
    rmse: float
    sqrt_n_rmse: float
    coverage: float
    coverage_se: float
    mean_D: float
    mean_E: float
    mean_A_dev: float
    sd_C: float
    E_bound_pass_rate: float
    ks_stat: float
    ks_pass: str  # "pass", "fail" or "not-computed"


AGGREGATE_COLUMNS = tuple(f.name for f in fields(AggregateRow))


def aggregate(rows: Iterable[ReplicationRow]) -> list[AggregateRow]:
    """Per-cell summaries over converged rows; cells appear in first-seen order.

    ``sd`` uses divisor R - 1 and ``rmse`` is defined as ``sqrt(bias^2 + sd^2)``.
    KS is computed only for cells with at least 200 converged rows.
    """
    groups: dict[tuple, list[ReplicationRow]] = {}
    for r in rows:
        groups.setdefault(r.cell_key, []).append(r)
    out = []
    for (dgp, moment, learner, n), members in groups.items():
        good = sorted((r for r in members if r.converged), key=lambda r: r.rep)
        excluded = len(members) - len(good)
        theta0 = members[0].theta0
        if not good:
            nan = float("nan")
            out.append(AggregateRow(dgp, moment, learner, n, theta0, 0, excluded, *([nan] * 10), nan, "not-computed"))
            continue
        est = np.array([r.theta_hat for r in good])
        bias = float(est.mean() - theta0)
        sd = float(est.std(ddof=1)) if est.size > 1 else 0.0
        rmse = math.sqrt(bias * bias + sd * sd)
        covered = np.array([r.covered for r in good], dtype=float)
        coverage = float(covered.mean())
        ks_stat, ks_pass = float("nan"), "not-computed"
        if len(good) >= MIN_NORMALITY_SAMPLE:
            standardized = np.array([(r.theta_hat - theta0) / r.se for r in good if r.se > 0])
            if standardized.size >= MIN_NORMALITY_SAMPLE:
                norm = normality_check(standardized)
                ks_stat, ks_pass = norm.ks_stat, "pass" if norm.passed else "fail"
        a_dev = np.array([r.A_dev for r in good])
        out.append(
            AggregateRow(
                dgp=dgp,
                moment=moment,
                learner=learner,
                n=n,
                theta0=theta0,
                replications=len(good),
                excluded=excluded,
                bias=bias,
                sd=sd,
                rmse=rmse,
                sqrt_n_rmse=math.sqrt(n) * rmse,
                coverage=coverage,
                coverage_se=math.sqrt(coverage * (1.0 - coverage) / len(good)),
                mean_D=float(np.mean([r.D_abs for r in good])),
                mean_E=float(np.mean([r.E_abs for r in good])),
                mean_A_dev=float(np.nanmean(a_dev)) if np.any(np.isfinite(a_dev)) else float("nan"),
                sd_C=float(np.std([r.C for r in good], ddof=1)) if len(good) > 1 else 0.0,
                E_bound_pass_rate=float(np.mean([r.E_bound_pass for r in good])),
                ks_stat=ks_stat,
                ks_pass=ks_pass,
            )
        )
    return out


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float


def rate_slope(aggs: Sequence[AggregateRow]) -> SlopeFit:
    """Least-squares slope of log(rmse) on log(n) for one (moment, learner) across the grid."""
    if len(aggs) < 3:
        raise ContractViolation("rate_slope needs at least three grid points")
    n = np.array([a.n for a in aggs], dtype=float)
    rmse = np.array([a.rmse for a in aggs], dtype=float)
    if np.any(rmse <= 0) or not np.all(np.isfinite(rmse)):
        raise ContractViolation("rmse must be positive and finite for a log-log fit")
    fit_ = stats.linregress(np.log(n), np.log(rmse))
    return SlopeFit(float(fit_.slope), float(fit_.stderr))


# ---------------------------------------------------------------------------
# CSV I/O


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows(path: str | Path, columns: Sequence[str], records: Iterable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            data = asdict(rec)
            writer.writerow([_fmt(data[c]) for c in columns])


def write_results(path: str | Path, rows: Iterable[ReplicationRow]) -> None:
    write_rows(path, RESULT_COLUMNS, rows)


def write_aggregates(path: str | Path, aggs: Iterable[AggregateRow]) -> None:
    write_rows(path, AGGREGATE_COLUMNS, aggs)


class ResultsSchemaError(ContractViolation):
    pass


_BOOL_FIELDS = {"covered", "E_bound_pass", "converged"}
_INT_FIELDS = {"n", "rep"}
_STR_FIELDS = {"dgp", "moment", "learner"}


def read_results(path: str | Path) -> list[ReplicationRow]:
    """Parse a results CSV; raises :class:`ResultsSchemaError` on missing columns or no rows."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in RESULT_COLUMNS if c not in header]
        if not header:
            raise ResultsSchemaError(f"{path}: no rows")
        if missing:
            raise ResultsSchemaError(f"{path}: missing columns {', '.join(missing)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                values = {}
                for c in RESULT_COLUMNS:
                    raw = rec[c]
                    if c in _STR_FIELDS:
                        values[c] = raw
                    elif c in _INT_FIELDS:
                        values[c] = int(raw)
                    elif c in _BOOL_FIELDS:
                        if raw not in ("0", "1"):
                            raise ValueError(f"expected 0/1, got {raw!r}")
                        values[c] = raw == "1"
                    else:
                        values[c] = float(raw)
            except (TypeError, ValueError) as exc:
                raise ResultsSchemaError(f"{path}: line {lineno}: {exc}") from None
            rows.append(ReplicationRow(**values))
    if not rows:
        raise ResultsSchemaError(f"{path}: no rows")
    return rows

"""Parse and validate TOML experiment configs.

Validation is total: every problem in the document is collected and reported
together instead of stopping at the first.
"""

from __future__ import annotations

import inspect
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ContractViolation
from .firststage import LearnerSpec
from .moments import MODELS
from .montecarlo import DGPS, ExperimentConfig

SECTIONS = {"dgp", "moments", "learners", "experiment", "output", "data", "check"}
MOMENT_KEYS = {"models", "naive_theta_ref"}
LEARNER_KEYS = {"kind", "bandwidth", "bandwidth_scale", "bandwidth_rate", "k", "degree", "ridge", "value", "clip_bound", "expect_rate"}
EXPERIMENT_KEYS = {"n_grid", "replications", "aux_fraction", "seed", "alpha", "tol", "max_iter"}
OUTPUT_KEYS = {"dir"}
DATA_KEYS = {"moment", "learner", "y", "w", "x"}
CHECK_KEYS = {"grid", "draws_per_point", "score_sample", "score_offset", "rate_grid", "rate_replications", "fd_points", "bound_probes"}


class ConfigError(ContractViolation):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class DataMapping:
    moment: str
    learner: str
    y: str
    w: str | None
    x: list[str]


@dataclass
class CheckSettings:
    grid: list[float] = field(default_factory=lambda: [-0.75, -0.25, 0.25, 0.75])
    draws_per_point: int = 1_000_000
    score_sample: int = 100_000
    score_offset: float = 0.1
    rate_grid: list[int] = field(default_factory=lambda: [250, 500, 1000, 2000])
    rate_replications: int = 10
    fd_points: int = 100
    bound_probes: int = 256


@dataclass
class Config:
    experiment: ExperimentConfig
    expect_rate: dict[str, str]
    naive_theta_ref: float | None = None
    data: DataMapping | None = None
    check: CheckSettings = field(default_factory=CheckSettings)
    source: str = ""


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


class _Collector:
    def __init__(self):
        self.errors: list[str] = []

    def unknown(self, section: str, table: dict, allowed: set[str]) -> None:
        for key in table:
            if key not in allowed:
                self.errors.append(f"unknown key '{key}' in [{section}]")

    def number(self, section: str, table: dict, key: str, default=None):
        if key not in table:
            return default
        v = table[key]
        if not _is_number(v):
            self.errors.append(f"[{section}] {key} must be a number, got {v!r}")
            return default
        return float(v)

    def integer(self, section: str, table: dict, key: str, default=None):
        if key not in table:
            return default
        v = table[key]
        if not _is_int(v):
            self.errors.append(f"[{section}] {key} must be an integer, got {v!r}")
            return default
        return v

    def string(self, section: str, table: dict, key: str, default=None):
        if key not in table:
            return default
        v = table[key]
        if not isinstance(v, str):
            self.errors.append(f"[{section}] {key} must be a string, got {v!r}")
            return default
        return v

    def table(self, doc: dict, key: str) -> dict:
        v = doc.get(key, {})
        if not isinstance(v, dict):
            self.errors.append(f"[{key}] must be a table")
            return {}
        return v


def _dgp_params(name: str) -> set[str]:
    sig = inspect.signature(DGPS[name].__init__)
    # callables (g0, m0) are code-level customisation, not config
    return {p for p in sig.parameters if p not in ("self", "g0", "m0")}


def parse_config(doc: dict, source: str = "") -> Config:
    """Validate a parsed TOML document into a :class:`Config` or raise :class:`ConfigError`."""
    c = _Collector()
    for key in doc:
        if key not in SECTIONS:
            c.errors.append(f"unknown section [{key}]")

    # [dgp]
    dgp_t = c.table(doc, "dgp")
    dgp_name = c.string("dgp", dgp_t, "name", "plr")
    dgp_params: dict[str, float] = {}
    if dgp_name not in DGPS:
        c.errors.append(f"[dgp] name must be one of {sorted(DGPS)}, got {dgp_name!r}")
    else:
        allowed = _dgp_params(dgp_name)
        c.unknown("dgp", dgp_t, allowed | {"name"})
        for key in allowed & set(dgp_t):
            val = c.number("dgp", dgp_t, key)
            if val is not None:
                dgp_params[key] = val

    # [moments]
    mom_t = c.table(doc, "moments")
    c.unknown("moments", mom_t, MOMENT_KEYS)
    models = mom_t.get("models", ["plr", "plr-naive"])
    if not isinstance(models, list) or not all(isinstance(m, str) for m in models):
        c.errors.append("[moments] models must be a list of names")
        models = []
    for m in models:
        if m not in MODELS:
            c.errors.append(f"[moments] unknown moment model {m!r}; known: {sorted(MODELS)}")
    naive_ref = c.number("moments", mom_t, "naive_theta_ref")

    # [learners.*]
    learners_t = c.table(doc, "learners")
    learners: dict[str, LearnerSpec] = {}
    expect_rate: dict[str, str] = {}
    for lname, lt in learners_t.items():
        section = f"learners.{lname}"
        if not isinstance(lt, dict):
            c.errors.append(f"[{section}] must be a table")
            continue
        c.unknown(section, lt, LEARNER_KEYS)
        kwargs: dict[str, Any] = {"name": lname}
        kind = c.string(section, lt, "kind")
        if kind is None:
            c.errors.append(f"[{section}] kind is required")
            continue
        kwargs["kind"] = kind
        for key in ("bandwidth", "bandwidth_scale", "bandwidth_rate", "ridge", "value", "clip_bound"):
            val = c.number(section, lt, key)
            if val is not None:
                kwargs[key] = val
        for key in ("k", "degree"):
            val = c.integer(section, lt, key)
            if val is not None:
                kwargs[key] = val
        expect = c.string(section, lt, "expect_rate", "ok")
        if expect not in ("ok", "fail"):
            c.errors.append(f"[{section}] expect_rate must be 'ok' or 'fail'")
        expect_rate[lname] = expect
        try:
            learners[lname] = LearnerSpec(**kwargs)
        except ContractViolation as exc:
            c.errors.append(f"[{section}] {exc}")

    # [experiment]
    exp_t = c.table(doc, "experiment")
    c.unknown("experiment", exp_t, EXPERIMENT_KEYS)
    n_grid = exp_t.get("n_grid", [500, 1000, 2000, 4000, 8000])
    if not isinstance(n_grid, list) or not all(_is_int(n) for n in n_grid):
        c.errors.append("[experiment] n_grid must be a list of integers")
        n_grid = [500]
    exp = ExperimentConfig(
        dgp=dgp_name if dgp_name in DGPS else "plr",
        dgp_params=dgp_params,
        moments=list(models),
        learners=learners,
        n_grid=list(n_grid),
        aux_fraction=c.number("experiment", exp_t, "aux_fraction", 0.5),
        replications=c.integer("experiment", exp_t, "replications", 1000),
        seed=c.integer("experiment", exp_t, "seed", 0),
        alpha=c.number("experiment", exp_t, "alpha", 0.05),
        tol=c.number("experiment", exp_t, "tol", 1e-10),
        max_iter=c.integer("experiment", exp_t, "max_iter", 100),
    )
    if not exp.tol > 0:
        c.errors.append("[experiment] tol must be positive")
    if exp.max_iter < 1:
        c.errors.append("[experiment] max_iter must be at least 1")
    exp_errors = exp.validate()
    if "data" in doc:
        # estimation on data needs a learner only when the moment has a nuisance; [data] checks that
        exp_errors = [e for e in exp_errors if "learner" not in e]
    c.errors.extend(exp_errors)

    # [output]
    out_t = c.table(doc, "output")
    c.unknown("output", out_t, OUTPUT_KEYS)
    exp.output_dir = c.string("output", out_t, "dir", "results")

    # [data]
    data = None
    if "data" in doc:
        data_t = c.table(doc, "data")
        c.unknown("data", data_t, DATA_KEYS)
        moment = c.string("data", data_t, "moment")
        learner = c.string("data", data_t, "learner")
        y = c.string("data", data_t, "y")
        w = c.string("data", data_t, "w")
        x = data_t.get("x", [])
        if not isinstance(x, list) or not all(isinstance(v, str) for v in x):
            c.errors.append("[data] x must be a list of column names")
            x = []
        if moment is None:
            c.errors.append("[data] moment is required")
        elif moment not in MODELS:
            c.errors.append(f"[data] unknown moment model {moment!r}")
        if y is None:
            c.errors.append("[data] y column mapping is required")
        if moment in ("plr", "plr-naive"):
            if w is None:
                c.errors.append(f"[data] w column mapping is required for {moment}")
            if not x:
                c.errors.append(f"[data] x column mapping is required for {moment}")
            if learner is None:
                c.errors.append("[data] learner is required")
        if learner is not None and learner not in learners_t:
            c.errors.append(f"[data] learner {learner!r} is not defined under [learners]")
        if moment and y:
            data = DataMapping(moment, learner or "", y, w, list(x))

    # [check]
    chk_t = c.table(doc, "check")
    c.unknown("check", chk_t, CHECK_KEYS)
    check = CheckSettings()
    if "grid" in chk_t:
        g = chk_t["grid"]
        if not isinstance(g, list) or not g or not all(_is_number(v) for v in g):
            c.errors.append("[check] grid must be a non-empty list of numbers")
        else:
            check.grid = [float(v) for v in g]
    if "rate_grid" in chk_t:
        g = chk_t["rate_grid"]
        if not isinstance(g, list) or len(g) < 2 or not all(_is_int(v) for v in g):
            c.errors.append("[check] rate_grid must be a list of at least two integers")
        else:
            check.rate_grid = list(g)
    for key in ("draws_per_point", "score_sample", "rate_replications", "fd_points", "bound_probes"):
        val = c.integer("check", chk_t, key)
        if val is not None:
            setattr(check, key, val)
    check.score_offset = c.number("check", chk_t, "score_offset", check.score_offset)
    if check.draws_per_point < 1000:
        c.errors.append("[check] draws_per_point must be at least 1000")
    if check.rate_replications < 10:
        c.errors.append("[check] rate_replications must be at least 10")
    if check.score_sample < 2 or check.fd_points < 1 or check.bound_probes < 1:
        c.errors.append("[check] score_sample, fd_points and bound_probes must be positive")

    if c.errors:
        raise ConfigError(c.errors)
    return Config(exp, expect_rate, naive_ref, data, check, source)


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: TOML syntax error: {exc}"]) from None
    return parse_config(doc, str(path))

"""Command-line interface: ``orthoz {estimate,simulate,check,report}``.

Exit codes: 0 success, 1 input/config/I-O error, 2 estimation failure,
3 a ``check`` outcome that differs from its expectation.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config, ConfigError, load_config
from .errors import ContractViolation, EvaluationError, OrthozError, SingularMatrix
from .firststage import LearnerSpec, rate_certificate
from .moments import (
    ORTHOGONALITY_THRESHOLD,
    check_conditional_orthogonality,
    derivative_check,
    estimate_bounds,
    get_model,
    orthogonality_score,
)
from .montecarlo import aggregate, read_results, run_experiment, write_aggregates, write_results
from .numerics import rng_stream
from .report import format_report
from .secondstage import SolverSettings, SplitPlan, two_stage

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_ESTIMATION = 2
EXIT_CHECK_FAILED = 3


class InputError(OrthozError):
    pass


def _err(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def read_data_csv(path: str | Path, columns: Sequence[str]) -> np.ndarray:
    """Read the named columns of a CSV file as a finite float matrix.

    Data rows are numbered from 1 (the header is not counted).
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise InputError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise InputError(f"{path}: config maps missing column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in columns]
        rows = []
        for rownum, rec in enumerate(reader, start=1):
            if not rec or all(not cell.strip() for cell in rec):
                continue
            if len(rec) != len(header):
                raise InputError(f"{path}: row {rownum} has {len(rec)} fields, header has {len(header)}")
            values = []
            for i, name in zip(idx, columns):
                cell = rec[i].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise InputError(f"{path}: row {rownum}, column '{name}': non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise InputError(f"{path}: row {rownum}, column '{name}': non-finite value {cell!r}")
                values.append(v)
            rows.append(values)
    if len(rows) < 2:
        raise InputError(f"{path}: need at least 2 data rows, found {len(rows)}")
    return np.array(rows, dtype=float)


def _format_estimate(summary: dict) -> str:
    res = summary["result"]
    alpha = res["alpha"]
    lines = [
        f"moment: {summary['moment']}   learner: {summary['learner']}",
        f"observations: {summary['n_total']} (auxiliary {summary['n_aux']}, main {summary['n_main']})",
    ]
    newton = res["newton"]
    if res["std_errors"] is not None:
        level = 100 * (1 - alpha)
        for i, th in enumerate(res["theta_hat"]):
            lines.append(
                f"theta[{i}] = {th:.6g}   se = {res['std_errors'][i]:.6g}   "
                f"{level:g}% CI [{res['ci_lower'][i]:.6g}, {res['ci_upper'][i]:.6g}]"
            )
    lines.append(
        f"newton: {'converged' if newton['converged'] else 'FAILED'} after {newton['iterations']} iteration(s), "
        f"residual norm {newton['residual_norm']:.3g}"
    )
    prov = summary["provenance"]
    lines.append(f"first stage: {prov.get('learner')} on {prov.get('n_train')} points, fingerprint {prov.get('fingerprint')}")
    return "\n".join(lines)


def cmd_estimate(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
        if cfg.data is None:
            raise ConfigError(["[data] section with column mappings is required for estimate"])
        mapping = cfg.data
        kwargs: dict = {"x_dim": len(mapping.x)}
        if mapping.moment == "plr-naive":
            kwargs["theta_ref"] = cfg.naive_theta_ref if cfg.naive_theta_ref is not None else 0.0
        model = get_model(mapping.moment, **kwargs)
        columns = [mapping.y] + ([mapping.w] if model.n_leading == 2 else []) + list(mapping.x)
        Z = read_data_csv(args.data, columns)
        if model.ell:
            learner = cfg.experiment.learners[mapping.learner]
            if learner.kind == "oracle":
                raise ConfigError(["[data] the oracle learner needs a known truth and cannot be used on data"])
        else:
            learner = LearnerSpec("constant", name="none")
    except (ConfigError, InputError, ContractViolation) as exc:
        _err(str(exc))
        return EXIT_INPUT

    exp = cfg.experiment
    settings = SolverSettings(tol=exp.tol, max_iter=exp.max_iter, alpha=exp.alpha)
    try:
        outcome = two_stage(model, Z, learner, SplitPlan(exp.aux_fraction, exp.seed), settings)
    except SingularMatrix as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_ESTIMATION
    except EvaluationError as exc:
        _err(f"evaluation failed: {exc}")
        return EXIT_ESTIMATION
    except ContractViolation as exc:
        _err(str(exc))
        return EXIT_INPUT

    summary = {
        "moment": model.name,
        "learner": learner.label,
        "n_total": int(Z.shape[0]),
        "n_aux": int(outcome.aux_index.size),
        "n_main": int(outcome.main_index.size),
        "result": outcome.result.to_dict(),
        "provenance": outcome.nuisance.provenance,
    }
    print(_format_estimate(summary))
    payload = json.dumps(summary, indent=2, default=float)
    if args.out:
        try:
            Path(args.out).write_text(payload + "\n")
        except OSError as exc:
            _err(f"cannot write {args.out}: {exc.strerror}")
            return EXIT_INPUT
    else:
        print(payload)
    if not outcome.result.converged:
        _err(f"solver did not converge: {outcome.result.message}")
        return EXIT_ESTIMATION
    return EXIT_OK


def write_outputs(out_dir: Path, rows=None, aggs=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if rows is not None:
        write_results(out_dir / "results.csv", rows)
    write_aggregates(out_dir / "aggregate.csv", aggs)
    (out_dir / "report.md").write_text(format_report(aggs))


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_INPUT
    out_dir = Path(args.output_dir or cfg.experiment.output_dir)
    step = max(1, cfg.experiment.replications * len(cfg.experiment.n_grid) // 10)

    def progress(done: int, total: int) -> None:
        if args.verbose and (done % step == 0 or done == total):
            print(f"  {done}/{total} replication groups", file=sys.stderr)

    try:
        rows = run_experiment(cfg.experiment, workers=args.workers, progress=progress)
    except ContractViolation as exc:
        _err(str(exc))
        return EXIT_INPUT
    aggs = aggregate(rows)
    try:
        write_outputs(out_dir, rows, aggs)
    except OSError as exc:
        _err(f"cannot write outputs to {out_dir}: {exc.strerror}")
        return EXIT_INPUT
    print(f"wrote {out_dir / 'results.csv'}, {out_dir / 'aggregate.csv'}, {out_dir / 'report.md'}")
    verdicts = [line for line in format_report(aggs).splitlines() if line.startswith("- [")]
    for line in verdicts:
        print(line[2:])
    return EXIT_OK


def run_checks(cfg: Config) -> list[tuple[str, bool, bool, str]]:
    """All configured checks as ``(name, outcome, expected, detail)`` tuples."""
    exp = cfg.experiment
    chk = cfg.check
    dgp = exp.build_dgp()
    out = []
    rate_model = None
    for idx, name in enumerate(exp.moments):
        model = dgp.model(name)
        h0 = dgp.h0(model)
        rng = rng_stream(exp.seed, idx, f"check/{name}")
        Z = dgp.sample(rng, 2000)
        G0 = h0(model.x(Z))

        der = derivative_check(model, Z, rng, chk.fd_points, G_center=G0 if model.ell else None)
        out.append((f"{name}: analytic derivatives vs finite differences", der.passed, True,
                    f"grad_theta {der.grad_theta_err:.2e}, grad_gamma {der.grad_gamma_err:.2e}, hessian {der.hessian_err:.2e}"))  # fmt: skip

        rep = check_conditional_orthogonality(model, dgp, dgp.theta0, chk.grid, chk.draws_per_point, rng)
        out.append((f"{name}: conditional orthogonality", rep.orthogonal, model.orthogonal,
                    f"max |mean|/SE {rep.max_standardized:.3g} over {len(chk.grid)} grid points"))  # fmt: skip

        sample = dgp.sample(rng, chk.score_sample)
        offset = chk.score_offset
        # a constant shift is invisible to the naive score when E[W] = 0, so tilt it along x
        def perturbed(X, h0=h0):
            tilt = 1.0 + X[:, :1] if X.shape[1] else 1.0
            return h0(X) + offset * tilt

        score, se = orthogonality_score(model, dgp.theta0, perturbed, h0, sample, with_se=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, np.abs(score) / se, np.where(score == 0, 0.0, np.inf))
        ok = bool(np.all(z < ORTHOGONALITY_THRESHOLD))
        out.append((f"{name}: orthogonality score with h_hat = h0 + {offset:g} (1 + x1)", ok, model.orthogonal,
                    f"score {np.array2string(score, precision=4)}, |score|/SE {np.array2string(z, precision=3)}"))  # fmt: skip

        if model.ell:
            lo, hi = G0.min(axis=0) - 1.0, G0.max(axis=0) + 1.0
            bounds = estimate_bounds(model, Z, (dgp.theta0 - 1.0, dgp.theta0 + 1.0), (lo, hi), chk.bound_probes, rng)
            out.append((f"{name}: derivative bounds on theta0 +- 1", True, True,
                        f"sigma_hat {bounds.sigma_hat:.4g}, lambda_hat {bounds.lambda_hat:.4g}"))  # fmt: skip
            if rate_model is None:
                rate_model = model

    if rate_model is not None:
        for lidx, (lname, spec) in enumerate(exp.learners.items()):
            cert = rate_certificate(spec, dgp, rate_model, chk.rate_grid, chk.rate_replications,
                                    rng_stream(exp.seed, lidx, f"check/rate/{lname}"))  # fmt: skip
            table = ", ".join(f"n={n}: {s:.3g}" for n, s, _ in cert.table)
            out.append((f"learner {lname}: first-stage rate ({rate_model.name} nuisance)", cert.ok,
                        cfg.expect_rate.get(lname, "ok") == "ok", f"sqrt(n) mse {table}"))  # fmt: skip
    return out


def cmd_check(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
        results = run_checks(cfg)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_INPUT
    all_ok = True
    for name, outcome, expected, detail in results:
        status = "PASS" if outcome else "FAIL"
        note = "" if expected else " (expected FAIL)"
        matches = outcome == expected
        all_ok &= matches
        flag = "ok " if matches else "!! "
        print(f"{flag}{status}{note}  {name}: {detail}")
    print(f"overall: {'PASS' if all_ok else 'FAIL'}")
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


def cmd_report(args: argparse.Namespace) -> int:
    try:
        rows = read_results(args.results)
    except FileNotFoundError:
        _err(f"cannot read {args.results}")
        return EXIT_INPUT
    except ContractViolation as exc:
        _err(str(exc))
        return EXIT_INPUT
    aggs = aggregate(rows)
    out_dir = Path(args.out)
    try:
        write_outputs(out_dir, None, aggs)
    except OSError as exc:
        _err(f"cannot write outputs to {out_dir}: {exc.strerror}")
        return EXIT_INPUT
    print(format_report(aggs), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orthoz", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="two-stage estimate on a CSV data file")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="write the JSON summary here instead of stdout")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run the Monte Carlo experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output-dir", help="override [output] dir")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check", help="derivative, orthogonality and first-stage rate checks")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("report", help="recompute aggregates and a report from a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

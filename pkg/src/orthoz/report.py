"""Human-readable summaries of aggregate tables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ContractViolation
from .montecarlo import AggregateRow, rate_slope

COVERAGE_BAND = (0.92, 0.975)
SLOPE_BAND = (-0.6, -0.4)
NEGATIVE_CONTROL_COVERAGE = 0.90
TARGET_N = 4000


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    detail: str


def _cells(aggs: Sequence[AggregateRow], moment: str, learner: str) -> list[AggregateRow]:
    return sorted((a for a in aggs if a.moment == moment and a.learner == learner), key=lambda a: a.n)


def _at(cells: list[AggregateRow], n: int) -> AggregateRow | None:
    return next((a for a in cells if a.n == n), None)


def theorem_verdicts(aggs: Sequence[AggregateRow], target_n: int = TARGET_N) -> list[Verdict]:
    """Coverage, normality, slope, decay and negative-control verdicts.

    Checks refer to learners labelled ``fast`` and ``slow``; any check whose
    cells are absent from the table is skipped.
    """
    out: list[Verdict] = []
    fast = _cells(aggs, "plr", "fast")
    cell = _at(fast, target_n)
    if cell is not None:
        lo, hi = COVERAGE_BAND
        out.append(Verdict(
            f"coverage plr/fast n={target_n}",
            lo <= cell.coverage <= hi,
            f"{cell.coverage:.4f} in [{lo}, {hi}]",
        ))  # fmt: skip
        out.append(Verdict(
            f"normality plr/fast n={target_n}",
            cell.ks_pass == "pass",
            f"KS {cell.ks_stat:.4f} ({cell.ks_pass})",
        ))  # fmt: skip
    if len(fast) >= 3 and all(a.rmse > 0 for a in fast):
        fit = rate_slope(fast)
        lo, hi = SLOPE_BAND
        out.append(Verdict("root-n slope plr/fast", lo <= fit.slope <= hi, f"{fit.slope:.4f} +- {fit.stderr:.4f} in [{lo}, {hi}]"))
    if len(fast) >= 2:
        first, last = fast[0], fast[-1]
        for label, a, b in (
            ("mean |D|", first.mean_D, last.mean_D),
            ("mean |E|", first.mean_E, last.mean_E),
            ("mean |A - J^-1|", first.mean_A_dev, last.mean_A_dev),
        ):
            out.append(Verdict(f"decay of {label} plr/fast", b < a, f"n={first.n}: {a:.4g} -> n={last.n}: {b:.4g}"))
    for a in aggs:
        if a.moment == "plr":
            out.append(Verdict(
                f"E bound {a.moment}/{a.learner} n={a.n}",
                a.E_bound_pass_rate == 1.0,
                f"pass rate {a.E_bound_pass_rate:.4f}",
            ))  # fmt: skip
    naive_slow = _cells(aggs, "plr-naive", "slow")
    cell = _at(naive_slow, target_n)
    if cell is not None:
        out.append(Verdict(
            f"negative control coverage plr-naive/slow n={target_n}",
            cell.coverage < NEGATIVE_CONTROL_COVERAGE,
            f"{cell.coverage:.4f} < {NEGATIVE_CONTROL_COVERAGE}",
        ))  # fmt: skip
    if len(naive_slow) >= 2:
        first, last = naive_slow[0], naive_slow[-1]
        out.append(Verdict(
            "negative control |D| does not decay plr-naive/slow",
            last.mean_D >= first.mean_D,
            f"n={first.n}: {first.mean_D:.4g} -> n={last.n}: {last.mean_D:.4g}",
        ))  # fmt: skip
    cell = _at(_cells(aggs, "plr", "slow"), target_n)
    if cell is not None:
        out.append(Verdict(
            f"orthogonal moment keeps coverage plr/slow n={target_n}",
            cell.coverage >= COVERAGE_BAND[0],
            f"{cell.coverage:.4f} >= {COVERAGE_BAND[0]}",
        ))  # fmt: skip
    return out


def _num(v: float, digits: int = 4) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{v:.{digits}g}" if abs(v) >= 1e4 or (v != 0 and abs(v) < 1e-3) else f"{v:.{digits}f}"


def format_report(aggs: Sequence[AggregateRow]) -> str:
    if not aggs:
        raise ContractViolation("no aggregate rows to report")
    lines = ["# Monte Carlo summary", ""]
    header = ["dgp", "moment", "learner", "n", "R", "excl", "bias", "sd", "rmse", "sqrt(n) rmse",
              "coverage", "cov se", "mean |D|", "mean |E|", "mean |A-J^-1|", "sd C", "E-bound pass", "KS", "normality"]  # fmt: skip
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for a in aggs:
        cells = [a.dgp, a.moment, a.learner, str(a.n), str(a.replications), str(a.excluded),
                 _num(a.bias), _num(a.sd), _num(a.rmse), _num(a.sqrt_n_rmse), _num(a.coverage), _num(a.coverage_se),
                 _num(a.mean_D), _num(a.mean_E), _num(a.mean_A_dev), _num(a.sd_C), _num(a.E_bound_pass_rate),
                 _num(a.ks_stat), a.ks_pass]  # fmt: skip
        lines.append("| " + " | ".join(cells) + " |")

    lines += ["", "## Log-log rmse slopes", ""]
    pairs = list(dict.fromkeys((a.moment, a.learner) for a in aggs))
    for moment, learner in pairs:
        cells = _cells(aggs, moment, learner)
        if len(cells) >= 3 and all(c.rmse > 0 and math.isfinite(c.rmse) for c in cells):
            fit = rate_slope(cells)
            lines.append(f"- {moment}/{learner}: slope {fit.slope:.4f} (se {fit.stderr:.4f})")
        else:
            lines.append(f"- {moment}/{learner}: not computed (needs three grid points with positive rmse)")

    lines += ["", "## Normality per cell", ""]
    for a in aggs:
        lines.append(f"- {a.moment}/{a.learner} n={a.n}: {a.ks_pass}" + ("" if a.ks_pass == "not-computed" else f" (KS {a.ks_stat:.4f})"))

    verdicts = theorem_verdicts(aggs)
    if verdicts:
        lines += ["", "## Verdicts", ""]
        for v in verdicts:
            lines.append(f"- [{'PASS' if v.passed else 'FAIL'}] {v.name}: {v.detail}")
    return "\n".join(lines) + "\n"

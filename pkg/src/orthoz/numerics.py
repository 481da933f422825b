"""Small dense numerics: finite differences, pivoted solves, Jacobi eigenvalues,
seeded random streams and the standard normal distribution.

Dimensions here are tiny (parameter and nuisance dimensions of a handful), so
everything is written for clarity and determinism rather than scale.
"""

from __future__ import annotations

import hashlib
import math
from statistics import NormalDist
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import erfc

from .errors import ContractViolation, EvaluationError, SingularMatrix

FloatArray = NDArray[np.float64]

PIVOT_RTOL = 1e-12
SYMMETRY_ATOL = 1e-10
_EPS = np.finfo(float).eps


def as_vector(values: ArrayLike, length: int | None = None, name: str = "vector") -> FloatArray:
    """Return a finite 1-D float array, checking the declared length."""
    vec = np.atleast_1d(np.asarray(values, dtype=float))
    if vec.ndim != 1:
        raise ContractViolation(f"{name} must be one-dimensional, got shape {vec.shape}")
    if length is not None and vec.shape[0] != length:
        raise ContractViolation(f"{name} must have length {length}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return vec


def as_matrix(values: ArrayLike, shape: tuple[int, int] | None = None, name: str = "matrix") -> FloatArray:
    mat = np.asarray(values, dtype=float)
    if mat.ndim != 2 or 0 in mat.shape:
        raise ContractViolation(f"{name} must be a non-empty 2-D array, got shape {mat.shape}")
    if shape is not None and mat.shape != shape:
        raise ContractViolation(f"{name} must have shape {shape}, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return mat


def default_step(at: ArrayLike) -> FloatArray:
    """Central-difference step: cube root of machine epsilon, scaled by 1 + |x|."""
    return np.cbrt(_EPS) * (1.0 + np.abs(np.asarray(at, dtype=float)))


def fd_gradient(
    f: Callable[[FloatArray], ArrayLike],
    at: ArrayLike,
    step: float | ArrayLike | None = None,
) -> FloatArray:
    """Central-difference Jacobian of ``f`` at ``at``.

    Entry ``(i, j)`` is ``(f_i(at + h_j e_j) - f_i(at - h_j e_j)) / (2 h_j)``. A
    scalar-valued ``f`` yields a ``1 x len(at)`` matrix.
    """
    x0 = np.asarray(at, dtype=float).ravel()
    steps = default_step(x0) if step is None else np.broadcast_to(np.asarray(step, dtype=float), x0.shape)
    if np.any(steps <= 0):
        raise ContractViolation("finite-difference step must be positive")

    columns = []
    for j in range(x0.size):
        plus = x0.copy()
        minus = x0.copy()
        plus[j] += steps[j]
        minus[j] -= steps[j]
        f_plus = np.atleast_1d(np.asarray(f(plus), dtype=float)).ravel()
        f_minus = np.atleast_1d(np.asarray(f(minus), dtype=float)).ravel()
        if not (np.all(np.isfinite(f_plus)) and np.all(np.isfinite(f_minus))):
            raise EvaluationError(f"non-finite function value when perturbing coordinate {j}", index=j)
        columns.append((f_plus - f_minus) / (2.0 * steps[j]))
    return np.column_stack(columns)


def fd_hessian(f: Callable[[FloatArray], float], at: ArrayLike, step: float | None = None) -> FloatArray:
    """Second-order central differences of a scalar function; result is symmetrised."""
    x0 = np.asarray(at, dtype=float).ravel()
    k = x0.size
    # fourth root of eps balances truncation against cancellation for second differences
    h = np.full(k, step) if step is not None else _EPS**0.25 * (1.0 + np.abs(x0))
    f0 = float(f(x0))
    hess = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            if i == j:
                xp, xm = x0.copy(), x0.copy()
                xp[i] += h[i]
                xm[i] -= h[i]
                val = (float(f(xp)) - 2.0 * f0 + float(f(xm))) / h[i] ** 2
            else:
                vals = []
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    x = x0.copy()
                    x[i] += si * h[i]
                    x[j] += sj * h[j]
                    vals.append(float(f(x)))
                val = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * h[i] * h[j])
            if not math.isfinite(val):
                raise EvaluationError(f"non-finite second difference at coordinates ({i}, {j})", index=i)
            hess[i, j] = hess[j, i] = val
    return hess


def _condition_estimate(a: FloatArray) -> float:
    with np.errstate(all="ignore"):
        try:
            cond = float(np.linalg.cond(a))
        except np.linalg.LinAlgError:
            return float("inf")
    return cond if math.isfinite(cond) else float("inf")


def solve_linear(a: ArrayLike, b: ArrayLike) -> FloatArray:
    """Solve ``a x = b`` by Gaussian elimination with partial pivoting.

    Raises
    ------
    SingularMatrix
        If a pivot falls below ``1e-12 * max|a_ij|``.
    """
    mat = as_matrix(a, name="A")
    n = mat.shape[0]
    if mat.shape[1] != n:
        raise ContractViolation(f"A must be square, got shape {mat.shape}")
    rhs = np.asarray(b, dtype=float)
    if rhs.shape[0] != n:
        raise ContractViolation(f"right-hand side has {rhs.shape[0]} rows, A has {n}")
    if not np.all(np.isfinite(rhs)):
        raise ContractViolation("right-hand side contains non-finite entries")

    scale = float(np.max(np.abs(mat)))
    if scale == 0.0:
        raise SingularMatrix("matrix is identically zero", float("inf"))
    tol = PIVOT_RTOL * scale

    aug = np.concatenate([mat.copy(), rhs.reshape(n, -1).copy()], axis=1)
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[pivot_row, col]) < tol:
            raise SingularMatrix(f"pivot {col} below tolerance {tol:.3g}", _condition_estimate(mat))
        if pivot_row != col:
            aug[[col, pivot_row]] = aug[[pivot_row, col]]
        for row in range(col + 1, n):
            factor = aug[row, col] / aug[col, col]
            if factor != 0.0:
                aug[row, col:] -= factor * aug[col, col:]

    sol = aug[:, n:].copy()
    for row in range(n - 1, -1, -1):
        sol[row] = (sol[row] - aug[row, row + 1 : n] @ sol[row + 1 :]) / aug[row, row]
    return sol.reshape(rhs.shape)


def inverse(a: ArrayLike) -> FloatArray:
    mat = as_matrix(a, name="A")
    return solve_linear(mat, np.eye(mat.shape[0]))


def eigen_bound_sym(a: ArrayLike, tol: float = 1e-10, max_sweeps: int = 100) -> float:
    """Largest absolute eigenvalue of a symmetric matrix via cyclic Jacobi rotations."""
    mat = as_matrix(a, name="A")
    n = mat.shape[0]
    if mat.shape[1] != n:
        raise ContractViolation(f"A must be square, got shape {mat.shape}")
    if np.max(np.abs(mat - mat.T)) > SYMMETRY_ATOL:
        raise ContractViolation("eigen_bound_sym requires a symmetric matrix")

    work = 0.5 * (mat + mat.T)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(np.tril(work, -1) ** 2)))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if apq == 0.0:
                    continue
                tau = (work[q, q] - work[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                work = rot.T @ work @ rot
    return float(np.max(np.abs(np.diag(work))))


def _tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")


def rng_stream(seed: int, index: int = 0, tag: str = "") -> np.random.Generator:
    """Counter-based random stream identified by ``(seed, index, tag)``.

    The same triple always yields the same draws; distinct triples are
    independent by construction of :class:`numpy.random.SeedSequence`.
    """
    if seed < 0 or index < 0:
        raise ContractViolation("seed and index must be non-negative")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index), _tag_key(tag)))
    return np.random.Generator(np.random.Philox(seq))


def normal_cdf(x: ArrayLike) -> FloatArray:
    return 0.5 * erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ContractViolation(f"quantile level must lie in (0, 1), got {p}")
    return NormalDist().inv_cdf(p)

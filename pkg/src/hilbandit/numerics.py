"""Dense linear-algebra kernels and constrained least-squares solvers.

Everything here operates on plain numpy arrays (matrices are 2-D row-major
arrays, vectors are 1-D). All solvers are pure functions of their inputs and
deterministic: identical inputs produce bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NumericsError(Exception):
    """Base class for solver failures."""


class NotPositiveDefinite(NumericsError):
    """Cholesky pivot fell at or below the pivot tolerance."""


class SingularSystem(NumericsError):
    """Unregularized normal equations are singular."""


class IterationLimit(NumericsError):
    """An active-set loop exceeded its iteration cap without converging."""


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerance defaults shared by all solvers.

    pivot: smallest acceptable Cholesky pivot.
    kkt: KKT slack for active-set solvers (gradient of ||Xt - y||^2 scaled
        by 1/2, i.e. g = X'(Xt - y)).
    stationarity: infinity norm of the projected-gradient step for BVLS.
    """

    pivot: float = 1e-12
    kkt: float = 1e-8
    stationarity: float = 1e-7


DEFAULT_TOLERANCES = Tolerances()


@dataclass(frozen=True)
class BoxConstraint:
    """Elementwise bounds `lower <= theta <= upper` (entries may be +-inf)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        if lower.shape != upper.shape:
            raise ValueError("box bounds must have matching shapes")
        if np.any(lower > upper):
            raise ValueError("box constraint requires lower <= upper elementwise")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @staticmethod
    def uniform(n: int, lower: float, upper: float) -> "BoxConstraint":
        return BoxConstraint(np.full(n, lower), np.full(n, upper))


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _as_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got ndim={v.ndim}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def cholesky_factor(a: np.ndarray, tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """Lower-triangular L with L L' = a, raising on small or negative pivots."""
    a = _as_matrix(a, "a")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError("cholesky_factor requires a square matrix")
    sym_slack = 1e-8 * max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > sym_slack:
        raise ValueError("cholesky_factor requires a symmetric matrix")
    chol = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - chol[j, :j] @ chol[j, :j]
        if pivot <= tol.pivot:
            raise NotPositiveDefinite(f"pivot {pivot:.3e} at column {j} <= {tol.pivot:.0e}")
        chol[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            chol[j + 1 :, j] = (a[j + 1 :, j] - chol[j + 1 :, :j] @ chol[j, :j]) / chol[j, j]
    return chol


def _solve_triangular(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Forward then backward substitution against L and L'.
    n = chol.shape[0]
    y = np.zeros(n)
    for i in range(n):
        y[i] = (b[i] - chol[i, :i] @ y[:i]) / chol[i, i]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - chol[i + 1 :, i] @ x[i + 1 :]) / chol[i, i]
    return x


def cholesky_solve(a, b, tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive-definite ``a``.

    Raises NotPositiveDefinite when a Cholesky pivot is <= tol.pivot.
    """
    a = _as_matrix(a, "a")
    b = _as_vector(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ValueError("a and b have incompatible shapes")
    return _solve_triangular(cholesky_factor(a, tol), b)


def ridge_solve(x, y, lam: float, tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """argmin ||X t - y||^2 + lam ||t||^2 via the normal equations.

    With lam = 0 this is ordinary least squares; a singular Gram matrix then
    raises SingularSystem.
    """
    x = _as_matrix(x, "x")
    y = _as_vector(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y have incompatible shapes")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    gram = x.T @ x
    if lam > 0:
        gram = gram + lam * np.eye(x.shape[1])
    try:
        return cholesky_solve(gram, x.T @ y, tol)
    except NotPositiveDefinite as err:
        if lam == 0:
            raise SingularSystem("X'X is singular and lam = 0") from err
        raise


def nnls(x, y, max_iter: int | None = None, tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """Lawson-Hanson active-set solve of argmin ||X t - y||^2 s.t. t >= 0.

    Works on the precomputed Gram system (X'X, X'y), so each restricted
    solve costs O(n^3) regardless of the row count. At return, for active
    coordinates (t_i = 0) the gradient g = X'(Xt - y) satisfies
    g_i >= -tol.kkt, and free coordinates satisfy |g_i| <= tol.kkt. Raises
    IterationLimit past ``max_iter`` (default 10 * n_cols) active-set
    changes.
    """
    x = _as_matrix(x, "x")
    y = _as_vector(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y have incompatible shapes")
    n = x.shape[1]
    if max_iter is None:
        max_iter = 10 * n
    gram = x.T @ x
    xty = x.T @ y

    theta = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = xty.copy()  # negative gradient c - G theta at theta = 0
    iters = 0
    while not passive.all():
        w_masked = np.where(passive, -np.inf, w)
        if np.max(w_masked) <= tol.kkt:
            break
        passive[int(np.argmax(w_masked))] = True
        while True:
            iters += 1
            if iters > max_iter:
                raise IterationLimit(f"nnls exceeded {max_iter} active-set iterations")
            z = np.zeros(n)
            idx = np.flatnonzero(passive)
            # normal equations are always consistent; min-norm solve handles
            # rank-deficient passive sets
            z[idx], *_ = np.linalg.lstsq(gram[np.ix_(idx, idx)], xty[idx], rcond=None)
            if np.all(z[passive] > 0):
                theta = z
                break
            # Step toward z until the first passive coordinate hits zero.
            blocking = passive & (z <= 0)
            gaps = theta[blocking] - z[blocking]
            ratios = np.where(gaps > 0, theta[blocking] / np.where(gaps > 0, gaps, 1.0), 0.0)
            alpha = float(np.min(ratios))
            theta = theta + alpha * (z - theta)
            hit_zero = passive & (theta <= tol.kkt)
            passive &= ~hit_zero
            theta[~passive] = 0.0
        w = xty - gram @ theta
    return theta


def bvls(
    x,
    y,
    box: BoxConstraint,
    max_iter: int | None = None,
    tol: Tolerances = DEFAULT_TOLERANCES,
) -> np.ndarray:
    """Active-set solve of argmin ||X t - y||^2 subject to box bounds.

    Same family as the nonnegative solver but with general lower/upper
    bounds; terminates when the projected-gradient stationarity measure
    drops to tol.stationarity. Raises IterationLimit as nnls does.
    """
    x = _as_matrix(x, "x")
    y = _as_vector(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y have incompatible shapes")
    n = x.shape[1]
    lb, ub = box.lower, box.upper
    if lb.shape != (n,):
        raise ValueError("box bounds must match the column count")
    if max_iter is None:
        max_iter = 10 * n
    gram = x.T @ x
    xty = x.T @ y

    theta, *_ = np.linalg.lstsq(gram, xty, rcond=None)
    on_bound = np.zeros(n, dtype=int)
    below, above = theta <= lb, theta >= ub
    theta[below], on_bound[below] = lb[below], -1
    theta[above], on_bound[above] = ub[above], 1

    # Feasibility sweep: shrink the free set until its LS solution is interior.
    iters = 0
    while True:
        free = np.flatnonzero(on_bound == 0)
        if free.size == 0:
            break
        iters += 1
        if iters > max_iter:
            raise IterationLimit(f"bvls exceeded {max_iter} iterations (init sweep)")
        z = _restricted_solve(gram, xty, theta, on_bound, free)
        lbv = z < lb[free]
        ubv = z > ub[free]
        theta[free[lbv]], on_bound[free[lbv]] = lb[free[lbv]], -1
        theta[free[ubv]], on_bound[free[ubv]] = ub[free[ubv]], 1
        inside = ~(lbv | ubv)
        theta[free[inside]] = z[inside]
        if not np.any(lbv | ubv):
            break

    grad = gram @ theta - xty
    while True:
        if _kkt_violation(grad, on_bound) <= tol.stationarity:
            return theta
        iters += 1
        if iters > max_iter:
            raise IterationLimit(f"bvls exceeded {max_iter} active-set iterations")
        kkt = grad * on_bound
        kkt[on_bound == 0] = -np.inf
        on_bound[int(np.argmax(kkt))] = 0
        while True:
            free = np.flatnonzero(on_bound == 0)
            z = _restricted_solve(gram, xty, theta, on_bound, free)
            lbv = np.flatnonzero(z < lb[free])
            ubv = np.flatnonzero(z > ub[free])
            violators = np.concatenate((lbv, ubv))
            if violators.size == 0:
                theta[free] = z
                break
            iters += 1
            if iters > max_iter:
                raise IterationLimit(f"bvls exceeded {max_iter} active-set iterations")
            # Move along the segment to z until the first bound is hit.
            targets = np.concatenate((lb[free[lbv]], ub[free[ubv]]))
            steps = (targets - theta[free[violators]]) / (z[violators] - theta[free[violators]])
            hit = int(np.argmin(steps))
            alpha = float(steps[hit])
            theta[free] = theta[free] + alpha * (z - theta[free])
            crossed = free[violators[hit]]
            if hit < lbv.size:
                theta[crossed], on_bound[crossed] = lb[crossed], -1
            else:
                theta[crossed], on_bound[crossed] = ub[crossed], 1
        grad = gram @ theta - xty


def _restricted_solve(gram, xty, theta, on_bound, free) -> np.ndarray:
    # LS on the free columns, holding bound columns fixed, in Gram form.
    bound = np.flatnonzero(on_bound != 0)
    rhs = xty[free] - gram[np.ix_(free, bound)] @ theta[bound]
    z, *_ = np.linalg.lstsq(gram[np.ix_(free, free)], rhs, rcond=None)
    return z


def _kkt_violation(grad: np.ndarray, on_bound: np.ndarray) -> float:
    # Lower bound wants grad >= 0, upper wants grad <= 0, free wants grad ~= 0.
    v = grad * on_bound
    free = on_bound == 0
    v[free] = np.abs(grad[free])
    return float(np.max(v)) if v.size else 0.0

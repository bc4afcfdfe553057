"""Dense projection QP solver with active-set reporting.

Solves min |u - u0|^2 subject to A u <= b for small dense systems (a handful
of rows, 2-3 variables). The method is a dual active-set iteration: start at
the unconstrained optimum u0, repeatedly pick the lowest-index violated row,
and drive its multiplier up while keeping previously added rows tight,
dropping rows whose multiplier would go negative. Lowest-index selection on
both the add and drop side keeps the iteration from cycling on degenerate
instances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, MaxIterationsError, RankDeficientError

DEFAULT_TOL = 1e-9


@dataclass(frozen=True)
class Polyhedron:
    """Constraint system {u : a @ u <= b}. Rows need not be normalized."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if a.size == 0:
            a = a.reshape(0, max(a.shape[-1], 1) if a.ndim else 1)
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"row mismatch: a has {a.shape[0]} rows, b has {b.shape[0]}")
        if a.shape[1] < 1:
            raise ValueError("polyhedron needs at least one variable")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n_rows(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.a.shape[1]

    def violations(self, u: np.ndarray) -> np.ndarray:
        return self.a @ u - self.b


@dataclass(frozen=True)
class QpSolution:
    """Projection result with the tight rows and their multipliers."""

    point: np.ndarray
    active_indices: np.ndarray
    multipliers: np.ndarray
    iterations: int


def solve_projection_qp(u0: np.ndarray, poly: Polyhedron, tol: float = DEFAULT_TOL) -> QpSolution:
    """Euclidean projection of u0 onto {u : A u <= b}.

    Raises InfeasibleError when the constraints have empty intersection and
    MaxIterationsError when the anti-cycling budget (100 * (n_rows + 1)) runs
    out. On success the KKT conditions hold to within tol:
    A u <= b + tol, multipliers >= 0, and u = u0 - A_active^T lambda.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    u0 = np.asarray(u0, dtype=float).ravel()
    if u0.shape[0] != poly.n_u:
        raise ValueError(f"u0 has dim {u0.shape[0]}, polyhedron has {poly.n_u}")
    a, b = poly.a, poly.b
    u = u0.copy()
    work: list[int] = []          # active rows, kept linearly independent
    lam: list[float] = []
    budget = 100 * (poly.n_rows + 1)
    iterations = 0

    while iterations < budget:
        iterations += 1
        viol = a @ u - b
        over = np.flatnonzero(viol > tol)
        if over.size == 0:
            return QpSolution(
                point=u,
                active_indices=np.asarray(work, dtype=int),
                multipliers=np.asarray(lam, dtype=float),
                iterations=iterations,
            )
        p = int(over[0])
        n_p = a[p]
        span_tol = 1e-11 * (1.0 + float(n_p @ n_p))
        lam_p = 0.0
        while True:
            if work:
                aw = a[work]
                gram = aw @ aw.T
                r = np.linalg.solve(gram, aw @ n_p)
                z = -(n_p - r @ aw)
            else:
                r = np.zeros(0)
                z = -n_p
            # |z|^2 equals n_p . (-z); zero means n_p is spanned by the
            # working set and only a dual adjustment is possible.
            znorm2 = float(n_p @ -z)
            viol_p = float(n_p @ u - b[p])
            if viol_p <= tol:
                # Driven tight by earlier partial steps.
                if lam_p > 0.0:
                    work.append(p)
                    lam.append(lam_p)
                break
            if znorm2 <= span_tol:
                z = np.zeros_like(z)     # pure dual step: do not drift u
                t_full = np.inf
            else:
                t_full = viol_p / znorm2
            t_dual = np.inf
            k_drop = -1
            for pos in range(len(work)):
                if r[pos] > 1e-12:
                    ratio = max(lam[pos], 0.0) / r[pos]
                    if ratio < t_dual:
                        t_dual, k_drop = ratio, pos
            if not np.isfinite(t_full) and not np.isfinite(t_dual):
                raise InfeasibleError(
                    f"constraint {p} cannot be satisfied: empty feasible set"
                )
            t = min(t_full, t_dual)
            u = u + t * z
            lam_p += t
            for pos in range(len(work)):
                lam[pos] -= t * r[pos]
            if t_full <= t_dual:
                work.append(p)
                lam.append(lam_p)
                break
            work.pop(k_drop)
            lam.pop(k_drop)
    raise MaxIterationsError(f"projection did not settle within {budget} iterations")


def nonredundant_active_rows(sol: QpSolution, poly: Polyhedron, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Maximal linearly independent subset of rows tight at the solution.

    Rows are scanned in index order and kept when they increase the rank of
    the collected set, so duplicated or dependent tight rows resolve to the
    earliest representative.
    """
    u = sol.point
    tight = np.flatnonzero(np.abs(poly.a @ u - poly.b) <= tol)
    kept: list[int] = []
    for i in tight:
        candidate = poly.a[kept + [int(i)]]
        smin = np.linalg.svd(candidate, compute_uv=False)[-1]
        if smin > 1e-10 * max(1.0, np.max(np.abs(candidate))):
            kept.append(int(i))
        if len(kept) == poly.n_u:
            break
    return np.asarray(kept, dtype=int)


def hager_lipschitz_bound(active_rows: np.ndarray, tol: float = 1e-12) -> float:
    """Lipschitz constant of the projection w.r.t. (u0, b) perturbations.

    For a full-row-rank active matrix M the projection map is Lipschitz with
    constant L = 1 + 2/s_min * (1 + 2*s_max*max(1/s_min, 1)), where s_max
    bounds |M^T| and s_min is the smallest singular value of M. An empty
    active set leaves the projection equal to u0, which is 1-Lipschitz.
    """
    m = np.atleast_2d(np.asarray(active_rows, dtype=float))
    if m.size == 0:
        return 1.0
    if m.shape[0] > m.shape[1]:
        raise RankDeficientError(
            f"{m.shape[0]} active rows in dimension {m.shape[1]} cannot be independent"
        )
    sing = np.linalg.svd(m, compute_uv=False)
    s_max, s_min = float(sing[0]), float(sing[-1])
    if s_min <= tol:
        raise RankDeficientError(f"smallest singular value {s_min:.3e} below {tol:.1e}")
    return 1.0 + (2.0 / s_min) * (1.0 + 2.0 * s_max * max(1.0 / s_min, 1.0))

"""Feasible-set reshaping onto a positive basis.

Replaces the norm-augmented feasible set {a u + c|u| <= b} with an inner
polyhedron {A_L u <= b_L} built on a positive basis A_L, anchored at a
Lipschitz selection point. The polyhedral set inherits the selection's
Lipschitz regularity, so projecting a nominal input onto it produces a
control law with a constructive Lipschitz constant, which the raw
norm-augmented projection does not have.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .errors import (
    BadCountError,
    CoverageConditionError,
    SelectionNotFeasibleError,
    UnsupportedDimensionError,
)
from .qcqp_safety import ConstraintSet
from .qp_solver import Polyhedron, solve_projection_qp


@dataclass(frozen=True)
class PositiveBasis:
    """Unit row directions positively spanning the input space.

    c_a is the coverage constant: every unit vector is a nonnegative
    combination of the rows whose inner product with it is at least c_a.
    """

    a_l: np.ndarray
    c_a: float

    def __post_init__(self):
        a_l = np.atleast_2d(np.asarray(self.a_l, dtype=float))
        norms = np.linalg.norm(a_l, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("basis rows must be unit vectors")
        # The minimal plane basis (three rows at 120 degrees) carries the
        # constant cos(2*pi/3) = -1/2; reshaping later insists on a positive
        # constant through its own cone-width condition.
        if not (-1.0 < self.c_a < 1.0):
            raise ValueError("coverage constant must lie in (-1, 1)")
        object.__setattr__(self, "a_l", a_l)

    @property
    def n_l(self) -> int:
        return self.a_l.shape[0]

    @property
    def n_u(self) -> int:
        return self.a_l.shape[1]


@dataclass(frozen=True)
class ReshapedSet:
    """Polyhedral inner approximation {A_L u <= b_l} of a constraint set."""

    basis: PositiveBasis
    b_l: np.ndarray

    def polyhedron(self) -> Polyhedron:
        return Polyhedron(self.basis.a_l, self.b_l)


def make_positive_basis(n_u: int, n_l: int) -> PositiveBasis:
    """Deterministic positive basis for 2- or 3-dimensional inputs.

    n_u = 2: regular polygon directions at angles 2*pi*i/n_l with coverage
    cos(2*pi/n_l); n_l must be odd and > 2 so no two rows are collinear.
    n_u = 3: Fibonacci-sphere directions with the coverage constant taken
    from a sampled worst case and then verified.
    """
    if n_u == 2:
        if n_l <= n_u:
            raise BadCountError("need more directions than dimensions")
        if n_l % 2 == 0:
            raise BadCountError("even polygon counts create collinear row pairs")
        idx = np.arange(1, n_l + 1)
        rows = np.column_stack([np.cos(2.0 * np.pi * idx / n_l),
                                np.sin(2.0 * np.pi * idx / n_l)])
        basis = PositiveBasis(rows, float(np.cos(2.0 * np.pi / n_l)))
    elif n_u == 3:
        if n_l <= n_u:
            raise BadCountError("need more directions than dimensions")
        rows = _fibonacci_sphere(n_l)
        c_a = _sampled_coverage_constant(rows)
        basis = None
        while c_a > 1e-3:
            candidate = PositiveBasis(rows, c_a)
            if validate_positive_basis(candidate, samples=500).coverage_failures == 0:
                basis = candidate
                break
            c_a *= 0.98
        if basis is None:
            raise CoverageConditionError("no workable coverage constant found")
    else:
        raise UnsupportedDimensionError(f"positive bases implemented for n_u in (2, 3), got {n_u}")
    report = validate_positive_basis(basis, samples=500)
    if report.coverage_failures or report.min_subset_sigma <= 1e-8:
        raise CoverageConditionError(f"constructed basis failed validation: {report}")
    return basis


def _fibonacci_sphere(count: int) -> np.ndarray:
    golden = (1.0 + math.sqrt(5.0)) / 2.0
    i = np.arange(count) + 0.5
    phi = 2.0 * np.pi * i / golden
    cos_theta = 1.0 - 2.0 * i / count
    sin_theta = np.sqrt(np.clip(1.0 - cos_theta**2, 0.0, 1.0))
    return np.column_stack([sin_theta * np.cos(phi), sin_theta * np.sin(phi), cos_theta])


def _sampled_coverage_constant(rows: np.ndarray, probes: int = 2000) -> float:
    """Largest threshold that keeps >= n_u candidate rows for every probe."""
    n_u = rows.shape[1]
    dirs = _fibonacci_sphere(probes)
    kth_best = np.sort(dirs @ rows.T, axis=1)[:, -n_u]
    return float(np.min(kth_best)) * (1.0 - 1e-9)


def _unit_probes(n_u: int, samples: int) -> np.ndarray:
    if n_u == 2:
        angles = np.linspace(0.0, 2.0 * np.pi, samples, endpoint=False) + 0.1234
        return np.column_stack([np.cos(angles), np.sin(angles)])
    return _fibonacci_sphere(samples)


@dataclass(frozen=True)
class BasisReport:
    """Validation summary: unit norms, subset conditioning, coverage."""

    samples: int
    max_unit_norm_deviation: float
    min_subset_sigma: float
    coverage_failures: int
    first_failure: np.ndarray | None


def validate_positive_basis(basis: PositiveBasis, samples: int = 500) -> BasisReport:
    """Check the three positive-basis properties by direct computation.

    Unit rows and subset conditioning are exact (all n_u-subsets); coverage
    is sampled: for each probe direction the rows within the coverage cone
    must positively span it, which a small nonnegative least-squares solve
    certifies. Report-only.
    """
    if samples < 100:
        raise ValueError("use at least 100 probe directions")
    a_l = basis.a_l
    max_dev = float(np.max(np.abs(np.linalg.norm(a_l, axis=1) - 1.0)))
    min_sigma = math.inf
    for subset in itertools.combinations(range(basis.n_l), basis.n_u):
        sigma = np.linalg.svd(a_l[list(subset)], compute_uv=False)[-1]
        min_sigma = min(min_sigma, float(sigma))
    failures = 0
    first = None
    for probe in _unit_probes(basis.n_u, samples):
        chosen = a_l[a_l @ probe >= basis.c_a - 1e-12]
        ok = chosen.shape[0] >= basis.n_u
        if ok:
            _, resid = nnls(chosen.T, probe)
            ok = resid <= 1e-8
        if not ok:
            failures += 1
            if first is None:
                first = probe.copy()
    return BasisReport(
        samples=samples,
        max_unit_norm_deviation=max_dev,
        min_subset_sigma=min_sigma,
        coverage_failures=failures,
        first_failure=first,
    )


def cbar_a(c_bar: float, c_a: float) -> float:
    """Effective coverage constant after absorbing the norm coefficient.

    Requires c_a > cos(pi/2 - acos(sqrt(1 - c_bar^2))), i.e. the coverage
    cone must stay wider than the uncertainty cone; returns
    cos(acos(sqrt(1 - c_bar^2)) + acos(c_a)).
    """
    if not (0.0 <= c_bar < 1.0):
        raise ValueError("c_bar must lie in [0, 1)")
    opening = math.acos(math.sqrt(1.0 - c_bar * c_bar))
    if c_a <= math.cos(math.pi / 2.0 - opening):
        raise CoverageConditionError(
            f"coverage constant {c_a:.6g} too small for norm coefficient {c_bar:.6g}"
        )
    return math.cos(opening + math.acos(c_a))


def reshape_b_l(
    selection: np.ndarray,
    cs: ConstraintSet,
    basis: PositiveBasis,
    k_phi: float = 0.0,
    c_bar: float | None = None,
    tol: float = 1e-9,
) -> ReshapedSet:
    """Offsets of the reshaped polyhedron around a feasible selection point.

    b_l = A_L s + rowwise-min over constraints of (phi1 + phi2) with
    phi1 = max(A_L a^T, cbar_a) * (b - a s - c|s|)/(1 + c)  (columnwise)
    phi2 = max(k_phi (cbar_a - A_L a^T), 0).
    Both terms are nonnegative, so the selection always remains inside, and
    the expansion stays within the original norm-augmented set.
    """
    if k_phi < 0:
        raise ValueError("k_phi must be nonnegative")
    if cs.n_rows == 0:
        raise ValueError("reshaping needs at least one constraint row")
    selection = np.asarray(selection, dtype=float).ravel()
    if not cs.contains(selection, tol=tol):
        raise SelectionNotFeasibleError("selection point violates the constraint set")
    effective_cbar = float(np.max(cs.c)) if c_bar is None else float(c_bar)
    cbar_a_val = cbar_a(effective_cbar, basis.c_a)
    dots = basis.a_l @ cs.a.T                                   # (n_l, n_c)
    slack = cs.b - cs.a @ selection - cs.c * np.linalg.norm(selection)
    slack = np.maximum(slack, 0.0)                              # clip tolerance dust
    phi1 = np.maximum(dots, cbar_a_val) * (slack / (1.0 + cs.c))[None, :]
    phi2 = np.maximum(k_phi * (cbar_a_val - dots), 0.0)
    b_l = basis.a_l @ selection + np.min(phi1 + phi2, axis=1)
    return ReshapedSet(basis=basis, b_l=b_l)


def reshaped_filter(
    nominal: np.ndarray,
    cs: ConstraintSet,
    basis: PositiveBasis,
    k_phi: float,
    selection: np.ndarray,
    tol: float = 1e-9,
) -> np.ndarray:
    """Project the nominal input onto the reshaped set.

    The result never exceeds |selection| + |nominal| in norm and is a
    Lipschitz function of the constraint data. With no constraint rows the
    nominal passes through unchanged.
    """
    nominal = np.asarray(nominal, dtype=float).ravel()
    if cs.n_rows == 0:
        return nominal.copy()
    reshaped = reshape_b_l(selection, cs, basis, k_phi, tol=tol)
    return solve_projection_qp(nominal, reshaped.polyhedron(), tol=tol).point


def polytope_vertices_2d(poly: Polyhedron, tol: float = 1e-9) -> np.ndarray:
    """Vertices of a bounded 2-D polyhedron by pairwise row intersection."""
    if poly.n_u != 2:
        raise ValueError("vertex enumeration implemented for 2-D only")
    verts = []
    for i, j in itertools.combinations(range(poly.n_rows), 2):
        m = poly.a[[i, j]]
        if abs(np.linalg.det(m)) <= 1e-12:
            continue
        v = np.linalg.solve(m, poly.b[[i, j]])
        if np.all(poly.a @ v <= poly.b + tol):
            verts.append(v)
    return np.asarray(verts) if verts else np.zeros((0, 2))


def sample_polytope_2d(poly: Polyhedron, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform rejection sample of a bounded 2-D polyhedron.

    Positive-basis polyhedra are always bounded; the bounding box comes from
    the vertex enumeration. Degenerate (single-point) sets return copies of
    that point.
    """
    verts = polytope_vertices_2d(poly)
    if verts.shape[0] == 0:
        raise ValueError("polyhedron has no vertices; unbounded or empty")
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    if np.all(hi - lo < 1e-12):
        return np.tile(verts[0], (count, 1))
    out = np.empty((count, 2))
    have = 0
    rounds = 0
    while have < count:
        rounds += 1
        if rounds > 1000:
            raise RuntimeError("rejection sampling stalled; polyhedron too thin")
        batch = rng.uniform(lo, hi, size=(4 * (count - have) + 16, 2))
        keep = batch[np.all(poly.a @ batch.T <= poly.b[:, None] + 1e-12, axis=0)]
        take = min(count - have, keep.shape[0])
        out[have:have + take] = keep[:take]
        have += take
    return out

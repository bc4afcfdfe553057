"""Norm-augmented safety constraints for relative-degree-one plants.

The feasible input set at state x is {u : A u + c * |u| <= b} with one row
per certificate: the row direction is the normalized certificate gradient
pushed through the input matrix, the offset is the decay-rate value at the
current certificate level, and the norm coefficient c = delta_upper/g_lower
absorbs input-matrix uncertainty. The module also provides the closed-form
feasibility witness, the Lipschitz selection used as the reshaping anchor,
and the decrease-margin audit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .certificates import CertificateSpec, Disc, Segment, eval_disc, eval_segment
from .errors import (
    NotInFeasibleSetError,
    SelectionConditionError,
    WitnessInfeasibleError,
    ZeroGradientError,
)

ROW_NORM_TOL = 1e-12


@dataclass(frozen=True)
class ConstraintSet:
    """Rows (a, b, c) of the system a @ u + c * |u| <= b with unit rows a."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        c = np.asarray(self.c, dtype=float).ravel()
        if not (a.shape[0] == b.shape[0] == c.shape[0]):
            raise ValueError("row count mismatch between a, b, c")
        if a.shape[0]:
            norms = np.linalg.norm(a, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-9:
                raise ValueError("constraint rows must be unit vectors")
            if np.min(c) < 0.0 or np.max(c) >= 1.0:
                raise ValueError("norm coefficients must lie in [0, 1)")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def n_rows(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.a.shape[1]

    def violations(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.a @ u + self.c * np.linalg.norm(u) - self.b

    def contains(self, u: np.ndarray, tol: float = 1e-9) -> bool:
        if self.n_rows == 0:
            return True
        return bool(np.max(self.violations(u)) <= tol)


@dataclass(frozen=True)
class PlantBounds:
    """Envelope constants of the plant: gain floor/ceiling, uncertainty cap,
    and class-K bounds on the drift from the disturbance and state channels."""

    g_lower: float
    g_upper: float
    delta_upper: float = 0.0
    f_z: Callable[[float], float] | None = None
    f_x: Callable[[float], float] | None = None

    def __post_init__(self):
        if not (self.g_upper >= self.g_lower > 0.0):
            raise ValueError("need g_upper >= g_lower > 0")
        if not (self.g_lower > self.delta_upper >= 0.0):
            raise ValueError("need g_lower > delta_upper >= 0")

    @property
    def norm_coefficient(self) -> float:
        return self.delta_upper / self.g_lower

    @property
    def gain_ratio(self) -> float:
        """(g_lower + delta_upper) / (g_lower - delta_upper), >= 1."""
        return (self.g_lower + self.delta_upper) / (self.g_lower - self.delta_upper)


@dataclass(frozen=True)
class RateSpec:
    """Decay-rate family alpha_j = base o alpha_bar_inverse_j.

    The base rate has slope base_slope on s >= 0. On s < 0 it is steepened
    by negative_ratio; choosing negative_ratio >= (g_lower + delta_upper) /
    (g_lower - delta_upper) makes the base satisfy
    base(s) + ratio * base(-s) <= 0 for s <= 0, which is what the closed-form
    feasibility witness needs. A plain linear rate (negative_ratio = 1) has
    that property only when delta_upper = 0.
    """

    base_slope: float
    alpha_bar_inverse: Callable[[float], float] = lambda s: s
    negative_ratio: float = 1.0

    def __post_init__(self):
        if self.base_slope <= 0:
            raise ValueError("base_slope must be positive")
        if self.negative_ratio < 1.0:
            raise ValueError("negative_ratio must be >= 1")

    def base(self, s: float) -> float:
        if s >= 0.0:
            return self.base_slope * s
        return self.base_slope * self.negative_ratio * s

    def rate(self, offset: float) -> float:
        """alpha_j applied to the certificate offset V - level."""
        return self.base(self.alpha_bar_inverse(offset))


def rate_for_bounds(
    base_slope: float,
    bounds: PlantBounds,
    alpha_bar_inverse: Callable[[float], float] = lambda s: s,
) -> RateSpec:
    """RateSpec whose negative-side slope matches the uncertainty ratio."""
    return RateSpec(
        base_slope=base_slope,
        alpha_bar_inverse=alpha_bar_inverse,
        negative_ratio=bounds.gain_ratio,
    )


def check_base_rate(rate: RateSpec, bounds: PlantBounds, samples: int = 200) -> float:
    """Worst value of base(s) + ratio * base(-s) over sampled s <= 0.

    Nonpositive means the witness guarantee applies with these bounds.
    """
    ratio = bounds.gain_ratio
    ss = np.linspace(-10.0, 0.0, samples)
    return max(rate.base(float(s)) + ratio * rate.base(float(-s)) for s in ss)


def build_constraint_set(
    x: np.ndarray,
    certs: Sequence[CertificateSpec],
    g: np.ndarray,
    bounds: PlantBounds,
    rates: RateSpec | Sequence[RateSpec],
    grad_tol: float = 1e-9,
) -> ConstraintSet:
    """Assemble the safety constraint set at state x.

    Row j is the unit vector along dV_j/dx @ g, the offset is
    -alpha_j(V_j - level_j), and every norm coefficient is
    delta_upper / g_lower. Raises ZeroGradientError when a certificate
    gradient vanishes through g, which breaks the nonzero-gradient standing
    assumption.
    """
    x = np.asarray(x, dtype=float).ravel()
    g = np.atleast_2d(np.asarray(g, dtype=float))
    if isinstance(rates, RateSpec):
        rates = [rates] * len(certs)
    if len(rates) != len(certs):
        raise ValueError("need one RateSpec per certificate")
    rows, offsets = [], []
    for j, (cert, rate) in enumerate(zip(certs, rates)):
        if isinstance(cert.geometry, Segment):
            ev = eval_segment(cert, x)
            grad_v, v = ev.grad_v, ev.v
        elif isinstance(cert.geometry, Disc):
            dc = eval_disc(cert, x)
            v = math.exp(-dc.h)
            grad_v = -v * dc.grad_h
        else:
            raise TypeError(f"unsupported geometry {type(cert.geometry)!r}")
        direction = grad_v @ g
        nrm = float(np.linalg.norm(direction))
        if nrm <= grad_tol:
            raise ZeroGradientError(f"certificate {j}: gradient vanishes through g")
        rows.append(direction / nrm)
        offsets.append(-rate.rate(v - cert.level))
    c = np.full(len(certs), bounds.norm_coefficient)
    return ConstraintSet(np.asarray(rows), np.asarray(offsets), c)


def disc_constraint_set(discs: Sequence[CertificateSpec], x: np.ndarray) -> ConstraintSet:
    """Quadratic-clearance rows for disc obstacles under velocity control.

    Row j is -(x - o_j)/|x - o_j| with offset h_j / (2 |x - o_j|) and zero
    norm coefficient; the standard gap-crossing setup.
    """
    rows, offsets = [], []
    for cert in discs:
        dc = eval_disc(cert, x)
        rows.append(dc.direction)
        offsets.append(dc.bound)
    return ConstraintSet(np.asarray(rows), np.asarray(offsets), np.zeros(len(discs)))


def feasibility_witness(cs: ConstraintSet, tol: float = 1e-9) -> np.ndarray:
    """Closed-form point of the constraint set.

    Zero when every offset is nonnegative; otherwise the most-violated row's
    direction scaled by its offset over (1 - c). The returned point is
    verified against every row; a violation means the certificates are not
    disjoint or the rate lacks the negative-side steepening, and raises
    WitnessInfeasibleError.
    """
    if cs.n_rows == 0:
        return np.zeros(cs.n_u)
    j = int(np.argmin(cs.b))     # ties resolve to the smallest index
    if cs.b[j] >= 0.0:
        return np.zeros(cs.n_u)
    u = cs.a[j] * (cs.b[j] / (1.0 - cs.c[j]))
    worst = float(np.max(cs.violations(u)))
    if worst > tol:
        raise WitnessInfeasibleError(
            f"witness violates a row by {worst:.3e}; disjointness or the "
            "rate condition does not hold"
        )
    return u


def lipschitz_selection(cs: ConstraintSet, tol: float = 1e-9) -> np.ndarray:
    """Lipschitz anchor point of the constraint set.

    Requires the pairwise offset condition
    b_j/(1 + sgn(b_j) c_j) + b_k/(1 + sgn(b_k) c_k) >= 0 for j != k, which
    guarantees at most one negative offset. Returns zero when all offsets
    are nonnegative, else the negative row's direction times b/(1 - c).
    """
    if cs.n_rows == 0:
        return np.zeros(cs.n_u)
    scaled = cs.b / (1.0 + np.sign(cs.b) * cs.c)
    if cs.n_rows >= 2:
        order = np.argsort(scaled, kind="stable")
        lo, second = order[0], order[1]
        if scaled[lo] + scaled[second] < -tol:
            raise SelectionConditionError(
                f"offset condition fails for rows ({lo}, {second}): "
                f"{scaled[lo]:.6g} + {scaled[second]:.6g} < 0",
                pair=(int(lo), int(second)),
            )
    j = int(np.argmin(cs.b))
    if cs.b[j] >= 0.0:
        return np.zeros(cs.n_u)
    u = cs.a[j] * (cs.b[j] / (1.0 - cs.c[j]))
    worst = float(np.max(cs.violations(u)))
    if worst > tol:
        raise SelectionConditionError(
            f"selection violates a row by {worst:.3e}", pair=None
        )
    return u


def dissipation_audit(
    cs: ConstraintSet,
    u: np.ndarray,
    bounds: PlantBounds,
    disturbance_caps: tuple[float, float] = (0.0, 0.0),
    x_norm: float = 0.0,
    tol: float = 1e-9,
) -> np.ndarray:
    """Guaranteed decay margin per certificate for any u in the set.

    margin_j = alpha_j(V_j - level_j) - f_z(z_cap)/g_lower
               - f_x(x_norm)/g_lower - (1 + delta/g_lower) * w_cap,
    where alpha_j(V_j - level_j) is exactly -b_j. A nonnegative margin
    certifies that V_j decreases at the current state under disturbances up
    to the caps. Raises NotInFeasibleSetError when u is outside the set.
    """
    if not cs.contains(u, tol=tol):
        raise NotInFeasibleSetError("audited input lies outside the constraint set")
    z_cap, w_cap = disturbance_caps
    f_z = bounds.f_z(z_cap) if bounds.f_z is not None else 0.0
    f_x = bounds.f_x(x_norm) if bounds.f_x is not None else 0.0
    return (-cs.b) - f_z / bounds.g_lower - f_x / bounds.g_lower \
        - (1.0 + bounds.norm_coefficient) * w_cap


@dataclass(frozen=True)
class RateConditionReport:
    """Sampling audit of the threshold decay condition for one certificate."""

    threshold: float
    v_max: float
    min_margin: float
    argmin_v: float
    holds: bool


def rate_condition_audit(
    rate: RateSpec,
    level: float,
    threshold: float,
    theta: float,
    gamma_w_slope: float,
    bounds: PlantBounds,
    v_max: float,
    gamma_z_inverse: Callable[[float], float] | None = None,
    x_norm: float = 0.0,
    grid: int = 200,
) -> RateConditionReport:
    """Check alpha_j((c-v)/c * V) >= theta V + f_z(gz^-1(V))/g + (1+d/g) V/gw
    + f_x(|x|)/g over sampled V in [threshold, v_max]. Report-only."""
    if threshold <= level:
        raise ValueError("threshold must exceed the certificate level")
    vs = np.linspace(threshold, max(v_max, threshold), grid)
    frac = (threshold - level) / threshold
    min_margin, argmin_v = math.inf, threshold
    for v in vs:
        lhs = rate.rate(frac * v)
        rhs = theta * v + (1.0 + bounds.norm_coefficient) * (v / gamma_w_slope)
        if bounds.f_z is not None and gamma_z_inverse is not None:
            rhs += bounds.f_z(gamma_z_inverse(v)) / bounds.g_lower
        if bounds.f_x is not None:
            rhs += bounds.f_x(x_norm) / bounds.g_lower
        margin = lhs - rhs
        if margin < min_margin:
            min_margin, argmin_v = margin, float(v)
    return RateConditionReport(
        threshold=threshold,
        v_max=v_max,
        min_margin=min_margin,
        argmin_v=argmin_v,
        holds=bool(min_margin >= 0.0),
    )

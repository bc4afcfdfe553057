"""Recursive cascade controller: safety filter outer loop plus closed-form
tracking laws, with the gain bookkeeping needed to audit a design.

The outer virtual control x2* comes from the reshaped safety filter; each
inner level tracks the previous virtual control with
rho_i(e) = -(g^T e / |g^T e|) * (g_lower/(g_lower - delta)) * K_i |e|,
which for integrator chains is plain proportional feedback -K_i e. The
ledger utilities compute the Lipschitz products that appear in the
gain-selection inequality and the small-gain contraction checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .certificates import CertificateSpec
from .qcqp_safety import PlantBounds, RateSpec, build_constraint_set, lipschitz_selection
from .reshaping import PositiveBasis, reshaped_filter


@dataclass(frozen=True)
class CascadeGains:
    """Gain ledger for an m-level cascade over an integrator chain.

    tracking_slopes are K_2..K_m (1/s each); k1 is the estimated Lipschitz
    constant of the outer safety law; tau > 1 and theta > 0 are the
    small-gain and decay tuning constants; gamma_12_slope is the linear gain
    from velocity tracking error to certificate value and gamma_x2v_slope
    the linear bound of the safety law by the certificate value; rho0_bound
    caps the nominal input norm.
    """

    tracking_slopes: tuple[float, ...]
    k1: float
    tau: float = 1.001
    theta: float = 0.001
    k_alpha: float = 1.0
    gamma_12_slope: float = 4.0
    gamma_x2v_slope: float = 0.25
    rho0_bound: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "tracking_slopes", tuple(float(k) for k in self.tracking_slopes))
        if any(k <= 0 for k in self.tracking_slopes):
            raise ValueError("tracking slopes must be positive")
        # tau <= 1 and theta <= 0 are design violations, not type errors: the
        # audits exist to flag them, so they must be constructible.
        if self.tau <= 0.0 or self.theta <= 0.0:
            raise ValueError("tau and theta must be positive")

    @property
    def m(self) -> int:
        """Number of cascade levels (1 outer safety level + tracking levels)."""
        return 1 + len(self.tracking_slopes)

    def tracking_slope(self, level: int) -> float:
        """K_level for level in 2..m."""
        return self.tracking_slopes[level - 2]

    def lipschitz_entry(self, level: int) -> float:
        """Ledger entry k_level: the estimated k1 at level 1, else 2 K_level."""
        if level == 1:
            return self.k1
        return 2.0 * self.tracking_slope(level)

    def kbar(self, p: int, i: int) -> float:
        """Product of ledger entries k_p ... k_i; zero when p > i."""
        if p > i:
            return 0.0
        prod = 1.0
        for j in range(p, i + 1):
            prod *= self.lipschitz_entry(j)
        return prod

    def kbreve(self, p: int, i: int) -> float:
        """1 + sum of kbar(j, i) for j = p..i."""
        return 1.0 + sum(self.kbar(j, i) for j in range(p, i + 1))


@dataclass(frozen=True)
class LevelGains:
    """Interconnection slopes feeding one tracking level of the ledger."""

    level: int
    alpha_rho0_slope: float
    alpha_cert_slope: float
    alpha_mid_slopes: tuple[float, ...]
    alpha_self_slope: float


@dataclass(frozen=True)
class GainLedger:
    levels: tuple[LevelGains, ...]
    kbar_table: dict
    kbreve_table: dict


def gain_ledger(gains: CascadeGains) -> GainLedger:
    """Slope table of the interconnection gains for an integrator chain.

    For level i: the nominal-input channel has slope kbar(1, i-1); the
    certificate channel is that slope through gamma_x2v; the middle channels
    j = 2..i-1 have slope kbar(j, i-1) K_j + kbar(j-1, i-1); and the
    self channel has slope k_{i-1}. Empty products are zero.
    """
    levels = []
    for i in range(2, gains.m + 1):
        mids = tuple(
            gains.kbar(j, i - 1) * gains.tracking_slope(j) + gains.kbar(j - 1, i - 1)
            for j in range(2, i)
        )
        levels.append(LevelGains(
            level=i,
            alpha_rho0_slope=gains.kbar(1, i - 1),
            alpha_cert_slope=gains.kbar(1, i - 1) * gains.gamma_x2v_slope,
            alpha_mid_slopes=mids,
            alpha_self_slope=gains.lipschitz_entry(i - 1),
        ))
    kbar_table = {(p, i): gains.kbar(p, i)
                  for i in range(1, gains.m + 1) for p in range(1, i + 1)}
    kbreve_table = {(p, i): gains.kbreve(p, i)
                    for i in range(1, gains.m + 1) for p in range(1, i + 1)}
    return GainLedger(levels=tuple(levels), kbar_table=kbar_table, kbreve_table=kbreve_table)


@dataclass(frozen=True)
class LevelMargin:
    """Gain-selection slack at one level; positive means the design holds."""

    level: int
    k_tracking: float
    rhs_slope: float
    margin: float


def k_selection_audit(gains: CascadeGains) -> list[LevelMargin]:
    """Margins K_i - RHS of the integrator-chain gain-selection inequality.

    RHS slope at level i: theta + tau + kbar(1,i-1) tau
    + kbar(1,i-1) * gamma_x2v(gamma_12^-1(tau s))/s
    + sum_j (kbar(j,i-1) K_j + kbar(j-1,i-1)) tau + k_{i-1}.
    The self term at level 2 uses the estimated k1 (no K_1 exists); its
    margin is reported without any pass expectation. Never raises: negative
    margins are data, and deliberately unsafe gain sets are simulated too.
    """
    out = []
    composed = gains.gamma_x2v_slope * (gains.tau / gains.gamma_12_slope)
    for i in range(2, gains.m + 1):
        rhs = gains.theta + gains.tau
        rhs += gains.kbar(1, i - 1) * gains.tau
        rhs += gains.kbar(1, i - 1) * composed
        for j in range(2, i):
            rhs += (gains.kbar(j, i - 1) * gains.tracking_slope(j)
                    + gains.kbar(j - 1, i - 1)) * gains.tau
        rhs += gains.lipschitz_entry(i - 1)
        k_i = gains.tracking_slope(i)
        out.append(LevelMargin(level=i, k_tracking=k_i, rhs_slope=rhs, margin=k_i - rhs))
    return out


@dataclass(frozen=True)
class SmallGainReport:
    """Contraction booleans for the linear interconnection gains.

    Tracking-to-tracking gains all share slope 1/tau; each safety loop pairs
    the certificate-to-error gain gamma_12/tau against gamma_12^-1, so its
    composed slope is gamma_12^2/tau and contraction needs that below one.
    """

    tau: float
    tracking_slope: float
    tracking_contractive: bool
    safety_loop_slope: float
    safety_loop_contractive: bool
    pairs: tuple[tuple[int, int, float, bool], ...]


def small_gain_audit(gains: CascadeGains) -> SmallGainReport:
    """Evaluate the contraction conditions for the linear gain choices."""
    tracking_slope = 1.0 / gains.tau
    tracking_ok = tracking_slope < 1.0
    loop_slope = gains.gamma_12_slope ** 2 / gains.tau
    loop_ok = loop_slope < 1.0
    pairs = []
    for i in range(2, gains.m + 1):
        for j in range(1, gains.m + 1):
            if j == i:
                continue
            if j == 1:
                pairs.append((i, 1, loop_slope, loop_slope < 1.0))
            else:
                pairs.append((i, j, tracking_slope, tracking_ok))
    return SmallGainReport(
        tau=gains.tau,
        tracking_slope=tracking_slope,
        tracking_contractive=tracking_ok,
        safety_loop_slope=loop_slope,
        safety_loop_contractive=loop_ok,
        pairs=tuple(pairs),
    )


def tracking_law(
    x_tilde: np.ndarray,
    g_i: np.ndarray,
    bounds: PlantBounds,
    kappa_slope: float,
) -> np.ndarray:
    """Closed-form minimum-norm tracking input for one cascade level.

    rho(e) = -(g^T e / |g^T e|) * (g_lower / (g_lower - delta)) * K |e| for
    e != 0, and zero at the origin. The result meets its generating
    norm-augmented row with equality.
    """
    e = np.asarray(x_tilde, dtype=float).ravel()
    g_i = np.atleast_2d(np.asarray(g_i, dtype=float))
    gte = g_i.T @ e
    nrm = float(np.linalg.norm(gte))
    if nrm <= 1e-15:
        return np.zeros(g_i.shape[1])
    scale = bounds.g_lower / (bounds.g_lower - bounds.delta_upper)
    return -(gte / nrm) * scale * kappa_slope * float(np.linalg.norm(e))


@dataclass(frozen=True)
class ControllerEval:
    """One controller evaluation: input, virtual controls, tracking errors."""

    u: np.ndarray
    x_stars: tuple[np.ndarray, ...]    # x2*, ..., x_{m+1}* (= u)
    x_tildes: tuple[np.ndarray, ...]   # x_i - x_i* for i = 2..m


@dataclass
class CascadeController:
    """Composable cascade law u = rho_m(x_m - rho_{m-1}(... rho_1(x_1)))."""

    rho1: Callable[[np.ndarray], np.ndarray]
    tracking_laws: tuple[Callable[[np.ndarray], np.ndarray], ...]
    gains: CascadeGains | None = None

    @property
    def m(self) -> int:
        return 1 + len(self.tracking_laws)

    def evaluate(self, blocks: Sequence[np.ndarray]) -> ControllerEval:
        """Evaluate on the state blocks [x_1, ..., x_m]."""
        if len(blocks) != self.m:
            raise ValueError(f"expected {self.m} state blocks, got {len(blocks)}")
        x_star = np.asarray(self.rho1(np.asarray(blocks[0], dtype=float)), dtype=float)
        stars = [x_star]
        tildes = []
        for i, law in enumerate(self.tracking_laws):
            tilde = np.asarray(blocks[i + 1], dtype=float) - stars[-1]
            tildes.append(tilde)
            stars.append(np.asarray(law(tilde), dtype=float))
        return ControllerEval(u=stars[-1], x_stars=tuple(stars), x_tildes=tuple(tildes))

    def __call__(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        return self.evaluate(blocks).u


def safety_virtual_law(
    certs: Sequence[CertificateSpec],
    nominal: Callable[[np.ndarray], np.ndarray],
    basis: PositiveBasis,
    bounds: PlantBounds,
    rates: RateSpec | Sequence[RateSpec],
    k_phi: float = 0.0,
    g: np.ndarray | None = None,
) -> Callable[[np.ndarray], np.ndarray]:
    """Outer-loop law: reshaped projection of the nominal input.

    With no certificates the law is the nominal itself.
    """
    def law(x1: np.ndarray) -> np.ndarray:
        nom = np.asarray(nominal(x1), dtype=float)
        if not certs:
            return nom
        g_mat = np.eye(nom.shape[0]) if g is None else g
        cs = build_constraint_set(x1, certs, g_mat, bounds, rates)
        selection = lipschitz_selection(cs)
        return reshaped_filter(nom, cs, basis, k_phi, selection)
    return law


def build_cascade_controller(
    certs: Sequence[CertificateSpec],
    nominal: Callable[[np.ndarray], np.ndarray],
    basis: PositiveBasis,
    gains: CascadeGains,
    bounds: PlantBounds | None = None,
    rates: RateSpec | None = None,
    k_phi: float = 0.0,
) -> CascadeController:
    """Assemble the full controller for an integrator-chain plant.

    Audits are advisory and never block construction: deliberately failing
    parameter sets are legitimate simulation subjects. g_i is the identity
    at every level, matching the integrator chain.
    """
    if bounds is None:
        bounds = PlantBounds(g_lower=1.0, g_upper=1.0, delta_upper=0.0)
    if rates is None:
        rates = RateSpec(base_slope=gains.k_alpha)
    rho1 = safety_virtual_law(certs, nominal, basis, bounds, rates, k_phi=k_phi)
    laws = []
    for level in range(2, gains.m + 1):
        slope = gains.tracking_slope(level)
        laws.append(lambda e, s=slope, b=bounds: tracking_law(e, np.eye(np.asarray(e).shape[0]), b, s))
    return CascadeController(rho1=rho1, tracking_laws=tuple(laws), gains=gains)


def estimate_lipschitz(
    fn: Callable[[np.ndarray], np.ndarray],
    box: tuple[tuple[float, float], tuple[float, float]],
    grid: int = 200,
) -> float:
    """Grid lower bound on the Lipschitz constant of a planar map.

    Evaluates fn on a uniform grid and returns the largest slope between
    axis-adjacent valid points; non-finite values mask a cell out, so maps
    defined on a subregion can be fed directly.
    """
    (x_lo, x_hi), (y_lo, y_hi) = box
    xs = np.linspace(x_lo, x_hi, grid) if x_hi > x_lo else np.array([x_lo])
    ys = np.linspace(y_lo, y_hi, grid) if y_hi > y_lo else np.array([y_lo])
    probe = np.asarray(fn(np.array([xs[0], ys[0]])), dtype=float).ravel()
    values = np.full((xs.shape[0], ys.shape[0], probe.shape[0]), np.nan)
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            values[i, j] = np.asarray(fn(np.array([x, y])), dtype=float).ravel()
    best = 0.0
    if xs.shape[0] > 1:
        diff_x = np.linalg.norm(values[1:, :, :] - values[:-1, :, :], axis=2) / (xs[1] - xs[0])
        finite = diff_x[np.isfinite(diff_x)]
        if finite.size:
            best = max(best, float(np.max(finite)))
    if ys.shape[0] > 1:
        diff_y = np.linalg.norm(values[:, 1:, :] - values[:, :-1, :], axis=2) / (ys[1] - ys[0])
        finite = diff_y[np.isfinite(diff_y)]
        if finite.size:
            best = max(best, float(np.max(finite)))
    return best

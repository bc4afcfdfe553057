"""Scenario configuration: a flat dotted-key text format and the builders
that turn a parsed config into certificates, basis, gains, controller and
plant.

Key reference (suffixes document units: _m meters, _s seconds, _mps2 m/s^2):

    plant.kind                integrator_chain | velocity_loop | vtol_nonlinear
    plant.levels              chain length m (integrator_chain, default 4)
    plant.block_dim           states per block (default 2)
    plant.gravity_mps2        vtol_nonlinear gravity (default 9.81)
    plant.t2 / .t3 / .t4      velocity_loop diagonal pairs (defaults: identified)
    obstacle.<n>.kind         segment | disc
    obstacle.<n>.p1_m         segment endpoint "x, y"
    obstacle.<n>.p2_m         segment endpoint "x, y"
    obstacle.<n>.safe_distance_m   inflation radius (segment)
    obstacle.<n>.center_m     disc center "x, y"
    obstacle.<n>.radius_m     disc radius
    certificate.level         superlevel threshold v (default 1.0)
    certificate.threshold     decay threshold c > v (default 1.4)
    rate.k_alpha              decay-rate slope (default 1.0)
    nominal.value             constant nominal input "x, y"
    nominal.preset            zero (alternative to nominal.value)
    reshape.directions        positive-basis count n_l (odd, default 11)
    reshape.k_phi             expansion weight (default 2.0)
    reshape.c_a               coverage-constant override (default cos(2*pi/n_l))
    cascade.k_tracking        "K_2, ..., K_m" (empty for m = 1)
    cascade.tau               small-gain constant > 1 (default 1.001)
    cascade.theta             decay constant > 0 (default 0.001)
    cascade.gamma_12_slope    error-to-certificate gain slope (default 4.0)
    cascade.gamma_x2v_slope   safety-law-by-certificate slope (default 0.25)
    cascade.k1                outer-law Lipschitz constant, or "estimate"
    cascade.k1_grid           grid for the estimate (default 200)
    sim.dt_s                  step size (default 1e-3)
    sim.horizon_s             duration (default 10.0)
    sim.x1_0_m                initial output block "x, y"
    sim.workspace_m           "xmin, xmax, ymin, ymax" termination box
    audit.samples             disjointness audit sample count (default 2000)
    audit.grid                rate-condition audit grid (default 200)
    output.csv / .svg / .metrics   output file names
    seed                      sampling seed (default 0)

Unknown keys are rejected. Lines are "key = value"; '#' starts a comment.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cascade import CascadeController, CascadeGains, build_cascade_controller, estimate_lipschitz, safety_virtual_law
from .certificates import CertificateSpec, Disc, Segment, eval_segment, exp_alpha_bar_for_level
from .errors import ConfigError
from .qcqp_safety import PlantBounds, RateSpec
from .reshaping import PositiveBasis, make_positive_basis
from .sim import IDENTIFIED_T2, IDENTIFIED_T3, IDENTIFIED_T4, IntegratorChain, PlantModel, VelocityLoop, VtolNonlinear

_SCALAR_KEYS = {
    "plant.kind": str,
    "plant.levels": int,
    "plant.block_dim": int,
    "plant.gravity_mps2": float,
    "certificate.level": float,
    "certificate.threshold": float,
    "rate.k_alpha": float,
    "nominal.preset": str,
    "reshape.directions": int,
    "reshape.k_phi": float,
    "reshape.c_a": float,
    "cascade.tau": float,
    "cascade.theta": float,
    "cascade.gamma_12_slope": float,
    "cascade.gamma_x2v_slope": float,
    "cascade.k1": str,
    "cascade.k1_grid": int,
    "sim.dt_s": float,
    "sim.horizon_s": float,
    "audit.samples": int,
    "audit.grid": int,
    "output.csv": str,
    "output.svg": str,
    "output.metrics": str,
    "seed": int,
}
_VECTOR_KEYS = {
    "plant.t2": 2,
    "plant.t3": 2,
    "plant.t4": 2,
    "nominal.value": 2,
    "cascade.k_tracking": None,   # variable length
    "sim.x1_0_m": 2,
    "sim.workspace_m": 4,
}
_OBSTACLE_KEYS = {
    "kind": str,
    "p1_m": 2,
    "p2_m": 2,
    "safe_distance_m": float,
    "center_m": 2,
    "radius_m": float,
}


@dataclass
class ScenarioConfig:
    """Parsed, validated scenario description plus its source hash."""

    raw: dict
    obstacles: list[dict]
    source_hash: str

    def get(self, key, default=None):
        return self.raw.get(key, default)


def _parse_value(key: str, text: str):
    if key in _SCALAR_KEYS:
        kind = _SCALAR_KEYS[key]
        try:
            return kind(text) if kind is not str else text
        except ValueError as exc:
            raise ConfigError(f"key {key}: cannot parse {text!r}") from exc
    if key in _VECTOR_KEYS:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        try:
            values = tuple(float(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"key {key}: cannot parse {text!r}") from exc
        want = _VECTOR_KEYS[key]
        if want is not None and len(values) != want:
            raise ConfigError(f"key {key}: expected {want} numbers, got {len(values)}")
        return values
    raise ConfigError(f"unknown key {key!r}")


def parse_config_text(text: str) -> ScenarioConfig:
    raw: dict = {}
    obstacles: dict[int, dict] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        obstacle = re.fullmatch(r"obstacle\.(\d+)\.(\w+)", key)
        if obstacle:
            index, sub = int(obstacle.group(1)), obstacle.group(2)
            if sub not in _OBSTACLE_KEYS:
                raise ConfigError(f"line {lineno}: unknown obstacle key {sub!r}")
            kind = _OBSTACLE_KEYS[sub]
            if kind is str:
                parsed = value
            elif kind is float:
                try:
                    parsed = float(value)
                except ValueError as exc:
                    raise ConfigError(f"line {lineno}: cannot parse {value!r}") from exc
            else:
                parts = [p.strip() for p in value.split(",") if p.strip()]
                if len(parts) != kind:
                    raise ConfigError(f"line {lineno}: expected {kind} numbers")
                parsed = tuple(float(p) for p in parts)
            obstacles.setdefault(index, {})[sub] = parsed
            continue
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = _parse_value(key, value)
    ordered = [obstacles[i] for i in sorted(obstacles)]
    for i, obs in enumerate(ordered):
        kind = obs.get("kind")
        if kind == "segment":
            missing = {"p1_m", "p2_m", "safe_distance_m"} - obs.keys()
        elif kind == "disc":
            missing = {"center_m", "radius_m"} - obs.keys()
        else:
            raise ConfigError(f"obstacle {i + 1}: kind must be segment or disc")
        if missing:
            raise ConfigError(f"obstacle {i + 1}: missing {sorted(missing)}")
    digest = hashlib.sha256(text.encode()).hexdigest()
    return ScenarioConfig(raw=raw, obstacles=ordered, source_hash=f"sha256:{digest}")


def load_scenario(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


@dataclass
class Scenario:
    """Everything a run needs, assembled from one config."""

    config: ScenarioConfig
    plant: PlantModel
    certificates: list[CertificateSpec]
    basis: PositiveBasis | None
    bounds: PlantBounds
    rate: RateSpec
    gains: CascadeGains | None
    controller: CascadeController
    nominal: np.ndarray
    x0: np.ndarray
    dt: float
    horizon: float
    workspace: tuple[tuple[float, float], tuple[float, float]]
    k_phi: float
    threshold: float
    seed: int
    k1_estimated: bool


def build_certificates(cfg: ScenarioConfig) -> list[CertificateSpec]:
    level = cfg.get("certificate.level", 1.0)
    certs = []
    for obs in cfg.obstacles:
        if obs["kind"] == "segment":
            certs.append(CertificateSpec(
                geometry=Segment(np.array(obs["p1_m"]), np.array(obs["p2_m"])),
                safe_distance=obs["safe_distance_m"],
                level=level,
            ))
        else:
            certs.append(CertificateSpec(
                geometry=Disc(np.array(obs["center_m"]), obs["radius_m"]),
                level=level,
            ))
    return certs


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    kind = cfg.get("plant.kind", "integrator_chain")
    block_dim = cfg.get("plant.block_dim", 2)
    k_tracking = cfg.get("cascade.k_tracking", ())
    if kind == "integrator_chain":
        levels = cfg.get("plant.levels", 4)
        plant: PlantModel = IntegratorChain(m=levels, block_dim=block_dim)
        controller_levels = levels
    elif kind == "velocity_loop":
        plant = VelocityLoop(
            t2=tuple(cfg.get("plant.t2", IDENTIFIED_T2)),
            t3=tuple(cfg.get("plant.t3", IDENTIFIED_T3)),
            t4=tuple(cfg.get("plant.t4", IDENTIFIED_T4)),
        )
        controller_levels = 1
    elif kind == "vtol_nonlinear":
        plant = VtolNonlinear(gravity=cfg.get("plant.gravity_mps2", 9.81))
        controller_levels = 4
    else:
        raise ConfigError(f"unknown plant.kind {kind!r}")
    if controller_levels > 1 and len(k_tracking) != controller_levels - 1:
        raise ConfigError(
            f"cascade.k_tracking needs {controller_levels - 1} entries for {controller_levels} levels"
        )
    if controller_levels == 1 and k_tracking:
        raise ConfigError("cascade.k_tracking given for a single-level plant")

    certs = build_certificates(cfg)
    level = cfg.get("certificate.level", 1.0)
    threshold = cfg.get("certificate.threshold", 1.4)
    bounds = PlantBounds(g_lower=1.0, g_upper=1.0, delta_upper=0.0)
    _, abar_inv = exp_alpha_bar_for_level(level)
    rate = RateSpec(base_slope=cfg.get("rate.k_alpha", 1.0), alpha_bar_inverse=abar_inv)

    if cfg.get("nominal.preset") == "zero":
        nominal = np.zeros(2)
    else:
        value = cfg.get("nominal.value")
        if value is None:
            raise ConfigError("need nominal.value or nominal.preset")
        nominal = np.asarray(value, dtype=float)

    n_l = cfg.get("reshape.directions", 11)
    k_phi = cfg.get("reshape.k_phi", 2.0)
    basis = make_positive_basis(2, n_l) if certs else None
    if basis is not None and cfg.get("reshape.c_a") is not None:
        basis = PositiveBasis(basis.a_l, cfg.get("reshape.c_a"))

    workspace_flat = cfg.get("sim.workspace_m", (-5.0, 5.0, -5.0, 5.0))
    workspace = ((workspace_flat[0], workspace_flat[1]), (workspace_flat[2], workspace_flat[3]))
    x1_0 = np.asarray(cfg.get("sim.x1_0_m", (0.0, 0.0)), dtype=float)
    dt = cfg.get("sim.dt_s", 1e-3)
    horizon = cfg.get("sim.horizon_s", 10.0)

    nominal_fn = lambda x: nominal
    k1_text = cfg.get("cascade.k1", "estimate")
    k1_estimated = False
    if controller_levels > 1 or k_tracking:
        if k1_text == "estimate":
            law = safety_virtual_law(certs, nominal_fn, basis, bounds, rate, k_phi=k_phi) \
                if certs else (lambda x: nominal)
            k1 = estimate_safety_law_lipschitz(
                law, certs, workspace, grid=cfg.get("cascade.k1_grid", 200))
            k1_estimated = True
        else:
            try:
                k1 = float(k1_text)
            except ValueError as exc:
                raise ConfigError("cascade.k1 must be a number or 'estimate'") from exc
        gains = CascadeGains(
            tracking_slopes=tuple(k_tracking),
            k1=k1,
            tau=cfg.get("cascade.tau", 1.001),
            theta=cfg.get("cascade.theta", 0.001),
            k_alpha=cfg.get("rate.k_alpha", 1.0),
            gamma_12_slope=cfg.get("cascade.gamma_12_slope", 4.0),
            gamma_x2v_slope=cfg.get("cascade.gamma_x2v_slope", 0.25),
            rho0_bound=float(np.linalg.norm(nominal)),
        )
    else:
        gains = None

    if gains is not None and controller_levels > 1:
        controller = build_cascade_controller(
            certs, nominal_fn, basis, gains, bounds=bounds, rates=rate, k_phi=k_phi)
    else:
        rho1 = safety_virtual_law(certs, nominal_fn, basis, bounds, rate, k_phi=k_phi) \
            if certs else (lambda x: nominal)
        controller = CascadeController(rho1=rho1, tracking_laws=(), gains=gains)

    if isinstance(plant, IntegratorChain):
        x0 = np.zeros(plant.state_dim)
        x0[:block_dim] = x1_0
    elif isinstance(plant, VelocityLoop):
        x0 = np.zeros(8)
        x0[:2] = x1_0
    else:
        x0 = np.zeros(8)
        x0[:2] = x1_0
        x0[6] = cfg.get("plant.gravity_mps2", 9.81)   # start at hover thrust

    return Scenario(
        config=cfg,
        plant=plant,
        certificates=certs,
        basis=basis,
        bounds=bounds,
        rate=rate,
        gains=gains,
        controller=controller,
        nominal=nominal,
        x0=x0,
        dt=dt,
        horizon=horizon,
        workspace=workspace,
        k_phi=k_phi,
        threshold=threshold,
        seed=cfg.get("seed", 0),
        k1_estimated=k1_estimated,
    )


def estimate_safety_law_lipschitz(law, certs, workspace, grid: int = 200) -> float:
    """Grid Lipschitz lower bound of the outer safety law over the workspace.

    Points inside an inflated obstacle (or where the law is undefined) are
    masked out; only adjacent safe-region points contribute slopes.
    """
    def masked(x):
        try:
            for cert in certs:
                if isinstance(cert.geometry, Segment) and eval_segment(cert, x).h < 0:
                    return np.array([math.nan, math.nan])
            return law(x)
        except Exception:
            return np.array([math.nan, math.nan])
    return estimate_lipschitz(masked, workspace, grid=grid)

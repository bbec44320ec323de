"""Problem-instance representation and derived geometric constants.

A problem instance is a set of fixed centres with nonzero charges plus an
optional smooth extra potential.  The Hamiltonian is

    H(p, q) = |p|^2 / 2 + V(q),     V(q) = sum_l (-Z_l / |q - s_l|) + W(q).

Attracting centres have Z_l > 0.  All derived radii (collision-ball radius
c_q, cylinder radius c_y, momentum-cone half width c_p, virial radius) are
computed here and shared by the dynamical modules.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, InvalidConfigurationError, SingularityError

_GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


def _unit_sphere_samples(m: int = 42) -> np.ndarray:
    """Deterministic, roughly uniform directions (Fibonacci sphere)."""
    i = np.arange(m)
    z = 1.0 - (2.0 * i + 1.0) / m
    phi = 2.0 * math.pi * ((i / _GOLDEN) % 1.0)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


@dataclass(frozen=True)
class GaussianTerm:
    """Monomial-times-Gaussian contribution to the smooth extra potential.

    amplitude * prod_i (q_i - c_i)^powers_i * exp(-|q - c|^2 / (2 width^2))
    """

    amplitude: float
    center: np.ndarray
    width: float
    powers: tuple[int, int, int] = (0, 0, 0)


@dataclass(frozen=True)
class SmoothExtra:
    """Smooth additional potential W: off-lattice Coulomb terms plus Gaussians."""

    coulomb_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    coulomb_charges: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gaussian_terms: tuple[GaussianTerm, ...] = ()

    @property
    def total_coulomb_charge(self) -> float:
        return float(np.sum(self.coulomb_charges))


@dataclass(frozen=True)
class Tunables:
    """Free constants of the theory exposed as configuration values.

    The defaults follow the purely Coulombic case; every constant the theory
    leaves unspecified ("for C large enough") is a field here.
    """

    eps: float = 1.0
    C1: float | None = None            # far-field gradient constant; default (17/2) n Zmax
    R_min: float | None = None         # default 2 max|s_l| + d_min
    E_threshold: float | None = None   # default 1e3 * Zmax / c_q
    e0: float = 32.0                   # Poincare section size multiplier
    C7: float = 32.0                   # asymptotic-direction angle constant
    C9: float = 8.0                    # near-collision angle constant
    collinear_tol: float = 1e-12
    delta_E_fraction: float = 0.01     # delta E = fraction * E in dimension bounds
    orbit_count_C: float = 10.0        # bracket constant for orbit-count asymptotics


_CONFIG_KEYS = {"centres", "charges", "smooth_extra", "constants", "asymptotic_charge"}
_SMOOTH_KEYS = {"coulomb_terms", "gaussian_terms"}
_CONSTANT_KEYS = {
    "eps", "C1", "R_min", "E_threshold", "e0", "C7", "C9",
    "collinear_tol", "delta_E_fraction", "orbit_count_C",
}


@dataclass(frozen=True)
class CentreConfig:
    """Static problem instance: centre positions, charges, optional W."""

    centres: np.ndarray                  # (n, 3)
    charges: np.ndarray                  # (n,)
    smooth_extra: SmoothExtra | None = None
    asymptotic_charge: float | None = None
    tunables: Tunables = field(default_factory=Tunables)

    def __post_init__(self):
        centres = np.atleast_2d(np.asarray(self.centres, dtype=float))
        charges = np.asarray(self.charges, dtype=float).ravel()
        object.__setattr__(self, "centres", centres)
        object.__setattr__(self, "charges", charges)
        if centres.ndim != 2 or centres.shape[1] != 3 or centres.shape[0] < 1:
            raise InvalidConfigurationError("centres must be an (n, 3) array with n >= 1")
        if charges.shape[0] != centres.shape[0]:
            raise InvalidConfigurationError("need exactly one charge per centre")
        if np.any(charges == 0.0):
            raise InvalidConfigurationError("every charge must be nonzero")
        n = centres.shape[0]
        for i in range(n):
            for k in range(i + 1, n):
                if np.linalg.norm(centres[i] - centres[k]) == 0.0:
                    raise InvalidConfigurationError(f"centres {i} and {k} coincide")
        if self.asymptotic_charge is None:
            z_inf = float(np.sum(charges))
            if self.smooth_extra is not None:
                z_inf += self.smooth_extra.total_coulomb_charge
            object.__setattr__(self, "asymptotic_charge", z_inf)
        centres.setflags(write=False)
        charges.setflags(write=False)

    @property
    def n(self) -> int:
        return self.centres.shape[0]

    @property
    def z_max(self) -> float:
        return float(np.max(np.abs(self.charges)))

    def with_tunables(self, **kwargs) -> "CentreConfig":
        return replace(self, tunables=replace(self.tunables, **kwargs))


@dataclass(frozen=True)
class GeometrySummary:
    """Derived geometric constants of a validated configuration."""

    d_min: float
    d_max: float
    alpha_min: float
    is_noncollinear: bool
    c_q: float
    c_y: float
    c_p: float
    Z_max: float


@dataclass(frozen=True)
class EnergyContext:
    """Energy-dependent radii for one instance."""

    E: float
    R_vir: float
    E_threshold: float
    IZ_radius: float


# ---------------------------------------------------------------------------
# potential and gradient


def _smooth_extra_value(extra: SmoothExtra, q: np.ndarray) -> float:
    w = 0.0
    for pos, z in zip(np.atleast_2d(extra.coulomb_positions), extra.coulomb_charges):
        r = np.linalg.norm(q - pos)
        if r == 0.0:
            raise SingularityError("q coincides with a smooth-extra Coulomb position")
        w -= z / r
    for g in extra.gaussian_terms:
        d = q - np.asarray(g.center, dtype=float)
        mono = 1.0
        for di, pi in zip(d, g.powers):
            if pi:
                mono *= di ** pi
        w += g.amplitude * mono * math.exp(-float(d @ d) / (2.0 * g.width**2))
    return w


def _smooth_extra_gradient(extra: SmoothExtra, q: np.ndarray) -> np.ndarray:
    grad = np.zeros(3)
    for pos, z in zip(np.atleast_2d(extra.coulomb_positions), extra.coulomb_charges):
        d = q - pos
        r = np.linalg.norm(d)
        if r == 0.0:
            raise SingularityError("q coincides with a smooth-extra Coulomb position")
        grad += z * d / r**3
    for g in extra.gaussian_terms:
        d = q - np.asarray(g.center, dtype=float)
        expo = math.exp(-float(d @ d) / (2.0 * g.width**2))
        mono = 1.0
        for di, pi in zip(d, g.powers):
            if pi:
                mono *= di ** pi
        for axis in range(3):
            dmono = 0.0
            if g.powers[axis]:
                dmono = g.powers[axis] * d[axis] ** (g.powers[axis] - 1)
                for other in range(3):
                    if other != axis and g.powers[other]:
                        dmono *= d[other] ** g.powers[other]
            grad[axis] += g.amplitude * expo * (dmono - mono * d[axis] / g.width**2)
    return grad


def potential(config: CentreConfig, q) -> float:
    """V(q) = sum_l (-Z_l / |q - s_l|) + W(q)."""
    q = np.asarray(q, dtype=float)
    diffs = q - config.centres
    dists = np.linalg.norm(diffs, axis=1)
    hit = np.nonzero(dists == 0.0)[0]
    if hit.size:
        raise SingularityError("q coincides with a centre", centre_index=int(hit[0]))
    v = float(np.sum(-config.charges / dists))
    if config.smooth_extra is not None:
        v += _smooth_extra_value(config.smooth_extra, q)
    return v


def grad_potential(config: CentreConfig, q) -> np.ndarray:
    """Analytic gradient of ``potential``."""
    q = np.asarray(q, dtype=float)
    diffs = q - config.centres
    dists = np.linalg.norm(diffs, axis=1)
    hit = np.nonzero(dists == 0.0)[0]
    if hit.size:
        raise SingularityError("q coincides with a centre", centre_index=int(hit[0]))
    grad = np.einsum("l,li->i", config.charges / dists**3, diffs)
    if config.smooth_extra is not None:
        grad = grad + _smooth_extra_gradient(config.smooth_extra, q)
    return grad


def smooth_rest_potential(config: CentreConfig, centre_index: int, q) -> float:
    """W_l(q): the potential minus the centre's own Coulomb term (smooth on the ball)."""
    q = np.asarray(q, dtype=float)
    w = 0.0
    for i in range(config.n):
        if i == centre_index:
            continue
        r = np.linalg.norm(q - config.centres[i])
        if r == 0.0:
            raise SingularityError("q coincides with a centre", centre_index=i)
        w -= config.charges[i] / r
    if config.smooth_extra is not None:
        w += _smooth_extra_value(config.smooth_extra, q)
    return w


def smooth_rest_gradient(config: CentreConfig, centre_index: int, q) -> np.ndarray:
    """Gradient of W_l."""
    q = np.asarray(q, dtype=float)
    grad = np.zeros(3)
    for i in range(config.n):
        if i == centre_index:
            continue
        d = q - config.centres[i]
        r = np.linalg.norm(d)
        if r == 0.0:
            raise SingularityError("q coincides with a centre", centre_index=i)
        grad += config.charges[i] * d / r**3
    if config.smooth_extra is not None:
        grad = grad + _smooth_extra_gradient(config.smooth_extra, q)
    return grad


# ---------------------------------------------------------------------------
# geometry


def pair_distance(config: CentreConfig, k: int, l: int) -> float:
    return float(np.linalg.norm(config.centres[k] - config.centres[l]))


def _distance_extremes(config: CentreConfig) -> tuple[float, float]:
    n = config.n
    if n == 1:
        d = 2.0 * resolved_r_min(config)
        return d, d
    dists = [
        np.linalg.norm(config.centres[i] - config.centres[k])
        for i in range(n)
        for k in range(i + 1, n)
    ]
    return float(min(dists)), float(max(dists))


def triple_angle(config: CentreConfig, i: int, j: int, k: int) -> float:
    """Angle alpha(i, j, k) between s_i and s_k seen from s_j."""
    a = config.centres[i] - config.centres[j]
    b = config.centres[k] - config.centres[j]
    c = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.acos(min(1.0, max(-1.0, c)))


def minimal_angle(config: CentreConfig) -> float:
    if config.n <= 2:
        return math.pi / 3.0
    best = math.pi
    for j in range(config.n):
        for i in range(config.n):
            for k in range(config.n):
                if len({i, j, k}) == 3:
                    best = min(best, triple_angle(config, i, j, k))
    return best


def is_noncollinear(config: CentreConfig) -> bool:
    """No three centres on one line (cross-product test with configured tolerance)."""
    n = config.n
    if n <= 2:
        return True
    tol = config.tunables.collinear_tol * _distance_extremes(config)[1] ** 2
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if len({i, j, k}) == 3:
                    cross = np.cross(
                        config.centres[i] - config.centres[j],
                        config.centres[j] - config.centres[k],
                    )
                    if np.linalg.norm(cross) < tol:
                        return False
    return True


def resolved_r_min(config: CentreConfig) -> float:
    if config.tunables.R_min is not None:
        return config.tunables.R_min
    s_max = float(np.max(np.linalg.norm(config.centres, axis=1)))
    if config.n == 1:
        return 2.0 * s_max + 1.0
    dists = [
        np.linalg.norm(config.centres[i] - config.centres[k])
        for i in range(config.n)
        for k in range(i + 1, config.n)
    ]
    return 2.0 * s_max + float(min(dists))


def resolved_c1(config: CentreConfig) -> float:
    if config.tunables.C1 is not None:
        return config.tunables.C1
    return 8.5 * config.n * config.z_max


def _ball_condition_holds(config: CentreConfig, radius: float) -> bool:
    """|W_l| <= |Z_l| / (2 |q - s_l|) sampled on every collision ball."""
    if radius <= 0.0:
        return False
    base_dirs = _unit_sphere_samples(26)
    fracs = np.array([1.0, 0.75, 0.5, 0.25, 0.1])
    for l in range(config.n):
        z = abs(config.charges[l])
        dirs = [base_dirs]
        for i in range(config.n):
            # worst case for Coulombic W_l: straight towards another centre
            if i != l:
                d = config.centres[i] - config.centres[l]
                dirs.append((d / np.linalg.norm(d))[None, :])
        for f in fracs:
            r = f * radius
            for u in np.vstack(dirs):
                q = config.centres[l] + r * u
                if abs(smooth_rest_potential(config, l, q)) > 0.5 * z / r:
                    return False
    return True


def collision_ball_radius(config: CentreConfig) -> float:
    """Largest c_q with the sampled smallness bound for W_l and the line condition.

    The line condition c_q <= (1/4) sin(alpha_min) d_min guarantees no straight
    line meets more than two balls.
    """
    d_min, _ = _distance_extremes(config)
    upper = 0.25 * math.sin(minimal_angle(config)) * d_min
    if config.n == 1 and config.smooth_extra is None:
        return upper
    if _ball_condition_holds(config, upper):
        return upper
    lo, hi = 0.0, upper
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if _ball_condition_holds(config, mid):
            lo = mid
        else:
            hi = mid
    if lo == 0.0:
        raise InvalidConfigurationError("no admissible collision-ball radius found")
    return lo


def validate(config: CentreConfig) -> GeometrySummary:
    """Check invariants and compute all derived geometric constants."""
    d_min, d_max = _distance_extremes(config)
    alpha_min = minimal_angle(config)
    nc = is_noncollinear(config)
    c_q = collision_ball_radius(config)
    c_y = 0.5 * math.sin(alpha_min / 2.0) * c_q
    c_p = 0.5 * min(alpha_min / 2.0, c_y / d_max)
    return GeometrySummary(
        d_min=d_min,
        d_max=d_max,
        alpha_min=alpha_min,
        is_noncollinear=nc,
        c_q=c_q,
        c_y=c_y,
        c_p=c_p,
        Z_max=config.z_max,
    )


# ---------------------------------------------------------------------------
# virial radius and interaction zone


def _virial_conditions_hold(config: CentreConfig, r: float, E: float) -> bool:
    """Both smallness conditions sampled on the sphere |q| = r."""
    z_inf = abs(config.asymptotic_charge)
    for u in _unit_sphere_samples(42):
        q = r * u
        v = potential(config, q)
        if max(abs(v), z_inf / r) >= 0.5 * E:
            return False
        if abs(float(q @ grad_potential(config, q))) >= 0.5 * E:
            return False
    return True


def virial_radius(config: CentreConfig, E: float) -> float:
    """Smallest admissible radius beyond which escape is monotone.

    Returns the smallest r >= max(2 R_min, C2/E) such that the sampled
    virial smallness conditions hold at r and at a spread of larger radii.
    """
    if E <= 0.0:
        raise DomainError("virial radius requires E > 0")
    eps = config.tunables.eps
    c1 = resolved_c1(config)
    r_min = resolved_r_min(config)
    c2 = 31.0 * (1.0 + 1.0 / eps) * r_min ** (1.0 - eps) * c1
    floor = max(2.0 * r_min, c2 / E)

    def holds_everywhere(r: float) -> bool:
        # conditions only weaken as |q| grows; sample a geometric ladder
        return all(_virial_conditions_hold(config, r * g, E) for g in (1.0, 2.0, 4.0, 16.0))

    r = floor
    for _ in range(200):
        if holds_everywhere(r):
            break
        r *= 1.5
    else:
        raise DomainError("virial conditions unattainable (energy too small?)")
    if r == floor:
        return floor
    lo, hi = r / 1.5, r
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if holds_everywhere(mid):
            hi = mid
        else:
            lo = mid
    return hi


def resolved_e_threshold(config: CentreConfig, geometry: GeometrySummary | None = None) -> float:
    if config.tunables.E_threshold is not None:
        return config.tunables.E_threshold
    c_q = (geometry or validate(config)).c_q
    return 1e3 * config.z_max / c_q


def energy_context(config: CentreConfig, E: float) -> EnergyContext:
    """Virial radius at E plus the (E-independent) interaction-zone radius."""
    e_th = resolved_e_threshold(config)
    return EnergyContext(
        E=E,
        R_vir=virial_radius(config, E),
        E_threshold=e_th,
        IZ_radius=virial_radius(config, e_th),
    )


def v_max_estimate(config: CentreConfig, n_seeds: int = 64) -> float:
    """Estimate of sup{V at critical points} (0 when no positive critical value).

    Gradient-descent search on |grad V|^2 from a deterministic grid of seeds.
    For attracting purely Coulombic instances this is exactly 0.
    """
    if config.smooth_extra is None and np.all(config.charges > 0.0):
        return 0.0
    from scipy.optimize import minimize

    d_min, d_max = _distance_extremes(config)
    span = max(d_max, 1.0)
    rng = np.random.default_rng(11)
    centre_mean = config.centres.mean(axis=0)
    seeds = centre_mean + span * rng.uniform(-1.0, 1.0, size=(n_seeds, 3))
    best = 0.0
    for seed in seeds:
        try:
            res = minimize(
                lambda q: float(grad_potential(config, q) @ grad_potential(config, q)),
                seed,
                method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-18, "maxiter": 400},
            )
        except SingularityError:
            continue
        if res.fun < 1e-12:
            try:
                best = max(best, potential(config, res.x))
            except SingularityError:
                continue
    return best


# ---------------------------------------------------------------------------
# Jacobi metric curvature (single attracting centre)


def jacobi_sectional_curvature(Z: float, E: float, q) -> float:
    """Sectional curvature of the Jacobi metric in the 1-2 plane at q.

    K_{1,2}(q) = (Z/2E) (-1 + 3 (1 + Z/(2E|q|)) q3^2/|q|^2) / (|q| + Z/E)^3
    for the attracting single-centre potential -Z/|q| at energy E > 0.
    """
    if E <= 0.0:
        raise DomainError("requires E > 0")
    if Z <= 0.0:
        raise DomainError("requires Z > 0")
    q = np.asarray(q, dtype=float)
    r = float(np.linalg.norm(q))
    if r == 0.0:
        raise SingularityError("curvature undefined at the singularity")
    num = -1.0 + 3.0 * (1.0 + Z / (2.0 * E * r)) * q[2] ** 2 / r**2
    return (Z / (2.0 * E)) * num / (r + Z / E) ** 3


# ---------------------------------------------------------------------------
# JSON interface


def config_from_dict(doc: dict) -> CentreConfig:
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise InvalidConfigurationError(f"unknown config keys: {sorted(unknown)}")
    if "centres" not in doc or "charges" not in doc:
        raise InvalidConfigurationError("config requires 'centres' and 'charges'")
    extra = None
    raw_extra = doc.get("smooth_extra")
    if raw_extra is not None:
        unknown = set(raw_extra) - _SMOOTH_KEYS
        if unknown:
            raise InvalidConfigurationError(f"unknown smooth_extra keys: {sorted(unknown)}")
        coulomb = raw_extra.get("coulomb_terms") or []
        gauss = tuple(
            GaussianTerm(
                amplitude=float(g["amplitude"]),
                center=np.asarray(g["center"], dtype=float),
                width=float(g["width"]),
                powers=tuple(g.get("powers", (0, 0, 0))),
            )
            for g in (raw_extra.get("gaussian_terms") or [])
        )
        extra = SmoothExtra(
            coulomb_positions=np.asarray(
                [t["position"] for t in coulomb] or np.zeros((0, 3)), dtype=float
            ).reshape(-1, 3),
            coulomb_charges=np.asarray([t["charge"] for t in coulomb], dtype=float),
            gaussian_terms=gauss,
        )
    tunables = Tunables()
    raw_const = doc.get("constants")
    if raw_const:
        unknown = set(raw_const) - _CONSTANT_KEYS
        if unknown:
            raise InvalidConfigurationError(f"unknown constants keys: {sorted(unknown)}")
        tunables = Tunables(**{k: raw_const[k] for k in raw_const})
    return CentreConfig(
        centres=np.asarray(doc["centres"], dtype=float),
        charges=np.asarray(doc["charges"], dtype=float),
        smooth_extra=extra,
        asymptotic_charge=doc.get("asymptotic_charge"),
        tunables=tunables,
    )


def load_config(path: str) -> CentreConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfigurationError(
            f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    return config_from_dict(doc)


def config_sha256(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()

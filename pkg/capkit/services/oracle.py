"""
Closed-form reference values for radial condensers.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from capkit.exceptions import InvalidArgumentError
from capkit.services.conformal_energy import ScalarField
from capkit.services.mesh_builder import SimplicialMesh

logger = logging.getLogger(__name__)

# surface measure of the unit (n-1)-sphere
SPHERE_AREA = {2: 2.0 * math.pi, 3: 4.0 * math.pi}


@dataclass(frozen=True)
class RadialCondenserSpec:
    n: int
    r_inner: float
    r_outer: float

    def __post_init__(self):
        if self.n not in SPHERE_AREA:
            raise InvalidArgumentError(f"dimension must be 2 or 3, got {self.n}")
        if not 0 < self.r_inner < self.r_outer:
            raise InvalidArgumentError("radial condenser requires 0 < r_inner < r_outer")

    @property
    def log_ratio(self) -> float:
        return math.log(self.r_outer / self.r_inner)


@dataclass
class ConvergenceFit:
    order: Optional[float]
    intercept: Optional[float]
    excluded: List[Tuple[float, float]] = field(default_factory=list)
    non_convergent: bool = False

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "intercept": self.intercept,
            "excluded": [[h, v] for h, v in self.excluded],
            "non_convergent": self.non_convergent,
        }


def radial_capacity(spec: RadialCondenserSpec) -> float:
    """omega_{n-1} * log(R/r)^(1-n)."""
    return SPHERE_AREA[spec.n] * spec.log_ratio ** (1 - spec.n)


def radial_profile(spec: RadialCondenserSpec, rho: np.ndarray) -> np.ndarray:
    return np.clip(np.log(rho / spec.r_inner) / spec.log_ratio, 0.0, 1.0)


def radial_witness(
    spec: RadialCondenserSpec, mesh: SimplicialMesh, center: Optional[Sequence[float]] = None
) -> ScalarField:
    """Nodal samples of clamp(log(|x - c|/r) / log(R/r), 0, 1)."""
    if mesh.dimension != spec.n:
        raise InvalidArgumentError(f"mesh dimension {mesh.dimension} does not match n={spec.n}")
    c = np.zeros(mesh.dimension) if center is None else np.asarray(center, dtype=float)
    rho = np.linalg.norm(mesh.vertices - c, axis=1)
    with np.errstate(divide="ignore"):
        values = radial_profile(spec, rho)
    return ScalarField(mesh, values)


def radial_energy_quadrature(spec: RadialCondenserSpec) -> float:
    """omega * integral of |u'|^n rho^(n-1) over [r, R] by adaptive quadrature."""
    slope = 1.0 / spec.log_ratio

    def integrand(rho: float) -> float:
        return (slope / rho) ** spec.n * rho ** (spec.n - 1)

    value, error = integrate.quad(integrand, spec.r_inner, spec.r_outer, epsabs=0.0, epsrel=1e-13, limit=200)
    logger.debug(f"Radial quadrature: {value:.15g} (error estimate {error:.2e})")
    return SPHERE_AREA[spec.n] * value


def bump_outer_radius(n: int, r: float, energy: float) -> float:
    """
    Outer radius R at which the radial witness of the ring (r, R) has n-energy
    equal to energy; 1 - witness is 1 on B(0, r) and any larger R gives less.
    """
    if n not in SPHERE_AREA:
        raise InvalidArgumentError(f"dimension must be 2 or 3, got {n}")
    if r <= 0 or energy <= 0:
        raise InvalidArgumentError("radius and energy bound must be positive")
    return r * math.exp((SPHERE_AREA[n] / energy) ** (1.0 / (n - 1)))


def convergence_order(
    values: Sequence[Tuple[float, float]], reference: float, stagnation_tolerance: float = 0.05
) -> ConvergenceFit:
    """
    Fit log|value - reference| against log h.

    Args:
        values: (h, value) samples with h decreasing, at least 3.
        reference: Exact value.
        stagnation_tolerance: Slopes below this are flagged non-convergent.

    Returns:
        ConvergenceFit; samples hitting the reference exactly are excluded.
    """
    if len(values) < 3:
        raise InvalidArgumentError("convergence_order needs at least 3 samples")
    sizes = [h for h, _ in values]
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise InvalidArgumentError("mesh sizes must be strictly decreasing")

    kept, excluded = [], []
    for h, value in values:
        if value == reference:
            excluded.append((h, value))
        else:
            kept.append((h, abs(value - reference)))
    if excluded:
        logger.info(f"Excluded {len(excluded)} samples equal to the reference")
    if len(kept) < 2:
        return ConvergenceFit(order=None, intercept=None, excluded=excluded, non_convergent=False)

    log_h = np.log([h for h, _ in kept])
    log_err = np.log([e for _, e in kept])
    order, intercept = np.polyfit(log_h, log_err, 1)
    return ConvergenceFit(
        order=float(order),
        intercept=float(intercept),
        excluded=excluded,
        non_convergent=bool(order < stagnation_tolerance),
    )

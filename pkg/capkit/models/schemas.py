from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Optional, Dict, Literal
import math

from capkit.config import Settings, get_settings


# ===== Geometry =====

class DomainSpec(BaseModel):
    """
    A single-chart domain to be meshed.

    ball: center + radius (optionally a uniform core of radius core_radius
    surrounded by radially extruded layers); annulus: center + r_inner/r_outer;
    box: min_corner/max_corner; box_minus_ball: the box minus the closed ball
    (center, radius).
    """
    kind: Literal["ball", "annulus", "box", "box_minus_ball"]
    dimension: Literal[2, 3] = 2
    center: Optional[List[float]] = None
    radius: Optional[float] = None
    r_inner: Optional[float] = None
    r_outer: Optional[float] = None
    min_corner: Optional[List[float]] = None
    max_corner: Optional[List[float]] = None
    target_edge_length: float = Field(..., gt=0)
    core_radius: Optional[float] = None
    growth_ratio: Optional[float] = Field(None, gt=1.0)

    @model_validator(mode="after")
    def check_extents(self):
        n = self.dimension
        if self.center is not None and len(self.center) != n:
            raise ValueError(f"center must have {n} coordinates")

        if self.kind in ("ball", "box_minus_ball"):
            if self.radius is None or self.radius <= 0:
                raise ValueError(f"{self.kind} requires a strictly positive radius")
        if self.kind == "ball" and self.core_radius is not None:
            if not 0 < self.core_radius < self.radius:
                raise ValueError("core_radius must satisfy 0 < core_radius < radius")
        if self.kind == "annulus":
            if self.r_inner is None or self.r_outer is None:
                raise ValueError("annulus requires r_inner and r_outer")
            if not 0 < self.r_inner < self.r_outer:
                raise ValueError("annulus requires 0 < r_inner < r_outer")
        if self.kind in ("box", "box_minus_ball"):
            if self.min_corner is None or self.max_corner is None:
                raise ValueError(f"{self.kind} requires min_corner and max_corner")
            if len(self.min_corner) != n or len(self.max_corner) != n:
                raise ValueError(f"box corners must have {n} coordinates")
            if any(hi - lo <= 0 for lo, hi in zip(self.min_corner, self.max_corner)):
                raise ValueError("box extents must be strictly positive")
        if self.kind == "box_minus_ball":
            c = self.origin()
            gaps = [min(ci - lo, hi - ci) for ci, lo, hi in zip(c, self.min_corner, self.max_corner)]
            if min(gaps) <= self.radius:
                raise ValueError("the closed ball must lie strictly inside the box interior")
        return self

    def origin(self) -> List[float]:
        return list(self.center) if self.center is not None else [0.0] * self.dimension

    def outer_radius(self) -> Optional[float]:
        """Radius of the outer sphere for ball/annulus domains, None otherwise."""
        if self.kind == "ball":
            return self.radius
        if self.kind == "annulus":
            return self.r_outer
        return None


class RegionSpec(BaseModel):
    """Named primitive shape used to mark plates and compact sets."""
    shape: Literal["ball", "shell", "segment", "box"]
    center: Optional[List[float]] = None
    radius: Optional[float] = Field(None, ge=0)
    r_inner: Optional[float] = Field(None, ge=0)
    r_outer: Optional[float] = Field(None, gt=0)
    start: Optional[List[float]] = None
    end: Optional[List[float]] = None
    tube_radius: float = Field(0.0, ge=0)
    min_corner: Optional[List[float]] = None
    max_corner: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_shape_fields(self):
        required = {
            "ball": ("center", "radius"),
            "shell": ("center", "r_inner", "r_outer"),
            "segment": ("start", "end"),
            "box": ("min_corner", "max_corner"),
        }[self.shape]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.shape} region requires {', '.join(missing)}")
        if self.shape == "shell" and self.r_inner > self.r_outer:
            raise ValueError("shell region requires r_inner <= r_outer")
        return self

    def extent_from(self, origin: List[float]) -> float:
        """Largest distance from origin reached by the region."""
        def dist(p):
            return math.dist(p, origin)

        if self.shape == "ball":
            return dist(self.center) + self.radius
        if self.shape == "shell":
            return dist(self.center) + self.r_outer
        if self.shape == "segment":
            return max(dist(self.start), dist(self.end)) + self.tube_radius
        corners = [self.min_corner, self.max_corner]
        return max(
            math.dist(origin, [corners[(mask >> i) & 1][i] for i in range(len(origin))])
            for mask in range(2 ** len(origin))
        )

    def bounds(self) -> tuple[List[float], List[float]]:
        """Axis-aligned bounding box of the region."""
        if self.shape == "box":
            return list(self.min_corner), list(self.max_corner)
        if self.shape == "segment":
            lo = [min(a, b) - self.tube_radius for a, b in zip(self.start, self.end)]
            hi = [max(a, b) + self.tube_radius for a, b in zip(self.start, self.end)]
            return lo, hi
        r = self.radius if self.shape == "ball" else self.r_outer
        return [c - r for c in self.center], [c + r for c in self.center]


class ConformalFactorSpec(BaseModel):
    kind: Literal["flat", "radial_bump", "random_smooth"] = "flat"
    amplitude: float = 0.0
    width: float = Field(1.0, gt=0)
    center: Optional[List[float]] = None
    seed: Optional[int] = Field(None, ge=0)
    modes: int = Field(6, ge=1)

    @model_validator(mode="after")
    def check_seed(self):
        if self.kind == "random_smooth" and self.seed is None:
            raise ValueError("random_smooth conformal factor requires a seed")
        return self


# ===== Solver =====

class SolverConfig(BaseModel):
    epsilon_schedule: List[float] = [1e-1, 1e-2, 1e-3, 1e-4]
    gradient_tolerance: float = Field(1e-8, gt=0)
    max_iterations: int = Field(500, ge=1)
    line_search_shrink: float = Field(0.5, gt=0, lt=1)
    line_search_sufficient_decrease: float = Field(1e-4, gt=0, lt=1)
    method: Literal["newton", "gradient"] = "newton"
    value_tolerance: float = Field(1e-6, gt=0)

    @field_validator("epsilon_schedule")
    @classmethod
    def check_schedule(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("epsilon_schedule must not be empty")
        if any(eps <= 0 for eps in v):
            raise ValueError("epsilon_schedule entries must be positive")
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("epsilon_schedule must be strictly decreasing")
        return v

    @classmethod
    def from_settings(cls, settings: Optional[Settings] = None) -> "SolverConfig":
        settings = settings or get_settings()
        return cls(
            epsilon_schedule=list(settings.epsilon_schedule),
            gradient_tolerance=settings.gradient_tolerance,
            max_iterations=settings.max_iterations,
            line_search_shrink=settings.line_search_shrink,
            line_search_sufficient_decrease=settings.line_search_sufficient_decrease,
            method=settings.solver_method,
            value_tolerance=settings.value_tolerance,
        )

    def tolerance_for(self, *values: float) -> float:
        """Absolute solver tolerance used by property checks on these values."""
        return self.value_tolerance * max([1.0, *[abs(v) for v in values]])


# ===== Experiments =====

ExperimentKind = Literal[
    "capacity", "compact_capacity", "point_decay", "mu",
    "triangle", "classify", "converge", "continuity",
]

STOCHASTIC_KINDS = {"mu", "triangle", "continuity"}
PSEUDO_REGIONS = {"boundary"}


class ExperimentConfig(BaseModel):
    kind: ExperimentKind
    name: str = "experiment"
    domain: DomainSpec
    exhaustion_radii: Optional[List[float]] = None
    refinements: int = Field(0, ge=0)
    regions: Dict[str, RegionSpec] = {}
    plate0: str = "boundary"
    plate1: Optional[str] = None
    probe: Optional[str] = None
    conformal_factor: ConformalFactorSpec = ConformalFactorSpec()
    invariance_factors: List[ConformalFactorSpec] = []
    solver: SolverConfig = Field(default_factory=SolverConfig.from_settings)
    points: List[List[float]] = []
    radii: List[float] = []
    outer_radius: Optional[float] = Field(None, gt=0)
    search_budget: int = Field(10, ge=0)
    pairs_per_radius: int = Field(2, ge=0)
    positivity_floor: float = Field(1e-3, gt=0)
    check_symmetry: bool = False
    write_plots: Optional[bool] = None
    seed: Optional[int] = Field(None, ge=0, lt=2 ** 64)

    @model_validator(mode="after")
    def check_experiment(self):
        stochastic = (
            self.kind in STOCHASTIC_KINDS
            or self.conformal_factor.kind == "random_smooth"
            or any(f.kind == "random_smooth" for f in self.invariance_factors)
        )
        if stochastic and self.seed is None:
            raise ValueError(f"seed is required for a {self.kind} experiment with stochastic components")

        for field_name in ("plate0", "plate1", "probe"):
            ref = getattr(self, field_name)
            if ref is not None and ref not in self.regions and ref not in PSEUDO_REGIONS:
                raise ValueError(f"{field_name} references unknown region '{ref}'")

        self._check_regions_inside()

        n = self.domain.dimension
        if any(len(p) != n for p in self.points):
            raise ValueError(f"points must have {n} coordinates")
        if self.exhaustion_radii is not None:
            if self.domain.kind not in ("ball", "annulus"):
                raise ValueError("exhaustion_radii require a ball or annulus domain")
            if any(b <= a for a, b in zip(self.exhaustion_radii, self.exhaustion_radii[1:])):
                raise ValueError("exhaustion_radii must be strictly increasing")

        requirements = {
            "capacity": self.plate1 is not None,
            "compact_capacity": self.probe is not None,
            "point_decay": len(self.radii) >= 2 and self.outer_radius is not None,
            "mu": len(self.points) == 2,
            "triangle": len(self.points) == 3,
            "classify": self.probe is not None and len(self.exhaustion_radii or []) >= 3,
            "converge": self.plate1 is not None and self.refinements >= 2,
            "continuity": len(self.points) >= 1 and len(self.radii) >= 2,
        }
        hints = {
            "capacity": "plate1",
            "compact_capacity": "probe",
            "point_decay": "radii (>= 2) and outer_radius",
            "mu": "exactly 2 points",
            "triangle": "exactly 3 points",
            "classify": "probe and exhaustion_radii (>= 3 stages)",
            "converge": "plate1 and refinements >= 2",
            "continuity": "points and radii (>= 2)",
        }
        if not requirements[self.kind]:
            raise ValueError(f"{self.kind} experiment requires {hints[self.kind]}")
        return self

    def _check_regions_inside(self):
        domain = self.domain
        origin = domain.origin()
        outer = domain.outer_radius()
        if self.exhaustion_radii:
            outer = max(self.exhaustion_radii)
        for name, region in self.regions.items():
            if outer is not None:
                if region.extent_from(origin) > outer * (1 + 1e-9):
                    raise ValueError(f"region '{name}' is not inside the domain")
            else:
                lo, hi = region.bounds()
                inside = all(
                    l >= a - 1e-9 and h <= b + 1e-9
                    for l, h, a, b in zip(lo, hi, domain.min_corner, domain.max_corner)
                )
                if not inside:
                    raise ValueError(f"region '{name}' is not inside the domain")

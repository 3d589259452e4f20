"""
Condenser and compact-set capacities.

Minimizes the regularized n-energy over piecewise-linear fields fixed to 0 on
plate0 and 1 on plate1, continuing the solution along a decreasing epsilon
schedule, and reports the exact (epsilon = 0) energy of the final field.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from capkit.exceptions import InvalidArgumentError
from capkit.models.schemas import SolverConfig
from capkit.services.conformal_energy import ConformalStructure, EnergyFunctional, ScalarField
from capkit.services.mesh_builder import SimplicialMesh, ball_region, nearest_vertex

logger = logging.getLogger(__name__)

MAX_LINE_SEARCH_STEPS = 60
STATIONARY_SLOPE = 1e-14

NodeSet = Union[str, Sequence[int], np.ndarray]


# ===== Types =====

@dataclass(frozen=True, eq=False)
class Condenser:
    """Disjoint node sets fixed to 0 (plate0) and 1 (plate1)."""
    mesh: SimplicialMesh
    plate0: np.ndarray
    plate1: np.ndarray

    def __post_init__(self):
        plates = []
        for name in ("plate0", "plate1"):
            nodes = np.unique(np.asarray(getattr(self, name), dtype=np.int64))
            if nodes.size and (nodes[0] < 0 or nodes[-1] >= self.mesh.n_vertices):
                raise InvalidArgumentError(f"{name} references a vertex out of range")
            nodes.setflags(write=False)
            object.__setattr__(self, name, nodes)
            plates.append(nodes)
        overlap = np.intersect1d(*plates)
        if overlap.size:
            raise InvalidArgumentError(f"condenser plates overlap at {overlap.size} nodes")

    @classmethod
    def from_tags(cls, mesh: SimplicialMesh, tag0: str, tag1: str) -> "Condenser":
        """Build from region tags; 'boundary' names the boundary nodes."""
        return cls(mesh, mesh.nodes(tag0), mesh.nodes(tag1))

    def swapped(self) -> "Condenser":
        return Condenser(self.mesh, self.plate1, self.plate0)


@dataclass
class StageDiagnostics:
    epsilon: float
    iterations: int
    initial_grad_norm: float
    final_grad_norm: float
    energy_history: List[float] = field(default_factory=list)
    converged: bool = True

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "iterations": self.iterations,
            "initial_grad_norm": self.initial_grad_norm,
            "final_grad_norm": self.final_grad_norm,
            "energy_history": list(self.energy_history),
            "converged": self.converged,
        }


@dataclass
class CapacityResult:
    value: float
    field: ScalarField
    diagnostics: List[StageDiagnostics]
    admissible: bool

    @property
    def converged(self) -> bool:
        return all(stage.converged for stage in self.diagnostics)

    @property
    def failing_stage(self) -> Optional[StageDiagnostics]:
        return next((stage for stage in self.diagnostics if not stage.converged), None)

    @property
    def epsilon_final(self) -> float:
        return self.diagnostics[-1].epsilon if self.diagnostics else 0.0

    @property
    def iterations(self) -> int:
        return sum(stage.iterations for stage in self.diagnostics)

    @property
    def grad_norm(self) -> float:
        return self.diagnostics[-1].final_grad_norm if self.diagnostics else 0.0

    def summary_row(self, case: str) -> dict:
        """Headline numbers in the column order of the summary CSV."""
        return {
            "case": case,
            "n": self.field.mesh.dimension,
            "epsilon_final": self.epsilon_final,
            "value": self.value,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "admissible": self.admissible,
        }

    def to_dict(self, include_field: bool = False) -> dict:
        data = {
            "value": self.value,
            "admissible": self.admissible,
            "converged": self.converged,
            "diagnostics": [stage.to_dict() for stage in self.diagnostics],
        }
        if include_field:
            data["field"] = self.field.nodal_values.tolist()
        return data


@dataclass
class DecayFit:
    """c(R) = floor + amplitude * (log R + shift)^(1-n)."""
    model: str
    amplitude: float
    floor: float
    shift: float
    exponent: float
    rms_residual: float

    def predict(self, radii: Sequence[float]) -> np.ndarray:
        x = np.log(np.asarray(radii, dtype=float)) + self.shift
        return self.floor + self.amplitude * x ** self.exponent

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "amplitude": self.amplitude,
            "floor": self.floor,
            "shift": self.shift,
            "exponent": self.exponent,
            "rms_residual": self.rms_residual,
        }


@dataclass
class CompactCapacityReport:
    results: List[CapacityResult]
    radii: List[Optional[float]]
    monotone_decreasing: bool
    decay_fit: Optional[DecayFit]
    extrapolated_limit: Optional[float]

    @property
    def values(self) -> List[float]:
        return [r.value for r in self.results]

    def to_dict(self) -> dict:
        return {
            "values": self.values,
            "radii": self.radii,
            "monotone_decreasing": self.monotone_decreasing,
            "decay_fit": self.decay_fit.to_dict() if self.decay_fit else None,
            "extrapolated_limit": self.extrapolated_limit,
            "results": [r.to_dict() for r in self.results],
        }


@dataclass
class PointDecayReport:
    samples: List[Tuple[float, float]]
    results: List[CapacityResult]
    strictly_decreasing: bool
    fitted_exponent: Optional[float]
    minimum_radius: float

    def to_dict(self) -> dict:
        return {
            "samples": [[r, c] for r, c in self.samples],
            "strictly_decreasing": self.strictly_decreasing,
            "fitted_exponent": self.fitted_exponent,
            "minimum_radius": self.minimum_radius,
            "results": [r.to_dict() for r in self.results],
        }


@dataclass
class MonotonicityReport:
    cap_inner: float
    cap_outer: float
    holds: bool
    boundary_mode: str
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "cap_inner": self.cap_inner,
            "cap_outer": self.cap_outer,
            "holds": self.holds,
            "boundary_mode": self.boundary_mode,
            "tolerance": self.tolerance,
        }


@dataclass
class SubadditivityReport:
    cap_first: float
    cap_second: float
    cap_union: float
    combined_energy: float
    tolerance: float

    @property
    def holds(self) -> bool:
        return self.cap_union <= self.cap_first + self.cap_second + self.tolerance

    @property
    def certified(self) -> bool:
        """The max-combined witness is admissible for the union, so its energy bounds cap_union."""
        return self.combined_energy <= self.cap_first + self.cap_second + self.tolerance

    def to_dict(self) -> dict:
        return {
            "cap_first": self.cap_first,
            "cap_second": self.cap_second,
            "cap_union": self.cap_union,
            "combined_energy": self.combined_energy,
            "tolerance": self.tolerance,
            "holds": self.holds,
            "certified": self.certified,
        }


@dataclass
class SetMonotonicityReport:
    cap_small: float
    cap_large: float
    holds: bool

    def to_dict(self) -> dict:
        return {"cap_small": self.cap_small, "cap_large": self.cap_large, "holds": self.holds}


# ===== Solver =====

def _initial_guess(mesh: SimplicialMesh, plate0: np.ndarray, plate1: np.ndarray) -> np.ndarray:
    """0/1 indicator of plate1 followed by one Jacobi averaging pass on the free nodes."""
    indicator = np.zeros(mesh.n_vertices)
    indicator[plate1] = 1.0
    degree = np.asarray(mesh.adjacency.sum(axis=1)).ravel()
    averaged = np.divide(mesh.adjacency @ indicator, degree, out=indicator.copy(), where=degree > 0)
    averaged[plate0] = 0.0
    averaged[plate1] = 1.0
    return averaged


def _minimize_stage(
    functional: EnergyFunctional,
    values: np.ndarray,
    free: np.ndarray,
    epsilon: float,
    config: SolverConfig,
) -> Tuple[np.ndarray, StageDiagnostics]:
    energy = functional.total(values, epsilon)
    grad = functional.gradient(values, epsilon)[free]
    initial_norm = float(np.linalg.norm(grad))
    stage = StageDiagnostics(
        epsilon=epsilon,
        iterations=0,
        initial_grad_norm=initial_norm,
        final_grad_norm=initial_norm,
        energy_history=[energy],
    )
    if free.size == 0 or initial_norm == 0:
        return values, stage

    target = config.gradient_tolerance * initial_norm
    preconditioner = functional.lumped_diagonal()[free] if config.method == "gradient" else None
    step_hint = 1.0
    converged = False

    for iteration in range(config.max_iterations):
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= target:
            converged = True
            break

        direction = None
        if config.method == "newton":
            hessian = functional.hessian(values, epsilon)[free][:, free]
            direction = -np.asarray(spsolve(sparse.csc_matrix(hessian), grad))
            if not np.all(np.isfinite(direction)) or grad @ direction >= 0:
                logger.debug(f"Newton direction rejected at iteration {iteration}; using gradient step")
                direction = None
        if direction is None:
            if preconditioner is None:
                preconditioner = functional.lumped_diagonal()[free]
            direction = -grad / preconditioner

        slope = float(grad @ direction)
        step = 1.0 if config.method == "newton" else min(1.0, 2.0 * step_hint)
        trial = values.copy()
        accepted = False
        for _ in range(MAX_LINE_SEARCH_STEPS):
            trial[free] = values[free] + step * direction
            trial_energy = functional.total(trial, epsilon)
            if trial_energy <= energy + config.line_search_sufficient_decrease * step * slope:
                accepted = True
                break
            step *= config.line_search_shrink

        if not accepted:
            # no representable decrease left: stationary to working precision
            converged = abs(slope) <= STATIONARY_SLOPE * max(1.0, abs(energy))
            break

        values = trial
        energy = trial_energy
        step_hint = step
        grad = functional.gradient(values, epsilon)[free]
        stage.iterations = iteration + 1
        stage.energy_history.append(energy)
        logger.debug(f"eps={epsilon:g} iteration {iteration + 1}: energy={energy:.12g} step={step:g}")
    else:
        converged = float(np.linalg.norm(grad)) <= target

    stage.final_grad_norm = float(np.linalg.norm(grad))
    stage.converged = converged
    return values, stage


def _is_admissible(values: np.ndarray, plate0: np.ndarray, plate1: np.ndarray) -> bool:
    return bool(
        np.all(values >= 0.0) and np.all(values <= 1.0)
        and np.all(values[plate0] == 0.0) and np.all(values[plate1] == 1.0)
    )


def solve_condenser(
    mesh: SimplicialMesh,
    structure: ConformalStructure,
    condenser: Condenser,
    config: Optional[SolverConfig] = None,
    initial: Optional[np.ndarray] = None,
    functional: Optional[EnergyFunctional] = None,
) -> CapacityResult:
    """
    Capacity of a condenser: the n-energy of an admissible field minimizing the
    regularized energy along the epsilon schedule.

    Args:
        mesh: Mesh carrying the condenser.
        structure: Conformal structure.
        condenser: Plates fixed to 0 and 1.
        config: Solver settings; defaults come from Settings.
        initial: Optional warm start (clamped to [0, 1], plates imposed).
        functional: Optional precomputed energy functional on (mesh, structure).

    Returns:
        CapacityResult whose value is the exact energy of the returned field.
        Non-convergence is reported in the diagnostics, never raised.
    """
    config = config or SolverConfig.from_settings()
    if condenser.mesh is not mesh:
        raise InvalidArgumentError("condenser is defined on a different mesh")
    plate0, plate1 = condenser.plate0, condenser.plate1

    if plate0.size == 0 or plate1.size == 0:
        constant = 1.0 if plate0.size == 0 and plate1.size > 0 else 0.0
        logger.warning(f"Condenser has an empty plate; capacity is 0 (constant field {constant:g})")
        return CapacityResult(
            value=0.0,
            field=ScalarField.constant(mesh, constant),
            diagnostics=[],
            admissible=True,
        )

    functional = functional or EnergyFunctional(mesh, structure)
    fixed = np.zeros(mesh.n_vertices, dtype=bool)
    fixed[plate0] = True
    fixed[plate1] = True
    free = np.flatnonzero(~fixed)

    if initial is None:
        values = _initial_guess(mesh, plate0, plate1)
    else:
        values = np.clip(np.asarray(initial, dtype=float), 0.0, 1.0)
        if values.shape != (mesh.n_vertices,):
            raise InvalidArgumentError("initial field does not match the mesh")
        values[plate0] = 0.0
        values[plate1] = 1.0

    diagnostics = []
    for epsilon in config.epsilon_schedule:
        values, stage = _minimize_stage(functional, values, free, epsilon, config)
        np.clip(values, 0.0, 1.0, out=values)
        diagnostics.append(stage)
        if not stage.converged:
            logger.warning(
                f"Stage eps={epsilon:g} did not converge after {stage.iterations} iterations "
                f"(grad norm {stage.final_grad_norm:.3e}, initial {stage.initial_grad_norm:.3e})"
            )

    value = functional.total(values, 0.0)
    result = CapacityResult(
        value=value,
        field=ScalarField(mesh, values),
        diagnostics=diagnostics,
        admissible=_is_admissible(values, plate0, plate1),
    )
    logger.info(
        f"Condenser solved: value={value:.10g}, iterations={result.iterations}, "
        f"converged={result.converged}"
    )
    return result


# ===== Compact sets =====

def _resolve_nodes(mesh: SimplicialMesh, nodes: NodeSet) -> np.ndarray:
    if isinstance(nodes, str):
        return mesh.nodes(nodes)
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    if nodes.size and (nodes[0] < 0 or nodes[-1] >= mesh.n_vertices):
        raise InvalidArgumentError("node set references a vertex out of range")
    return nodes


def _compact_condenser(mesh: SimplicialMesh, nodes: np.ndarray) -> Condenser:
    touching = np.intersect1d(nodes, mesh.boundary_nodes)
    if touching.size:
        raise InvalidArgumentError(
            f"compact set touches the domain boundary at {touching.size} nodes"
        )
    return Condenser(mesh, mesh.boundary_nodes, nodes)


def _extend_by_zero(previous: Optional[CapacityResult], mesh: SimplicialMesh) -> Optional[np.ndarray]:
    """Zero extension of a witness from a prefix sub-mesh, None if the meshes are not nested that way."""
    if previous is None:
        return None
    old = previous.field.mesh
    count = old.n_vertices
    if count > mesh.n_vertices or not np.array_equal(mesh.vertices[:count], old.vertices):
        return None
    values = np.zeros(mesh.n_vertices)
    values[:count] = previous.field.nodal_values
    return values


def fit_log_decay(radii: Sequence[float], values: Sequence[float], n: int) -> Optional[DecayFit]:
    """Least-squares fit of c = b + a (log R)^(1-n); None when it is not identifiable."""
    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(radii) < 2 or np.any(radii <= 1.0):
        return None
    x = np.log(radii) ** (1 - n)
    amplitude, floor = np.polyfit(x, values, 1)
    residual = values - (floor + amplitude * x)
    return DecayFit(
        model="log_decay",
        amplitude=float(amplitude),
        floor=float(floor),
        shift=0.0,
        exponent=float(1 - n),
        rms_residual=float(np.sqrt(np.mean(residual ** 2))),
    )


def compact_capacity(
    meshes: Union[SimplicialMesh, Sequence[SimplicialMesh]],
    structure: ConformalStructure,
    compact: NodeSet,
    config: Optional[SolverConfig] = None,
) -> CompactCapacityReport:
    """
    Capacity of a compact set along an exhaustion.

    Each member is solved with plate1 = K and plate0 = all boundary nodes of
    the member. The witness of one member, extended by zero, warm-starts the
    next one.

    Args:
        meshes: One mesh or an increasing, nested exhaustion.
        structure: Conformal structure.
        compact: Tag name or node indices (shared across the exhaustion).
        config: Solver settings.

    Returns:
        CompactCapacityReport with the capacity sequence, the monotonicity
        check and the fit c ~ a (log R)^(1-n) + b.
    """
    config = config or SolverConfig.from_settings()
    if isinstance(meshes, SimplicialMesh):
        meshes = [meshes]
    if not meshes:
        raise InvalidArgumentError("compact_capacity needs at least one mesh")

    results: List[CapacityResult] = []
    radii: List[Optional[float]] = []
    previous = None
    for index, mesh in enumerate(meshes):
        nodes = _resolve_nodes(mesh, compact)
        condenser = _compact_condenser(mesh, nodes)
        result = solve_condenser(mesh, structure, condenser, config, initial=_extend_by_zero(previous, mesh))
        radius = mesh.domain.outer_radius() if mesh.domain is not None else None
        logger.info(f"Exhaustion member {index} (R={radius}): capacity {result.value:.10g}")
        results.append(result)
        radii.append(radius)
        previous = result

    values = [r.value for r in results]
    monotone = all(b <= a + config.tolerance_for(a, b) for a, b in zip(values, values[1:]))
    if not monotone:
        logger.warning(f"Capacity sequence is not monotone decreasing: {values}")

    fit = None
    if all(r is not None for r in radii):
        fit = fit_log_decay(radii, values, meshes[0].dimension)
    return CompactCapacityReport(
        results=results,
        radii=radii,
        monotone_decreasing=monotone,
        decay_fit=fit,
        extrapolated_limit=fit.floor if fit else None,
    )


def max_combine(f1: ScalarField, f2: ScalarField) -> ScalarField:
    """Nodal maximum of two fields on the same mesh."""
    same = f1.mesh is f2.mesh or (
        f1.mesh.n_vertices == f2.mesh.n_vertices
        and np.array_equal(f1.mesh.simplices, f2.mesh.simplices)
        and np.array_equal(f1.mesh.vertices, f2.mesh.vertices)
    )
    if not same:
        raise InvalidArgumentError("max_combine requires fields on the same mesh")
    return f1.with_values(np.maximum(f1.nodal_values, f2.nodal_values))


# ===== Point capacity =====

def minimum_resolvable_radius(mesh: SimplicialMesh, center: Sequence[float]) -> float:
    """Longest edge at the vertex nearest to center."""
    vertex = nearest_vertex(mesh, center)
    neighbours = mesh.adjacency[vertex].indices
    if neighbours.size == 0:
        raise InvalidArgumentError("center vertex has no incident edges")
    return float(np.linalg.norm(mesh.vertices[neighbours] - mesh.vertices[vertex], axis=1).max())


def point_capacity_decay(
    mesh: SimplicialMesh,
    structure: ConformalStructure,
    center: Sequence[float],
    radii: Sequence[float],
    outer_radius: float,
    config: Optional[SolverConfig] = None,
) -> PointDecayReport:
    """
    Capacities of the condensers (closed ball B(center, r), complement of B(center, R)).

    Args:
        mesh: Mesh containing B(center, outer_radius).
        structure: Conformal structure.
        center: Point whose capacity is probed.
        radii: Strictly decreasing inner radii.
        outer_radius: Radius R of the grounded sphere.
        config: Solver settings.

    Returns:
        PointDecayReport; fitted_exponent is the slope of log c against
        log log(R/r), close to 1 - n.

    Raises:
        InvalidArgumentError: If the radii are not decreasing, reach R, or fall
            below the minimum resolvable radius.
    """
    config = config or SolverConfig.from_settings()
    radii = [float(r) for r in radii]
    center = np.asarray(center, dtype=float)
    if not radii or any(b >= a for a, b in zip(radii, radii[1:])):
        raise InvalidArgumentError("radii must be strictly decreasing")
    if radii[0] >= outer_radius:
        raise InvalidArgumentError(f"largest radius {radii[0]} must be below outer_radius {outer_radius}")
    min_radius = minimum_resolvable_radius(mesh, center)
    if radii[-1] < min_radius:
        raise InvalidArgumentError(
            f"radius {radii[-1]:.6g} is below the minimum resolvable radius {min_radius:.6g}"
        )

    distance = np.linalg.norm(mesh.vertices - center, axis=1)
    plate0 = np.flatnonzero(distance >= outer_radius * (1 - 1e-9))
    functional = EnergyFunctional(mesh, structure)
    results = []
    for r in radii:
        plate1 = np.flatnonzero(ball_region(center, r)(mesh.vertices))
        result = solve_condenser(mesh, structure, Condenser(mesh, plate0, plate1), config, functional=functional)
        results.append(result)

    samples = [(r, res.value) for r, res in zip(radii, results)]
    values = [res.value for res in results]
    decreasing = all(b < a for a, b in zip(values, values[1:]))
    exponent = None
    if len(radii) >= 2 and all(v > 0 for v in values):
        log_log = np.log(np.log(outer_radius / np.asarray(radii)))
        exponent = float(np.polyfit(log_log, np.log(values), 1)[0])
    logger.info(f"Point capacity decay at {center.tolist()}: exponent {exponent}")
    return PointDecayReport(
        samples=samples,
        results=results,
        strictly_decreasing=decreasing,
        fitted_exponent=exponent,
        minimum_radius=min_radius,
    )


# ===== Property checks =====

def _match_nested(inner: SimplicialMesh, outer: SimplicialMesh) -> np.ndarray:
    """Outer index of every inner vertex; raises unless inner is a sub-mesh of outer."""
    if inner.dimension != outer.dimension:
        raise InvalidArgumentError("meshes have different dimensions")
    distance, index = cKDTree(outer.vertices).query(inner.vertices)
    scale = max(1.0, float(np.abs(outer.vertices).max()))
    if np.any(distance > 1e-9 * scale):
        raise InvalidArgumentError("meshes are not nested: inner vertices missing from the outer mesh")
    mapped = np.sort(index[inner.simplices], axis=1)
    stacked = np.vstack([np.sort(outer.simplices, axis=1), mapped])
    _, inverse = np.unique(stacked, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    if not np.all(np.isin(inverse[outer.n_simplices:], inverse[:outer.n_simplices])):
        raise InvalidArgumentError("meshes are not nested: an inner simplex is not an outer simplex")
    return index


def nested_domain_monotonicity_check(
    mesh_inner: SimplicialMesh,
    mesh_outer: SimplicialMesh,
    structure: ConformalStructure,
    condenser: Condenser,
    config: Optional[SolverConfig] = None,
    boundary_mode: Literal["free", "grounded"] = "free",
) -> MonotonicityReport:
    """
    Compare the capacity of the same condenser on nested domains N inside M.

    boundary_mode="free" leaves the rest of the boundary unconstrained;
    restricting an M-admissible field to N gives cap_N <= cap_M.
    boundary_mode="grounded" adds each domain's boundary to plate0;
    extending an N-admissible field by zero gives cap_M <= cap_N, which
    requires plate1 to stay off the boundary of N.
    """
    config = config or SolverConfig.from_settings()
    if condenser.mesh is not mesh_inner:
        raise InvalidArgumentError("condenser must be defined on the inner mesh")
    index = _match_nested(mesh_inner, mesh_outer)

    plate0_in, plate1_in = condenser.plate0, condenser.plate1
    plate0_out, plate1_out = index[plate0_in], index[plate1_in]
    if boundary_mode == "grounded":
        if np.intersect1d(plate1_in, mesh_inner.boundary_nodes).size:
            raise InvalidArgumentError("grounded mode requires plate1 off the inner boundary")
        plate0_in = np.union1d(plate0_in, mesh_inner.boundary_nodes)
        plate0_out = np.union1d(plate0_out, mesh_outer.boundary_nodes)
    elif boundary_mode != "free":
        raise InvalidArgumentError(f"unknown boundary_mode '{boundary_mode}'")

    inner = solve_condenser(mesh_inner, structure, Condenser(mesh_inner, plate0_in, plate1_in), config)
    outer = solve_condenser(mesh_outer, structure, Condenser(mesh_outer, plate0_out, plate1_out), config)
    tol = config.tolerance_for(inner.value, outer.value)
    if boundary_mode == "free":
        holds = inner.value <= outer.value + tol
    else:
        holds = outer.value <= inner.value + tol
    if not holds:
        logger.warning(
            f"Domain monotonicity ({boundary_mode}) fails: inner={inner.value:.10g}, outer={outer.value:.10g}"
        )
    return MonotonicityReport(
        cap_inner=inner.value,
        cap_outer=outer.value,
        holds=holds,
        boundary_mode=boundary_mode,
        tolerance=tol,
    )


def subadditivity_check(
    mesh: SimplicialMesh,
    structure: ConformalStructure,
    first: NodeSet,
    second: NodeSet,
    config: Optional[SolverConfig] = None,
    relative_tolerance: float = 0.05,
) -> SubadditivityReport:
    """cap(K1 u K2) against cap(K1) + cap(K2), certified by the max of the two witnesses."""
    config = config or SolverConfig.from_settings()
    k1 = _resolve_nodes(mesh, first)
    k2 = _resolve_nodes(mesh, second)
    functional = EnergyFunctional(mesh, structure)

    def solve(nodes):
        return solve_condenser(mesh, structure, _compact_condenser(mesh, nodes), config, functional=functional)

    r1, r2 = solve(k1), solve(k2)
    union = solve(np.union1d(k1, k2))
    combined = max_combine(r1.field, r2.field)
    report = SubadditivityReport(
        cap_first=r1.value,
        cap_second=r2.value,
        cap_union=union.value,
        combined_energy=functional.total(combined.nodal_values, 0.0),
        tolerance=relative_tolerance * (r1.value + r2.value),
    )
    if not report.holds:
        logger.warning(f"Subadditivity fails: {report.to_dict()}")
    return report


def monotonicity_in_set(
    mesh: SimplicialMesh,
    structure: ConformalStructure,
    small: NodeSet,
    large: NodeSet,
    config: Optional[SolverConfig] = None,
) -> SetMonotonicityReport:
    """cap(K_small) <= cap(K_large) for K_small inside K_large."""
    config = config or SolverConfig.from_settings()
    k_small = _resolve_nodes(mesh, small)
    k_large = _resolve_nodes(mesh, large)
    if np.setdiff1d(k_small, k_large).size:
        raise InvalidArgumentError("the smaller compact set is not contained in the larger one")
    functional = EnergyFunctional(mesh, structure)
    c_small = solve_condenser(mesh, structure, _compact_condenser(mesh, k_small), config, functional=functional)
    c_large = solve_condenser(mesh, structure, _compact_condenser(mesh, k_large), config, functional=functional)
    holds = c_small.value <= c_large.value + config.tolerance_for(c_small.value, c_large.value)
    return SetMonotonicityReport(cap_small=c_small.value, cap_large=c_large.value, holds=holds)

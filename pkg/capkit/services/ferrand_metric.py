"""
Ferrand pseudometric estimates and the Class I / Class II classifier.

mu(x, y) is estimated from above by the smallest continuum capacity found by a
seeded local search over edge paths joining x and y.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.optimize import least_squares
from scipy.sparse.csgraph import dijkstra

from capkit.exceptions import InvalidArgumentError
from capkit.models.schemas import SolverConfig
from capkit.services.capacity_solver import (
    CapacityResult,
    Condenser,
    DecayFit,
    compact_capacity,
    minimum_resolvable_radius,
    solve_condenser,
)
from capkit.services.conformal_energy import ConformalStructure, EnergyFunctional
from capkit.services.mesh_builder import SimplicialMesh, nearest_vertex

logger = logging.getLogger(__name__)

ACCEPTANCE_DECREASE = 1e-12
CLASS_I_FLOOR_FRACTION = 0.10
CLASS_II_STABILITY = 0.05

Verdict = Literal["ClassI_evidence", "ClassII_evidence", "inconclusive"]
MOVES = ("insert", "delete", "relocate")


@dataclass(frozen=True, eq=False)
class PathContinuum:
    """Edge path of mesh vertices; a single node is the degenerate continuum {x}."""
    mesh: SimplicialMesh
    node_sequence: Tuple[int, ...]

    def __post_init__(self):
        sequence = [int(v) for v in self.node_sequence]
        if not sequence:
            raise InvalidArgumentError("a path continuum needs at least one node")
        collapsed = [sequence[0]] + [b for a, b in zip(sequence, sequence[1:]) if b != a]
        nodes = np.asarray(collapsed, dtype=np.int64)
        if nodes.min() < 0 or nodes.max() >= self.mesh.n_vertices:
            raise InvalidArgumentError("path references a vertex out of range")
        if len(nodes) > 1:
            linked = np.asarray(self.mesh.adjacency[nodes[:-1], nodes[1:]]).ravel()
            if np.any(linked == 0):
                raise InvalidArgumentError("consecutive path nodes must share a mesh edge")
        object.__setattr__(self, "node_sequence", tuple(collapsed))

    @property
    def endpoint_a(self) -> int:
        return self.node_sequence[0]

    @property
    def endpoint_b(self) -> int:
        return self.node_sequence[-1]

    @property
    def nodes(self) -> np.ndarray:
        return np.unique(np.asarray(self.node_sequence, dtype=np.int64))

    def reversed(self) -> "PathContinuum":
        return PathContinuum(self.mesh, tuple(reversed(self.node_sequence)))

    def concatenate(self, other: "PathContinuum") -> "PathContinuum":
        """Join two paths sharing the junction node self.endpoint_b == other.endpoint_a."""
        if other.mesh is not self.mesh:
            raise InvalidArgumentError("paths live on different meshes")
        if self.endpoint_b != other.endpoint_a:
            raise InvalidArgumentError("paths do not share the junction node")
        return PathContinuum(self.mesh, self.node_sequence + other.node_sequence[1:])

    def to_list(self) -> List[int]:
        return list(self.node_sequence)


@dataclass
class SearchDiagnostics:
    proposals: int = 0
    accepted: int = 0
    rejected_invalid: int = 0
    seed: Optional[int] = None
    accepted_values: List[float] = field(default_factory=list)
    budget_exhausted: bool = False
    stalled: bool = False
    exhaustion_values: List[Optional[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "proposals": self.proposals,
            "accepted": self.accepted,
            "rejected_invalid": self.rejected_invalid,
            "seed": self.seed,
            "accepted_values": list(self.accepted_values),
            "budget_exhausted": self.budget_exhausted,
            "stalled": self.stalled,
            "exhaustion_values": list(self.exhaustion_values),
        }


@dataclass
class MuEstimate:
    value: float
    witness: PathContinuum
    capacity_result: CapacityResult
    search_diagnostics: SearchDiagnostics

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "witness": self.witness.to_list(),
            "capacity_result": self.capacity_result.to_dict(),
            "search_diagnostics": self.search_diagnostics.to_dict(),
        }


@dataclass
class TriangleReport:
    mu_xy: MuEstimate
    mu_yz: MuEstimate
    mu_xz: MuEstimate
    tolerance: float

    @property
    def holds(self) -> bool:
        return self.mu_xz.value <= self.mu_xy.value + self.mu_yz.value + self.tolerance

    def to_dict(self) -> dict:
        return {
            "mu_xy": self.mu_xy.to_dict(),
            "mu_yz": self.mu_yz.to_dict(),
            "mu_xz": self.mu_xz.to_dict(),
            "tolerance": self.tolerance,
            "holds": self.holds,
        }


@dataclass
class ClassificationReport:
    verdict: Verdict
    capacity_sequence: List[Tuple[float, float]]
    decay_fit: Optional[DecayFit]
    floor_fit: Optional[DecayFit]
    floor_estimate: Optional[float]
    results: List[CapacityResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "capacity_sequence": [[r, c] for r, c in self.capacity_sequence],
            "decay_fit": self.decay_fit.to_dict() if self.decay_fit else None,
            "floor_fit": self.floor_fit.to_dict() if self.floor_fit else None,
            "floor_estimate": self.floor_estimate,
        }


@dataclass
class ContinuityReport:
    radii: List[float]
    sup_values: List[float]
    pairs: List[List[Tuple[int, int]]]
    strictly_decreasing: bool

    def to_dict(self) -> dict:
        return {
            "radii": self.radii,
            "sup_values": self.sup_values,
            "pairs": [[list(p) for p in group] for group in self.pairs],
            "strictly_decreasing": self.strictly_decreasing,
        }


# ===== Paths =====

def shortest_edge_path(
    mesh: SimplicialMesh, a: int, b: int, avoid: Optional[Sequence[int]] = None
) -> PathContinuum:
    """Shortest Euclidean edge path from a to b through vertices not in avoid."""
    if a == b:
        return PathContinuum(mesh, (a,))
    edges = mesh.edges
    keep = np.ones(len(edges), dtype=bool)
    if avoid is not None and len(avoid):
        blocked = np.zeros(mesh.n_vertices, dtype=bool)
        blocked[np.asarray(avoid, dtype=np.int64)] = True
        blocked[[a, b]] = False
        keep = ~(blocked[edges[:, 0]] | blocked[edges[:, 1]])
    e = edges[keep]
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)

    graph = sparse.csr_matrix((lengths, (e[:, 0], e[:, 1])), shape=(mesh.n_vertices, mesh.n_vertices))
    _, predecessors = dijkstra(graph, directed=False, indices=a, return_predecessors=True)
    if predecessors[b] < 0:
        raise InvalidArgumentError(f"no edge path joins vertices {a} and {b}")
    sequence = [b]
    while sequence[-1] != a:
        sequence.append(int(predecessors[sequence[-1]]))
    return PathContinuum(mesh, tuple(reversed(sequence)))


def _common_neighbours(mesh: SimplicialMesh, u: int, v: int, forbidden: np.ndarray) -> np.ndarray:
    adj = mesh.adjacency
    shared = np.intersect1d(adj[u].indices, adj[v].indices)
    return shared[~forbidden[shared]]


def _propose(
    mesh: SimplicialMesh,
    sequence: Tuple[int, ...],
    move: str,
    rng: np.random.Generator,
    forbidden: np.ndarray,
) -> Optional[Tuple[int, ...]]:
    """One local move keeping the endpoints and edge connectivity; None if the move is impossible."""
    seq = list(sequence)
    if move == "insert":
        if len(seq) < 2:
            return None
        i = int(rng.integers(len(seq) - 1))
        options = _common_neighbours(mesh, seq[i], seq[i + 1], forbidden)
        if options.size == 0:
            return None
        return tuple(seq[: i + 1] + [int(options[rng.integers(options.size)])] + seq[i + 1:])

    if len(seq) < 3:
        return None
    i = int(rng.integers(1, len(seq) - 1))
    before, after = seq[i - 1], seq[i + 1]
    if move == "delete":
        if before != after and mesh.adjacency[before, after] == 0:
            return None
        return tuple(seq[:i] + seq[i + 1:])

    options = _common_neighbours(mesh, before, after, forbidden)
    options = options[options != seq[i]]
    if options.size == 0:
        return None
    return tuple(seq[:i] + [int(options[rng.integers(options.size)])] + seq[i + 1:])


def _stall_round(path: PathContinuum) -> int:
    """Consecutive failed proposals after which the search stops."""
    return len(MOVES) * len(path.node_sequence)


# ===== Capacities of continua =====

def continuum_capacity(
    mesh: SimplicialMesh,
    structure: ConformalStructure,
    path: PathContinuum,
    outer_plate: Optional[Sequence[int]] = None,
    config: Optional[SolverConfig] = None,
    initial: Optional[np.ndarray] = None,
    functional: Optional[EnergyFunctional] = None,
) -> CapacityResult:
    """Capacity of the path node set against outer_plate (default: the boundary)."""
    if path.mesh is not mesh:
        raise InvalidArgumentError("path is defined on a different mesh")
    plate0 = mesh.boundary_nodes if outer_plate is None else np.asarray(outer_plate, dtype=np.int64)
    return solve_condenser(mesh, structure, Condenser(mesh, plate0, path.nodes), config, initial, functional)


def _as_mesh_list(domain: Union[SimplicialMesh, Sequence[SimplicialMesh]]) -> List[SimplicialMesh]:
    meshes = [domain] if isinstance(domain, SimplicialMesh) else list(domain)
    if not meshes:
        raise InvalidArgumentError("estimate_mu needs a mesh or a non-empty exhaustion")
    return meshes


def estimate_mu(
    domain: Union[SimplicialMesh, Sequence[SimplicialMesh]],
    structure: ConformalStructure,
    x: int,
    y: int,
    config: Optional[SolverConfig] = None,
    search_budget: int = 10,
    seed: int = 0,
    outer_plate: Optional[Sequence[int]] = None,
    initial_paths: Sequence[PathContinuum] = (),
) -> MuEstimate:
    """
    Upper estimate of mu(x, y) by local search over edge paths.

    The search only depends on the unordered pair {x, y}: the random stream
    is derived from (seed, min, max) and paths run from min to max, so
    swapping x and y gives the same value. The witness is reported from x
    to y.

    Args:
        domain: Mesh, or nested exhaustion (search on the largest member).
        structure: Conformal structure.
        x: First vertex.
        y: Second vertex.
        config: Solver settings.
        search_budget: Maximum number of proposals. The search stops early
            once a full round of proposals brings no improvement.
        seed: Seed of the search.
        outer_plate: Zero plate; defaults to the boundary nodes.
        initial_paths: Extra starting paths joining x and y.

    Returns:
        MuEstimate with the best witness found.
    """
    config = config or SolverConfig.from_settings()
    meshes = _as_mesh_list(domain)
    mesh = meshes[-1]
    for v in (x, y):
        if not 0 <= v < meshes[0].n_vertices:
            raise InvalidArgumentError(f"vertex {v} is not in the innermost domain")
    a, b = (int(x), int(y)) if x <= y else (int(y), int(x))
    rng = np.random.default_rng([seed, a, b])
    plate0 = mesh.boundary_nodes if outer_plate is None else np.unique(np.asarray(outer_plate, dtype=np.int64))
    if np.isin([a, b], plate0).any():
        raise InvalidArgumentError("endpoints must not lie on the outer plate")
    forbidden = np.zeros(mesh.n_vertices, dtype=bool)
    forbidden[plate0] = True

    functional = EnergyFunctional(mesh, structure)

    def evaluate(sequence, initial=None):
        path = PathContinuum(mesh, sequence)
        return path, continuum_capacity(mesh, structure, path, plate0, config, initial, functional)

    starts = [shortest_edge_path(mesh, a, b, avoid=plate0).node_sequence]
    for seeded in initial_paths:
        if {seeded.endpoint_a, seeded.endpoint_b} != {a, b}:
            raise InvalidArgumentError("initial path does not join x and y")
        oriented = seeded if seeded.endpoint_a == a else seeded.reversed()
        if np.any(forbidden[oriented.nodes]):
            raise InvalidArgumentError("initial path touches the outer plate")
        starts.append(oriented.node_sequence)

    best_path, best = None, None
    for sequence in starts:
        path, result = evaluate(sequence)
        if best is None or result.value < best.value:
            best_path, best = path, result

    diagnostics = SearchDiagnostics(seed=seed, accepted_values=[best.value])
    if a != b:
        failures = 0
        for _ in range(search_budget):
            diagnostics.proposals += 1
            failures += 1
            move = MOVES[int(rng.integers(len(MOVES)))]
            candidate = _propose(mesh, best_path.node_sequence, move, rng, forbidden)
            if candidate is None:
                diagnostics.rejected_invalid += 1
            else:
                path, result = evaluate(candidate, initial=best.field.nodal_values)
                if result.value <= best.value - ACCEPTANCE_DECREASE:
                    best_path, best = path, result
                    diagnostics.accepted += 1
                    diagnostics.accepted_values.append(result.value)
                    failures = 0
            # one round: every move tried about once per path node
            if failures >= _stall_round(best_path):
                diagnostics.stalled = True
                logger.debug(f"mu({a},{b}) search stalled after {diagnostics.proposals} proposals")
                break
        diagnostics.budget_exhausted = search_budget > 0 and not diagnostics.stalled
        if diagnostics.budget_exhausted:
            logger.warning(
                f"mu({a},{b}) search budget of {search_budget} exhausted; "
                f"returning best value {best.value:.10g}"
            )

    if len(meshes) > 1:
        for member in meshes:
            if best_path.nodes.max() >= member.n_vertices or np.isin(best_path.nodes, member.boundary_nodes).any():
                diagnostics.exhaustion_values.append(None)
                continue
            member_path = PathContinuum(member, best_path.node_sequence)
            diagnostics.exhaustion_values.append(continuum_capacity(member, structure, member_path, config=config).value)

    witness = best_path if x <= y else best_path.reversed()
    logger.info(f"mu({x},{y}) <= {best.value:.10g} ({diagnostics.accepted} accepted moves)")
    return MuEstimate(value=best.value, witness=witness, capacity_result=best, search_diagnostics=diagnostics)


def triangle_check(
    mesh: SimplicialMesh,
    structure: ConformalStructure,
    x: int,
    y: int,
    z: int,
    config: Optional[SolverConfig] = None,
    seed: int = 0,
    search_budget: int = 10,
) -> TriangleReport:
    """Estimate mu on the three pairs, seeding (x, z) with the concatenated x-y-z witness."""
    config = config or SolverConfig.from_settings()
    mu_xy = estimate_mu(mesh, structure, x, y, config, search_budget, seed)
    mu_yz = estimate_mu(mesh, structure, y, z, config, search_budget, seed)
    seeds = []
    if x != z:
        seeds.append(mu_xy.witness.concatenate(mu_yz.witness))
    mu_xz = estimate_mu(mesh, structure, x, z, config, search_budget, seed, initial_paths=seeds)
    tolerance = 2.0 * config.tolerance_for(mu_xy.value, mu_yz.value, mu_xz.value)
    report = TriangleReport(mu_xy=mu_xy, mu_yz=mu_yz, mu_xz=mu_xz, tolerance=tolerance)
    if not report.holds:
        logger.warning(
            f"Triangle inequality fails for ({x},{y},{z}): "
            f"{mu_xz.value:.10g} > {mu_xy.value:.10g} + {mu_yz.value:.10g}"
        )
    return report


# ===== Classification =====

def _fit_decay(log_r: np.ndarray, values: np.ndarray, n: int) -> Optional[DecayFit]:
    """c = a (log R + beta)^(1-n), linear in log R after c -> c^(-1/(n-1))."""
    if np.any(values <= 0):
        return None
    slope, intercept = np.polyfit(log_r, values ** (-1.0 / (n - 1)), 1)
    if slope <= 0:
        return None
    shift = intercept / slope
    if np.any(log_r + shift <= 0):
        return None
    amplitude = slope ** (1 - n)
    residual = values - amplitude * (log_r + shift) ** (1 - n)
    return DecayFit(
        model="decay",
        amplitude=float(amplitude),
        floor=0.0,
        shift=float(shift),
        exponent=float(1 - n),
        rms_residual=float(np.sqrt(np.mean(residual ** 2))),
    )


def _fit_floor(log_r: np.ndarray, values: np.ndarray, n: int, start: Optional[DecayFit]) -> Optional[DecayFit]:
    """c = b + a (log R + beta)^(1-n) with a, b >= 0 by bounded least squares."""
    min_shift = -float(log_r.min()) + 1e-3
    if start is not None:
        x0 = [start.amplitude, 0.5 * float(values[-1]), max(start.shift, min_shift + 1e-3)]
    else:
        x0 = [float(values[0]) * (log_r[0] - min_shift + 1.0) ** (n - 1), 0.5 * float(values[-1]), 1.0]
    x0[2] = max(x0[2], min_shift + 1e-3)

    def residuals(params):
        a, b, beta = params
        return b + a * (log_r + beta) ** (1 - n) - values

    lower = [0.0, 0.0, min_shift]
    upper = [np.inf, float(values.max()), np.inf]
    x0[1] = min(x0[1], upper[1])
    try:
        solution = least_squares(residuals, x0, bounds=(lower, upper), x_scale="jac", max_nfev=2000)
    except ValueError as e:
        logger.warning(f"Floor model fit failed: {e}")
        return None
    a, b, beta = solution.x
    return DecayFit(
        model="floor",
        amplitude=float(a),
        floor=float(b),
        shift=float(beta),
        exponent=float(1 - n),
        rms_residual=float(np.sqrt(np.mean(solution.fun ** 2))),
    )


def classify(
    meshes: Sequence[SimplicialMesh],
    structure: ConformalStructure,
    probe: Union[PathContinuum, str, Sequence[int]],
    config: Optional[SolverConfig] = None,
    positivity_floor: float = 1e-3,
) -> ClassificationReport:
    """
    Class I / Class II evidence from the capacity of a probe continuum along an exhaustion.

    Each member grounds all of its boundary, so an excised ball's boundary is
    a zero plate too. ClassI_evidence needs a strictly decreasing sequence
    whose fitted floor is at most 10% of the first value; ClassII_evidence
    needs the last two values within 5%, above positivity_floor, with a floor
    above 10% of the first value.
    """
    config = config or SolverConfig.from_settings()
    meshes = list(meshes)
    if len(meshes) < 3:
        raise InvalidArgumentError("classification needs at least 3 exhaustion stages")
    radii = [m.domain.outer_radius() if m.domain is not None else None for m in meshes]
    if any(r is None for r in radii):
        raise InvalidArgumentError("exhaustion members must carry their domain radius")

    nodes = probe.nodes if isinstance(probe, PathContinuum) else probe
    report = compact_capacity(meshes, structure, nodes, config)
    values = np.asarray(report.values)
    n = meshes[0].dimension
    log_r = np.log(np.asarray(radii, dtype=float))

    decay = _fit_decay(log_r, values, n) if np.all(log_r > 0) else None
    floor = _fit_floor(log_r, values, n, decay)
    floor_estimate = floor.floor if floor else None

    first, last, previous = values[0], values[-1], values[-2]
    decreasing = bool(np.all(np.diff(values) < 0))
    small_floor = floor_estimate is not None and floor_estimate <= CLASS_I_FLOOR_FRACTION * first
    stable = abs(last - previous) <= CLASS_II_STABILITY * abs(previous)

    if decreasing and small_floor:
        verdict = "ClassI_evidence"
    elif stable and last > positivity_floor and floor_estimate is not None and not small_floor:
        verdict = "ClassII_evidence"
    else:
        verdict = "inconclusive"
    logger.info(f"Classification: {verdict} (values {values.tolist()}, floor {floor_estimate})")

    return ClassificationReport(
        verdict=verdict,
        capacity_sequence=[(float(r), float(c)) for r, c in zip(radii, values)],
        decay_fit=decay,
        floor_fit=floor,
        floor_estimate=floor_estimate,
        results=report.results,
    )


# ===== Continuity at the diagonal =====

def _diametral_pair(points: np.ndarray, candidates: np.ndarray, center: np.ndarray) -> Tuple[int, int]:
    first = candidates[np.argmax(np.linalg.norm(points[candidates] - center, axis=1))]
    second = candidates[np.argmax(np.linalg.norm(points[candidates] - points[first], axis=1))]
    return int(first), int(second)


def mu_continuity_probe(
    mesh: SimplicialMesh,
    structure: ConformalStructure,
    z: Union[int, Sequence[float]],
    radii: Sequence[float],
    config: Optional[SolverConfig] = None,
    seed: int = 0,
    pairs_per_radius: int = 2,
    search_budget: int = 0,
) -> ContinuityReport:
    """
    Sampled sup of mu over pairs in B(z, r) for each radius.

    Each radius uses the diametral vertex pair of the ball plus
    pairs_per_radius seeded random pairs.
    """
    config = config or SolverConfig.from_settings()
    center_index = int(z) if np.isscalar(z) else nearest_vertex(mesh, z)
    center = mesh.vertices[center_index]
    radii = [float(r) for r in radii]
    if not radii or any(b >= a for a, b in zip(radii, radii[1:])):
        raise InvalidArgumentError("radii must be strictly decreasing")
    resolution = minimum_resolvable_radius(mesh, center)
    if radii[-1] < resolution:
        raise InvalidArgumentError(
            f"radius {radii[-1]:.6g} is below the minimum resolvable radius {resolution:.6g}"
        )

    distance = np.linalg.norm(mesh.vertices - center, axis=1)
    interior = np.ones(mesh.n_vertices, dtype=bool)
    interior[mesh.boundary_nodes] = False

    sup_values, all_pairs = [], []
    for index, r in enumerate(radii):
        candidates = np.flatnonzero((distance <= r * (1 + 1e-9)) & interior)
        if candidates.size == 0:
            raise InvalidArgumentError(f"no interior vertices within radius {r:g} of the base point")
        rng = np.random.default_rng([seed, center_index, index])
        pairs = [_diametral_pair(mesh.vertices, candidates, center)]
        for _ in range(pairs_per_radius):
            x, y = rng.choice(candidates, size=2, replace=candidates.size < 2)
            pairs.append((int(x), int(y)))
        values = [
            estimate_mu(mesh, structure, x, y, config, search_budget, seed).value for x, y in pairs
        ]
        sup_values.append(max(values))
        all_pairs.append(pairs)
        logger.info(f"Continuity probe r={r:g}: sup mu = {sup_values[-1]:.10g}")

    decreasing = all(b < a for a, b in zip(sup_values, sup_values[1:]))
    return ContinuityReport(radii=radii, sup_values=sup_values, pairs=all_pairs, strictly_decreasing=decreasing)

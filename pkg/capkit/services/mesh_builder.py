"""
Simplicial meshes of single-chart domains.

Builds conforming P1 meshes of balls, annuli, boxes and boxes minus a ball,
refines them by edge-midpoint subdivision, carries named vertex regions and
cuts nested exhaustions out of one layered mesh.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from capkit.exceptions import InvalidArgumentError, MeshGenerationError
from capkit.models.schemas import DomainSpec, RegionSpec
from capkit.utils.atomic_io import atomic_write_text

logger = logging.getLogger(__name__)

REGION_TOLERANCE = 1e-9
BOUNDARY_TAG = "boundary"

Predicate = Callable[[np.ndarray], np.ndarray]

# local edge order used by refinement: I..III in 2D, I..VI in 3D
_REFINE_EDGES = {
    2: [(0, 1), (1, 2), (0, 2)],
    3: [(0, 1), (1, 2), (0, 2), (0, 3), (1, 3), (2, 3)],
}

# children of a triangle, in terms of [v0, v1, v2, m01, m12, m02]
_TRIANGLE_CHILDREN = np.array([[0, 3, 5], [1, 4, 3], [2, 5, 4], [3, 4, 5]])

# corner children of a tetrahedron, in terms of [v0..v3, I..VI]
_TET_CORNERS = np.array([[0, 4, 6, 7], [1, 4, 5, 8], [2, 5, 6, 9], [3, 7, 8, 9]])

# octahedron splits: diagonal (two midpoints) and the equator cycle around it
_OCTAHEDRON_SPLITS = [
    (0, 5, (1, 2, 3, 4)),
    (1, 3, (0, 2, 5, 4)),
    (2, 4, (0, 1, 5, 3)),
]

# staircase split of a prism over a sorted facet: (layer, corner) per vertex
_PRISM_SPLITS = {
    2: [((0, 0), (0, 1), (1, 1)), ((0, 0), (1, 0), (1, 1))],
    3: [
        ((0, 0), (0, 1), (0, 2), (1, 2)),
        ((0, 0), (0, 1), (1, 1), (1, 2)),
        ((0, 0), (1, 0), (1, 1), (1, 2)),
    ],
}


def _frozen(values, dtype) -> np.ndarray:
    if isinstance(values, np.ndarray) and values.dtype == dtype and not values.flags.writeable:
        return values
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """
    Conforming simplicial mesh with positively oriented simplices.

    Arrays are stored read-only. Derived geometry (volumes, basis gradients,
    edges, adjacency) is computed lazily and cached on the instance.
    """
    vertices: np.ndarray
    simplices: np.ndarray
    boundary_nodes: np.ndarray
    region_tags: Dict[str, np.ndarray] = field(default_factory=dict)
    cell_zones: Optional[np.ndarray] = None
    domain: Optional[DomainSpec] = None

    def __post_init__(self):
        vertices = _frozen(self.vertices, np.float64)
        simplices = _frozen(self.simplices, np.int64)
        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise InvalidArgumentError("vertices must be a (V, n) array with n in {2, 3}")
        n = vertices.shape[1]
        if simplices.ndim != 2 or simplices.shape[1] != n + 1:
            raise InvalidArgumentError(f"simplices must be an (E, {n + 1}) array")
        if simplices.size and (simplices.min() < 0 or simplices.max() >= len(vertices)):
            raise InvalidArgumentError("simplex vertex index out of range")

        zones = np.zeros(len(simplices), dtype=np.int64) if self.cell_zones is None else self.cell_zones
        zones = _frozen(zones, np.int64)
        if zones.shape != (len(simplices),):
            raise InvalidArgumentError("cell_zones must hold one zone per simplex")

        boundary = _frozen(np.unique(np.asarray(self.boundary_nodes, dtype=np.int64)), np.int64)
        tags = {}
        for tag, nodes in self.region_tags.items():
            nodes = np.unique(np.asarray(nodes, dtype=np.int64))
            if nodes.size and (nodes[0] < 0 or nodes[-1] >= len(vertices)):
                raise InvalidArgumentError(f"region '{tag}' references a vertex out of range")
            tags[tag] = _frozen(nodes, np.int64)

        signed = _signed_volumes(vertices, simplices)
        bad = int(np.count_nonzero(signed <= 0))
        if bad:
            raise MeshGenerationError(f"{bad} simplices have non-positive volume")

        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "simplices", simplices)
        object.__setattr__(self, "boundary_nodes", boundary)
        object.__setattr__(self, "region_tags", tags)
        object.__setattr__(self, "cell_zones", zones)

    @property
    def dimension(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_simplices(self) -> int:
        return len(self.simplices)

    @cached_property
    def volumes(self) -> np.ndarray:
        return _frozen(_signed_volumes(self.vertices, self.simplices), np.float64)

    @cached_property
    def centroids(self) -> np.ndarray:
        return _frozen(self.vertices[self.simplices].mean(axis=1), np.float64)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """(E, n+1, n) gradients of the barycentric hat functions on each simplex."""
        jac = self.vertices[self.simplices[:, 1:]] - self.vertices[self.simplices[:, :1]]
        inv_t = np.swapaxes(np.linalg.inv(jac), 1, 2)
        grads = np.concatenate([-inv_t.sum(axis=1, keepdims=True), inv_t], axis=1)
        return _frozen(grads, np.float64)

    @cached_property
    def edges(self) -> np.ndarray:
        pairs = list(itertools.combinations(range(self.dimension + 1), 2))
        edges, _ = _edge_table(self.simplices, pairs)
        return _frozen(edges, np.int64)

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n_vertices, self.n_vertices))

    @cached_property
    def boundary_facets(self) -> np.ndarray:
        return _frozen(_boundary_facets(self.simplices), np.int64)

    def nodes(self, tag: str) -> np.ndarray:
        """Vertex indices of a region tag; 'boundary' names the boundary nodes."""
        if tag == BOUNDARY_TAG:
            return self.boundary_nodes
        if tag not in self.region_tags:
            raise InvalidArgumentError(f"unknown region tag '{tag}'")
        return self.region_tags[tag]

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "n_vertices": self.n_vertices,
            "n_simplices": self.n_simplices,
            "mesh_size": mesh_size(self),
            "total_volume": total_volume(self),
            "regions": {tag: int(len(nodes)) for tag, nodes in sorted(self.region_tags.items())},
        }


# ===== Geometry helpers =====

def _signed_volumes(vertices: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    n = vertices.shape[1]
    if len(simplices) == 0:
        return np.zeros(0)
    jac = vertices[simplices[:, 1:]] - vertices[simplices[:, :1]]
    return np.linalg.det(jac) / math.factorial(n)


def _orient(vertices: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Swap the first two vertices of negatively oriented simplices."""
    simplices = np.array(simplices, dtype=np.int64, copy=True)
    flip = _signed_volumes(vertices, simplices) < 0
    simplices[flip, 0], simplices[flip, 1] = simplices[flip, 1], simplices[flip, 0].copy()
    return simplices


def _require_positive(vertices: np.ndarray, simplices: np.ndarray, stage: str):
    signed = _signed_volumes(vertices, simplices)
    bad = int(np.count_nonzero(signed <= 0))
    if bad:
        raise MeshGenerationError(
            f"{stage} produced {bad} inverted or degenerate elements; "
            f"decrease target_edge_length"
        )


def _facets(simplices: np.ndarray) -> np.ndarray:
    k = simplices.shape[1]
    faces = np.concatenate([np.delete(simplices, i, axis=1) for i in range(k)])
    return np.sort(faces, axis=1)


def _boundary_facets(simplices: np.ndarray) -> np.ndarray:
    faces, counts = np.unique(_facets(simplices), axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshGenerationError("mesh is not conforming: a facet is shared by more than two simplices")
    return faces[counts == 1]


def _boundary_nodes(simplices: np.ndarray) -> np.ndarray:
    return np.unique(_boundary_facets(simplices))


def _edge_table(simplices: np.ndarray, pairs) -> Tuple[np.ndarray, np.ndarray]:
    local = np.stack([np.sort(simplices[:, list(p)], axis=1) for p in pairs], axis=1)
    edges, inverse = np.unique(local.reshape(-1, 2), axis=0, return_inverse=True)
    return edges, np.asarray(inverse).reshape(len(simplices), len(pairs))


def _unit(points: np.ndarray) -> np.ndarray:
    return points / np.linalg.norm(points, axis=1, keepdims=True)


def _concentric(cube: np.ndarray) -> np.ndarray:
    """Map [-1,1]^n onto the unit ball, sending the cube sphere of radius t to the sphere of radius t."""
    inf_norm = np.abs(cube).max(axis=1)
    two_norm = np.linalg.norm(cube, axis=1)
    factor = np.divide(inf_norm, two_norm, out=np.zeros_like(inf_norm), where=two_norm > 0)
    return cube * factor[:, None]


# ===== Grids and extrusion =====

def _kuhn_multi_indices(counts: Sequence[int]) -> np.ndarray:
    """(E, n+1, n) grid multi-indices of the Kuhn simplices of a tensor grid."""
    n = len(counts)
    corners = np.stack(
        np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"), axis=-1
    ).reshape(-1, n)
    blocks = []
    for perm in itertools.permutations(range(n)):
        path = [corners]
        step = corners
        for axis in perm:
            step = step.copy()
            step[:, axis] += 1
            path.append(step)
        blocks.append(np.stack(path, axis=1))
    return np.concatenate(blocks)


def _grid_mesh(axes: Sequence[np.ndarray], symmetric: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Kuhn triangulation of the tensor grid spanned by axes.

    With symmetric=True each axis has an even number of cells and the
    triangulation of the positive orthant is reflected into every other
    orthant, so the grid diagonals |x_i| = |x_j| are unions of faces.
    """
    n = len(axes)
    counts = [len(a) - 1 for a in axes]
    if symmetric:
        half = np.array([c // 2 for c in counts])
        local = _kuhn_multi_indices(half)
        multi = np.concatenate([
            half + local * np.array(signs)
            for signs in itertools.product((1, -1), repeat=n)
        ])
    else:
        multi = _kuhn_multi_indices(counts)
    shape = tuple(len(a) for a in axes)
    simplices = np.ravel_multi_index(tuple(multi[..., i] for i in range(n)), shape)
    vertices = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    return vertices, _orient(vertices, simplices)


def _cells_for_arc(radius: float, h: float) -> int:
    """Even number of cells per cube side giving arcs of about h on a sphere of this radius."""
    m = max(2, math.ceil(math.pi * radius / (2.0 * h) - 1e-9))
    return m + (m % 2)


def _equiangular_cube(m: int, n: int) -> Tuple[np.ndarray, np.ndarray]:
    s = np.linspace(-1.0, 1.0, m + 1)
    axis = np.tan(np.pi / 4.0 * s)
    axis[0], axis[-1], axis[m // 2] = -1.0, 1.0, 0.0
    return _grid_mesh([axis] * n, symmetric=True)


def _layer_radii(
    breakpoints: Sequence[float], h: float, growth_ratio: Optional[float]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Radii of the extruded layers hitting every breakpoint exactly.

    Returns the radii (first entry = breakpoints[0]) and, for each layer, the
    index of the breakpoint interval it belongs to.
    """
    radii = [float(breakpoints[0])]
    intervals = []
    for index, (lo, hi) in enumerate(zip(breakpoints, breakpoints[1:])):
        if growth_ratio is not None:
            k = max(1, math.ceil(math.log(hi / lo) / math.log(growth_ratio) - 1e-9))
            segment = lo * (hi / lo) ** (np.arange(1, k + 1) / k)
        else:
            k = max(1, math.ceil((hi - lo) / h - 1e-9))
            segment = lo + (hi - lo) * np.arange(1, k + 1) / k
        segment[-1] = hi
        radii.extend(segment.tolist())
        intervals.extend([index] * k)
    return np.array(radii), np.array(intervals, dtype=np.int64)


def _extrude(
    facets: np.ndarray,
    surface: np.ndarray,
    directions: np.ndarray,
    first_layer_ids: np.ndarray,
    layers: List[np.ndarray],
    offset: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Extrude a closed surface through the given layers of points.

    facets index the vertices listed in surface; directions are their outward
    unit directions (used for orientation). Layer k >= 1 gets ids
    offset + (k-1)*S + position. Each prism is split by the staircase rule on
    surface positions, so neighbouring prisms agree on shared quad faces.
    Returns new vertices, simplices and the layer index of each simplex.
    """
    n = directions.shape[1]
    count = len(surface)
    local = np.sort(np.searchsorted(surface, facets), axis=1)
    splits = _PRISM_SPLITS[n]

    # orientation is fixed on straight reference prisms and reused for every layer
    reference = np.vstack([directions, 2.0 * directions])
    ref_layers = (local, count + local)
    flips = []
    for split in splits:
        ref = np.stack([ref_layers[level][:, corner] for level, corner in split], axis=1)
        flips.append(_signed_volumes(reference, ref) < 0)

    blocks, layer_index = [], []
    for k in range(len(layers)):
        bottom = first_layer_ids[local] if k == 0 else offset + (k - 1) * count + local
        top = offset + k * count + local
        ids = (bottom, top)
        for split, flip in zip(splits, flips):
            block = np.stack([ids[level][:, corner] for level, corner in split], axis=1)
            block[flip, 0], block[flip, 1] = block[flip, 1], block[flip, 0].copy()
            blocks.append(block)
            layer_index.append(np.full(len(block), k, dtype=np.int64))
    new_vertices = np.vstack(layers) if layers else np.zeros((0, n))
    return new_vertices, np.concatenate(blocks), np.concatenate(layer_index)


# ===== Domain builders =====

def _feature_size(spec: DomainSpec) -> float:
    if spec.kind == "ball":
        return spec.radius
    if spec.kind == "annulus":
        return spec.r_outer - spec.r_inner
    extents = [hi - lo for lo, hi in zip(spec.min_corner, spec.max_corner)]
    if spec.kind == "box":
        return min(extents)
    c = spec.origin()
    gaps = [min(ci - lo, hi - ci) - spec.radius for ci, lo, hi in zip(c, spec.min_corner, spec.max_corner)]
    return min(spec.radius, min(gaps))


def _box_arrays(spec: DomainSpec):
    h = spec.target_edge_length
    axes = [
        np.linspace(lo, hi, max(1, math.ceil((hi - lo) / h - 1e-9)) + 1)
        for lo, hi in zip(spec.min_corner, spec.max_corner)
    ]
    vertices, simplices = _grid_mesh(axes)
    return vertices, simplices, np.zeros(len(simplices), dtype=np.int64)


def _ball_arrays(spec: DomainSpec, breakpoints: Sequence[float]):
    """Ball of radius breakpoints[-1]: concentric core of radius breakpoints[0] plus layers."""
    n = spec.dimension
    h = spec.target_edge_length
    center = np.asarray(spec.origin(), dtype=float)
    core_radius = breakpoints[0]

    cube, simplices = _equiangular_cube(_cells_for_arc(core_radius, h), n)
    directions_all = _concentric(cube)
    vertices = center + core_radius * directions_all
    _require_positive(vertices, simplices, "ball core mapping")
    zones = np.zeros(len(simplices), dtype=np.int64)
    if len(breakpoints) == 1:
        return vertices, simplices, zones

    facets = _boundary_facets(simplices)
    surface = np.unique(facets)
    directions = _unit(directions_all[surface])
    radii, intervals = _layer_radii(breakpoints, h, spec.growth_ratio)
    layers = [center + r * directions for r in radii[1:]]
    new_vertices, shell, layer_index = _extrude(
        facets, surface, directions, surface, layers, offset=len(vertices)
    )
    vertices = np.vstack([vertices, new_vertices])
    simplices = np.vstack([simplices, shell])
    zones = np.concatenate([zones, intervals[layer_index] + 1])
    return vertices, simplices, zones


def _annulus_arrays(spec: DomainSpec, breakpoints: Sequence[float]):
    """Annulus between breakpoints[0] and breakpoints[-1]; zones follow the breakpoint intervals."""
    n = spec.dimension
    h = spec.target_edge_length
    center = np.asarray(spec.origin(), dtype=float)
    r_inner = breakpoints[0]
    # geometric layers keep the aspect ratio fixed, so the angular step follows the inner radius
    arc_radius = r_inner if spec.growth_ratio is not None else 0.5 * (breakpoints[0] + breakpoints[-1])

    cube, grid = _equiangular_cube(_cells_for_arc(arc_radius, h), n)
    facets = _boundary_facets(grid)
    surface = np.unique(facets)
    directions = _unit(cube[surface])
    radii, intervals = _layer_radii(breakpoints, h, spec.growth_ratio)

    first = center + r_inner * directions
    layers = [center + r * directions for r in radii[1:]]
    new_vertices, simplices, layer_index = _extrude(
        facets, surface, directions, np.arange(len(surface)), layers, offset=len(surface)
    )
    vertices = np.vstack([first, new_vertices])
    return vertices, simplices, intervals[layer_index]


def _box_minus_ball_arrays(spec: DomainSpec):
    n = spec.dimension
    h = spec.target_edge_length
    center = np.asarray(spec.origin(), dtype=float)
    lo = np.asarray(spec.min_corner, dtype=float)
    hi = np.asarray(spec.max_corner, dtype=float)
    box_center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)

    axes = []
    for extent in hi - lo:
        m = max(2, math.ceil(extent / h - 1e-9))
        axes.append(np.linspace(-1.0, 1.0, m + (m % 2) + 1))
    cube, grid = _grid_mesh(axes, symmetric=True)
    facets = _boundary_facets(grid)
    surface = np.unique(facets)
    q = cube[surface]
    directions = _unit(q)

    inner = center + spec.radius * directions
    outer = np.clip(box_center + half * q, lo, hi)
    count = max(1, math.ceil(np.linalg.norm(outer - inner, axis=1).max() / h - 1e-9))
    layers = [inner + (outer - inner) * (k / count) for k in range(1, count + 1)]
    layers[-1] = outer
    new_vertices, simplices, _ = _extrude(
        facets, surface, directions, np.arange(len(surface)), layers, offset=len(surface)
    )
    vertices = np.vstack([inner, new_vertices])
    return vertices, simplices, np.zeros(len(simplices), dtype=np.int64)


def _finalize(vertices, simplices, zones, spec: Optional[DomainSpec], stage: str) -> SimplicialMesh:
    _require_positive(vertices, simplices, stage)
    return SimplicialMesh(
        vertices=vertices,
        simplices=simplices,
        boundary_nodes=_boundary_nodes(simplices),
        cell_zones=zones,
        domain=spec,
    )


def build_mesh(spec: DomainSpec) -> SimplicialMesh:
    """
    Mesh a domain spec.

    Args:
        spec: Domain to mesh.

    Returns:
        A conforming mesh whose boundary vertices lie on the true boundary.

    Raises:
        MeshGenerationError: If target_edge_length exceeds the smallest feature
            of the domain or an element comes out inverted.
    """
    feature = _feature_size(spec)
    if spec.target_edge_length > feature:
        raise MeshGenerationError(
            f"target_edge_length {spec.target_edge_length} exceeds the smallest feature "
            f"size {feature:.6g} of the {spec.kind} domain"
        )

    if spec.kind == "box":
        arrays = _box_arrays(spec)
    elif spec.kind == "ball":
        breakpoints = [spec.radius] if spec.core_radius is None else [spec.core_radius, spec.radius]
        arrays = _ball_arrays(spec, breakpoints)
    elif spec.kind == "annulus":
        arrays = _annulus_arrays(spec, [spec.r_inner, spec.r_outer])
    else:
        arrays = _box_minus_ball_arrays(spec)

    mesh = _finalize(*arrays, spec, stage=f"{spec.kind} meshing")
    logger.info(
        f"Built {spec.kind} mesh (n={mesh.dimension}): "
        f"{mesh.n_vertices} vertices, {mesh.n_simplices} simplices"
    )
    return mesh


# ===== Refinement =====

def _project_to_boundary(domain: DomainSpec, points: np.ndarray) -> np.ndarray:
    """Move points lying on a curved part of the boundary onto it."""
    center = np.asarray(domain.origin(), dtype=float)
    if domain.kind == "box":
        return points
    offsets = points - center
    radius = np.linalg.norm(offsets, axis=1, keepdims=True)
    if domain.kind == "ball":
        return center + domain.radius * offsets / radius
    if domain.kind == "annulus":
        target = np.where(
            np.abs(radius - domain.r_inner) < np.abs(radius - domain.r_outer),
            domain.r_inner, domain.r_outer,
        )
        return center + target * offsets / radius
    lo, hi = np.asarray(domain.min_corner), np.asarray(domain.max_corner)
    scale = REGION_TOLERANCE * max(1.0, float(np.abs(hi - lo).max()))
    on_box = np.any((np.abs(points - lo) <= scale) | (np.abs(points - hi) <= scale), axis=1)
    projected = center + domain.radius * offsets / radius
    return np.where(on_box[:, None], points, projected)


def refine(mesh: SimplicialMesh) -> SimplicialMesh:
    """
    Edge-midpoint subdivision: 4 children per triangle, 8 per tetrahedron.

    Old vertices keep their indices; the midpoint of edge k gets index
    V + k. Midpoints of boundary edges are projected onto curved boundaries.
    Tags extend to midpoints of edges whose endpoints both carry the tag.
    """
    n = mesh.dimension
    p, t = mesh.vertices, mesh.simplices
    n_old = mesh.n_vertices
    edges, t2e = _edge_table(t, _REFINE_EDGES[n])
    midpoints = 0.5 * (p[edges[:, 0]] + p[edges[:, 1]])

    local = np.hstack([t, n_old + t2e])
    if n == 2:
        children = local[:, _TRIANGLE_CHILDREN]
    else:
        corners = local[:, _TET_CORNERS]
        mids = midpoints[t2e]
        diagonals = np.stack([
            np.linalg.norm(mids[:, a] - mids[:, b], axis=1) for a, b, _ in _OCTAHEDRON_SPLITS
        ], axis=1)
        table = np.array([
            [[a, b, cycle[k], cycle[(k + 1) % 4]] for k in range(4)]
            for a, b, cycle in _OCTAHEDRON_SPLITS
        ]) + n + 1
        choice = np.argmin(diagonals, axis=1)
        inner = np.take_along_axis(local, table[choice].reshape(len(t), 16), axis=1)
        children = np.concatenate([corners, inner.reshape(len(t), 4, 4)], axis=1)

    per_parent = children.shape[1]
    simplices = children.reshape(-1, n + 1)
    reference = np.vstack([p, midpoints])
    simplices = _orient(reference, simplices)

    if mesh.domain is not None and len(mesh.boundary_facets):
        facet_edges = np.concatenate([
            np.sort(mesh.boundary_facets[:, list(pair)], axis=1)
            for pair in itertools.combinations(range(n), 2)
        ])
        keys = edges[:, 0] * n_old + edges[:, 1]
        boundary_edges = np.unique(np.searchsorted(keys, facet_edges[:, 0] * n_old + facet_edges[:, 1]))
        midpoints[boundary_edges] = _project_to_boundary(mesh.domain, midpoints[boundary_edges])

    vertices = np.vstack([p, midpoints])
    _require_positive(vertices, simplices, "refinement")

    tags = {}
    for tag, nodes in mesh.region_tags.items():
        marked = np.zeros(n_old, dtype=bool)
        marked[nodes] = True
        extended = np.flatnonzero(marked[edges[:, 0]] & marked[edges[:, 1]]) + n_old
        tags[tag] = np.concatenate([nodes, extended])

    refined = SimplicialMesh(
        vertices=vertices,
        simplices=simplices,
        boundary_nodes=_boundary_nodes(simplices),
        region_tags=tags,
        cell_zones=np.repeat(mesh.cell_zones, per_parent),
        domain=mesh.domain,
    )
    logger.debug(f"Refined mesh to {refined.n_vertices} vertices, {refined.n_simplices} simplices")
    return refined


# ===== Regions =====

def ball_region(center: Sequence[float], radius: float, tol: float = REGION_TOLERANCE) -> Predicate:
    c = np.asarray(center, dtype=float)

    def predicate(points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - c, axis=1) <= radius * (1 + tol) + tol

    return predicate


def shell_region(
    center: Sequence[float], r_inner: float, r_outer: float, tol: float = REGION_TOLERANCE
) -> Predicate:
    c = np.asarray(center, dtype=float)

    def predicate(points: np.ndarray) -> np.ndarray:
        rho = np.linalg.norm(points - c, axis=1)
        return (rho >= r_inner * (1 - tol) - tol) & (rho <= r_outer * (1 + tol) + tol)

    return predicate


def segment_tube(
    start: Sequence[float], end: Sequence[float], tube_radius: float, tol: float = REGION_TOLERANCE
) -> Predicate:
    """Points within tube_radius of the segment [start, end]."""
    a = np.asarray(start, dtype=float)
    b = np.asarray(end, dtype=float)
    direction = b - a
    length_sq = float(direction @ direction)
    scale = max(1.0, math.sqrt(length_sq))

    def predicate(points: np.ndarray) -> np.ndarray:
        if length_sq == 0:
            foot = np.broadcast_to(a, points.shape)
        else:
            s = np.clip((points - a) @ direction / length_sq, 0.0, 1.0)
            foot = a + s[:, None] * direction
        return np.linalg.norm(points - foot, axis=1) <= tube_radius + tol * scale

    return predicate


def box_region(
    min_corner: Sequence[float], max_corner: Sequence[float], tol: float = REGION_TOLERANCE
) -> Predicate:
    lo = np.asarray(min_corner, dtype=float)
    hi = np.asarray(max_corner, dtype=float)
    slack = tol * np.maximum(1.0, np.abs(hi - lo))

    def predicate(points: np.ndarray) -> np.ndarray:
        return np.all((points >= lo - slack) & (points <= hi + slack), axis=1)

    return predicate


def region_predicate(region: RegionSpec) -> Predicate:
    if region.shape == "ball":
        return ball_region(region.center, region.radius)
    if region.shape == "shell":
        return shell_region(region.center, region.r_inner, region.r_outer)
    if region.shape == "segment":
        return segment_tube(region.start, region.end, region.tube_radius)
    return box_region(region.min_corner, region.max_corner)


def mark_region(mesh: SimplicialMesh, tag: str, predicate: Predicate) -> SimplicialMesh:
    """
    Tag the vertices satisfying predicate.

    Raises:
        InvalidArgumentError: If the tag already exists.
    """
    if tag in mesh.region_tags or tag == BOUNDARY_TAG:
        raise InvalidArgumentError(f"region tag '{tag}' already exists")
    mask = np.asarray(predicate(mesh.vertices), dtype=bool)
    if mask.shape != (mesh.n_vertices,):
        raise InvalidArgumentError("predicate must return one boolean per vertex")
    nodes = np.flatnonzero(mask)
    if nodes.size == 0:
        logger.warning(f"Region '{tag}' marks no vertices")
    return replace(mesh, region_tags={**mesh.region_tags, tag: nodes})


# ===== Exhaustions =====

def restrict_to_zones(
    mesh: SimplicialMesh, max_zone: int, domain: Optional[DomainSpec] = None
) -> SimplicialMesh:
    """Sub-mesh of the simplices with zone <= max_zone; vertex order is preserved."""
    keep = mesh.cell_zones <= max_zone
    if not keep.any():
        raise InvalidArgumentError(f"no simplices with zone <= {max_zone}")
    kept = mesh.simplices[keep]
    used = np.unique(kept)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    simplices = remap[kept]

    tags = {}
    for tag, nodes in mesh.region_tags.items():
        mapped = remap[nodes]
        tags[tag] = mapped[mapped >= 0]

    return SimplicialMesh(
        vertices=mesh.vertices[used],
        simplices=simplices,
        boundary_nodes=_boundary_nodes(simplices),
        region_tags=tags,
        cell_zones=mesh.cell_zones[keep],
        domain=domain if domain is not None else mesh.domain,
    )


def _renumber_zone_major(mesh: SimplicialMesh) -> SimplicialMesh:
    """Order vertices by the smallest zone touching them and simplices by zone (both stable)."""
    t = mesh.simplices
    vertex_zone = np.full(mesh.n_vertices, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(vertex_zone, t.ravel(), np.repeat(mesh.cell_zones, t.shape[1]))
    order = np.argsort(vertex_zone, kind="stable")
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))

    cell_order = np.argsort(mesh.cell_zones, kind="stable")
    simplices = inverse[t[cell_order]]
    return SimplicialMesh(
        vertices=mesh.vertices[order],
        simplices=simplices,
        boundary_nodes=inverse[mesh.boundary_nodes],
        region_tags={tag: inverse[nodes] for tag, nodes in mesh.region_tags.items()},
        cell_zones=mesh.cell_zones[cell_order],
        domain=mesh.domain,
    )


def build_exhaustion(
    spec: DomainSpec, radii: Sequence[float], refinements: int = 0
) -> List[SimplicialMesh]:
    """
    Nested meshes of the ball (or annulus) truncated at each radius.

    All members are cut from one layered mesh whose layer radii contain every
    requested radius, so member i is exactly a sub-mesh of member i+1 and its
    vertices are the first vertices of member i+1, with identical indices.

    Args:
        spec: Ball or annulus domain; its outer radius is replaced by radii.
        radii: Strictly increasing outer radii.
        refinements: Uniform refinements applied to the layered mesh.

    Returns:
        One mesh per radius.
    """
    if spec.kind not in ("ball", "annulus"):
        raise InvalidArgumentError("exhaustions are built from ball or annulus domains")
    radii = [float(r) for r in radii]
    if not radii or any(b <= a for a, b in zip(radii, radii[1:])):
        raise InvalidArgumentError("exhaustion radii must be non-empty and strictly increasing")

    if spec.kind == "ball":
        if spec.core_radius is not None:
            if radii[0] <= spec.core_radius:
                raise InvalidArgumentError("exhaustion radii must exceed core_radius")
            breakpoints = [spec.core_radius] + radii
            zone_of = [i + 1 for i in range(len(radii))]
        else:
            breakpoints = radii
            zone_of = list(range(len(radii)))
        big_spec = spec.model_copy(update={"radius": radii[-1]})
        if spec.target_edge_length > breakpoints[0]:
            raise MeshGenerationError(
                f"target_edge_length {spec.target_edge_length} exceeds the core radius {breakpoints[0]:.6g}"
            )
        arrays = _ball_arrays(big_spec, breakpoints)
    else:
        if radii[0] <= spec.r_inner:
            raise InvalidArgumentError("exhaustion radii must exceed r_inner")
        breakpoints = [spec.r_inner] + radii
        zone_of = list(range(len(radii)))
        big_spec = spec.model_copy(update={"r_outer": radii[-1]})
        arrays = _annulus_arrays(big_spec, breakpoints)

    big = _finalize(*arrays, big_spec, stage="exhaustion meshing")
    for _ in range(refinements):
        big = refine(big)
    big = _renumber_zone_major(big)

    members = []
    for radius, zone in zip(radii, zone_of):
        key = "radius" if spec.kind == "ball" else "r_outer"
        member_spec = spec.model_copy(update={key: radius})
        members.append(restrict_to_zones(big, zone, domain=member_spec))
    logger.info(
        f"Built exhaustion with {len(members)} members "
        f"({members[0].n_simplices} to {members[-1].n_simplices} simplices)"
    )
    return members


# ===== Queries =====

def node_components(mesh: SimplicialMesh, nodes: Sequence[int]) -> Tuple[int, np.ndarray]:
    """Connected components of the node subgraph induced by nodes."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    if nodes.size == 0:
        return 0, np.zeros(0, dtype=np.int64)
    sub = mesh.adjacency[nodes][:, nodes]
    count, labels = connected_components(sub, directed=False)
    return int(count), labels


def is_connected(mesh: SimplicialMesh) -> bool:
    count, _ = connected_components(mesh.adjacency, directed=False)
    return count == 1


def nearest_vertex(mesh: SimplicialMesh, point: Sequence[float]) -> int:
    """Index of the vertex closest to point (lowest index on ties)."""
    point = np.asarray(point, dtype=float)
    if point.shape != (mesh.dimension,):
        raise InvalidArgumentError(f"point must have {mesh.dimension} coordinates")
    return int(np.argmin(np.linalg.norm(mesh.vertices - point, axis=1)))


def mesh_size(mesh: SimplicialMesh) -> float:
    """Longest edge length."""
    e = mesh.edges
    return float(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1).max())


def total_volume(mesh: SimplicialMesh) -> float:
    return float(mesh.volumes.sum())


# ===== Serialization =====

def write_mesh(mesh: SimplicialMesh, path: Union[str, Path]) -> Path:
    """Write the plain-text mesh format (17 significant digits, 0-based indices)."""
    lines = [f"{mesh.dimension} {mesh.n_vertices} {mesh.n_simplices}"]
    lines.extend(" ".join(format(x, ".17g") for x in row) for row in mesh.vertices.tolist())
    lines.extend(" ".join(str(i) for i in row) for row in mesh.simplices.tolist())
    for tag in sorted(mesh.region_tags):
        if not tag or any(ch.isspace() for ch in tag):
            raise InvalidArgumentError(f"region tag '{tag}' cannot be serialized")
        nodes = mesh.region_tags[tag]
        lines.append(f"region {tag} {len(nodes)}")
        lines.append(" ".join(str(i) for i in nodes.tolist()))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_mesh(path: Union[str, Path], domain: Optional[DomainSpec] = None) -> SimplicialMesh:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        dim, n_vertices, n_simplices = (int(x) for x in lines[0].split())
        cursor = 1
        vertices = np.array(
            [[float(x) for x in line.split()] for line in lines[cursor:cursor + n_vertices]]
        ).reshape(n_vertices, dim)
        cursor += n_vertices
        simplices = np.array(
            [[int(x) for x in line.split()] for line in lines[cursor:cursor + n_simplices]],
            dtype=np.int64,
        ).reshape(n_simplices, dim + 1)
        cursor += n_simplices

        tags = {}
        while cursor < len(lines):
            keyword, tag, count = lines[cursor].split()
            if keyword != "region":
                raise ValueError(f"unexpected line '{lines[cursor]}'")
            entries = lines[cursor + 1].split() if cursor + 1 < len(lines) else []
            if len(entries) != int(count):
                raise ValueError(f"region '{tag}' declares {count} indices, found {len(entries)}")
            tags[tag] = np.array([int(x) for x in entries], dtype=np.int64)
            cursor += 2
    except (ValueError, IndexError) as e:
        raise InvalidArgumentError(f"malformed mesh file {path}: {e}") from e

    simplices = _orient(vertices, simplices)
    return SimplicialMesh(
        vertices=vertices,
        simplices=simplices,
        boundary_nodes=_boundary_nodes(simplices),
        region_tags=tags,
        domain=domain,
    )

import math

import numpy as np
import pytest

from capkit.exceptions import InvalidArgumentError
from capkit.models.schemas import DomainSpec, SolverConfig
from capkit.services.conformal_energy import ConformalStructure
from capkit.services.ferrand_metric import (
    PathContinuum,
    classify,
    continuum_capacity,
    estimate_mu,
    mu_continuity_probe,
    shortest_edge_path,
    triangle_check,
)
from capkit.services.mesh_builder import (
    ball_region,
    build_exhaustion,
    build_mesh,
    mark_region,
    nearest_vertex,
    refine,
    segment_tube,
    shell_region,
)


@pytest.fixture
def config():
    return SolverConfig()


@pytest.fixture
def flat():
    return ConformalStructure.flat()


@pytest.fixture
def disk():
    return build_mesh(DomainSpec(kind="ball", radius=1.0, target_edge_length=0.1))


@pytest.fixture
def pair(disk):
    return nearest_vertex(disk, [-0.3, 0.0]), nearest_vertex(disk, [0.4, 0.1])


def test_path_collapses_repeats(disk):
    """Test repeated consecutive nodes collapse"""
    a = int(disk.edges[0, 0])
    b = int(disk.edges[0, 1])
    path = PathContinuum(disk, (a, a, b, b))

    assert path.node_sequence == (a, b)
    assert path.reversed().node_sequence == (b, a)


def test_path_requires_edges(disk):
    """Test consecutive nodes must share an edge"""
    far = nearest_vertex(disk, [0.9, 0.0])
    with pytest.raises(InvalidArgumentError, match="share a mesh edge"):
        PathContinuum(disk, (nearest_vertex(disk, [-0.9, 0.0]), far))


def test_path_concatenate_needs_junction(disk):
    """Test concatenation needs a shared junction node"""
    a, b = (int(v) for v in disk.edges[0])
    path = PathContinuum(disk, (a, b))

    assert path.concatenate(path.reversed()).node_sequence == (a, b, a)
    with pytest.raises(InvalidArgumentError, match="junction"):
        path.concatenate(path)


def test_shortest_edge_path_avoids_boundary(disk, pair):
    """Test the initial path joins the endpoints without touching the boundary"""
    x, y = pair
    path = shortest_edge_path(disk, x, y, avoid=disk.boundary_nodes)

    assert path.endpoint_a == x
    assert path.endpoint_b == y
    assert not np.isin(path.nodes, disk.boundary_nodes).any()


def test_inner_ring_continuum():
    """Test the inner ring of the annulus as a continuum has capacity near 2 pi / log 4"""
    spec = DomainSpec(kind="annulus", r_inner=0.25, r_outer=1.0, target_edge_length=0.02, growth_ratio=1.08)
    mesh = mark_region(build_mesh(spec), "inner", shell_region([0, 0], 0.0, 0.25))
    ring = mesh.nodes("inner")
    order = ring[np.argsort(np.arctan2(mesh.vertices[ring, 1], mesh.vertices[ring, 0]))]
    path = PathContinuum(mesh, tuple(order))
    outer = np.setdiff1d(mesh.boundary_nodes, ring)
    result = continuum_capacity(mesh, ConformalStructure.flat(), path, outer_plate=outer)

    assert result.value == pytest.approx(2 * math.pi / math.log(4), rel=0.01)


def test_mu_is_finite_and_positive(disk, pair, flat, config):
    """Test mu estimates are finite and positive for distinct points"""
    estimate = estimate_mu(disk, flat, *pair, config, search_budget=5, seed=1)

    assert math.isfinite(estimate.value)
    assert estimate.value > 0
    assert estimate.witness.endpoint_a == pair[0]
    assert estimate.witness.endpoint_b == pair[1]


def test_mu_search_never_increases(disk, pair, flat, config):
    """Test accepted search values strictly decrease"""
    estimate = estimate_mu(disk, flat, *pair, config, search_budget=15, seed=2)
    accepted = estimate.search_diagnostics.accepted_values

    assert all(b < a for a, b in zip(accepted, accepted[1:]))
    assert estimate.value == accepted[-1]
    assert estimate.search_diagnostics.proposals <= 15


def test_mu_symmetry(disk, pair, flat, config):
    """Test swapping the endpoints gives the same value and the reversed witness"""
    x, y = pair
    forward = estimate_mu(disk, flat, x, y, config, search_budget=10, seed=3)
    backward = estimate_mu(disk, flat, y, x, config, search_budget=10, seed=3)

    assert abs(forward.value - backward.value) <= 2 * config.tolerance_for(forward.value)
    assert backward.witness.to_list() == forward.witness.to_list()[::-1]


def test_mu_deterministic(disk, pair, flat, config):
    """Test the same seed reproduces value and witness"""
    first = estimate_mu(disk, flat, *pair, config, search_budget=10, seed=4)
    second = estimate_mu(disk, flat, *pair, config, search_budget=10, seed=4)

    assert first.value == second.value
    assert first.witness.to_list() == second.witness.to_list()


def test_mu_budget_exhaustion_is_logged(disk, pair, flat, config, caplog):
    """Test running out of proposals is logged"""
    estimate = estimate_mu(disk, flat, *pair, config, search_budget=3, seed=5)

    assert estimate.search_diagnostics.budget_exhausted
    assert "budget" in caplog.text
    assert not estimate.search_diagnostics.stalled
    assert estimate.search_diagnostics.proposals == 3


def test_mu_search_stops_when_stalled(flat, config, caplog):
    """Test a full round without improvement ends the search before the budget runs out"""
    coarse = build_mesh(DomainSpec(kind="ball", radius=1.0, target_edge_length=0.25))
    x = nearest_vertex(coarse, [-0.3, 0.0])
    y = nearest_vertex(coarse, [0.4, 0.1])
    estimate = estimate_mu(coarse, flat, x, y, config, search_budget=400, seed=6)
    diagnostics = estimate.search_diagnostics

    assert diagnostics.stalled
    assert not diagnostics.budget_exhausted
    assert diagnostics.proposals < 400
    assert diagnostics.to_dict()["stalled"] is True
    assert "budget" not in caplog.text


def test_mu_diagonal_shrinks_with_resolution(flat, config):
    """Test mu(x, x) is small and shrinks under refinement"""
    coarse = build_mesh(DomainSpec(kind="ball", radius=1.0, target_edge_length=0.1))
    fine = refine(coarse)
    x = nearest_vertex(coarse, [0.0, 0.0])
    y = nearest_vertex(coarse, [0.5, 0.0])
    on_coarse = estimate_mu(coarse, flat, x, x, config, search_budget=0, seed=0)
    on_fine = estimate_mu(fine, flat, x, x, config, search_budget=0, seed=0)

    assert on_coarse.witness.to_list() == [x]
    assert on_fine.value < on_coarse.value
    assert on_coarse.value < estimate_mu(coarse, flat, x, y, config, search_budget=0, seed=0).value


def test_mu_endpoint_on_boundary(disk, flat, config):
    """Test endpoints on the outer plate are rejected"""
    x = int(disk.boundary_nodes[0])
    y = nearest_vertex(disk, [0.0, 0.0])

    with pytest.raises(InvalidArgumentError, match="outer plate"):
        estimate_mu(disk, flat, x, y, config)


def test_mu_on_exhaustion(flat, config):
    """Test mu on an exhaustion searches the largest member and reports every member"""
    spec = DomainSpec(kind="ball", radius=2.0, core_radius=1.0, target_edge_length=0.2, growth_ratio=1.3)
    members = build_exhaustion(spec, [2.0, 4.0, 8.0])
    x = nearest_vertex(members[0], [-0.4, 0.0])
    y = nearest_vertex(members[0], [0.4, 0.0])
    estimate = estimate_mu(members, flat, x, y, config, search_budget=0, seed=0)
    values = estimate.search_diagnostics.exhaustion_values

    assert estimate.witness.mesh is members[-1]
    assert len(values) == 3
    assert values[0] > values[1] > values[2] == pytest.approx(estimate.value)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(50))
def test_triangle_inequality(disk, flat, config, seed):
    """Test the triangle inequality with concatenation seeding on a random triple"""
    interior = np.setdiff1d(np.arange(disk.n_vertices), disk.boundary_nodes)
    x, y, z = (int(v) for v in np.random.default_rng(seed).choice(interior, size=3, replace=False))
    report = triangle_check(disk, flat, x, y, z, config, seed=seed, search_budget=3)

    assert report.holds


PLANE_RADII = [2.0, 8.0, 32.0, 128.0, 512.0]
PUNCTURED_RADII = [4.0, 16.0, 64.0, 256.0, 1024.0, 4096.0]


def _segment(n, start, end):
    return segment_tube(list(start) + [0.0] * (n - 2), list(end) + [0.0] * (n - 2), 0.0)


def _plane_members(n, spec, refinements=0):
    unit = _segment(n, [-0.5, 0.0], [0.5, 0.0])
    return [mark_region(m, "segment", unit) for m in build_exhaustion(spec, PLANE_RADII, refinements)]


def _punctured_members(n, spec, refinements=0):
    far = _segment(n, [1.0, 0.0], [2.0, 0.0])
    return [mark_region(m, "segment", far) for m in build_exhaustion(spec, PUNCTURED_RADII, refinements)]


def test_classify_plane_is_class_one(flat, config):
    """Test the unit segment in the plane gives Class I evidence"""
    spec = DomainSpec(kind="ball", radius=2.0, core_radius=0.5, target_edge_length=0.1, growth_ratio=1.2)
    members = _plane_members(2, spec)
    report = classify(members, flat, "segment", config)

    assert members[0].nodes("segment").size > 2
    assert report.verdict == "ClassI_evidence"
    assert report.floor_estimate <= 0.1 * report.capacity_sequence[0][1]
    assert len(report.results) == 5


def test_classify_punctured_plane_is_class_two(flat, config):
    """Test a segment at distance 1 in the plane minus a closed disk gives Class II evidence"""
    spec = DomainSpec(kind="annulus", r_inner=0.25, r_outer=4.0, target_edge_length=0.05, growth_ratio=1.1)
    members = _punctured_members(2, spec)
    report = classify(members, flat, "segment", config)
    values = [c for _, c in report.capacity_sequence]

    assert report.verdict == "ClassII_evidence"
    assert abs(values[-1] - values[-2]) <= 0.05 * values[-2]
    assert report.floor_estimate > 0.1 * values[0]


@pytest.mark.slow
def test_class_two_floor_survives_refinement(flat, config):
    """Test the Class II floor changes by less than 50% under one uniform refinement"""
    spec = DomainSpec(kind="annulus", r_inner=0.25, r_outer=4.0, target_edge_length=0.05, growth_ratio=1.15)
    coarse = classify(_punctured_members(2, spec), flat, "segment", config)
    fine = classify(_punctured_members(2, spec, refinements=1), flat, "segment", config)

    assert coarse.verdict == fine.verdict == "ClassII_evidence"
    assert abs(coarse.floor_estimate - fine.floor_estimate) <= 0.5 * fine.floor_estimate
    assert abs(coarse.floor_estimate - fine.floor_estimate) <= 0.5 * coarse.floor_estimate


@pytest.mark.slow
def test_classify_space_is_class_one(flat, config):
    """Test the unit segment in three-space gives Class I evidence"""
    spec = DomainSpec(
        kind="ball", dimension=3, radius=2.0, core_radius=0.5, target_edge_length=0.25, growth_ratio=1.5
    )
    report = classify(_plane_members(3, spec), flat, "segment", config)

    assert report.verdict == "ClassI_evidence"
    assert report.floor_estimate <= 0.1 * report.capacity_sequence[0][1]


@pytest.mark.slow
def test_classify_punctured_space_is_class_two(flat, config):
    """Test a segment at distance 1 in three-space minus a closed ball gives Class II evidence"""
    spec = DomainSpec(
        kind="annulus", dimension=3, r_inner=0.25, r_outer=4.0, target_edge_length=0.1, growth_ratio=1.25
    )
    report = classify(_punctured_members(3, spec), flat, "segment", config)
    values = [c for _, c in report.capacity_sequence]

    assert report.verdict == "ClassII_evidence"
    assert values[-1] > 1e-3
    assert report.floor_estimate > 0.1 * values[0]


def test_classify_needs_three_stages(flat, config):
    """Test classification refuses short exhaustions"""
    spec = DomainSpec(kind="ball", radius=2.0, core_radius=0.5, target_edge_length=0.1, growth_ratio=1.2)
    members = [mark_region(m, "k", ball_region([0, 0], 0.5)) for m in build_exhaustion(spec, [2.0, 4.0])]

    with pytest.raises(InvalidArgumentError, match="at least 3"):
        classify(members, flat, "k", config)


def test_continuity_at_the_diagonal(flat, config):
    """Test the sampled sup of mu over shrinking balls decreases"""
    mesh = build_mesh(DomainSpec(kind="ball", radius=1.0, target_edge_length=0.05))
    report = mu_continuity_probe(mesh, flat, [0.0, 0.0], [0.4, 0.2, 0.1], config, seed=5, pairs_per_radius=1)

    assert report.strictly_decreasing
    assert len(report.pairs[0]) == 2


def test_continuity_below_resolution(disk, flat, config):
    """Test radii below the mesh resolution are rejected"""
    with pytest.raises(InvalidArgumentError, match="minimum resolvable radius"):
        mu_continuity_probe(disk, flat, [0.0, 0.0], [0.4, 1e-3], config, seed=0)

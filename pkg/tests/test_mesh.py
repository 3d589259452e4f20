import math

import numpy as np
import pytest

from capkit.exceptions import InvalidArgumentError, MeshGenerationError
from capkit.models.schemas import DomainSpec
from capkit.services.mesh_builder import (
    ball_region,
    build_exhaustion,
    build_mesh,
    is_connected,
    mark_region,
    mesh_size,
    node_components,
    read_mesh,
    refine,
    segment_tube,
    shell_region,
    total_volume,
    write_mesh,
)

ANNULUS_AREA = math.pi * (1.0 - 0.0625)


@pytest.fixture
def unit_square():
    return build_mesh(DomainSpec(kind="box", min_corner=[0, 0], max_corner=[1, 1], target_edge_length=0.5))


@pytest.fixture
def annulus_spec():
    return DomainSpec(kind="annulus", r_inner=0.25, r_outer=1.0, target_edge_length=0.1)


def test_unit_square_counts(unit_square):
    """Test [0,1]^2 with h = 0.5 gives 8 triangles on 9 vertices"""
    assert unit_square.n_vertices == 9
    assert unit_square.n_simplices == 8
    assert total_volume(unit_square) == pytest.approx(1.0)
    assert np.all(unit_square.volumes > 0)


def test_unit_square_boundary(unit_square):
    """Test every vertex but the center is a boundary node"""
    center = int(np.argmin(np.linalg.norm(unit_square.vertices - 0.5, axis=1)))
    expected = sorted(set(range(9)) - {center})

    assert unit_square.boundary_nodes.tolist() == expected
    assert len(unit_square.boundary_facets) == 8


def test_mesh_arrays_are_read_only(unit_square):
    """Test mesh arrays cannot be modified in place"""
    with pytest.raises(ValueError):
        unit_square.vertices[0, 0] = 5.0


def test_box_3d_volume_and_connectivity():
    """Test a 3D box mesh has the right volume and a connected node graph"""
    mesh = build_mesh(DomainSpec(
        kind="box", dimension=3, min_corner=[0, 0, 0], max_corner=[1, 2, 1], target_edge_length=0.5
    ))

    assert mesh.simplices.shape[1] == 4
    assert total_volume(mesh) == pytest.approx(2.0)
    assert is_connected(mesh)


def test_edge_length_above_feature_size():
    """Test an edge length larger than the domain is rejected with the constraint named"""
    spec = DomainSpec(kind="annulus", r_inner=0.9, r_outer=1.0, target_edge_length=0.5)

    with pytest.raises(MeshGenerationError, match="feature size"):
        build_mesh(spec)


def test_annulus_boundary_on_circles(annulus_spec):
    """Test annulus boundary vertices lie exactly on the two circles"""
    mesh = build_mesh(annulus_spec)
    rho = np.linalg.norm(mesh.vertices[mesh.boundary_nodes], axis=1)
    on_circle = np.isclose(rho, 0.25, atol=1e-14) | np.isclose(rho, 1.0, atol=1e-14)

    assert on_circle.all()
    assert is_connected(mesh)


def test_annulus_area_converges_under_refinement(annulus_spec):
    """Test annulus area error decreases monotonically under refinement"""
    mesh = build_mesh(annulus_spec)
    errors = [abs(total_volume(mesh) - ANNULUS_AREA)]
    for _ in range(2):
        mesh = refine(mesh)
        errors.append(abs(total_volume(mesh) - ANNULUS_AREA))

    assert errors[0] > errors[1] > errors[2]
    assert errors[-1] < 0.005


def test_ball_with_layers():
    """Test a ball with a core and geometric layers has its boundary on the sphere"""
    spec = DomainSpec(kind="ball", radius=2.0, core_radius=1.0, target_edge_length=0.1, growth_ratio=1.2)
    mesh = build_mesh(spec)
    rho = np.linalg.norm(mesh.vertices[mesh.boundary_nodes], axis=1)

    assert np.allclose(rho, 2.0)
    assert total_volume(mesh) == pytest.approx(4.0 * math.pi, rel=0.01)


def test_box_minus_ball_boundary():
    """Test box minus ball keeps the box corners and puts inner boundary vertices on the sphere"""
    spec = DomainSpec(
        kind="box_minus_ball", min_corner=[-1, -1], max_corner=[1, 1],
        radius=0.3, target_edge_length=0.1,
    )
    mesh = build_mesh(spec)
    rho = np.linalg.norm(mesh.vertices[mesh.boundary_nodes], axis=1)
    on_box = np.isclose(np.abs(mesh.vertices[mesh.boundary_nodes]).max(axis=1), 1.0)

    assert np.all(on_box | np.isclose(rho, 0.3))
    assert total_volume(mesh) == pytest.approx(4.0 - math.pi * 0.09, rel=0.01)


def test_refine_2d_counts_and_parents(unit_square):
    """Test 2D refinement gives 4 children and keeps parent vertex indices"""
    fine = refine(unit_square)

    assert fine.n_simplices == 4 * unit_square.n_simplices
    assert fine.n_vertices == unit_square.n_vertices + len(unit_square.edges)
    assert np.array_equal(fine.vertices[:9], unit_square.vertices)
    assert total_volume(fine) == pytest.approx(1.0)


def test_refine_3d_counts():
    """Test 3D refinement gives 8 positively oriented children per tetrahedron"""
    mesh = build_mesh(DomainSpec(
        kind="box", dimension=3, min_corner=[0, 0, 0], max_corner=[1, 1, 1], target_edge_length=0.5
    ))
    fine = refine(mesh)

    assert fine.n_simplices == 8 * mesh.n_simplices
    assert np.all(fine.volumes > 0)
    assert total_volume(fine) == pytest.approx(1.0)
    assert mesh_size(fine) == pytest.approx(0.5 * mesh_size(mesh))


def test_refine_extends_tags(annulus_spec):
    """Test refinement keeps tagged vertices and tags midpoints of tagged edges"""
    mesh = mark_region(build_mesh(annulus_spec), "inner", shell_region([0, 0], 0.0, 0.25))
    fine = refine(mesh)
    inner = fine.nodes("inner")
    rho = np.linalg.norm(fine.vertices[inner], axis=1)

    assert set(mesh.nodes("inner").tolist()) <= set(inner.tolist())
    assert len(inner) == 2 * len(mesh.nodes("inner"))
    assert np.allclose(rho, 0.25)


def test_mark_inner_ring(annulus_spec):
    """Test |x| <= 0.25 on the annulus marks exactly the inner boundary ring"""
    mesh = build_mesh(annulus_spec)
    marked = mark_region(mesh, "inner", ball_region([0, 0], 0.25))
    rho = np.linalg.norm(mesh.vertices[mesh.boundary_nodes], axis=1)
    ring = mesh.boundary_nodes[np.isclose(rho, 0.25)]

    assert marked.nodes("inner").tolist() == sorted(ring.tolist())
    count, _ = node_components(marked, marked.nodes("inner"))
    assert count == 1


def test_mark_region_duplicate_tag(unit_square):
    """Test marking an existing tag is rejected"""
    mesh = mark_region(unit_square, "left", lambda p: p[:, 0] == 0.0)

    with pytest.raises(InvalidArgumentError, match="already exists"):
        mark_region(mesh, "left", lambda p: p[:, 0] == 1.0)


def test_mark_region_empty_warns(unit_square, caplog):
    """Test an empty region is legal and logged"""
    mesh = mark_region(unit_square, "nothing", ball_region([5.0, 5.0], 0.1))

    assert mesh.nodes("nothing").size == 0
    assert "marks no vertices" in caplog.text


def test_segment_tube_marks_segment(unit_square):
    """Test a zero-width tube picks the vertices on the segment"""
    mesh = mark_region(unit_square, "diag", segment_tube([0, 0], [1, 1], 0.0))

    assert len(mesh.nodes("diag")) == 3


def test_unknown_tag(unit_square):
    """Test looking up an unknown tag"""
    with pytest.raises(InvalidArgumentError, match="unknown region tag"):
        unit_square.nodes("missing")


def test_exhaustion_is_nested():
    """Test exhaustion members share vertex prefixes and grow in volume"""
    spec = DomainSpec(kind="ball", radius=2.0, core_radius=1.0, target_edge_length=0.2, growth_ratio=1.3)
    members = build_exhaustion(spec, [2.0, 4.0, 8.0])

    for small, large in zip(members, members[1:]):
        assert small.n_vertices < large.n_vertices
        assert np.array_equal(large.vertices[:small.n_vertices], small.vertices)
        assert total_volume(small) < total_volume(large)
    for member, radius in zip(members, [2.0, 4.0, 8.0]):
        rho = np.linalg.norm(member.vertices[member.boundary_nodes], axis=1)
        assert np.allclose(rho, radius)
        assert member.domain.radius == radius


def test_annulus_exhaustion_keeps_inner_boundary():
    """Test every annulus exhaustion member keeps the inner circle as boundary"""
    spec = DomainSpec(kind="annulus", r_inner=1.0, r_outer=2.0, target_edge_length=0.2, growth_ratio=1.3)
    members = build_exhaustion(spec, [2.0, 8.0])

    for member in members:
        rho = np.linalg.norm(member.vertices[member.boundary_nodes], axis=1)
        assert np.isclose(rho, 1.0).sum() > 0


def test_exhaustion_rejects_box():
    """Test exhaustions need a ball or annulus"""
    spec = DomainSpec(kind="box", min_corner=[0, 0], max_corner=[1, 1], target_edge_length=0.5)

    with pytest.raises(InvalidArgumentError, match="ball or annulus"):
        build_exhaustion(spec, [1.0, 2.0])


def test_write_read_mesh(tmp_path, annulus_spec):
    """Test the text format reproduces the mesh and is deterministic"""
    mesh = mark_region(build_mesh(annulus_spec), "inner", ball_region([0, 0], 0.25))
    first = write_mesh(mesh, tmp_path / "a.mesh")
    second = write_mesh(mesh, tmp_path / "b.mesh")
    loaded = read_mesh(first)

    assert first.read_bytes() == second.read_bytes()
    assert first.read_text().splitlines()[0] == f"2 {mesh.n_vertices} {mesh.n_simplices}"
    assert np.array_equal(loaded.vertices, mesh.vertices)
    assert np.array_equal(loaded.nodes("inner"), mesh.nodes("inner"))
    assert np.array_equal(loaded.boundary_nodes, mesh.boundary_nodes)


def test_read_malformed_mesh(tmp_path):
    """Test a truncated mesh file is reported"""
    path = tmp_path / "bad.mesh"
    path.write_text("2 3 1\n0 0\n1 0\n")

    with pytest.raises(InvalidArgumentError, match="malformed"):
        read_mesh(path)

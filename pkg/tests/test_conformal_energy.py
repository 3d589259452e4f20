import math

import numpy as np
import pytest

from capkit.exceptions import InvalidArgumentError
from capkit.models.schemas import ConformalFactorSpec, DomainSpec
from capkit.services.conformal_energy import (
    ConformalStructure,
    EnergyFunctional,
    ScalarField,
    energy_density,
    energy_gradient,
    total_energy,
)
from capkit.services.mesh_builder import build_mesh, refine
from capkit.services.oracle import RadialCondenserSpec, radial_witness


@pytest.fixture
def square():
    return build_mesh(DomainSpec(kind="box", min_corner=[0, 0], max_corner=[1, 1], target_edge_length=0.25))


@pytest.fixture
def cube():
    return build_mesh(DomainSpec(
        kind="box", dimension=3, min_corner=[0, 0, 0], max_corner=[1, 1, 1], target_edge_length=0.5
    ))


@pytest.fixture
def bumpy():
    return ConformalStructure.radial_bump(amplitude=1.5, width=0.4, center=[0.5, 0.5])


def _smooth_field(mesh):
    x = mesh.vertices
    return ScalarField(mesh, np.sin(2.0 * x[:, 0]) + x[:, 1] ** 2)


def test_linear_field_energy(square):
    """Test f(x) = x1 on the unit square has 2-energy 1"""
    field = ScalarField(square, square.vertices[:, 0].copy())

    assert total_energy(field, ConformalStructure.flat()).total == pytest.approx(1.0, rel=1e-12)


def test_constant_field_has_zero_energy(square):
    """Test constant fields have zero energy and zero density everywhere"""
    breakdown = total_energy(ScalarField.constant(square, 0.7), ConformalStructure.flat())

    assert breakdown.total == 0.0
    assert np.all(breakdown.per_simplex == 0.0)


def test_conformal_invariance(square, bumpy):
    """Test the n-energy does not depend on the conformal factor"""
    field = _smooth_field(square)
    flat = total_energy(field, ConformalStructure.flat()).total
    seeded = ConformalStructure.from_spec(ConformalFactorSpec(kind="random_smooth", amplitude=2.0, seed=4))

    assert total_energy(field, bumpy).total == pytest.approx(flat, rel=1e-12)
    assert total_energy(field, seeded).total == pytest.approx(flat, rel=1e-12)


def test_conformal_invariance_3d_regularized(cube, bumpy):
    """Test the regularized 3-energy is invariant too since epsilon scales with the metric"""
    field = _smooth_field(cube)
    shifted = ConformalStructure.constant(0.8)
    for eps in (1e-1, 1e-3):
        flat = total_energy(field, ConformalStructure.flat(), eps).total
        assert total_energy(field, shifted, eps).total == pytest.approx(flat, rel=1e-12)


def test_energy_density_matches_breakdown(square, bumpy):
    """Test the single-simplex density agrees with the vectorized breakdown"""
    field = _smooth_field(square)
    breakdown = total_energy(field, bumpy)

    for index in (0, 7, square.n_simplices - 1):
        assert energy_density(field, index, bumpy) == pytest.approx(breakdown.per_simplex[index], rel=1e-12)


def test_energy_density_index_out_of_range(square):
    """Test density on a missing simplex"""
    with pytest.raises(InvalidArgumentError, match="out of range"):
        energy_density(_smooth_field(square), square.n_simplices, ConformalStructure.flat())


def test_power_n_scaling(cube):
    """Test I(c f) = |c|^n I(f) for n = 3"""
    field = _smooth_field(cube)
    base = total_energy(field, ConformalStructure.flat()).total
    scaled = field.with_values(-2.5 * field.nodal_values)

    assert total_energy(scaled, ConformalStructure.flat()).total == pytest.approx(2.5 ** 3 * base, rel=1e-12)


def test_regularization_is_monotone(cube):
    """Test the regularized 3-energy decreases to the exact one as epsilon shrinks"""
    field = _smooth_field(cube)
    values = [total_energy(field, ConformalStructure.flat(), eps).total for eps in (1.0, 1e-1, 1e-2, 0.0)]

    assert values[0] >= values[1] >= values[2] >= values[3] >= 0


def test_regularization_is_exact_for_n_2(square):
    """Test regularizing the Dirichlet energy changes nothing"""
    field = _smooth_field(square)
    exact = total_energy(field, ConformalStructure.flat()).total

    assert total_energy(field, ConformalStructure.flat(), 0.1).total == pytest.approx(exact, rel=1e-12)


def test_negative_epsilon(square):
    """Test negative epsilon is rejected"""
    with pytest.raises(InvalidArgumentError, match="nonnegative"):
        total_energy(_smooth_field(square), ConformalStructure.flat(), -1e-3)


def test_field_length_mismatch(square):
    """Test fields must carry one value per vertex"""
    with pytest.raises(InvalidArgumentError, match="values for"):
        ScalarField(square, np.zeros(3))


def test_non_finite_factor(square):
    """Test an infinite conformal factor is reported"""
    structure = ConformalStructure(factor=lambda x: np.full(len(x), np.inf), name="broken")

    with pytest.raises(InvalidArgumentError, match="not finite"):
        total_energy(_smooth_field(square), structure)


@pytest.mark.parametrize("mesh_name", ["square", "cube"])
def test_gradient_matches_central_differences(mesh_name, request, bumpy):
    """Test the assembled gradient against central differences"""
    mesh = request.getfixturevalue(mesh_name)
    field = _smooth_field(mesh)
    structure = bumpy if mesh.dimension == 2 else ConformalStructure.constant(0.3)
    eps, step = 1e-2, 1e-6
    grad = energy_gradient(field, structure, eps)

    functional = EnergyFunctional(mesh, structure)
    for node in (0, mesh.n_vertices // 2, mesh.n_vertices - 1):
        plus = field.nodal_values.copy()
        minus = field.nodal_values.copy()
        plus[node] += step
        minus[node] -= step
        numeric = (functional.total(plus, eps) - functional.total(minus, eps)) / (2 * step)
        assert abs(numeric - grad[node]) <= 1e-5 * max(1.0, abs(grad[node]))


@pytest.mark.parametrize("seed", range(50))
def test_gradient_matches_random_directions(square, cube, seed):
    """Test the gradient against a central difference along a seeded random direction"""
    rng = np.random.default_rng(seed)
    mesh = square if seed % 2 == 0 else cube
    functional = EnergyFunctional(mesh, ConformalStructure.random_smooth(seed, amplitude=1.0, width=0.5))
    values = rng.normal(size=mesh.n_vertices)
    direction = rng.normal(size=mesh.n_vertices)
    direction /= np.linalg.norm(direction)
    eps = 10.0 ** rng.uniform(-2.0, 0.0)
    step = 1e-6

    exact = float(functional.gradient(values, eps) @ direction)
    numeric = (
        functional.total(values + step * direction, eps) - functional.total(values - step * direction, eps)
    ) / (2 * step)

    assert abs(numeric - exact) <= 1e-5 * max(1.0, abs(exact))


def test_gradient_free_nodes(square):
    """Test free_nodes selects entries of the full gradient"""
    field = _smooth_field(square)
    full = energy_gradient(field, ConformalStructure.flat(), 1e-2)
    part = energy_gradient(field, ConformalStructure.flat(), 1e-2, free_nodes=[3, 1])

    assert part.tolist() == [full[3], full[1]]


def test_gradient_undefined_at_zero_epsilon_3d(cube):
    """Test the exact 3-energy gradient is refused on flat elements"""
    with pytest.raises(InvalidArgumentError, match="epsilon > 0"):
        energy_gradient(ScalarField.constant(cube, 1.0), ConformalStructure.flat(), 0.0)


def test_hessian_is_symmetric_and_matches_gradient(square):
    """Test the sparse Hessian is symmetric and matches differences of the gradient"""
    field = _smooth_field(square)
    functional = EnergyFunctional(square, ConformalStructure.flat())
    hessian = functional.hessian(field.nodal_values, 1e-2).toarray()
    node, step = 5, 1e-6
    plus = field.nodal_values.copy()
    minus = field.nodal_values.copy()
    plus[node] += step
    minus[node] -= step
    column = (functional.gradient(plus, 1e-2) - functional.gradient(minus, 1e-2)) / (2 * step)

    assert np.allclose(hessian, hessian.T)
    assert np.allclose(hessian[:, node], column, atol=1e-5)


def test_radial_energy_2d():
    """Test the interpolated radial profile has energy near 2 pi / log 4 on the annulus"""
    mesh = build_mesh(DomainSpec(kind="annulus", r_inner=0.25, r_outer=1.0, target_edge_length=0.05))
    field = radial_witness(RadialCondenserSpec(2, 0.25, 1.0), refine(mesh))

    assert total_energy(field, ConformalStructure.flat()).total == pytest.approx(
        2 * math.pi / math.log(4), rel=0.01
    )


@pytest.mark.slow
def test_radial_energy_3d():
    """Test the interpolated radial profile has energy near 4 pi / (log 4)^2 on the spherical ring"""
    mesh = build_mesh(DomainSpec(
        kind="annulus", dimension=3, r_inner=0.25, r_outer=1.0, target_edge_length=0.05, growth_ratio=1.1
    ))
    field = radial_witness(RadialCondenserSpec(3, 0.25, 1.0), mesh)

    assert total_energy(field, ConformalStructure.flat()).total == pytest.approx(6.53902, rel=0.03)

"""
Conformally invariant n-energy of piecewise-linear fields.

The conformal factor phi (metric e^{2 phi} times the chart metric) is sampled
once per simplex at the centroid. The metric gradient norm is e^{-phi}|grad f|
and the metric volume e^{n phi} vol, so the n-energy density is independent
of phi up to round-off.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse

from capkit.exceptions import InvalidArgumentError
from capkit.models.schemas import ConformalFactorSpec
from capkit.services.mesh_builder import SimplicialMesh

logger = logging.getLogger(__name__)

FactorFunction = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ConformalStructure:
    """Conformal factor phi(x) on the chart, evaluated vectorized on (k, n) points."""
    factor: FactorFunction
    name: str = "flat"
    description: str = ""

    def sample(self, mesh: SimplicialMesh) -> np.ndarray:
        """phi at every simplex centroid."""
        phi = np.asarray(self.factor(mesh.centroids), dtype=float)
        if phi.shape != (mesh.n_simplices,):
            phi = np.broadcast_to(phi, (mesh.n_simplices,)).astype(float)
        if not np.all(np.isfinite(phi)):
            raise InvalidArgumentError(f"conformal factor '{self.name}' is not finite on the mesh")
        return phi

    @classmethod
    def flat(cls) -> "ConformalStructure":
        return cls(factor=lambda x: np.zeros(len(x)), name="flat", description="phi = 0")

    @classmethod
    def constant(cls, value: float) -> "ConformalStructure":
        return cls(
            factor=lambda x: np.full(len(x), float(value)),
            name=f"constant({value:g})",
            description=f"phi = {value:g}",
        )

    @classmethod
    def radial_bump(
        cls, amplitude: float, width: float, center: Optional[Sequence[float]] = None
    ) -> "ConformalStructure":
        """Gaussian bump phi(x) = amplitude * exp(-|x - center|^2 / width^2)."""
        if width <= 0:
            raise InvalidArgumentError("radial_bump width must be positive")

        def factor(x: np.ndarray) -> np.ndarray:
            c = np.zeros(x.shape[1]) if center is None else np.asarray(center, dtype=float)
            return amplitude * np.exp(-np.sum((x - c) ** 2, axis=1) / width ** 2)

        return cls(
            factor=factor,
            name="radial_bump",
            description=f"amplitude={amplitude:g}, width={width:g}",
        )

    @classmethod
    def random_smooth(
        cls, seed: int, amplitude: float, modes: int = 6, width: float = 1.0
    ) -> "ConformalStructure":
        """Seeded sum of cosine modes with wave numbers of order 1/width."""
        rng = np.random.default_rng(seed)
        waves = rng.normal(0.0, 1.0 / width, size=(modes, 3))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=modes)
        weights = rng.normal(0.0, 1.0, size=modes) / np.sqrt(modes)

        def factor(x: np.ndarray) -> np.ndarray:
            return amplitude * (np.cos(x @ waves[:, : x.shape[1]].T + phases) @ weights)

        return cls(
            factor=factor,
            name="random_smooth",
            description=f"seed={seed}, amplitude={amplitude:g}, modes={modes}",
        )

    @classmethod
    def from_spec(cls, spec: ConformalFactorSpec) -> "ConformalStructure":
        if spec.kind == "flat":
            return cls.flat()
        if spec.kind == "radial_bump":
            return cls.radial_bump(spec.amplitude, spec.width, spec.center)
        return cls.random_smooth(spec.seed, spec.amplitude, spec.modes, spec.width)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Nodal values of a piecewise-linear field; on a bounded mesh it is compactly supported."""
    mesh: SimplicialMesh
    nodal_values: np.ndarray
    support_note: bool = True

    def __post_init__(self):
        values = np.array(self.nodal_values, dtype=float, copy=True)
        if values.shape != (self.mesh.n_vertices,):
            raise InvalidArgumentError(
                f"field has {values.size} values for {self.mesh.n_vertices} vertices"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "nodal_values", values)

    @classmethod
    def constant(cls, mesh: SimplicialMesh, value: float) -> "ScalarField":
        return cls(mesh, np.full(mesh.n_vertices, float(value)))

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.mesh, values, self.support_note)


@dataclass
class EnergyBreakdown:
    total: float
    per_simplex: np.ndarray
    regularization_epsilon: float

    def to_dict(self, include_per_simplex: bool = False) -> dict:
        data = {
            "total": float(self.total),
            "regularization_epsilon": float(self.regularization_epsilon),
            "n_simplices": int(len(self.per_simplex)),
        }
        if include_per_simplex:
            data["per_simplex"] = [float(v) for v in self.per_simplex]
        return data


class EnergyFunctional:
    """
    Regularized n-energy on a fixed mesh and conformal structure.

    With eps > 0 the density is eps_g^n * ((1 + s / eps_g^2)^{n/2} - 1) * vol_g,
    where s = |grad f|_g^2 and eps_g = e^{-phi} eps, i.e. eps is measured in
    chart units like the gradient itself. eps = 0 gives the exact energy.
    """

    def __init__(self, mesh: SimplicialMesh, structure: ConformalStructure):
        self.mesh = mesh
        self.structure = structure
        self.n = mesh.dimension
        phi = structure.sample(mesh)
        self.scale = np.exp(-phi)
        self.metric_volumes = np.exp(self.n * phi) * mesh.volumes
        self._basis = mesh.basis_gradients
        self._simplices = mesh.simplices

    def _check_epsilon(self, epsilon: float):
        if epsilon < 0 or not np.isfinite(epsilon):
            raise InvalidArgumentError(f"epsilon must be a nonnegative finite number, got {epsilon}")

    def element_gradients(self, values: np.ndarray) -> np.ndarray:
        """(E, n) Euclidean gradients of the piecewise-linear interpolant."""
        return np.einsum("eij,ei->ej", self._basis, values[self._simplices])

    def _metric_terms(self, values: np.ndarray, epsilon: float):
        g = self.element_gradients(values)
        s = self.scale ** 2 * np.einsum("ej,ej->e", g, g)
        eps_g = self.scale * epsilon
        return g, s, eps_g

    def densities(self, values: np.ndarray, epsilon: float = 0.0) -> np.ndarray:
        self._check_epsilon(epsilon)
        _, s, eps_g = self._metric_terms(values, epsilon)
        n = self.n
        if epsilon == 0:
            return s ** (n / 2) * self.metric_volumes
        return eps_g ** n * np.expm1(0.5 * n * np.log1p(s / eps_g ** 2)) * self.metric_volumes

    def total(self, values: np.ndarray, epsilon: float = 0.0) -> float:
        return float(np.sum(self.densities(values, epsilon)))

    def gradient(self, values: np.ndarray, epsilon: float) -> np.ndarray:
        """Gradient with respect to every nodal value (fixed-order bincount assembly)."""
        self._check_epsilon(epsilon)
        g, s, eps_g = self._metric_terms(values, epsilon)
        n = self.n
        a = eps_g ** 2 + s
        if epsilon == 0 and n > 2 and np.any(s == 0):
            raise InvalidArgumentError(
                "energy gradient at epsilon = 0 is undefined where an element gradient vanishes; "
                "use epsilon > 0"
            )
        coef = n * a ** ((n - 2) / 2) * self.scale ** 2 * self.metric_volumes
        local = coef[:, None] * np.einsum("eij,ej->ei", self._basis, g)
        return np.bincount(
            self._simplices.ravel(), weights=local.ravel(), minlength=self.mesh.n_vertices
        )

    def hessian(self, values: np.ndarray, epsilon: float) -> sparse.csr_matrix:
        """Sparse Hessian; for n > 2 it needs epsilon > 0 wherever an element gradient vanishes."""
        self._check_epsilon(epsilon)
        g, s, eps_g = self._metric_terms(values, epsilon)
        n = self.n
        a = eps_g ** 2 + s
        if n > 2 and np.any(a == 0):
            raise InvalidArgumentError("energy Hessian is singular at epsilon = 0 with a flat element")
        c1 = n * a ** ((n - 2) / 2) * self.scale ** 2 * self.metric_volumes
        local = np.einsum("eij,ekj->eik", self._basis, self._basis) * c1[:, None, None]
        if n > 2:
            c2 = n * (n - 2) * a ** ((n - 4) / 2) * self.scale ** 4 * self.metric_volumes
            gg = np.einsum("eij,ej->ei", self._basis, g)
            local += c2[:, None, None] * gg[:, :, None] * gg[:, None, :]
        t = self._simplices
        k = t.shape[1]
        rows = np.repeat(t, k, axis=1).ravel()
        cols = np.tile(t, (1, k)).ravel()
        size = self.mesh.n_vertices
        return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(size, size)).tocsr()

    def lumped_diagonal(self) -> np.ndarray:
        """Diagonal of the metric-free stiffness matrix, used as a preconditioner."""
        diag = np.einsum("eij,eij->ei", self._basis, self._basis) * self.mesh.volumes[:, None]
        return np.bincount(self._simplices.ravel(), weights=diag.ravel(), minlength=self.mesh.n_vertices)


def energy_density(field: ScalarField, simplex_index: int, structure: ConformalStructure) -> float:
    """
    |grad f|_g^n * vol_g on one simplex.

    Args:
        field: Piecewise-linear field.
        simplex_index: Index of the simplex.
        structure: Conformal structure supplying phi at the centroid.

    Returns:
        The nonnegative energy density, equal to |grad f|^n * vol up to round-off.
    """
    mesh = field.mesh
    if not 0 <= simplex_index < mesh.n_simplices:
        raise InvalidArgumentError(f"simplex index {simplex_index} out of range")
    n = mesh.dimension
    phi = float(np.asarray(structure.factor(mesh.centroids[simplex_index:simplex_index + 1]))[0])
    if not np.isfinite(phi):
        raise InvalidArgumentError(f"conformal factor '{structure.name}' is not finite on the mesh")
    grad = mesh.basis_gradients[simplex_index].T @ field.nodal_values[mesh.simplices[simplex_index]]
    metric_norm = np.exp(-phi) * np.linalg.norm(grad)
    return float(metric_norm ** n * np.exp(n * phi) * mesh.volumes[simplex_index])


def total_energy(
    field: ScalarField, structure: ConformalStructure, epsilon: float = 0.0
) -> EnergyBreakdown:
    """Exact (epsilon = 0) or regularized n-energy with its per-simplex breakdown."""
    functional = EnergyFunctional(field.mesh, structure)
    per_simplex = functional.densities(field.nodal_values, epsilon)
    return EnergyBreakdown(
        total=float(np.sum(per_simplex)),
        per_simplex=per_simplex,
        regularization_epsilon=float(epsilon),
    )


def energy_gradient(
    field: ScalarField,
    structure: ConformalStructure,
    epsilon: float,
    free_nodes: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """
    Partial derivatives of the regularized energy with respect to the free nodal values.

    Raises:
        InvalidArgumentError: If epsilon is negative, or epsilon = 0 with a
            vanishing element gradient in dimension 3.
    """
    functional = EnergyFunctional(field.mesh, structure)
    full = functional.gradient(field.nodal_values, epsilon)
    if free_nodes is None:
        return full
    return full[np.asarray(free_nodes, dtype=np.int64)]

"""
Experiment orchestration: builds meshes and regions from an ExperimentConfig,
runs the requested computation and collects results, property checks, CSV
rows and plot series.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

import capkit
from capkit.config import Settings, get_settings
from capkit.exceptions import ConfigurationError
from capkit.models.schemas import ExperimentConfig
from capkit.services import capacity_solver, ferrand_metric, oracle
from capkit.services.capacity_solver import CapacityResult, Condenser
from capkit.services.conformal_energy import ConformalStructure
from capkit.services.mesh_builder import (
    SimplicialMesh,
    build_exhaustion,
    build_mesh,
    mark_region,
    mesh_size,
    nearest_vertex,
    refine,
    region_predicate,
)

logger = logging.getLogger(__name__)

INVARIANCE_TOLERANCE = 1e-10
WITNESS_TOLERANCE = 1e-6
RADIAL_REFERENCE_TOLERANCE = {2: 0.01, 3: 0.03}


@dataclass
class PropertyCheck:
    name: str
    passed: bool
    detail: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


@dataclass
class PlotSeries:
    x: List[float]
    y: List[float]
    title: str
    xlabel: str
    ylabel: str
    logx: bool = False
    logy: bool = False


@dataclass
class ExperimentOutcome:
    config: ExperimentConfig
    results: Dict[str, Any]
    rows: List[dict]
    checks: List[PropertyCheck]
    series: Dict[str, PlotSeries] = field(default_factory=dict)
    capacity_results: List[CapacityResult] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.capacity_results)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def exit_code(self) -> int:
        if not self.converged:
            return 3
        return 0 if self.passed else 1

    def non_converged_stages(self) -> List[dict]:
        return [
            r.failing_stage.to_dict()
            for r in self.capacity_results
            if r.failing_stage is not None
        ]

    def to_dict(self) -> dict:
        return {
            "header": {
                "capkit_version": capkit.__version__,
                "config": self.config.model_dump(mode="json"),
            },
            "kind": self.config.kind,
            "results": self.results,
            "checks": [check.to_dict() for check in self.checks],
            "passed": self.passed,
            "converged": self.converged,
        }


class ExperimentService:
    def __init__(self, settings: Optional[Settings] = None):
        self.settings = settings or get_settings()
        self._handlers: Dict[str, Callable[[ExperimentConfig], ExperimentOutcome]] = {
            "capacity": self._run_capacity,
            "compact_capacity": self._run_compact_capacity,
            "point_decay": self._run_point_decay,
            "mu": self._run_mu,
            "triangle": self._run_triangle,
            "classify": self._run_classify,
            "converge": self._run_converge,
            "continuity": self._run_continuity,
        }

    def run(self, config: ExperimentConfig) -> ExperimentOutcome:
        """
        Run one experiment.

        Args:
            config: Validated experiment configuration.

        Returns:
            ExperimentOutcome with results, checks and report rows.
        """
        logger.info(f"Starting {config.kind} experiment '{config.name}'")
        outcome = self._handlers[config.kind](config)
        failed = [check.name for check in outcome.checks if not check.passed]
        if failed:
            logger.warning(f"Experiment '{config.name}' failed checks: {', '.join(failed)}")
        if not outcome.converged:
            logger.warning(f"Experiment '{config.name}' has non-converged solver stages")
        logger.info(
            f"Finished {config.kind} experiment '{config.name}': "
            f"{len(outcome.checks) - len(failed)}/{len(outcome.checks)} checks passed"
        )
        return outcome

    # ===== Setup =====

    def _structure(self, config: ExperimentConfig) -> ConformalStructure:
        return ConformalStructure.from_spec(config.conformal_factor)

    def _mark(self, mesh: SimplicialMesh, config: ExperimentConfig) -> SimplicialMesh:
        for name in sorted(config.regions):
            mesh = mark_region(mesh, name, region_predicate(config.regions[name]))
        return mesh

    def _single_mesh(self, config: ExperimentConfig, refinements: Optional[int] = None) -> SimplicialMesh:
        mesh = build_mesh(config.domain)
        for _ in range(config.refinements if refinements is None else refinements):
            mesh = refine(mesh)
        return self._mark(mesh, config)

    def _domain(self, config: ExperimentConfig) -> Union[SimplicialMesh, List[SimplicialMesh]]:
        if config.exhaustion_radii:
            members = build_exhaustion(config.domain, config.exhaustion_radii, config.refinements)
            return [self._mark(member, config) for member in members]
        return self._single_mesh(config)

    def _vertex(self, mesh: SimplicialMesh, point: List[float]) -> int:
        return nearest_vertex(mesh, point)

    def _radial_reference(self, config: ExperimentConfig) -> Optional[float]:
        """Closed-form value when the plates are concentric shells hugging an annulus; None otherwise."""
        domain = config.domain
        if domain.kind != "annulus" or config.plate1 is None:
            return None
        origin = domain.origin()
        inner, outer = domain.r_inner, domain.r_outer
        inner_edge, outer_edge = None, None
        for tag in (config.plate0, config.plate1):
            if tag == "boundary":
                continue
            region = config.regions[tag]
            if region.shape != "shell" or math.dist(region.center, origin) > 1e-12:
                return None
            if region.r_inner <= inner * (1 + 1e-9):
                inner_edge = max(inner, region.r_outer)
            elif region.r_outer >= outer * (1 - 1e-9):
                outer_edge = min(outer, region.r_inner)
            else:
                return None
        if inner_edge is None:
            return None
        if outer_edge is None:
            if config.plate0 != "boundary":
                return None
            outer_edge = outer
        if not inner_edge < outer_edge:
            return None
        spec = oracle.RadialCondenserSpec(domain.dimension, inner_edge, outer_edge)
        return oracle.radial_capacity(spec)

    def _condenser(self, mesh: SimplicialMesh, config: ExperimentConfig) -> Condenser:
        if config.plate1 is None:
            raise ConfigurationError("plate1 is required")
        if config.plate0 == "boundary":
            plate1 = mesh.nodes(config.plate1)
            plate0 = np.setdiff1d(mesh.boundary_nodes, plate1)
            return Condenser(mesh, plate0, plate1)
        return Condenser.from_tags(mesh, config.plate0, config.plate1)

    # ===== Handlers =====

    def _run_capacity(self, config: ExperimentConfig) -> ExperimentOutcome:
        mesh = self._single_mesh(config)
        structure = self._structure(config)
        condenser = self._condenser(mesh, config)
        result = capacity_solver.solve_condenser(mesh, structure, condenser, config.solver)
        tol = config.solver.tolerance_for(result.value)

        checks = [PropertyCheck("admissible", result.admissible)]
        results: Dict[str, Any] = {"mesh": mesh.to_dict(), "capacity": result.to_dict()}
        all_results = [result]

        reference = self._radial_reference(config)
        if reference is not None:
            results["radial_reference"] = reference
            relative_error = abs(result.value - reference) / reference
            results["relative_error"] = relative_error
            limit = RADIAL_REFERENCE_TOLERANCE[mesh.dimension]
            checks.append(PropertyCheck(
                "radial_reference", relative_error <= limit,
                {"value": result.value, "reference": reference, "relative_error": relative_error, "limit": limit},
            ))

        if config.check_symmetry:
            swapped = capacity_solver.solve_condenser(mesh, structure, condenser.swapped(), config.solver)
            difference = abs(swapped.value - result.value)
            checks.append(PropertyCheck(
                "plate_swap_symmetry", difference <= 2 * tol,
                {"value": result.value, "swapped": swapped.value, "difference": difference},
            ))
            all_results.append(swapped)

        for index, factor in enumerate(config.invariance_factors):
            other = capacity_solver.solve_condenser(
                mesh, ConformalStructure.from_spec(factor), condenser, config.solver
            )
            relative = abs(other.value - result.value) / max(1.0, abs(result.value))
            witness_gap = float(np.max(np.abs(other.field.nodal_values - result.field.nodal_values)))
            checks.append(PropertyCheck(
                f"conformal_invariance_{index}", relative <= INVARIANCE_TOLERANCE,
                {"factor": factor.model_dump(mode="json"), "value": other.value,
                 "relative_difference": relative, "witness_max_difference": witness_gap},
            ))
            checks.append(PropertyCheck(
                f"conformal_witness_{index}", witness_gap <= WITNESS_TOLERANCE,
                {"factor": factor.model_dump(mode="json"), "witness_max_difference": witness_gap},
            ))
            all_results.append(other)

        return ExperimentOutcome(
            config=config,
            results=results,
            rows=[result.summary_row(config.name)],
            checks=checks,
            capacity_results=all_results,
        )

    def _run_compact_capacity(self, config: ExperimentConfig) -> ExperimentOutcome:
        domain = self._domain(config)
        meshes = domain if isinstance(domain, list) else [domain]
        report = capacity_solver.compact_capacity(meshes, self._structure(config), config.probe, config.solver)
        rows = [
            r.summary_row(f"{config.name}_R{radius:g}" if radius is not None else config.name)
            for r, radius in zip(report.results, report.radii)
        ]
        series = {}
        if all(r is not None for r in report.radii) and len(meshes) > 1:
            series["capacity_vs_radius"] = PlotSeries(
                x=list(report.radii), y=report.values,
                title=f"{config.name}: capacity along the exhaustion",
                xlabel="R", ylabel="capacity", logx=True,
            )
        return ExperimentOutcome(
            config=config,
            results={"compact_capacity": report.to_dict()},
            rows=rows,
            checks=[PropertyCheck("monotone_decreasing", report.monotone_decreasing, {"values": report.values})],
            series=series,
            capacity_results=report.results,
        )

    def _run_point_decay(self, config: ExperimentConfig) -> ExperimentOutcome:
        mesh = self._single_mesh(config)
        n = mesh.dimension
        center = config.points[0] if config.points else config.domain.origin()
        report = capacity_solver.point_capacity_decay(
            mesh, self._structure(config), center, config.radii, config.outer_radius, config.solver
        )
        expected = -(n - 1)
        exponent = report.fitted_exponent
        checks = [
            PropertyCheck("strictly_decreasing", report.strictly_decreasing, {"samples": report.samples}),
            PropertyCheck(
                "decay_exponent",
                exponent is not None and abs(exponent - expected) <= 0.1 * abs(expected),
                {"fitted_exponent": exponent, "expected": expected},
            ),
        ]
        rows = [r.summary_row(f"{config.name}_r{radius:g}") for radius, r in zip(config.radii, report.results)]
        series = {
            "point_capacity_decay": PlotSeries(
                x=[r for r, _ in report.samples], y=[c for _, c in report.samples],
                title=f"{config.name}: capacity of B(x, r)", xlabel="r", ylabel="capacity", logx=True,
            )
        }
        return ExperimentOutcome(
            config=config,
            results={"point_decay": report.to_dict()},
            rows=rows,
            checks=checks,
            series=series,
            capacity_results=report.results,
        )

    def _run_mu(self, config: ExperimentConfig) -> ExperimentOutcome:
        domain = self._domain(config)
        search_mesh = domain[0] if isinstance(domain, list) else domain
        structure = self._structure(config)
        x, y = (self._vertex(search_mesh, p) for p in config.points)
        estimate = ferrand_metric.estimate_mu(
            domain, structure, x, y, config.solver, config.search_budget, config.seed
        )
        mesh = estimate.witness.mesh
        recheck = ferrand_metric.continuum_capacity(mesh, structure, estimate.witness, config=config.solver)
        tol = config.solver.tolerance_for(estimate.value)
        checks = [
            PropertyCheck("finite", math.isfinite(estimate.value), {"value": estimate.value}),
            PropertyCheck(
                "witness_reproduces_value", abs(recheck.value - estimate.value) <= tol,
                {"value": estimate.value, "recomputed": recheck.value},
            ),
        ]
        all_results = [estimate.capacity_result, recheck]
        if config.check_symmetry:
            mirrored = ferrand_metric.estimate_mu(
                domain, structure, y, x, config.solver, config.search_budget, config.seed
            )
            difference = abs(mirrored.value - estimate.value)
            checks.append(PropertyCheck(
                "symmetry", difference <= 2 * tol,
                {"mu_xy": estimate.value, "mu_yx": mirrored.value, "difference": difference},
            ))
            all_results.append(mirrored.capacity_result)
        return ExperimentOutcome(
            config=config,
            results={"vertices": [x, y], "mu": estimate.to_dict()},
            rows=[estimate.capacity_result.summary_row(config.name)],
            checks=checks,
            capacity_results=all_results,
        )

    def _run_triangle(self, config: ExperimentConfig) -> ExperimentOutcome:
        mesh = self._single_mesh(config)
        x, y, z = (self._vertex(mesh, p) for p in config.points)
        report = ferrand_metric.triangle_check(
            mesh, self._structure(config), x, y, z, config.solver, config.seed, config.search_budget
        )
        estimates = {"xy": report.mu_xy, "yz": report.mu_yz, "xz": report.mu_xz}
        return ExperimentOutcome(
            config=config,
            results={"vertices": [x, y, z], "triangle": report.to_dict()},
            rows=[e.capacity_result.summary_row(f"{config.name}_{key}") for key, e in estimates.items()],
            checks=[PropertyCheck("triangle_inequality", report.holds, {
                "mu_xy": report.mu_xy.value, "mu_yz": report.mu_yz.value, "mu_xz": report.mu_xz.value,
            })],
            capacity_results=[e.capacity_result for e in estimates.values()],
        )

    def _run_classify(self, config: ExperimentConfig) -> ExperimentOutcome:
        meshes = self._domain(config)
        if not isinstance(meshes, list):
            raise ConfigurationError("classify needs exhaustion_radii")
        report = ferrand_metric.classify(
            meshes, self._structure(config), config.probe, config.solver, config.positivity_floor
        )
        radii = [r for r, _ in report.capacity_sequence]
        values = [c for _, c in report.capacity_sequence]
        return ExperimentOutcome(
            config=config,
            results={"classification": report.to_dict()},
            rows=[r.summary_row(f"{config.name}_R{radius:g}") for radius, r in zip(radii, report.results)],
            checks=[PropertyCheck("conclusive", report.verdict != "inconclusive", {"verdict": report.verdict})],
            series={
                "classification": PlotSeries(
                    x=radii, y=values, title=f"{config.name}: {report.verdict}",
                    xlabel="R", ylabel="probe capacity", logx=True,
                )
            },
            capacity_results=report.results,
        )

    def _run_converge(self, config: ExperimentConfig) -> ExperimentOutcome:
        structure = self._structure(config)
        base = build_mesh(config.domain)
        samples: List[Tuple[float, float]] = []
        results = []
        for level in range(config.refinements + 1):
            if level:
                base = refine(base)
            mesh = self._mark(base, config)
            result = capacity_solver.solve_condenser(mesh, structure, self._condenser(mesh, config), config.solver)
            samples.append((mesh_size(mesh), result.value))
            results.append(result)

        reference = self._radial_reference(config)
        if reference is None:
            reference = samples[-1][1]
        fit = oracle.convergence_order(samples, reference)
        checks = [PropertyCheck("convergent", not fit.non_convergent and fit.order is not None, fit.to_dict())]
        errors = [abs(v - reference) for _, v in samples]
        series = {}
        if all(e > 0 for e in errors):
            series["convergence"] = PlotSeries(
                x=[h for h, _ in samples], y=errors, title=f"{config.name}: error vs mesh size",
                xlabel="h", ylabel="|value - reference|", logx=True, logy=True,
            )
        return ExperimentOutcome(
            config=config,
            results={"samples": [[h, v] for h, v in samples], "reference": reference, "fit": fit.to_dict()},
            rows=[r.summary_row(f"{config.name}_level{i}") for i, r in enumerate(results)],
            checks=checks,
            series=series,
            capacity_results=results,
        )

    def _run_continuity(self, config: ExperimentConfig) -> ExperimentOutcome:
        mesh = self._single_mesh(config)
        structure = self._structure(config)
        checks, reports = [], []
        for index, point in enumerate(config.points):
            report = ferrand_metric.mu_continuity_probe(
                mesh, structure, point, config.radii, config.solver, config.seed,
                config.pairs_per_radius, config.search_budget,
            )
            reports.append(report)
            checks.append(PropertyCheck(
                f"diagonal_continuity_{index}", report.strictly_decreasing, {"sup_values": report.sup_values}
            ))
        rows = [
            {"case": f"{config.name}_p{i}_r{r:g}", "n": mesh.dimension,
             "epsilon_final": config.solver.epsilon_schedule[-1], "value": v,
             "iterations": "", "grad_norm": "", "admissible": ""}
            for i, report in enumerate(reports)
            for r, v in zip(report.radii, report.sup_values)
        ]
        series = {
            f"continuity_{i}": PlotSeries(
                x=report.radii, y=report.sup_values, title=f"{config.name}: sup mu in B(z, r)",
                xlabel="r", ylabel="sup mu", logx=True,
            )
            for i, report in enumerate(reports)
        }
        return ExperimentOutcome(
            config=config,
            results={"continuity": [report.to_dict() for report in reports]},
            rows=rows,
            checks=checks,
            series=series,
        )


def apply_seed_override(config: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    """Return config with seed replaced, validated again."""
    if seed is None:
        return config
    data = config.model_dump(mode="json")
    data["seed"] = seed
    return ExperimentConfig.model_validate(data)


def run(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    seed_override: Optional[int] = None,
    settings: Optional[Settings] = None,
) -> ExperimentOutcome:
    """Run an experiment and write its reports under out_dir."""
    from capkit.repositories.report_repository import ReportRepository

    settings = settings or get_settings()
    config = apply_seed_override(config, seed_override)
    outcome = ExperimentService(settings).run(config)
    target = Path(out_dir) if out_dir is not None else Path(settings.output_dir) / config.name
    ReportRepository(target, settings).save(outcome)
    return outcome

"""
Experiment Service
Runs the command-line experiments, tracking each run in a manifest
"""

import concurrent.futures
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from pydantic import BaseModel
from scipy import stats as scipy_stats

from .. import __version__
from ..exceptions import ConfigurationError, DomainError, NumericalFailure, SimulationError
from ..models.config import BoxGeometry, RunConfig
from ..models.records import (
    CheckRecord,
    ModeRecord,
    OccupationRecord,
    ReportRecord,
    RunManifest,
    SpectrumRecord,
    config_digest,
    dump_line,
)
from ..models.settings import get_settings
from . import fourier, kernel as kernel_service, spatial, stats, weights as weights_service

logger = logging.getLogger(__name__)

FOURIER_SAMPLERS = ("fourier-exact", "fourier-mcmc", "marginal")


class RecordWriter:
    """Line-delimited JSON records to a file or stdout"""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.stream: TextIO = open(path, "w") if path else sys.stdout
        self.count = 0

    def write(self, record: BaseModel) -> None:
        self.stream.write(dump_line(record) + "\n")
        self.count += 1

    def close(self) -> None:
        if self.path:
            self.stream.close()
        else:
            self.stream.flush()


def format_table(title: str, rows: List[Dict[str, Any]]) -> str:
    """Aligned plain-text table"""
    if not rows:
        return f"{title}\n(no rows)\n"
    columns = list(rows[0])
    cells = [[_cell(row.get(c)) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(columns)]
    lines = [title, "  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells)
    return "\n".join(lines) + "\n"


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def replica_rng(seed: int, replica: int) -> np.random.Generator:
    """Generator for one replica, derived from (seed, replica)"""
    return np.random.default_rng(np.random.SeedSequence([seed, replica]))


def box_for(config: RunConfig, N: int) -> BoxGeometry:
    """Box from L, or from the density rho at N points"""
    if config.L is not None:
        return config.box()
    if config.rho is not None:
        return BoxGeometry.for_density(N, config.rho, config.d, config.k_max)
    raise ConfigurationError("L: either L or rho is required for sampling")


@dataclass
class SampleBatch:
    """Samples of one replica"""
    spectra: List[stats.CycleSpectrum] = field(default_factory=list)
    sequences: List[List[int]] = field(default_factory=list)
    occupations: List[fourier.OccupationState] = field(default_factory=list)
    energies: List[float] = field(default_factory=list)
    extras: Dict[str, Any] = field(default_factory=dict)


def draw_samples(config: RunConfig, sampler: str, N: int, L: Optional[float], seed: int,
                 replica: int, draws: int) -> SampleBatch:
    """One replica of `draws` samples from the named sampler"""
    rng = replica_rng(seed, replica)
    model = config.weights()
    batch = SampleBatch()
    if sampler == "nonspatial":
        table = weights_service.compute_h(model, N)
        for _ in range(draws):
            lengths = weights_service.sample_cycle_lengths(model, N, table, rng)
            batch.sequences.append(lengths)
            batch.spectra.append(stats.CycleSpectrum.from_lengths(lengths))
        return batch

    kernel = kernel_service.build_kernel(config.kernel(), k_max=config.k_max)
    box = config.box(L)
    if sampler == "spatial":
        params = config.chain_params(N, box, int(np.random.SeedSequence([seed, replica]).generate_state(1)[0]))
        result = spatial.SpatialChain(params, rng).run()
        batch.spectra = result.spectra
        batch.energies = [result.energies[s] for s in result.sweeps]
        batch.extras = {"acceptance": result.acceptance, "geweke_z": result.geweke_z}
        return batch

    modeset = fourier.ModeSet.from_box(kernel, box, config.eps_cut)
    if sampler == "marginal":
        table = fourier.effective_table(modeset, model, N)
        for _ in range(draws):
            lengths = fourier.sample_cycle_marginal(modeset, model, N, rng, table)
            batch.sequences.append(lengths)
            batch.spectra.append(stats.CycleSpectrum.from_lengths(lengths))
        return batch

    table = weights_service.compute_h(model, N)
    if sampler == "fourier-exact":
        tables = fourier.build_tables(modeset, table, N, config.log_mass_cut, config.dp_budget, config.memory_cap_mb)
        batch.extras["exact_mean_n0"] = fourier.zero_mode_mean(tables)

        def draw():
            return fourier.sample_occupations_exact(tables, rng)
    elif sampler == "fourier-mcmc":
        chain = fourier.OccupationChain(modeset, table, N, rng, proposal=config.mcmc_proposal)
        chain.run(config.steps)
        between = max(1, config.steps // 10)

        def draw():
            chain.run(between)
            return chain.state()
    else:
        raise ConfigurationError(f"sampler: unknown sampler '{sampler}'")
    for _ in range(draws):
        state = draw()
        lengths = fourier.cycle_lengths_given_occupations(state, model, table, rng)
        batch.occupations.append(state)
        batch.sequences.append(lengths)
        batch.spectra.append(stats.CycleSpectrum.from_lengths(lengths))
    return batch


def _draw_samples_payload(payload: Tuple) -> SampleBatch:
    config_json, sampler, N, L, seed, replica, draws = payload
    return draw_samples(RunConfig.model_validate_json(config_json), sampler, N, L, seed, replica, draws)


def run_replicas(config: RunConfig, sampler: str, N: int, L: Optional[float], seed: int,
                 workers: int) -> List[SampleBatch]:
    """All replicas in replica order, fanned out over worker processes when workers > 1"""
    payloads = [(config.model_dump_json(), sampler, N, L, seed, r, config.draws) for r in range(config.replicas)]
    if workers <= 1 or config.replicas == 1:
        return [_draw_samples_payload(p) for p in payloads]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(_draw_samples_payload, payloads))


def _merge(batches: Sequence[SampleBatch]) -> SampleBatch:
    merged = SampleBatch()
    for batch in batches:
        merged.spectra.extend(batch.spectra)
        merged.sequences.extend(batch.sequences)
        merged.occupations.extend(batch.occupations)
        merged.energies.extend(batch.energies)
    merged.extras = batches[0].extras if batches else {}
    return merged


class ExperimentRunner:
    """Executes one command with a status-tracked manifest"""

    def __init__(self, config: RunConfig, out: Optional[str] = None, summary: Optional[TextIO] = None):
        settings = get_settings()
        self.config = config
        self.out = out
        self.seed = config.seed if config.seed is not None else (settings.seed if settings.seed is not None else 0)
        self.workers = config.workers or settings.workers
        self.summary = summary or (sys.stdout if out else sys.stderr)
        self.commands: Dict[str, Callable[[RecordWriter], List[Dict[str, Any]]]] = {
            "rho-c": self.cmd_rho_c,
            "hn": self.cmd_hn,
            "sample-fourier": self.cmd_sample_fourier,
            "sample-spatial": self.cmd_sample_spatial,
            "verify-pd": self.cmd_verify_pd,
            "giant-cycle": self.cmd_giant_cycle,
            "scan-density": self.cmd_scan_density,
            "selftest": self.cmd_selftest,
        }

    def execute(self, command: str) -> RunManifest:
        """Run a command, writing the header, records and the sidecar manifest"""
        if command not in self.commands:
            raise ConfigurationError(f"command: unknown command '{command}'")
        parameters = self.config.model_dump(mode="json")
        parameters["seed"] = self.seed
        manifest = RunManifest(
            command=command,
            parameters=parameters,
            seed=self.seed,
            code_version=__version__,
            config_digest=config_digest(parameters),
            started_at=datetime.now(timezone.utc),
        )
        writer = RecordWriter(self.out)
        writer.write(manifest.header())
        logger.info("Running %s with seed %d", command, self.seed)
        try:
            rows = self.commands[command](writer)
            manifest.status = "completed"
            self.summary.write(format_table(command, rows))
        except SimulationError as e:
            manifest.status = "failed"
            manifest.error_message = str(e)
            raise
        except ArithmeticError as e:
            manifest.status = "failed"
            manifest.error_message = f"floating-point failure: {e}"
            raise NumericalFailure(manifest.error_message) from e
        finally:
            manifest.finished_at = datetime.now(timezone.utc)
            writer.close()
            if self.out:
                manifest.outputs = [self.out]
                Path(f"{self.out}.manifest.json").write_text(manifest.model_dump_json(indent=2) + "\n")
        return manifest

    # Commands

    def cmd_rho_c(self, writer: RecordWriter) -> List[Dict[str, Any]]:
        """Critical density and its finite-volume approximations over the L-grid"""
        config = self.config
        kernel = kernel_service.build_kernel(config.kernel(), k_max=config.k_max)
        model = config.weights()
        series = kernel_service.critical_density_series(kernel, model, config.tol)
        fields = {"rho_c": series.value, "residual": series.residual, "terms": series.terms, "case": model.case}
        if np.all(weights_service.cycle_weights(model, max(model.last_override, 1)) >= 0) and model.alpha >= 0:
            fields["geometric_bound"] = kernel_service.geometric_series_bound(kernel)
        writer.write(ReportRecord(record="rho_c", fields=fields))
        rows = [{"L": "inf", "rho_c": series.value, "residual": series.residual, "rel_error": 0.0}]
        for L in (config.L_grid if config.L is None else [config.L]):
            box = config.box(L)
            finite = kernel_service.finite_volume_critical_density(
                kernel, model, box, config.j_cutoff, config.eps_cut, config.tol
            )
            rel = abs(finite.value - series.value) / series.value if series.value else 0.0
            writer.write(ReportRecord(record="finite_volume", fields={
                "L": L, "rho_c_L": finite.value, "residual": finite.residual, "terms": finite.terms, "rel_error": rel,
            }))
            rows.append({"L": L, "rho_c": finite.value, "residual": finite.residual, "rel_error": rel})
        return rows

    def cmd_hn(self, writer: RecordWriter) -> List[Dict[str, Any]]:
        """Table of log h_n with the brute-force oracle and regularity diagnostics"""
        config = self.config
        model = config.weights()
        table = weights_service.compute_h(model, config.N_max)
        for n, value in enumerate(table.log_h.tolist()):
            writer.write(ReportRecord(record="h", fields={"n": n, "log_h": value}))
        rows = []
        for n in range(min(8, config.N_max) + 1):
            oracle = weights_service.brute_force_h(model, n)
            rel = abs(table.h(n) - oracle) / oracle
            writer.write(CheckRecord(name=f"brute_force_h[{n}]", passed=rel <= 1e-12, value=rel))
            rows.append({"n": n, "h_n": table.h(n), "oracle": oracle, "rel_error": rel})
        residual = table.identity_residual()
        writer.write(CheckRecord(name="recursion_identity", passed=residual <= 1e-12, value=residual))
        if config.N_max >= 2:
            report = weights_service.verify_regularity(model, config.N_max, table=table)
            writer.write(ReportRecord(record="regularity", fields=report._asdict()))
            logger.info("Regularity: kappa=%.3g, C(%g)=%.3g, slope=%.3g", report.kappa, report.s, report.C_s,
                        report.slope)
        return rows

    def _samples(self, sampler: str, N: int, L: Optional[float]) -> SampleBatch:
        batches = run_replicas(self.config, sampler, N, L, self.seed, self.workers)
        return _merge(batches)

    def cmd_sample_fourier(self, writer: RecordWriter) -> List[Dict[str, Any]]:
        """Occupation numbers and induced cycle spectra from a Fourier-side sampler"""
        config = self.config
        if config.sampler not in FOURIER_SAMPLERS:
            raise ConfigurationError(f"sampler: sample-fourier supports {', '.join(FOURIER_SAMPLERS)}")
        N = config.N
        box = box_for(config, N)
        kernel = kernel_service.build_kernel(config.kernel(), k_max=config.k_max)
        model = config.weights()
        batch = self._samples(config.sampler, N, box.L)
        modeset = fourier.ModeSet.from_box(kernel, box, config.eps_cut)
        rho_c_L = fourier.finite_volume_density(modeset, model)
        nu_tilde = max(0.0, 1 - rho_c_L * box.volume / N)
        for index, spectrum in enumerate(batch.spectra):
            if batch.occupations:
                state = batch.occupations[index]
                for mode, n in sorted(state.occupations.items()):
                    writer.write(ModeRecord(sample=index, mode=mode, n=n))
                writer.write(OccupationRecord(sample=index, N=N, n0=state.n0, events=_events(
                    state, modeset, config, nu_tilde)))
            writer.write(SpectrumRecord(sample=index, lengths=list(spectrum.lengths)))

        estimate = spatial.estimate_nu(batch.spectra, config.K)
        fields = {"L": box.L, "N": N, "rho": N / box.volume, "rho_c_L": rho_c_L, "nu_tilde": nu_tilde,
                  "nu_plateau": estimate.plateau, "nu_plateau_stderr": estimate.plateau_stderr,
                  "nu_K": estimate.nu_K, "K": estimate.K}
        fields.update({k: v for k, v in batch.extras.items() if isinstance(v, float)})
        if batch.occupations:
            C2 = weights_service.verify_regularity(model, N, 2.0).C_s
            report = fourier.zero_mode_statistics(batch.occupations, config.event_eps, config.event_delta,
                                                  config.event_M, modeset, nu_tilde, C2=C2)
            fields.update({"mean_n0": report.mean_n0, "stderr_n0": report.stderr_n0,
                           "P_A": report.P_A, "P_B": report.P_B, "P_C": report.P_C,
                           "tail_envelope_holds": all(t.holds for t in report.tails)})
        writer.write(ReportRecord(record="fourier_summary", fields=fields))
        return [fields]

    def cmd_sample_spatial(self, writer: RecordWriter) -> List[Dict[str, Any]]:
        """Cycle spectra from the real-space Metropolis chain"""
        config = self.config
        N = config.N
        box = box_for(config, N)
        batches = run_replicas(config, "spatial", N, box.L, self.seed, self.workers)
        rows, spectra, index = [], [], 0
        for replica, batch in enumerate(batches):
            for spectrum, energy in zip(batch.spectra, batch.energies):
                writer.write(SpectrumRecord(sample=index, lengths=list(spectrum.lengths), energy=energy))
                index += 1
            spectra.extend(batch.spectra)
            accepted = batch.extras["acceptance"]
            writer.write(ReportRecord(record="chain", fields={
                "replica": replica, "acceptance": accepted, "geweke_z": batch.extras["geweke_z"],
            }))
            rows.append({"replica": replica, "position_acc": accepted["position"], "swap_acc": accepted["swap"],
                         "geweke_z": batch.extras["geweke_z"]})
        estimate = spatial.estimate_nu(spectra, config.K)
        mean_largest = float(np.mean([s.lengths[0] / s.N for s in spectra]))
        writer.write(ReportRecord(record="spatial_summary", fields={
            "L": box.L, "N": N, "nu_plateau": estimate.plateau, "nu_K": estimate.nu_K, "K": estimate.K,
            "mean_largest_fraction": mean_largest,
        }))
        return rows

    def cmd_verify_pd(self, writer: RecordWriter) -> List[Dict[str, Any]]:
        """Poisson-Dirichlet fit of the normalized long cycles"""
        config = self.config
        model = config.weights()
        if model.theta is None:
            raise DomainError("regime: verify-pd needs constant or asymptotic weights")
        N = config.N
        L = None if config.sampler == "nonspatial" else box_for(config, N).L
        batch = self._samples(config.sampler, N, L)
        estimate = spatial.estimate_nu(batch.spectra, config.K)
        rng = replica_rng(self.seed, config.replicas)
        report = stats.pd_fit_test(batch.spectra, estimate.plateau, model.theta, config.pd_k, rng,
                                   config.reference_draws, config.m_trunc)
        fields = {
            "theta": model.theta, "nu_hat": estimate.plateau, "samples": report.samples,
            "sum_squares": report.sum_squares.mean, "sum_squares_stderr": report.sum_squares.stderr,
            "reference_sum_squares": report.reference_sum_squares.mean, "z_sum_squares": report.z_sum_squares,
            "ks_pvalues": [r.pvalue for r in report.ks],
        }
        if config.sampler == "nonspatial":
            fields["beta_pvalues"] = [r.pvalue for r in stats.size_biased_beta_test(batch.sequences, model.theta)]
        writer.write(ReportRecord(record="pd_fit", fields=fields))
        rows = [{"test": f"ks[{r.coordinate}]", "statistic": r.statistic, "pvalue": r.pvalue} for r in report.ks]
        rows.append({"test": "sum_squares", "statistic": report.z_sum_squares,
                     "pvalue": float(2 * scipy_stats.norm.sf(abs(report.z_sum_squares)))})
        return rows

    def cmd_giant_cycle(self, writer: RecordWriter) -> List[Dict[str, Any]]:
        """Largest normalized cycle under logarithmic weights"""
        config = self.config
        model = config.weights()
        if model.regime != "logarithmic":
            raise ConfigurationError("regime: giant-cycle needs regime 'logarithmic'")
        N = config.N
        L = None if config.sampler == "nonspatial" else box_for(config, N).L
        batch = self._samples(config.sampler, N, L)
        estimate = spatial.estimate_nu(batch.spectra, config.K)
        report = stats.giant_cycle_test(batch.spectra, estimate.plateau)
        fields = {"nu_hat": estimate.plateau, "samples": report.samples, "P_above": report.P_above,
                  "threshold": report.threshold, "mean_ratio": report.mean_ratio, **report.quantiles}
        writer.write(ReportRecord(record="giant_cycle", fields=fields))
        return [fields]

    def cmd_scan_density(self, writer: RecordWriter) -> List[Dict[str, Any]]:
        """nu over a grid of densities, given as multiples of rho_c"""
        config = self.config
        if config.sampler == "nonspatial":
            raise ConfigurationError("sampler: scan-density needs a spatial or Fourier sampler")
        kernel = kernel_service.build_kernel(config.kernel(), k_max=config.k_max)
        model = config.weights()
        rho_c = kernel_service.critical_density(kernel, model, config.tol)
        N = config.N
        rows = []
        for multiple in config.rho_grid:
            rho = multiple * rho_c
            box = BoxGeometry.for_density(N, rho, config.d, config.k_max)
            finite = kernel_service.finite_volume_critical_density(kernel, model, box, None, config.eps_cut)
            batch = self._samples(config.sampler, N, box.L)
            estimate = spatial.estimate_nu(batch.spectra, config.K)
            row = {
                "rho": rho, "rho_over_rho_c": multiple, "L": box.L, "nu_hat": estimate.plateau,
                "stderr": estimate.plateau_stderr, "nu_theory": max(0.0, 1 - rho_c / rho),
                "nu_finite": max(0.0, 1 - finite.value / rho),
            }
            if estimate.plateau > 0.05:
                rng = replica_rng(self.seed, config.replicas + len(rows))
                if model.theta is not None:
                    report = stats.pd_fit_test(batch.spectra, estimate.plateau, model.theta, config.pd_k, rng,
                                               config.reference_draws, config.m_trunc)
                    row["pd_min_pvalue"] = report.min_pvalue
                    row["sum_squares"] = report.sum_squares.mean
                else:
                    row["P_giant"] = stats.giant_cycle_test(batch.spectra, estimate.plateau).P_above
            writer.write(ReportRecord(record="scan_row", fields=row))
            rows.append(row)
        return rows

    def cmd_selftest(self, writer: RecordWriter) -> List[Dict[str, Any]]:
        """Oracle and invariant suite"""
        from .selftest import run_checks

        checks = run_checks(self.seed)
        for check in checks:
            writer.write(check)
        failed = [c.name for c in checks if not c.passed]
        rows = [{"check": c.name, "passed": c.passed, "value": c.value} for c in checks]
        if failed:
            self.summary.write(format_table("selftest", rows))
            raise NumericalFailure(f"{len(failed)} self-test checks failed: {', '.join(failed)}")
        return rows


def _events(state: fourier.OccupationState, modeset: fourier.ModeSet, config: RunConfig,
            nu_tilde: float) -> Dict[str, bool]:
    report = fourier.zero_mode_statistics([state], config.event_eps, config.event_delta, config.event_M,
                                          modeset, nu_tilde, modes_tested=0)
    return {"A": report.P_A == 1.0, "B": report.P_B == 1.0, "C": report.P_C == 1.0}

"""
Self-test Service
Fast oracle and invariant checks over the numerical core
"""

import logging
import math
from typing import Callable, List

import numpy as np
from scipy import special

from ..exceptions import SimulationError
from ..models.config import BoxGeometry, ChainParams, CycleWeightModel, JumpKernel
from ..models.records import CheckRecord
from . import fourier, kernel as kernel_service, spatial, stats, weights as weights_service

logger = logging.getLogger(__name__)

REGIMES = (
    CycleWeightModel(regime="constant", alpha=math.log(2)),
    CycleWeightModel(regime="asymptotic", alpha=0.0, overrides=((1, 0.5), (3, -0.25))),
    CycleWeightModel(regime="logarithmic", gamma=1.0),
)

UNIT_KERNEL = JumpKernel(family="gaussian", d=3, beta=1 / (4 * math.pi))


def _check(name: str, value: float, limit: float, detail: str = "") -> CheckRecord:
    return CheckRecord(name=name, passed=bool(value <= limit), value=float(value), detail=detail or f"limit {limit:g}")


def check_h_oracle(rng: np.random.Generator) -> List[CheckRecord]:
    records = []
    for model in REGIMES:
        table = weights_service.compute_h(model, 8)
        worst = max(abs(table.h(n) / weights_service.brute_force_h(model, n) - 1) for n in range(9))
        records.append(_check(f"h_oracle[{model.regime}]", worst, 1e-12))
    return records


def check_generating_function(rng: np.random.Generator) -> List[CheckRecord]:
    records = []
    for alpha in (0.0, math.log(2)):
        model = CycleWeightModel(regime="constant", alpha=alpha)
        table = weights_service.compute_h(model, 200)
        for gamma_test in (0.5, 1.0, 2.0):
            lhs, rhs = weights_service.generating_function_check(model, gamma_test, 200, table)
            records.append(_check(f"generating_function[alpha={alpha:.3g},g={gamma_test:g}]", abs(lhs / rhs - 1), 1e-8))
    return records


def check_first_cycle_law(rng: np.random.Generator) -> List[CheckRecord]:
    records = []
    for model in REGIMES:
        total = float(weights_service.first_cycle_length_distribution(model, 500).sum())
        records.append(_check(f"first_cycle_normalized[{model.regime}]", abs(total - 1), 1e-12))
    return records


def check_critical_density(rng: np.random.Generator) -> List[CheckRecord]:
    model = CycleWeightModel(regime="constant", alpha=0.0)
    value = kernel_service.critical_density(UNIT_KERNEL, model)
    records = [_check("rho_c_zeta", abs(value / float(special.zeta(1.5)) - 1), 1e-9)]
    rule = kernel_service.radial_rule(UNIT_KERNEL)
    worst = 0.0
    for j in range(2, 6):
        integral = float(np.exp(-j * rule.eps) @ rule.weights)
        worst = max(worst, abs(integral * j ** 1.5 - 1))
    records.append(_check("radial_quadrature", worst, 1e-8))
    return records


def _monotone(name: str, values: List[float]) -> CheckRecord:
    passed = all(b < a for a, b in zip(values, values[1:]))
    return CheckRecord(name=name, passed=passed, value=values[-1], detail=", ".join(f"{v:.3g}" for v in values))


def _finite_volume_errors(kernel: JumpKernel, sides=(8.0, 16.0, 32.0)) -> List[float]:
    model = CycleWeightModel(regime="constant", alpha=0.0)
    rho_c = kernel_service.critical_density(kernel, model)
    errors = []
    for L in sides:
        finite = kernel_service.finite_volume_critical_density(kernel, model, BoxGeometry(L=L, d=3))
        errors.append(abs(finite.value / rho_c - 1))
    return errors


def check_finite_volume(rng: np.random.Generator) -> List[CheckRecord]:
    # The error falls like 1.09 / L' with L' = L / (2 sqrt(pi beta)): at beta = 1/(4 pi) that is
    # 13.5%, 6.8% and 3.4% over L = 8, 16, 32, so the 2% bound is checked at beta = 0.01 and
    # only the monotone decrease at beta = 1/(4 pi).
    unit = _finite_volume_errors(UNIT_KERNEL)
    narrow = _finite_volume_errors(JumpKernel(family="gaussian", d=3, beta=0.01))
    return [
        _monotone("finite_volume_monotone_unit_beta", unit),
        _monotone("finite_volume_monotone", narrow),
        _check("finite_volume_L32", narrow[-1], 0.02),
    ]


def _small_modeset() -> fourier.ModeSet:
    # |m|^2 <= 2 in two dimensions: one zero mode and two shells of four modes
    kernel = JumpKernel(family="gaussian", d=2, beta=1 / (4 * math.pi))
    return fourier.ModeSet.from_box(kernel, BoxGeometry(L=1.0, d=2), eps_cut=2 * math.pi + 0.1)


def check_dp_enumeration(rng: np.random.Generator) -> List[CheckRecord]:
    modeset = _small_modeset()
    model = CycleWeightModel(regime="constant", alpha=-math.log(2))
    N = 4
    table = weights_service.compute_h(model, N)
    tables = fourier.build_tables(modeset, table, N)
    law = fourier.occupation_law_exact(modeset, table, N)
    worst = 0.0
    for key, p in law.items():
        occupations = {modeset.mode_at(i): n for i, n in enumerate(key) if n}
        state = fourier.OccupationState(N=N, occupations=occupations, zero_mode=modeset.zero_mode)
        worst = max(worst, abs(fourier.backward_probability(tables, state) - p))
    return [_check("dp_vs_enumeration", worst, 1e-12, f"{len(law)} states")]


def check_partition_identities(rng: np.random.Generator) -> List[CheckRecord]:
    modeset = _small_modeset()
    model = REGIMES[0]
    N = 50
    tables = fourier.build_tables(modeset, weights_service.compute_h(model, N), N)
    effective = fourier.effective_table(modeset, model, N)
    marginal = abs(math.expm1(effective.log_h[N] - tables.log_Y[N]))
    return [
        _check("y_identity", tables.identity_residual(), 1e-10),
        _check("marginal_matches_y", marginal, 1e-10),
    ]


def check_mu_lambda(rng: np.random.Generator) -> List[CheckRecord]:
    modeset = fourier.ModeSet.from_energies([0.5, 1.0], volume=2.0)
    model = REGIMES[0]
    measure = fourier.mu_lambda(modeset, model, N_trunc=400)
    worst = 0.0
    for lam in (-0.5, 0.2, 0.8):
        closed = fourier.mu_lambda_laplace(modeset, model, lam)
        worst = max(worst, abs(measure.laplace(lam) / closed - 1))
    records = [_check("mu_lambda_laplace", worst, 1e-9)]

    model = CycleWeightModel(regime="constant", alpha=0.0)
    deviations = []
    for L in (8.0, 16.0, 32.0):
        box_modes = fourier.ModeSet.from_box(UNIT_KERNEL, BoxGeometry(L=L, d=3))
        lam = fourier.lambda_boundary(box_modes)
        deviations.append(abs(fourier.mu_lambda_laplace(box_modes, model, lam) - 1))
    records.append(_monotone("mu_lambda_laplace_finite_size", deviations))
    return records


def check_spatial_bookkeeping(rng: np.random.Generator) -> List[CheckRecord]:
    N = 12
    params = ChainParams(
        kernel=UNIT_KERNEL, weights=REGIMES[1], box=BoxGeometry.for_density(N, 1.0, 3),
        N=N, sweeps=200, burn_in=10, audit_interval=5,
    )
    try:
        result = spatial.SpatialChain(params, rng).run()
    except SimulationError as e:
        return [CheckRecord(name="spatial_incremental_energy", passed=False, detail=str(e))]
    return [CheckRecord(name="spatial_incremental_energy", passed=True, value=float(len(result.spectra)),
                        detail="40 audits")]


def check_pd_reference(rng: np.random.Generator) -> List[CheckRecord]:
    estimate = stats.pd_sum_squares_reference(1.0, 20_000, 200, rng)
    z = abs(estimate.mean - 0.5) / estimate.stderr
    return [_check("pd_sum_squares", z, 4.0, f"mean {estimate.mean:.5f}")]


CHECKS: List[Callable[[np.random.Generator], List[CheckRecord]]] = [
    check_h_oracle,
    check_generating_function,
    check_first_cycle_law,
    check_critical_density,
    check_finite_volume,
    check_dp_enumeration,
    check_partition_identities,
    check_mu_lambda,
    check_spatial_bookkeeping,
    check_pd_reference,
]


def run_checks(seed: int = 0) -> List[CheckRecord]:
    """Run every check with its own generator derived from the seed"""
    records = []
    for index, check in enumerate(CHECKS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        try:
            results = check(rng)
        except SimulationError as e:
            results = [CheckRecord(name=check.__name__.removeprefix("check_"), passed=False, detail=str(e))]
        for record in results:
            logger.log(logging.INFO if record.passed else logging.ERROR, "%s: %s (%s)",
                       record.name, "ok" if record.passed else "FAILED", record.detail)
        records.extend(results)
    return records

import math
from collections import Counter

import numpy as np
import pytest

from srperm.exceptions import BudgetRefusal, ConfigurationError, DomainError
from srperm.models.config import BoxGeometry, CycleWeightModel, JumpKernel, RunConfig
from srperm.services import fourier as F
from srperm.services import kernel as kernel_service
from srperm.services import spatial, stats
from srperm.services.experiments import box_for, draw_samples
from srperm.services import weights as W


@pytest.fixture
def shell_modes():
    """Zero mode plus two shells of four equal-energy modes (d = 2, |m|^2 <= 2)"""
    kernel = JumpKernel(family="gaussian", d=2, beta=1 / (4 * math.pi))
    return F.ModeSet.from_box(kernel, BoxGeometry(L=1.0, d=2), eps_cut=2 * math.pi + 0.1)


@pytest.fixture
def line_modes():
    return F.ModeSet.from_energies([0.3, 0.8, 1.5])


def _state(modeset, key, N):
    occupations = {modeset.mode_at(i): n for i, n in enumerate(key) if n}
    return F.OccupationState(N=N, occupations=occupations, zero_mode=modeset.zero_mode)


def test_mode_enumeration_order(shell_modes):
    assert shell_modes.size == 9
    assert shell_modes.n_shells == 3
    modes = [mode for mode, _ in shell_modes.modes()]
    assert modes[0] == (0, 0)
    assert modes[1:5] == sorted(modes[1:5])
    assert all(sum(m * m for m in mode) == 1 for mode in modes[1:5])
    assert all(sum(m * m for m in mode) == 2 for mode in modes[5:])
    for index, mode in enumerate(modes):
        assert shell_modes.index_of(mode) == index
        assert shell_modes.mode_at(index) == mode


@pytest.mark.parametrize("N", [1, 3, 4])
def test_backward_probabilities_match_enumeration(shell_modes, ewens2, N):
    table = W.compute_h(ewens2, N)
    tables = F.build_tables(shell_modes, table, N)
    law = F.occupation_law_exact(shell_modes, table, N)
    assert sum(law.values()) == pytest.approx(1.0, abs=1e-12)
    for key, p in law.items():
        assert F.backward_probability(tables, _state(shell_modes, key, N)) == pytest.approx(p, abs=1e-12)


def test_exact_sampler_frequencies(shell_modes, ewens2, rng):
    N = 3
    table = W.compute_h(ewens2, N)
    tables = F.build_tables(shell_modes, table, N)
    law = F.occupation_law_exact(shell_modes, table, N)
    observed = Counter()
    for _ in range(6000):
        state = F.sample_occupations_exact(tables, rng)
        assert state.total() == N
        observed[tuple(state.n(mode) for mode, _ in shell_modes.modes())] += 1
    assert stats.chi_square_gof(observed, law).pvalue > 1e-3


def test_partition_identities(shell_modes):
    model = CycleWeightModel(alpha=math.log(2))
    N = 60
    tables = F.build_tables(shell_modes, W.compute_h(model, N), N)
    assert tables.identity_residual() < 1e-10
    effective = F.effective_table(shell_modes, model, N)
    np.testing.assert_allclose(effective.log_h, tables.log_Y, rtol=0, atol=1e-10)


def test_zero_mode_distribution(line_modes, ewens2):
    N = 40
    tables = F.build_tables(line_modes, W.compute_h(ewens2, N), N)
    p = F.zero_mode_distribution(tables)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert F.zero_mode_mean(tables) == pytest.approx(float(np.dot(p, np.arange(N + 1))) / N, rel=1e-12)
    assert 0 < F.zero_mode_mean(tables) < 1


def test_budget_refusal_suggests_mcmc(line_modes, ewens2):
    with pytest.raises(BudgetRefusal, match="fourier-mcmc"):
        F.build_tables(line_modes, W.compute_h(ewens2, 100), 100, budget=10.0)


def test_table_must_cover_n(line_modes, ewens2):
    with pytest.raises(ConfigurationError):
        F.build_tables(line_modes, W.compute_h(ewens2, 5), 10)


def test_transfer_from_empty_mode():
    state = F.OccupationState(N=2, occupations={(0,): 2}, zero_mode=(0,))
    state.transfer((0,), (1,))
    assert state.occupations == {(0,): 1, (1,): 1}
    with pytest.raises(ValueError):
        state.transfer((2,), (0,))


@pytest.mark.parametrize("proposal", ["unit", "uniform"])
def test_mcmc_targets_occupation_law(line_modes, ewens2, seeded, proposal):
    N = 5
    table = W.compute_h(ewens2, N)
    law = F.occupation_law_exact(line_modes, table, N)
    chain = F.OccupationChain(line_modes, table, N, seeded(1, len(proposal)), proposal=proposal)
    chain.run(2000)
    observed = Counter()
    for _ in range(3000):
        chain.run(100)
        observed[tuple(chain.counts)] += 1
    assert stats.chi_square_gof(observed, law).pvalue > 1e-4


def test_mcmc_without_steps_is_not_equilibrated(line_modes, ewens2, rng):
    state = F.sample_occupations_mcmc(line_modes, W.compute_h(ewens2, 4), 4, 0, rng)
    assert not state.equilibrated
    assert state.n0 == 4


def test_unknown_proposal(line_modes, ewens2, rng):
    with pytest.raises(ConfigurationError):
        F.OccupationChain(line_modes, W.compute_h(ewens2, 4), 4, rng, proposal="gibbs")


def test_marginal_sampler_follows_exact_law(line_modes, ewens2, rng):
    N = 6
    law = F.cycle_count_marginal_exact(line_modes, ewens2, N)
    table = F.effective_table(line_modes, ewens2, N)
    observed = Counter(
        tuple(sorted(F.sample_cycle_marginal(line_modes, ewens2, N, rng, table), reverse=True))
        for _ in range(5000)
    )
    assert stats.chi_square_gof(observed, law).pvalue > 1e-3


def test_occupations_then_cycles_match_marginal(line_modes, ewens2, seeded):
    N = 6
    table = W.compute_h(ewens2, N)
    tables = F.build_tables(line_modes, table, N)
    rng = seeded(2)
    via_modes = Counter()
    for _ in range(5000):
        state = F.sample_occupations_exact(tables, rng)
        via_modes[tuple(sorted(F.cycle_lengths_given_occupations(state, ewens2, table, rng), reverse=True))] += 1
    law = F.cycle_count_marginal_exact(line_modes, ewens2, N)
    assert stats.chi_square_gof(via_modes, law).pvalue > 1e-3


def test_cycle_counts_given_occupations(line_modes, ewens2, rng):
    state = F.OccupationState(N=7, occupations={(0,): 4, (2,): 3}, zero_mode=(0,))
    counts = F.sample_permutation_given_occupations(state, ewens2, W.compute_h(ewens2, 7), rng)
    assert sum(j * r for j, r in counts.items()) == 7


def test_mu_lambda_laplace_closed_form(ewens2):
    modeset = F.ModeSet.from_energies([0.9, 1.4], volume=3.0)
    measure = F.mu_lambda(modeset, ewens2, N_trunc=600)
    assert measure.residual < 1e-12
    assert measure.laplace(0.0) == pytest.approx(1.0, abs=1e-12)
    for lam in (-1.0, 0.5, 1.5):
        assert measure.laplace(lam) == pytest.approx(F.mu_lambda_laplace(modeset, ewens2, lam), rel=1e-9)


def test_mu_lambda_mean_is_finite_volume_density(ewens2):
    modeset = F.ModeSet.from_energies([0.9, 1.4], volume=3.0)
    measure = F.mu_lambda(modeset, ewens2, N_trunc=600)
    mean = float(np.sum(np.exp(measure.log_probs) * measure.densities))
    assert mean == pytest.approx(F.finite_volume_density(modeset, ewens2), rel=1e-10)


def test_laplace_domain(ewens2):
    modeset = F.ModeSet.from_energies([0.5], volume=1.0)
    with pytest.raises(DomainError):
        F.mu_lambda_laplace(modeset, ewens2, 0.6)


def test_finite_volume_density_matches_kernel_sum(unit_kernel):
    box = BoxGeometry(L=3.0, d=3)
    model = CycleWeightModel(alpha=0.2)
    modeset = F.ModeSet.from_box(unit_kernel, box)
    assert F.finite_volume_density(modeset, model) == pytest.approx(
        kernel_service.finite_volume_critical_density(unit_kernel, model, box).value, rel=1e-10
    )


def test_concentration_report(unit_kernel):
    modeset = F.ModeSet.from_box(unit_kernel, BoxGeometry(L=4.0, d=3))
    report = F.mu_lambda_concentration(modeset, CycleWeightModel(alpha=0.5), eps=0.5)
    assert 0.0 <= report.tail_mass <= 1.0
    assert report.bound == pytest.approx(3 * math.exp(-0.5 * 64 ** (1 / 6)))


def test_zero_mode_statistics(line_modes):
    samples = [
        F.OccupationState(N=10, occupations={(0,): 8, (1,): 2}, zero_mode=(0,)),
        F.OccupationState(N=10, occupations={(0,): 2, (3,): 8}, zero_mode=(0,)),
    ]
    report = F.zero_mode_statistics(samples, eps=0.1, delta=0.5, M=5, modeset=line_modes, nu_tilde=0.8)
    assert report.mean_n0 == pytest.approx(0.5)
    assert report.P_A == pytest.approx(0.5)
    assert report.samples == 2
    with pytest.raises(ConfigurationError):
        F.zero_mode_statistics([], 0.1, 0.5, 5, line_modes, 0.8)


@pytest.mark.slow
def test_zero_mode_fraction_at_twice_critical_density(unit_kernel):
    N = 4096
    model = CycleWeightModel()
    rho = 2 * kernel_service.critical_density(unit_kernel, model)
    box = BoxGeometry.for_density(N, rho, 3)
    modeset = F.ModeSet.from_box(unit_kernel, box)
    tables = F.build_tables(modeset, W.compute_h(model, N), N)
    nu_tilde = 1 - F.finite_volume_density(modeset, model) / rho
    assert F.zero_mode_mean(tables) == pytest.approx(nu_tilde, abs=0.03)


# Sampled statistics at N = 4096

DESK_N = 4096


def _desk_samples(multiple, draws, seed, sampler="fourier-exact", **overrides):
    """Exact Fourier-side samples at `multiple` times the critical density of the unit gaussian kernel"""
    config = RunConfig(beta=1 / (4 * math.pi), N=DESK_N, sampler=sampler, draws=draws, **overrides)
    rho_c = kernel_service.critical_density(config.kernel(), config.weights())
    config = config.model_copy(update={"rho": multiple * rho_c})
    box = box_for(config, DESK_N)
    batch = draw_samples(config, sampler, DESK_N, box.L, seed, 0, draws)
    modeset = F.ModeSet.from_box(config.kernel(), box, config.eps_cut)
    nu_tilde = 1 - F.finite_volume_density(modeset, config.weights()) * box.volume / DESK_N
    return batch, modeset, nu_tilde


@pytest.fixture(scope="module")
def supercritical():
    return _desk_samples(2.0, draws=800, seed=41)


@pytest.fixture(scope="module")
def subcritical():
    return _desk_samples(0.5, draws=200, seed=43)


@pytest.mark.slow
def test_nu_plateau_tracks_the_zero_mode_fraction(supercritical):
    batch, _, nu_tilde = supercritical
    estimate = spatial.estimate_nu(batch.spectra)
    assert estimate.plateau == pytest.approx(batch.extras["exact_mean_n0"], abs=0.03)
    assert estimate.plateau == pytest.approx(nu_tilde, abs=0.03)
    assert estimate.nu_K == pytest.approx(0.5, abs=0.05)


@pytest.mark.slow
def test_nu_vanishes_below_critical_density(subcritical):
    batch, modeset, nu_tilde = subcritical
    assert spatial.estimate_nu(batch.spectra).plateau <= 0.05
    report = F.zero_mode_statistics(batch.occupations, 0.1, 0.5, 50, modeset, max(nu_tilde, 0.0))
    assert report.mean_n0 <= 0.05


@pytest.mark.slow
def test_zero_mode_events_and_tail_envelope(supercritical):
    batch, modeset, nu_tilde = supercritical
    C2 = W.verify_regularity(CycleWeightModel(), DESK_N, 2.0).C_s
    report = F.zero_mode_statistics(batch.occupations, 0.1, 0.5, 50, modeset, nu_tilde, C2=C2)
    assert report.P_A >= 0.95
    assert len(report.tails) == 5
    assert all(tail.holds for tail in report.tails)


@pytest.mark.slow
def test_long_cycles_follow_poisson_dirichlet(supercritical, seeded):
    batch, _, _ = supercritical
    nu_hat = spatial.estimate_nu(batch.spectra).plateau
    report = stats.pd_fit_test(batch.spectra, nu_hat, 1.0, 3, seeded(5), reference_draws=20_000)
    assert report.sum_squares.mean == pytest.approx(0.5, abs=0.03)
    assert all(r.pvalue > 0.01 for r in report.ks)


@pytest.mark.slow
def test_logarithmic_weights_form_one_giant_cycle():
    batch, _, _ = _desk_samples(2.0, draws=200, seed=47, sampler="marginal", regime="logarithmic", gamma=1.0)
    report = stats.giant_cycle_test(batch.spectra, spatial.estimate_nu(batch.spectra).plateau)
    assert report.P_above >= 0.95


@pytest.mark.slow
def test_logarithmic_weights_form_one_giant_cycle_without_space(seeded):
    model = CycleWeightModel(regime="logarithmic", gamma=1.0)
    table = W.compute_h(model, DESK_N)
    rng = seeded(6)
    spectra = [stats.CycleSpectrum.from_lengths(W.sample_cycle_lengths(model, DESK_N, table, rng))
               for _ in range(400)]
    report = stats.giant_cycle_test(spectra, spatial.estimate_nu(spectra).plateau)
    assert report.P_above >= 0.95

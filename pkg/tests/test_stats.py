import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as scipy_stats

from srperm.exceptions import ConfigurationError, DomainError
from srperm.models.config import CycleWeightModel
from srperm.services import stats as S
from srperm.services import weights as W


def _ewens_sequences(theta, n, draws, rng):
    model = CycleWeightModel(alpha=-math.log(theta))
    table = W.compute_h(model, n)
    return [W.sample_cycle_lengths(model, n, table, rng) for _ in range(draws)]


def test_spectrum_is_sorted_and_complete():
    spectrum = S.CycleSpectrum.from_lengths([1, 5, 2, 2])
    assert spectrum.lengths == (5, 2, 2, 1)
    assert spectrum.N == 10
    assert S.CycleSpectrum.from_counts({2: 2, 5: 1, 1: 1}) == spectrum
    with pytest.raises(ValueError):
        S.CycleSpectrum(lengths=(1, 2), N=3)
    with pytest.raises(ValueError):
        S.CycleSpectrum(lengths=(2, 1), N=4)


def test_normalized_pads_with_zeros():
    spectrum = S.CycleSpectrum.from_lengths([6, 4])
    np.testing.assert_allclose(spectrum.normalized(0.5, 4), [1.2, 0.8, 0.0, 0.0])
    assert spectrum.fraction_above(4) == pytest.approx(0.6)
    assert spectrum.fraction_above(0) == 1.0


@settings(max_examples=30, deadline=None)
@given(theta=st.floats(min_value=0.1, max_value=10), seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_gem_fragments_are_a_subprobability(theta, seed):
    fragments = S.sample_gem(theta, 50, np.random.default_rng(seed), size=20)
    assert np.all(fragments >= 0)
    assert np.all(fragments.sum(axis=1) <= 1 + 1e-12)


def test_first_stick_is_beta(rng):
    fragments = S.sample_gem(2.0, 1, rng, size=5000)
    assert scipy_stats.kstest(fragments[:, 0], scipy_stats.beta(1, 2).cdf).pvalue > 1e-3


def test_gem_rejects_bad_parameters(rng):
    with pytest.raises(ConfigurationError):
        S.sample_gem(0.0, 5, rng)
    with pytest.raises(ConfigurationError):
        S.sample_gem(1.0, 0, rng)


@pytest.mark.parametrize("theta", [0.5, 1.0, 2.0])
def test_sum_of_squares_reference(theta, rng):
    estimate = S.pd_sum_squares_reference(theta, 20_000, 200, rng)
    assert abs(estimate.mean - 1 / (1 + theta)) < 4 * estimate.stderr
    assert estimate.residual == pytest.approx((theta / (1 + theta)) ** 200)


def test_ewens_spectra_fit_poisson_dirichlet(seeded):
    sequences = _ewens_sequences(1.0, 2000, 400, seeded(1))
    spectra = [S.CycleSpectrum.from_lengths(s) for s in sequences]
    report = S.pd_fit_test(spectra, 1.0, 1.0, 3, seeded(2), reference_draws=20_000)
    assert report.samples == 400
    assert report.min_pvalue > 1e-3
    assert abs(report.z_sum_squares) < 4


def test_pd_fit_needs_long_cycles(rng):
    spectra = [S.CycleSpectrum.from_lengths([1] * 10)]
    with pytest.raises(DomainError):
        S.pd_fit_test(spectra, 0.0, 1.0, 3, rng)


def test_size_biased_sticks_are_beta(seeded):
    sequences = _ewens_sequences(2.0, 2000, 1000, seeded(3))
    results = S.size_biased_beta_test(sequences, 2.0)
    assert len(results) == 3
    assert min(r.pvalue for r in results) > 1e-3


def test_logarithmic_weights_give_a_giant_cycle(rng):
    model = CycleWeightModel(regime="logarithmic", gamma=1.0)
    table = W.compute_h(model, 2000)
    spectra = [S.CycleSpectrum.from_lengths(W.sample_cycle_lengths(model, 2000, table, rng)) for _ in range(300)]
    report = S.giant_cycle_test(spectra, 1.0)
    assert report.P_above > 0.9
    assert report.quantiles["q50"] > 0.95


def test_chi_square_gof_pools_sparse_cells():
    law = {"a": 0.5, "b": 0.3, "c": 0.19, "d": 0.01}
    observed = {"a": 500, "b": 300, "c": 190, "d": 10}
    result = S.chi_square_gof(observed, law)
    assert result.statistic == pytest.approx(0.0, abs=1e-9)
    assert result.pvalue == pytest.approx(1.0)
    with pytest.raises(ValueError):
        S.chi_square_gof({"e": 3}, law)


def test_chi_square_two_sample_homogeneous():
    counts = {1: 120, 2: 80, 3: 40, 4: 2}
    result = S.chi_square_two_sample(counts, dict(counts))
    assert result.statistic == pytest.approx(0.0, abs=1e-9)
    assert result.pvalue == pytest.approx(1.0)


def test_geweke_detects_drift(rng):
    assert abs(S.geweke_z(rng.standard_normal(5000))) < 4
    assert abs(S.geweke_z(np.linspace(0, 10, 5000) + rng.standard_normal(5000))) > 10

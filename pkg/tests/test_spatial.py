import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srperm.exceptions import IntegrityError
from srperm.models.config import BoxGeometry, ChainParams, CycleWeightModel, RunConfig
from srperm.services import spatial as P
from srperm.services.experiments import box_for, draw_samples
from srperm.services.kernel import critical_density
from srperm.services.selftest import UNIT_KERNEL
from srperm.services.stats import CycleSpectrum, chi_square_gof, chi_square_two_sample

MILD = CycleWeightModel(regime="asymptotic", alpha=0.2, overrides=((1, 0.5), (3, -0.25)))


def _config(unit_kernel, box, targets, weights=MILD, seed=0):
    positions = np.random.default_rng(seed).random((len(targets), box.d)) * box.L
    return P.SpatialConfig(positions, targets, unit_kernel, weights, box)


def test_targets_must_be_a_permutation(unit_kernel, small_box):
    with pytest.raises(ValueError):
        _config(unit_kernel, small_box, [0, 0, 1])


def test_identity_energy(unit_kernel, small_box):
    config = _config(unit_kernel, small_box, range(5))
    xi0 = -float(np.atleast_1d(config.periodizer.log_weight(np.zeros((1, 3))))[0])
    assert config.H == pytest.approx(5 * xi0 + 5 * 0.5, rel=1e-12)
    assert config.counts == {1: 5}


def test_swap_of_fixed_points_merges(unit_kernel, small_box):
    config = _config(unit_kernel, small_box, range(4))
    proposal = P.propose_swap_move(config, 0, 1)
    assert proposal.split is None
    assert proposal.cycle_delta == {2: 1, 1: -2}
    before = config.H
    P.apply_swap_move(config, proposal)
    assert config.counts == {1: 2, 2: 1}
    assert config.H == pytest.approx(before + proposal.dH)
    assert config.H == pytest.approx(P.energy(config, config.kernel, config.weights, config.box), rel=1e-12)
    P.audit(config)


def test_swap_within_a_cycle_splits(unit_kernel, small_box):
    config = _config(unit_kernel, small_box, [1, 2, 3, 0])
    proposal = P.propose_swap_move(config, 0, 2)
    assert proposal.split == 2
    assert proposal.cycle_delta == {2: 2, 4: -1}
    P.apply_swap_move(config, proposal)
    assert sorted(config.lengths()) == [2, 2]
    assert config.walk(0) == [0, 3]
    P.audit(config)


def test_swap_needs_distinct_indices(unit_kernel, small_box):
    with pytest.raises(ValueError):
        P.propose_swap_move(_config(unit_kernel, small_box, range(3)), 1, 1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1), N=st.integers(min_value=2, max_value=10))
def test_incremental_bookkeeping_survives_mixed_moves(seed, N):
    rng = np.random.default_rng(seed)
    box = BoxGeometry(L=2.0, d=3)
    config = _config(UNIT_KERNEL, box, rng.permutation(N).tolist(), seed=seed)
    for _ in range(150):
        if rng.random() < 0.5:
            i = int(rng.integers(N))
            new_x, dH = P.propose_position_move(config, i, rng, scale=0.5)
            P.apply_position_move(config, i, new_x, dH)
        else:
            i, j = (int(v) for v in rng.choice(N, size=2, replace=False))
            P.apply_swap_move(config, P.propose_swap_move(config, i, j))
    assert sum(j * r for j, r in config.counts.items()) == N
    assert sorted(config.lengths()) == sorted(len(config.walk(i)) for i in {config.cycle_id[k]: k for k in range(N)}.values())
    P.audit(config)


def test_audit_catches_a_corrupted_cache(unit_kernel, small_box):
    config = _config(unit_kernel, small_box, [1, 0, 2])
    config.H += 1.0
    with pytest.raises(IntegrityError) as info:
        P.audit(config)
    assert info.value.state_dump["targets"] == [1, 0, 2]


def test_forbidden_cycle_length_is_never_accepted(unit_kernel, small_box, rng):
    weights = CycleWeightModel(regime="asymptotic", alpha=0.0, overrides=((2, 800.0),))
    params = ChainParams(kernel=unit_kernel, weights=weights, box=small_box, N=4, sweeps=2, burn_in=0)
    chain = P.SpatialChain(params, rng)
    assert P.propose_swap_move(chain.config, 0, 1).dH == float("inf")
    assert not chain.swap_step(0, 1)
    assert chain.config.counts == {1: 4}


def test_run_chain_schedule(unit_kernel, seeded):
    N = 6
    params = ChainParams(
        kernel=unit_kernel, weights=MILD, box=BoxGeometry.for_density(N, 1.0, 3),
        N=N, sweeps=50, burn_in=10, thinning=4, audit_interval=5,
    )
    result = P.run_chain(params, seeded(4))
    assert result.sweeps == list(range(10, 50, 4))
    assert all(s.N == N for s in result.spectra)
    assert len(result.energies) == 50
    assert set(result.acceptance) == {"position", "swap"}
    assert all(0.0 <= v <= 1.0 for v in result.acceptance.values())


def test_chains_with_the_same_seed_agree(unit_kernel, seeded):
    params = ChainParams(kernel=unit_kernel, weights=MILD, box=BoxGeometry.for_density(5, 1.0, 3),
                         N=5, sweeps=20, burn_in=5)
    first = P.run_chain(params, seeded(7))
    second = P.run_chain(params, seeded(7))
    assert first.spectra == second.spectra
    assert first.energies == second.energies


def test_k_grid_contains_window_ends():
    grid = P.k_grid(1000)
    assert {0, 10, 100, 1000} <= set(grid)
    assert grid == sorted(set(grid))


@pytest.mark.parametrize("lengths, expected", [([1000], 1.0), ([1] * 1000, 0.0)])
def test_estimate_nu_extremes(lengths, expected):
    spectra = [CycleSpectrum.from_lengths(lengths)] * 3
    estimate = P.estimate_nu(spectra)
    assert estimate.K == 100
    assert estimate.nu_K == pytest.approx(expected)
    assert estimate.plateau == pytest.approx(expected, abs=1e-9)
    assert estimate.stderr_K == 0.0


def test_estimate_nu_mixed_spectrum():
    spectra = [CycleSpectrum.from_lengths([600] + [1] * 400), CycleSpectrum.from_lengths([400, 200] + [1] * 400)]
    estimate = P.estimate_nu(spectra)
    assert estimate.nu_K == pytest.approx(0.6)
    assert estimate.plateau == pytest.approx(0.6, abs=1e-9)
    with pytest.raises(ValueError):
        P.estimate_nu([])


# Equal-length merges and splits

PAIR_WEIGHTS = CycleWeightModel(regime="asymptotic", alpha=0.0, overrides=((1, 0.5), (2, 0.1)))


def test_merging_two_fixed_points_counts_both(unit_kernel, small_box):
    config = P.SpatialConfig(np.zeros((2, 3)), [0, 1], unit_kernel, PAIR_WEIGHTS, small_box)
    proposal = P.propose_swap_move(config, 0, 1)
    assert proposal.cycle_delta == {2: 1, 1: -2}
    assert proposal.dH == pytest.approx(0.1 - 2 * 0.5, abs=1e-12)


def test_even_split_counts_both_halves(unit_kernel, small_box):
    config = P.SpatialConfig(np.zeros((2, 3)), [1, 0], unit_kernel, PAIR_WEIGHTS, small_box)
    proposal = P.propose_swap_move(config, 0, 1)
    assert proposal.split == 1
    assert proposal.cycle_delta == {1: 2, 2: -1}
    assert proposal.dH == pytest.approx(2 * 0.5 - 0.1, abs=1e-12)


@pytest.mark.parametrize("targets", [[0, 1, 2, 3], [1, 0, 3, 2], [1, 2, 3, 0], [2, 3, 0, 1]])
def test_swap_twice_is_the_identity(unit_kernel, small_box, targets):
    config = _config(unit_kernel, small_box, targets)
    before = (list(config.target), dict(config.counts), config.H)
    for i, j in [(0, 1), (0, 2), (1, 3)]:
        P.apply_swap_move(config, P.propose_swap_move(config, i, j))
        P.apply_swap_move(config, P.propose_swap_move(config, i, j))
        assert config.target == before[0]
        assert config.counts == before[1]
        assert config.H == pytest.approx(before[2], rel=1e-12)
    P.audit(config)


# Energy invariances

@pytest.mark.parametrize("seed", range(5))
def test_energy_is_translation_invariant(unit_kernel, small_box, seed):
    rng = np.random.default_rng(seed)
    targets = rng.permutation(6).tolist()
    config = _config(unit_kernel, small_box, targets, seed=seed)
    shift = rng.normal(size=3) * 3
    moved = P.SpatialConfig(config.x + shift, targets, unit_kernel, MILD, small_box)
    assert moved.H == pytest.approx(config.H, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_energy_is_relabeling_invariant(unit_kernel, small_box, seed):
    rng = np.random.default_rng(seed)
    N = 6
    targets = rng.permutation(N)
    config = _config(unit_kernel, small_box, targets.tolist(), seed=seed)
    sigma = rng.permutation(N)
    x = np.empty_like(config.x)
    x[sigma] = config.x
    relabeled = np.empty(N, dtype=int)
    relabeled[sigma] = sigma[targets]
    other = P.SpatialConfig(x, relabeled.tolist(), unit_kernel, MILD, small_box)
    assert other.H == pytest.approx(config.H, rel=1e-12)
    assert other.counts == config.counts


# Frozen positions: the swap chain against the exact Boltzmann law

def _boltzmann_law(positions, weights, box):
    N = len(positions)
    energies = {
        perm: P.SpatialConfig(positions, perm, UNIT_KERNEL, weights, box).H
        for perm in itertools.permutations(range(N))
    }
    lowest = min(energies.values())
    mass = {perm: math.exp(lowest - H) for perm, H in energies.items()}
    total = sum(mass.values())
    return {perm: m / total for perm, m in mass.items()}


def _frozen_chain_counts(positions, weights, box, rng, samples, thinning):
    N = len(positions)
    params = ChainParams(kernel=UNIT_KERNEL, weights=weights, box=box, N=N, sweeps=1, burn_in=0)
    config = P.SpatialConfig(positions, range(N), UNIT_KERNEL, weights, box)
    chain = P.SpatialChain(params, rng, config=config)
    for _ in range(50):
        chain.sweep(positions=False)
    counts = Counter()
    for _ in range(samples):
        for _ in range(thinning):
            chain.sweep(positions=False)
        counts[tuple(chain.config.target)] += 1
    P.audit(chain.config)
    assert np.allclose(chain.config.x, positions)
    return counts


def _check_frozen_chain(N, samples, thinning, seeded):
    box = BoxGeometry(L=2.0, d=3)
    positions = seeded(N).random((N, 3)) * 0.6
    law = _boltzmann_law(positions, MILD, box)
    counts = _frozen_chain_counts(positions, MILD, box, seeded(N, 1), samples, thinning)
    assert chi_square_gof(counts, law).pvalue > 1e-3

    keys = list(law)
    exact_draws = seeded(N, 2).choice(len(keys), size=samples, p=[law[k] for k in keys])
    reference = Counter(keys[i] for i in exact_draws)
    assert chi_square_two_sample(counts, reference).pvalue > 1e-3


def test_frozen_swap_chain_matches_boltzmann_on_s3(seeded):
    _check_frozen_chain(3, samples=6000, thinning=10, seeded=seeded)


@pytest.mark.slow
def test_frozen_swap_chain_matches_boltzmann_on_s4(seeded):
    _check_frozen_chain(4, samples=20000, thinning=10, seeded=seeded)


# Real space against the Fourier side

@pytest.mark.slow
def test_largest_cycle_agrees_with_fourier_sampler():
    N = 64
    config = RunConfig(beta=1 / (4 * math.pi), N=N, sweeps=3000, burn_in=1000, thinning=5, audit_interval=500)
    rho = 2 * critical_density(config.kernel(), config.weights())
    config = config.model_copy(update={"rho": rho, "draws": 2000})
    L = box_for(config, N).L

    chain_means = []
    for replica in range(8):
        batch = draw_samples(config, "spatial", N, L, seed=29, replica=replica, draws=config.draws)
        chain_means.append(np.mean([s.lengths[0] / N for s in batch.spectra]))
    spatial_mean = float(np.mean(chain_means))
    spatial_stderr = float(np.std(chain_means, ddof=1) / math.sqrt(len(chain_means)))

    batch = draw_samples(config, "fourier-exact", N, L, seed=31, replica=0, draws=2000)
    largest = np.array([s.lengths[0] / N for s in batch.spectra])
    fourier_stderr = float(largest.std(ddof=1) / math.sqrt(len(largest)))

    assert abs(spatial_mean - largest.mean()) <= 3 * math.hypot(spatial_stderr, fourier_stderr)

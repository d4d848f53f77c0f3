"""
Fourier Service
Occupation numbers of dual-lattice modes: exact partition tables, exact and Metropolis
samplers, per-mode permutations, the density measure of the nonzero modes
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from ..exceptions import BudgetRefusal, ConfigurationError, DomainError, NumericalFailure
from ..models.config import BoxGeometry, CycleWeightModel, JumpKernel
from ..models.settings import get_settings
from . import kernel as kernel_service
from . import weights as weights_service
from .weights import WeightTable

logger = logging.getLogger(__name__)

Mode = Tuple[int, ...]

# Floats touched per block of the log-domain convolution.
CONVOLUTION_BLOCK = 1 << 21
# Largest number of occupation vectors the enumeration oracle visits.
ENUMERATION_CAP = 200_000
# Cap on the j-series of the nonzero-mode generating function.
J_SERIES_CAP = 1 << 24


@lru_cache(maxsize=8192)
def lattice_points(norm2: int, d: int) -> Tuple[Mode, ...]:
    """Integer vectors m with |m|^2 = norm2, lexicographically ordered"""
    r = math.isqrt(norm2)
    if d == 1:
        if r * r != norm2:
            return ()
        return ((-r,), (r,)) if r else ((0,),)
    points = []
    for m in range(-r, r + 1):
        for rest in lattice_points(norm2 - m * m, d - 1):
            points.append((m,) + rest)
    return tuple(points)


class ModeSet:
    """The zero mode and the retained nonzero modes, grouped into shells of equal eps"""

    def __init__(self, eps, multiplicity, volume: float, d: int = 1, norm2=None,
                 k_norm=None, kernel: Optional[JumpKernel] = None, cutoff_residual: float = 0.0):
        self.eps = np.asarray(eps, dtype=float)
        self.multiplicity = np.asarray(multiplicity, dtype=np.int64)
        if self.eps[0] != 0.0 or self.multiplicity[0] != 1:
            raise ConfigurationError("modes: the first shell must be the zero mode alone")
        if np.any(self.eps[1:] <= 0) or np.any(self.multiplicity < 1):
            raise ConfigurationError("modes: nonzero modes need eps > 0 and positive multiplicity")
        self.volume = float(volume)
        self.d = d
        self.norm2 = None if norm2 is None else np.asarray(norm2, dtype=np.int64)
        self.k_norm = np.asarray(k_norm if k_norm is not None else self.eps, dtype=float)
        self.kernel = kernel
        self.cutoff_residual = cutoff_residual
        self.offsets = np.concatenate([[0], np.cumsum(self.multiplicity)])
        self._shell_of_norm = None if self.norm2 is None else {int(v): s for s, v in enumerate(self.norm2)}

    @classmethod
    def from_box(cls, kernel: JumpKernel, box: BoxGeometry, eps_cut: float = 40.0) -> "ModeSet":
        shells = kernel_service.lattice_shells(kernel, box, eps_cut)
        modeset = cls(
            eps=np.concatenate([[0.0], shells.eps]),
            multiplicity=np.concatenate([[1], shells.multiplicity]),
            volume=box.volume,
            d=box.d,
            norm2=np.concatenate([[0], shells.norm2]),
            k_norm=np.concatenate([[0.0], np.sqrt(shells.norm2) / box.L]),
            kernel=kernel,
            cutoff_residual=shells.tail_bound * box.volume,
        )
        logger.info("Mode set for L=%g: %d shells, %d modes, eps_cut=%g",
                    box.L, modeset.n_shells, modeset.size, eps_cut)
        return modeset

    @classmethod
    def from_energies(cls, energies: Sequence[float], volume: float = 1.0) -> "ModeSet":
        """Zero mode plus one mode per given energy, labelled (1,), (2,), ..."""
        return cls(eps=[0.0] + list(energies), multiplicity=[1] * (len(energies) + 1), volume=volume)

    @property
    def n_shells(self) -> int:
        return len(self.eps)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    @property
    def zero_mode(self) -> Mode:
        return (0,) * self.d

    def shell_modes(self, s: int) -> Tuple[Mode, ...]:
        if self.norm2 is None:
            return ((s,),)
        return lattice_points(int(self.norm2[s]), self.d)

    def shell_of(self, mode: Mode) -> int:
        if self._shell_of_norm is None:
            return mode[0]
        return self._shell_of_norm[sum(m * m for m in mode)]

    def index_of(self, mode: Mode) -> int:
        s = self.shell_of(mode)
        return int(self.offsets[s]) + self.shell_modes(s).index(mode)

    def mode_at(self, index: int) -> Mode:
        s = int(np.searchsorted(self.offsets, index, side="right")) - 1
        return self.shell_modes(s)[index - int(self.offsets[s])]

    def modes(self) -> Iterator[Tuple[Mode, float]]:
        """All modes with their eps: zero mode, then by shell, lexicographic within a shell"""
        for s in range(self.n_shells):
            for mode in self.shell_modes(s):
                yield mode, float(self.eps[s])

    def mode_eps(self) -> np.ndarray:
        return np.repeat(self.eps, self.multiplicity)

    def log_mode_sums(self, j: np.ndarray, include_zero: bool = False) -> np.ndarray:
        """log sum_k e^{-j eps(k)} for each j, over nonzero modes unless include_zero"""
        start = 0 if include_zero else 1
        if self.n_shells <= start:
            return np.full(len(j), -np.inf)
        log_g = np.log(self.multiplicity[start:].astype(float))
        eps = self.eps[start:]
        j = np.asarray(j, dtype=float)
        out = np.empty(len(j))
        rows = max(1, 4_000_000 // len(eps))
        for first in range(0, len(j), rows):
            out[first:first + rows] = special.logsumexp(log_g[None, :] - np.outer(j[first:first + rows], eps), axis=1)
        return out


@dataclass
class OccupationState:
    """Occupation numbers n_k of one sample; only positive entries are stored"""
    N: int
    occupations: Dict[Mode, int]
    zero_mode: Mode
    equilibrated: bool = True

    @property
    def n0(self) -> int:
        return self.occupations.get(self.zero_mode, 0)

    def n(self, mode: Mode) -> int:
        return self.occupations.get(mode, 0)

    def total(self) -> int:
        return sum(self.occupations.values())

    def transfer(self, source: Mode, target: Mode) -> None:
        """Move one unit from source to target"""
        if self.n(source) < 1:
            raise ValueError(f"mode {source} is empty")
        if source == target:
            return
        self.occupations[source] -= 1
        if not self.occupations[source]:
            del self.occupations[source]
        self.occupations[target] = self.n(target) + 1


class _ShellSplitter:
    """Splits a shell total over its equal-energy modes with weights prod h_{n_i}"""

    def __init__(self, table: WeightTable):
        self.table = table
        self._log_q: Dict[int, np.ndarray] = {}

    def log_q(self, i: int, t: int) -> np.ndarray:
        """Log coefficients of H(z)^i up to degree t, H the generating function of h_n"""
        cached = self._log_q.get(i)
        if cached is None or len(cached) <= t:
            degree = max(t, 2 * (len(cached) - 1) if cached is not None else t)
            degree = min(degree, self.table.N_max)
            cached = weights_service.log_exp_series(math.log(i) + self.table.log_weights[:degree], degree)
            self._log_q[i] = cached
        return cached

    def log_probs(self, i: int, remaining: int) -> np.ndarray:
        """log P(n_i = m | the first i modes hold `remaining` units), m = 0..remaining"""
        m = np.arange(remaining + 1)
        q_rest = self.log_q(i - 1, remaining)[remaining - m] if i > 1 else np.where(m == remaining, 0.0, -np.inf)
        return self.table.log_h[m] + q_rest - self.log_q(i, remaining)[remaining]

    def split(self, g: int, t: int, rng: np.random.Generator) -> List[int]:
        counts = [0] * g
        remaining = t
        for i in range(g, 0, -1):
            if remaining == 0:
                break
            if i == 1:
                counts[0] = remaining
                break
            x = _draw(self.log_probs(i, remaining), rng)
            counts[i - 1] = x
            remaining -= x
        return counts


@dataclass(frozen=True)
class ModePartitionTables:
    """Prefix convolutions of the shell weight rows, nonzero shells first and the zero mode last"""
    modeset: ModeSet
    table: WeightTable
    N: int
    order: Tuple[int, ...]
    log_shell: Tuple[np.ndarray, ...]
    log_Z: np.ndarray
    work: float
    truncation_residual: float
    splitter: _ShellSplitter = field(compare=False, repr=False)

    @property
    def log_Y(self) -> np.ndarray:
        """log Y(n), n = 0..N"""
        return self.log_Z[-1]

    @property
    def log_Y_check(self) -> np.ndarray:
        """log of the zero-mode-free sums, n = 0..N"""
        return self.log_Z[-2]

    def identity_residual(self, n: Optional[int] = None) -> float:
        """Relative violation of Y(n) = sum_j h_j Y_check(n - j)"""
        n = self.N if n is None else n
        j = np.arange(n + 1)
        rhs = special.logsumexp(self.table.log_h[j] + self.log_Y_check[n - j])
        return abs(math.expm1(self.log_Y[n] - rhs))


def estimate_work(modeset: ModeSet, N: int, distinct: int) -> float:
    """Log-domain operations of a table build before shell degrees are known"""
    return distinct * (N + 1) ** 2 / 2 + modeset.n_shells * (N + 1)


def build_tables(modeset: ModeSet, table: WeightTable, N: int, log_mass_cut: float = 50.0,
                 budget: Optional[float] = None, memory_cap_mb: Optional[float] = None) -> ModePartitionTables:
    """Log-domain prefix convolutions giving Y(n) and the exact occupation law at N"""
    if not table.covers(N):
        raise ConfigurationError(f"N_max: weight table covers n <= {table.N_max}, need {N}")
    settings = get_settings()
    budget = budget or settings.dp_budget
    memory_cap_mb = memory_cap_mb or settings.memory_cap_mb

    stages = modeset.n_shells
    memory_mb = (stages + 1) * (N + 1) * 8 / 2 ** 20
    if memory_mb > memory_cap_mb:
        raise BudgetRefusal(
            f"tables need about {memory_mb:.0f} MB, above the cap of {memory_cap_mb:.0f} MB; use sampler fourier-mcmc",
            estimate=memory_mb,
        )
    distinct = sorted(set(int(g) for g in modeset.multiplicity[1:]))
    estimate = estimate_work(modeset, N, len(distinct))
    if estimate > budget:
        raise _budget_refusal(estimate, budget)

    log_q = {g: weights_service.log_exp_series(math.log(g) + table.log_weights[:N], N) for g in distinct}
    n = np.arange(N + 1)
    order = tuple(range(1, stages)) + (0,)
    rows, work, residual = [], len(distinct) * (N + 1) ** 2 / 2, 0.0
    for s in order:
        if s == 0:
            row = np.array(table.log_h[: N + 1])
        else:
            row = log_q[int(modeset.multiplicity[s])] - modeset.eps[s] * n
            keep = np.nonzero(row >= row.max() - log_mass_cut)[0][-1]
            residual += (N - keep) * math.exp(-log_mass_cut)
            row = row[: keep + 1]
        rows.append(row)
        work += (N + 1) * len(row)
    if work > budget:
        raise _budget_refusal(work, budget)

    log_Z = np.full((stages + 1, N + 1), -np.inf)
    log_Z[0, 0] = 0.0
    for m, row in enumerate(rows):
        log_Z[m + 1] = _log_convolve(log_Z[m], row, N)
    if not np.isfinite(log_Z[-1, N]):
        raise NumericalFailure(f"partition function Y({N}) is not finite")
    logger.info("Built tables: %d shells, %d modes, N=%d, %.3g operations", stages, modeset.size, N, work)
    return ModePartitionTables(
        modeset=modeset, table=table, N=N, order=order, log_shell=tuple(rows), log_Z=log_Z,
        work=work, truncation_residual=residual, splitter=_ShellSplitter(table),
    )


def _budget_refusal(estimate: float, budget: float) -> BudgetRefusal:
    return BudgetRefusal(
        f"exact tables need about {estimate:.3g} log-domain operations, above the budget of {budget:.3g}; "
        f"use sampler fourier-mcmc",
        estimate=estimate,
    )


def _log_convolve(log_a: np.ndarray, log_b: np.ndarray, N: int) -> np.ndarray:
    """log (a * b)(n) for n = 0..N"""
    D = len(log_b) - 1
    padded = np.concatenate([np.full(D, -np.inf), log_a[: N + 1]])
    windows = sliding_window_view(padded, D + 1)[:, ::-1]
    out = np.empty(N + 1)
    rows = max(1, CONVOLUTION_BLOCK // (D + 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        for start in range(0, N + 1, rows):
            out[start:start + rows] = special.logsumexp(windows[start:start + rows] + log_b, axis=1)
    return out


def _draw(log_p: np.ndarray, rng: np.random.Generator) -> int:
    """Index drawn from unnormalized log weights by cumulative sums in index order"""
    p = np.exp(log_p - np.max(log_p))
    cumulative = np.cumsum(p)
    return min(int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right")), len(p) - 1)


def _stage_log_probs(tables: ModePartitionTables, stage: int, remaining: int) -> np.ndarray:
    row = tables.log_shell[stage]
    t = np.arange(min(remaining, len(row) - 1) + 1)
    return row[t] + tables.log_Z[stage][remaining - t] - tables.log_Z[stage + 1][remaining]


def sample_shell_totals(tables: ModePartitionTables, rng: np.random.Generator) -> Dict[int, int]:
    """Backward sampling of the total occupation of each shell"""
    totals = {}
    remaining = tables.N
    for stage in range(len(tables.order) - 1, -1, -1):
        t = _draw(_stage_log_probs(tables, stage, remaining), rng)
        if t:
            totals[tables.order[stage]] = t
        remaining -= t
    if remaining:
        raise NumericalFailure("backward sampling did not exhaust N")
    return totals


def sample_occupations_exact(tables: ModePartitionTables, rng: np.random.Generator) -> OccupationState:
    """Exact draw of the occupation numbers at N"""
    modeset = tables.modeset
    occupations: Dict[Mode, int] = {}
    for s, t in sorted(sample_shell_totals(tables, rng).items()):
        modes = modeset.shell_modes(s)
        for mode, count in zip(modes, tables.splitter.split(len(modes), t, rng)):
            if count:
                occupations[mode] = count
    return OccupationState(N=tables.N, occupations=occupations, zero_mode=modeset.zero_mode)


def backward_probability(tables: ModePartitionTables, state: OccupationState) -> float:
    """Probability that the exact sampler returns this state"""
    modeset = tables.modeset
    totals: Dict[int, List[int]] = {}
    for s in range(modeset.n_shells):
        modes = modeset.shell_modes(s)
        totals[s] = [state.n(mode) for mode in modes]
    log_p = 0.0
    remaining = tables.N
    for stage in range(len(tables.order) - 1, -1, -1):
        t = sum(totals[tables.order[stage]])
        probs = _stage_log_probs(tables, stage, remaining)
        if t >= len(probs):
            return 0.0
        log_p += probs[t]
        remaining -= t
    for counts in totals.values():
        remaining = sum(counts)
        for i in range(len(counts), 1, -1):
            if remaining == 0:
                break
            log_p += tables.splitter.log_probs(i, remaining)[counts[i - 1]]
            remaining -= counts[i - 1]
    return math.exp(log_p)


def occupation_law_exact(modeset: ModeSet, table: WeightTable, N: int) -> Dict[Tuple[int, ...], float]:
    """Enumerated law of (n_k) in mode order: prod_k e^{-eps(k) n_k} h_{n_k} / Y(N)"""
    K = modeset.size
    if math.comb(N + K - 1, K - 1) > ENUMERATION_CAP:
        raise BudgetRefusal(f"enumeration of {K} modes at N={N} exceeds {ENUMERATION_CAP} states")
    eps = modeset.mode_eps()
    law = {}
    for chosen in combinations_with_replacement(range(K), N):
        n = np.bincount(np.asarray(chosen, dtype=np.int64), minlength=K)
        law[tuple(int(v) for v in n)] = float(np.sum(table.log_h[n] - eps * n))
    norm = special.logsumexp(list(law.values()))
    return {key: math.exp(value - norm) for key, value in law.items()}


def zero_mode_distribution(tables: ModePartitionTables) -> np.ndarray:
    """P(n_0 = j) = h_j Y_check(N - j) / Y(N), j = 0..N"""
    j = np.arange(tables.N + 1)
    return np.exp(tables.table.log_h[j] + tables.log_Y_check[tables.N - j] - tables.log_Y[tables.N])


def zero_mode_mean(tables: ModePartitionTables) -> float:
    """Exact E[n_0] / N"""
    p = zero_mode_distribution(tables)
    return float(np.dot(p, np.arange(tables.N + 1)) / tables.N)


class OccupationChain:
    """Metropolis chain of unit transfers between modes, targeting the occupation law at N"""

    def __init__(self, modeset: ModeSet, table: WeightTable, N: int, rng: np.random.Generator,
                 proposal: str = "unit", initial: Optional[OccupationState] = None):
        if N < 1:
            raise ConfigurationError("N: must be at least 1")
        if not table.covers(N):
            raise ConfigurationError(f"N_max: weight table covers n <= {table.N_max}, need {N}")
        if proposal not in ("unit", "uniform"):
            raise ConfigurationError(f"mcmc_proposal: unknown proposal '{proposal}'")
        self.modeset = modeset
        self.N = N
        self.rng = rng
        self.proposal = proposal
        self._eps = modeset.mode_eps().tolist()
        self._log_h = table.log_h.tolist()
        self.counts = [0] * modeset.size
        self.units: List[int] = []
        if initial is None:
            self.counts[0] = N
            self.units = [0] * N
        else:
            for mode, n in sorted(initial.occupations.items()):
                index = modeset.index_of(mode)
                self.counts[index] = n
                self.units.extend([index] * n)
        self.steps = 0
        self.accepted = 0

    def run(self, steps: int, block: int = 1 << 16) -> None:
        K = len(self.counts)
        counts, units, eps, log_h = self.counts, self.units, self._eps, self._log_h
        N = self.N
        unit_moves = self.proposal == "unit"
        done = 0
        while done < steps:
            size = min(block, steps - done)
            draws = self.rng.random((size, 3)).tolist()
            for u0, u1, u2 in draws:
                if unit_moves:
                    slot = int(u0 * N)
                    k = units[slot]
                else:
                    k = int(u0 * K)
                target = int(u1 * K)
                if target == k:
                    self.accepted += 1
                    continue
                nk = counts[k]
                if nk == 0:
                    continue
                nt = counts[target]
                log_ratio = eps[k] - eps[target] + log_h[nt + 1] + log_h[nk - 1] - log_h[nt] - log_h[nk]
                if unit_moves:
                    log_ratio += math.log((nt + 1) / nk)
                if log_ratio >= 0 or u2 < math.exp(log_ratio):
                    counts[k] = nk - 1
                    counts[target] = nt + 1
                    if unit_moves:
                        units[slot] = target
                    self.accepted += 1
            done += size
        self.steps += steps
        logger.debug("Occupation chain: %d steps, acceptance %.3f", self.steps, self.accepted / max(self.steps, 1))

    def state(self) -> OccupationState:
        occupations = {self.modeset.mode_at(i): n for i, n in enumerate(self.counts) if n}
        return OccupationState(N=self.N, occupations=occupations, zero_mode=self.modeset.zero_mode,
                               equilibrated=self.steps > 0)


def sample_occupations_mcmc(modeset: ModeSet, table: WeightTable, N: int, steps: int,
                            rng: np.random.Generator, proposal: str = "unit",
                            initial: Optional[OccupationState] = None) -> OccupationState:
    """Run a fresh transfer-move chain for `steps` proposals; steps = 0 returns the all-zero-mode state"""
    chain = OccupationChain(modeset, table, N, rng, proposal=proposal, initial=initial)
    chain.run(steps)
    state = chain.state()
    state.equilibrated = steps > 0
    return state


def cycle_lengths_given_occupations(state: OccupationState, model: CycleWeightModel,
                                    table: WeightTable, rng: np.random.Generator) -> List[int]:
    """Independent weighted permutations inside every occupied mode"""
    lengths: List[int] = []
    for _, n in sorted(state.occupations.items()):
        lengths.extend(weights_service.sample_cycle_lengths(model, n, table, rng))
    return lengths


def sample_permutation_given_occupations(state: OccupationState, model: CycleWeightModel,
                                         table: WeightTable, rng: np.random.Generator) -> Dict[int, int]:
    """Cycle counts r_j aggregated over the per-mode permutations"""
    counts: Dict[int, int] = {}
    for j in cycle_lengths_given_occupations(state, model, table, rng):
        counts[j] = counts.get(j, 0) + 1
    return counts


def effective_log_weights(modeset: ModeSet, model: CycleWeightModel, N: int) -> np.ndarray:
    """log of e^{-alpha_j} sum_k e^{-j eps(k)} over all modes, j = 1..N"""
    j = np.arange(1, N + 1, dtype=float)
    return -weights_service.cycle_weights(model, N) + modeset.log_mode_sums(j, include_zero=True)


def effective_table(modeset: ModeSet, model: CycleWeightModel, N: int) -> WeightTable:
    """Weight table whose h_n is Y(n): the cycle law of the marginal is a weighted-permutation law"""
    return weights_service.weight_table_from_log_weights(effective_log_weights(modeset, model, N), N)


def cycle_count_marginal_exact(modeset: ModeSet, model: CycleWeightModel, N: int) -> Dict[Tuple[int, ...], float]:
    """Exact law of the cycle type (non-increasing lengths) by enumerating partitions of N"""
    if N > weights_service.BRUTE_FORCE_MAX_N:
        raise BudgetRefusal(f"cycle_count_marginal_exact: N={N} exceeds the enumeration cap")
    return weights_service.cycle_type_law(effective_table(modeset, model, N), N)


def sample_cycle_marginal(modeset: ModeSet, model: CycleWeightModel, N: int, rng: np.random.Generator,
                          table: Optional[WeightTable] = None) -> List[int]:
    """Exact draw of the cycle lengths without passing through occupation numbers"""
    if table is None or not table.covers(N):
        table = effective_table(modeset, model, N)
    return weights_service.sample_lengths(table, N, rng)


# The density measure of the nonzero modes

def _expm1_minus(x: np.ndarray) -> np.ndarray:
    """e^x - 1 - x without cancellation near 0"""
    small = np.abs(x) < 1e-3
    series = x * x / 2 * (1 + x / 3 * (1 + x / 4))
    return np.where(small, series, np.expm1(x) - x)


def _nonzero_series(modeset: ModeSet, model: CycleWeightModel, term) -> float:
    """sum_j term(j, log(e^{-alpha_j})) over the nonzero modes until the terms are negligible"""
    total, J, chunk = 0.0, 0, 1024
    while J < J_SERIES_CAP:
        j = np.arange(J + 1, J + chunk + 1, dtype=float)
        log_w = -weights_service.cycle_weights(model, J + chunk)[J:]
        values = term(j, log_w)
        total += float(np.sum(values))
        J += chunk
        if J >= model.last_override and abs(values[-1]) * chunk <= 1e-18 * max(abs(total), 1e-300):
            return total
        chunk = min(2 * chunk, max(1024, 4_000_000 // modeset.n_shells))
    raise NumericalFailure("nonzero-mode series did not converge")


def finite_volume_density(modeset: ModeSet, model: CycleWeightModel) -> float:
    """Mean density of the nonzero modes, |Lambda|^{-1} sum_j e^{-alpha_j} sum_{k != 0} e^{-j eps(k)}"""
    if modeset.n_shells < 2:
        return 0.0
    return _nonzero_series(
        modeset, model, lambda j, log_w: np.exp(log_w + modeset.log_mode_sums(j)) / modeset.volume
    )


def mu_lambda_laplace(modeset: ModeSet, model: CycleWeightModel, lam: float) -> float:
    """E[e^{lam (X - rho_c)}] in closed form, X the density of the nonzero modes"""
    if lam == 0 or modeset.n_shells < 2:
        return 1.0
    x_unit = lam / modeset.volume
    eps_min = float(modeset.eps[1:].min())
    if eps_min <= x_unit:
        raise DomainError(f"lambda: need min eps(k) > lambda/|Lambda| ({eps_min:.6g} <= {x_unit:.6g})")
    log_g = np.log(modeset.multiplicity[1:].astype(float))
    eps = modeset.eps[1:]

    def term(j, log_w):
        jx = (j * x_unit)[:, None]
        base = log_g[None, :] - np.outer(j, eps)
        small = np.abs(jx) < 1e-3
        with np.errstate(over="ignore", invalid="ignore"):
            shells = np.where(
                small,
                np.exp(base) * _expm1_minus(np.where(small, jx, 0.0)),
                np.exp(base + jx) - np.exp(base) * (1 + jx),
            )
        return np.exp(log_w) * shells.sum(axis=1) / j

    return math.exp(_nonzero_series(modeset, model, term))


@dataclass(frozen=True)
class MuLambda:
    """Law of X = N/|Lambda| under the nonzero-mode measure, truncated at N_trunc"""
    volume: float
    log_probs: np.ndarray
    residual: float
    rho_c: float

    @property
    def densities(self) -> np.ndarray:
        return np.arange(len(self.log_probs)) / self.volume

    def laplace(self, lam: float) -> float:
        return float(np.sum(np.exp(self.log_probs + lam * (self.densities - self.rho_c))))

    def tail_mass(self, eps: float) -> float:
        """P(|X - rho_c| > eps), counting the truncated mass as tail"""
        far = np.abs(self.densities - self.rho_c) > eps
        return float(np.sum(np.exp(self.log_probs[far]))) + self.residual


def mu_lambda(modeset: ModeSet, model: CycleWeightModel, N_trunc: Optional[int] = None,
              residual_tol: float = 1e-12) -> MuLambda:
    """Normalized zero-mode-free sums Y_check(N)/Z_check for N <= N_trunc"""
    rho_c = finite_volume_density(modeset, model)
    log_z = _nonzero_series(modeset, model, lambda j, log_w: np.exp(log_w + modeset.log_mode_sums(j)) / j)
    fixed = N_trunc is not None
    N_trunc = N_trunc if fixed else max(64, int(math.ceil(4 * rho_c * modeset.volume)))
    while True:
        j = np.arange(1, N_trunc + 1, dtype=float)
        log_w = -weights_service.cycle_weights(model, N_trunc) + modeset.log_mode_sums(j)
        log_probs = weights_service.log_exp_series(log_w, N_trunc) - log_z
        residual = max(0.0, -math.expm1(special.logsumexp(log_probs)))
        if fixed or residual <= residual_tol or N_trunc >= 1 << 15:
            break
        N_trunc *= 2
    if residual > residual_tol:
        logger.warning("mu_Lambda truncated at N=%d with residual mass %.3g", N_trunc, residual)
    return MuLambda(volume=modeset.volume, log_probs=log_probs, residual=residual, rho_c=rho_c)


def lambda_boundary(modeset: ModeSet, eta: Optional[float] = None) -> float:
    """|Lambda|^{(1 - eta/d)/2}"""
    eta = eta if eta is not None else (modeset.kernel.eta if modeset.kernel is not None else 2.0)
    return modeset.volume ** ((1 - eta / modeset.d) / 2)


class Concentration(NamedTuple):
    tail_mass: float
    bound: float


def mu_lambda_concentration(modeset: ModeSet, model: CycleWeightModel, eps: float,
                            eta: Optional[float] = None, measure: Optional[MuLambda] = None) -> Concentration:
    """P(|X - rho_c| > eps) against 3 exp(-eps |Lambda|^{(1 - eta/d)/2})"""
    measure = measure or mu_lambda(modeset, model)
    bound = 3 * math.exp(-eps * lambda_boundary(modeset, eta))
    return Concentration(tail_mass=measure.tail_mass(eps), bound=bound)


# Event statistics

class ModeTail(NamedTuple):
    mode: Mode
    eps: float
    max_excess: float
    holds: bool


class ZeroModeReport(NamedTuple):
    samples: int
    mean_n0: float
    stderr_n0: float
    P_A: float
    P_B: float
    P_C: float
    tails: List[ModeTail]


def zero_mode_statistics(samples: Sequence[OccupationState], eps: float, delta: float, M: int,
                         modeset: ModeSet, nu_tilde: float, C2: float = 1.0, sigma: float = 0.5,
                         modes_tested: int = 5) -> ZeroModeReport:
    """Zero-mode fraction, the three typical-set events and the exponential tail envelope of n_k"""
    if not samples:
        raise ConfigurationError("samples: zero_mode_statistics needs at least one sample")
    N = samples[0].N
    fractions = np.array([s.n0 / N for s in samples])
    in_A, in_B, in_C = [], [], []
    for state in samples:
        small = large = 0
        for mode, n in state.occupations.items():
            if mode == state.zero_mode:
                continue
            k = modeset.k_norm[modeset.shell_of(mode)]
            if k < delta:
                small += n
            elif n >= M:
                large += n
        in_A.append(abs(state.n0 / N - nu_tilde) < eps)
        in_B.append(small < eps * N)
        in_C.append(large < eps * N)

    tails = []
    S = len(samples)
    for index in range(1, min(modes_tested, modeset.size - 1) + 1):
        mode = modeset.mode_at(index)
        e = float(modeset.eps[modeset.shell_of(mode)])
        counts = np.array([s.n(mode) for s in samples])
        top = int(counts.max()) if counts.size else 0
        worst = -np.inf
        for j in range(1, top + 1):
            p = float(np.mean(counts >= j))
            envelope = min(1.0, C2 ** 2 * math.exp(-j * (1 - sigma) * e))
            slack = 3 * math.sqrt(max(p * (1 - p), 1.0 / S) / S)
            worst = max(worst, p - envelope - slack)
        tails.append(ModeTail(mode=mode, eps=e, max_excess=float(worst), holds=bool(worst <= 0)))

    stderr = float(fractions.std(ddof=1) / math.sqrt(S)) if S > 1 else 0.0
    return ZeroModeReport(
        samples=S, mean_n0=float(fractions.mean()), stderr_n0=stderr,
        P_A=float(np.mean(in_A)), P_B=float(np.mean(in_B)), P_C=float(np.mean(in_C)), tails=tails,
    )

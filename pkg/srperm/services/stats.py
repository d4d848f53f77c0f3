"""
Stats Service
Cycle spectra, GEM / Poisson-Dirichlet references and the hypothesis checks run on them
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from ..exceptions import ConfigurationError, DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CycleSpectrum:
    """Cycle lengths in non-increasing order"""
    lengths: Tuple[int, ...]
    N: int

    def __post_init__(self):
        if any(a < b for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValueError("cycle lengths must be non-increasing")
        if self.lengths and self.lengths[-1] < 1:
            raise ValueError("cycle lengths must be positive")
        if sum(self.lengths) != self.N:
            raise ValueError(f"cycle lengths sum to {sum(self.lengths)}, expected {self.N}")

    @classmethod
    def from_lengths(cls, lengths: Iterable[int]) -> "CycleSpectrum":
        ordered = tuple(sorted((int(v) for v in lengths), reverse=True))
        return cls(lengths=ordered, N=sum(ordered))

    @classmethod
    def from_counts(cls, counts: Dict[int, int]) -> "CycleSpectrum":
        return cls.from_lengths(j for j, r in counts.items() for _ in range(r))

    def normalized(self, nu_hat: float, k: Optional[int] = None) -> np.ndarray:
        """l^(i) / (nu_hat N) for i = 1..k, padded with zeros"""
        values = np.asarray(self.lengths, dtype=float) / (nu_hat * self.N)
        if k is None:
            return values
        out = np.zeros(k)
        out[: min(k, len(values))] = values[:k]
        return out

    def fraction_above(self, K: int) -> float:
        """Fraction of points in cycles longer than K"""
        return sum(v for v in self.lengths if v > K) / self.N


class MonteCarloEstimate(NamedTuple):
    mean: float
    stderr: float
    residual: float = 0.0


def sample_gem(theta: float, m: int, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """First m GEM(theta) fragments by stick breaking with X = 1 - U^{1/theta}"""
    if theta <= 0:
        raise ConfigurationError(f"theta: must be positive, got {theta}")
    if m < 1:
        raise ConfigurationError(f"m: must be at least 1, got {m}")
    shape = (m,) if size is None else (size, m)
    sticks = -np.expm1(np.log(rng.random(shape)) / theta)
    remaining = np.cumprod(1 - sticks, axis=-1)
    before = np.concatenate([np.ones(shape[:-1] + (1,)), remaining[..., :-1]], axis=-1)
    return sticks * before


class PDReference:
    """Poisson-Dirichlet(theta) samples as sorted stick-breaking fragments"""

    def __init__(self, theta: float, rng: np.random.Generator, m_trunc: int = 200):
        self.theta = theta
        self.rng = rng
        self.m_trunc = m_trunc

    @property
    def truncation_residual(self) -> float:
        """Expected mass left after m_trunc sticks"""
        return (self.theta / (self.theta + 1)) ** self.m_trunc

    def sample(self, draws: int) -> np.ndarray:
        fragments = sample_gem(self.theta, self.m_trunc, self.rng, size=draws)
        return -np.sort(-fragments, axis=1)


def pd_sum_squares_reference(theta: float, draws: int, m_trunc: int, rng: np.random.Generator) -> MonteCarloEstimate:
    """Monte Carlo estimate of E[sum p_i^2] under PD(theta); the exact value is 1/(1+theta)"""
    reference = PDReference(theta, rng, m_trunc)
    squares = np.sum(sample_gem(theta, m_trunc, rng, size=draws) ** 2, axis=1)
    return MonteCarloEstimate(
        mean=float(squares.mean()),
        stderr=float(squares.std(ddof=1) / math.sqrt(draws)) if draws > 1 else 0.0,
        residual=reference.truncation_residual,
    )


class KSResult(NamedTuple):
    coordinate: int
    statistic: float
    pvalue: float


class PDFitReport(NamedTuple):
    ks: List[KSResult]
    sum_squares: MonteCarloEstimate
    reference_sum_squares: MonteCarloEstimate
    z_sum_squares: float
    samples: int

    @property
    def min_pvalue(self) -> float:
        return min(r.pvalue for r in self.ks)


def _check_nu(nu_hat: float) -> None:
    if not nu_hat > 0:
        raise DomainError(f"nu_hat: the test needs a positive fraction of points in long cycles, got {nu_hat}")


def pd_fit_test(spectra: Sequence[CycleSpectrum], nu_hat: float, theta: float, k: int,
                rng: np.random.Generator, reference_draws: int = 20_000, m_trunc: int = 200) -> PDFitReport:
    """Compare normalized long cycles with PD(theta): KS per coordinate plus the sum of squares"""
    _check_nu(nu_hat)
    if not spectra:
        raise ConfigurationError("spectra: pd_fit_test needs at least one spectrum")
    empirical = np.array([s.normalized(nu_hat, k) for s in spectra])
    reference = PDReference(theta, rng, m_trunc).sample(reference_draws)
    ks = []
    for i in range(k):
        result = stats.ks_2samp(empirical[:, i], reference[:, i])
        ks.append(KSResult(coordinate=i + 1, statistic=float(result.statistic), pvalue=float(result.pvalue)))

    squares = np.array([np.sum(s.normalized(nu_hat) ** 2) for s in spectra])
    S = len(spectra)
    observed = MonteCarloEstimate(float(squares.mean()), float(squares.std(ddof=1) / math.sqrt(S)) if S > 1 else 0.0)
    ref_squares = np.sum(reference ** 2, axis=1)
    expected = MonteCarloEstimate(
        float(ref_squares.mean()), float(ref_squares.std(ddof=1) / math.sqrt(reference_draws)),
        residual=(theta / (theta + 1)) ** m_trunc,
    )
    spread = math.hypot(observed.stderr, expected.stderr)
    z = (observed.mean - expected.mean) / spread if spread > 0 else 0.0
    return PDFitReport(ks=ks, sum_squares=observed, reference_sum_squares=expected, z_sum_squares=z, samples=S)


class GiantCycleReport(NamedTuple):
    samples: int
    threshold: float
    P_above: float
    mean_ratio: float
    quantiles: Dict[str, float]


def giant_cycle_test(spectra: Sequence[CycleSpectrum], nu_hat: float, threshold: float = 0.9) -> GiantCycleReport:
    """Distribution of l^(1) / (nu_hat N) and the probability that it exceeds the threshold"""
    _check_nu(nu_hat)
    if not spectra:
        raise ConfigurationError("spectra: giant_cycle_test needs at least one spectrum")
    ratios = np.array([s.lengths[0] / (nu_hat * s.N) for s in spectra])
    levels = (0.05, 0.25, 0.5, 0.75, 0.95)
    return GiantCycleReport(
        samples=len(spectra),
        threshold=threshold,
        P_above=float(np.mean(ratios > threshold)),
        mean_ratio=float(ratios.mean()),
        quantiles={f"q{int(100 * q):02d}": float(np.quantile(ratios, q)) for q in levels},
    )


def size_biased_beta_test(sequences: Sequence[Sequence[int]], theta: float, sticks: int = 3) -> List[KSResult]:
    """KS of the stick ratios l_1/n, l_2/(n - l_1), ... against Beta(1, theta)"""
    results = []
    for i in range(sticks):
        ratios = []
        for lengths in sequences:
            if len(lengths) > i:
                remaining = sum(lengths[i:])
                ratios.append(lengths[i] / remaining)
        if len(ratios) < 2:
            break
        result = stats.kstest(ratios, stats.beta(1, theta).cdf)
        results.append(KSResult(coordinate=i + 1, statistic=float(result.statistic), pvalue=float(result.pvalue)))
    return results


class ChiSquareResult(NamedTuple):
    statistic: float
    dof: int
    pvalue: float


def _pool(expected: np.ndarray, min_expected: float) -> List[List[int]]:
    """Groups of cell indices with pooled expectation at least min_expected"""
    groups, current, mass = [], [], 0.0
    for index in np.argsort(-expected, kind="stable"):
        current.append(int(index))
        mass += expected[index]
        if mass >= min_expected:
            groups.append(current)
            current, mass = [], 0.0
    if current:
        if groups:
            groups[-1].extend(current)
        else:
            groups.append(current)
    return groups


def chi_square_gof(observed: Dict, probabilities: Dict, min_expected: float = 5.0) -> ChiSquareResult:
    """Goodness of fit of observed counts to an exact law, pooling sparse cells"""
    keys = list(probabilities)
    extra = sum(v for key, v in observed.items() if key not in probabilities)
    if extra:
        raise ValueError(f"{extra} observations fall outside the support of the reference law")
    total = sum(observed.values())
    expected = np.array([probabilities[key] for key in keys]) * total
    counts = np.array([observed.get(key, 0) for key in keys], dtype=float)
    groups = _pool(expected, min_expected)
    if len(groups) < 2:
        return ChiSquareResult(0.0, 0, 1.0)
    obs = np.array([counts[g].sum() for g in groups])
    exp = np.array([expected[g].sum() for g in groups])
    exp *= obs.sum() / exp.sum()
    result = stats.chisquare(obs, exp)
    return ChiSquareResult(float(result.statistic), len(groups) - 1, float(result.pvalue))


def chi_square_two_sample(counts_a: Dict, counts_b: Dict, min_expected: float = 5.0) -> ChiSquareResult:
    """Homogeneity of two categorical samples, pooling sparse cells"""
    keys = sorted(set(counts_a) | set(counts_b))
    table = np.array([[counts_a.get(k, 0) for k in keys], [counts_b.get(k, 0) for k in keys]], dtype=float)
    pooled = table.sum(axis=0) * min(table.sum(axis=1)) / table.sum()
    groups = _pool(pooled, min_expected)
    if len(groups) < 2:
        return ChiSquareResult(0.0, 0, 1.0)
    merged = np.array([[row[g].sum() for g in groups] for row in table])
    statistic, pvalue, dof, _ = stats.chi2_contingency(merged, correction=False)
    return ChiSquareResult(float(statistic), int(dof), float(pvalue))


def geweke_z(trace: Sequence[float], first: float = 0.1, last: float = 0.5) -> float:
    """Difference of early and late means of a trace in units of its batch-means standard error"""
    values = np.asarray(trace, dtype=float)
    n = len(values)
    a = values[: max(int(first * n), 2)]
    b = values[n - max(int(last * n), 2):]
    if n < 4:
        return 0.0
    spread = math.sqrt(_batch_variance(a) / len(a) + _batch_variance(b) / len(b))
    return float((a.mean() - b.mean()) / spread) if spread > 0 else 0.0


def _batch_variance(values: np.ndarray) -> float:
    """Long-run variance of a series by non-overlapping batch means"""
    n = len(values)
    size = max(1, int(math.sqrt(n)))
    batches = n // size
    if batches < 2:
        return float(values.var(ddof=1)) if n > 1 else 0.0
    means = values[: batches * size].reshape(batches, size).mean(axis=1)
    return float(size * means.var(ddof=1))

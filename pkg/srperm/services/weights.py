"""
Weights Service
Cycle weights, the normalizations h_n and exact sampling of weighted permutations
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import special, stats

from ..exceptions import BudgetRefusal, NumericalFailure
from ..models.config import MAX_OVERRIDE_INDEX, CycleWeightModel

logger = logging.getLogger(__name__)

# Largest n accepted by the partition-sum oracle.
BRUTE_FORCE_MAX_N = 9


def cycle_weight(model: CycleWeightModel, j: int) -> float:
    """alpha_j; overrides take precedence in the asymptotic regime"""
    if j < 1:
        raise ValueError(f"cycle length must be positive, got {j}")
    if model.regime == "logarithmic":
        return model.gamma * math.log(j)
    if j <= MAX_OVERRIDE_INDEX:
        for index, value in model.overrides:
            if index == j:
                return value
    return model.alpha


def cycle_weights(model: CycleWeightModel, n: int) -> np.ndarray:
    """alpha_1, ..., alpha_n as an array"""
    if model.regime == "logarithmic":
        return model.gamma * np.log(np.arange(1, n + 1, dtype=float))
    alphas = np.full(n, model.alpha, dtype=float)
    for j, value in model.overrides:
        if j <= n:
            alphas[j - 1] = value
    return alphas


def log_exp_series(log_w: np.ndarray, N: int) -> np.ndarray:
    """Log coefficients c_0..c_N of exp(sum_j w_j z^j / j), from n c_n = sum_j w_j c_{n-j}"""
    log_c = np.full(N + 1, -np.inf)
    log_c[0] = 0.0
    with np.errstate(divide="ignore"):
        for n in range(1, N + 1):
            log_c[n] = special.logsumexp(log_w[:n] + log_c[n - 1::-1]) - math.log(n)
    return log_c


@dataclass(frozen=True)
class WeightTable:
    """log h_n for n = 0..N_max together with the log cycle weights that produced them"""
    N_max: int
    log_h: np.ndarray
    log_weights: np.ndarray

    def h(self, n: int) -> float:
        return math.exp(self.log_h[n])

    def covers(self, n: int) -> bool:
        return n <= self.N_max

    def identity_residual(self) -> float:
        """Largest relative violation of n h_n = sum_j w_j h_{n-j}"""
        worst = 0.0
        for n in range(1, self.N_max + 1):
            rhs = special.logsumexp(self.log_weights[:n] + self.log_h[n - 1::-1])
            worst = max(worst, abs(math.expm1(math.log(n) + self.log_h[n] - rhs)))
        return worst

    def to_text(self) -> str:
        """Two-column decimal export (n, log h_n)"""
        return "\n".join(f"{n} {value!r}" for n, value in enumerate(self.log_h.tolist())) + "\n"


def compute_h(model: CycleWeightModel, N_max: int) -> WeightTable:
    """Build the table of h_n for n <= N_max in the log domain"""
    if N_max < 0:
        raise ValueError(f"N_max must be nonnegative, got {N_max}")
    log_w = -cycle_weights(model, N_max)
    table = weight_table_from_log_weights(log_w, N_max)
    logger.debug("Computed h_n up to n=%d (regime %s)", N_max, model.regime)
    return table


def weight_table_from_log_weights(log_w: np.ndarray, N_max: int) -> WeightTable:
    """Table for arbitrary positive cycle weights e^{log_w[j-1]}"""
    log_w = np.asarray(log_w[:N_max], dtype=float)
    log_h = log_exp_series(log_w, N_max)
    if not np.all(np.isfinite(log_h)):
        bad = int(np.argmax(~np.isfinite(log_h)))
        raise NumericalFailure(f"h_{bad} is not finite")
    log_h.setflags(write=False)
    log_w.setflags(write=False)
    return WeightTable(N_max=N_max, log_h=log_h, log_weights=log_w)


def integer_partitions(n: int, largest: Optional[int] = None) -> Iterator[Dict[int, int]]:
    """All partitions of n as {part: multiplicity}, largest parts first"""
    if largest is None:
        largest = n
    if n == 0:
        yield {}
        return
    for part in range(min(n, largest), 0, -1):
        for rest in integer_partitions(n - part, part):
            counts = dict(rest)
            counts[part] = counts.get(part, 0) + 1
            yield counts


def partition_log_weight(counts: Dict[int, int], log_w: np.ndarray) -> float:
    """log prod_j (w_j / j)^{r_j} / r_j!"""
    total = 0.0
    for j, r in counts.items():
        total += r * (log_w[j - 1] - math.log(j)) - special.gammaln(r + 1)
    return total


def brute_force_h(model: CycleWeightModel, n: int) -> float:
    """h_n as an explicit sum over the cycle types of S_n"""
    if n > BRUTE_FORCE_MAX_N:
        raise BudgetRefusal(f"brute_force_h: n={n} exceeds the enumeration cap {BRUTE_FORCE_MAX_N}")
    if n == 0:
        return 1.0
    log_w = -cycle_weights(model, n)
    terms = [partition_log_weight(counts, log_w) for counts in integer_partitions(n)]
    return float(np.exp(special.logsumexp(terms)))


def generating_function_check(model: CycleWeightModel, gamma_test: float, N: int,
                              table: Optional[WeightTable] = None) -> Tuple[float, float]:
    """Both sides of sum_n e^{-g n} h_n = exp sum_j e^{-g j - alpha_j}/j, truncated at N"""
    table = table if table is not None and table.covers(N) else compute_h(model, N)
    n = np.arange(N + 1)
    lhs = float(np.exp(special.logsumexp(table.log_h[: N + 1] - gamma_test * n)))
    j = np.arange(1, N + 1)
    rhs = math.exp(float(np.sum(np.exp(-gamma_test * j - cycle_weights(model, N)) / j)))
    return lhs, rhs


class RegularityReport(NamedTuple):
    """Empirical surrogates for the polynomial-growth and ratio constants of h_n"""
    kappa: float
    C_s: float
    slope: float
    s: float
    N: int


def verify_regularity(model: CycleWeightModel, N: int, s: float = 2.0,
                      table: Optional[WeightTable] = None) -> RegularityReport:
    """kappa with h_n within (e n)^{+-kappa}, C(s) = max h_m/h_n over n/s < m < sn, and the log-log slope"""
    if s <= 1:
        raise ValueError(f"s must exceed 1, got {s}")
    table = table if table is not None and table.covers(N) else compute_h(model, N)
    log_h = np.asarray(table.log_h[1: N + 1])
    n = np.arange(1, N + 1, dtype=float)
    kappa = float(np.max(np.abs(log_h) / (1 + np.log(n)))) if N else 0.0

    sparse = _SparseMax(log_h)
    worst = 0.0
    for i in range(N):
        lo = max(int(math.floor(n[i] / s)) + 1, 1)
        hi = min(int(math.ceil(n[i] * s)) - 1, N)
        if lo <= hi:
            worst = max(worst, sparse.query(lo - 1, hi - 1) - log_h[i])
    C_s = math.exp(worst)

    tail = n >= max(N // 10, 2)
    slope = float(stats.linregress(np.log(n[tail]), log_h[tail]).slope) if tail.sum() >= 2 else 0.0
    return RegularityReport(kappa=kappa, C_s=C_s, slope=slope, s=s, N=N)


class _SparseMax:
    """Range maxima in O(1) after O(n log n) preprocessing"""

    def __init__(self, values: np.ndarray):
        self.levels = [np.asarray(values, dtype=float)]
        width = 1
        while 2 * width <= len(values):
            prev = self.levels[-1]
            self.levels.append(np.maximum(prev[:-width], prev[width:]))
            width *= 2

    def query(self, lo: int, hi: int) -> float:
        level = (hi - lo + 1).bit_length() - 1
        row = self.levels[level]
        return float(max(row[lo], row[hi - (1 << level) + 1]))


def first_cycle_log_probs(table: WeightTable, n: int) -> np.ndarray:
    """log P(l_1 = j) = log w_j + log h_{n-j} - log n - log h_n for j = 1..n"""
    return table.log_weights[:n] + table.log_h[n - 1::-1] - math.log(n) - table.log_h[n]


def first_cycle_length_distribution(model: CycleWeightModel, n: int,
                                    table: Optional[WeightTable] = None) -> np.ndarray:
    """Law of the length of the cycle containing index 1"""
    table = table if table is not None and table.covers(n) else compute_h(model, n)
    return np.exp(first_cycle_log_probs(table, n))


def first_cycle_tail(table: WeightTable, n: int, K: int) -> float:
    """P_n(l_1 > K)"""
    if K >= n:
        return 0.0
    return float(np.sum(np.exp(first_cycle_log_probs(table, n)[K:])))


def sample_lengths(table: WeightTable, n: int, rng: np.random.Generator) -> List[int]:
    """Cycle lengths in smallest-element order, drawn one cycle at a time"""
    lengths = []
    remaining = n
    while remaining > 0:
        cumulative = np.cumsum(np.exp(first_cycle_log_probs(table, remaining)))
        j = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right")) + 1
        j = min(j, remaining)
        lengths.append(j)
        remaining -= j
    return lengths


def sample_cycle_lengths(model: CycleWeightModel, n: int, table: Optional[WeightTable],
                         rng: np.random.Generator) -> List[int]:
    """Exact draw of the cycle lengths of a permutation of S_n with cycle weights e^{-alpha_j}"""
    if table is None or not table.covers(n):
        table = compute_h(model, n)
    return sample_lengths(table, n, rng)


def cycle_type_law(table: WeightTable, n: int) -> Dict[Tuple[int, ...], float]:
    """Exact law of the sorted cycle type of S_n under the table weights, by enumeration"""
    if n > BRUTE_FORCE_MAX_N:
        raise BudgetRefusal(f"cycle_type_law: n={n} exceeds the enumeration cap {BRUTE_FORCE_MAX_N}")
    law = {}
    for counts in integer_partitions(n):
        key = tuple(sorted((j for j, r in counts.items() for _ in range(r)), reverse=True))
        law[key] = math.exp(partition_log_weight(counts, table.log_weights) - table.log_h[n])
    return law

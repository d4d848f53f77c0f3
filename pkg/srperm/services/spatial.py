"""
Spatial Service
Metropolis chain on (positions, permutation) with incremental energy and cycle bookkeeping
"""

import logging
import math
from collections import Counter
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import IntegrityError
from ..models.config import BoxGeometry, ChainParams, CycleWeightModel, JumpKernel
from . import kernel as kernel_service
from . import weights as weights_service
from .stats import CycleSpectrum, geweke_z

logger = logging.getLogger(__name__)

# Cycle weights at or above this value forbid the cycle length outright.
HARD_REJECTION_ALPHA = 700.0


class SpatialConfig:
    """Points on the torus, a permutation of their labels and its cycle registry"""

    def __init__(self, positions: np.ndarray, targets: Sequence[int], kernel: JumpKernel,
                 weights: CycleWeightModel, box: BoxGeometry):
        self.x = np.array(positions, dtype=float).reshape(len(targets), box.d)
        self.target = [int(t) for t in targets]
        N = len(self.target)
        if sorted(self.target) != list(range(N)):
            raise ValueError("targets do not form a permutation")
        self.source = [0] * N
        for i, t in enumerate(self.target):
            self.source[t] = i
        self.kernel = kernel
        self.weights = weights
        self.box = box
        self.periodizer = kernel_service.periodizer(kernel, box)
        self.alphas = weights_service.cycle_weights(weights, N).tolist()
        self._rebuild_registry()
        self.H = energy(self, kernel, weights, box)

    @property
    def N(self) -> int:
        return len(self.target)

    def alpha(self, length: int) -> float:
        return self.alphas[length - 1]

    def xi(self, differences: np.ndarray) -> np.ndarray:
        """xi_Lambda for rows of displacement vectors"""
        return -np.atleast_1d(self.periodizer.log_weight(differences.reshape(-1, self.box.d)))

    def _rebuild_registry(self) -> None:
        self.cycle_id = [-1] * self.N
        self.cycle_length: Dict[int, int] = {}
        self.counts: Dict[int, int] = {}
        self._next_id = 0
        for start in range(self.N):
            if self.cycle_id[start] >= 0:
                continue
            members = self.walk(start)
            cid = self._new_id()
            for i in members:
                self.cycle_id[i] = cid
            self.cycle_length[cid] = len(members)
            self._count(len(members), +1)

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def _count(self, length: int, change: int) -> None:
        value = self.counts.get(length, 0) + change
        if value:
            self.counts[length] = value
        else:
            self.counts.pop(length, None)

    def walk(self, start: int) -> List[int]:
        """Elements of the cycle through start in successor order"""
        members = [start]
        i = self.target[start]
        while i != start:
            members.append(i)
            i = self.target[i]
        return members

    def lengths(self) -> List[int]:
        return list(self.cycle_length.values())

    def spectrum(self) -> CycleSpectrum:
        return CycleSpectrum.from_lengths(self.lengths())

    def dump(self) -> Dict:
        return {
            "positions": self.x.tolist(),
            "targets": list(self.target),
            "cycle_counts": dict(self.counts),
            "cached_energy": self.H,
        }


def energy(config: SpatialConfig, kernel: JumpKernel, weights: CycleWeightModel, box: BoxGeometry) -> float:
    """H = sum_i xi_Lambda(x_i - x_{pi(i)}) + sum_l alpha_l r_l, recomputed from scratch"""
    periodizer = kernel_service.periodizer(kernel, box)
    differences = config.x - config.x[config.target]
    jumps = -np.sum(np.atleast_1d(periodizer.log_weight(differences.reshape(-1, box.d))))
    cycles = 0.0
    seen = [False] * config.N
    for start in range(config.N):
        if seen[start]:
            continue
        members = config.walk(start)
        for k in members:
            seen[k] = True
        cycles += weights_service.cycle_weight(weights, len(members))
    return float(jumps + cycles)


def propose_position_move(config: SpatialConfig, i: int, rng: np.random.Generator,
                          scale: float = 1.0) -> Tuple[np.ndarray, float]:
    """Gaussian displacement of x_i on the torus and the energy change it causes"""
    new_x = np.mod(config.x[i] + scale * rng.standard_normal(config.box.d), config.box.L)
    return new_x, position_delta(config, i, new_x)


def position_delta(config: SpatialConfig, i: int, new_x: np.ndarray) -> float:
    after, before = config.target[i], config.source[i]
    if after == i:
        return 0.0
    old_x = config.x[i]
    differences = np.array([
        config.x[before] - new_x, new_x - config.x[after],
        config.x[before] - old_x, old_x - config.x[after],
    ])
    xi = config.xi(differences)
    return float(xi[0] + xi[1] - xi[2] - xi[3])


class SwapProposal(NamedTuple):
    i: int
    j: int
    new_targets: Tuple[int, int]
    dH: float
    cycle_delta: Dict[int, int]
    split: Optional[int]


def propose_swap_move(config: SpatialConfig, i: int, j: int, rng: Optional[np.random.Generator] = None) -> SwapProposal:
    """pi' = pi o (i j): i and j exchange targets, merging or splitting their cycles"""
    if i == j:
        raise ValueError("swap needs two distinct indices")
    ti, tj = config.target[i], config.target[j]
    differences = np.array([
        config.x[i] - config.x[tj], config.x[j] - config.x[ti],
        config.x[i] - config.x[ti], config.x[j] - config.x[tj],
    ])
    xi = config.xi(differences)
    jump_delta = float(xi[0] + xi[1] - xi[2] - xi[3])

    ci, cj = config.cycle_id[i], config.cycle_id[j]
    if ci != cj:
        a, b = config.cycle_length[ci], config.cycle_length[cj]
        delta = _delta([(a + b, 1), (a, -1), (b, -1)])
        split = None
    else:
        c = config.cycle_length[ci]
        split = _steps_between(config, i, j, c)
        delta = _delta([(split, 1), (c - split, 1), (c, -1)])
    weight_delta = 0.0
    for length, change in delta.items():
        if change > 0 and config.alpha(length) >= HARD_REJECTION_ALPHA:
            weight_delta = math.inf
            break
        weight_delta += change * config.alpha(length)
    return SwapProposal(i=i, j=j, new_targets=(tj, ti), dH=jump_delta + weight_delta, cycle_delta=delta, split=split)


def _delta(changes: Sequence[Tuple[int, int]]) -> Dict[int, int]:
    """Net change in r_l; equal lengths in a merge or an even split add up"""
    out: Counter = Counter()
    for length, change in changes:
        out[length] += change
    return {length: change for length, change in out.items() if change}


def _steps_between(config: SpatialConfig, i: int, j: int, c: int) -> int:
    """Number m of successor steps from i to j, walking from both ends at once"""
    forward, backward = config.target[i], config.target[j]
    steps = 1
    while True:
        if forward == j:
            return steps
        if backward == i:
            return c - steps
        forward, backward = config.target[forward], config.target[backward]
        steps += 1


def apply_position_move(config: SpatialConfig, i: int, new_x: np.ndarray, dH: float) -> None:
    config.x[i] = new_x
    config.H += dH


def apply_swap_move(config: SpatialConfig, proposal: SwapProposal) -> None:
    """Commit a swap, relabelling only the shorter of the affected cycles"""
    i, j = proposal.i, proposal.j
    ti, tj = config.target[i], config.target[j]
    ci, cj = config.cycle_id[i], config.cycle_id[j]
    if proposal.split is None:
        a, b = config.cycle_length[ci], config.cycle_length[cj]
        keep, gone, member = (ci, cj, j) if a >= b else (cj, ci, i)
        for k in config.walk(member):
            config.cycle_id[k] = keep
        del config.cycle_length[gone]
        config.cycle_length[keep] = a + b
    config.target[i], config.target[j] = tj, ti
    config.source[tj], config.source[ti] = i, j
    if proposal.split is not None:
        c = config.cycle_length[ci]
        m = proposal.split
        # after the swap j lies on a cycle of length m and i on one of length c - m
        start = j if m <= c - m else i
        moved = config.walk(start)
        cid = config._new_id()
        for k in moved:
            config.cycle_id[k] = cid
        config.cycle_length[cid] = len(moved)
        config.cycle_length[ci] = c - len(moved)
    for length, change in proposal.cycle_delta.items():
        config._count(length, change)
    config.H += proposal.dH


def audit(config: SpatialConfig) -> None:
    """Compare the cached energy and cycle counts with a full recomputation"""
    full = energy(config, config.kernel, config.weights, config.box)
    if not math.isfinite(full) or not math.isfinite(config.H):
        raise IntegrityError("non-finite energy", state_dump=config.dump())
    if abs(full - config.H) > 1e-10 * (1 + abs(full)):
        raise IntegrityError(f"cached energy {config.H!r} differs from recomputed {full!r}", state_dump=config.dump())
    counts = dict(config.counts)
    config._rebuild_registry()
    if counts != config.counts:
        raise IntegrityError(f"cycle counts {counts} differ from recomputed {config.counts}", state_dump=config.dump())
    config.H = full


class ChainResult(NamedTuple):
    spectra: List[CycleSpectrum]
    sweeps: List[int]
    energies: List[float]
    acceptance: Dict[str, float]
    geweke_z: float


class SpatialChain:
    """One Metropolis chain; positions start i.i.d. uniform and the permutation at the identity"""

    def __init__(self, params: ChainParams, rng: Optional[np.random.Generator] = None,
                 config: Optional[SpatialConfig] = None):
        self.params = params
        self.rng = rng if rng is not None else np.random.default_rng(params.seed)
        if config is None:
            positions = self.rng.random((params.N, params.box.d)) * params.box.L
            config = SpatialConfig(positions, range(params.N), params.kernel, params.weights, params.box)
        self.config = config
        self.proposed = {"position": 0, "swap": 0}
        self.accepted = {"position": 0, "swap": 0}

    def _accept(self, dH: float) -> bool:
        if dH <= 0:
            return True
        if not math.isfinite(dH):
            return False
        return self.rng.random() < math.exp(-dH)

    def position_step(self, i: Optional[int] = None) -> bool:
        config = self.config
        i = int(self.rng.integers(config.N)) if i is None else i
        new_x, dH = propose_position_move(config, i, self.rng, self.params.displacement)
        self.proposed["position"] += 1
        if self._accept(dH):
            apply_position_move(config, i, new_x, dH)
            self.accepted["position"] += 1
            return True
        return False

    def swap_step(self, i: Optional[int] = None, j: Optional[int] = None) -> bool:
        config = self.config
        if config.N < 2:
            return False
        if i is None or j is None:
            i, j = (int(v) for v in self.rng.choice(config.N, size=2, replace=False))
        proposal = propose_swap_move(config, i, j, self.rng)
        self.proposed["swap"] += 1
        if self._accept(proposal.dH):
            apply_swap_move(config, proposal)
            self.accepted["swap"] += 1
            return True
        return False

    def sweep(self, positions: bool = True) -> None:
        """N move attempts, each a position update with probability p_pos"""
        for _ in range(self.config.N):
            if positions and self.rng.random() < self.params.p_pos:
                self.position_step()
            else:
                self.swap_step()
        if not math.isfinite(self.config.H):
            raise IntegrityError("non-finite energy", state_dump=self.config.dump())

    def acceptance(self) -> Dict[str, float]:
        return {kind: self.accepted[kind] / self.proposed[kind] if self.proposed[kind] else 0.0
                for kind in self.proposed}

    def run(self, positions: bool = True) -> ChainResult:
        params = self.params
        spectra, sweeps, energies = [], [], []
        for sweep in range(params.sweeps):
            self.sweep(positions)
            energies.append(self.config.H)
            if (sweep + 1) % params.audit_interval == 0:
                audit(self.config)
                logger.debug("Sweep %d: audit passed, H=%.6g", sweep + 1, self.config.H)
            if sweep >= params.burn_in and (sweep - params.burn_in) % params.thinning == 0:
                spectra.append(self.config.spectrum())
                sweeps.append(sweep)
        z = geweke_z(energies[params.burn_in:])
        logger.info("Chain finished: %d spectra, acceptance %s, Geweke z=%.2f", len(spectra), self.acceptance(), z)
        return ChainResult(spectra=spectra, sweeps=sweeps, energies=energies, acceptance=self.acceptance(), geweke_z=z)


def run_chain(params: ChainParams, rng: Optional[np.random.Generator] = None) -> ChainResult:
    """Thinned post-burn-in cycle spectra of one chain plus its diagnostics"""
    return SpatialChain(params, rng).run()


# Fraction of points in long cycles

class NuRow(NamedTuple):
    K: int
    nu: float
    stderr: float


class NuEstimate(NamedTuple):
    K: int
    nu_K: float
    stderr_K: float
    plateau: float
    plateau_stderr: float
    rows: List[NuRow]


def default_K(N: int) -> int:
    return int(math.ceil(N ** (2 / 3)))


def plateau_start(N: int) -> int:
    return int(math.ceil(math.sqrt(N)))


def k_grid(N: int, points: int = 24) -> List[int]:
    """0, a geometric grid up to N, and the window ends ceil(N^{1/2}), ceil(N^{2/3})"""
    grid = {0, N, plateau_start(N), default_K(N)}
    grid.update(int(round(v)) for v in np.geomspace(1, max(N, 1), points))
    return sorted(grid)


def nu_matrix(spectra: Sequence[CycleSpectrum], grid: Sequence[int]) -> np.ndarray:
    return np.array([[s.fraction_above(K) for K in grid] for s in spectra])


def estimate_nu(spectra: Sequence[CycleSpectrum], K: Optional[int] = None) -> NuEstimate:
    """nu_K = mean fraction of points in cycles longer than K, over a K-grid, with the plateau value"""
    if not spectra:
        raise ValueError("estimate_nu needs at least one spectrum")
    N = spectra[0].N
    K = default_K(N) if K is None else K
    grid = sorted(set(k_grid(N)) | {K})
    values = nu_matrix(spectra, grid)
    S = len(spectra)
    stderr = values.std(axis=0, ddof=1) / math.sqrt(S) if S > 1 else np.zeros(len(grid))
    rows = [NuRow(K=k, nu=float(v), stderr=float(e)) for k, v, e in zip(grid, values.mean(axis=0), stderr)]
    at_K = rows[grid.index(K)]

    # Above sqrt(N) only the macroscopic cycles are left and nu_K falls linearly in K
    # (exactly so for a uniform permutation); the intercept of that line is the plateau.
    lo, hi = plateau_start(N), default_K(N)
    window = [index for index, k in enumerate(grid) if lo <= k <= hi]
    if len(window) >= 2:
        design = np.column_stack([np.ones(len(window)), np.array(grid)[window]])
        coefficients = np.linalg.pinv(design)[0]
        intercepts = values[:, window] @ coefficients
    else:
        intercepts = values[:, grid.index(hi)]
    plateau = float(np.clip(intercepts.mean(), 0.0, 1.0))
    plateau_stderr = float(intercepts.std(ddof=1) / math.sqrt(S)) if S > 1 else 0.0
    return NuEstimate(K=K, nu_K=at_K.nu, stderr_K=at_K.stderr, plateau=plateau,
                      plateau_stderr=plateau_stderr, rows=rows)

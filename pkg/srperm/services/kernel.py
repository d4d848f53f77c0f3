"""
Kernel Service
Jump kernels, dispersion relations, periodized jump weights and critical densities
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate, optimize, special

from ..exceptions import ConfigurationError, DomainError, NumericalFailure
from ..models.config import BoxGeometry, CycleWeightModel, JumpKernel
from . import weights as weights_service

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray, list, tuple]

# Images per side kept by the gaussian image sum before refusing the box.
MAX_IMAGES = 64
# Gauss-Legendre nodes per panel of the radial k-space rule.
PANEL_NODES = 32
# Cap on the number of j-terms for quadrature-based critical densities.
J_SERIES_CAP = 1 << 16
# Below this angular frequency the power-law transform is taken from its deficit 1 - T.
SMALL_OMEGA = 2 * math.pi
# Above it the large-frequency expansion of the power-law transform is exact to double precision.
ASYMPTOTIC_OMEGA = 1e6


def build_kernel(kernel: Optional[JumpKernel] = None, k_max: Optional[float] = None, **params) -> JumpKernel:
    """Construct a kernel and certify experimental families up to the mode cutoff in use"""
    if kernel is None:
        kernel = JumpKernel(**params)
    if kernel.experimental:
        certify_kernel(kernel, k_max=k_max)
    return kernel


def certify_kernel(kernel: JumpKernel, grid_size: int = 24, k_max: Optional[float] = None) -> None:
    """Check unit mass, Fourier positivity and the growth certificate on a sample grid"""
    norm = density_normalization(kernel)
    if abs(norm - 1.0) > 1e-6:
        raise ConfigurationError(f"kernel: jump density integrates to {norm:.9g}, not 1")
    r0 = _scale(kernel)
    top = 1e2 * r0 if k_max is None else min(1e2 * r0, max(k_max, r0))
    grid = np.geomspace(1e-3 * r0, top, grid_size)
    for r in grid:
        try:
            radial_dispersion(kernel, r)
        except NumericalFailure as e:
            raise ConfigurationError(f"kernel: Fourier transform not positive at |k| = {r:.6g} ({e})")
    small = grid[grid <= r0]
    bound = kernel.a * small ** kernel.eta
    eps_small = radial_dispersion(kernel, small)
    bad = small[eps_small < bound * (1 - 1e-9)]
    if bad.size:
        raise ConfigurationError(
            f"a, eta: growth certificate eps(k) >= a|k|^eta fails at |k| = {bad[0]:.6g}"
        )
    logger.info("Certified %s kernel on %d grid points up to |k| = %.4g", kernel.family, grid_size, top)


def density(kernel: JumpKernel, x: ArrayLike) -> np.ndarray:
    """Real-space jump density e^{-xi(x)}"""
    x = np.asarray(x, dtype=float)
    if kernel.family == "gaussian":
        r2 = _norm2(x, kernel.d)
        return (4 * math.pi * kernel.beta) ** (-kernel.d / 2) * np.exp(-r2 / (4 * kernel.beta))
    c = (kernel.gamma_xi - 1) / 2
    return c * (np.abs(x) + 1) ** (-kernel.gamma_xi)


def density_normalization(kernel: JumpKernel) -> float:
    """Integral of the jump density over R^d; closed form for gaussians"""
    if kernel.family == "gaussian":
        return 1.0
    # t = e^s - 1 turns the algebraic tail into an exponential one
    integrand = lambda s: float(density(kernel, math.expm1(s))) * math.exp(s)
    value, abserr = integrate.quad(integrand, 0, np.inf, epsabs=0, epsrel=kernel.quad_tol, limit=200)
    if abserr > 10 * kernel.quad_tol * abs(value):
        raise NumericalFailure(f"normalization quadrature did not converge (error {abserr:.3g})")
    return 2 * value


def dispersion(kernel: JumpKernel, k: ArrayLike) -> Union[float, np.ndarray]:
    """Dispersion relation eps(k) with e^{-eps(k)} the Fourier transform of the jump density"""
    k = np.asarray(k, dtype=float)
    r = np.sqrt(_norm2(k, kernel.d))
    eps = radial_dispersion(kernel, r)
    return float(eps) if np.ndim(eps) == 0 else eps


def radial_dispersion(kernel: JumpKernel, r: ArrayLike) -> Union[float, np.ndarray]:
    """eps as a function of |k|; every supported kernel is radial"""
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise NumericalFailure("dispersion: non-finite wave vector")
    if kernel.family == "gaussian":
        return 4 * math.pi ** 2 * kernel.beta * r ** 2
    values = np.vectorize(lambda t: _power_law_dispersion(kernel.gamma_xi, kernel.quad_tol, float(t)))(r)
    return values if values.ndim else float(values)


@lru_cache(maxsize=65536)
def _power_law_dispersion(gamma_xi: float, quad_tol: float, r: float) -> float:
    """-log of the transform T(w) = (g - 1) int_0^inf (1 + t)^{-g} cos(w t) dt, w = 2 pi |k|

    Integrating by parts gives the deficit near k = 0 and the tail at large k without cancellation:
    1 - T(w) = w^{g-1} int_0^inf (w + u)^{1-g} sin(u) du, used while T >= 1/2, and
    T(w) = g (g - 1) w^{-2} (1 - (g + 1) int_0^inf (1 + t)^{-g-2} cos(w t) dt) once the bracket is >= 1/2.
    In between T is integrated directly, in u = w t.
    """
    if r == 0.0:
        return 0.0
    g = gamma_xi
    omega = 2 * math.pi * abs(r)
    if omega <= SMALL_OMEGA:
        deficit = omega ** (g - 1) * _oscillatory(lambda u: (omega + u) ** (1 - g), 1.0, "sin", quad_tol, r)
        if not deficit > 0:
            raise NumericalFailure(f"dispersion: transform deficit {deficit:.3g} at |k| = {r:.6g} is not positive")
        if deficit <= 0.5:
            return -math.log1p(-deficit)
    if omega > ASYMPTOTIC_OMEGA:
        correction = (g + 1) * (g + 2) / omega ** 2
    else:
        correction = (g + 1) * _oscillatory(lambda t: (1 + t) ** (-g - 2), omega, "cos", quad_tol, r)
    if correction <= 0.5:
        transform = g * (g - 1) / omega ** 2 * (1 - correction)
    else:
        scaled = _oscillatory(lambda u: (omega + u) ** (-g), 1.0, "cos", quad_tol, r)
        transform = (g - 1) * omega ** (g - 1) * scaled
    if not transform > 0:
        raise NumericalFailure(f"dispersion: Fourier transform {transform:.3g} at |k| = {r:.6g} is not positive")
    return -math.log(min(transform, 1.0))


def _oscillatory(f, omega: float, weight: str, quad_tol: float, r: float) -> float:
    """int_0^inf f(t) w(omega t) dt with an absolute target scaled to the integral itself"""
    epsabs = quad_tol * 1e-3
    for _ in range(2):
        result = integrate.quad(f, 0, np.inf, weight=weight, wvar=omega, epsabs=epsabs, limlst=200,
                                limit=200, full_output=1)
        value, abserr = result[0], result[1]
        if len(result) > 3 or not math.isfinite(value):
            break
        if abserr <= 1e3 * quad_tol * abs(value) + 1e-15:
            return value
        epsabs = quad_tol * abs(value) * 1e-3
    raise NumericalFailure(f"dispersion quadrature did not converge at |k| = {r:.6g}")


def _norm2(x: np.ndarray, d: int) -> np.ndarray:
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        return x ** 2
    if x.shape[-1] != d:
        raise ConfigurationError(f"point has dimension {x.shape[-1]}, kernel dimension is {d}")
    return np.sum(x ** 2, axis=-1)


def _scale(kernel: JumpKernel) -> float:
    """Wave number where the growth certificate reaches order one"""
    return kernel.a ** (-1.0 / kernel.eta)


# Periodized boundary conditions

class Periodizer:
    """Evaluates log e^{-xi_Lambda(x)} for one kernel and box"""

    def __init__(self, kernel: JumpKernel, box: BoxGeometry, tol: float = 1e-14):
        if kernel.d != box.d:
            raise ConfigurationError("box: dimension differs from the kernel dimension")
        self.kernel = kernel
        self.box = box
        self.tol = tol
        self.images = 0
        self.tail_bound = 0.0
        if kernel.family == "gaussian":
            self.images, self.tail_bound = self._gaussian_images(box.L)
            self._shifts = box.L * np.arange(-self.images, self.images + 1)

    def _gaussian_bound(self, L: float, R: int) -> float:
        beta, d = self.kernel.beta, self.kernel.d
        g0 = (4 * math.pi * beta) ** -0.5
        g = lambda r: g0 * math.exp(-r * r / (4 * beta))
        q = math.exp(-L * L * (2 * R + 2) / (4 * beta))
        tail = 2 * g(L * (R + 0.5)) / (1 - q) if q < 1 else math.inf
        q1 = math.exp(-L * L / (2 * beta))
        s_max = g0 + (2 * g(L / 2) / (1 - q1) if q1 < 1 else math.inf)
        return d * tail * (s_max + tail) ** (d - 1)

    def _gaussian_images(self, L: float):
        for R in range(1, MAX_IMAGES + 1):
            bound = self._gaussian_bound(L, R)
            if bound < self.tol:
                return R, bound
        raise ConfigurationError(
            f"L: box side {L:.6g} too small for tolerance {self.tol:g} at beta={self.kernel.beta:g}; "
            f"minimal admissible L is {self.minimal_side():.6g}"
        )

    def minimal_side(self) -> float:
        """Smallest L whose image sum is certified with at most MAX_IMAGES images"""
        f = lambda L: math.log(max(self._gaussian_bound(L, MAX_IMAGES), 1e-300)) - math.log(self.tol)
        hi = max(self.box.L, 1e-6)
        while f(hi) >= 0:
            hi *= 2
        lo = hi / 2
        while f(lo) < 0 and lo > 1e-12:
            lo /= 2
        return optimize.brentq(f, lo, hi, xtol=1e-12, rtol=1e-10)

    def reduce(self, x: ArrayLike) -> np.ndarray:
        """Reduce points to the torus [-L/2, L/2)^d"""
        L = self.box.L
        x = np.asarray(x, dtype=float)
        return np.mod(x + L / 2, L) - L / 2

    def log_weight(self, x: ArrayLike) -> Union[float, np.ndarray]:
        """log e^{-xi_Lambda(x)} = -xi_Lambda(x)"""
        x = self.reduce(x)
        if self.kernel.family == "gaussian":
            beta, d = self.kernel.beta, self.kernel.d
            if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
                x = x[..., None]
            exponents = -((x[..., None] - self._shifts) ** 2) / (4 * beta)
            per_axis = special.logsumexp(exponents, axis=-1)
            value = np.sum(per_axis, axis=-1) - 0.5 * d * math.log(4 * math.pi * beta)
        else:
            gamma, L = self.kernel.gamma_xi, self.box.L
            c = (gamma - 1) / 2
            if x.ndim and x.shape[-1] == 1:
                x = x[..., 0]
            r = np.abs(x)
            total = (r + 1) ** (-gamma) + L ** (-gamma) * (
                special.zeta(gamma, 1 + (1 - x) / L) + special.zeta(gamma, 1 + (1 + x) / L)
            )
            value = np.log(c * total)
        return float(value) if np.ndim(value) == 0 else value

    def weight(self, x: ArrayLike) -> Union[float, np.ndarray]:
        return np.exp(self.log_weight(x))


@lru_cache(maxsize=128)
def periodizer(kernel: JumpKernel, box: BoxGeometry, tol: float = 1e-14) -> Periodizer:
    """Shared periodizer for a (kernel, box) pair"""
    return Periodizer(kernel, box, tol)


def periodized_jump_weight(kernel: JumpKernel, box: BoxGeometry, x: ArrayLike, tol: float = 1e-14):
    """e^{-xi_Lambda(x)}: the image sum of the jump density over the lattice L Z^d"""
    return periodizer(kernel, box, tol).weight(x)


def fourier_periodized_jump_weight(kernel: JumpKernel, box: BoxGeometry, x: ArrayLike) -> float:
    """Dual evaluation |Lambda|^{-1} sum_k e^{-eps(k)} e^{2 pi i k x} of the periodized weight"""
    if kernel.family != "gaussian":
        raise ConfigurationError("dual evaluation is implemented for the gaussian family only")
    L, beta = box.L, kernel.beta
    x = np.atleast_1d(np.asarray(x, dtype=float))
    c = 4 * math.pi ** 2 * beta / (L * L)
    M = int(math.ceil(math.sqrt(40.0 / c))) + 1
    m = np.arange(-M, M + 1)
    value = 1.0
    for xi in x:
        value *= np.sum(np.exp(-c * m ** 2) * np.cos(2 * math.pi * m * xi / L)) / L
    return float(value)


def cycle_integral(kernel: JumpKernel, box: BoxGeometry, j: int) -> float:
    """|Lambda| sum_z (e^{-xi})^{*j}(Lz); by Poisson summation equal to sum_k e^{-j eps(k)}"""
    if kernel.family != "gaussian":
        raise ConfigurationError("cycle integrals are implemented for the gaussian family only")
    convolved = JumpKernel(family="gaussian", d=kernel.d, beta=kernel.beta * j)
    origin = np.zeros(kernel.d)
    return box.volume * periodized_jump_weight(convolved, box, origin)


# Lattice shells of the dual box

@dataclass(frozen=True)
class Shells:
    """Nonzero dual-lattice shells |m|^2 = s with multiplicity and dispersion"""
    norm2: np.ndarray
    multiplicity: np.ndarray
    eps: np.ndarray
    cutoff: float
    tail_bound: float

    @property
    def count(self) -> int:
        return int(self.multiplicity.sum())


def lattice_shells(kernel: JumpKernel, box: BoxGeometry, eps_cut: float = 40.0) -> Shells:
    """Group the modes k = m/L, 0 < |k| <= cutoff, eps(k) <= eps_cut, by |m|^2"""
    K = cutoff_radius(kernel, box, eps_cut)
    s_max = int(math.floor((K * box.L) ** 2 + 1e-9))
    if s_max < 1:
        empty = np.zeros(0, dtype=np.int64)
        return Shells(empty, empty, np.zeros(0), K, mode_tail_bound(kernel, box, K))
    m_max = int(math.isqrt(s_max))
    squares = np.zeros(s_max + 1, dtype=np.int64)
    for m in range(m_max + 1):
        squares[m * m] += 1 if m == 0 else 2
    counts = squares.copy()
    for _ in range(box.d - 1):
        # one axis at a time: shifted adds over the m^2 offsets
        previous, counts = counts, counts.copy()
        for m in range(1, m_max + 1):
            counts[m * m:] += 2 * previous[: s_max + 1 - m * m]
    norm2 = np.nonzero(counts)[0]
    norm2 = norm2[norm2 > 0]
    eps = np.atleast_1d(radial_dispersion(kernel, np.sqrt(norm2) / box.L))
    keep = eps <= eps_cut
    return Shells(
        norm2=norm2[keep].astype(np.int64),
        multiplicity=counts[norm2][keep].astype(np.int64),
        eps=np.asarray(eps[keep], dtype=float),
        cutoff=K,
        tail_bound=mode_tail_bound(kernel, box, K),
    )


def cutoff_radius(kernel: JumpKernel, box: BoxGeometry, eps_cut: float) -> float:
    """min(k_max, radius where eps reaches eps_cut)"""
    if kernel.family == "gaussian":
        radius = math.sqrt(eps_cut / (4 * math.pi ** 2 * kernel.beta))
    elif box.k_max is None:
        raise ConfigurationError("k_max: required for family 'power_law_1d'")
    else:
        radius = box.k_max
    return radius if box.k_max is None else min(radius, box.k_max)


def mode_tail_bound(kernel: JumpKernel, box: BoxGeometry, K: float) -> float:
    """Upper bound on |Lambda|^{-1} sum_{|k| > K} e^{-eps(k)}"""
    d = kernel.d
    R = max(K - math.sqrt(d) / box.L, 0.0)
    if kernel.family == "gaussian":
        a = 4 * math.pi ** 2 * kernel.beta
        return (math.pi / a) ** (d / 2) * float(special.gammaincc(d / 2, a * R * R))
    inner, _ = integrate.quad(lambda t: math.exp(-float(radial_dispersion(kernel, t))), 0, R, limit=200)
    return max(float(density(kernel, 0.0)) - 2 * inner, 0.0)


# Critical densities

class SeriesResult(NamedTuple):
    """A truncated series with its certified remainder"""
    value: float
    residual: float
    terms: int


def critical_density(kernel: JumpKernel, weights: CycleWeightModel, tol: float = 1e-10) -> float:
    """rho_c = sum_j e^{-alpha_j} int e^{-j eps(k)} dk"""
    return critical_density_series(kernel, weights, tol).value


def critical_density_series(
    kernel: JumpKernel, weights: CycleWeightModel, tol: float = 1e-10, method: str = "auto"
) -> SeriesResult:
    """Critical density with its truncation residual

    method is one of "auto", "closed_form" (gaussian only), "quadrature" (the j-sum taken inside
    the k-integral when the weights allow it) and "series" (k-integrals summed over j).
    """
    _check_domain(kernel)
    if method == "auto":
        method = "closed_form" if kernel.family == "gaussian" else "quadrature"
    if method == "closed_form":
        if kernel.family != "gaussian":
            raise ConfigurationError("closed-form critical density needs the gaussian family")
        return _gaussian_critical_density(kernel, weights)
    if method == "quadrature" and weights.regime != "logarithmic":
        return _resummed_critical_density(kernel, weights, tol)
    if method not in ("quadrature", "series"):
        raise ConfigurationError(f"method: unknown critical-density method '{method}'")
    return _quadrature_critical_density(kernel, weights, tol)


def _check_domain(kernel: JumpKernel) -> None:
    if kernel.d <= kernel.eta:
        raise DomainError(
            f"d: the critical-density series diverges unless d > eta (d={kernel.d}, eta={kernel.eta:g})"
        )


def _gaussian_critical_density(kernel: JumpKernel, weights: CycleWeightModel) -> SeriesResult:
    """Explicit head over the overrides plus a Hurwitz-zeta tail"""
    prefactor = (4 * math.pi * kernel.beta) ** (-kernel.d / 2)
    s = kernel.d / 2
    head_terms = weights.last_override
    j = np.arange(1, head_terms + 1)
    head = float(np.sum(np.exp(-weights_service.cycle_weights(weights, head_terms)) * j ** (-s))) if head_terms else 0.0
    if weights.regime == "logarithmic":
        tail = float(special.zeta(s + weights.gamma, head_terms + 1))
    else:
        tail = math.exp(-weights.alpha) * float(special.zeta(s, head_terms + 1))
    value = prefactor * (head + tail)
    residual = 8 * np.finfo(float).eps * value
    return SeriesResult(value, residual, head_terms)


class RadialRule(NamedTuple):
    """Composite Gauss-Legendre rule in |k| with surface factors folded into the weights"""
    weights: np.ndarray
    eps: np.ndarray
    k_tail: float


@lru_cache(maxsize=32)
def radial_rule(kernel: JumpKernel, panels_per_octave: int = 1) -> RadialRule:
    """Radial quadrature over a ball of certified radius"""
    d = kernel.d
    r0 = _scale(kernel)
    edges = [0.0] + list(r0 * 2.0 ** np.arange(-20, 1))
    while float(radial_dispersion(kernel, edges[-1])) < 40.0 and edges[-1] < 1e4 * r0:
        edges.append(edges[-1] * 2.0 ** (1.0 / panels_per_octave))
    x, w = leggauss(PANEL_NODES)
    nodes, node_weights = [], []
    surface = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = (hi - lo) / 2
        r = lo + half * (x + 1)
        nodes.append(r)
        node_weights.append(half * w * surface * r ** (d - 1))
    nodes = np.concatenate(nodes)
    eps = np.asarray(radial_dispersion(kernel, nodes), dtype=float)
    k_tail = math.exp(-float(radial_dispersion(kernel, edges[-1])))
    return RadialRule(np.concatenate(node_weights), eps, k_tail)


def _quadrature_critical_density(kernel: JumpKernel, weights: CycleWeightModel, tol: float) -> SeriesResult:
    """Sum of k-space integrals with a certificate-based remainder bound on the j-series"""
    rule = radial_rule(kernel)
    origin_density = float(density(kernel, np.zeros(kernel.d) if kernel.d > 1 else 0.0))
    d, eta, a = kernel.d, kernel.eta, kernel.a
    ball = d * math.pi ** (d / 2) * math.gamma(d / eta) / (math.gamma(d / 2 + 1) * eta)
    s = d / eta + (weights.gamma if weights.regime == "logarithmic" else 0.0)
    # beyond |k| = r0 the certificate is not assumed; there e^{-eps} <= outer per factor
    outer = math.exp(-float(radial_dispersion(kernel, _scale(kernel))))
    total, k_residual, J = 0.0, 0.0, 0
    residual = math.inf
    chunk = 64
    while J < J_SERIES_CAP:
        j = np.arange(J + 1, J + chunk + 1)
        integrals = np.exp(-np.outer(j, rule.eps)) @ rule.weights
        if J == 0:
            integrals[0] = origin_density
        k_tails = origin_density * rule.k_tail ** (j - 1)
        k_tails[0] = 0.0
        factors = np.exp(-weights_service.cycle_weights(weights, J + chunk)[J:])
        total += float(np.sum(factors * integrals))
        k_residual += float(np.sum(factors * k_tails))
        J += chunk
        if J < weights.last_override:
            continue
        w_max = _weight_envelope(weights)
        j_bound = w_max * ball * a ** (-d / eta) * float(special.zeta(s, J + 1))
        j_bound += w_max * origin_density * outer ** J / (1 - outer)
        residual = j_bound + k_residual
        if residual <= tol * total:
            return SeriesResult(total, residual, J)
        chunk = min(2 * chunk, J_SERIES_CAP - J) or 1
    raise NumericalFailure(
        f"critical density: remainder bound {residual:.3g} not below {tol:g} x {total:.6g} within {J_SERIES_CAP} terms"
    )


def _weight_envelope(weights: CycleWeightModel) -> float:
    """Bound on e^{-alpha_j} (divided by j^{-gamma} in the logarithmic regime) beyond the overrides"""
    if weights.regime == "logarithmic":
        return 1.0
    return math.exp(-weights.alpha)


def _bose_integral(kernel: JumpKernel, epsrel: float) -> Tuple[float, float]:
    """int (e^{eps(k)} - 1)^{-1} dk and its quadrature error estimate"""
    d = kernel.d
    surface = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    integrand = lambda r: r ** (d - 1) * _bose_factor(float(radial_dispersion(kernel, r))) if r > 0 else 0.0
    r0 = _scale(kernel)
    head, err1 = integrate.quad(integrand, 0, r0, epsabs=0, epsrel=epsrel, limit=200)
    tail, err2 = integrate.quad(integrand, r0, np.inf, epsabs=0, epsrel=epsrel, limit=200)
    if err1 + err2 > 1e3 * epsrel * (head + tail):
        raise NumericalFailure("k-space integral of (e^eps - 1)^{-1}: quadrature did not converge")
    return surface * (head + tail), surface * (err1 + err2)


def _bose_factor(eps: float) -> float:
    """(e^eps - 1)^{-1} written in e^{-eps} so that large eps underflows to 0"""
    if eps <= 0:
        raise NumericalFailure(f"k-space integral: dispersion {eps:.3g} is not positive away from k = 0")
    return math.exp(-eps) / -math.expm1(-eps)


def geometric_series_bound(kernel: JumpKernel) -> float:
    """int (e^{eps(k)} - 1)^{-1} dk, the bound on rho_c when sup_j e^{-alpha_j} <= 1"""
    _check_domain(kernel)
    return _bose_integral(kernel, kernel.quad_tol)[0]


def _resummed_critical_density(kernel: JumpKernel, weights: CycleWeightModel, tol: float) -> SeriesResult:
    """theta int (e^{eps} - 1)^{-1} dk plus the finitely many override corrections"""
    theta = math.exp(-weights.alpha)
    integral, error = _bose_integral(kernel, min(kernel.quad_tol, tol))
    value, residual = theta * integral, theta * error
    head_terms = weights.last_override
    if head_terms:
        rule = radial_rule(kernel)
        origin_density = float(density(kernel, np.zeros(kernel.d) if kernel.d > 1 else 0.0))
        j = np.arange(1, head_terms + 1)
        integrals = np.exp(-np.outer(j, rule.eps)) @ rule.weights
        integrals[0] = origin_density
        corrections = np.exp(-weights_service.cycle_weights(weights, head_terms)) - theta
        value += float(np.sum(corrections * integrals))
        residual += float(np.sum(np.abs(corrections[1:]) * origin_density * rule.k_tail ** j[:-1]))
    if residual > max(tol, kernel.quad_tol) * abs(value):
        raise NumericalFailure(f"critical density: quadrature error {residual:.3g} above tolerance for {value:.6g}")
    return SeriesResult(value, residual, head_terms)


def finite_volume_critical_density(
    kernel: JumpKernel,
    weights: CycleWeightModel,
    box: BoxGeometry,
    j_cutoff: Optional[int] = None,
    eps_cut: float = 40.0,
    tol: float = 1e-10,
) -> SeriesResult:
    """Riemann approximation sum_j e^{-alpha_j} |Lambda|^{-1} sum_{k != 0} e^{-j eps(k)}"""
    _check_domain(kernel)
    shells = lattice_shells(kernel, box, eps_cut)
    if shells.count == 0:
        return SeriesResult(0.0, shells.tail_bound, 0)
    if j_cutoff is None and weights.regime != "logarithmic":
        total, remainder, J = _resummed_mode_sum(weights, shells, box.volume)
    else:
        total, remainder, J = _mode_series(weights, shells, box.volume, j_cutoff, tol)
    mode_residual = shells.tail_bound * _weight_envelope(weights) / (1 - math.exp(-min(eps_cut, 700)))
    if mode_residual > tol * max(total, 1e-300):
        logger.warning("Mode cutoff residual %.3g exceeds tolerance for L=%g", mode_residual, box.L)
    return SeriesResult(total, remainder + mode_residual, J)


def _resummed_mode_sum(weights: CycleWeightModel, shells: Shells, volume: float) -> Tuple[float, float, int]:
    """|Lambda|^{-1} sum_k theta / (e^{eps(k)} - 1) plus the override corrections"""
    theta = math.exp(-weights.alpha)
    per_mode = theta / np.expm1(shells.eps)
    head_terms = weights.last_override
    rows = max(1, 4_000_000 // len(shells.eps))
    for first in range(1, head_terms + 1, rows):
        j = np.arange(first, min(first + rows, head_terms + 1))
        corrections = np.exp(-weights_service.cycle_weights(weights, int(j[-1]))[first - 1:]) - theta
        per_mode = per_mode + corrections @ np.exp(-np.outer(j, shells.eps))
    total = float(np.sum(shells.multiplicity * per_mode)) / volume
    return total, 16 * np.finfo(float).eps * abs(total), head_terms


def _mode_series(weights: CycleWeightModel, shells: Shells, volume: float, j_cutoff: Optional[int],
                 tol: float) -> Tuple[float, float, int]:
    """The j-series of the Riemann sum, truncated at j_cutoff or when the remainder is below tol"""
    log_g = np.log(shells.multiplicity.astype(float)) - math.log(volume)
    decay = math.exp(-float(shells.eps.min()))
    total, J, chunk = 0.0, 0, 256
    remainder = math.inf
    cap = j_cutoff if j_cutoff is not None else J_SERIES_CAP * 64
    while J < cap:
        n = min(chunk, cap - J)
        j = np.arange(J + 1, J + n + 1)
        sums = np.exp(special.logsumexp(log_g[None, :] - np.outer(j, shells.eps), axis=1))
        factors = np.exp(-weights_service.cycle_weights(weights, J + n)[J:])
        total += float(np.sum(factors * sums))
        J += n
        last = sums[-1] * decay
        remainder = _weight_envelope(weights) * last / (1 - decay) if decay < 1 else math.inf
        if j_cutoff is None and J >= weights.last_override and remainder <= tol * total:
            break
        chunk = max(1, min(2 * chunk, 4_000_000 // len(shells.eps)))
    else:
        if j_cutoff is None:
            raise NumericalFailure(f"finite-volume critical density: remainder {remainder:.3g} above tolerance")
    return total, remainder, J

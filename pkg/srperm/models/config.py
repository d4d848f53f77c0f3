"""
Domain and configuration schemas
Jump kernels, box geometry, cycle weights, chain parameters and the flat run configuration
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..exceptions import ConfigurationError

# Asymptotic-regime overrides beyond this index are refused; there alpha_j = alpha.
MAX_OVERRIDE_INDEX = 10_000


class JumpKernel(BaseModel):
    """Jump density e^{-xi} and the parameters of its dispersion relation"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: Literal["gaussian", "power_law_1d"] = Field(default="gaussian", description="Kernel family")
    d: int = Field(default=3, ge=1, description="Space dimension")
    beta: Optional[float] = Field(default=None, gt=0, description="Inverse temperature (gaussian)")
    gamma_xi: Optional[float] = Field(default=None, gt=1, lt=2, description="Decay exponent (power_law_1d)")
    a: Optional[float] = Field(default=None, gt=0, description="Growth certificate prefactor")
    eta: Optional[float] = Field(default=None, gt=0, description="Growth certificate exponent")
    quad_tol: float = Field(default=1e-8, gt=0, lt=1, description="Relative quadrature tolerance")

    @model_validator(mode="before")
    @classmethod
    def fill_certificate(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        family = data.get("family", "gaussian")
        if family == "gaussian":
            beta = data.get("beta")
            if beta is None:
                raise ValueError("beta: required for family 'gaussian'")
            exact_a = 4.0 * math.pi ** 2 * float(beta)
            if data.get("a") is None:
                data["a"] = exact_a
            elif float(data["a"]) > exact_a * (1 + 1e-12):
                raise ValueError(f"a: certificate {data['a']} exceeds 4*pi^2*beta = {exact_a}")
            if data.get("eta") is None:
                data["eta"] = 2.0
            elif float(data["eta"]) != 2.0:
                raise ValueError("eta: the gaussian dispersion grows with exponent 2")
        elif family == "power_law_1d":
            if data.get("gamma_xi") is None:
                raise ValueError("gamma_xi: required for family 'power_law_1d'")
            if data.get("a") is None:
                raise ValueError("a: growth certificate required for family 'power_law_1d'")
            if data.get("eta") is None:
                data["eta"] = float(data["gamma_xi"]) - 1.0
            if data.get("d", 1) != 1:
                raise ValueError("d: family 'power_law_1d' is one-dimensional")
            data["d"] = 1
        return data

    @model_validator(mode="after")
    def check_eta(self) -> "JumpKernel":
        if self.eta > self.d and self.family != "gaussian":
            raise ValueError(f"eta: must lie in (0, d], got {self.eta}")
        return self

    @property
    def experimental(self) -> bool:
        return self.family != "gaussian"


class BoxGeometry(BaseModel):
    """Cubic box of side L with a Fourier mode cutoff"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    L: float = Field(..., gt=0, description="Side length")
    d: int = Field(default=3, ge=1, description="Space dimension")
    k_max: Optional[float] = Field(default=None, ge=0, description="Mode cutoff |k| <= k_max")

    @property
    def volume(self) -> float:
        return self.L ** self.d

    @classmethod
    def for_density(cls, N: int, rho: float, d: int, k_max: Optional[float] = None) -> "BoxGeometry":
        """Box holding N points at density rho"""
        if rho <= 0:
            raise ConfigurationError(f"rho: density must be positive, got {rho}")
        return cls(L=(N / rho) ** (1.0 / d), d=d, k_max=k_max)


class CycleWeightModel(BaseModel):
    """Cycle weights alpha_j in one of the three supported regimes"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    regime: Literal["constant", "asymptotic", "logarithmic"] = Field(default="constant")
    alpha: float = Field(default=0.0, description="Limit value of alpha_j")
    gamma: Optional[float] = Field(default=None, gt=0, description="Logarithmic growth rate")
    overrides: Tuple[Tuple[int, float], ...] = Field(default=(), description="Finite list of (j, alpha_j)")

    @model_validator(mode="after")
    def check_regime(self) -> "CycleWeightModel":
        if self.regime == "logarithmic" and self.gamma is None:
            raise ValueError("gamma: required for regime 'logarithmic'")
        if self.regime != "asymptotic" and self.overrides:
            raise ValueError(f"overrides: only allowed in regime 'asymptotic', not '{self.regime}'")
        if not math.isfinite(self.alpha):
            raise ValueError("alpha: must be finite")
        seen = set()
        for j, value in self.overrides:
            if j < 1 or j > MAX_OVERRIDE_INDEX:
                raise ValueError(f"overrides: index {j} outside 1..{MAX_OVERRIDE_INDEX}")
            if j in seen:
                raise ValueError(f"overrides: index {j} given twice")
            if not math.isfinite(value):
                raise ValueError(f"overrides: alpha_{j} must be finite")
            seen.add(j)
        return self

    @property
    def theta(self) -> Optional[float]:
        """PD parameter e^{-alpha}; None in the logarithmic regime"""
        if self.regime == "logarithmic":
            return None
        return math.exp(-self.alpha)

    @property
    def case(self) -> str:
        """Which of the cases (i), (ii), (iii) the weights fall into"""
        if self.regime == "logarithmic":
            return "iii"
        return "i" if self.alpha > 0 else "ii"

    @property
    def last_override(self) -> int:
        return max((j for j, _ in self.overrides), default=0)

    @property
    def deviation_sum(self) -> float:
        """Sum |alpha_j - alpha| (case i) or sum |alpha_j - alpha|/j (case ii)"""
        if self.regime == "logarithmic":
            return 0.0
        if self.case == "i":
            return sum(abs(v - self.alpha) for _, v in self.overrides)
        return sum(abs(v - self.alpha) / j for j, v in self.overrides)


class ChainParams(BaseModel):
    """Parameters of one real-space Metropolis chain"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kernel: JumpKernel
    weights: CycleWeightModel
    box: BoxGeometry
    N: int = Field(..., ge=1)
    p_pos: float = Field(default=0.5, gt=0, lt=1, description="Fraction of position updates")
    proposal_scale: Optional[float] = Field(default=None, gt=0, description="Displacement std")
    sweeps: int = Field(default=1000, ge=1)
    burn_in: int = Field(default=100, ge=0)
    thinning: int = Field(default=1, ge=1)
    audit_interval: int = Field(default=100, ge=1, description="Sweeps between full recomputations")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_schedule(self) -> "ChainParams":
        if self.burn_in >= self.sweeps:
            raise ValueError(f"burn_in: must be smaller than sweeps ({self.burn_in} >= {self.sweeps})")
        if self.kernel.d != self.box.d:
            raise ValueError("box: dimension differs from the kernel dimension")
        return self

    @property
    def displacement(self) -> float:
        if self.proposal_scale is not None:
            return self.proposal_scale
        if self.kernel.beta is not None:
            return 2.0 * math.sqrt(self.kernel.beta)
        return 1.0


class RunConfig(BaseModel):
    """Flat key-value run configuration shared by all commands"""

    model_config = ConfigDict(extra="forbid")

    # kernel
    family: Literal["gaussian", "power_law_1d"] = "gaussian"
    d: int = Field(default=3, ge=1)
    beta: Optional[float] = None
    gamma_xi: Optional[float] = None
    a: Optional[float] = None
    eta: Optional[float] = None
    quad_tol: float = 1e-8
    # weights
    regime: Literal["constant", "asymptotic", "logarithmic"] = "constant"
    alpha: float = 0.0
    gamma: Optional[float] = None
    overrides: List[Tuple[int, float]] = Field(default_factory=list)
    # geometry and series
    L: Optional[float] = None
    L_grid: List[float] = Field(default_factory=lambda: [8.0, 16.0, 32.0])
    k_max: Optional[float] = None
    eps_cut: float = Field(default=40.0, gt=0)
    tol: float = Field(default=1e-10, gt=0)
    j_cutoff: Optional[int] = Field(default=None, ge=1)
    # sampling
    N: int = Field(default=256, ge=1)
    N_max: int = Field(default=200, ge=0)
    rho: Optional[float] = Field(default=None, gt=0)
    rho_grid: List[float] = Field(default_factory=lambda: [0.5, 2.0], description="Multiples of rho_c")
    sampler: Literal["fourier-exact", "fourier-mcmc", "spatial", "marginal", "nonspatial"] = "fourier-exact"
    draws: int = Field(default=200, ge=1)
    steps: int = Field(default=100_000, ge=0)
    mcmc_proposal: Literal["unit", "uniform"] = "unit"
    sweeps: int = Field(default=1000, ge=1)
    burn_in: int = Field(default=100, ge=0)
    thinning: int = Field(default=1, ge=1)
    p_pos: float = Field(default=0.5, gt=0, lt=1)
    proposal_scale: Optional[float] = None
    audit_interval: int = Field(default=100, ge=1)
    # statistics
    K: Optional[int] = Field(default=None, ge=0)
    pd_k: int = Field(default=3, ge=1)
    reference_draws: int = Field(default=20_000, ge=10)
    m_trunc: int = Field(default=200, ge=1)
    event_eps: float = Field(default=0.1, gt=0)
    event_delta: float = Field(default=0.5, gt=0)
    event_M: int = Field(default=50, ge=1)
    # execution
    replicas: int = Field(default=1, ge=1)
    workers: Optional[int] = Field(default=None, ge=1)
    seed: Optional[int] = Field(default=None, ge=0)
    dp_budget: Optional[float] = Field(default=None, gt=0)
    memory_cap_mb: Optional[float] = Field(default=None, gt=0)
    log_mass_cut: float = Field(default=50.0, gt=0)

    def kernel(self) -> JumpKernel:
        return _validated(
            JumpKernel,
            family=self.family, d=self.d, beta=self.beta, gamma_xi=self.gamma_xi,
            a=self.a, eta=self.eta, quad_tol=self.quad_tol,
        )

    def weights(self) -> CycleWeightModel:
        return _validated(
            CycleWeightModel,
            regime=self.regime, alpha=self.alpha, gamma=self.gamma,
            overrides=tuple(tuple(pair) for pair in self.overrides),
        )

    def box(self, L: Optional[float] = None) -> BoxGeometry:
        L = self.L if L is None else L
        if L is None:
            raise ConfigurationError("L: required for this command")
        return _validated(BoxGeometry, L=L, d=self.d, k_max=self.k_max)

    def chain_params(self, N: int, box: BoxGeometry, seed: int) -> ChainParams:
        return _validated(
            ChainParams,
            kernel=self.kernel(), weights=self.weights(), box=box, N=N,
            p_pos=self.p_pos, proposal_scale=self.proposal_scale, sweeps=self.sweeps,
            burn_in=self.burn_in, thinning=self.thinning, audit_interval=self.audit_interval,
            seed=seed,
        )

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Read a JSON config file and apply command-line overrides on top"""
        data: Dict[str, Any] = {}
        if path:
            text = Path(path).read_text()
            try:
                data = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}")
            if not isinstance(data, dict):
                raise ConfigurationError(f"{path}: expected a flat JSON object")
        data.update(overrides or {})
        return _validated(cls, **data)


def _validated(model, **data):
    """Build a model, turning validation failures into ConfigurationError naming the keys"""
    try:
        return model(**data)
    except ValidationError as e:
        problems = []
        for error in e.errors():
            key = ".".join(str(part) for part in error["loc"]) or "config"
            problems.append(f"{key}: {error['msg']}")
        raise ConfigurationError("; ".join(problems))

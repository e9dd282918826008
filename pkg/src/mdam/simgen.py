"""Finite population, Poisson samples and nonresponse for the simulation study.

Six survey variables: four binary (``X1``..``X4``) and two continuous
(``X5``, ``X6``). ``X1`` depends on the survey weight and, together with
``X2``, on a latent unit-nonresponse indicator. Item nonresponse follows
itemwise conditionally independent logistic mechanisms on ``X2``, ``X3``,
``X4`` and ``X6``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .dataset import BINARY, CONTINUOUS, AuxiliaryMargins, MarginEntry, SurveyTable, VariableSpec

NAMES = ("X1", "X2", "X3", "X4", "X5", "X6")
PAPER_N = 3_373_378
PAPER_EXPECTED_N = 6000

# response-indicator predictors; X6 enters R2..R4 with a zero coefficient
_PHI_SIDE = (-1.4, 0.1, 0.1, 0.1, 0.1, 0.0)
_PHI_6 = (-1.4, 0.1, 0.1, 0.1, 0.1, 0.1)
DEFAULT_PHI = {
    "X2": (_PHI_SIDE, ("X1", "X3", "X4", "X5", "X6")),
    "X3": (_PHI_SIDE, ("X1", "X2", "X4", "X5", "X6")),
    "X4": (_PHI_SIDE, ("X1", "X2", "X3", "X5", "X6")),
    "X6": (_PHI_6, ("X1", "X2", "X3", "X4", "X5")),
}


class PopulationError(ValueError):
    pass


@dataclass(frozen=True)
class PopulationConfig:
    """Every coefficient of the data-generating model plus the size law.

    Survey weights ``w = 10 z`` are log-normal with log-sd ``weight_sdlog``,
    rescaled so the inclusion probabilities ``1/w`` sum to
    ``expected_sample_size`` and floored at 1.
    """

    N: int = 200_000
    expected_sample_size: float = 2000.0
    weight_sdlog: float = 0.6
    nu0: float = -1.2
    omega1: tuple[float, float] = (0.06, -0.0002)
    theta1: float = -2.0
    omega2: tuple[float, float] = (0.2, 0.4)
    theta2: float = -2.0
    omega3: tuple[float, ...] = (0.2, 0.3, 0.1)
    omega4: tuple[float, ...] = (0.2, 0.4, 0.4, 0.1)
    omega5: tuple[float, ...] = (0.4, 1.2, -0.9, 0.1, 0.2)
    sigma5: float = 0.5
    omega6: tuple[float, ...] = (0.4, 1.2, -0.9, 0.1, -0.1, 0.1)
    sigma6: float = 0.5
    phi: dict = field(default_factory=lambda: dict(DEFAULT_PHI))

    def __post_init__(self):
        if self.N < 1:
            raise PopulationError("N must be at least 1")
        if not (self.sigma5 > 0 and self.sigma6 > 0):
            raise PopulationError("residual standard deviations must be positive")
        if not 0 < self.expected_sample_size <= self.N:
            raise PopulationError("expected sample size must lie in (0, N]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phi"] = {k: {"coef": list(c), "predictors": list(p)} for k, (c, p) in self.phi.items()}
        return d


def appendix_b(theta1: float = -2.0, paper_scale: bool = False, **overrides) -> PopulationConfig:
    """Simulation-study parameter preset; ``theta1`` is -2 or -0.5 in the study."""
    base = PopulationConfig(theta1=theta1)
    if paper_scale:
        base = replace(base, N=PAPER_N, expected_sample_size=PAPER_EXPECTED_N)
    return replace(base, **overrides) if overrides else base


def schema() -> tuple[VariableSpec, ...]:
    return (
        VariableSpec("X1", BINARY, has_margin=True),
        VariableSpec("X2", BINARY, has_margin=True),
        VariableSpec("X3", BINARY),
        VariableSpec("X4", BINARY),
        VariableSpec("X5", CONTINUOUS),
        VariableSpec("X6", CONTINUOUS),
    )


@dataclass(frozen=True, eq=False)
class Population:
    x: np.ndarray
    z: np.ndarray
    pi: np.ndarray
    w: np.ndarray
    u_latent: np.ndarray
    config: PopulationConfig

    @property
    def N(self) -> int:
        return self.x.shape[0]

    def margins(self) -> AuxiliaryMargins:
        """Known totals of level 1 of X1 and X2, variances left to calibration."""
        return AuxiliaryMargins(
            tuple(MarginEntry(name, 1, float(self.x[:, j].sum())) for j, name in enumerate(NAMES[:2]))
        )


def _size_weights(config: PopulationConfig, rng) -> np.ndarray:
    """Lognormal sizes scaled so that ``sum(1 / w) = E[n]``, with ``w >= 1``."""
    w0 = rng.lognormal(0.0, config.weight_sdlog, size=config.N)
    n = config.expected_sample_size
    if n >= config.N:
        return np.ones(config.N)
    excess = lambda c: np.sum(1.0 / np.maximum(c * w0, 1.0)) - n
    hi = config.N / n * np.max(1.0 / w0) * 2.0
    c = brentq(excess, 1e-12, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    return np.maximum(c * w0, 1.0)


def generate_population(config: PopulationConfig, rng) -> Population:
    N = config.N
    w = _size_weights(config, rng)
    z = w / 10.0
    pi = 1.0 / w
    if np.any(pi <= 0) or np.any(pi > 1 + 1e-12):
        raise PopulationError("inclusion probabilities outside (0, 1]; recalibrate the size law")
    pi = np.minimum(pi, 1.0)
    bern = lambda eta: (rng.random(N) < expit(eta)).astype(float)
    u = bern(np.full(N, config.nu0))
    o1, o2, o3, o4, o5, o6 = (np.asarray(o) for o in (
        config.omega1, config.omega2, config.omega3, config.omega4, config.omega5, config.omega6
    ))
    x1 = bern(o1[0] + o1[1] * w + config.theta1 * u)
    x2 = bern(o2[0] + o2[1] * x1 + config.theta2 * u)
    x3 = bern(o3[0] + o3[1] * x1 + o3[2] * x2)
    x4 = bern(o4[0] + o4[1] * x1 + o4[2] * x2 + o4[3] * x3)
    x5 = o5[0] + o5[1] * x1 + o5[2] * x2 + o5[3] * x3 + o5[4] * x4
    x5 = x5 + config.sigma5 * rng.standard_normal(N)
    x6 = o6[0] + o6[1] * x1 + o6[2] * x2 + o6[3] * x3 + o6[4] * x4 + o6[5] * x5
    x6 = x6 + config.sigma6 * rng.standard_normal(N)
    x = np.column_stack([x1, x2, x3, x4, x5, x6])
    return Population(x, z, pi, w, u.astype(bool), config)


def draw_poisson_sample(pop: Population, rng) -> SurveyTable:
    """Independent Bernoulli(pi_i) inclusion; returns the complete sample."""
    take = rng.random(pop.N) < pop.pi
    x = pop.x[take]
    n = x.shape[0]
    return SurveyTable(
        schema(), x, np.zeros_like(x, dtype=bool), np.zeros(n, dtype=bool), pop.w[take], float(pop.N)
    )


def unit_nr_cell_probabilities(pop: Population) -> dict[tuple[int, int], float]:
    """P(U=1 | X1=a, X2=b) by exact enumeration of the realized population."""
    x1 = pop.x[:, 0].astype(int)
    x2 = pop.x[:, 1].astype(int)
    out = {}
    for a in (0, 1):
        for b in (0, 1):
            cell = (x1 == a) & (x2 == b)
            count = int(cell.sum())
            if count == 0:
                raise PopulationError(f"empty population cell X1={a}, X2={b}")
            out[(a, b)] = float(pop.u_latent[cell].sum()) / count
    return out


def inject_unit_nonresponse(
    sample: SurveyTable, pop: Population, rng, keep_weights: bool = False
) -> SurveyTable:
    """Redraw U from P(U | X1, X2) and blank out nonrespondents.

    Nonrespondents lose their design weights unless ``keep_weights``.
    """
    probs = unit_nr_cell_probabilities(pop)
    x1 = sample.values[:, 0].astype(int)
    x2 = sample.values[:, 1].astype(int)
    p = np.empty(sample.n_rows)
    for (a, b), value in probs.items():
        p[(x1 == a) & (x2 == b)] = value
    unit = rng.random(sample.n_rows) < p
    mask = sample.item_mask.copy()
    mask[unit] = True
    weights = sample.design_weight.copy()
    if not keep_weights:
        weights[unit] = np.nan
    return sample.replace(item_mask=mask, unit_flag=unit, design_weight=weights)


def inject_item_nonresponse(table: SurveyTable, config: PopulationConfig, rng) -> SurveyTable:
    """Delete cells of unit respondents according to the logistic R models.

    Probabilities use the pre-deletion values of every variable.
    """
    resp = ~table.unit_flag
    mask = table.item_mask.copy()
    values = table.values
    for name, (coef, predictors) in config.phi.items():
        j = table.index(name)
        coef = np.asarray(coef, dtype=float)
        if coef[0] == -np.inf:  # switched off
            continue
        X = values[:, [table.index(p) for p in predictors]]
        eta = coef[0] + X[resp] @ coef[1:]
        drop = rng.random(int(resp.sum())) < expit(eta)
        rows = np.flatnonzero(resp)[drop]
        mask[rows, j] = True
    return table.replace(item_mask=mask)


@dataclass(frozen=True, eq=False)
class Replicate:
    complete: SurveyTable
    observed: SurveyTable


def simulate_replicate(pop: Population, rng) -> Replicate:
    sample = draw_poisson_sample(pop, rng)
    with_unit = inject_unit_nonresponse(sample, pop, rng)
    return Replicate(sample, inject_item_nonresponse(with_unit, pop.config, rng))

"""Monte-Carlo evaluation of the weighting estimators on synthetic populations.

A scenario fixes the coefficients of three logistic models over five covariates: the
outcome model, the non-probability inclusion model and the probability inclusion model.
Generative models use the numeric level codes of the discretized covariates.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.optimize import brentq
from scipy.special import expit

from models import (
    Cohort,
    MarginTargets,
    NpsOptions,
    NumericError,
    RailsError,
    RakingOptions,
    SelectionOptions,
    TermSet,
    make_schema,
)
from utils.design import build_design_matrix, expand_terms, population_margins
from utils.estimation import PrevalenceEstimate, estimate_prevalence
from utils.nps import FitError, base_weights
from utils.raking import RakingError, rake
from utils.selection import fit_terms, rails_fit
from utils.storage import SCENARIO_DIR, read_json

logger = logging.getLogger(__name__)

SCENARIOS = ("S1", "S2", "S3", "S4", "S5")
ESTIMATORS = (
    "naive",
    "oracle",
    "cal-1",
    "cal-2",
    "nps-1",
    "nps-2",
    "nps-cal-1",
    "nps-cal-2",
    "vs-nps",
    "vs-rake",
    "RAILS",
)
DEFAULT_ESTIMATORS = (
    "naive", "oracle", "cal-1", "nps-1", "nps-cal-1", "vs-nps", "vs-rake", "RAILS"
)

DESK_SIZES = (200_000, 2_000, 400)
FULL_SIZES = (3_340_000, 35_000, 5_500)

X4_PROBABILITIES = (0.277, 0.287, 0.431, 0.005)
PARETO_SHAPE = 8.0
PARETO_SCALE = 1.0
PARETO_UPPER = 300.0

# Coefficients 6..11 that each scenario forces to zero, per model.
ZERO_PATTERNS: dict[str, dict[str, tuple[int, ...]]] = {
    "S1": {"alpha": tuple(range(6, 12)), "gamma": tuple(range(6, 12))},
    "S2": {"alpha": (6, 7), "gamma": (6, 7)},
    "S3": {"alpha": (8, 9, 10, 11), "gamma": tuple(range(6, 12))},
    "S4": {"gamma": tuple(range(6, 12))},
    "S5": {},
}

PROBABILITY_BOUND = 1e-12


class ScenarioError(RailsError, ValueError):
    """Scenario coefficients that cannot generate a usable population."""
    pass


class ScenarioConfig(BaseModel):
    """
    One simulation scenario.

    alpha, beta and gamma hold 12 coefficients each, in the order: intercept, x1,
    x2, I(x3 = 1..3), the two interaction terms, I(x4 = 1..3), x5. Intercepts are
    re-tuned on generation.
    """
    name: Literal["S1", "S2", "S3", "S4", "S5"]
    alpha: list[float] = Field(min_length=12, max_length=12)
    beta: list[float] = Field(min_length=12, max_length=12)
    gamma: list[float] = Field(min_length=12, max_length=12)
    population_size: int = Field(DESK_SIZES[0], ge=10)
    np_size: int = Field(DESK_SIZES[1], ge=1)
    p_size: int = Field(DESK_SIZES[2], ge=1)
    x1_bins: int = Field(4, ge=2)
    x3_bins: int = Field(4, ge=2)
    seed: int = Field(0, ge=0)
    prevalence_range: tuple[float, float] = (0.15, 0.45)
    regenerate_population: bool = False

    @field_validator("prevalence_range")
    @classmethod
    def check_prevalence_range(cls, value: tuple[float, float]) -> tuple[float, float]:
        low, high = value
        if not 0 < low < high < 1:
            raise ValueError(f"Prevalence range must satisfy 0 < low < high < 1, got {value}")
        return value

    @model_validator(mode="after")
    def check_zero_pattern(self) -> "ScenarioConfig":
        for model, indices in ZERO_PATTERNS[self.name].items():
            coefficients = getattr(self, model)
            nonzero = [j for j in indices if coefficients[j] != 0]
            if nonzero:
                raise ValueError(
                    f"Scenario {self.name} requires {model}[j] = 0 for j in {list(indices)}; "
                    f"got nonzero entries at {nonzero}"
                )
        if not self.np_size < self.population_size or not self.p_size < self.population_size:
            raise ValueError("Cohort sizes must be smaller than the population")
        return self

    def at_scale(self, scale: Literal["desk", "full"]) -> "ScenarioConfig":
        sizes = FULL_SIZES if scale == "full" else DESK_SIZES
        return self.model_copy(
            update=dict(zip(("population_size", "np_size", "p_size"), sizes))
        )


def load_scenario(name_or_path: Union[str, Path]) -> ScenarioConfig:
    """Load a bundled scenario by name (S1..S5) or a scenario JSON file by path."""
    path = Path(name_or_path)
    if str(name_or_path) in SCENARIOS:
        path = SCENARIO_DIR / f"{name_or_path}.json"
    elif not path.exists():
        raise ScenarioError(
            f"Unknown scenario '{name_or_path}'; expected one of {list(SCENARIOS)} or a file"
        )
    return ScenarioConfig.model_validate(read_json(path))


SCHEMA_VARIABLES = ("x1", "x2", "x3", "x4", "x5")


def simulation_schema(config: ScenarioConfig):
    return make_schema({
        "x1": [f"q{k}" for k in range(1, config.x1_bins + 1)],
        "x2": ["0", "1"],
        "x3": [f"q{k}" for k in range(1, config.x3_bins + 1)],
        "x4": ["0", "1", "2", "3"],
        "x5": ["0", "1"],
    })


@dataclass(frozen=True, eq=False)
class SimulatedPopulation:
    """Finite population with its true outcome and inclusion probabilities."""
    cohort: Cohort
    outcome_probability: np.ndarray
    pi_np: np.ndarray
    pi_p: np.ndarray
    intercepts: dict[str, float] = field(default_factory=dict)

    @property
    def y(self) -> np.ndarray:
        return self.cohort.outcome

    @property
    def prevalence(self) -> float:
        return float(self.cohort.outcome.mean())

    @property
    def size(self) -> int:
        return self.cohort.n_rows


def quantile_bins(values: np.ndarray, bins: int) -> np.ndarray:
    """Codes 0..bins-1 by empirical quantiles."""
    edges = np.quantile(values, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


def truncated_pareto(rng: np.random.Generator, size: int) -> np.ndarray:
    """Inverse-CDF draws from a Pareto(shape, scale) truncated at the upper bound."""
    u = rng.random(size)
    mass = 1.0 - (PARETO_SCALE / PARETO_UPPER) ** PARETO_SHAPE
    return PARETO_SCALE / (1.0 - u * mass) ** (1.0 / PARETO_SHAPE)


def _features(codes: np.ndarray, selection_of_probability_cohort: bool) -> np.ndarray:
    x1, x2, x3, x4, x5 = (codes[:, j].astype(float) for j in range(5))
    if selection_of_probability_cohort:
        interactions = [x1 * x3, x2 * (x3 > 0)]
    else:
        interactions = [x1 * x2, x2 * x3]
    columns = (
        [np.ones_like(x1), x1, x2]
        + [(x3 == j).astype(float) for j in (1, 2, 3)]
        + interactions
        + [(x4 == j).astype(float) for j in (1, 2, 3)]
        + [x5]
    )
    return np.column_stack(columns)


def _solve_intercept(offset: np.ndarray, target_mean: float, label: str) -> float:
    def gap(intercept: float) -> float:
        return float(expit(intercept + offset).mean()) - target_mean

    try:
        return brentq(gap, -60.0, 60.0, xtol=1e-12)
    except ValueError:
        raise ScenarioError(
            f"Cannot tune the {label} intercept to a mean probability of {target_mean:g}"
        ) from None


def _check_probabilities(values: np.ndarray, label: str):
    inside = (values > PROBABILITY_BOUND) & (values < 1 - PROBABILITY_BOUND)
    if not inside.any():
        raise ScenarioError(f"Every {label} probability is degenerate")


def generate_population(config: ScenarioConfig, seed: Optional[int] = None) -> SimulatedPopulation:
    """Draw covariates, tune intercepts to the target sizes and draw outcomes."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n = config.population_size

    x1 = rng.normal(20.0, 5.0, n)
    x2 = rng.binomial(1, 0.65, n)
    x3 = truncated_pareto(rng, n)
    x4 = rng.choice(len(X4_PROBABILITIES), size=n, p=X4_PROBABILITIES)
    x5 = rng.binomial(1, np.clip(0.1 * x4, 0.0, 1.0))
    codes = np.column_stack(
        [quantile_bins(x1, config.x1_bins), x2, quantile_bins(x3, config.x3_bins), x4, x5]
    )

    z = _features(codes, selection_of_probability_cohort=False)
    z_p = _features(codes, selection_of_probability_cohort=True)
    alpha, beta, gamma = (
        np.asarray(c, dtype=float) for c in (config.alpha, config.beta, config.gamma)
    )

    outcome_offset = z[:, 1:] @ alpha[1:]
    alpha0 = alpha[0]
    low, high = config.prevalence_range
    if not low <= float(expit(alpha0 + outcome_offset).mean()) <= high:
        alpha0 = _solve_intercept(outcome_offset, (low + high) / 2.0, "outcome")
    beta0 = _solve_intercept(z[:, 1:] @ beta[1:], config.np_size / n, "non-probability")
    gamma0 = _solve_intercept(z_p[:, 1:] @ gamma[1:], config.p_size / n, "probability")

    outcome_probability = expit(alpha0 + outcome_offset)
    pi_np = expit(beta0 + z[:, 1:] @ beta[1:])
    pi_p = expit(gamma0 + z_p[:, 1:] @ gamma[1:])
    _check_probabilities(outcome_probability, "outcome")
    _check_probabilities(pi_np, "non-probability")
    _check_probabilities(pi_p, "probability")
    y = rng.binomial(1, outcome_probability)

    cohort = Cohort(schema=simulation_schema(config), codes=codes, outcome=y)
    logger.debug(
        "Population %s: N=%d prevalence=%.4f intercepts=(%.4f, %.4f, %.4f)",
        config.name, n, y.mean(), alpha0, beta0, gamma0,
    )
    return SimulatedPopulation(
        cohort=cohort,
        outcome_probability=outcome_probability,
        pi_np=pi_np,
        pi_p=pi_p,
        intercepts={"alpha0": float(alpha0), "beta0": float(beta0), "gamma0": float(gamma0)},
    )


@dataclass(frozen=True, eq=False)
class CohortDraw:
    np_cohort: Cohort
    p_cohort: Cohort
    seed: int
    resamples: int = 0


def draw_cohorts(pop: SimulatedPopulation, seed: int, max_resamples: int = 100) -> CohortDraw:
    """Independent Bernoulli inclusion of every population row into each cohort.

    Row ids are population row indices. An empty draw is repeated with seed + 1.
    """
    for resamples in range(max_resamples + 1):
        rng = np.random.default_rng(seed + resamples)
        in_np = rng.random(pop.size) < pop.pi_np
        in_p = rng.random(pop.size) < pop.pi_p
        if in_np.any() and in_p.any():
            break
        logger.info("Empty cohort with seed %d; redrawing", seed + resamples)
    else:
        raise NumericError(f"No non-empty cohorts after {max_resamples} redraws")

    np_rows = np.flatnonzero(in_np)
    p_rows = np.flatnonzero(in_p)
    population = pop.cohort
    np_cohort = Cohort(
        schema=population.schema,
        codes=population.codes[np_rows],
        outcome=population.outcome[np_rows],
        ids=tuple(str(i) for i in np_rows),
    )
    p_cohort = Cohort(
        schema=population.schema,
        codes=population.codes[p_rows],
        design_weight=1.0 / pop.pi_p[p_rows],
        ids=tuple(str(i) for i in p_rows),
    )
    return CohortDraw(np_cohort, p_cohort, seed, resamples)


def calibration_terms(
    schema_variables: Sequence[str] = SCHEMA_VARIABLES,
) -> tuple[TermSet, TermSet]:
    """Main effects and the pool of two-way interactions."""
    terms = expand_terms(schema_variables, 2)
    return terms.main_effects(), TermSet(t for t in terms if t.order == 2)


def population_targets(pop: SimulatedPopulation) -> MarginTargets:
    """True totals of every main-effect and two-way cell."""
    mains, pool = calibration_terms(pop.cohort.variables)
    return population_margins(pop.cohort, mains.union(pool))


class EstimatorOutcome(BaseModel):
    estimator: str
    converged: bool
    estimate: Optional[PrevalenceEstimate] = None
    message: str = ""


class EstimatorSettings(BaseModel):
    nps: NpsOptions = Field(default_factory=NpsOptions)
    raking: RakingOptions = Field(default_factory=RakingOptions)
    selection: SelectionOptions = Field(default_factory=SelectionOptions)


def _raked(base, cohort: Cohort, terms: TermSet, targets: MarginTargets, opts: RakingOptions):
    X = build_design_matrix(cohort, terms, drop_aliased=False)
    result = rake(base, X, targets.restrict(terms), opts)
    if not result.converged:
        raise RakingError(result.message)
    return result.weights


def run_estimators(
    pop: SimulatedPopulation,
    np_cohort: Cohort,
    p_cohort: Cohort,
    targets: MarginTargets,
    estimators: Sequence[str] = DEFAULT_ESTIMATORS,
    settings: Optional[EstimatorSettings] = None,
) -> list[EstimatorOutcome]:
    """Estimate the prevalence with each requested estimator, in the order given.

    A failed fit or a non-converged raking marks that estimator as divergent.
    """
    settings = settings or EstimatorSettings()
    unknown = [name for name in estimators if name not in ESTIMATORS]
    if unknown:
        raise ScenarioError(f"Unknown estimators {unknown}; expected some of {list(ESTIMATORS)}")
    mains, pool = calibration_terms(np_cohort.variables)
    full = mains.union(pool)
    y = np_cohort.outcome
    cache: dict[str, object] = {}

    def nps(terms: TermSet, key: str) -> np.ndarray:
        if key not in cache:
            joint, fit = fit_terms(np_cohort, p_cohort, terms, settings.nps)
            if not fit.converged:
                raise FitError(f"propensity fit stopped by {fit.stopped_by}")
            cache[key] = base_weights(fit, joint.np_block)
        return cache[key]

    def rails():
        if "rails" not in cache:
            cache["rails"] = rails_fit(
                np_cohort, p_cohort, targets, mains, pool,
                settings.nps, settings.raking, settings.selection,
            )
        return cache["rails"]

    def weights_for(name: str) -> np.ndarray:
        ones = np.ones(np_cohort.n_rows)
        if name == "naive":
            return ones
        if name == "oracle":
            rows = np.array([int(i) for i in np_cohort.ids])
            return 1.0 / pop.pi_np[rows]
        if name == "cal-1":
            return _raked(ones, np_cohort, mains, targets, settings.raking)
        if name == "cal-2":
            return _raked(ones, np_cohort, full, targets, settings.raking)
        if name == "nps-1":
            return nps(mains, "nps-1")
        if name == "nps-2":
            return nps(full, "nps-2")
        if name == "nps-cal-1":
            return _raked(nps(mains, "nps-1"), np_cohort, mains, targets, settings.raking)
        if name == "nps-cal-2":
            return _raked(nps(full, "nps-2"), np_cohort, full, targets, settings.raking)
        if name == "vs-nps":
            return rails().attempts[0].base_weights
        if name == "vs-rake":
            first = rails().attempts[0]
            if not first.converged:
                raise RakingError(first.failure or "raking did not converge")
            return first.raking.weights
        result = rails()
        if not result.converged:
            raise RakingError(result.attempts[-1].failure or "raking did not converge")
        return result.weights

    outcomes = []
    for name in estimators:
        try:
            weights = weights_for(name)
            outcomes.append(
                EstimatorOutcome(
                    estimator=name, converged=True, estimate=estimate_prevalence(weights, y)
                )
            )
        except (FitError, RakingError, NumericError) as e:
            logger.debug("Estimator %s diverged: %s", name, e)
            outcomes.append(EstimatorOutcome(estimator=name, converged=False, message=str(e)))
    return outcomes


class ReplicationRecord(BaseModel):
    """One estimator on one replication (long format)."""
    replication: int
    seed: int
    estimator: str
    truth: float
    converged: bool
    estimate: Optional[float] = None
    variance: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    message: str = ""


class ReplicationMetrics(BaseModel):
    """Aggregates of one estimator over all replications; None when undefined."""
    estimator: str
    replications: int
    converged: int
    relative_bias: Optional[float] = None
    avar: Optional[float] = None
    evar: Optional[float] = None
    nominal_cp: Optional[float] = None
    oracle_cp: Optional[float] = None
    divergent: float = Field(0.0, ge=0, le=100)


def summarize(
    results: Sequence[Optional[Union[PrevalenceEstimate, "ReplicationRecord"]]],
    truth: Union[float, Sequence[float]],
    estimator: str = "",
) -> ReplicationMetrics:
    """Relative bias, AVar, EVar and coverage over converged replications.

    `results` holds None for divergent replications. `truth` may vary per replication.
    """
    if not results:
        raise ValueError("Cannot summarize zero replications")
    truths = np.broadcast_to(np.asarray(truth, dtype=float), (len(results),))
    kept = [(r, t) for r, t in zip(results, truths) if r is not None]
    divergent = 100.0 * (len(results) - len(kept)) / len(results)
    metrics = ReplicationMetrics(
        estimator=estimator,
        replications=len(results),
        converged=len(kept),
        divergent=divergent,
    )
    if not kept:
        return metrics

    estimates = np.array([r.estimate for r, _ in kept])
    true = np.array([t for _, t in kept])
    low = np.array([r.ci_low for r, _ in kept])
    high = np.array([r.ci_high for r, _ in kept])
    bias = float(np.mean(estimates - true))
    metrics.relative_bias = 100.0 * bias / float(true.mean())
    metrics.avar = float(np.mean([r.variance for r, _ in kept]))
    metrics.evar = float(np.var(estimates, ddof=1)) if len(kept) > 1 else None
    metrics.nominal_cp = 100.0 * float(np.mean((low <= true) & (true <= high)))
    metrics.oracle_cp = 100.0 * float(np.mean((low - bias <= true) & (true <= high - bias)))
    return metrics


@dataclass(frozen=True, eq=False)
class SimulationResult:
    config: ScenarioConfig
    seed: int
    records: list[ReplicationRecord]
    metrics: list[ReplicationMetrics]
    truth: float


def replication_seeds(seed: int, replications: int) -> tuple[int, list[int]]:
    """Population seed and one independent cohort seed per replication."""
    children = np.random.SeedSequence(seed).spawn(replications + 1)
    states = [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]
    return states[0], states[1:]


def _replicate(
    index: int,
    seed: int,
    config: ScenarioConfig,
    population: Optional[SimulatedPopulation],
    targets: Optional[MarginTargets],
    estimators: Sequence[str],
    settings: EstimatorSettings,
) -> list[ReplicationRecord]:
    if population is None:
        population = generate_population(config, seed)
        targets = population_targets(population)
    draw = draw_cohorts(population, seed)
    outcomes = run_estimators(
        population, draw.np_cohort, draw.p_cohort, targets, estimators, settings
    )
    truth = population.prevalence
    records = []
    for outcome in outcomes:
        estimate = outcome.estimate
        records.append(
            ReplicationRecord(
                replication=index,
                seed=seed,
                estimator=outcome.estimator,
                truth=truth,
                converged=outcome.converged,
                estimate=estimate.estimate if estimate else None,
                variance=estimate.variance if estimate else None,
                ci_low=estimate.ci_low if estimate else None,
                ci_high=estimate.ci_high if estimate else None,
                message=outcome.message,
            )
        )
    return records


def run_simulation(
    config: ScenarioConfig,
    replications: int,
    seed: Optional[int] = None,
    estimators: Sequence[str] = DEFAULT_ESTIMATORS,
    settings: Optional[EstimatorSettings] = None,
    n_jobs: int = 1,
) -> SimulationResult:
    """Run every replication and fold the metrics in replication order."""
    if replications < 1:
        raise ValueError(f"replications must be >= 1, got {replications}")
    settings = settings or EstimatorSettings()
    seed = config.seed if seed is None else seed
    population_seed, seeds = replication_seeds(seed, replications)

    population = targets = None
    if not config.regenerate_population:
        population = generate_population(config, population_seed)
        targets = population_targets(population)
    logger.info(
        "Scenario %s: %d replications, N=%d, seed %d",
        config.name, replications, config.population_size, seed,
    )

    arguments = [
        (index, replication_seed, config, population, targets, tuple(estimators), settings)
        for index, replication_seed in enumerate(seeds)
    ]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as executor:
            batches = list(executor.map(_replicate, *zip(*arguments)))
    else:
        batches = []
        for args in arguments:
            batches.append(_replicate(*args))
            if (args[0] + 1) % max(1, replications // 10) == 0:
                logger.info(
                    "Scenario %s: %d/%d replications", config.name, args[0] + 1, replications
                )

    records = [record for batch in batches for record in batch]
    metrics = []
    for name in estimators:
        rows = [r for r in records if r.estimator == name]
        results = [r if r.converged else None for r in rows]
        metrics.append(summarize(results, [r.truth for r in rows], name))

    truth = float(np.mean([r.truth for r in records])) if records else math.nan
    return SimulationResult(config=config, seed=seed, records=records, metrics=metrics, truth=truth)

"""Weighted prevalence, its linearized variance, and missing-data weight adjustment."""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import statsmodels.api as sm
from pydantic import BaseModel, Field
from scipy.stats import norm
from statsmodels.tools.sm_exceptions import PerfectSeparationError, PerfectSeparationWarning

from models import DesignMatrix, NumericError, ShapeError
from utils.nps import FitError

logger = logging.getLogger(__name__)

COMPLETENESS_FLOOR = 1e-6


class MissingnessFitError(FitError):
    """The completeness model is separated or singular."""
    pass


class PrevalenceEstimate(BaseModel):
    estimate: float
    variance: float = Field(ge=0)
    ci_low: float
    ci_high: float
    level: float = 0.95
    n_effective: float
    weight_total: float

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.variance)

    def clipped_interval(self) -> tuple[float, float]:
        """Interval clipped to [0, 1] for display."""
        return max(self.ci_low, 0.0), min(self.ci_high, 1.0)


@dataclass(frozen=True, eq=False)
class DoubleWeightingResult:
    weights: np.ndarray
    probabilities: np.ndarray
    floored: int = 0
    coefficients: dict[str, float] = field(default_factory=dict)


def _validate(weights, y) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(weights, dtype=float)
    y = np.asarray(y, dtype=float)
    if w.ndim != 1 or w.shape != y.shape:
        raise ShapeError(f"{w.shape} weights for {y.shape} outcomes")
    if w.size == 0:
        raise ShapeError("Cannot estimate a prevalence from zero rows")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise NumericError("Weights must be strictly positive and finite")
    if not np.all(np.isfinite(y)):
        raise NumericError("Outcomes must be finite")
    return w, y


def weighted_prevalence(weights, y) -> float:
    """Ratio estimator sum(w * y) / sum(w)."""
    w, y = _validate(weights, y)
    return math.fsum(w * y) / math.fsum(w)


def prevalence_variance(weights, y) -> float:
    """Taylor-linearized variance of the ratio estimator under independent inclusions."""
    w, y = _validate(weights, y)
    total = math.fsum(w)
    mean = math.fsum(w * y) / total
    return math.fsum((w * (y - mean)) ** 2) / total**2


def confidence_interval(
    estimate: float, variance: float, level: float = 0.95
) -> tuple[float, float]:
    if not 0 < level < 1:
        raise ValueError(f"Confidence level must be in (0, 1), got {level}")
    if variance < 0 or not math.isfinite(variance):
        raise ValueError(f"Variance must be finite and >= 0, got {variance}")
    half_width = norm.ppf((1 + level) / 2) * math.sqrt(variance)
    return estimate - half_width, estimate + half_width


def estimate_prevalence(weights, y, level: float = 0.95) -> PrevalenceEstimate:
    """Point estimate, variance, Wald interval and effective sample size."""
    w, y = _validate(weights, y)
    estimate = weighted_prevalence(w, y)
    variance = prevalence_variance(w, y)
    low, high = confidence_interval(estimate, variance, level)
    total = math.fsum(w)
    return PrevalenceEstimate(
        estimate=estimate,
        variance=variance,
        ci_low=low,
        ci_high=high,
        level=level,
        n_effective=total**2 / math.fsum(w * w),
        weight_total=total,
    )


def double_weighting(
    weights,
    complete,
    X_missing: Union[DesignMatrix, np.ndarray],
    population_size: float,
    floor: float = COMPLETENESS_FLOOR,
    column_labels: Optional[list[str]] = None,
) -> DoubleWeightingResult:
    """Divide complete-row weights by their modelled completeness probability.

    Completeness is regressed on X_missing (intercept included) by ordinary logistic
    regression. Incomplete rows get weight 0 and the result sums to population_size.
    """
    w = np.asarray(weights, dtype=float)
    complete = np.asarray(complete, dtype=bool)
    if isinstance(X_missing, DesignMatrix):
        column_labels = column_labels or X_missing.column_labels
        X_missing = X_missing.values
    X = np.asarray(X_missing, dtype=float)
    if w.shape != complete.shape or X.shape[0] != w.shape[0]:
        raise ShapeError(
            f"{w.shape} weights, {complete.shape} flags and {X.shape[0]} design rows"
        )
    if not complete.any():
        raise MissingnessFitError("No complete rows to carry the weights")

    coefficients: dict[str, float] = {}
    if complete.all():
        probabilities = np.ones_like(w)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("error", PerfectSeparationWarning)
            try:
                result = sm.Logit(complete.astype(float), X).fit(disp=0, maxiter=100)
            except (PerfectSeparationError, PerfectSeparationWarning) as e:
                raise MissingnessFitError(f"Completeness model is separated: {e}") from None
            except np.linalg.LinAlgError as e:
                raise MissingnessFitError(f"Completeness model is singular: {e}") from None
        if not result.mle_retvals.get("converged", True):
            raise MissingnessFitError("Completeness model did not converge")
        probabilities = np.asarray(result.predict(X), dtype=float)
        labels = column_labels or [f"x{j}" for j in range(X.shape[1])]
        coefficients = dict(zip(labels, (float(b) for b in result.params)))

    floored = int(np.count_nonzero(probabilities[complete] < floor))
    if floored:
        logger.warning("%d completeness probabilities raised to the floor %g", floored, floor)
    probabilities = np.maximum(probabilities, floor)

    adjusted = np.where(complete, w / probabilities, 0.0)
    adjusted *= population_size / adjusted.sum()
    return DoubleWeightingResult(
        weights=adjusted,
        probabilities=probabilities,
        floored=floored,
        coefficients=coefficients,
    )

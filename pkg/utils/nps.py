"""Nested propensity score.

The non-probability inclusion probability is modelled as logistic in the design
columns, and its population log-likelihood is replaced by a pseudo-likelihood in which
the full-population sum is estimated from the design-weighted probability cohort:

    l*(theta) = sum_NP x'theta - sum_P d * log(1 + exp(x'theta))

This is not the weighted-logistic likelihood, so it is maximized directly by
Newton-Raphson with step-halving.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg
from scipy.special import expit

from models import DesignMatrix, NpsOptions, NumericError, RailsError, ShapeError
from utils.design import limited_pivot_rank

logger = logging.getLogger(__name__)

# log(1 + exp(t)) is evaluated as t above this cutoff.
LOG1PEXP_CUTOFF = 35.0

Matrix = Union[np.ndarray, DesignMatrix]


class FitError(RailsError):
    """A propensity or missingness model could not be fitted."""
    pass


class SingularHessianError(FitError):
    """The Hessian cannot be inverted; `columns` names the columns that cause it."""

    def __init__(self, message: str, columns: Sequence[str] = ()):
        self.columns = list(columns)
        if self.columns:
            message = f"{message} (columns: {', '.join(self.columns)})"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class NpsFit:
    """Result of a nested propensity score fit, aligned to the design columns."""
    theta: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    hessian: np.ndarray
    score_norm: float
    column_labels: list[str] = field(default_factory=list)
    ridge: float = 0.0
    stopped_by: str = ""

    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.column_labels, (float(t) for t in self.theta)))


def _values(X: Matrix) -> np.ndarray:
    return X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)


def _labels(X: Matrix) -> list[str]:
    if isinstance(X, DesignMatrix):
        return X.column_labels
    return [f"x{j}" for j in range(np.asarray(X).shape[1])]


def _check_inputs(theta, X_np: Matrix, X_p: Matrix, d_p):
    a, b = _values(X_np), _values(X_p)
    d = np.asarray(d_p, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"Design blocks {a.shape} and {b.shape} do not share columns")
    if d.shape != (b.shape[0],):
        raise ShapeError(f"{d.shape[0] if d.ndim else 0} design weights for {b.shape[0]} rows")
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise ShapeError("Design weights must be strictly positive and finite")
    if theta is not None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (a.shape[1],):
            raise ShapeError(f"theta has {theta.shape} entries for {a.shape[1]} columns")
    return theta, a, b, d


def log1pexp(t: np.ndarray) -> np.ndarray:
    """Overflow-safe log(1 + exp(t))."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    large = t > LOG1PEXP_CUTOFF
    out[large] = t[large]
    out[~large] = np.log1p(np.exp(t[~large]))
    return out


def _loglik(theta: np.ndarray, a: np.ndarray, b: np.ndarray, d: np.ndarray) -> float:
    return float(np.sum(a @ theta) - np.dot(d, log1pexp(b @ theta)))


def pseudo_log_likelihood(theta, X_np: Matrix, X_p: Matrix, d_p) -> float:
    """Pseudo log-likelihood of the non-probability inclusion model."""
    theta, a, b, d = _check_inputs(theta, X_np, X_p, d_p)
    value = _loglik(theta, a, b, d)
    if not math.isfinite(value):
        raise NumericError(f"Pseudo log-likelihood is not finite at theta={theta}")
    return value


def _derivatives(theta, a, b, d) -> tuple[np.ndarray, np.ndarray]:
    m = expit(b @ theta)
    score = a.sum(axis=0) - b.T @ (d * m)
    curvature = d * m * (1.0 - m)
    hessian = -(b.T * curvature) @ b
    return score, (hessian + hessian.T) / 2.0


def score_and_hessian(theta, X_np: Matrix, X_p: Matrix, d_p) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient and Hessian of the pseudo log-likelihood.

    The Hessian sums over the probability cohort only.
    """
    theta, a, b, d = _check_inputs(theta, X_np, X_p, d_p)
    return _derivatives(theta, a, b, d)


def _deficient_columns(b: np.ndarray, curvature: np.ndarray, labels: list[str]) -> list[str]:
    kept = set(limited_pivot_rank(b * np.sqrt(curvature)[:, None]))
    return [label for j, label in enumerate(labels) if j not in kept]


def _factorize(hessian: np.ndarray, ridge: float, b, curvature, labels):
    information = -hessian + ridge * np.eye(hessian.shape[0])
    try:
        return linalg.cho_factor(information, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        raise SingularHessianError(
            "Pseudo-likelihood Hessian is singular",
            columns=_deficient_columns(b, curvature, labels),
        ) from None


def fit_nps(X_np: Matrix, X_p: Matrix, d_p, opts: Optional[NpsOptions] = None) -> NpsFit:
    """Maximize the pseudo log-likelihood by Newton-Raphson from theta = 0.

    A step that does not increase l* is halved up to `max_step_halvings` times.
    Iteration stops when the step norm or the score norm falls below its tolerance.
    """
    opts = opts or NpsOptions()
    _, a, b, d = _check_inputs(None, X_np, X_p, d_p)
    if a.shape[1] == 0:
        raise ShapeError("Propensity design needs at least one column")
    labels = _labels(X_np)

    # At theta = 0 the curvature is d/4, so rank deficiency shows up before any step.
    curvature = d / 4.0
    if opts.ridge == 0:
        deficient = _deficient_columns(b, curvature, labels)
        if deficient:
            raise SingularHessianError("Pseudo-likelihood Hessian is singular", deficient)

    theta = np.zeros(a.shape[1])
    loglik = _loglik(theta, a, b, d)
    converged = False
    stopped_by = "max-iterations"
    iterations = 0
    for iterations in range(1, opts.max_iterations + 1):
        score, hessian = _derivatives(theta, a, b, d)
        score_norm = float(np.linalg.norm(score))
        if score_norm <= opts.score_tolerance:
            converged, stopped_by = True, "score"
            break
        m = expit(b @ theta)
        factor = _factorize(hessian, opts.ridge, b, d * m * (1.0 - m), labels)
        direction = linalg.cho_solve(factor, score)

        step = 1.0
        for _ in range(opts.max_step_halvings + 1):
            candidate = theta + step * direction
            candidate_loglik = _loglik(candidate, a, b, d)
            if math.isfinite(candidate_loglik) and candidate_loglik >= loglik:
                break
            step /= 2.0
        else:
            # No ascent left at working precision.
            converged = float(np.linalg.norm(direction)) <= opts.step_tolerance
            stopped_by = "line-search"
            break

        delta_norm = float(np.linalg.norm(candidate - theta))
        theta, loglik = candidate, candidate_loglik
        logger.debug(
            "Newton iteration %d: loglik=%.10g |score|=%.3g |step|=%.3g halvings=%d",
            iterations, loglik, score_norm, delta_norm, int(round(-math.log2(step))),
        )
        if delta_norm <= opts.step_tolerance:
            converged, stopped_by = True, "step"
            break

    score, hessian = _derivatives(theta, a, b, d)
    score_norm = float(np.linalg.norm(score))
    if stopped_by == "line-search" and score_norm <= opts.score_tolerance:
        converged = True
    if not math.isfinite(loglik):
        raise NumericError("Pseudo log-likelihood diverged")
    if not converged:
        logger.info(
            "Propensity fit stopped without converging after %d iterations (%s)",
            iterations, stopped_by,
        )
    return NpsFit(
        theta=theta,
        loglik=loglik,
        iterations=iterations,
        converged=converged,
        hessian=hessian,
        score_norm=score_norm,
        column_labels=labels,
        ridge=opts.ridge,
        stopped_by=stopped_by,
    )


def base_weights(fit: NpsFit, X_np: Matrix) -> np.ndarray:
    """Inverse estimated propensities, 1 + exp(-x'theta)."""
    a = _values(X_np)
    if a.ndim != 2 or a.shape[1] != fit.theta.shape[0]:
        raise ShapeError(
            f"Design of shape {a.shape} does not match {fit.theta.shape[0]} coefficients"
        )
    with np.errstate(over="ignore"):
        weights = 1.0 + np.exp(-(a @ fit.theta))
    if not np.all(np.isfinite(weights)):
        raise NumericError("Base weights overflow; the propensity model is degenerate")
    return weights

"""Greedy forward selection of calibration terms and the RAILS orchestrator.

Selection grows the working set one term at a time by the pseudo-likelihood increment
of the nested propensity model. The selected set then drives both the base weights
and the raking constraints; when raking fails, the most recently selected term is
popped from both and the weights are regenerated (last in, first out).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import chi2

from models import (
    Cohort,
    MarginTargets,
    NpsOptions,
    NumericError,
    RakingOptions,
    SchemaError,
    SelectionOptions,
    StoppedReason,
    Term,
    TermSet,
    schema_diff,
)
from utils.design import JointDesign, build_design_matrix, build_joint_design
from utils.nps import FitError, NpsFit, base_weights, fit_nps
from utils.raking import RakingError, RakingResult, rake

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidateScore:
    """Likelihood-ratio evidence for adding one pool term to the working set."""
    term: Term
    delta_loglik: float
    df: int
    p_value: float
    admissible: bool
    loglik: float = float("nan")
    reason: str = ""

    @property
    def ratio(self) -> float:
        """Average increase per added column."""
        return self.delta_loglik / self.df if self.df else 0.0


@dataclass(frozen=True)
class SelectionStep:
    term: Term
    delta_loglik: float
    df: int
    p_value: float
    loglik: float


@dataclass(frozen=True)
class SelectionTrace:
    steps: tuple[SelectionStep, ...]
    final_working_set: TermSet
    stopped_reason: StoppedReason
    initial_loglik: float

    @property
    def added_terms(self) -> list[Term]:
        return [step.term for step in self.steps]


@dataclass(frozen=True, eq=False)
class RakingAttempt:
    """One pass of the LIFO loop: propensity refit on `terms`, then raking."""
    terms: TermSet
    raking_terms: TermSet
    nps_fit: Optional[NpsFit] = None
    base_weights: Optional[np.ndarray] = None
    raking: Optional[RakingResult] = None
    failure: str = ""

    @property
    def converged(self) -> bool:
        return self.raking is not None and self.raking.converged


@dataclass(frozen=True, eq=False)
class RailsResult:
    weights: np.ndarray
    base_weights: np.ndarray
    nps_fit: NpsFit
    raking: Optional[RakingResult]
    selection: SelectionTrace
    removed_by_lifo: tuple[Term, ...]
    converged: bool
    attempts: tuple[RakingAttempt, ...] = field(default_factory=tuple)

    @property
    def working_set(self) -> TermSet:
        return self.attempts[-1].terms

    @property
    def raking_terms(self) -> TermSet:
        return self.attempts[-1].raking_terms


def fit_terms(
    np_cohort: Cohort,
    p_cohort: Cohort,
    terms: TermSet,
    nps_opts: Optional[NpsOptions] = None,
) -> tuple[JointDesign, NpsFit]:
    """Propensity fit over the joint design of `terms`, aliased columns removed."""
    if p_cohort.design_weight is None:
        raise SchemaError("The probability cohort has no design weights")
    joint = build_joint_design(np_cohort, p_cohort, terms)
    fit = fit_nps(joint.np_block, joint.p_block, p_cohort.design_weight, nps_opts)
    return joint, fit


def _score_candidate(
    term: Term,
    working: TermSet,
    null_columns: int,
    null_loglik: float,
    np_cohort: Cohort,
    p_cohort: Cohort,
    nps_opts: Optional[NpsOptions],
) -> CandidateScore:
    try:
        joint, fit = fit_terms(np_cohort, p_cohort, working.add(term), nps_opts)
    except (FitError, NumericError) as e:
        return CandidateScore(term, 0.0, 0, 1.0, False, reason=str(e))

    df = joint.design.n_columns - null_columns
    delta = fit.loglik - null_loglik
    if df == 0:
        return CandidateScore(term, delta, 0, 1.0, False, fit.loglik, "all columns aliased")
    if not fit.converged:
        return CandidateScore(term, delta, df, 1.0, False, fit.loglik, "fit did not converge")
    p_value = float(chi2.sf(2.0 * max(delta, 0.0), df))
    return CandidateScore(term, delta, df, p_value, True, fit.loglik)


def rank_candidates(
    working: TermSet,
    pool: TermSet,
    np_cohort: Cohort,
    p_cohort: Cohort,
    opts: Optional[SelectionOptions] = None,
    nps_opts: Optional[NpsOptions] = None,
    base: Optional[tuple[int, float]] = None,
) -> list[CandidateScore]:
    """Score every pool term against the working set, in pool order.

    `base` is the (column count, log-likelihood) of the working-set fit when the caller
    already has it. Fit failures make a candidate inadmissible; a failing base fit raises.
    """
    opts = opts or SelectionOptions()
    overlap = [t.label for t in pool if t in working]
    if overlap:
        raise SchemaError(f"Pool terms already in the working set: {overlap}")
    if not len(pool):
        return []
    if base is None:
        joint, fit = fit_terms(np_cohort, p_cohort, working, nps_opts)
        base = (joint.design.n_columns, fit.loglik)
    null_columns, null_loglik = base

    def score(term: Term) -> CandidateScore:
        return _score_candidate(
            term, working, null_columns, null_loglik, np_cohort, p_cohort, nps_opts
        )

    if opts.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=opts.n_jobs) as executor:
            scores = list(executor.map(score, pool))
    else:
        scores = [score(term) for term in pool]
    for s in scores:
        logger.debug(
            "Candidate %s: delta=%.6g df=%d p=%.4g admissible=%s %s",
            s.term.label, s.delta_loglik, s.df, s.p_value, s.admissible, s.reason,
        )
    return scores


def greedy_select(
    working: TermSet,
    pool: TermSet,
    np_cohort: Cohort,
    p_cohort: Cohort,
    opts: Optional[SelectionOptions] = None,
    nps_opts: Optional[NpsOptions] = None,
) -> SelectionTrace:
    """Add, one per step, the significant candidate with the largest increase per column.

    Ties on the ratio go to the larger increase, then to the earlier pool term.
    """
    opts = opts or SelectionOptions()
    joint, fit = fit_terms(np_cohort, p_cohort, working, nps_opts)
    columns, loglik = joint.design.n_columns, fit.loglik
    initial_loglik = loglik
    steps: list[SelectionStep] = []

    while True:
        if opts.max_added_terms is not None and len(steps) >= opts.max_added_terms:
            reason = StoppedReason.MAX_TERMS_REACHED
            break
        if not len(pool):
            reason = StoppedReason.POOL_EXHAUSTED
            break
        scores = rank_candidates(
            working, pool, np_cohort, p_cohort, opts, nps_opts, base=(columns, loglik)
        )
        significant = [
            (position, s) for position, s in enumerate(scores)
            if s.admissible and s.p_value < opts.alpha
        ]
        if not significant:
            reason = StoppedReason.NO_SIGNIFICANT_CANDIDATE
            break
        _, best = max(
            significant, key=lambda item: (item[1].ratio, item[1].delta_loglik, -item[0])
        )

        working = working.add(best.term)
        pool = pool.remove(best.term)
        columns += best.df
        loglik = best.loglik
        steps.append(SelectionStep(best.term, best.delta_loglik, best.df, best.p_value, loglik))
        logger.info(
            "Selected %s (delta=%.4g, df=%d, p=%.3g); %d candidates left",
            best.term.label, best.delta_loglik, best.df, best.p_value, len(pool),
        )

    logger.info("Selection stopped (%s) with %d added terms", reason.value, len(steps))
    return SelectionTrace(
        steps=tuple(steps),
        final_working_set=working,
        stopped_reason=reason,
        initial_loglik=initial_loglik,
    )


def _raking_attempt(
    terms: TermSet,
    np_cohort: Cohort,
    p_cohort: Cohort,
    targets: MarginTargets,
    nps_opts: Optional[NpsOptions],
    rake_opts: Optional[RakingOptions],
) -> RakingAttempt:
    raking_terms = TermSet(t for t in terms if targets.has_term(t))
    joint, fit = fit_terms(np_cohort, p_cohort, terms, nps_opts)
    base = base_weights(fit, joint.np_block)
    X = build_design_matrix(np_cohort, raking_terms, drop_aliased=False)
    try:
        result = rake(base, X, targets, rake_opts)
    except RakingError as e:
        return RakingAttempt(terms, raking_terms, fit, base, failure=str(e))
    failure = "" if result.converged else result.message
    return RakingAttempt(terms, raking_terms, fit, base, result, failure)


def _check_schemas(np_cohort: Cohort, p_cohort: Cohort, targets: MarginTargets):
    diff = schema_diff(np_cohort.schema, p_cohort.schema)
    if diff:
        raise SchemaError(f"Cohort schemas differ in {sorted(diff)}", diff=diff)
    targets.validate_schema(np_cohort.schema)


def rails_fit(
    np_cohort: Cohort,
    p_cohort: Cohort,
    targets: MarginTargets,
    main_terms: TermSet,
    candidate_pool: TermSet,
    nps_opts: Optional[NpsOptions] = None,
    rake_opts: Optional[RakingOptions] = None,
    sel_opts: Optional[SelectionOptions] = None,
) -> RailsResult:
    """Select terms, fit base weights, rake, and prune by LIFO until raking converges.

    Terms without margins enter the propensity model only. LIFO pops only terms added by
    greedy selection, never main_terms or protected terms. With lifo disabled a single
    raking attempt is made.
    """
    sel_opts = sel_opts or SelectionOptions()
    _check_schemas(np_cohort, p_cohort, targets)
    pool = candidate_pool.difference(main_terms)
    untargeted = [t.label for t in targets.terms() if t not in main_terms and t not in pool]
    if untargeted:
        logger.warning("Margins for %s are not in any candidate term and are ignored", untargeted)
    protected = sel_opts.protected(main_terms)

    trace = greedy_select(main_terms, pool, np_cohort, p_cohort, sel_opts, nps_opts)
    selected = set(trace.added_terms)
    working = trace.final_working_set
    attempts: list[RakingAttempt] = []
    removed: list[Term] = []

    while True:
        poppable = [t for t in working if t in selected and t not in protected]
        try:
            attempt = _raking_attempt(working, np_cohort, p_cohort, targets, nps_opts, rake_opts)
        except (FitError, NumericError) as e:
            if not (sel_opts.lifo and poppable):
                raise
            attempt = RakingAttempt(working, TermSet(), failure=str(e))
        attempts.append(attempt)
        if attempt.converged:
            logger.info(
                "Raking converged in %d passes on %d terms",
                attempt.raking.passes, len(attempt.raking_terms),
            )
            break
        logger.info("Raking attempt %d failed: %s", len(attempts), attempt.failure)
        if not (sel_opts.lifo and poppable):
            break
        term = poppable[-1]
        working = working.remove(term)
        removed.append(term)
        logger.info("LIFO removed %s", term.label)

    final = attempts[-1]
    weights = final.raking.weights if final.raking is not None else final.base_weights
    return RailsResult(
        weights=weights,
        base_weights=final.base_weights,
        nps_fit=final.nps_fit,
        raking=final.raking,
        selection=trace,
        removed_by_lifo=tuple(removed),
        converged=final.converged,
        attempts=tuple(attempts),
    )


def recalibrate(
    np_cohort: Cohort,
    complete: np.ndarray,
    p_cohort: Cohort,
    targets: MarginTargets,
    main_terms: TermSet,
    candidate_pool: TermSet,
    nps_opts: Optional[NpsOptions] = None,
    rake_opts: Optional[RakingOptions] = None,
    sel_opts: Optional[SelectionOptions] = None,
) -> RailsResult:
    """RAILS on the complete cases of the non-probability cohort only."""
    complete = np.asarray(complete, dtype=bool)
    if complete.shape != (np_cohort.n_rows,):
        raise SchemaError(f"Completeness mask needs {np_cohort.n_rows} entries")
    if not complete.any():
        raise SchemaError("No complete cases to recalibrate on")
    logger.info("Recalibrating on %d of %d rows", int(complete.sum()), np_cohort.n_rows)
    return rails_fit(
        np_cohort.subset(complete),
        p_cohort,
        targets,
        main_terms,
        candidate_pool,
        nps_opts,
        rake_opts,
        sel_opts,
    )

"""Classification and time-to-event evaluation.

Everything here is a pure function over plain arrays or
:class:`SurvivalRecord` lists. Tie conventions are pinned:

* ROC-AUC: Mann-Whitney with half credit for tied scores (equals the
  trapezoidal ROC area).
* C-index: Harrell's. A pair is comparable when the times differ and the
  shorter time carries an event; tied risk scores earn 0.5.
* Cox: single covariate, Breslow tie handling, Newton iterations, Wald
  confidence interval and p-value from the observed information.
* Kaplan-Meier: product-limit; censored subjects stay in the risk set at
  their own time and leave after it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .errors import (
    DegenerateCovariateError,
    DegenerateLabelsError,
    EmptyInputError,
    NoComparablePairsError,
    NoEventsError,
    NonConvergenceError,
    ShapeError,
    UnknownSubgroupError,
)


@dataclass(frozen=True)
class SurvivalRecord:
    """One patient's model risk, outcome, and subgroup keys."""

    patient_id: str
    risk: float
    time_months: float
    event: int
    label: Optional[int] = None
    subgroups: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.event not in (0, 1):
            raise ShapeError(f"event must be 0 or 1, got {self.event}")
        if self.time_months < 0:
            raise ShapeError(f"time must be >= 0, got {self.time_months}")
        if not math.isfinite(self.risk):
            raise ShapeError(f"risk must be finite, got {self.risk}")


def records_from_arrays(risks, times, events, labels=None, patient_ids=None) -> List[SurvivalRecord]:
    """Convenience constructor used by tests and the CLI."""
    risks = np.asarray(risks, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    n = len(risks)
    if not (len(times) == len(events) == n):
        raise ShapeError("risks, times, events must have equal length")
    labels = [None] * n if labels is None else list(labels)
    ids = [f"p{i:05d}" for i in range(n)] if patient_ids is None else list(patient_ids)
    return [
        SurvivalRecord(ids[i], float(risks[i]), float(times[i]), int(events[i]), labels[i])
        for i in range(n)
    ]


def _risk_time_event(records: Sequence[SurvivalRecord]):
    r = np.array([rec.risk for rec in records], dtype=float)
    t = np.array([rec.time_months for rec in records], dtype=float)
    e = np.array([rec.event for rec in records], dtype=int)
    return r, t, e


# ---------------------------------------------------------------------------
# classification metrics


def confusion_metrics(probs, labels, threshold: float = 0.5) -> Dict[str, float]:
    """Sensitivity, specificity and balanced accuracy at a fixed threshold.

    prob >= threshold predicts positive. Raises DegenerateLabelsError naming
    the undefined metric when a class is missing.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.shape != labels.shape:
        raise ShapeError("probs and labels must have equal shape")
    pred = probs >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    if tp + fn == 0:
        raise DegenerateLabelsError("sensitivity undefined: no positive labels")
    if tn + fp == 0:
        raise DegenerateLabelsError("specificity undefined: no negative labels")
    sens = tp / (tp + fn)
    spec = tn / (tn + fp)
    return {
        "sensitivity": sens,
        "specificity": spec,
        "balanced_accuracy": 0.5 * (sens + spec),
        "tp": tp,
        "tn": tn,
        "fp": fp,
        "fn": fn,
    }


def roc_auc(probs, labels) -> float:
    """Mann-Whitney AUC with half credit for tied scores."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AUC undefined: both classes must be present")
    ranks = stats.rankdata(probs, method="average")
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# concordance


def concordance_index(records: Sequence[SurvivalRecord]) -> float:
    """Harrell's C over comparable pairs.

    A pair is comparable iff the times differ and the earlier time has
    event = 1 (tied times are never comparable, in particular not when both
    die). Concordant means the earlier failure carried the higher risk; tied
    risks score 0.5.
    """
    r, t, e = _risk_time_event(records)
    n = len(r)
    # vectorized over ordered pairs (i earlier than j)
    ti, tj = t[:, None], t[None, :]
    comparable = (ti < tj) & (e[:, None] == 1)
    if not comparable.any():
        raise NoComparablePairsError("no comparable pair (need an event before another time)")
    ri, rj = r[:, None], r[None, :]
    concordant = comparable & (ri > rj)
    tied = comparable & (ri == rj)
    num = float(np.sum(concordant)) + 0.5 * float(np.sum(tied))
    return num / float(np.sum(comparable))


# ---------------------------------------------------------------------------
# Cox proportional hazards (single covariate, Breslow ties)


@dataclass
class CoxResult:
    beta: float
    hazard_ratio: float
    ci95: Tuple[float, float]
    p_value: float
    standard_error: float
    iterations: int
    converged: bool

    def render_hazard_ratio(self) -> str:
        """Format as e.g. ``2.52 (95% CI: 1.73–3.65)``."""
        return f"{self.hazard_ratio:.2f} (95% CI: {self.ci95[0]:.2f}–{self.ci95[1]:.2f})"


def _cox_score_info(beta: float, x, times, events):
    """Breslow score, information and partial log-likelihood at ``beta``."""
    order = np.argsort(times, kind="stable")
    x, times, events = x[order], times[order], events[order]
    n = len(x)
    loglik = score = info = 0.0
    # walk event times ascending; the risk set at t is {j : t_j >= t}
    i = 0
    exb = np.exp(beta * x)
    while i < n:
        j = i
        while j < n and times[j] == times[i]:
            j += 1
        d_idx = [k for k in range(i, j) if events[k] == 1]
        if d_idx:
            risk = slice(i, n)
            s0 = float(np.sum(exb[risk]))
            s1 = float(np.sum(x[risk] * exb[risk]))
            s2 = float(np.sum(x[risk] ** 2 * exb[risk]))
            d = len(d_idx)
            xsum = float(np.sum(x[d_idx]))
            loglik += beta * xsum - d * math.log(s0)
            score += xsum - d * s1 / s0
            info += d * (s2 / s0 - (s1 / s0) ** 2)
        i = j
    return loglik, score, info


def cox_fit(
    records: Sequence[SurvivalRecord],
    max_iter: int = 50,
    tol: float = 1e-8,
    check_variation: bool = True,
) -> CoxResult:
    """Newton-Raphson fit of the single-covariate Cox partial likelihood.

    Converged when |score| < ``tol``. Standard error comes from the observed
    information; the 95% CI is exp(beta +/- 1.96 se) and the p-value is the
    two-sided Wald test. ``check_variation=False`` skips the constant-
    covariate guard (a flat likelihood then reports beta = 0, HR = 1).
    """
    r, t, e = _risk_time_event(records)
    if int(e.sum()) == 0:
        raise NoEventsError("Cox fit needs at least one event")
    if check_variation and float(np.ptp(r)) == 0.0:
        raise DegenerateCovariateError("risk covariate is constant")

    beta = 0.0
    loglik, score, info = _cox_score_info(beta, r, t, e)
    iterations = 0
    converged = abs(score) < tol
    while not converged and iterations < max_iter:
        iterations += 1
        if info <= 0:
            if abs(score) < tol:
                converged = True
                break
            raise NonConvergenceError(
                f"information non-positive at beta={beta:.4g}; likelihood is flat or monotone"
            )
        step = score / info
        new_beta = beta + step
        new_loglik, new_score, new_info = _cox_score_info(new_beta, r, t, e)
        halvings = 0
        while new_loglik < loglik and halvings < 20:
            step *= 0.5
            new_beta = beta + step
            new_loglik, new_score, new_info = _cox_score_info(new_beta, r, t, e)
            halvings += 1
        beta, loglik, score, info = new_beta, new_loglik, new_score, new_info
        if abs(beta) > 50:
            raise NonConvergenceError(
                "|beta| exceeded 50 (monotone likelihood, e.g. perfect separation)"
            )
        converged = abs(score) < tol
    if not converged:
        raise NonConvergenceError(f"no convergence in {max_iter} Newton iterations (|score|={abs(score):.3g})")

    se = 1.0 / math.sqrt(info) if info > 0 else float("inf")
    if math.isfinite(se):
        lo, hi = math.exp(beta - 1.96 * se), math.exp(beta + 1.96 * se)
        z = beta / se
        p = math.erfc(abs(z) / math.sqrt(2.0))
    else:
        lo, hi, p = 0.0, float("inf"), 1.0
    return CoxResult(
        beta=beta,
        hazard_ratio=math.exp(beta),
        ci95=(lo, hi),
        p_value=p,
        standard_error=se,
        iterations=iterations,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Kaplan-Meier and log-rank


@dataclass
class KMCurve:
    """Product-limit estimate evaluated at the observed event times."""

    event_times: List[float]
    survival_probabilities: List[float]
    at_risk_counts: List[int]
    confidence_band: Optional[List[Tuple[float, float]]] = None

    def survival_at(self, time: float) -> float:
        """Step-function value S(time); 1.0 before the first event."""
        s = 1.0
        for t, p in zip(self.event_times, self.survival_probabilities):
            if t <= time:
                s = p
            else:
                break
        return s


def km_estimate(times, events, confidence_band: bool = False) -> KMCurve:
    """Kaplan-Meier estimator; S multiplies (1 - d_t/n_t) at each event time."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if times.size == 0:
        raise EmptyInputError("km_estimate needs at least one subject")
    if (times < 0).any():
        raise ShapeError("times must be >= 0")
    order = np.argsort(times, kind="stable")
    times, events = times[order], events[order]
    n = len(times)
    s = 1.0
    greenwood = 0.0
    out_t, out_s, out_n, band = [], [], [], []
    i = 0
    while i < n:
        j = i
        while j < n and times[j] == times[i]:
            j += 1
        d = int(np.sum(events[i:j]))
        at_risk = n - i
        if d > 0:
            s *= 1.0 - d / at_risk
            out_t.append(float(times[i]))
            out_s.append(s)
            out_n.append(at_risk)
            if confidence_band:
                if at_risk > d:
                    greenwood += d / (at_risk * (at_risk - d))
                    half = 1.96 * s * math.sqrt(greenwood)
                else:
                    half = 0.0  # S hit zero; variance collapses
                band.append((max(0.0, s - half), min(1.0, s + half)))
        i = j
    return KMCurve(out_t, out_s, out_n, band if confidence_band else None)


def logrank_test(
    group_a: Sequence[SurvivalRecord], group_b: Sequence[SurvivalRecord]
) -> Dict[str, float]:
    """Two-group log-rank test (chi-square with 1 df)."""
    if not group_a or not group_b:
        raise EmptyInputError("both groups must be nonempty")
    _, ta, ea = _risk_time_event(group_a)
    _, tb, eb = _risk_time_event(group_b)
    if int(ea.sum() + eb.sum()) == 0:
        raise NoEventsError("log-rank needs at least one event")
    event_times = np.unique(np.concatenate([ta[ea == 1], tb[eb == 1]]))
    observed_a = expected_a = variance = 0.0
    for t in event_times:
        n1 = int(np.sum(ta >= t))
        n2 = int(np.sum(tb >= t))
        d1 = int(np.sum((ta == t) & (ea == 1)))
        d2 = int(np.sum((tb == t) & (eb == 1)))
        n, d = n1 + n2, d1 + d2
        if n == 0 or d == 0:
            continue
        observed_a += d1
        expected_a += d * n1 / n
        if n > 1:
            variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    if variance == 0.0:
        return {"chi_square": 0.0, "p_value": 1.0}
    chi = (observed_a - expected_a) ** 2 / variance
    return {"chi_square": chi, "p_value": float(stats.chi2.sf(chi, df=1))}


# ---------------------------------------------------------------------------
# risk stratification and subgroup evaluation


def stratify_risk(
    records: Sequence[SurvivalRecord], rule: Union[str, float] = "median"
) -> Tuple[List[SurvivalRecord], List[SurvivalRecord]]:
    """Split into (high_risk, low_risk) by predicted risk.

    ``rule="median"`` sends risk > median to high (ties at the cut go low);
    a numeric rule is a fixed threshold with the same strict comparison.
    """
    if not records:
        raise EmptyInputError("stratify_risk needs at least one record")
    if rule == "median":
        cut = float(np.median([rec.risk for rec in records]))
    elif isinstance(rule, (int, float)) and not isinstance(rule, bool):
        cut = float(rule)
    else:
        raise ShapeError(f"rule must be 'median' or a number, got {rule!r}")
    high = [rec for rec in records if rec.risk > cut]
    low = [rec for rec in records if rec.risk <= cut]
    return high, low


def _metric_block(records: Sequence[SurvivalRecord], threshold: float) -> dict:
    probs = [rec.risk for rec in records]
    labels = [rec.label for rec in records]
    block: dict = {
        "n": len(records),
        "n_pos": int(sum(1 for l in labels if l == 1)),
        "n_neg": int(sum(1 for l in labels if l == 0)),
    }
    try:
        if any(l is None for l in labels):
            raise DegenerateLabelsError("records carry no binary labels")
        block["auc"] = roc_auc(probs, labels)
        block.update(confusion_metrics(probs, labels, threshold))
    except DegenerateLabelsError as exc:
        block["error"] = f"DegenerateLabelsError: {exc}"
    try:
        block["c_index"] = concordance_index(records)
    except NoComparablePairsError as exc:
        block["c_index_error"] = f"NoComparablePairsError: {exc}"
    return block


def evaluate_stratified(
    records: Sequence[SurvivalRecord], subgroup_key: str, threshold: float = 0.5
) -> Dict[str, dict]:
    """Partition by a subgroup key and compute the metric block per value."""
    if not any(subgroup_key in rec.subgroups for rec in records):
        raise UnknownSubgroupError(f"subgroup key {subgroup_key!r} absent from records")
    values = sorted({rec.subgroups.get(subgroup_key) for rec in records if subgroup_key in rec.subgroups})
    tables = {}
    for value in values:
        part = [rec for rec in records if rec.subgroups.get(subgroup_key) == value]
        tables[str(value)] = _metric_block(part, threshold)
    return tables


def subgroup_filter(
    records: Sequence[SurvivalRecord], key: str, value
) -> List[SurvivalRecord]:
    """Records whose ``subgroups[key] == value``, order preserved."""
    if not any(key in rec.subgroups for rec in records):
        raise UnknownSubgroupError(f"subgroup key {key!r} absent from records")
    return [rec for rec in records if rec.subgroups.get(key) == value]

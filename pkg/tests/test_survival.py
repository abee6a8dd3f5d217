import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphdistill import (
    concordance_index,
    confusion_metrics,
    cox_fit,
    evaluate_stratified,
    km_estimate,
    logrank_test,
    roc_auc,
    stratify_risk,
)
from morphdistill.errors import (
    DegenerateCovariateError,
    DegenerateLabelsError,
    EmptyInputError,
    NoComparablePairsError,
    NoEventsError,
    UnknownSubgroupError,
)
from morphdistill.survival import SurvivalRecord, records_from_arrays, subgroup_filter

from oracles import auc_oracle, cindex_oracle, km_oracle


def _random_records(n=200, censor=0.3, seed=0, ties=True):
    rng = np.random.default_rng(seed)
    risks = np.round(rng.random(n), 2) if ties else rng.random(n)
    times = np.round(rng.exponential(40.0, n), 1)
    events = (rng.random(n) > censor).astype(int)
    labels = rng.integers(0, 2, n)
    return records_from_arrays(risks, times, events, labels)


# --- confusion metrics -------------------------------------------------------


def test_sensitivity_arithmetic():
    probs = [0.9, 0.8, 0.7, 0.2, 0.1]
    labels = [1, 1, 1, 1, 0]
    m = confusion_metrics(probs, labels)
    assert m["tp"] == 3 and m["fn"] == 1
    assert abs(m["sensitivity"] - 0.75) < 1e-15


def test_balanced_accuracy_arithmetic():
    # sensitivity .6 and specificity .8 -> balanced accuracy .7
    probs = [0.9, 0.9, 0.9, 0.1, 0.1] + [0.1] * 8 + [0.9] * 2
    labels = [1] * 5 + [0] * 10
    m = confusion_metrics(probs, labels)
    assert abs(m["sensitivity"] - 0.6) < 1e-15
    assert abs(m["specificity"] - 0.8) < 1e-15
    assert abs(m["balanced_accuracy"] - 0.7) < 1e-15


def test_confusion_degenerate():
    with pytest.raises(DegenerateLabelsError):
        confusion_metrics([0.5, 0.6], [1, 1])


def test_threshold_boundary_is_positive():
    m = confusion_metrics([0.5, 0.49], [1, 0], threshold=0.5)
    assert m["tp"] == 1 and m["tn"] == 1


# --- AUC ---------------------------------------------------------------------


def test_auc_perfect_and_inverted():
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
    assert roc_auc([0.1, 0.9], [1, 0]) == 0.0


def test_auc_matches_pair_counting_exactly():
    recs = _random_records(200, seed=1)
    probs = [r.risk for r in recs]
    labels = [r.label for r in recs]
    assert roc_auc(probs, labels) == auc_oracle(probs, labels)


def test_auc_complement_identity():
    rng = np.random.default_rng(2)
    probs = rng.random(80)  # continuous, no cross-class ties
    labels = rng.integers(0, 2, 80)
    labels[:2] = [0, 1]
    a = roc_auc(probs, labels)
    b = roc_auc(probs, 1 - labels)
    assert abs(a + b - 1.0) < 1e-12


def test_auc_degenerate():
    with pytest.raises(DegenerateLabelsError):
        roc_auc([0.1, 0.2], [1, 1])


# --- concordance -------------------------------------------------------------


def test_cindex_perfect():
    recs = records_from_arrays([0.9, 0.5, 0.1], [1, 2, 3], [1, 1, 1])
    assert concordance_index(recs) == 1.0


def test_cindex_all_ties():
    recs = records_from_arrays([0.4, 0.4, 0.4], [1, 2, 3], [1, 1, 1])
    assert concordance_index(recs) == 0.5


def test_cindex_matches_brute_force_exactly():
    recs = _random_records(200, seed=3)
    got = concordance_index(recs)
    want = cindex_oracle([r.risk for r in recs], [r.time_months for r in recs], [r.event for r in recs])
    assert got == want


def test_cindex_rank_invariance():
    recs = _random_records(60, seed=4, ties=False)
    base = concordance_index(recs)
    squashed = records_from_arrays(
        [math.tanh(3.0 * r.risk) for r in recs],
        [r.time_months for r in recs],
        [r.event for r in recs],
    )
    assert abs(base - concordance_index(squashed)) < 1e-12


def test_cindex_no_comparable_pairs():
    with pytest.raises(NoComparablePairsError):
        concordance_index(records_from_arrays([0.1, 0.9], [5.0, 5.0], [1, 1]))
    with pytest.raises(NoComparablePairsError):
        concordance_index(records_from_arrays([0.1, 0.9], [1.0, 2.0], [0, 1]))


# --- Cox ---------------------------------------------------------------------


def _simulate_cox(n=2000, beta=0.7, censor_frac=0.2, seed=5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    times = rng.exponential(1.0 / np.exp(beta * x))
    lam_c = censor_frac / (1.0 - censor_frac)
    cens = rng.exponential(1.0 / lam_c, n) if lam_c > 0 else np.full(n, np.inf)
    observed = np.minimum(times, cens)
    events = (times <= cens).astype(int)
    return records_from_arrays(x, observed * 12.0, events)


def test_cox_recovers_true_beta():
    recs = _simulate_cox()
    fit = cox_fit(recs)
    assert fit.converged
    assert abs(fit.beta - 0.7) < 3.0 * fit.standard_error
    assert fit.ci95[0] <= fit.hazard_ratio <= fit.ci95[1]
    assert fit.p_value < 1e-6


def test_cox_constant_covariate():
    recs = records_from_arrays([0.5] * 20, np.arange(1, 21), [1] * 20)
    with pytest.raises(DegenerateCovariateError):
        cox_fit(recs)
    bypass = cox_fit(recs, check_variation=False)
    assert bypass.beta == 0.0 and bypass.hazard_ratio == 1.0
    assert bypass.ci95[0] <= 1.0 <= bypass.ci95[1]


def test_cox_symmetric_groups_beta_zero():
    # two identical outcome groups distinguished only by the covariate
    times = [3.0, 5.0, 8.0, 12.0, 3.0, 5.0, 8.0, 12.0]
    events = [1, 1, 0, 1, 1, 1, 0, 1]
    risks = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]
    fit = cox_fit(records_from_arrays(risks, times, events))
    assert abs(fit.beta) < 1e-8
    assert abs(fit.hazard_ratio - 1.0) < 1e-7


def test_cox_no_events():
    with pytest.raises(NoEventsError):
        cox_fit(records_from_arrays([0.1, 0.9], [1.0, 2.0], [0, 0]))


def test_cox_scaling_identity():
    recs = _simulate_cox(n=400, seed=6)
    base = cox_fit(recs)
    scaled = cox_fit(
        records_from_arrays(
            [2.5 * r.risk for r in recs], [r.time_months for r in recs], [r.event for r in recs]
        )
    )
    assert abs(scaled.beta - base.beta / 2.5) < 1e-6
    assert abs(scaled.p_value - base.p_value) < 1e-6


def test_hazard_ratio_rendering():
    from morphdistill.survival import CoxResult

    res = CoxResult(
        beta=math.log(2.52), hazard_ratio=2.52, ci95=(1.73, 3.65), p_value=1e-4,
        standard_error=0.19, iterations=4, converged=True,
    )
    assert res.render_hazard_ratio() == "2.52 (95% CI: 1.73–3.65)"


# --- Kaplan-Meier ------------------------------------------------------------


def test_km_hand_example():
    curve = km_estimate([1, 2, 3, 4], [1, 0, 1, 0])
    assert curve.event_times == [1.0, 3.0]
    assert abs(curve.survival_at(1) - 0.75) < 1e-12
    assert abs(curve.survival_at(3) - 0.375) < 1e-12
    assert curve.at_risk_counts == [4, 2]


def test_km_no_events_flat():
    curve = km_estimate([3, 7, 9], [0, 0, 0])
    assert curve.event_times == []
    assert curve.survival_at(100) == 1.0


def test_km_all_events_distinct():
    n = 6
    curve = km_estimate(np.arange(1, n + 1), np.ones(n, dtype=int))
    np.testing.assert_allclose(curve.survival_probabilities, [(n - k) / n for k in range(1, n + 1)], atol=1e-12)


def test_km_matches_oracle_random():
    rng = np.random.default_rng(7)
    times = np.round(rng.exponential(30, 150), 1)
    events = rng.integers(0, 2, 150)
    if events.sum() == 0:
        events[0] = 1
    curve = km_estimate(times, events)
    want = km_oracle(times.tolist(), events.tolist())
    assert len(curve.event_times) == len(want)
    for t, s in zip(curve.event_times, curve.survival_probabilities):
        assert abs(s - want[t]) < 1e-9


def test_km_order_invariance_and_late_censor():
    times = [5.0, 1.0, 9.0, 3.0]
    events = [1, 1, 0, 1]
    a = km_estimate(times, events)
    b = km_estimate(times[::-1], events[::-1])
    assert a.event_times == b.event_times
    assert a.survival_probabilities == b.survival_probabilities
    # a subject censored beyond the last event can move arbitrarily later
    # without touching any risk set, hence any curve value
    c1 = km_estimate(times + [10.0], events + [0])
    c2 = km_estimate(times + [500.0], events + [0])
    assert c1.event_times == c2.event_times
    assert c1.survival_probabilities == c2.survival_probabilities
    assert c1.at_risk_counts == c2.at_risk_counts


def test_km_empty():
    with pytest.raises(EmptyInputError):
        km_estimate([], [])


def test_km_greenwood_band():
    curve = km_estimate([1, 2, 3, 4, 5], [1, 1, 0, 1, 0], confidence_band=True)
    assert len(curve.confidence_band) == len(curve.event_times)
    for (lo, hi), s in zip(curve.confidence_band, curve.survival_probabilities):
        assert 0.0 <= lo <= s <= hi <= 1.0


# --- log-rank ----------------------------------------------------------------


def test_logrank_identical_groups():
    recs = records_from_arrays([0.5] * 6, [2, 4, 6, 8, 10, 12], [1, 1, 0, 1, 0, 1])
    out = logrank_test(recs, list(recs))
    assert out["chi_square"] < 1e-12
    assert abs(out["p_value"] - 1.0) < 0.01


def test_logrank_extreme_separation():
    a = records_from_arrays([1.0] * 12, [1.0] * 12, [1] * 12)
    b = records_from_arrays([0.0] * 12, [10.0] * 12, [0] * 12)
    out = logrank_test(a, b)
    assert out["chi_square"] > 10.0
    assert out["p_value"] < 0.001
    # direct formula at the single event time: O1=12, E1=6, V=12*(1/2)*(1/2)*(12/23)
    expected_chi = (12 - 6.0) ** 2 / (12 * 0.25 * 12 / 23)
    assert abs(out["chi_square"] - expected_chi) < 1e-9


def test_logrank_symmetry():
    a = _random_records(40, seed=8)
    b = _random_records(40, seed=9)
    ab = logrank_test(a, b)
    ba = logrank_test(b, a)
    assert abs(ab["chi_square"] - ba["chi_square"]) < 1e-12


def test_logrank_errors():
    recs = records_from_arrays([0.1], [1.0], [0])
    with pytest.raises(EmptyInputError):
        logrank_test([], recs)
    with pytest.raises(NoEventsError):
        logrank_test(recs, records_from_arrays([0.2], [2.0], [0]))


# --- stratification ----------------------------------------------------------


def test_stratify_median_two():
    high, low = stratify_risk(records_from_arrays([0.1, 0.9], [1, 2], [1, 1]))
    assert len(high) == 1 and len(low) == 1


def test_stratify_all_equal_goes_low():
    high, low = stratify_risk(records_from_arrays([0.4] * 5, np.arange(5) + 1.0, [1] * 5))
    assert len(high) == 0 and len(low) == 5


def test_stratify_tie_at_median_goes_low():
    high, low = stratify_risk(records_from_arrays([0.1, 0.5, 0.9], [1, 2, 3], [1, 1, 1]))
    assert [r.risk for r in high] == [0.9]
    assert sorted(r.risk for r in low) == [0.1, 0.5]


def test_stratify_fixed_threshold_and_empty():
    high, low = stratify_risk(records_from_arrays([0.2, 0.8], [1, 2], [1, 1]), rule=0.5)
    assert len(high) == 1 and len(low) == 1
    with pytest.raises(EmptyInputError):
        stratify_risk([])


def test_subgroup_filter_and_tables():
    recs = [
        SurvivalRecord(f"p{i}", 0.1 * i, 10.0 + i, 1, i % 2, {"sex": "F" if i < 4 else "M"})
        for i in range(8)
    ]
    fs = subgroup_filter(recs, "sex", "F")
    assert [r.patient_id for r in fs] == ["p0", "p1", "p2", "p3"]
    assert subgroup_filter(recs, "sex", "X") == []
    with pytest.raises(UnknownSubgroupError):
        subgroup_filter(recs, "missing", "F")
    tables = evaluate_stratified(recs, "sex")
    assert set(tables) == {"F", "M"}
    assert tables["F"]["n"] == 4 and tables["F"]["n_pos"] == 2
    assert "auc" in tables["F"]


def test_stratified_single_class_partition_reports_marker():
    recs = [
        SurvivalRecord("a", 0.2, 5.0, 1, 1, {"arm": "X"}),
        SurvivalRecord("b", 0.4, 7.0, 1, 1, {"arm": "X"}),
        SurvivalRecord("c", 0.6, 9.0, 1, 0, {"arm": "Y"}),
        SurvivalRecord("d", 0.8, 11.0, 1, 1, {"arm": "Y"}),
    ]
    tables = evaluate_stratified(recs, "arm")
    assert "error" in tables["X"]
    assert "auc" in tables["Y"]


def test_stratified_singleton_key_matches_whole_set():
    recs = _random_records(50, seed=10)
    recs = [
        SurvivalRecord(r.patient_id, r.risk, r.time_months, r.event, r.label, {"k": "only"})
        for r in recs
    ]
    tables = evaluate_stratified(recs, "k")
    whole_auc = roc_auc([r.risk for r in recs], [r.label for r in recs])
    assert abs(tables["only"]["auc"] - whole_auc) < 1e-15


# --- property: metric engine vs oracles on one shared fixture -----------------


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_property_auc_and_cindex_match_oracles(seed):
    recs = _random_records(60, seed=seed)
    probs = [r.risk for r in recs]
    labels = [r.label for r in recs]
    if len(set(labels)) > 1:
        assert roc_auc(probs, labels) == auc_oracle(probs, labels)
    try:
        got = concordance_index(recs)
    except NoComparablePairsError:
        return
    assert got == cindex_oracle(probs, [r.time_months for r in recs], [r.event for r in recs])

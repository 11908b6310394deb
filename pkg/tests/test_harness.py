import itertools
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spectral_watermark.errors import (BoundViolationError, ConfigurationError,
                                       InvalidInputError, UndefinedMetricError)
from spectral_watermark.harness import (ExperimentParams, Experiment, average_precision,
                                        build_world, check_distinct_keys, derive_seed,
                                        random_ap_expectation, run_multi_watermark_experiment,
                                        run_single_watermark_experiment, verify_bound)
from spectral_watermark.nnet import TrainConfig
from spectral_watermark.wmcore import WatermarkKey


# -- average precision ------------------------------------------------------------

def brute_ap(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / sum(labels)


def test_ap_perfect_and_reversed():
    assert average_precision([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0
    # 3 positives at ranks 5, 6, 7 of 7: (1/5 + 2/6 + 3/7) / 3
    scores = [7, 6, 5, 4, 3, 2, 1]
    labels = [0, 0, 0, 0, 1, 1, 1]
    assert average_precision(scores, labels) == pytest.approx(0.3206349206349206, abs=1e-15)


@pytest.mark.parametrize("k", [1, 2, 5, 9])
def test_ap_single_positive(k):
    labels = [0] * 10
    labels[k - 1] = 1
    assert average_precision(list(range(10, 0, -1)), labels) == pytest.approx(1 / k)


def test_ap_ties_keep_input_order():
    assert average_precision([1, 1], [1, 0]) == 1.0
    assert average_precision([1, 1], [0, 1]) == 0.5


def test_ap_errors():
    with pytest.raises(UndefinedMetricError):
        average_precision([1, 2], [0, 0])
    with pytest.raises(InvalidInputError):
        average_precision([1, 2], [1])


@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=1, max_size=30))
def test_ap_matches_direct_summation(items):
    scores = [s for s, _ in items]
    labels = [int(b) for _, b in items]
    if not any(labels):
        return
    assert average_precision(scores, labels) == pytest.approx(brute_ap(scores, labels))


@pytest.mark.parametrize("P,T", [(1, 1), (1, 4), (2, 5), (3, 7), (4, 8)])
def test_random_ap_matches_enumeration(P, T):
    values = []
    for pos in itertools.combinations(range(T), P):
        labels = [int(i in pos) for i in range(T)]
        values.append(brute_ap(list(range(T, 0, -1)), labels))
    assert random_ap_expectation(P, T) == pytest.approx(np.mean(values), abs=1e-12)


def test_random_ap_frozen_value():
    # exhaustive enumeration above gives 0.5925 for 2 positives among 5
    assert random_ap_expectation(2, 5) == pytest.approx(0.5925, abs=1e-12)


def test_random_baseline_simulation():
    rng = np.random.default_rng(0)
    P, T = 4, 20
    labels = np.array([1] * P + [0] * (T - P))
    aps = np.array([average_precision(rng.random(T), labels) for _ in range(1000)])
    se = aps.std() / math.sqrt(aps.size)
    assert abs(aps.mean() - random_ap_expectation(P, T)) < 3 * se


def test_random_ap_validation():
    with pytest.raises(InvalidInputError):
        random_ap_expectation(0, 5)
    with pytest.raises(InvalidInputError):
        random_ap_expectation(6, 5)


# -- seeds, keys, config ----------------------------------------------------------------

def test_derive_seed_stable_and_distinct():
    a = derive_seed(0, "teacher", 1)
    assert a == derive_seed(0, "teacher", 1)
    assert len({a, derive_seed(0, "teacher", 2), derive_seed(1, "teacher", 1),
                derive_seed(0, "student", 1)}) == 4
    assert 0 <= a < 2**63


def test_cross_key_correlation_scale():
    n = 32
    keys = [WatermarkKey.random(n, 1.0, rng=s) for s in range(400)]
    dots = [abs(a.projection @ b.projection) for a, b in zip(keys[::2], keys[1::2])]
    # E|v_i . v_j| = sqrt(2 / (pi n)) for large n, on the 1/sqrt(n) scale
    assert np.mean(dots) == pytest.approx(math.sqrt(2 / (math.pi * n)), rel=0.15)


def test_duplicate_keys_rejected():
    k = WatermarkKey.random(4, 1.0, rng=0)
    with pytest.raises(ConfigurationError, match="duplicate"):
        check_distinct_keys([k, WatermarkKey.random(4, 1.0, rng=1), k])


def test_params_roundtrip_and_unknown_field():
    p = ExperimentParams(epsilons=[0.05, 0.2], student=TrainConfig(loss="kl", max_iter=7))
    back = ExperimentParams.from_dict(json.loads(json.dumps(p.to_dict())))
    assert back == p
    with pytest.raises(ConfigurationError, match="unknown"):
        ExperimentParams.from_dict({"epsilon": 0.1})


def test_world_frequency_rule():
    w = build_world(ExperimentParams(per_class=40, watermarked=3))
    assert "6 /" in w.frequency_rule and len(w.keys) == 3
    span = np.median([np.subtract(*np.quantile(w.teacher_data.features @ k.projection,
                                               [0.975, 0.025])) for k in w.keys])
    # at least six periods across the central 95% of projections (approximate span)
    assert w.frequency * span / (2 * math.pi) > 5
    fixed = build_world(ExperimentParams(per_class=40, frequency=12.5))
    assert fixed.frequency == 12.5 and "fixed" in fixed.frequency_rule


# -- bound checker -------------------------------------------------------------------------

def test_bound_report_single_teacher(desk):
    x = desk.queries.features
    rep = verify_bound(desk.teacher, [], desk.student, x, desk.key.frequency, check=None)
    assert rep.n_teachers == 1
    assert rep.tau2 == pytest.approx(rep.chif_hat)
    assert rep.tau1 == pytest.approx(rep.chif_hat)
    assert rep.lower == pytest.approx(0.5 * (rep.chi0_D - rep.tau2 - rep.l_se))
    assert rep.holds_corrected


def test_bound_signal_frequency_vs_off_frequency(desk):
    x = desk.queries.features
    ref = desk.queries.labels == 0
    from spectral_watermark.harness import DESK_FILTER
    on = verify_bound(desk.teacher, [], desk.student, x, desk.key.frequency,
                      policy=DESK_FILTER, reference=ref, check=None)
    off = verify_bound(desk.teacher, [], desk.student, x, 0.5 * desk.key.frequency,
                       policy=DESK_FILTER, reference=ref, check=None)
    # single teacher at the watermark frequency: P_D sits inside the interval
    assert on.lower <= on.p_d <= on.upper
    assert on.holds_corrected and off.holds_corrected
    # away from it there is almost no power
    assert off.p_d < 0.05 * on.p_d


def test_corrected_bounds_hold_with_ensembles(desk):
    x = desk.queries.features
    for f in (desk.key.frequency, desk.key.frequency / 2, desk.key.frequency * 2):
        rep = verify_bound(desk.teacher, [desk.plain], desk.student, x, f, check="corrected")
        assert rep.holds_corrected and rep.n_teachers == 2


def test_stated_check_raises_on_violation(desk):
    # a student that does not track the ensemble makes L_se large; the stated
    # check must then raise when the interval excludes P_D
    x = desk.queries.features
    reps = [verify_bound(desk.teacher, [desk.plain], s, x, f, check=None)
            for s in (desk.student, desk.plain_student)
            for f in (desk.key.frequency, desk.key.frequency / 2)]
    for rep, (s, f) in zip(reps, itertools.product((desk.student, desk.plain_student),
                                                    (desk.key.frequency, desk.key.frequency / 2))):
        if rep.holds:
            verify_bound(desk.teacher, [desk.plain], s, x, f, check="stated")
        else:
            with pytest.raises(BoundViolationError):
                verify_bound(desk.teacher, [desk.plain], s, x, f, check="stated")


def test_bound_preconditions(desk):
    with pytest.raises(InvalidInputError):
        verify_bound(desk.plain, [], desk.student, desk.queries.features, 1.0)
    with pytest.raises(InvalidInputError):
        verify_bound(desk.teacher, [], desk.student, desk.queries.features[:2], 1.0)


# -- small end-to-end experiments ----------------------------------------------------------

TINY = dict(per_class=40, watermarked=2, unwatermarked=2, students_per=1, independents=1,
            queries=150, student={"hidden_size": 32, "max_iter": 60},
            teacher={"epochs": 20})


def test_single_experiment_outputs_and_determinism(tmp_path):
    params = ExperimentParams.from_dict({**TINY, "ensemble_sizes": [1, 2]})
    rep_a = run_single_watermark_experiment(params, tmp_path / "a")
    rep_b = run_single_watermark_experiment(params, tmp_path / "b")
    assert rep_a == rep_b
    run = tmp_path / "a" / "N1_eps0.1"
    for name in ("config.json", "summary.json", "ranking_key0.csv", "ranking_key1.csv"):
        assert (run / name).exists()
    assert (run / "ranking_key0.csv").read_bytes() == \
        (tmp_path / "b" / "N1_eps0.1" / "ranking_key0.csv").read_bytes()
    header = (run / "ranking_key0.csv").read_text().splitlines()[0]
    assert header == "student_id,is_positive,p_snr"
    assert len(list((run / "periodograms").glob("*.csv"))) == 2 * 3
    s = json.loads((run / "summary.json").read_text())
    assert 0 <= s["mAP"] <= 1 and s["positives"] == [1, 1] and s["students"] == 3
    assert "f_w =" in s["frequency_rule"]
    gate = s["accuracy_gate"]
    assert gate["alpha"] == 0.01 and len(gate["watermarked"]) == 2


def test_multi_experiment_round_robin(tmp_path):
    params = ExperimentParams.from_dict({**TINY, "ensemble_sizes": [2]})
    rep = run_multi_watermark_experiment(params)
    s = rep["results"][0]
    # two sets, each containing both keys: every student is positive for both
    assert s["positives"] == [2, 2] and s["kind"] == "multi"


def test_multi_rejects_reused_key():
    params = ExperimentParams.from_dict({**TINY, "ensemble_sizes": [2]})
    k = WatermarkKey.random(32, 40.0, 0, 3)
    with pytest.raises(ConfigurationError, match="duplicate"):
        run_multi_watermark_experiment(params, experiment=Experiment(params, keys=[k, k]))


def test_repeats_report_run_spread():
    params = ExperimentParams.from_dict({**TINY, "repeats": 2, "watermarked": 1,
                                         "independents": 1})
    s = run_single_watermark_experiment(params)["results"][0]
    assert len(s["mAP_runs"]) == 2 and s["mAP_std_runs"] >= 0


def test_ensemble_larger_than_pool_is_rejected():
    params = ExperimentParams.from_dict({**TINY, "ensemble_sizes": [4]})
    with pytest.raises(ConfigurationError, match="unwatermarked"):
        run_single_watermark_experiment(params)
    with pytest.raises(ConfigurationError, match="exceeds"):
        Experiment(params).multi(3, 0.1)


def test_jobs_do_not_change_results():
    params = ExperimentParams.from_dict({**TINY, "watermarked": 1, "independents": 0,
                                         "students_per": 2})
    a = Experiment(params).single(1, 0.1)["summary"]
    b = Experiment(replace(params, jobs=2)).single(1, 0.1)["summary"]
    assert a == b

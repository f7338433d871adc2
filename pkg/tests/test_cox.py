import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from surlonformer import autodiff as ad
from surlonformer.cox import (BaselineHazardTable, DataInsufficiencyError, SurvivalRecord,
                              TrainConfig, UndefinedLikelihoodError, _Cohort, _epoch_gradient,
                              breslow_baseline, cox_gradient, dynamic_survival,
                              elastic_net_penalty, landmark_cohort, neg_log_partial_likelihood,
                              partial_likelihood_tensor, penalty_gradient, predict_risks,
                              survival_probability, train)
from surlonformer.model import ImageSequence, InputError, ModelConfig, cohort_risks, init_parameters
from conftest import central_difference

TINY = ModelConfig(P=16, d=4, heads=2, n_vision=1, n_seq=1, d_ff=4, d_s=3, dropout=0.0)


def brute_nll(risks, times, events):
    """Literal double loop over events and risk-set members."""
    total, n = 0.0, 0
    for i in range(len(times)):
        if not events[i]:
            continue
        s = sum(math.exp(risks[k]) for k in range(len(times)) if times[k] >= times[i])
        total += math.log(s) - risks[i]
        n += 1
    return total / n


def toy_cohort(n=12, seed=0, side=16):
    rng = np.random.default_rng(seed)
    seqs, recs = [], []
    for i in range(n):
        t = float(rng.uniform(0.15, 1.0))
        nv = 3
        seqs.append(ImageSequence(str(i), [0.0, 0.05, 0.1],
                                  [rng.uniform(-0.5, 0.5, (side, side)) for _ in range(nv)]))
        recs.append(SurvivalRecord(str(i), t, int(rng.uniform() < 0.7)))
    recs[0] = SurvivalRecord("0", recs[0].time, 1)
    return seqs, recs


# records ---------------------------------------------------------------------

def test_record_validation():
    with pytest.raises(InputError):
        SurvivalRecord("a", 0.0, 1)
    with pytest.raises(InputError):
        SurvivalRecord("a", 1.5, 1)
    with pytest.raises(InputError):
        SurvivalRecord("a", 0.5, 2)


# partial likelihood ------------------------------------------------------------

def test_two_patient_closed_form():
    # event at 0.2 with both at risk: log(e^1 + e^0) - 1
    value = neg_log_partial_likelihood([1.0, 0.0], ([0.2, 0.5], [1, 0]))
    assert value == pytest.approx(math.log(math.e + 1) - 1, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9).flatmap(lambda n: st.tuples(
    hnp.arrays(np.float64, n, elements=st.floats(-5, 5)),
    hnp.arrays(np.float64, n, elements=st.sampled_from([0.1, 0.3, 0.5, 0.7, 1.0])),
    hnp.arrays(np.int64, n, elements=st.integers(0, 1)))))
def test_matches_brute_force_with_ties(data):
    risks, times, events = data
    events[0] = 1
    assert neg_log_partial_likelihood(risks, (times, events)) == pytest.approx(
        brute_nll(risks, times, events), rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, 6, elements=st.floats(-3, 3)), st.floats(-50, 50))
def test_invariant_to_common_shift(risks, c):
    times = np.array([0.1, 0.2, 0.2, 0.4, 0.8, 1.0])
    events = np.array([1, 1, 0, 1, 0, 1])
    a = neg_log_partial_likelihood(risks, (times, events))
    assert neg_log_partial_likelihood(risks + c, (times, events)) == pytest.approx(a, abs=1e-9)


def test_large_risks_do_not_overflow():
    value = neg_log_partial_likelihood([800.0, 0.0], ([0.2, 0.5], [1, 1]))
    assert value == pytest.approx(0.5 * (math.log1p(math.exp(-800.0))), abs=1e-12)


def test_no_events_is_undefined():
    with pytest.raises(UndefinedLikelihoodError):
        neg_log_partial_likelihood([0.0, 1.0], ([0.2, 0.5], [0, 0]))


def test_gradient_matches_finite_difference(rng):
    times = np.round(rng.uniform(0.05, 1, 10), 1)
    events = (rng.uniform(size=10) < 0.6).astype(int)
    events[0] = 1
    r = rng.normal(size=10)
    num = central_difference(lambda: neg_log_partial_likelihood(r, (times, events)), r)
    np.testing.assert_allclose(cox_gradient(r, times, events), num, atol=1e-8)
    leaf = ad.parameter(r.copy(), "r")
    g = ad.backward(partial_likelihood_tensor(leaf, times, events), [leaf])["r"]
    np.testing.assert_allclose(g, num, atol=1e-8)


# penalty ---------------------------------------------------------------------------

def test_elastic_net_value_and_gradient(rng):
    params = {"patch_proj": rng.normal(size=(3, 2)), "pos_emb": rng.normal(size=(4, 2)),
              "vis.0.w_a": rng.normal(size=(2, 2))}
    lam, alpha = 0.3, 0.25
    expected = lam * sum(alpha * np.abs(params[k]).sum() + (1 - alpha) * (params[k] ** 2).sum()
                         for k in ("patch_proj", "vis.0.w_a"))
    assert elastic_net_penalty(params, lam, alpha) == pytest.approx(expected, rel=1e-14)
    tensors = {k: ad.parameter(v, k) for k, v in params.items()}
    t = elastic_net_penalty(tensors, lam, alpha)
    assert t.item() == pytest.approx(expected, rel=1e-14)
    grads = penalty_gradient(params, lam, alpha)
    auto = ad.backward(t, tensors)
    for k in params:
        np.testing.assert_allclose(grads[k], auto[k], rtol=1e-12)
        num = central_difference(lambda: elastic_net_penalty(params, lam, alpha), params[k])
        np.testing.assert_allclose(grads[k], num, atol=1e-7)
    assert not grads["pos_emb"].any()


def test_penalty_rejects_bad_mixing():
    with pytest.raises(ValueError):
        elastic_net_penalty({}, 0.1, 1.5)


# Breslow and prediction -----------------------------------------------------------------

def test_breslow_hand_computed_with_ties():
    r = np.log([1.0, 2.0, 3.0, 4.0])
    times, events = np.array([0.2, 0.2, 0.5, 0.9]), np.array([1, 1, 0, 1])
    table = breslow_baseline(r, (times, events))
    np.testing.assert_allclose(table.times, [0.2, 0.9])
    np.testing.assert_array_equal(table.event_counts, [2, 1])
    np.testing.assert_allclose(table.increments, [2 / 10, 1 / 4], rtol=1e-14)
    np.testing.assert_allclose(table.cumulative, [0.2, 0.45], rtol=1e-14)
    assert table.cumulative_at(0.1) == 0.0
    assert table.cumulative_at(0.2) == pytest.approx(0.2)
    assert table.cumulative_at(0.5) == pytest.approx(0.2)
    assert table.cumulative_at(1.0) == pytest.approx(0.45)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, 7, elements=st.floats(-3, 3)), st.floats(-5, 5))
def test_breslow_shift_equivariance(r, c):
    times = np.array([0.1, 0.2, 0.3, 0.3, 0.6, 0.8, 1.0])
    events = np.array([1, 0, 1, 1, 0, 1, 1])
    base = breslow_baseline(r, (times, events))
    moved = breslow_baseline(r + c, (times, events))
    np.testing.assert_allclose(moved.cumulative, base.shifted(c).cumulative, rtol=1e-10)
    # predictions are unchanged by the shift
    for t in (0.25, 0.7):
        assert survival_probability(r[0] + c, t, moved) == pytest.approx(
            survival_probability(r[0], t, base), rel=1e-10)


def test_breslow_survives_extreme_risks():
    table = breslow_baseline([300.0, -300.0], ([0.3, 0.6], [1, 1]))
    assert np.all(np.isfinite(table.increments))
    assert table.increments[1] == pytest.approx(math.exp(300.0), rel=1e-12)


def test_survival_probability_formula():
    table = breslow_baseline([0.0, 0.0, 0.0], ([0.2, 0.4, 0.6], [1, 1, 0]))
    h = 1 / 3 + 1 / 2
    assert survival_probability(0.0, 0.5, table) == pytest.approx(math.exp(-h))
    assert survival_probability(1.0, 0.5, table) == pytest.approx(math.exp(-h * math.e))
    assert survival_probability(0.0, 0.0, table) == 1.0


def test_dynamic_survival_identities():
    table = breslow_baseline([0.0, 0.5, -0.2, 0.1], ([0.2, 0.4, 0.6, 0.9], [1, 1, 1, 0]))
    assert dynamic_survival(2.0, 0.3, 0.0, table) == 1.0
    probs = [dynamic_survival(0.4, 0.1, dt, table) for dt in np.linspace(0, 0.9, 30)]
    assert all(a >= b for a, b in zip(probs, probs[1:]))
    expected = survival_probability(0.4, 0.7, table) / survival_probability(0.4, 0.3, table)
    assert dynamic_survival(0.4, 0.3, 0.4, table) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        dynamic_survival(0.0, 0.3, -0.1, table)


def test_table_csv_round_trip(tmp_path):
    table = breslow_baseline([0.3, -0.1, 0.2], ([0.2, 0.2, 0.7], [1, 1, 1]))
    table.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "t,d_k,h0_increment,H0_cum"
    back = BaselineHazardTable.from_csv(tmp_path / "b.csv")
    for f in ("times", "event_counts", "increments", "cumulative"):
        np.testing.assert_array_equal(getattr(back, f), getattr(table, f))


# training -------------------------------------------------------------------------------

def test_landmark_cohort_filters_and_counts():
    seqs, recs = toy_cohort(6)
    recs[1] = SurvivalRecord("1", 0.05, 1)
    kept, kept_recs, counts = landmark_cohort(seqs, recs, 0.06)
    assert "1" not in [s.patient_id for s in kept]
    assert set(counts) == {2}
    assert all(r.time >= 0.06 for r in kept_recs)


@pytest.mark.parametrize("chunk", [1, 4, 50])
def test_chunked_gradient_equals_whole_graph(chunk):
    seqs, recs = toy_cohort(9)
    counts = [1 + i % 3 for i in range(9)]
    params = init_parameters(TINY, seed=4)
    times = np.array([r.time for r in recs])
    events = np.array([r.event for r in recs])
    cohort = _Cohort(seqs, counts, TINY)
    loss, grads = _epoch_gradient(params, cohort, times, events, TINY, chunk,
                                  np.random.SeedSequence(0))
    leaves = params.tensors()
    whole = partial_likelihood_tensor(cohort_risks(seqs, counts, leaves, TINY), times, events)
    ref = ad.backward(whole, leaves)
    assert loss == pytest.approx(whole.item(), rel=1e-12)
    for k in ref:
        np.testing.assert_allclose(grads[k], ref[k], rtol=1e-9, atol=1e-13)


def test_training_is_deterministic_and_learns():
    seqs, recs = toy_cohort(16)
    tc = TrainConfig(epochs=15, lr=1e-2, landmark=0.1, chunk=5, patience=100)
    a = train(seqs, recs, TINY, tc)
    b = train(seqs, recs, TINY, tc)
    assert [r["train_loss"] for r in a.trace] == [r["train_loss"] for r in b.trace]
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    losses = [r["train_loss"] for r in a.trace]
    assert losses[-1] < losses[0]
    assert 0 <= a.best_epoch < 15
    assert len(a.table.times) > 0


def test_training_needs_events():
    seqs, recs = toy_cohort(6)
    recs = [SurvivalRecord(r.patient_id, r.time, 0) for r in recs]
    with pytest.raises(DataInsufficiencyError):
        train(seqs, recs, TINY, TrainConfig(epochs=2))


def test_trace_csv(tmp_path):
    seqs, recs = toy_cohort(10)
    res = train(seqs, recs, TINY, TrainConfig(epochs=3, landmark=0.1))
    res.trace_to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,penalty"
    assert len(lines) == 4


def test_predict_risks_chunking_invariant():
    seqs, recs = toy_cohort(7)
    params = init_parameters(TINY, seed=1)
    a = predict_risks(params, seqs, [3] * 7, TINY, chunk=2)
    b = predict_risks(params, seqs, [3] * 7, TINY, chunk=7)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

"""Energy/softmax scores, quantile calibration, and the all-exits gate."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oodkit.errors import CalibrationError, FormatError, InputError
from oodkit.scoring import (
    Method,
    Origin,
    ScoreRecord,
    ThresholdSet,
    calibrate,
    energy,
    energy_id_score,
    exit_id_scores,
    gate,
    gate_margin,
    msp_score,
    quantile_threshold,
    read_scores_csv,
    read_thresholds,
    write_scores_csv,
    write_thresholds,
)

finite_logits = st.lists(st.floats(-100, 100), min_size=2, max_size=6)


# ---------------------------------------------------------------------------
# max-softmax


def test_msp_uniform_logits():
    assert msp_score([0.0, 0.0, 0.0]) == pytest.approx(1 / 3, abs=1e-12)


def test_msp_probability_passthrough():
    # logits = log(p) reproduces the probabilities, so max prob is 0.7
    assert msp_score(np.log([0.7, 0.2, 0.1])) == pytest.approx(0.7, abs=1e-12)


def test_msp_closed_form():
    assert msp_score([10.0, 0.0, 0.0]) == pytest.approx(0.9999092, abs=1e-6)


def test_msp_rejects_nonfinite():
    with pytest.raises(InputError):
        msp_score([np.inf, 0.0])


# ---------------------------------------------------------------------------
# energy


def test_energy_symmetric_closed_form():
    assert energy([0.0, 0.0, 0.0], 1.0) == pytest.approx(-math.log(3), abs=1e-9)


def test_energy_closed_form_210():
    assert energy([2.0, 1.0, 0.0], 1.0) == pytest.approx(-2.407606, abs=1e-6)


def test_energy_low_temperature_is_negative_max_logit():
    assert energy([5.0, 1.0, 0.0], 0.001) == pytest.approx(-5.0, abs=1e-9)


def test_energy_rejects_nonpositive_temperature():
    with pytest.raises(InputError):
        energy([1.0, 2.0], 0.0)
    with pytest.raises(InputError):
        energy([1.0, 2.0], -1.0)


@given(finite_logits, st.floats(-50, 50))
@settings(max_examples=200, deadline=None)
def test_energy_shift_identity(logits, c):
    base = energy(logits, 1.0)
    shifted = energy(np.asarray(logits) + c, 1.0)
    assert shifted == pytest.approx(base - c, abs=1e-9)


@given(finite_logits)
@settings(max_examples=200, deadline=None)
def test_energy_bounded_by_temperature_times_log_k(logits):
    t = 0.001
    bound = t * math.log(len(logits))
    assert abs(energy(logits, t) + max(logits)) <= bound + 1e-12


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6))
@settings(max_examples=200, deadline=None)
def test_energy_stable_lse_matches_naive_formula(logits):
    # naive formula is safe in this range; the stable path must agree
    naive = -1.0 * math.log(sum(math.exp(v) for v in logits))
    assert energy(logits, 1.0) == pytest.approx(naive, abs=1e-9)


def test_energy_id_score_is_negated_energy():
    logits = [5.0, 1.0, 0.0]
    assert energy_id_score(logits, 0.001) == pytest.approx(5.0, abs=1e-9)
    assert energy_id_score(logits, 1.0) == -energy(logits, 1.0)


def test_energy_id_score_preserves_shift_identity():
    logits = np.array([1.0, -2.0, 0.5])
    s = energy_id_score(logits, 0.5)
    assert energy_id_score(logits + 3.0, 0.5) == pytest.approx(s + 3.0, abs=1e-9)


def test_id_score_ordering_reverses_raw_energy():
    a, b = [3.0, 0.0, 0.0], [1.0, 0.0, 0.0]
    assert energy(a, 1.0) < energy(b, 1.0)
    assert energy_id_score(a, 1.0) > energy_id_score(b, 1.0)


def test_exit_id_scores_shape():
    stack = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    scores = exit_id_scores(stack, 0.001)
    np.testing.assert_allclose(scores, [1.0, 2.0, 3.0], atol=1e-3)


# ---------------------------------------------------------------------------
# calibration


def test_quantile_threshold_examples():
    assert quantile_threshold(range(1, 21), 0.95) == 2.0
    assert quantile_threshold(range(1, 11), 0.5) == 6.0
    assert quantile_threshold([7.0] * 25, 0.95) == 7.0


def test_calibrate_per_exit_and_guarantee():
    scores = [list(range(1, 21)), [5.0] * 20, list(np.linspace(-3, 3, 40))]
    ts = calibrate(scores, 0.95)
    assert ts.taus[0] == 2.0
    assert ts.taus[1] == 5.0
    for col, tau in zip(scores, ts.taus):
        passing = np.mean(np.asarray(col) >= tau)
        assert passing >= 0.95


def test_calibrate_requires_twenty_scores():
    with pytest.raises(CalibrationError):
        calibrate([list(range(19))])


def test_calibrate_rejects_bad_quantile():
    with pytest.raises(CalibrationError):
        calibrate([list(range(40))], q=1.0)


def test_calibrate_fingerprint_changes_with_scores_and_method():
    a = calibrate([list(range(20, 40))])
    b = calibrate([list(range(20, 40))])
    c = calibrate([list(range(21, 41))])
    d = calibrate([list(range(20, 40))], method=Method.SOFTMAX)
    assert a.fingerprint == b.fingerprint
    assert a.fingerprint != c.fingerprint
    assert a.fingerprint != d.fingerprint


@given(
    st.lists(st.floats(-1e6, 1e6), min_size=20, max_size=200),
    st.floats(0.05, 0.99),
)
@settings(max_examples=200, deadline=None)
def test_calibration_guarantee_property(scores, q):
    # 1e-9 slack: when q sits within an ulp of a quantile breakpoint
    # (e.g. 0.05 + 1e-17 with n = 20k), the floor index can land one
    # step high and the passing fraction equals q minus one ulp
    tau = quantile_threshold(scores, q)
    assert np.mean(np.asarray(scores) >= tau) >= q - 1e-9


# ---------------------------------------------------------------------------
# gate


def _thresholds(taus, q=0.95):
    return ThresholdSet(taus=tuple(taus), quantile=q, method=Method.ENERGY, fingerprint="t")


def test_gate_all_above_is_id():
    assert gate([3.0, 4.0, 5.0], _thresholds([1.0, 2.0, 3.0])) is Origin.ID


def test_gate_any_below_is_ood():
    for e in range(3):
        scores = [5.0, 5.0, 5.0]
        scores[e] = 0.0
        assert gate(scores, _thresholds([1.0, 1.0, 1.0])) is Origin.OOD


def test_gate_boundary_equality_is_id():
    assert gate([1.0, 2.0, 3.0], _thresholds([1.0, 2.0, 3.0])) is Origin.ID


def test_gate_margin_matches_decision():
    ts = _thresholds([1.0, 2.0, 3.0])
    assert gate_margin([1.0, 2.0, 3.0], ts) == 0.0
    assert gate_margin([2.0, 2.5, 3.1], ts) == pytest.approx(0.1)
    assert gate_margin([0.5, 9.0, 9.0], ts) == pytest.approx(-0.5)


def test_gate_missing_exit_score_is_input_error():
    with pytest.raises(InputError):
        gate([1.0, 2.0], _thresholds([1.0, 2.0, 3.0]))


@given(
    st.lists(st.floats(-100, 100), min_size=3, max_size=3),
    st.lists(st.floats(-100, 100), min_size=3, max_size=3),
    st.integers(0, 2),
    st.floats(0, 50),
)
@settings(max_examples=200, deadline=None)
def test_gate_monotonicity(scores, taus, which, bump):
    ts = _thresholds(taus)
    before = gate(scores, ts)
    raised = list(scores)
    raised[which] += bump
    after = gate(raised, ts)
    if before is Origin.ID:
        assert after is Origin.ID


# ---------------------------------------------------------------------------
# records and files


def test_score_record_exits_only_for_energy():
    ScoreRecord("s1", Method.ENERGY, 0.5, Origin.ID, (1.0, 2.0, 3.0))
    with pytest.raises(InputError):
        ScoreRecord("s2", Method.SOFTMAX, 0.5, Origin.ID, (1.0, 2.0, 3.0))


def test_score_record_requires_finite_combined():
    with pytest.raises(InputError):
        ScoreRecord("s3", Method.SOFTMAX, float("nan"), Origin.ID)


def test_scores_csv_round_trip(tmp_path):
    records = [
        ScoreRecord("a", Method.ENERGY, 0.25, Origin.ID, (1.5, -2.0, 0.125)),
        ScoreRecord("b", Method.ENERGY, -3.75, Origin.OOD, (0.1, 0.2, 0.3)),
    ]
    path = tmp_path / "scores.csv"
    write_scores_csv(path, records)
    assert read_scores_csv(path) == records
    header = path.read_text().splitlines()[0]
    assert header == "sample_id,method,exit1,exit2,exit3,combined,origin"


def test_scores_csv_empty_exit_cells_for_softmax(tmp_path):
    path = tmp_path / "scores.csv"
    write_scores_csv(path, [ScoreRecord("a", Method.SOFTMAX, 0.9, Origin.ID)])
    assert ",,," in path.read_text().splitlines()[1]
    assert read_scores_csv(path)[0].exit_scores == ()


def test_scores_csv_bad_header(tmp_path):
    (tmp_path / "bad.csv").write_text("nope\n")
    with pytest.raises(FormatError):
        read_scores_csv(tmp_path / "bad.csv")


def test_thresholds_file_round_trip(tmp_path):
    ts = ThresholdSet(
        taus=(0.5, -1.25, 3.0),
        quantile=0.95,
        method=Method.ENERGY,
        fingerprint="abc123",
        model_fingerprint="def456",
    )
    path = tmp_path / "thresholds.txt"
    write_thresholds(path, ts)
    assert read_thresholds(path) == ts

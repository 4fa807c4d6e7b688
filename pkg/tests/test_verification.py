import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from awencoder import verification as V
from awencoder.models import build_mlp
from awencoder.watermark import Watermark

D = 12
SHAPE = (2, 2, 3)


def wm_of(w, key=None):
    return Watermark(np.asarray(w, dtype=float), np.full(D, 0.5) if key is None else key, 0.1, SHAPE)


def images(n=20, seed=0):
    return np.random.default_rng(seed).uniform(0.1, 0.9, size=(n, D))


def test_zero_watermark_scores_zero():
    enc = build_mlp((D, 6, 4), seed=0)
    zero = wm_of(np.zeros(D))
    assert V.t_sim(enc, images(), zero) == 0.0
    assert V.t_cls(lambda x: np.argmax(enc.predict_array(x), axis=1), images(), zero) == 0.0


def test_t_sim_is_mean_kl():
    enc = build_mlp((D, 6, 4), seed=1)
    w = np.random.default_rng(1).uniform(-0.1, 0.1, D)
    x = images(8)

    def sm(v):
        e = np.exp(v - v.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    p, q = sm(enc.predict_array(x)), sm(enc.predict_array(np.clip(x + w, 0, 1)))
    assert V.t_sim(enc, x, wm_of(w)) == pytest.approx(np.mean(np.sum(p * np.log(p / q), axis=1)), abs=1e-12)


def test_t_cls_enumeration():
    x = np.zeros((3, D))
    x[1, 0] = 0.5
    x[2, 0] = 0.2
    w = np.zeros(D)
    w[0] = 0.1
    # predicted labels before/after: (a,a), (a,b), (c,c)
    def predict(batch):
        out = []
        for row in batch:
            v = round(row[0], 6)
            out.append({0.0: 0, 0.1: 0, 0.5: 0, 0.6: 1, 0.2: 2, 0.3: 2}[v])
        return np.array(out)

    assert V.t_cls(predict, x, wm_of(w)) == pytest.approx(1 / 3)


def test_t_cls_relabel_invariant_and_empty_split():
    enc = build_mlp((D, 6, 4), seed=2)
    w = wm_of(np.random.default_rng(3).uniform(-0.1, 0.1, D))
    f = lambda x: np.argmax(enc.predict_array(x), axis=1)  # noqa: E731
    perm = np.array([2, 0, 3, 1])
    assert V.t_cls(f, images(50), w) == V.t_cls(lambda x: perm[f(x)], images(50), w)
    with pytest.raises(ValueError):
        V.t_cls(f, np.zeros((0, D)), w)
    with pytest.raises(ValueError):
        V.t_sim(enc, np.zeros((0, D)), w)


def test_verify_examples():
    assert V.verify(0.4, 10).verdict
    assert not V.verify(10.0, 10).verdict
    assert not V.verify(101.0, 10).verdict
    with pytest.raises(ValueError):
        V.verify(1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(score=st.floats(0, 100), lower=st.floats(0, 100), thr=st.floats(0.01, 100))
def test_verify_monotone(score, lower, thr):
    if V.verify(score, thr).verdict:
        assert V.verify(min(score, lower), thr).verdict


def test_calibration_examples():
    assert V.calibrate_threshold([101.0], [0.4]) == pytest.approx(math.sqrt(40.4))
    assert V.calibrate_threshold([101.0], [0.4]) == pytest.approx(6.36, abs=5e-3)
    assert V.calibrate_threshold([1.6], [0.003]) == pytest.approx(0.069, abs=5e-4)
    with pytest.raises(V.CalibrationError, match="overlap"):
        V.calibrate_threshold([1.0], [1.0])
    with pytest.raises(V.CalibrationError):
        V.calibrate_threshold([], [0.1])


def test_report_round_trip_and_summary(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    rep = V.verify(0.4, 6.36, "white-box", encoder="abc", watermark="def", samples=10, flags=["x"])
    assert rep.timestamp == "1970-01-01T00:00:00Z"
    back = V.VerificationReport.from_json(rep.to_json())
    assert back == rep
    assert rep.summary().startswith("VERIFIED: white-box T_sim=0.4")
    with pytest.raises(ValueError):
        V.VerificationReport("grey-box", 1.0, 1.0, True)


def test_report_without_pinned_clock_has_no_timestamp(monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    assert V.verify(0.1, 1.0).timestamp is None


def test_uniqueness_suite_and_csv():
    enc = build_mlp((D, 6, 4), seed=4)
    f = lambda x: np.argmax(enc.predict_array(x), axis=1)  # noqa: E731
    correct = wm_of(np.zeros(D))
    forged = {"wrong-key": wm_of(np.random.default_rng(5).uniform(-0.1, 0.1, D))}
    rows = V.uniqueness_suite(enc, f, correct, forged, images(), images(seed=1), t_s=1e-3)
    assert [r.label for r in rows] == ["correct", "wrong-key"]
    assert rows[0].verdict
    text = V.uniqueness_csv(rows)
    assert text.splitlines()[0] == "setting,t_cls,t_sim,verdict"


def test_effectiveness_csv_columns():
    text = V.effectiveness_csv([("simclr", 0.99, 0.98, 0.7, 0.05)])
    header, row = text.splitlines()
    assert header == "setting,acc_ce,acc_we,t_cls_ce,t_cls_we,t_cls_gap"
    assert row == "simclr,0.990000,0.980000,0.700000,0.050000,0.650000"

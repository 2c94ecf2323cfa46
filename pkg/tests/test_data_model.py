import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from annotime.data_model import (
    CohortData,
    CohortParseError,
    CohortValidationError,
    EncounterChannel,
    Patient,
    export_cohort,
    ingest_cohort,
    make_patient,
    scale_times,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_minimal_cohort(tmp_path):
    enc = write(tmp_path / "enc.csv", "patient_id,channel_id,time\na,1,1\na,1,2\na,1,3\n")
    pat = write(tmp_path / "pat.csv", "patient_id,censor_time,event_time,event_indicator\na,20,5,1\n")
    c = ingest_cohort(enc, pat)
    assert (c.n, c.N, c.q) == (1, 0, 1)
    assert list(c.labeled[0].channels[0].times) == [1, 2, 3]
    assert c.labeled[0].event_time == 5 and c.labeled[0].event_indicator == 1


def test_encounter_after_censoring_rejected(tmp_path):
    enc = write(tmp_path / "enc.csv", "patient_id,channel_id,time\na,1,25\n")
    pat = write(tmp_path / "pat.csv", "patient_id,censor_time\na,20\n")
    with pytest.raises(CohortValidationError, match="a"):
        ingest_cohort(enc, pat)


def test_event_after_censoring_names_patient(tmp_path):
    enc = write(tmp_path / "enc.csv", "patient_id,channel_id,time\n")
    pat = write(tmp_path / "pat.csv", "patient_id,censor_time,event_time,event_indicator\nzed,10,12,1\n")
    with pytest.raises(CohortValidationError, match="zed"):
        ingest_cohort(enc, pat)


def test_unknown_channel_rejected(tmp_path):
    enc = write(tmp_path / "enc.csv", "patient_id,channel_id,time\na,3,1\n")
    pat = write(tmp_path / "pat.csv", "patient_id,censor_time\na,20\n")
    with pytest.raises(CohortValidationError, match="channel"):
        ingest_cohort(enc, pat, n_channels=2)
    enc = write(tmp_path / "enc.csv", "patient_id,channel_id,time\na,0,1\n")
    with pytest.raises(CohortValidationError):
        ingest_cohort(enc, pat)


def test_malformed_row_reports_line(tmp_path):
    enc = write(tmp_path / "enc.csv", "patient_id,channel_id,time\na,1,1\na,1,abc\n")
    pat = write(tmp_path / "pat.csv", "patient_id,censor_time\na,20\n")
    with pytest.raises(CohortParseError) as err:
        ingest_cohort(enc, pat)
    assert err.value.line == 3


def test_event_indicator_must_be_binary(tmp_path):
    enc = write(tmp_path / "enc.csv", "patient_id,channel_id,time\n")
    pat = write(tmp_path / "pat.csv", "patient_id,censor_time,event_time,event_indicator\na,20,5,2\n")
    with pytest.raises(CohortParseError):
        ingest_cohort(enc, pat)
    with pytest.raises(CohortValidationError):
        make_patient("a", 20, [[]], event_time=5, event_indicator=True)


def test_censored_patient_needs_x_equal_c():
    with pytest.raises(CohortValidationError):
        make_patient("a", 20, [[1.0]], event_time=5, event_indicator=0)
    p = make_patient("a", 20, [[1.0]], event_time=20, event_indicator=0)
    assert p.labeled


def test_channels_must_be_ordered():
    with pytest.raises(CohortValidationError):
        Patient("a", 10, (EncounterChannel(2, [1.0]),))


def test_times_sorted_and_negative_rejected():
    ch = EncounterChannel(1, [3.0, 1.0, 2.0, 2.0])
    assert list(ch.times) == [1, 2, 2, 3]
    with pytest.raises(CohortValidationError):
        EncounterChannel(1, [-1.0])


def test_scale_times_examples():
    p = make_patient("a", 20, [[5, 10, 20], []])
    np.testing.assert_allclose(scale_times(p, 1), [0.25, 0.5, 1.0])
    assert scale_times(p, 2).size == 0


@settings(max_examples=50, deadline=None)
@given(C=st.floats(0.1, 100), frac=st.lists(st.floats(0, 1), max_size=30))
def test_scale_times_in_unit_interval(C, frac):
    times = [f * C for f in frac]
    p = make_patient("a", C, [times])
    s = scale_times(p, 1)
    assert s.size == len(times)
    assert np.all((s >= 0) & (s <= 1))
    assert np.all(np.diff(s) >= 0)


def test_partition_and_horizon():
    lab = make_patient("a", 10, [[1.0]], event_time=4, event_indicator=1)
    unl = make_patient("b", 12, [[2.0]])
    c = CohortData((lab,), (unl,), 1)
    assert c.horizon == 12 and c.patients == (lab, unl)
    with pytest.raises(CohortValidationError):
        CohortData((unl,), (), 1)
    with pytest.raises(CohortValidationError):
        CohortData((lab,), (unl,), 1, horizon=11)
    with pytest.raises(CohortValidationError):
        CohortData((lab,), (make_patient("a", 12, [[2.0]]),), 1)


def test_zero_encounter_patients_retained(tmp_path):
    enc = write(tmp_path / "enc.csv", "patient_id,channel_id,time\na,2,1\n")
    pat = write(tmp_path / "pat.csv", "patient_id,censor_time\na,20\nb,15\n")
    c = ingest_cohort(enc, pat)
    assert c.N == 2 and c.q == 2
    assert [p.counts().tolist() for p in c.unlabeled] == [[0, 1], [0, 0]]


def test_baseline_columns_and_round_trip(tmp_path):
    enc = write(tmp_path / "enc.csv", "patient_id,channel_id,time\na,1,1.5\nb,2,0.25\na,1,0.5\n")
    pat = write(tmp_path / "pat.csv",
                "patient_id,censor_time,event_time,event_indicator,u_2,u_1\n"
                "a,10,4,1,0.5,1.5\nb,8,,,2,3\n")
    c = ingest_cohort(enc, pat)
    np.testing.assert_array_equal(c.labeled[0].baseline, [1.5, 0.5])
    e2, p2 = tmp_path / "e2.csv", tmp_path / "p2.csv"
    export_cohort(c, e2, p2)
    c2 = ingest_cohort(e2, p2)
    assert c2 == c
    e3, p3 = tmp_path / "e3.csv", tmp_path / "p3.csv"
    export_cohort(c2, e3, p3)
    assert e3.read_bytes() == e2.read_bytes() and p3.read_bytes() == p2.read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_round_trip_random_cohorts(tmp_path_factory, data):
    q = data.draw(st.integers(1, 3))
    n = data.draw(st.integers(1, 6))
    pats = []
    for i in range(n):
        C = data.draw(st.floats(0.5, 50))
        chans = [sorted(data.draw(st.lists(st.floats(0, C), max_size=5))) for _ in range(q)]
        if data.draw(st.booleans()):
            D = data.draw(st.integers(0, 1))
            X = C if D == 0 else data.draw(st.floats(1e-3, C))
            pats.append(make_patient(f"p{i}", C, chans, event_time=X, event_indicator=D))
        else:
            pats.append(make_patient(f"p{i}", C, chans))
    cohort = CohortData([p for p in pats if p.labeled], [p for p in pats if not p.labeled], q)
    d = tmp_path_factory.mktemp("rt")
    export_cohort(cohort, d / "e.csv", d / "p.csv")
    back = ingest_cohort(d / "e.csv", d / "p.csv", n_channels=q)
    assert back == cohort
    for p in back.patients:
        for j in range(1, q + 1):
            assert scale_times(p, j).size == p.channels[j - 1].count

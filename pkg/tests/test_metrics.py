import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gfmsysid import metrics, sindy
from gfmsysid.metrics import FitReport, GroundTruth, TargetRow, compare, evaluate_model, mse, r2, write_plot_csvs
from gfmsysid.simulator import read_dataset, write_dataset

TARGETS = ("d_a", "d_b", "d_c")


def report(method, fp="abc", runtime=1.0, offset=0.0):
    rows = [TargetRow(t, 0.1 * (i + 1) + offset, 0.9 - 0.1 * i - offset, i + 2) for i, t in enumerate(TARGETS)]
    return FitReport(method, rows, fp, runtime)


@pytest.fixture(scope="module")
def sindy_report(default_dataset):
    model = sindy.fit(default_dataset)
    return model, evaluate_model(model, default_dataset)


# ---------------------------------------------------------------- scores

def test_mse_examples():
    a = np.array([1.0, -2.0, 3.5])
    assert mse(a, a) == 0.0
    assert mse(a + 1.0, a) == 1.0
    assert mse([0.0, 0.0], [1.0, 3.0]) == 5.0


def test_r2_examples():
    a = np.array([1.0, 2.0, 4.0, 7.0])
    assert r2(a, a) == 1.0
    assert r2(np.full(4, a.mean()), a) == pytest.approx(0.0, abs=1e-15)
    assert r2(-a, a) < 0.0


def test_score_errors():
    with pytest.raises(ValueError, match="length mismatch"):
        mse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        mse([], [])
    with pytest.raises(ValueError, match="zero variance"):
        r2([1.0, 2.0], [3.0, 3.0])


vectors = arrays(np.float64, st.integers(2, 60), elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(vectors, st.integers(0, 10_000))
def test_scores_match_brute_force(actual, seed):
    pred = actual + np.random.default_rng(seed).normal(size=actual.size)
    n = actual.size
    mean = sum(actual.tolist()) / n
    res = [(p - a) ** 2 for p, a in zip(pred.tolist(), actual.tolist())]
    tot = [(a - mean) ** 2 for a in actual.tolist()]
    assert mse(pred, actual) == pytest.approx(sum(res) / n, rel=1e-12, abs=1e-12)
    if sum(tot) > 1e-9:
        assert r2(pred, actual) == pytest.approx(1.0 - sum(res) / sum(tot), rel=1e-12, abs=1e-12)
        assert r2(pred, actual) <= 1.0


# ---------------------------------------------------------------- reports

def test_report_invariants():
    with pytest.raises(ValueError, match="duplicate"):
        FitReport("sindy", [TargetRow("d_a", 0.0, 1.0, 1)] * 2, "x")
    with pytest.raises(ValueError):
        FitReport("sindy", [TargetRow("d_a", -1.0, 1.0, 1)], "x")
    with pytest.raises(ValueError):
        FitReport("sindy", [TargetRow("d_a", 0.0, 1.5, 1)], "x")


def test_report_round_trip_omits_runtime(tmp_path):
    r = report("dsr", runtime=12.5)
    back = FitReport.load(r.save(tmp_path / "r.json"), runtime_s=3.0)
    assert back.rows == r.rows and back.fingerprint == r.fingerprint
    assert back.runtime_s == 3.0
    assert "runtime" not in (tmp_path / "r.json").read_text()


def test_ground_truth_scores_perfectly(default_dataset, params):
    rep = evaluate_model(GroundTruth(params), default_dataset)
    assert len(rep.rows) == 9
    for row in rep.rows:
        assert row.mse < 1e-20 and row.r2 == 1.0


def test_ground_truth_needs_hidden_states(default_dataset, params, tmp_path):
    ds = read_dataset(write_dataset(default_dataset, tmp_path / "d.csv"))
    with pytest.raises(ValueError, match="unmeasured"):
        evaluate_model(GroundTruth(params), ds)


def test_sparse_report_reproduces_fit_residuals(sindy_report, default_dataset):
    model, rep = sindy_report
    pred = model.predict(default_dataset)
    assert rep.targets == list(default_dataset.target_names)
    np.testing.assert_array_equal(rep.predictions, pred)
    for j, row in enumerate(rep.rows):
        assert row.mse == mse(pred[:, j], default_dataset.dX[:, j])
        assert row.complexity == model.active_counts[j]
    assert rep.method == "sindy" and rep.fingerprint == default_dataset.fingerprint()


def test_layout_mismatch_is_rejected(sindy_report, default_dataset):
    model, _ = sindy_report
    bad = sindy.SparseModel(model.xi, model.terms, tuple(reversed(model.var_names)), model.target_names, {})
    with pytest.raises(ValueError, match="column layout"):
        evaluate_model(bad, default_dataset)


# ---------------------------------------------------------------- comparison

def test_identical_reports_have_zero_deltas():
    comp = compare([report("sindy"), report("dsr")])
    header, body = comp.table()
    for name in ("dsr_minus_sindy_mse", "dsr_minus_sindy_r2"):
        j = header.index(name)
        assert all(line[j] == 0.0 for line in body)


def test_runtime_ratio_definition():
    comp = compare([report("dsr", runtime=22.0), report("sindy", runtime=2.0)])
    assert comp.runtime_ratio == 11.0
    assert "11.00" in comp.runtime_summary()


def test_fingerprint_mismatch_refused():
    with pytest.raises(ValueError, match="different datasets"):
        compare([report("sindy", fp="a"), report("dsr", fp="b")])


def test_needs_two_reports():
    with pytest.raises(ValueError):
        compare([report("sindy")])


def test_target_mismatch_refused():
    other = FitReport("dsr", [TargetRow("d_z", 0.0, 1.0, 1)], "abc")
    with pytest.raises(ValueError, match="different targets"):
        compare([report("sindy"), other])


def test_comparison_is_order_invariant():
    s, d = report("sindy"), report("dsr", offset=0.05)
    shuffled = FitReport("dsr", list(reversed(d.rows)), d.fingerprint, d.runtime_s)
    outputs = {(compare(list(p)).to_csv(), compare(list(p)).to_text())
               for p in itertools.permutations([s, shuffled])}
    assert len(outputs) == 1
    assert compare([shuffled, s]).methods == ["sindy", "dsr"]


def test_csv_and_text_tables():
    comp = compare([report("sindy"), report("dsr", offset=0.05)])
    lines = comp.to_csv().splitlines()
    assert lines[0].split(",")[:4] == ["target", "sindy_mse", "sindy_r2", "sindy_complexity"]
    assert len(lines) == 1 + len(TARGETS)
    # full precision survives the CSV
    assert float(lines[1].split(",")[4]) == comp.reports[1].rows[0].mse
    text = comp.to_text().splitlines()
    assert set(text[1]) <= {"-", " "} and len(text) == 2 + len(TARGETS)


def test_plot_csvs(default_dataset, tmp_path):
    pred = {"dsr": default_dataset.dX * 0.5, "sindy": default_dataset.dX}
    paths = write_plot_csvs(default_dataset, pred, tmp_path)
    assert [p.stem for p in paths] == list(default_dataset.target_names)
    data = np.loadtxt(paths[0], delimiter=",", skiprows=1)
    assert paths[0].read_text().splitlines()[0] == "t,actual,sindy_pred,dsr_pred"
    np.testing.assert_array_equal(data[:, 0], default_dataset.time)
    np.testing.assert_array_equal(data[:, 2], data[:, 1])
    with pytest.raises(ValueError, match="shape"):
        write_plot_csvs(default_dataset, {"sindy": default_dataset.dX[:10]}, tmp_path)


def test_method_order_is_canonical():
    assert metrics.METHOD_ORDER == ("sindy", "dsr")

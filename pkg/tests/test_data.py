import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from g2t.data import (
    TRACE_HEADER,
    ClassificationDataset,
    CountTable,
    RegressionDataset,
    TraceRecord,
    load_libsvm,
    load_table,
    read_trace,
    synth_dataset,
    write_trace,
)
from g2t.errors import DomainError, IngestionError


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_libsvm_examples(tmp_path):
    ds = load_libsvm(_write(tmp_path, "a.svm", "1 3:2.5\n0 1:1\n"))
    assert isinstance(ds, ClassificationDataset)
    assert ds.dim == 3 and ds.n == 2
    np.testing.assert_array_equal(ds.labels, [1.0, -1.0])
    np.testing.assert_array_equal(ds.dense(), [[0.0, 0.0, 2.5], [1.0, 0.0, 0.0]])


def test_libsvm_signed_labels_and_comments(tmp_path):
    ds = load_libsvm(_write(tmp_path, "b.svm", "+1 1:1 2:-0.5 # note\n\n-1 2:3e-1\n"))
    np.testing.assert_array_equal(ds.labels, [1.0, -1.0])
    np.testing.assert_allclose(ds.dense(), [[1.0, -0.5], [0.0, 0.3]])


@pytest.mark.parametrize("text, where", [
    ("1 2:x\n", ":1:"),
    ("1 1:1\n2 1:1\n", ":2:"),
    ("1 2:1 1:1\n", ":1:"),
    ("1 0:1\n", ":1:"),
    ("1 3\n", ":1:"),
    ("1 1:nan\n", ":1:"),
    ("abc 1:1\n", ":1:"),
])
def test_libsvm_errors_name_the_line(tmp_path, text, where):
    with pytest.raises(IngestionError, match=where):
        load_libsvm(_write(tmp_path, "bad.svm", text))


def test_libsvm_empty(tmp_path):
    with pytest.raises(IngestionError):
        load_libsvm(_write(tmp_path, "empty.svm", ""))


def test_table_regression(tmp_path):
    ds = load_table(_write(tmp_path, "t.csv", "a,b,y\n1,5,0.5\n3,5,1.5\n"), "y")
    assert isinstance(ds, RegressionDataset)
    # b is constant, so it is dropped and recorded
    assert ds.features.shape == (2, 1)
    assert ds.dropped == ("b",)
    np.testing.assert_allclose(ds.features[:, 0], [-1.0, 1.0])
    np.testing.assert_array_equal(ds.targets, [0.5, 1.5])


def test_table_regression_shape(tmp_path):
    ds = load_table(_write(tmp_path, "t.csv", "a,b,y\n1,5,0.5\n3,6,1.5\n"), "y")
    assert ds.features.shape == (2, 2)


def test_table_errors(tmp_path):
    with pytest.raises(IngestionError, match="quality"):
        load_table(_write(tmp_path, "t.csv", "a,y\n1,2\n"), "quality")
    with pytest.raises(IngestionError, match="non-numeric"):
        load_table(_write(tmp_path, "u.csv", "a,y\n1,two\n"), "y")
    with pytest.raises(IngestionError):
        load_table(_write(tmp_path, "v.csv", ""), "y")
    with pytest.raises(IngestionError, match="missing column"):
        load_table(_write(tmp_path, "w.csv", "e,p,Y\n1,1,1\n"))


def test_table_counts(tmp_path):
    text = "e,p,Y,N\n1,a,3,4\n2,a,0,1\n1,b,5,9\n2,b,2,2\n"
    table = load_table(_write(tmp_path, "c.csv", text))
    assert isinstance(table, CountTable)
    np.testing.assert_array_equal(table.Y, [[3, 5], [0, 2]])
    np.testing.assert_array_equal(table.N, [[4, 9], [1, 2]])
    with pytest.raises(IngestionError, match="N must"):
        load_table(_write(tmp_path, "d.csv", "e,p,Y,N\n1,a,3,0\n"))
    with pytest.raises(IngestionError, match="missing"):
        load_table(_write(tmp_path, "f.csv", "e,p,Y,N\n1,a,3,4\n2,b,1,1\n"))


@pytest.mark.parametrize("kind", ["logreg", "regression", "counts"])
def test_synth_deterministic(kind):
    a, b = synth_dataset(kind, 50, 3), synth_dataset(kind, 50, 3)
    c = synth_dataset(kind, 50, 4)
    if kind == "logreg":
        assert (a.features != b.features).nnz == 0
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.dense(), c.dense())
    elif kind == "regression":
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.targets, b.targets)
    else:
        np.testing.assert_array_equal(a.Y, b.Y)
        np.testing.assert_array_equal(a.N, b.N)
        assert a.N.min() >= 1


def test_synth_errors():
    with pytest.raises(DomainError):
        synth_dataset("logreg", 0, 0)
    with pytest.raises(DomainError):
        synth_dataset("images", 5, 0)


def test_logreg_sign_recovery():
    ds = synth_dataset("logreg", 10 ** 4, 0)
    X = np.hstack([np.ones((ds.n, 1)), ds.dense()])
    y = ds.labels

    def nll(w):
        return -np.sum(log_expit(y * (X @ w)))

    def grad(w):
        return -X.T @ (y * expit(-y * (X @ w)))

    w = minimize(nll, np.zeros(X.shape[1]), jac=grad, method="BFGS").x
    np.testing.assert_array_equal(np.sign(w[1:]), np.sign(ds.planted["weights"]))


def _within(sample, mean, var, k=4.0):
    return abs(np.mean(sample) - mean) < k * math.sqrt(var / sample.size)


def test_logreg_synth_moments():
    n = 10 ** 5
    ds = synth_dataset("logreg", n, 11)
    X = ds.dense()
    for j in range(ds.dim):
        assert _within(X[:, j], 0.0, 1.0)
        # sample variance of N(0,1) has variance 2/n
        assert abs(X[:, j].var() - 1.0) < 4 * math.sqrt(2.0 / n)
    p = expit(ds.planted["bias"] + X @ ds.planted["weights"])
    resid = (ds.labels > 0) - p
    assert _within(resid, 0.0, float(np.mean(p * (1 - p))))


def test_regression_synth_moments():
    n = 10 ** 5
    ds = synth_dataset("regression", n, 12, dim=4, hidden=6, noise=0.5)
    pl = ds.planted
    X = ds.features * ds.column_stds + ds.column_means
    resid = ds.targets - np.maximum(X @ pl["W1"].T + pl["b1"], 0.0) @ pl["W2"]
    assert _within(resid, 0.0, 0.25)
    # var of the sample variance of N(0, s^2) is 2 s^4 / n
    assert abs(resid.var() - 0.25) < 4 * math.sqrt(2 * 0.25 ** 2 / n)


def test_counts_synth_moments():
    table = synth_dataset("counts", 10 ** 5 // 3, 13, groups=3)
    rate = table.planted["rate"]
    z = ((table.Y - rate) / np.sqrt(rate)).ravel()
    assert _within(z, 0.0, 1.0)
    assert table.N.min() >= 1


def _rec(t, step, seed=0, sel="cv:101"):
    return TraceRecord(t, step, -1.5 * step, sel, 0.25, float("nan"), seed)


def test_trace_round_trip(tmp_path):
    records = [_rec(0.0, 0), _rec(0.5, 10, sel="pool:STL"), _rec(1.25, 20)]
    path = tmp_path / "t.csv"
    write_trace(path, records)
    assert read_trace(path) == records
    assert path.read_text().splitlines()[0] == ",".join(TRACE_HEADER)


def test_trace_empty(tmp_path):
    path = tmp_path / "e.csv"
    write_trace(path, [])
    assert path.read_text() == "wall_seconds,step,elbo,selection,g2hat,that,seed\n"
    assert read_trace(path) == []


def test_trace_bad_header(tmp_path):
    path = _write(tmp_path, "h.csv", "time,step\n0,0\n")
    with pytest.raises(IngestionError):
        read_trace(path)


def test_trace_monotonic_enforced(tmp_path):
    with pytest.raises(DomainError):
        write_trace(tmp_path / "m.csv", [_rec(1.0, 0), _rec(0.5, 1)])
    # separate seeds keep separate clocks
    write_trace(tmp_path / "ok.csv", [_rec(1.0, 0, seed=0), _rec(0.5, 0, seed=1)])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(
    st.floats(0, 1e6, allow_nan=False), st.integers(0, 10 ** 9),
    st.floats(allow_nan=True, allow_infinity=True), st.sampled_from(["cv:000", "cv:1", "pool:Rep"]),
    st.floats(allow_nan=True), st.floats(allow_nan=True),
), max_size=8))
def test_trace_round_trip_property(tmp_path_factory, rows):
    rows = sorted(rows, key=lambda r: r[0])
    records = [TraceRecord(*r, seed=7) for r in rows]
    path = tmp_path_factory.mktemp("trace") / "p.csv"
    write_trace(path, records)
    assert read_trace(path) == records

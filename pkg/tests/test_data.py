"""Data module: ingestion, synthesis, windowing, normalization, missingness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchcast.data import (
    CsvConfig,
    SyntheticSpec,
    TimeSeriesWindow,
    denormalize_window,
    generate_synthetic,
    ingest_csv,
    inject_missing,
    make_windows,
    normalize_window,
)
from patchcast.errors import DataError, UsageError


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def test_ingest_basic(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,a,b\n0,1.0,2.0\n1,1.5,2.5\n2,2.0,3.0\n")
    sources = ingest_csv(p, CsvConfig(timestamp_column="t"))
    assert len(sources) == 1
    src = sources[0]
    assert src.values.shape == (3, 2)
    assert src.missing_mask.all()
    np.testing.assert_allclose(src.values[:, 0], [1.0, 1.5, 2.0])


def test_ingest_missing_cell(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,a,b\n0,1.0,2.0\n1,,2.5\n2,2.0,3.0\n")
    src = ingest_csv(p, CsvConfig(timestamp_column="t"))[0]
    assert not src.missing_mask[1, 0]
    assert src.values[1, 0] == 0.0
    assert src.missing_mask[1, 1]


def test_ingest_header_only(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,a,b\n")
    with pytest.raises(DataError, match="zero data rows"):
        ingest_csv(p)


def test_ingest_ragged_row_names_line(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match="line 3"):
        ingest_csv(p)


def test_ingest_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        ingest_csv(tmp_path / "nope.csv")


def test_ingest_zero_numeric_columns(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("a,b\nx,y\nu,v\n")
    with pytest.raises(DataError, match="zero numeric columns"):
        ingest_csv(p)


def test_ingest_non_monotone_timestamp(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,a\n0,1\n5,2\n3,3\n")
    with pytest.raises(DataError, match="line 4"):
        ingest_csv(p, CsvConfig(timestamp_column="t"))


def test_ingest_column_groups(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("a,b,c\n1,2,3\n4,5,6\n")
    sources = ingest_csv(p, CsvConfig(groups=(("a", "c"), ("b",))))
    assert len(sources) == 2
    assert sources[0].values.shape == (2, 2)
    assert sources[1].values.shape == (2, 1)


def test_ingest_custom_delimiter(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("a;b\n1;2\n3;4\n")
    src = ingest_csv(p, CsvConfig(delimiter=";"))[0]
    assert src.values.shape == (2, 2)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


def test_sine_values():
    spec = SyntheticSpec(
        "sine_trend", length=24, seed=0,
        params={"amplitude": 1.0, "period": 24.0, "slope": 0.0, "noise_std": 0.0},
    )
    x = generate_synthetic(spec)[0].values[:, 0]
    assert x[0] == 0.0
    assert abs(x[6] - 1.0) < 1e-12
    assert abs(x[12]) < 1e-9


def test_ar_autocorrelation_matches_theory():
    # Oracle: theoretical lag-1 autocorrelation of AR(1) equals the coefficient.
    spec = SyntheticSpec("ar_process", length=10000, seed=3, params={"coeffs": (0.5,), "noise_std": 1.0})
    x = generate_synthetic(spec)[0].values[:, 0]
    x = x - x.mean()
    acf1 = float(np.dot(x[1:], x[:-1]) / np.dot(x, x))
    assert abs(acf1 - 0.5) < 0.05


def test_synthetic_determinism():
    spec = SyntheticSpec("ar_process", length=500, n_series=3, seed=11, params={"coeffs": (0.7,), "noise_std": 1.0})
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)
    for sa, sb in zip(a, b):
        assert sa.values.tobytes() == sb.values.tobytes()


def test_nonstationary_ar_rejected():
    spec = SyntheticSpec("ar_process", length=100, seed=0, params={"coeffs": (1.01,), "noise_std": 1.0})
    with pytest.raises(UsageError, match="nonstationary"):
        generate_synthetic(spec)


def test_nonpositive_period_rejected():
    spec = SyntheticSpec("sine_trend", length=100, seed=0, params={"period": 0.0})
    with pytest.raises(UsageError, match="period"):
        generate_synthetic(spec)


def test_square_seasonal_alternates():
    spec = SyntheticSpec("square_seasonal", length=32, seed=0, params={"period": 8.0, "amplitude": 2.0, "noise_std": 0.0})
    x = generate_synthetic(spec)[0].values[:, 0]
    np.testing.assert_allclose(x[:8], [2, 2, 2, 2, -2, -2, -2, -2])


def test_unknown_family_rejected():
    with pytest.raises(UsageError, match="unknown family"):
        SyntheticSpec("brownian", length=10)


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


def _series(n):
    return TimeSeriesWindow(values=np.arange(n, dtype=float)[:, None], name="s")


def test_make_windows_enumerated_starts():
    windows = make_windows(_series(20), 8, 4, 4)
    assert len(windows) == 3
    starts = [int(w.values[0, 0]) for w in windows]
    assert starts == [0, 4, 8]
    w = windows[1]
    np.testing.assert_allclose(w.values[:, 0], np.arange(4, 12))
    np.testing.assert_allclose(w.target[:, 0], np.arange(12, 16))


def test_make_windows_single_fit():
    assert len(make_windows(_series(12), 8, 4, 1)) == 1


def test_make_windows_too_short_warns_empty(caplog):
    with caplog.at_level("WARNING"):
        out = make_windows(_series(11), 8, 4, 1)
    assert out == []
    assert any("too short" in r.message for r in caplog.records)


def test_windows_never_overlap_context_and_target():
    for w in make_windows(_series(40), 8, 4, 3):
        assert w.values[-1, 0] + 1 == w.target[0, 0]


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def test_normalize_hand_computed():
    w = TimeSeriesWindow(values=np.array([[2.0], [4.0], [6.0]]))
    wn = normalize_window(w)
    np.testing.assert_allclose(wn.values[:, 0], [-1.22474487, 0.0, 1.22474487], atol=1e-8)


def test_normalize_constant_column_floored():
    w = TimeSeriesWindow(values=np.array([[5.0], [5.0], [5.0]]))
    wn = normalize_window(w)
    np.testing.assert_allclose(wn.values[:, 0], [0.0, 0.0, 0.0])


def test_normalize_roundtrip():
    rng = np.random.default_rng(0)
    w = TimeSeriesWindow(
        values=rng.normal(3.0, 2.0, size=(20, 3)),
        horizon=4,
        target=rng.normal(3.0, 2.0, size=(4, 3)),
    )
    back = denormalize_window(normalize_window(w))
    np.testing.assert_allclose(back.values, w.values, rtol=1e-6)
    np.testing.assert_allclose(back.target, w.target, rtol=1e-6)


def test_normalize_uses_observed_entries_only():
    values = np.array([[1.0], [100.0], [3.0]])
    mask = np.array([[True], [False], [True]])
    wn = normalize_window(TimeSeriesWindow(values=values, missing_mask=mask))
    mean, std = wn.norm_state
    assert mean[0] == 2.0  # the 100.0 placeholder is excluded


def test_normalize_all_missing_variable_errors():
    values = np.zeros((4, 2))
    mask = np.ones((4, 2), dtype=bool)
    mask[:, 1] = False
    with pytest.raises(DataError, match="variable 1"):
        normalize_window(TimeSeriesWindow(values=values, missing_mask=mask))


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(min_value=2, max_value=30),
    cols=st.integers(min_value=1, max_value=4),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_normalize_roundtrip_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    w = TimeSeriesWindow(values=rng.normal(0, 10, size=(rows, cols)))
    back = denormalize_window(normalize_window(w))
    np.testing.assert_allclose(back.values, w.values, rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------------------
# Missing injection
# ---------------------------------------------------------------------------


def test_inject_missing_rate_zero_identity():
    w = _series(10)
    assert inject_missing(w, 0.0, seed=1) is w


def test_inject_missing_exact_count():
    w = TimeSeriesWindow(values=np.ones((96, 7)))
    out = inject_missing(w, 0.3, seed=2)
    assert int((~out.missing_mask).sum()) == 202  # round(0.3 * 672)
    assert np.all(out.values[~out.missing_mask] == 0.0)


def test_inject_missing_deterministic():
    w = TimeSeriesWindow(values=np.ones((50, 3)))
    a = inject_missing(w, 0.25, seed=9)
    b = inject_missing(w, 0.25, seed=9)
    assert np.array_equal(a.missing_mask, b.missing_mask)


def test_inject_missing_rate_validated():
    with pytest.raises(UsageError):
        inject_missing(_series(5), 1.0, seed=0)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpfedsim.data import (
    DEFAULT_PROFILES,
    FEATURES,
    ClientProfile,
    RawTrace,
    co2_map,
    fit_outlier_bounds,
    fit_scaler,
    generate_trace,
    iter_batches,
    log_transform,
    make_sequences,
    prepare_client_data,
    read_trace_csv,
    replace_outliers_iqr,
    window_count,
    write_trace_csv,
)
from dpfedsim.errors import ConfigError, DataError


def one_feature(values):
    """Trace whose every column holds ``values``."""
    v = np.asarray(values, dtype=float)
    return RawTrace(np.repeat(v[:, None], len(FEATURES), axis=1))


class TestGenerateTrace:
    def test_deterministic(self):
        a = generate_trace(3, 100, DEFAULT_PROFILES[1])
        b = generate_trace(3, 100, DEFAULT_PROFILES[1])
        np.testing.assert_array_equal(a.values, b.values)

    def test_seeds_differ(self):
        assert not np.array_equal(generate_trace(1, 50).values, generate_trace(2, 50).values)

    def test_noiseless_co2_is_exact_map(self):
        tr = generate_trace(0, 200, ClientProfile().noiseless())
        v, a = tr.column("relative_speed"), tr.column("acceleration")
        np.testing.assert_array_equal(tr.column("co2_emission"), co2_map(v * a, ClientProfile().co2_gain))

    def test_invariants(self):
        for i, prof in enumerate(DEFAULT_PROFILES):
            tr = generate_trace(i, 400, prof)
            lane = tr.column("lane_occupancy")
            assert ((0 <= lane) & (lane <= 1)).all()
            assert (tr.column("co2_emission") >= 0).all()
            assert (tr.column("noise_emission") >= 0).all()
            assert (tr.column("relative_speed") >= 0).all()

    def test_speed_integrates_acceleration(self):
        tr = generate_trace(5, 300)
        v, a = tr.column("relative_speed"), tr.column("acceleration")
        moving = v[1:] > 0
        np.testing.assert_allclose((v[1:] - v[:-1])[moving], a[1:][moving], atol=1e-9)

    def test_profiles_shift_statistics(self):
        means = [generate_trace(0, 400, p).column("relative_speed").mean() for p in DEFAULT_PROFILES]
        assert max(means) - min(means) > 5.0

    def test_too_short(self):
        with pytest.raises(ConfigError):
            generate_trace(0, 15)


class TestScaler:
    def test_median_and_iqr(self):
        s = fit_scaler(one_feature([1, 2, 3, 4, 5]))
        np.testing.assert_array_equal(s.median, 3.0)
        np.testing.assert_array_equal(s.iqr, 2.0)

    def test_constant_feature(self):
        s = fit_scaler(one_feature([7, 7, 7]))
        assert (s.median == 7).all() and (s.iqr == 0).all() and (s.divisor == 1).all()
        np.testing.assert_array_equal(s.transform(one_feature([7, 8])).values[:, 0], [0.0, 1.0])

    def test_symmetric_data(self):
        s = fit_scaler(one_feature([-3, -1, -0.5, 0.5, 1, 3]))
        np.testing.assert_array_equal(s.median, 0.0)

    def test_empty(self):
        with pytest.raises(DataError):
            fit_scaler(RawTrace(np.zeros((0, len(FEATURES)))))

    def test_scaled_fit_data_has_zero_median_unit_iqr(self):
        tr = generate_trace(9, 300)
        s = fit_scaler(tr)
        scaled = fit_scaler(s.transform(tr))
        np.testing.assert_allclose(scaled.median, 0.0, atol=1e-9)
        np.testing.assert_allclose(scaled.iqr, 1.0, atol=1e-9)


class TestOutliers:
    def test_replaces_far_value_with_median(self):
        # Q1 = 2, Q3 = 4, IQR = 2, bounds [-1, 7]
        out = replace_outliers_iqr(one_feature([1, 2, 3, 4, 100]), 1.5)
        np.testing.assert_array_equal(out.values[:, 0], [1, 2, 3, 4, 3])

    def test_no_outliers_unchanged(self):
        tr = one_feature([1, 2, 3, 4, 5])
        np.testing.assert_array_equal(replace_outliers_iqr(tr).values, tr.values)

    def test_constant_unchanged(self):
        tr = one_feature([4, 4, 4, 4])
        np.testing.assert_array_equal(replace_outliers_iqr(tr).values, tr.values)

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            replace_outliers_iqr(one_feature([1, 2]), 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_fixed_bounds_second_pass_is_noop(self, seed):
        tr = log_transform(generate_trace(seed, 400, DEFAULT_PROFILES[seed]))
        bounds = fit_outlier_bounds(tr)
        once = bounds.apply(tr)
        np.testing.assert_array_equal(once.values, replace_outliers_iqr(tr).values)
        np.testing.assert_array_equal(bounds.apply(once).values, once.values)

    def test_refitting_after_replacement_can_flag_more(self):
        # replacement narrows the quartiles, so a refit is not idempotent in general
        tr = one_feature([0, 0, 1, 1, 1, 1, 1, 2, 2, 3, 9])
        once = replace_outliers_iqr(tr)
        assert not np.array_equal(replace_outliers_iqr(once).values, once.values)


class TestLogTransform:
    def test_values(self):
        tr = one_feature([0.0, math.e - 1])
        out = log_transform(tr, ["co2_emission"])
        col = FEATURES.index("co2_emission")
        np.testing.assert_allclose(out.values[:, col], [0.0, 1.0], atol=1e-15)
        # other columns untouched
        np.testing.assert_array_equal(out.values[:, 0], tr.values[:, 0])

    def test_round_trip(self):
        tr = generate_trace(2, 100)
        out = log_transform(tr)
        for name in ("co2_emission", "relative_speed"):
            col = FEATURES.index(name)
            np.testing.assert_allclose(np.expm1(out.values[:, col]), tr.values[:, col], rtol=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(DataError):
            log_transform(one_feature([-1.0, 1.0]), ["relative_speed"])


class TestSequences:
    def test_two_windows(self):
        tr = one_feature(np.arange(17))
        seq = make_sequences(tr, 15, 1)
        assert seq.inputs.shape == (2, 15, 10) and seq.targets.shape == (2, 3)

    def test_minimal_case_target_is_step_15(self):
        tr = one_feature(np.arange(16))
        seq = make_sequences(tr, 15, 1)
        assert len(seq) == 1
        np.testing.assert_array_equal(seq.targets[0], [15, 15, 15])
        np.testing.assert_array_equal(seq.inputs[0, :, 0], np.arange(15))

    def test_consecutive_windows_overlap(self):
        seq = make_sequences(one_feature(np.arange(40)), 15, 1)
        np.testing.assert_array_equal(seq.inputs[0, 1:], seq.inputs[1, :-1])

    def test_targets_follow_selected_features(self):
        tr = generate_trace(0, 40)
        seq = make_sequences(tr, 15, 1, ["slope", "acceleration"])
        np.testing.assert_array_equal(seq.targets[3], tr.values[18, [FEATURES.index("slope"), FEATURES.index("acceleration")]])

    @settings(max_examples=150, deadline=None)
    @given(st.integers(2, 20), st.data())
    def test_window_count_formula(self, seq_len, data):
        stride = data.draw(st.integers(1, seq_len - 1))
        n = data.draw(st.integers(seq_len + 1, 120))
        seq = make_sequences(one_feature(np.arange(n)), seq_len, stride)
        assert len(seq) == window_count(n, seq_len, stride) == (n - seq_len - 1) // stride + 1
        # the last target index stays inside the trace
        assert seq.targets[-1, 0] <= n - 1

    def test_errors(self):
        with pytest.raises(DataError):
            make_sequences(one_feature(np.arange(15)), 15, 1)
        with pytest.raises(ConfigError):
            make_sequences(one_feature(np.arange(30)), 15, 15)
        with pytest.raises(ConfigError):
            make_sequences(one_feature(np.arange(30)), 1, 1)


def test_iter_batches_cover_everything_in_contiguous_chunks():
    seq = make_sequences(one_feature(np.arange(100)), 15, 1)
    batches = list(iter_batches(seq, 32, np.random.default_rng(0)))
    assert all(len(b) <= 32 for b in batches)
    firsts = np.concatenate([b.inputs[:, 0, 0] for b in batches])
    assert sorted(firsts.tolist()) == list(range(len(seq)))
    for b in batches:
        assert (np.diff(b.inputs[:, 0, 0]) == 1).all()


@pytest.mark.parametrize("profile", DEFAULT_PROFILES)
def test_pipeline_output_is_finite(profile):
    prep = prepare_client_data(generate_trace(1, 300, profile))
    for part in (prep.train, prep.eval):
        assert np.isfinite(part.inputs).all() and np.isfinite(part.targets).all()
        assert part.inputs.shape[1:] == (15, 10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pipeline_finite_for_any_seed(seed):
    prep = prepare_client_data(generate_trace(seed, 120, DEFAULT_PROFILES[seed % 5]))
    assert np.isfinite(prep.train.inputs).all() and np.isfinite(prep.eval.targets).all()


def test_csv_round_trip(tmp_path):
    tr = generate_trace(4, 60)
    path = tmp_path / "trace.csv"
    write_trace_csv(tr, path)
    assert path.read_text().splitlines()[0] == ",".join(FEATURES)
    np.testing.assert_array_equal(read_trace_csv(path).values, tr.values)


def test_csv_import_drops_extra_columns(tmp_path):
    path = tmp_path / "ext.csv"
    header = ["vehicle_id", *reversed(FEATURES), "fuel"]
    rows = [[7, *range(10), 1.0], [7, *range(10, 20), 2.0]]
    path.write_text("\n".join(",".join(map(str, r)) for r in [header, *rows]) + "\n")
    tr = read_trace_csv(path)
    assert tr.column("position_x").tolist() == [9.0, 19.0]
    assert tr.column("slope").tolist() == [0.0, 10.0]


def test_csv_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("position_x,position_y\n1,2\n")
    with pytest.raises(DataError, match="missing"):
        read_trace_csv(path)

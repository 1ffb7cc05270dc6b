"""Metrics, baselines, the forecast path, and the evaluation protocols."""

import csv

import numpy as np
import pytest

from gridcast.data import (
    DatasetBundle,
    GridSeries,
    count_windows,
    fit_normalizer,
    min_frames,
    normalize,
    prepare_dataset,
)
from gridcast.errors import GeometryError, SizingError
from gridcast.evaluation import (
    EvalReport,
    EvalRow,
    baseline_ha,
    baseline_persistence,
    evaluate_dataset,
    forecast,
    mae,
    metric_rows,
    predict,
    rmse,
    run_noise_suite,
    run_protocol,
    time_of_day_means,
)
from gridcast.model import Forecaster, ModelConfig
from gridcast.training import snapshot_checkpoint


def tiny_model_config(**overrides):
    base = dict(d_model=8, n_heads=2, enc_depth=1, dec_depth=1, mlp_ratio=2.0,
                patch=(2, 2, 2), d_feat=4, d_key=8, pool_size=8)
    base.update(overrides)
    return ModelConfig(**base)


def zero_head_checkpoint(prompts_trained=False, **overrides):
    """A model whose predictions are exactly 0 in normalized units."""
    model = Forecaster(tiny_model_config(**overrides), np.random.default_rng(0))
    head = model.backbone.head
    head.W.data[...] = 0.0
    head.b.data[...] = 0.0
    return snapshot_checkpoint(model, {}, {}, {"prompts_trained": prompts_trained})


def periodic_bundle(l_h=4, k=4, spd=4, H=4, W=4, scale=1.0):
    """A series that depends only on time of day, split the standard way."""
    T = min_frames(l_h, k)
    rng = np.random.default_rng(9)
    pattern = rng.uniform(0.0, scale, size=(spd, 1, H, W))
    values = pattern[np.arange(T) % spd]
    series = GridSeries("periodic", values, spd)
    return prepare_dataset(series, l_h, k)[0]


def random_bundle(name="rand", T=24, H=4, W=4, spd=4, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    raw = GridSeries(name, scale * rng.uniform(-1.0, 2.0, size=(T, 1, H, W)), spd)
    lo, hi = fit_normalizer(raw)
    norm = normalize(raw, lo, hi)
    return DatasetBundle(name, norm, norm, norm, raw, raw, raw,
                         float(lo[0]), float(hi[0]))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class TestMetrics:
    def test_rmse_matches_manual_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        total = sum((a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(5))
        assert rmse(a, b) == pytest.approx(np.sqrt(total / 15.0), rel=1e-12)

    def test_mae_matches_manual_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        total = sum(abs(a[i, j] - b[i, j]) for i in range(4) for j in range(2))
        assert mae(a, b) == pytest.approx(total / 8.0, rel=1e-12)

    def test_rmse_never_below_mae(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = rng.normal(size=20), rng.normal(size=20)
            assert rmse(a, b) >= mae(a, b) - 1e-15

    def test_identical_arrays_score_zero(self):
        x = np.random.default_rng(3).normal(size=(2, 3))
        assert rmse(x, x) == 0.0
        assert mae(x, x) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(SizingError):
            rmse(np.zeros(3), np.zeros(4))
        with pytest.raises(SizingError):
            mae(np.zeros((2, 2)), np.zeros(4))

    def test_metric_rows_aggregate_and_steps(self):
        rng = np.random.default_rng(4)
        pred = rng.normal(size=(6, 3, 2, 2))
        target = rng.normal(size=(6, 3, 2, 2))
        rows = metric_rows("d", "short", "model", pred, target)
        assert len(rows) == 4
        assert rows[0].step == "all"
        assert rows[0].rmse == pytest.approx(rmse(pred, target))
        assert rows[0].n_windows == 6
        for j in range(3):
            assert rows[j + 1].step == j
            assert rows[j + 1].mae == pytest.approx(mae(pred[:, j], target[:, j]))
        # the aggregate MSE is the mean of per-step MSEs
        agg = np.mean([rows[j + 1].rmse ** 2 for j in range(3)])
        assert rows[0].rmse == pytest.approx(np.sqrt(agg), rel=1e-12)


# ---------------------------------------------------------------------------
# forecast / predict
# ---------------------------------------------------------------------------

class TestForecast:
    def test_zero_head_forecasts_zeros_with_right_shape(self):
        ckpt = zero_head_checkpoint()
        model = ckpt.build_model()
        history = np.random.default_rng(5).normal(size=(3, 4, 4, 4))
        pred = forecast(model, history, k=4)
        assert pred.shape == (3, 4, 4, 4)
        np.testing.assert_array_equal(pred, 0.0)

    def test_horizon_must_align_with_temporal_patch(self):
        model = zero_head_checkpoint().build_model()
        history = np.zeros((1, 4, 4, 4))
        with pytest.raises(GeometryError):
            forecast(model, history, k=3)

    def test_forecast_is_deterministic(self):
        rng = np.random.default_rng(6)
        model = Forecaster(tiny_model_config(), np.random.default_rng(1))
        history = rng.normal(size=(2, 4, 4, 4))
        p1 = forecast(model, history, k=4)
        p2 = forecast(model, history, k=4)
        np.testing.assert_array_equal(p1, p2)

    def test_predict_denormalizes_to_bounds_midpoint(self):
        # A zero-output model predicts 0 in normalized units, which must map
        # back to the midpoint of the normalization bounds.
        ckpt = zero_head_checkpoint()
        history = np.random.default_rng(7).uniform(2.0, 6.0, size=(4, 4, 4))
        pred = predict(ckpt, history, k=4, bounds=(2.0, 6.0))
        assert pred.shape == (4, 4, 4)
        np.testing.assert_allclose(pred, 4.0)

    def test_predict_without_bounds_fits_history_minmax(self):
        ckpt = zero_head_checkpoint()
        history = np.random.default_rng(8).uniform(15.0, 25.0, size=(4, 4, 4))
        history[0, 0, 0], history[-1, -1, -1] = 10.0, 30.0
        pred = predict(ckpt, history, k=4)
        np.testing.assert_allclose(pred, 20.0)

    def test_predict_batched_keeps_leading_axis(self):
        ckpt = zero_head_checkpoint()
        history = np.random.default_rng(9).uniform(size=(5, 4, 4, 4))
        pred = predict(ckpt, history, k=2, bounds=(0.0, 1.0))
        assert pred.shape == (5, 2, 4, 4)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

class TestBaselines:
    def test_time_of_day_means_recover_pattern(self):
        spd = 3
        pattern = np.arange(spd, dtype=np.float64)[:, None, None] * np.ones((2, 2))
        values = pattern[np.arange(12) % spd][:, None]
        train = GridSeries("p", values, spd)
        means = time_of_day_means(train)
        np.testing.assert_allclose(means, pattern)

    def test_time_of_day_means_respect_start_index(self):
        spd = 4
        values = np.arange(8, dtype=np.float64)[:, None, None, None] * np.ones((1, 2, 2))
        train = GridSeries("p", values, spd, start_index=1)
        means = time_of_day_means(train)
        # frames 0..7 have tods 1,2,3,0,1,2,3,0 -> tod 0 saw frames 3 and 7
        np.testing.assert_allclose(means[0], 5.0)
        np.testing.assert_allclose(means[1], 2.0)

    def test_unseen_time_of_day_falls_back_to_global_mean(self):
        values = np.ones((2, 1, 2, 2))
        train = GridSeries("p", values, steps_per_day=10)
        means = time_of_day_means(train)
        np.testing.assert_allclose(means, 1.0)
        assert means.shape == (10, 2, 2)

    def test_ha_is_exact_on_periodic_data(self):
        bundle = periodic_bundle()
        report = evaluate_dataset(zero_head_checkpoint(), bundle, 4, 4)
        row = report.one(predictor="ha", step="all")
        assert row.rmse == pytest.approx(0.0, abs=1e-12)
        assert row.mae == pytest.approx(0.0, abs=1e-12)

    def test_persistence_is_exact_on_constant_data(self):
        values = np.full((24, 1, 4, 4), 3.5)
        series = GridSeries("const", values, 4)
        lo, hi = fit_normalizer(series)
        norm = normalize(series, lo, hi)
        bundle = DatasetBundle("const", norm, norm, norm, series, series,
                               series, float(lo[0]), float(hi[0]))
        report = evaluate_dataset(zero_head_checkpoint(), bundle, 4, 4)
        row = report.one(predictor="persistence", step="all")
        assert row.rmse == 0.0

    def test_persistence_repeats_last_frame(self):
        history = np.random.default_rng(10).normal(size=(2, 3, 2, 2))
        pred = baseline_persistence(history, k=4)
        assert pred.shape == (2, 4, 2, 2)
        for j in range(4):
            np.testing.assert_array_equal(pred[:, j], history[:, -1])

    def test_ha_indexes_future_steps(self):
        spd = 4
        means = np.arange(spd, dtype=np.float64)[:, None, None] * np.ones((2, 2))
        test = GridSeries("t", np.zeros((12, 1, 2, 2)), spd, start_index=2)
        pred = baseline_ha(means, test, t_indices=[0], l_h=2, k=4)
        # future frames are local t = 2,3,4,5 -> tods (2+2)%4.. = 0,1,2,3
        np.testing.assert_allclose(pred[0, :, 0, 0], [0.0, 1.0, 2.0, 3.0])


# ---------------------------------------------------------------------------
# protocol driver
# ---------------------------------------------------------------------------

class TestProtocols:
    def test_windows_tile_without_overlap(self):
        bundle = random_bundle(T=26)
        report = evaluate_dataset(zero_head_checkpoint(), bundle, 4, 4)
        expected = count_windows(bundle.raw_test, 4, 4, stride=8)
        assert expected == (26 - 8) // 8 + 1 == 3
        assert report.one(predictor="model", step="all").n_windows == expected

    def test_report_covers_all_predictors_and_steps(self):
        bundle = random_bundle(T=24)
        report = evaluate_dataset(zero_head_checkpoint(), bundle, 4, 4)
        assert len(report.rows) == 3 * 5
        predictors = {r.predictor for r in report.rows}
        assert predictors == {"model", "ha", "persistence"}

    def test_model_errors_scale_with_the_data(self):
        # Denormalized metrics must track the data's units: scaling the
        # series by 10 scales a zero-output model's RMSE by 10.
        ckpt = zero_head_checkpoint()
        r1 = evaluate_dataset(ckpt, random_bundle(scale=1.0), 4, 4)
        r10 = evaluate_dataset(ckpt, random_bundle(scale=10.0), 4, 4)
        a = r1.one(predictor="model", step="all")
        b = r10.one(predictor="model", step="all")
        assert b.rmse == pytest.approx(10.0 * a.rmse, rel=1e-9)
        assert b.mae == pytest.approx(10.0 * a.mae, rel=1e-9)

    def test_zero_shot_uses_history_bounds(self):
        # With a zero-output model the prediction is the midpoint of whatever
        # bounds are in force, so shifting the bundle's stored training
        # bounds changes the standard run but not the zero-shot run.
        ckpt = zero_head_checkpoint()
        bundle = random_bundle(T=24)
        shifted = DatasetBundle(bundle.name, bundle.train, bundle.val,
                                bundle.test, bundle.raw_train, bundle.raw_val,
                                bundle.raw_test, bundle.lo + 50.0,
                                bundle.hi + 50.0)
        std = evaluate_dataset(ckpt, bundle, 4, 4, baselines=False)
        std_shift = evaluate_dataset(ckpt, shifted, 4, 4, baselines=False)
        zs = evaluate_dataset(ckpt, bundle, 4, 4, baselines=False, zero_shot=True)
        zs_shift = evaluate_dataset(ckpt, shifted, 4, 4, baselines=False,
                                    zero_shot=True, protocol="zero_shot")
        assert std.rows[0].rmse != pytest.approx(std_shift.rows[0].rmse)
        assert zs.rows[0].rmse == pytest.approx(zs_shift.rows[0].rmse, rel=1e-12)

    def test_run_protocol_covers_all_bundles(self):
        bundles = [random_bundle("a", T=24, seed=0),
                   random_bundle("b", T=32, H=6, W=6, seed=1)]
        report = run_protocol(zero_head_checkpoint(), bundles, 4, 4)
        assert {r.dataset for r in report.rows} == {"a", "b"}

    def test_too_short_test_split_rejected(self):
        bundle = random_bundle(T=6)
        with pytest.raises(SizingError):
            evaluate_dataset(zero_head_checkpoint(), bundle, 4, 4)

    def test_csv_round_trip(self, tmp_path):
        bundle = random_bundle(T=24)
        report = evaluate_dataset(zero_head_checkpoint(), bundle, 4, 4)
        path = tmp_path / "report.csv"
        report.to_csv(path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(report.rows)
        for got, want in zip(rows, report.rows):
            assert got["dataset"] == want.dataset
            assert float(got["rmse"]) == pytest.approx(want.rmse, rel=1e-9)
            assert got["step"] == str(want.step)

    def test_one_raises_on_ambiguity(self):
        report = EvalReport([
            EvalRow("d", "short", "model", "all", 1.0, 1.0, 1),
            EvalRow("d", "short", "ha", "all", 1.0, 1.0, 1),
        ])
        with pytest.raises(KeyError):
            report.one(dataset="d", step="all")


# ---------------------------------------------------------------------------
# noise suite
# ---------------------------------------------------------------------------

class TestNoiseSuite:
    def test_levels_and_clean_reference(self):
        bundle = random_bundle(T=24)
        out = run_noise_suite(zero_head_checkpoint(), bundle, 4, 4,
                              levels=(0.01, 0.1))
        assert set(out) == {0.0, 0.01, 0.1}
        clean = evaluate_dataset(zero_head_checkpoint(), bundle, 4, 4,
                                 baselines=False)
        assert out[0.0].rmse == pytest.approx(
            clean.one(predictor="model", step="all").rmse, rel=1e-12)

    def test_noise_is_seeded(self):
        # Needs a model whose output depends on its inputs, so use untrained
        # random weights rather than the zeroed head.
        bundle = random_bundle(T=24)
        model = Forecaster(tiny_model_config(), np.random.default_rng(2))
        ckpt = snapshot_checkpoint(model, {}, {}, {"prompts_trained": False})
        a = run_noise_suite(ckpt, bundle, 4, 4, levels=(0.1,), seed=3)
        b = run_noise_suite(ckpt, bundle, 4, 4, levels=(0.1,), seed=3)
        c = run_noise_suite(ckpt, bundle, 4, 4, levels=(0.1,), seed=4)
        assert a[0.1].rmse == b[0.1].rmse
        assert a[0.1].rmse != c[0.1].rmse

    def test_targets_stay_clean(self):
        # A zero-output model ignores its inputs entirely, so if targets are
        # never perturbed every noise level scores identically.
        bundle = random_bundle(T=24)
        out = run_noise_suite(zero_head_checkpoint(), bundle, 4, 4,
                              levels=(0.5,), seed=0)
        assert out[0.5].rmse == pytest.approx(out[0.0].rmse, rel=1e-12)

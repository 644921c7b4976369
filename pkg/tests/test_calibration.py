import json

import numpy as np
import pytest

from spcde import spqr
from spcde.calibration import (CalibrationModel, FitError, Hyper, assemble_training_rows, boundary_for, calibrate,
                               fit_calibration, model_seed, project, run_pipeline)
from spcde.dataio import SynthSpec, generate_synth
from spcde.grid import AlignmentError, prcp_forward
from spcde.vecchia import build_schemas, maxmin_order, neighbor_sets

FAST = Hyper(K=8, hidden_sizes=(10,), max_epochs=15, learning_rate=0.01, m=3, seed=1)


@pytest.fixture(scope="module")
def fitted(small_fields):
    obs, mod = small_fields
    hist_o, hist_m = obs.day_slice(None, "2001-12-31"), mod.day_slice(None, "2001-12-31")
    cm = fit_calibration(hist_o, hist_m, FAST, months=[1, 2])
    future = mod.day_slice("2002-01-01", "2002-02-28")
    return cm, mod, future


@pytest.fixture(scope="module")
def calibrated(fitted):
    cm, mod, future = fitted
    b = boundary_for(mod, future)
    u = project(cm, future, b)
    return u, calibrate(cm, u, future, b), b


def schemas_for(field, m=3):
    return build_schemas(neighbor_sets(maxmin_order(field.coords), m))


class TestHyper:
    def test_published_defaults(self):
        h = Hyper()
        assert (h.K, h.hidden_sizes, h.batch_size, h.learning_rate, h.max_epochs, h.validation_fraction,
                h.patience, h.m, h.covariates) == (20, (30, 20), 100, 0.001, 300, 0.2, 5, 10, ())

    def test_round_trip(self):
        h = Hyper(covariates=("doy_sin",), hidden_sizes=(4, 5))
        assert Hyper.from_dict(json.loads(json.dumps(h.to_dict()))) == h

    def test_unknown_covariate(self):
        with pytest.raises(ValueError):
            Hyper(covariates=("elevation",))

    def test_seed_independent_of_order(self):
        assert model_seed(0, 1, 2, "TMAX") == model_seed(0, 1, 2, "TMAX") != model_seed(0, 1, 2, "PRCP")


class TestTrainingRows:
    def test_row_count_and_indicator(self, small_fields):
        obs, mod = small_fields
        names = schemas_for(obs)[(4, "PRCP")]
        X, y = assemble_training_rows(obs, mod, 1, 4, "PRCP", names)
        # two Januaries per source, minus the first day, which has no lag
        assert len(y) == 2 * (31 + 31) - 2
        xcol = names.index("X")
        np.testing.assert_array_equal(X[:61, xcol], 0.0)
        np.testing.assert_array_equal(X[61:, xcol], 1.0)

    def test_lag_crosses_month_boundary(self, small_fields):
        obs, mod = small_fields
        names = schemas_for(obs)[(2, "TMAX")]
        X, y = assemble_training_rows(obs, mod, 2, 2, "TMAX", names)
        lag = names.index("TMAX@2:1")
        feb1 = int(np.nonzero(obs.dates == np.datetime64("2001-02-01"))[0][0])
        n_model = len(y) // 2
        assert X[0, lag] == mod.tmax[2, feb1 - 1]
        assert X[n_model, lag] == obs.tmax[2, feb1 - 1]
        assert y[n_model] == obs.tmax[2, feb1]

    def test_prcp_enters_transformed(self, small_fields):
        obs, mod = small_fields
        names = schemas_for(obs)[(0, "PRCP")]
        X, y = assemble_training_rows(obs, mod, 3, 0, "PRCP", names)
        days = np.nonzero(obs.months == 3)[0]
        np.testing.assert_array_equal(y[len(days):], prcp_forward(obs.prcp[0, days]))

    def test_bad_month(self, small_fields):
        with pytest.raises(ValueError):
            assemble_training_rows(*small_fields, 13, 0, "TMAX", ["X"])


class TestFit:
    def test_full_model_count_and_schema_audit(self):
        obs, mod = generate_synth(SynthSpec(n_days=1461, seed=3))
        cm = fit_calibration(obs, mod, Hyper(K=5, hidden_sizes=(4,), max_epochs=1))
        assert len(cm.models) == 12 * 9 * 2 == 216
        for (month, loc, v), m in cm.models.items():
            assert list(m.schema.names) == cm.schemas[(loc, v)]
            assert m.params.layer_sizes[0] == len(cm.schemas[(loc, v)])

    def test_parallel_matches_serial(self, small_fields):
        obs, mod = (f.day_slice(None, "2001-06-30") for f in small_fields)
        h = Hyper(K=5, hidden_sizes=(4,), max_epochs=3, seed=2)
        a = fit_calibration(obs, mod, h, months=[3])
        b = fit_calibration(obs, mod, Hyper(**{**h.to_dict(), "hidden_sizes": (4,), "n_jobs": 2}), months=[3])
        for key in a.models:
            for x, y in zip(a.models[key].params.arrays(), b.models[key].params.arrays()):
                np.testing.assert_array_equal(x, y)

    def test_failures_are_collected(self, small_fields):
        obs, mod = (f.day_slice(None, "2001-03-31") for f in small_fields)
        dry = obs.months == 2
        obs = obs.with_values(prcp=np.where(dry, 0.0, obs.prcp))
        mod = mod.with_values(prcp=np.where(dry, 0.0, mod.prcp))
        with pytest.raises(FitError) as err:
            fit_calibration(obs, mod, Hyper(K=5, hidden_sizes=(4,), max_epochs=1), months=[2])
        assert len(err.value.failures) == 9
        assert all(k[2] == "PRCP" for k in err.value.failures)

    def test_source_tags_checked(self, small_fields):
        obs, mod = small_fields
        with pytest.raises(AlignmentError):
            fit_calibration(mod, obs, FAST, months=[1])

    def test_save_load(self, fitted, tmp_path):
        cm, mod, future = fitted
        cm.save(tmp_path / "cm")
        man = json.loads((tmp_path / "cm" / "manifest.json").read_text())
        assert man["format"] == "spcde-calibration" and len(man["models"]) == 36
        again = CalibrationModel.load(tmp_path / "cm")
        b = boundary_for(mod, future)
        np.testing.assert_array_equal(project(again, future, b).u["PRCP"], project(cm, future, b).u["PRCP"])


class TestProject:
    def test_levels_in_unit_interval(self, calibrated):
        u = calibrated[0]
        for v in ("TMAX", "PRCP"):
            assert np.all((u.u[v] >= 0) & (u.u[v] <= 1))

    def test_deterministic(self, fitted):
        cm, mod, future = fitted
        a, b = project(cm, future), project(cm, future)
        np.testing.assert_array_equal(a.u["TMAX"], b.u["TMAX"])

    def test_uses_raw_model_lags(self, fitted):
        cm, mod, future = fitted
        b = boundary_for(mod, future)
        u = project(cm, future, b)
        m = cm.models[(1, 0, "TMAX")]
        names = cm.schemas[(0, "TMAX")]
        t = 5
        x = [future.tmax[0, t - 1] if n == "TMAX@0:1" else 0.0 if n == "X" else
             future.tmax[int(n.split("@")[1].split(":")[0]), t] for n in names]
        np.testing.assert_allclose(u.u["TMAX"][0, t], spqr.cdf(m, future.tmax[0, t], x), rtol=1e-12)

    def test_missing_month(self, fitted):
        cm, mod, future = fitted
        with pytest.raises(AlignmentError):
            project(cm, mod.day_slice("2002-03-01", "2002-03-31"))

    def test_rejects_observed_source(self, fitted, small_fields):
        with pytest.raises(AlignmentError):
            project(fitted[0], small_fields[0].day_slice("2002-01-01", "2002-01-31"))


class TestCalibrate:
    def test_shape_preserved(self, fitted, calibrated):
        future, cal = fitted[2], calibrated[1]
        assert cal.tmax.shape == future.tmax.shape
        np.testing.assert_array_equal(cal.dates, future.dates)
        np.testing.assert_array_equal(cal.loc_ids, future.loc_ids)

    def test_prcp_has_exact_zeros(self, calibrated):
        cal = calibrated[1]
        assert np.all(cal.prcp >= 0) and np.any(cal.prcp == 0)
        assert np.all((cal.prcp == 0) | (cal.prcp >= 0.001))

    def test_within_padded_range(self, fitted, calibrated):
        cm, _, future = fitted
        cal = calibrated[1]
        for t in range(future.n_days):
            month = int(future.months[t])
            for loc in range(future.n_locations):
                s = cm.models[(month, loc, "TMAX")].scaler
                assert s.lower <= cal.tmax[loc, t] <= s.upper
                s = cm.models[(month, loc, "PRCP")].scaler
                assert prcp_forward(cal.prcp[loc, t]) <= s.upper + 1e-12

    def test_first_day_flagged(self, fitted, calibrated):
        assert calibrated[1].meta["first_day_raw_lag"] == "2002-01-01"
        assert calibrated[1].meta["method"] == "SPCDE"

    def test_directionality(self, fitted, calibrated):
        cm, _, future = fitted
        u, cal, b = calibrated
        tmax_only = calibrate(cm, u, future, b, variables=("TMAX",))
        np.testing.assert_array_equal(tmax_only.tmax, cal.tmax)

    @pytest.mark.parametrize("t0", [1, 17, 31, 58])
    def test_sequential_consistency(self, fitted, calibrated, t0):
        cm, _, future = fitted
        u, cal, b = calibrated
        state = (cal.tmax[:, t0 - 1], cal.prcp[:, t0 - 1])
        again = calibrate(cm, u, future, b, start_day=t0, initial_state=state)
        np.testing.assert_array_equal(again.tmax[:, t0:], cal.tmax[:, t0:])
        np.testing.assert_array_equal(again.prcp[:, t0:], cal.prcp[:, t0:])
        assert again.meta["first_day_raw_lag"] is None

    def test_misaligned_levels(self, fitted, calibrated):
        cm, _, future = fitted
        u = calibrated[0]
        with pytest.raises(AlignmentError):
            calibrate(cm, u, future.day_slice("2002-01-02", "2002-02-28"))


class TestPipeline:
    def test_in_sample_report(self, small_fields):
        obs, mod = (f.day_slice("2001-01-01", "2001-02-28") for f in small_fields)
        h = Hyper(K=5, hidden_sizes=(4,), max_epochs=2, m=2)
        cal, rep, extras = run_pipeline(obs, mod, mod, h, obs_future=obs)
        assert len(extras["cmodel"].models) == 2 * 9 * 2
        assert rep.table().shape == (10, 3)

    def test_returns_report_and_baselines(self, small_fields):
        obs, mod = small_fields
        h = Hyper(K=5, hidden_sizes=(4,), max_epochs=2, m=2)
        cal, rep, extras = run_pipeline(obs.day_slice(None, "2001-12-31"), mod.day_slice(None, "2001-12-31"),
                                        mod.day_slice("2002-01-01"), h, obs_future=obs.day_slice("2002-01-01"))
        assert rep.methods == ["SPCDE", "QM", "Model"]
        assert cal.meta["first_day_raw_lag"] == "2002-01-01"
        assert set(extras) == {"cmodel", "qm", "u"}


class TestHeldOutLevels:
    def test_projected_levels_uniform(self, acceptance_run):
        from scipy import stats

        u = acceptance_run["u"].u
        for v in ("TMAX", "PRCP"):
            # weekly thinning: KS assumes independent draws, daily levels are autocorrelated
            assert stats.kstest(u[v][:, ::7].ravel(), "uniform").pvalue > 0.01

import numpy as np
import pytest
from sklearn.base import clone

from tsformer.data import SplitSpec, SyntheticSpec, minmax_fit, normalize_matrix, synth_generate
from tsformer.estimators import MinMaxNormalizer, TsformerForecaster
from tsformer.evaluate import EvaluationError, rolling_origin_evaluate
from tsformer.train import load_checkpoint, save_checkpoint

SMALL = dict(d_model=8, heads=2, encoder_layers=1, decoder_layers=1, ffn_dim=16, max_epochs=3, patience=2)


@pytest.fixture(scope="module")
def ds():
    return synth_generate(SyntheticSpec(days=150, seed=1))


@pytest.fixture(scope="module")
def fitted(ds):
    return TsformerForecaster(forecast_horizon=3, decoder_input_length=7, **SMALL).fit(ds)


class TestNormalizer:
    def test_matches_functions(self, ds):
        n = MinMaxNormalizer().fit(ds)
        np.testing.assert_array_equal(n.transform(ds), normalize_matrix(minmax_fit(ds), ds.values))

    def test_round_trip(self, ds):
        n = MinMaxNormalizer().fit(ds.values)
        np.testing.assert_allclose(n.inverse_transform(n.transform(ds.values)), ds.values, rtol=1e-12)

    def test_constant_inverse_raises(self):
        n = MinMaxNormalizer().fit(np.ones((3, 2)))
        with pytest.raises(ValueError):
            n.inverse_transform(np.zeros((1, 2)))


class TestForecaster:
    def test_params_round_trip(self):
        est = TsformerForecaster(d_model=16, learning_rate=5e-3)
        assert clone(est).get_params() == est.get_params()
        assert est.set_params(heads=2).heads == 2

    def test_fit_attributes(self, fitted, ds):
        assert fitted.model_.config.forecast_horizon == 3
        assert fitted.n_features_in_ == ds.schema.feature_dim
        assert len(fitted.history_.epochs) >= 1

    def test_predict(self, fitted, ds):
        pred = fitted.predict(ds)
        assert pred.shape == (3,) and np.all(np.isfinite(pred))

    def test_forecast_first_leads(self, fitted, ds):
        full = fitted.forecast_origins(ds, [100, 101], 3)
        np.testing.assert_array_equal(fitted.forecast_origins(ds, [100, 101], 1), full[:, :1])
        with pytest.raises(EvaluationError):
            fitted.forecast_origins(ds, [100], 4)

    def test_checkpoint_round_trip(self, fitted, ds, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(fitted.model_, fitted.stats_, path, {"use_calendar": True, "split": fitted.split_.to_dict()})
        est = TsformerForecaster.from_checkpoint(load_checkpoint(path))
        assert np.array_equal(est.predict(ds), fitted.predict(ds))
        assert est.split_ == fitted.split_

    def test_denormalize_then_score_invariance(self, fitted, ds):
        b = SplitSpec.from_fractions(ds).bounds(ds)
        base = rolling_origin_evaluate(fitted, ds, b["test"], 3).report
        # widening the normalization range while rescaling the output layer leaves raw forecasts unchanged
        other = clone(fitted)
        other.model_ = fitted.model_.copy()
        other.stats_ = type(fitted.stats_)(fitted.stats_.columns, fitted.stats_.mins.copy(), fitted.stats_.maxs.copy())
        i = 0
        lo, hi = other.stats_.mins[i], other.stats_.maxs[i]
        other.stats_.maxs[i] = lo + 2 * (hi - lo)
        other.model_.params["out.w"].data = other.model_.params["out.w"].data / 2
        other.model_.params["out.b"].data = other.model_.params["out.b"].data / 2
        # inputs see a demand column scaled by 1/2, so undo that in the input projections
        for p in ("enc.in.w", "dec.in.w"):
            other.model_.params[p].data[i] *= 2
        other.split_, other.n_features_in_ = fitted.split_, fitted.n_features_in_
        rep = rolling_origin_evaluate(other, ds, b["test"], 3).report
        assert rep.mae == pytest.approx(base.mae, rel=1e-9)
        assert rep.rmse == pytest.approx(base.rmse, rel=1e-9)

    def test_fit_rejects_arrays(self):
        with pytest.raises(TypeError):
            TsformerForecaster().fit(np.zeros((10, 3)))

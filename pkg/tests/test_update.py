from dataclasses import replace

import numpy as np
import pytest

from tlupdate.ann import Architecture, NetworkModel, compute_metrics, init_network
from tlupdate.data import Scaler
from tlupdate.update import (
    Ensemble,
    run_strategy,
    update_altl,
    update_etl,
    update_lltl,
    weight_summary,
    weight_summary_csv,
)

from .conftest import FAST_UPDATE


@pytest.fixture(scope="module")
def outcomes(toy_model, drift_buffer):
    return {s: run_strategy(s, toy_model, drift_buffer, seed=0, base_lr=0.01, base=FAST_UPDATE)
            for s in ("LLTL", "ALTL", "ETL")}


def test_lltl_freezes_hidden_layers(outcomes, toy_model):
    m = outcomes["LLTL"].model
    assert m.architecture == toy_model.architecture
    for k in range(m.n_layers - 1):
        np.testing.assert_array_equal(m.weights[k], toy_model.weights[k])
        np.testing.assert_array_equal(m.biases[k], toy_model.biases[k])
    assert not np.array_equal(m.weights[-1], toy_model.weights[-1])


def test_altl_keeps_architecture_and_moves_all_layers(outcomes, toy_model):
    m = outcomes["ALTL"].model
    assert m.architecture == toy_model.architecture
    assert all(not np.array_equal(a, b) for a, b in zip(m.weights, toy_model.weights))


def test_etl_appends_member_and_keeps_old_bits(outcomes, toy_model, drift_buffer):
    e = outcomes["ETL"].model
    assert isinstance(e, Ensemble) and len(e.members) == 2
    assert e.members[0].same_parameters(toy_model)
    x = drift_buffer.inputs
    np.testing.assert_array_equal(e.predict(x), np.mean([m.predict(x) for m in e.members], axis=0))


def test_updates_improve_on_buffer(outcomes, toy_model, drift_buffer):
    x, y = drift_buffer.inputs, drift_buffer.targets
    stale = compute_metrics(y, toy_model.predict(x)).rmse
    for o in outcomes.values():
        assert compute_metrics(y, o.model.predict(x)).rmse < stale


def test_source_model_untouched(toy_model, drift_buffer):
    snap = toy_model.flat_parameters().copy()
    update_altl(toy_model, drift_buffer, base=FAST_UPDATE)
    np.testing.assert_array_equal(toy_model.flat_parameters(), snap)


def test_etl_grows_existing_ensemble(toy_model, drift_buffer):
    first = update_etl(toy_model, drift_buffer, base=FAST_UPDATE).model
    second = update_etl(first, drift_buffer, base=FAST_UPDATE).model
    assert len(second.members) == 3
    for a, b in zip(first.members, second.members):
        assert a.same_parameters(b)


def test_strategy_errors(toy_model, drift_buffer):
    with pytest.raises(ValueError):
        run_strategy("XTL", toy_model, drift_buffer)
    with pytest.raises(ValueError):
        run_strategy("LLTL", Ensemble((toy_model,)), drift_buffer)


class TestEnsemble:
    def _const(self, value):
        a = Architecture(2, ())
        return NetworkModel(a, (np.zeros((1, 2)),), (np.array([value]),))

    def test_mean(self):
        e = Ensemble((self._const(0.2), self._const(0.4)))
        np.testing.assert_allclose(e.predict(np.zeros((3, 2))), 0.3)

    def test_scaler_must_match(self):
        s1 = Scaler(np.zeros(3), np.ones(3), ("a", "b", "y"))
        s2 = Scaler(np.zeros(3), np.full(3, 2.0), ("a", "b", "y"))
        with pytest.raises(ValueError):
            Ensemble((replace(self._const(0), scaler=s1), replace(self._const(0), scaler=s2)))

    def test_empty(self):
        with pytest.raises(ValueError):
            Ensemble(())


class TestWeightSummary:
    def test_self_ratio_is_one(self, toy_model):
        for s in weight_summary(toy_model, toy_model):
            assert s.iqr_ratio == 1.0 and s.std_ratio == 1.0 and s.verdict == "unchanged"

    def test_doubling(self, toy_model):
        doubled = toy_model.with_parameters(2 * toy_model.flat_parameters())
        for s in weight_summary(doubled, toy_model):
            assert s.iqr_ratio == 2.0 and s.std_ratio == 2.0 and s.verdict == "widened"

    def test_quantiles_match_numpy(self, toy_model):
        s = weight_summary(toy_model, toy_model)[0]
        np.testing.assert_array_equal(s.quantiles, np.percentile(toy_model.weights[0], [5, 25, 50, 75, 95]))

    def test_shape_mismatch(self, toy_model):
        with pytest.raises(ValueError):
            weight_summary(init_network(Architecture(3, (2,)), 0), toy_model)

    def test_csv(self, toy_model):
        text = weight_summary_csv([("ref", weight_summary(toy_model, toy_model))])
        assert text.splitlines()[0] == "strategy,layer,quantile,value"
        assert len(text.splitlines()) == 1 + 3 * 7

import numpy as np
import pytest

from sepsis_fusion.cohort import Labels, NoteDoc, VitalsSeries
from sepsis_fusion.errors import ModalityMissingError, ModelError
from sepsis_fusion.experts import (
    ExpertKind, OptimizerSettings, TemporalExpertParams, TextExpertParams, VisionExpertParams, check_gradients,
    expert_predict, fit_expert, fit_text, fit_vision, load_expert, predict_records, save_expert,
)
from sepsis_fusion.experts import layers, monitor, reader, visionary
from sepsis_fusion.experts.training import validation_split
from sepsis_fusion.gbdt import GBDTParams

TOLERANCE = 1e-4
SMALL_MONITOR = TemporalExpertParams(filters=3, kernel_width=2, hidden=4, attention=3,
                                     optimizer=OptimizerSettings(epochs=3, batch_size=8))


def _sequence_batch(rng, lengths, n_channels=2):
    T = max(lengths)
    X = rng.normal(size=(len(lengths), T, n_channels))
    step_mask = np.zeros((len(lengths), T))
    for b, length in enumerate(lengths):
        step_mask[b, :length] = 1.0
    return X, step_mask


class TestGradients:
    @pytest.mark.parametrize("cell", ["lstm", "gru"])
    def test_monitor(self, cell):
        rng = np.random.default_rng(0)
        params = TemporalExpertParams(filters=3, kernel_width=2, cell=cell, hidden=3, attention=2)
        X, step_mask = _sequence_batch(rng, [5, 3, 4])
        Y = layers.one_hot([0, 1, 1], 2)
        weights = monitor.init_weights(params, 2, 2, rng)
        worst = check_gradients(lambda w: monitor.loss_and_grad(w, X, step_mask, Y, params), weights, per_array=6)
        assert worst < TOLERANCE

    def test_visionary(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(6, 4))
        Y = layers.one_hot([0, 1, 2, 3, 1, 0], 4)
        weights = visionary.init_weights(VisionExpertParams(width=5), 4, 4, rng)
        worst = check_gradients(lambda w: visionary.loss_and_grad(w, X, Y, 0.01), weights)
        assert worst < TOLERANCE

    def test_reader(self):
        params = TextExpertParams(hash_dim=16)
        docs = [[_note(("fever", "lactate"))], [_note(("stable",))], [_note(("fever", "stable", "fever"))]]
        X = reader.featurize(docs, params)
        Y = layers.one_hot([1, 0, 1], 2)
        intercept = np.log([0.4, 0.6])
        weights = {"W": np.random.default_rng(2).normal(scale=0.1, size=(16, 2))}

        def objective(w):
            loss, grad = reader.loss_and_grad(w["W"], X, Y, intercept, 0.1)
            return loss, {"W": grad}

        assert check_gradients(objective, weights) < TOLERANCE


def _note(tokens, timestamp=1.0):
    return NoteDoc(tuple(tokens), timestamp)


class TestLayers:
    def test_fully_masked_softmax_is_zero(self):
        weights = layers.masked_softmax(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1, 1], [0, 0]], dtype=bool))
        np.testing.assert_allclose(weights[0].sum(), 1.0)
        np.testing.assert_array_equal(weights[1], [0.0, 0.0])

    def test_causal_conv_ignores_future(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(1, 6, 2))
        W = rng.normal(size=(6, 4))
        before, _ = layers.causal_conv_forward(X, W, np.zeros(4), 3)
        X[0, 4:] += 10.0
        after, _ = layers.causal_conv_forward(X, W, np.zeros(4), 3)
        np.testing.assert_array_equal(before[0, :4], after[0, :4])

    def test_padding_does_not_leak(self):
        rng = np.random.default_rng(4)
        params = TemporalExpertParams(filters=3, kernel_width=2, hidden=3, attention=2)
        weights = monitor.init_weights(params, 2, 2, rng)
        X, step_mask = _sequence_batch(rng, [3, 6])
        logits, alpha, _ = monitor.forward(weights, X, step_mask, params)
        X[0, 3:] = 50.0
        shifted, _, _ = monitor.forward(weights, X, step_mask, params)
        np.testing.assert_allclose(logits, shifted)
        np.testing.assert_array_equal(alpha[0, 3:], 0.0)


class TestTraining:
    def test_validation_split_partitions(self):
        train, val = validation_split(50, 0.2, seed=1)
        assert len(val) == 10
        assert sorted(np.concatenate([train, val]).tolist()) == list(range(50))

    def test_tiny_validation_rounds_to_empty(self):
        train, val = validation_split(3, 0.1, seed=1)
        assert len(train) == 3 and len(val) == 0

    @pytest.mark.parametrize("kwargs", [{"step_size": 0.0}, {"epochs": 0}, {"patience": -1},
                                        {"validation_fraction": 1.0}])
    def test_optimizer_settings(self, kwargs):
        with pytest.raises(ModelError):
            OptimizerSettings(**kwargs)

    def test_param_validation(self):
        with pytest.raises(ModelError):
            TemporalExpertParams(cell="rnn")
        with pytest.raises(ModelError):
            TextExpertParams(hash_dim=1000)
        with pytest.raises(ModelError):
            VisionExpertParams(width=0)


class TestFit:
    def test_vision_learns_separable_features(self):
        rng = np.random.default_rng(5)
        features = rng.normal(size=(200, 4))
        y = (features[:, 0] + features[:, 1] > 0).astype(int)
        settings = OptimizerSettings(step_size=0.5, epochs=40, patience=40)
        model = fit_vision(features, y, VisionExpertParams(width=8, optimizer=settings))
        probs = visionary.predict_vision(model, features)
        assert (probs.argmax(axis=1) == y).mean() > 0.85

    def test_reader_learns_marker_token(self):
        docs = [[_note(("patient", "febrile" if i % 2 else "comfortable", "overnight"))] for i in range(40)]
        y = np.arange(40) % 2
        model = fit_text(docs, y, TextExpertParams(hash_dim=2 ** 10))
        probs = reader.predict_text(model, docs)
        assert (probs.argmax(axis=1) == y).all()

    def test_reader_empty_document_gives_prior(self):
        docs = [[_note(("sepsis",))], [_note(("calm",))]] * 5
        model = fit_text(docs, np.arange(10) % 2, TextExpertParams(hash_dim=2 ** 8))
        np.testing.assert_allclose(reader.predict_text(model, [[]])[0], model.prior)

    def test_ngrams_stay_inside_notes(self):
        params = TextExpertParams(hash_dim=2 ** 12)
        split = reader.featurize([[_note(("a",)), _note(("b",))]], params)
        joined = reader.featurize([[_note(("a", "b"))]], params)
        assert split.sum() == 2
        assert joined.sum() == 3

    def test_single_class_is_prior_only(self):
        model = fit_text([[_note(("x",))]] * 3, [1, 1, 1], TextExpertParams(hash_dim=2 ** 8))
        assert model.is_prior_only
        assert model.prior[1] > 0.99

    def test_historian_on_cohort(self, small_cohort):
        records = list(small_cohort.task_records("detection"))
        y = np.array([r.labels.sepsis for r in records])
        model = fit_expert(ExpertKind.HISTORIAN, records, y, GBDTParams(rounds=5), 2, small_cohort.schema)
        probs = predict_records(model, records)
        assert probs.shape == (len(records), 2)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_monitor_fits(self, make_record):
        records = [make_record(f"R{i}", hours=6 + i % 4, seed=i) for i in range(12)]
        y = np.arange(12) % 2
        model = fit_expert(ExpertKind.MONITOR, records, y, SMALL_MONITOR, 2, None)
        assert len(model.training_log) >= 1
        probs = predict_records(model, records)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        np.testing.assert_allclose(expert_predict(model, records[3]), probs[3], rtol=1e-10)

    def test_monitor_learns_slope_sign(self):
        rng = np.random.default_rng(6)
        slopes = rng.choice([-1.0, 1.0], size=64) * rng.uniform(0.5, 1.5, size=64)
        steps = np.arange(8) - 3.5
        series = [
            VitalsSeries(np.column_stack([s * steps + 0.1 * rng.normal(size=8), rng.normal(size=8)]),
                         np.ones((8, 2), dtype=bool))
            for s in slopes
        ]
        y = (slopes > 0).astype(int)
        settings = OptimizerSettings(step_size=0.3, batch_size=16, epochs=200, patience=200, validation_fraction=0.0)
        params = TemporalExpertParams(filters=4, kernel_width=3, hidden=8, attention=4, optimizer=settings)
        model = monitor.fit_temporal(series, y, params)
        probs = monitor.predict_temporal(model, series)
        assert (probs.argmax(axis=1) == y).mean() >= 0.95


class TestModality:
    def test_reader_needs_notes(self, make_record):
        with pytest.raises(ModalityMissingError) as info:
            fit_expert(ExpertKind.READER, [make_record("R5")], [0], TextExpertParams(), 2, None)
        assert info.value.record_id == "R5"

    def test_visionary_needs_image(self, make_record):
        with pytest.raises(ModalityMissingError):
            fit_expert(ExpertKind.VISIONARY, [make_record()], [0], VisionExpertParams(), 2, None)

    def test_predict_checks_modality(self, make_record):
        records = [make_record(f"R{i}", notes=[(1.0, ("fever",) if i % 2 else ("calm",))]) for i in range(6)]
        model = fit_expert(ExpertKind.READER, records, np.arange(6) % 2, TextExpertParams(hash_dim=2 ** 8), 2, None)
        with pytest.raises(ModalityMissingError):
            expert_predict(model, make_record("R9"))


class TestPersistence:
    def test_monitor_roundtrip(self, make_record, tmp_path):
        records = [make_record(f"R{i}", seed=i) for i in range(8)]
        model = fit_expert(ExpertKind.MONITOR, records, np.arange(8) % 2, SMALL_MONITOR, 2, None)
        path = tmp_path / "monitor.json"
        save_expert(model, path)
        loaded = load_expert(path)
        assert loaded.params == model.params
        np.testing.assert_array_equal(predict_records(loaded, records), predict_records(model, records))

    def test_reader_roundtrip(self, make_record, tmp_path):
        records = [make_record(f"R{i}", notes=[(1.0, ("fever", "rigors") if i % 2 else ("calm",))])
                   for i in range(10)]
        model = fit_expert(ExpertKind.READER, records, np.arange(10) % 2, TextExpertParams(), 2, None)
        path = tmp_path / "reader.json"
        save_expert(model, path)
        np.testing.assert_array_equal(predict_records(load_expert(path), records), predict_records(model, records))

    def test_visionary_roundtrip_with_labels(self, make_record, tmp_path):
        records = [make_record(f"R{i}", image=np.full(4, float(i)), labels=Labels(sepsis=i % 2)) for i in range(8)]
        settings = OptimizerSettings(epochs=2)
        model = fit_expert(ExpertKind.VISIONARY, records, np.arange(8) % 2, VisionExpertParams(optimizer=settings),
                           2, None)
        path = tmp_path / "visionary.json"
        save_expert(model, path)
        np.testing.assert_array_equal(predict_records(load_expert(path), records), predict_records(model, records))

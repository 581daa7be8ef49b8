import numpy as np
import pytest

from sepsis_fusion.errors import GenSpecError
from sepsis_fusion.guards import load_lexicons
from sepsis_fusion.synthgen import (
    NOTE_SIGNAL, GenSpec, cohort_latents, cohort_schema, generate_cohort, label_parameters, load_genspec,
    monte_carlo_posterior, oracle_posterior, oracle_prior, oracle_scores,
)


class TestGenSpec:
    def test_presets_load(self):
        for name in ("detection_default", "mortality_default", "abx_default"):
            assert isinstance(load_genspec(name), GenSpec)

    def test_missing_preset(self):
        with pytest.raises(GenSpecError):
            load_genspec("no_such_preset")

    def test_unknown_field(self):
        with pytest.raises(GenSpecError):
            GenSpec.from_dict({"n_static": 3, "bogus": 1})

    @pytest.mark.parametrize("override", [
        {"redundancy": 1.5}, {"pathogen_prior": [0.5, 0.5, 0.5, 0.5]}, {"detection_prevalence": 1.0},
        {"missing_rate": -0.1}, {"interaction": -0.2}, {"interaction": float("nan")},
        {"onset_window": [12.0, 12.0]}, {"onset_window": [0.0, 30.0]}, {"onset_window": [30.0, 10.0]},
        {"administration_window": [-1.0, 10.0]},
    ])
    def test_invalid_values(self, default_spec, override):
        with pytest.raises(GenSpecError):
            default_spec.with_overrides(**override)

    def test_digest_tracks_content(self, default_spec):
        assert default_spec.digest == GenSpec().digest
        assert default_spec.digest != default_spec.with_overrides(interaction=0.1).digest


class TestGenerateCohort:
    def test_deterministic(self, default_spec):
        assert generate_cohort(default_spec, 20, seed=3) == generate_cohort(default_spec, 20, seed=3)

    def test_records_depend_only_on_index(self, default_spec):
        short = generate_cohort(default_spec, 5, seed=3)
        long = generate_cohort(default_spec, 12, seed=3)
        assert all(a == b for a, b in zip(short, long.records[:5]))

    def test_seed_changes_cohort(self, default_spec):
        assert generate_cohort(default_spec, 5, seed=3) != generate_cohort(default_spec, 5, seed=4)

    def test_schema_matches_spec(self, small_cohort, default_spec):
        assert small_cohort.schema == cohort_schema(default_spec)
        assert small_cohort.provenance == f"genspec:{default_spec.digest}"

    def test_empty(self, default_spec):
        assert len(generate_cohort(default_spec, 0, seed=0)) == 0

    def test_negative_size(self, default_spec):
        with pytest.raises(GenSpecError):
            generate_cohort(default_spec, -1, seed=0)

    def test_prevalence_targets(self, default_spec):
        cohort = generate_cohort(default_spec, 2000, seed=21)
        assert abs(cohort.labels("detection").mean() - default_spec.detection_prevalence) < 0.035
        assert abs(cohort.labels("mortality").mean() - default_spec.mortality_prevalence) < 0.035

    def test_noiseless_detection_rule(self, default_spec):
        spec = default_spec.with_overrides(label_noise=0.0)
        cohort = generate_cohort(spec, 200, seed=2)
        latents = cohort_latents(spec, 200, seed=2)
        theta, _ = label_parameters(spec)
        signal = latents["severity"] * (1.0 + spec.interaction * NOTE_SIGNAL[latents["pathogen"]])
        np.testing.assert_array_equal(cohort.labels("detection"), (signal > theta).astype(int))

    def test_contaminants_present(self, small_cohort):
        drug, _ = load_lexicons()
        assert any(token in drug for r in small_cohort for note in r.notes for token in note.tokens)

    def test_tasks_limit_labels(self, default_spec):
        cohort = generate_cohort(default_spec.with_overrides(tasks=["mortality"]), 10, seed=0)
        assert all(r.labels.sepsis is None and r.labels.antibiotic_class is None for r in cohort)
        assert all(r.labels.mortality in (0, 1) for r in cohort)


class TestOracle:
    @pytest.mark.parametrize("task, classes", [("detection", 2), ("mortality", 2), ("antibiotic", 4)])
    def test_posterior_is_distribution(self, small_cohort, default_spec, task, classes):
        posterior = oracle_posterior(small_cohort[0], default_spec, task)
        assert posterior.shape == (classes,)
        assert posterior.min() >= 0
        assert posterior.sum() == pytest.approx(1.0, abs=1e-12)

    def test_prior_matches_prevalence(self, default_spec):
        assert oracle_prior(default_spec, "detection")[1] == pytest.approx(default_spec.detection_prevalence,
                                                                          abs=1e-6)
        assert oracle_prior(default_spec, "mortality")[1] == pytest.approx(default_spec.mortality_prevalence,
                                                                          abs=1e-6)

    def test_mean_posterior_tracks_prevalence(self, default_spec):
        cohort = generate_cohort(default_spec, 400, seed=9)
        scores = oracle_scores(list(cohort), default_spec, "detection")
        assert abs(scores[:, 1].mean() - default_spec.detection_prevalence) < 0.05

    def test_matches_monte_carlo(self, small_cohort, default_spec):
        for record in small_cohort.records[:3]:
            for task in ("detection", "antibiotic"):
                exact = oracle_posterior(record, default_spec, task)
                sampled = monte_carlo_posterior(record, default_spec, task, n_samples=2 ** 17, seed=1)
                np.testing.assert_allclose(exact, sampled, rtol=0, atol=2e-3)

    @pytest.mark.slow
    def test_matches_monte_carlo_spot_records(self, default_spec):
        cohort = generate_cohort(default_spec, 100, seed=13)
        for record in cohort:
            exact = oracle_posterior(record, default_spec, "detection")
            sampled = monte_carlo_posterior(record, default_spec, "detection", n_samples=2 ** 20, seed=2)
            np.testing.assert_allclose(exact, sampled, rtol=0, atol=2e-3)

    def test_fully_redundant_image(self, default_spec):
        spec = default_spec.with_overrides(redundancy=1.0)
        cohort = generate_cohort(spec, 20, seed=4)
        for record in cohort:
            posterior = oracle_posterior(record, spec, "antibiotic")
            assert np.isfinite(posterior).all()
            assert posterior.sum() == pytest.approx(1.0, abs=1e-12)

import numpy as np
import pytest

from sepsis_fusion.cohort import DRUG_PLACEHOLDER, Labels, NoteDoc
from sepsis_fusion.errors import GuardError, LexiconError
from sepsis_fusion.guards import (
    GuardAudit, GuardSettings, Lexicon, apply_guards, apply_lexical_mask, apply_temporal_firewall, case_reference_hours,
    check_disjoint, enforce_observation_window, load_lexicon, load_lexicons, max_observation_hour,
    observation_cutoff,
)
from sepsis_fusion.synthgen import generate_cohort


@pytest.fixture(scope="module")
def lexicons():
    return load_lexicons()


class TestLexicon:
    def test_rejects_uppercase_terms(self):
        with pytest.raises(LexiconError):
            Lexicon.from_terms("drug", ["Vancomycin"])

    def test_rejects_duplicates(self):
        with pytest.raises(LexiconError):
            Lexicon.from_terms("drug", ["vanc", "vanc"])

    def test_overlap_is_ambiguous(self):
        with pytest.raises(LexiconError):
            check_disjoint(Lexicon.from_terms("drug", ["vanc", "mrsa"]), Lexicon.from_terms("pathogen", ["mrsa"]))

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "drugs.txt"
        path.write_text("# header\nvanc\n\nzosyn  # trailing\n", encoding="utf-8")
        assert load_lexicon(path).terms == frozenset({"vanc", "zosyn"})

    def test_case_folded_membership(self, lexicons):
        drug, _ = lexicons
        assert "VANCOMYCIN" in drug
        assert "mrsa" not in drug


class TestTemporalFirewall:
    def test_purges_at_and_after_cutoff(self, make_record):
        record = make_record(notes=[(1.0, ("a",)), (5.0, ("b",)), (7.5, ("c",))])
        kept, audit = apply_temporal_firewall(record, 5.0)
        assert [n.timestamp for n in kept.notes] == [1.0]
        assert audit.notes_purged == 2

    def test_no_notes(self, make_record):
        record = make_record()
        kept, audit = apply_temporal_firewall(record, 3.0)
        assert kept is record
        assert audit == GuardAudit()

    def test_non_finite_cutoff(self, make_record):
        with pytest.raises(GuardError):
            apply_temporal_firewall(make_record(), float("nan"))


class TestLexicalMask:
    def test_masks_drugs_keeps_pathogens(self, lexicons):
        drug, pathogen = lexicons
        doc = NoteDoc(("started", "Vancomycin", "for", "mrsa", "ZOSYN"), 2.0)
        masked, audit = apply_lexical_mask(doc, drug, pathogen)
        assert masked.tokens == ("started", DRUG_PLACEHOLDER, "for", "mrsa", DRUG_PLACEHOLDER)
        assert masked.timestamp == 2.0
        assert audit.tokens_masked == 2
        assert audit.pathogen_tokens_kept == 1

    def test_idempotent(self, lexicons):
        drug, pathogen = lexicons
        once, _ = apply_lexical_mask(NoteDoc(("vanc", "ecoli"), 1.0), drug, pathogen)
        twice, audit = apply_lexical_mask(once, drug, pathogen)
        assert twice == once
        assert audit.tokens_masked == 0
        assert audit.pathogen_tokens_kept == 1

    def test_pathogen_lexicon_decides_the_count(self, lexicons):
        drug, _ = lexicons
        doc = NoteDoc(("mrsa", "Klebsiella", "vanc"), 1.0)
        _, audit = apply_lexical_mask(doc, drug, Lexicon.from_terms("pathogen", ["klebsiella"]))
        assert audit.pathogen_tokens_kept == 1
        assert audit.tokens_masked == 1


class TestObservationWindow:
    def test_case_window(self, make_record):
        record = make_record(hours=24, notes=[(3.0, ("a",)), (9.0, ("b",))],
                             labels=Labels(sepsis=1, sepsis_onset=12.0))
        windowed = enforce_observation_window(record, 4.0, "detection")
        assert windowed.vitals.length == 8
        assert [n.timestamp for n in windowed.notes] == [3.0]
        assert max_observation_hour(windowed) < 8.0

    def test_zero_buffer_is_firewall_only(self, make_record):
        record = make_record(hours=24, labels=Labels(sepsis=1, sepsis_onset=12.0))
        assert observation_cutoff(record, 0.0, "detection") == 12.0

    def test_window_before_admission_excludes(self, make_record):
        record = make_record(labels=Labels(sepsis=1, sepsis_onset=2.0))
        assert enforce_observation_window(record, 4.0, "detection").excluded

    def test_control_uses_reference_hours(self, make_record):
        record = make_record(hours=24, labels=Labels(sepsis=0))
        assert observation_cutoff(record, 4.0, "detection", reference_hours=(10.0,)) == 6.0
        with pytest.raises(GuardError):
            observation_cutoff(record, 4.0, "detection")

    def test_antibiotic_window_ends_at_administration(self, make_record):
        record = make_record(hours=24, labels=Labels(antibiotic_class="VANC", antibiotic_hour=10.5))
        assert observation_cutoff(record, 4.0, "antibiotic") == 10.5

    def test_mortality_horizon(self, make_record):
        record = make_record(hours=48, labels=Labels(mortality=1))
        windowed = enforce_observation_window(record, 4.0, "mortality", mortality_horizon=24.0)
        assert windowed.vitals.length == 24

    def test_negative_buffer(self, make_record):
        with pytest.raises(GuardError):
            enforce_observation_window(make_record(labels=Labels(sepsis=1, sepsis_onset=5.0)), -1.0, "detection")

    def test_settings_validation(self):
        with pytest.raises(GuardError):
            GuardSettings(buffer_hours=-2.0)


class TestApplyGuards:
    @pytest.fixture(scope="class")
    def contaminated(self, default_spec):
        spec = default_spec.with_overrides(drug_token_rate=0.5, post_event_rate=1.0)
        return generate_cohort(spec, 2000, seed=17)

    def test_soundness_on_contaminated_cohort(self, contaminated, lexicons):
        drug, pathogen = lexicons
        guarded, audit = apply_guards(contaminated, "detection", GuardSettings(buffer_hours=4.0))
        assert audit.notes_purged > 0
        assert audit.tokens_masked > 0
        assert len(guarded) + audit.records_excluded == len(contaminated)
        originals = {r.id: r for r in contaminated}
        for record in guarded:
            assert not any(token in drug for note in record.notes for token in note.tokens)
            if record.labels.sepsis == 1:
                onset = record.labels.sepsis_onset
                assert max_observation_hour(record) < onset - 4.0
                assert all(note.timestamp < onset for note in record.notes)
            kept_pathogen = sum(t in pathogen.terms for note in record.notes for t in note.tokens)
            source = originals[record.id]
            cutoff = max(note.timestamp for note in record.notes) if record.notes else -np.inf
            original_pathogen = sum(t in pathogen.terms for note in source.notes
                                    if note.timestamp <= cutoff for t in note.tokens)
            assert kept_pathogen == original_pathogen

    def test_antibiotic_guard_purges_post_administration_notes(self, contaminated):
        guarded, _ = apply_guards(contaminated, "antibiotic")
        for record in guarded:
            assert all(note.timestamp < record.labels.antibiotic_hour for note in record.notes)

    def test_deterministic(self, small_cohort):
        first, audit_a = apply_guards(small_cohort, "detection", GuardSettings(seed=3))
        second, audit_b = apply_guards(small_cohort, "detection", GuardSettings(seed=3))
        assert first == second
        assert audit_a == audit_b

    def test_drops_unlabelled(self, make_cohort, make_record):
        cohort = make_cohort([make_record("R1", labels=Labels(mortality=0)), make_record("R2", labels=Labels())])
        guarded, audit = apply_guards(cohort, "mortality")
        assert [r.id for r in guarded] == ["R1"]
        assert audit.records_excluded == 1

    def test_guarding_twice_changes_nothing(self, default_spec):
        cohort = generate_cohort(default_spec, 400, seed=11)
        settings = GuardSettings(buffer_hours=8.0, seed=2)
        assert any(r.labels.sepsis == 1 and r.labels.sepsis_onset <= 8.0 for r in cohort)
        once, first = apply_guards(cohort, "detection", settings)
        assert first.records_excluded > 0
        twice, second = apply_guards(once, "detection", settings)
        assert twice == once
        assert second.records_excluded == second.notes_purged == second.tokens_masked == 0

    def test_reference_hours_skip_cases_the_window_drops(self, make_cohort, make_record):
        cohort = make_cohort([
            make_record("C1", hours=24, labels=Labels(sepsis=1, sepsis_onset=3.0)),
            make_record("C2", hours=24, labels=Labels(sepsis=1, sepsis_onset=15.0)),
            make_record("N1", hours=24, labels=Labels(sepsis=0)),
        ])
        assert case_reference_hours(cohort, 4.0) == (15.0,)
        guarded, _ = apply_guards(cohort, "detection", GuardSettings(buffer_hours=4.0))
        assert [r.id for r in guarded] == ["C2", "N1"]
        assert case_reference_hours(guarded, 4.0) == (15.0,)
        assert guarded[1].vitals.length == 11

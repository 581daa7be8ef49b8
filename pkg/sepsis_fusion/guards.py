"""Anti-leakage transforms: temporal firewall, lexical masking and the observation window."""
from dataclasses import dataclass
from pathlib import Path
import logging
import math

import numpy as np

from sepsis_fusion.cohort import DRUG_PLACEHOLDER, NoteDoc
from sepsis_fusion.config import Config
from sepsis_fusion.errors import GuardError, LexiconError
from sepsis_fusion.utils.hashing import stable_index

logger = logging.getLogger(__name__)

DEFAULT_DRUG_LEXICON = Config.PRESETS_DIR / "drug_lexicon.txt"
DEFAULT_PATHOGEN_LEXICON = Config.PRESETS_DIR / "pathogen_lexicon.txt"


@dataclass(frozen=True)
class Lexicon:
    name: str
    terms: frozenset
    match_mode: str = "whole-token"

    @classmethod
    def from_terms(cls, name, terms):
        terms = list(terms)
        for term in terms:
            if not isinstance(term, str) or not term.strip():
                raise LexiconError(f"{name}: empty term")
            if term != term.lower() or term != term.strip() or " " in term:
                raise LexiconError(f"{name}: term {term!r} must be a single lowercase token")
        if len(set(terms)) != len(terms):
            duplicates = sorted({t for t in terms if terms.count(t) > 1})
            raise LexiconError(f"{name}: duplicate terms {duplicates}")
        return cls(name, frozenset(terms))

    def __contains__(self, token):
        return token.casefold() in self.terms


def load_lexicon(path, name=None):
    """One term per line, '#' starts a comment."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise LexiconError(f"cannot read lexicon {path}: {exc}") from exc
    terms = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            terms.append(line)
    return Lexicon.from_terms(name or path.stem, terms)


def check_disjoint(drug_lexicon, pathogen_lexicon):
    overlap = sorted(drug_lexicon.terms & pathogen_lexicon.terms)
    if overlap:
        raise LexiconError(f"ambiguous lexicon: {overlap} listed as both drug and pathogen")


def load_lexicons(drug_path=None, pathogen_path=None):
    drug = load_lexicon(drug_path or DEFAULT_DRUG_LEXICON, "drug")
    pathogen = load_lexicon(pathogen_path or DEFAULT_PATHOGEN_LEXICON, "pathogen")
    check_disjoint(drug, pathogen)
    return drug, pathogen


@dataclass(frozen=True)
class GuardAudit:
    notes_purged: int = 0
    tokens_masked: int = 0
    records_touched: int = 0
    records_excluded: int = 0
    pathogen_tokens_kept: int = 0

    def __add__(self, other):
        return GuardAudit(
            self.notes_purged + other.notes_purged,
            self.tokens_masked + other.tokens_masked,
            self.records_touched + other.records_touched,
            self.records_excluded + other.records_excluded,
            self.pathogen_tokens_kept + other.pathogen_tokens_kept,
        )


@dataclass(frozen=True)
class GuardSettings:
    buffer_hours: float = 4.0
    drug_lexicon: str | None = None
    pathogen_lexicon: str | None = None
    seed: int = 0
    mortality_horizon: float = 24.0

    def __post_init__(self):
        if not self.buffer_hours >= 0:
            raise GuardError(f"buffer_hours must be >= 0, got {self.buffer_hours}")
        if not self.mortality_horizon > 0:
            raise GuardError("mortality_horizon must be > 0")


# Temporal firewall logic
def apply_temporal_firewall(record, cutoff_hour):
    if not math.isfinite(cutoff_hour):
        raise GuardError(f"cutoff hour must be finite, got {cutoff_hour}")
    kept = tuple(note for note in record.notes if note.timestamp < cutoff_hour)
    purged = len(record.notes) - len(kept)
    if not purged:
        return record, GuardAudit()
    return record.replace(notes=kept), GuardAudit(notes_purged=purged, records_touched=1)


# Lexical mask logic
def apply_lexical_mask(doc, drug_lexicon, pathogen_lexicon):
    """Replace drug tokens with the placeholder; pathogen tokens pass through and are counted."""
    tokens = []
    masked = 0
    kept = 0
    for token in doc.tokens:
        if token in drug_lexicon:
            tokens.append(DRUG_PLACEHOLDER)
            masked += 1
            continue
        if token in pathogen_lexicon:
            kept += 1
        tokens.append(token)
    if not masked:
        return doc, GuardAudit(pathogen_tokens_kept=kept)
    return NoteDoc(tuple(tokens), doc.timestamp), GuardAudit(tokens_masked=masked, pathogen_tokens_kept=kept)


def mask_record(record, drug_lexicon, pathogen_lexicon):
    notes = []
    audit = GuardAudit()
    for doc in record.notes:
        doc, doc_audit = apply_lexical_mask(doc, drug_lexicon, pathogen_lexicon)
        notes.append(doc)
        audit = audit + doc_audit
    if not audit.tokens_masked:
        return record, audit
    return record.replace(notes=tuple(notes)), audit + GuardAudit(records_touched=1)


def observation_cutoff(record, buffer_hours, task, *, seed=0, reference_hours=None,
                       mortality_horizon=24.0):
    """Hour before which observations stay visible for the given task."""
    labels = record.labels
    if task == "detection":
        if labels.sepsis is None:
            raise GuardError(f"record {record.id!r}: detection window needs a sepsis label")
        if labels.sepsis == 1:
            if labels.sepsis_onset is None:
                raise GuardError(f"record {record.id!r}: case record lacks an onset hour")
            return labels.sepsis_onset - buffer_hours
        if not reference_hours:
            raise GuardError(f"record {record.id!r}: control window needs case reference hours")
        reference = reference_hours[stable_index(record.id, seed, len(reference_hours))]
        return reference - buffer_hours
    if task == "antibiotic":
        if labels.antibiotic_hour is None:
            raise GuardError(f"record {record.id!r}: antibiotic window needs an administration hour")
        return labels.antibiotic_hour
    if task == "mortality":
        return mortality_horizon
    raise GuardError(f"unknown task {task!r}")


# Observation window logic
def enforce_observation_window(record, buffer_hours, task, *, seed=0, reference_hours=None,
                               mortality_horizon=24.0):
    if not buffer_hours >= 0:
        raise GuardError(f"buffer_hours must be >= 0, got {buffer_hours}")
    cutoff = observation_cutoff(record, buffer_hours, task, seed=seed,
                                reference_hours=reference_hours, mortality_horizon=mortality_horizon)
    vitals = record.vitals.truncate(cutoff)
    if vitals is None:
        return record.replace(excluded=True)
    windowed, _ = apply_temporal_firewall(record, cutoff)
    if vitals is record.vitals:
        return windowed
    return windowed.replace(vitals=vitals)


def case_reference_hours(cohort, buffer_hours=0.0):
    """Onset hours of the cases whose own window keeps at least one vitals step.

    Cases the window excludes never contribute, so a guarded cohort yields the same
    reference hours as the cohort it came from.
    """
    return tuple(sorted(
        r.labels.sepsis_onset for r in cohort
        if r.labels.sepsis == 1 and r.labels.sepsis_onset is not None
        and r.vitals.truncate(r.labels.sepsis_onset - buffer_hours) is not None
    ))


def apply_guards(cohort, task, settings=None):
    """Window, firewall and mask every record; drop excluded and unlabeled ones."""
    settings = settings or GuardSettings()
    drug, pathogen = load_lexicons(settings.drug_lexicon, settings.pathogen_lexicon)
    reference_hours = case_reference_hours(cohort, settings.buffer_hours) if task == "detection" else None

    kept = []
    audit = GuardAudit()
    for record in cohort:
        if record.labels.for_task(task) is None:
            audit = audit + GuardAudit(records_excluded=1)
            continue
        windowed = enforce_observation_window(
            record, settings.buffer_hours, task, seed=settings.seed,
            reference_hours=reference_hours, mortality_horizon=settings.mortality_horizon,
        )
        if windowed.excluded:
            audit = audit + GuardAudit(records_excluded=1)
            continue
        purged = len(record.notes) - len(windowed.notes)
        masked, mask_audit = mask_record(windowed, drug, pathogen)
        touched = int(purged > 0 or mask_audit.tokens_masked > 0 or windowed.vitals is not record.vitals)
        audit = audit + GuardAudit(purged, mask_audit.tokens_masked, touched,
                                   pathogen_tokens_kept=mask_audit.pathogen_tokens_kept)
        kept.append(masked)

    logger.info(
        "guards (%s): kept %d of %d records, purged %d notes, masked %d tokens",
        task, len(kept), len(cohort), audit.notes_purged, audit.tokens_masked,
    )
    return cohort.with_records(kept), audit


def max_observation_hour(record):
    hours = [float(np.max(record.vitals.hours))]
    hours.extend(note.timestamp for note in record.notes)
    return max(hours)

import numpy as np
import pytest

from sepsis_fusion import init_store
from sepsis_fusion.cohort import (
    CategoricalFeature, Cohort, CohortSchema, Labels, NoteDoc, PatientRecord, StaticVector, VitalsSeries,
)
from sepsis_fusion.synthgen import GenSpec, generate_cohort


TINY_SCHEMA = CohortSchema(
    numeric_features=("age", "severity_score", "comorbidity_index"),
    categorical_features=(CategoricalFeature("admission_unit", 4),),
    vital_channels=("heart_rate", "mean_arterial_pressure"),
    image_length=4,
)


def _build_record(record_id="R1", *, hours=12, notes=(), image=None, labels=None, numeric=(65.0, 2.0, 1.0),
                  unit=0, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(hours, len(TINY_SCHEMA.vital_channels)))
    mask = np.ones_like(values, dtype=bool)
    return PatientRecord(
        id=record_id,
        static=StaticVector(np.asarray(numeric, dtype=np.float64), (unit,)),
        vitals=VitalsSeries(values, mask, 0.0),
        notes=tuple(NoteDoc(tokens, ts) for ts, tokens in notes),
        image=None if image is None else np.asarray(image, dtype=np.float64),
        labels=labels or Labels(sepsis=0),
    )


@pytest.fixture
def tiny_schema():
    return TINY_SCHEMA


@pytest.fixture
def make_record():
    return _build_record


@pytest.fixture
def make_cohort():
    def build(records, provenance="test", seed=None):
        return Cohort(TINY_SCHEMA, tuple(records), provenance, seed)
    return build


@pytest.fixture(scope="session")
def default_spec():
    return GenSpec()


@pytest.fixture(scope="session")
def small_cohort(default_spec):
    return generate_cohort(default_spec, 160, seed=7)


@pytest.fixture
def store(tmp_path):
    return init_store(f"sqlite:///{tmp_path / 'results.db'}")

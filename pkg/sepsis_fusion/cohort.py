"""Multimodal patient records, the cohort container, its JSONL file format and splitting."""
from dataclasses import dataclass, field, replace
from pathlib import Path
import logging
import json
import math

import numpy as np

from sepsis_fusion.errors import CohortFormatError, OutputError, SchemaError, SplitError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MASKED_VALUE = 0.0
DRUG_PLACEHOLDER = "<DRUG>"

ANTIBIOTIC_CLASSES = ("VANC", "PIP_TAZO", "MEROPENEM", "CEFEPIME")
TASK_CLASSES = {
    "detection": ("non_sepsis", "sepsis"),
    "mortality": ("survivor", "mortality"),
    "antibiotic": ANTIBIOTIC_CLASSES,
}


def task_classes(task):
    try:
        return TASK_CLASSES[task]
    except KeyError:
        raise SchemaError(f"unknown task {task!r}; expected one of {sorted(TASK_CLASSES)}") from None


@dataclass(frozen=True)
class CategoricalFeature:
    name: str
    cardinality: int


@dataclass(frozen=True)
class CohortSchema:
    numeric_features: tuple
    categorical_features: tuple = ()
    vital_channels: tuple = ()
    image_length: int = 16

    @property
    def n_static(self):
        return len(self.numeric_features) + len(self.categorical_features)

    @property
    def static_names(self):
        return tuple(self.numeric_features) + tuple(c.name for c in self.categorical_features)

    def to_dict(self):
        return {
            "numeric_features": list(self.numeric_features),
            "categorical_features": [
                {"name": c.name, "cardinality": c.cardinality} for c in self.categorical_features
            ],
            "vital_channels": list(self.vital_channels),
            "image_length": self.image_length,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            numeric_features=tuple(payload["numeric_features"]),
            categorical_features=tuple(
                CategoricalFeature(c["name"], int(c["cardinality"]))
                for c in payload.get("categorical_features", [])
            ),
            vital_channels=tuple(payload["vital_channels"]),
            image_length=int(payload["image_length"]),
        )

    def validate(self, record):
        """Raise SchemaError naming the record when it breaks any invariant."""
        rid = record.id
        static = record.static
        if static.numeric.shape != (len(self.numeric_features),):
            raise SchemaError(
                f"expected {len(self.numeric_features)} numeric features, got {static.numeric.shape}", rid
            )
        bad = ~np.isfinite(static.numeric)
        if bad.any():
            name = self.numeric_features[int(np.flatnonzero(bad)[0])]
            raise SchemaError(f"non-finite static feature {name!r}", rid)
        if len(static.categorical) != len(self.categorical_features):
            raise SchemaError("categorical feature count does not match schema", rid)
        for code, feature in zip(static.categorical, self.categorical_features):
            if not 0 <= code < feature.cardinality:
                raise SchemaError(
                    f"categorical {feature.name!r} code {code} outside [0, {feature.cardinality})", rid
                )

        vitals = record.vitals
        if vitals.values.shape[1] != len(self.vital_channels):
            raise SchemaError(
                f"expected {len(self.vital_channels)} vital channels, got {vitals.values.shape[1]}", rid
            )
        present = vitals.values[vitals.mask]
        if not np.isfinite(present).all():
            rows, cols = np.nonzero(vitals.mask & ~np.isfinite(vitals.values))
            raise SchemaError(
                f"non-finite vital value in channel {self.vital_channels[int(cols[0])]!r} "
                f"at step {int(rows[0])}",
                rid,
            )
        if not np.isfinite(vitals.t0):
            raise SchemaError("non-finite vitals t0", rid)

        for note in record.notes:
            if not math.isfinite(note.timestamp):
                raise SchemaError("non-finite note timestamp", rid)
            if any(not isinstance(token, str) or not token for token in note.tokens):
                raise SchemaError("note tokens must be non-empty strings", rid)

        if record.image is not None:
            if record.image.shape != (self.image_length,):
                raise SchemaError(
                    f"image vector length {record.image.shape} differs from {self.image_length}", rid
                )
            if not np.isfinite(record.image).all():
                raise SchemaError("non-finite image feature", rid)

        record.labels.validate(rid)


@dataclass(frozen=True, eq=False)
class StaticVector:
    numeric: np.ndarray
    categorical: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "numeric", np.asarray(self.numeric, dtype=np.float64))
        object.__setattr__(self, "categorical", tuple(int(c) for c in self.categorical))

    def __eq__(self, other):
        if not isinstance(other, StaticVector):
            return NotImplemented
        return np.array_equal(self.numeric, other.numeric) and self.categorical == other.categorical

    __hash__ = None


@dataclass(frozen=True, eq=False)
class VitalsSeries:
    values: np.ndarray
    mask: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape[0] < 1:
            raise SchemaError(f"vitals must be a non-empty T x F matrix, got shape {values.shape}")
        if mask.shape != values.shape:
            raise SchemaError("vitals mask shape differs from values shape")
        values = np.where(mask, values, MASKED_VALUE)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "t0", float(self.t0))

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def hours(self):
        return self.t0 + np.arange(self.length, dtype=np.float64)

    def truncate(self, end_hour):
        """Steps strictly before end_hour, or None when nothing would remain."""
        keep = int(np.count_nonzero(self.hours < end_hour))
        if keep == 0:
            return None
        if keep == self.length:
            return self
        return VitalsSeries(self.values[:keep], self.mask[:keep], self.t0)

    def __eq__(self, other):
        if not isinstance(other, VitalsSeries):
            return NotImplemented
        return (
            self.t0 == other.t0
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class NoteDoc:
    tokens: tuple
    timestamp: float

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "timestamp", float(self.timestamp))


@dataclass(frozen=True)
class Labels:
    sepsis: int | None = None
    sepsis_onset: float | None = None
    mortality: int | None = None
    antibiotic_class: str | None = None
    antibiotic_hour: float | None = None

    def validate(self, record_id=None):
        if self.sepsis is not None and self.sepsis not in (0, 1):
            raise SchemaError("sepsis flag must be 0 or 1", record_id)
        if self.sepsis_onset is not None:
            if not math.isfinite(self.sepsis_onset) or self.sepsis_onset < 0:
                raise SchemaError("sepsis onset must be a finite hour >= 0", record_id)
            if self.sepsis != 1:
                raise SchemaError("sepsis onset given for a record not flagged septic", record_id)
        elif self.sepsis == 1:
            raise SchemaError("septic record lacks an onset hour", record_id)
        if self.mortality is not None and self.mortality not in (0, 1):
            raise SchemaError("mortality label must be 0 or 1", record_id)
        if (self.antibiotic_class is None) != (self.antibiotic_hour is None):
            raise SchemaError("antibiotic hour present iff antibiotic class present", record_id)
        if self.antibiotic_class is not None:
            if self.antibiotic_class not in ANTIBIOTIC_CLASSES:
                raise SchemaError(f"unknown antibiotic class {self.antibiotic_class!r}", record_id)
            if not math.isfinite(self.antibiotic_hour):
                raise SchemaError("non-finite antibiotic hour", record_id)

    def for_task(self, task):
        """Integer class id for the task, or None when the record carries no such label."""
        if task == "detection":
            return self.sepsis
        if task == "mortality":
            return self.mortality
        if task == "antibiotic":
            if self.antibiotic_class is None:
                return None
            return ANTIBIOTIC_CLASSES.index(self.antibiotic_class)
        task_classes(task)


@dataclass(frozen=True, eq=False)
class PatientRecord:
    id: str
    static: StaticVector
    vitals: VitalsSeries
    notes: tuple = ()
    image: np.ndarray | None = None
    labels: Labels = field(default_factory=Labels)
    excluded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "notes", tuple(self.notes))
        if self.image is not None:
            object.__setattr__(self, "image", np.asarray(self.image, dtype=np.float64))

    def replace(self, **changes):
        return replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        if (self.image is None) != (other.image is None):
            return False
        if self.image is not None and not np.array_equal(self.image, other.image):
            return False
        return (
            self.id == other.id
            and self.static == other.static
            and self.vitals == other.vitals
            and self.notes == other.notes
            and self.labels == other.labels
            and self.excluded == other.excluded
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Cohort:
    schema: CohortSchema
    records: tuple = ()
    provenance: str = ""
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for record in self.records:
            if record.id in seen:
                raise SchemaError("duplicate record id", record.id)
            seen.add(record.id)
            self.schema.validate(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, index):
        return self.records[index]

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.provenance == other.provenance
            and self.seed == other.seed
            and self.records == other.records
        )

    __hash__ = None

    def with_records(self, records):
        return Cohort(self.schema, tuple(records), self.provenance, self.seed)

    def subset(self, indices):
        return self.with_records(self.records[int(i)] for i in indices)

    def task_records(self, task):
        return self.with_records(r for r in self.records if r.labels.for_task(task) is not None)

    def labels(self, task):
        task_classes(task)
        values = []
        for record in self.records:
            label = record.labels.for_task(task)
            if label is None:
                raise SchemaError(f"missing {task} label", record.id)
            values.append(label)
        return np.asarray(values, dtype=np.int64)


# Wire format

def record_to_dict(record):
    vitals = record.vitals
    payload = {
        "id": record.id,
        "static": {
            "numeric": record.static.numeric.tolist(),
            "categorical": list(record.static.categorical),
        },
        "vitals": {
            "values": vitals.values.tolist(),
            "mask": vitals.mask.astype(np.int8).tolist(),
            "t0": vitals.t0,
        },
        "notes": [{"tokens": list(n.tokens), "timestamp": n.timestamp} for n in record.notes],
        "labels": {k: v for k, v in vars(record.labels).items() if v is not None},
    }
    if record.image is not None:
        payload["image"] = record.image.tolist()
    if record.excluded:
        payload["excluded"] = True
    return payload


def record_from_dict(payload):
    labels = payload.get("labels", {})
    image = payload.get("image")
    return PatientRecord(
        id=str(payload["id"]),
        static=StaticVector(
            numeric=payload["static"]["numeric"],
            categorical=payload["static"].get("categorical", []),
        ),
        vitals=VitalsSeries(
            values=np.asarray(payload["vitals"]["values"], dtype=np.float64),
            mask=np.asarray(payload["vitals"]["mask"], dtype=bool),
            t0=payload["vitals"].get("t0", 0.0),
        ),
        notes=tuple(NoteDoc(n.get("tokens", []), n["timestamp"]) for n in payload.get("notes", [])),
        image=None if image is None else np.asarray(image, dtype=np.float64),
        labels=Labels(**labels),
        excluded=bool(payload.get("excluded", False)),
    )


# Save cohort logic
def save_cohort(cohort, path):
    path = Path(path)
    header = {"format_version": FORMAT_VERSION, "schema": cohort.schema.to_dict(),
              "provenance": cohort.provenance}
    if cohort.seed is not None:
        header["seed"] = cohort.seed
    lines = [json.dumps(header, allow_nan=False)]
    for record in cohort.records:
        cohort.schema.validate(record)
        lines.append(json.dumps(record_to_dict(record), allow_nan=False))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write cohort to {path}: {exc}") from exc
    logger.info("wrote %d records to %s", len(cohort), path)


# Load cohort logic
def load_cohort(path):
    path = Path(path)
    with path.open(encoding="utf-8") as handle:
        lines = [line for line in handle.read().split("\n") if line.strip()]
    if not lines:
        raise CohortFormatError("missing header line", line=1)

    try:
        header = json.loads(lines[0])
        if header.get("format_version") != FORMAT_VERSION:
            raise CohortFormatError(f"unsupported format_version {header.get('format_version')!r}", line=1)
        schema = CohortSchema.from_dict(header["schema"])
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, CohortFormatError):
            raise
        raise CohortFormatError(f"malformed header: {exc}", line=1) from exc

    records = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            record = record_from_dict(json.loads(line))
        except SchemaError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise CohortFormatError(f"malformed record: {exc}", line=number) from exc
        schema.validate(record)
        records.append(record)

    return Cohort(schema, tuple(records), header.get("provenance", ""), header.get("seed"))


def _allocate(count, fractions):
    # largest remainder keeps every part within one record of exact proportion
    exact = np.asarray(fractions) * count
    sizes = np.floor(exact + 1e-9).astype(np.int64)
    remainder = count - int(sizes.sum())
    order = sorted(range(len(fractions)), key=lambda s: (-(exact[s] - sizes[s]), s))
    for s in order[:remainder]:
        sizes[s] += 1
    return sizes


# Split cohort logic
def split_cohort(cohort, fractions, stratify_on, seed):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise SplitError("fractions must be (train, val, test)")
    if any(f <= 0 for f in fractions):
        raise SplitError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {sum(fractions)!r}")

    try:
        labels = cohort.labels(stratify_on)
    except SchemaError as exc:
        raise SplitError(f"cannot stratify on {stratify_on!r}: {exc}") from exc

    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        sizes = _allocate(len(members), fractions)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        for s in range(3):
            parts[s].extend(members[bounds[s]:bounds[s + 1]].tolist())

    return tuple(cohort.subset(sorted(part)) for part in parts)

"""Synthetic multimodal cohorts from a latent-variable process, with exact Bayes posteriors.

Latents per record: severity ``z ~ N(0, 1)``, a pathogen category and a radiographic finding.
Every observed modality is conditionally independent given the latents, so the posterior over
any task label is a one-dimensional integral over ``z`` times a finite sum over pathogen and
finding, evaluated by the trapezoid rule on a fixed grid.
"""
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path
import logging
import json

import numpy as np
from scipy import optimize, special, stats
from scipy.integrate import trapezoid

from sepsis_fusion.cohort import (
    ANTIBIOTIC_CLASSES,
    CategoricalFeature,
    Cohort,
    CohortSchema,
    Labels,
    NoteDoc,
    PatientRecord,
    StaticVector,
    VitalsSeries,
    task_classes,
)
from sepsis_fusion.config import Config
from sepsis_fusion.errors import GenSpecError, SchemaError
from sepsis_fusion.utils.seeding import content_hash, substream

logger = logging.getLogger(__name__)

PATHOGENS = ("GRAM_POS", "GRAM_NEG", "RESISTANT", "NONE")
FINDINGS = ("clear", "consolidation", "effusion", "infiltrate")
TASKS = ("detection", "mortality", "antibiotic")
REPORT_TOKEN = "cxr"

GRID = np.linspace(-8.0, 8.0, 2001)

# note-signal score per pathogen: infected +1, none -1
NOTE_SIGNAL = np.array([1.0, 1.0, 1.0, -1.0])
IMITATION_TARGET = ("VANC", "CEFEPIME", "MEROPENEM", "PIP_TAZO")

# finding propensities per pathogen, scaled by finding_loading
FINDING_AFFINITY = np.array([
    [0.0, 1.0, 0.5, 0.0],
    [0.0, 0.5, 0.0, 1.0],
    [0.0, 1.0, 0.0, 1.0],
    [1.0, 0.0, 0.0, 0.0],
])

STATIC_FEATURES = {
    "age": {"mean": 65.0, "scale": 15.0, "weight": 0.3},
    "severity_score": {"mean": 6.0, "scale": 3.0, "weight": 1.0},
    "comorbidity_index": {"mean": 3.0, "scale": 2.0, "weight": 0.6},
}
VITAL_CHANNELS = {
    "heart_rate": {"mean": 85.0, "scale": 12.0, "direction": 1.0},
    "mean_arterial_pressure": {"mean": 75.0, "scale": 10.0, "direction": -1.0},
    "temperature": {"mean": 37.2, "scale": 0.6, "direction": 1.0},
    "respiratory_rate": {"mean": 18.0, "scale": 4.0, "direction": 1.0},
    "lactate": {"mean": 1.5, "scale": 0.8, "direction": 1.0},
}

BACKGROUND_TOKENS = (
    "patient", "admitted", "overnight", "reviewed", "plan", "continue", "monitor", "family",
    "discussed", "labs", "pending", "room", "air", "bed", "nursing", "ordered", "fluids",
    "assessment", "history", "exam", "chart", "resting", "seen", "today",
)
WORSENING_TOKENS = (
    "hypotension", "tachycardia", "tachypnea", "confusion", "lethargic", "mottled", "oliguria",
    "rigors", "febrile", "hypoxia",
)
IMPROVING_TOKENS = ("alert", "ambulating", "tolerating", "comfortable", "afebrile", "oriented")
PATHOGEN_TOKENS = {
    "GRAM_POS": ("mrsa", "mssa", "streptococcus", "enterococcus"),
    "GRAM_NEG": ("ecoli", "klebsiella", "pseudomonas", "proteus"),
    "RESISTANT": ("esbl", "cre", "vre", "carbapenemase"),
    "NONE": ("viral", "sterile", "uninfected", "colonized"),
}
DRUG_NAMES = {
    "VANC": ("vancomycin", "vanc"),
    "PIP_TAZO": ("zosyn", "piperacillin", "tazobactam"),
    "MEROPENEM": ("meropenem", "merrem"),
    "CEFEPIME": ("cefepime", "maxipime"),
}
SEPSIS_EVENT_TOKENS = ("septic", "shock", "bundle", "initiated")
ANTIBIOTIC_EVENT_TOKENS = ("started", "empirically")


@dataclass(frozen=True)
class GenSpec:
    n_static: int = 3
    n_vital_channels: int = 5
    series_length: int = 48
    image_length: int = 16
    n_units: int = 4
    pathogen_prior: tuple = (0.30, 0.25, 0.07, 0.38)
    static_loading: float = 1.0
    static_noise: float = 1.0
    unit_loading: float = 0.8
    vitals_loading: float = 0.6
    vitals_noise: float = 1.0
    missing_rate: float = 0.15
    note_severity_loading: float = 0.5
    note_pathogen_loading: float = 1.5
    notes_per_record: tuple = (2, 6)
    tokens_per_note: tuple = (8, 20)
    finding_loading: float = 2.0
    report_rate: float = 0.9
    image_rate: float = 0.9
    image_loading: float = 2.0
    image_noise: float = 1.0
    redundancy: float = 0.0
    interaction: float = 0.5
    label_noise: float = 0.5
    detection_prevalence: float = 0.332
    mortality_loading: float = 1.5
    mortality_prevalence: float = 0.204
    imitation_noise: float = 0.15
    deviation_prior: tuple = (0.25, 0.35, 0.15, 0.25)
    escalation_loading: float = 0.5
    onset_window: tuple = (6.0, 40.0)
    administration_window: tuple = (6.0, 36.0)
    drug_token_rate: float = 0.1
    post_event_rate: float = 0.3
    tasks: tuple = TASKS
    structure_seed: int = 1729

    def __post_init__(self):
        for name in ("pathogen_prior", "deviation_prior", "notes_per_record", "tokens_per_note",
                     "onset_window", "administration_window", "tasks"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        for name in ("n_static", "n_vital_channels", "series_length", "image_length", "n_units"):
            if int(getattr(self, name)) < 1:
                raise GenSpecError(f"{name} must be >= 1")
        for name in ("pathogen_prior", "deviation_prior"):
            prior = np.asarray(getattr(self, name), dtype=np.float64)
            if prior.shape != (4,) or (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-9:
                raise GenSpecError(f"{name} must be a length-4 vector on the simplex")
        if min(self.deviation_prior) <= 0:
            raise GenSpecError("deviation_prior entries must be positive")
        if not 0.0 <= self.redundancy <= 1.0:
            raise GenSpecError(f"redundancy must lie in [0, 1], got {self.redundancy}")
        for name in ("static_noise", "vitals_noise", "image_noise"):
            if not getattr(self, name) > 0:
                raise GenSpecError(f"{name} must be > 0")
        if self.label_noise < 0:
            raise GenSpecError("label_noise must be >= 0")
        for name in ("detection_prevalence", "mortality_prevalence"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise GenSpecError(f"{name} must lie in (0, 1)")
        for name in ("missing_rate", "report_rate", "image_rate", "imitation_noise",
                     "drug_token_rate", "post_event_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise GenSpecError(f"{name} must lie in [0, 1]")
        for name in ("notes_per_record", "tokens_per_note"):
            low, high = getattr(self, name)
            if low < 0 or high < low:
                raise GenSpecError(f"{name} must be an ordered non-negative range")
        for name in ("onset_window", "administration_window"):
            low, high = getattr(self, name)
            if not 0.0 < low < high or not np.isfinite(high):
                raise GenSpecError(f"{name} must be an increasing range of positive hours, got {(low, high)}")
        if not (np.isfinite(self.interaction) and self.interaction >= 0):
            raise GenSpecError(f"interaction must be >= 0, got {self.interaction}")
        unknown = set(self.tasks) - set(TASKS)
        if unknown or not self.tasks:
            raise GenSpecError(f"tasks must be a non-empty subset of {TASKS}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise GenSpecError(f"unknown GenSpec fields: {unknown}")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise GenSpecError(str(exc)) from exc

    def with_overrides(self, **overrides):
        payload = self.to_dict()
        payload.update(overrides)
        return GenSpec.from_dict(payload)

    @property
    def digest(self):
        return content_hash(self.to_dict())


def load_genspec(source):
    """GenSpec from a JSON file path or the name of a shipped preset."""
    path = Path(source)
    if not path.exists():
        name = str(source).removesuffix(".json")
        path = Config.PRESETS_DIR / f"{name}.json"
        if not path.exists():
            raise GenSpecError(f"no GenSpec file or preset named {source!r}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise GenSpecError(f"{path}: {exc}") from exc
    return GenSpec.from_dict(payload)


def save_genspec(spec, path):
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Latents:
    severity: float
    pathogen: int
    finding: int


class _Structure:
    """Fixed model structure derived from a spec: vocabulary, loadings, embeddings."""

    def __init__(self, spec):
        rng = np.random.default_rng(spec.structure_seed)

        self.static_names, self.static_mean, self.static_scale, self.static_weight = [], [], [], []
        for j in range(spec.n_static):
            name, info = (list(STATIC_FEATURES.items())[j] if j < len(STATIC_FEATURES)
                          else (f"lab_{j}", {"mean": 0.0, "scale": 1.0, "weight": 0.5}))
            self.static_names.append(name)
            self.static_mean.append(info["mean"])
            self.static_scale.append(info["scale"])
            self.static_weight.append(info["weight"])
        self.static_mean = np.array(self.static_mean)
        self.static_scale = np.array(self.static_scale)
        self.static_weight = np.array(self.static_weight)

        self.channel_names, self.vital_mean, self.vital_scale, self.vital_direction = [], [], [], []
        for c in range(spec.n_vital_channels):
            name, info = (list(VITAL_CHANNELS.items())[c] if c < len(VITAL_CHANNELS)
                          else (f"vital_{c}", {"mean": 0.0, "scale": 1.0, "direction": 1.0}))
            self.channel_names.append(name)
            self.vital_mean.append(info["mean"])
            self.vital_scale.append(info["scale"])
            self.vital_direction.append(info["direction"])
        self.vital_mean = np.array(self.vital_mean)
        self.vital_scale = np.array(self.vital_scale)
        self.vital_direction = np.array(self.vital_direction)

        pathogen_vocab = tuple(t for p in PATHOGENS for t in PATHOGEN_TOKENS[p])
        self.vocab = BACKGROUND_TOKENS + WORSENING_TOKENS + IMPROVING_TOKENS + pathogen_vocab
        self.token_index = {t: i for i, t in enumerate(self.vocab)}
        self.base = np.concatenate([
            np.zeros(len(BACKGROUND_TOKENS)),
            np.full(len(WORSENING_TOKENS) + len(IMPROVING_TOKENS), -1.0),
            np.full(len(pathogen_vocab), -2.5),
        ])
        self.severity_direction = np.concatenate([
            np.zeros(len(BACKGROUND_TOKENS)),
            np.ones(len(WORSENING_TOKENS)),
            -np.ones(len(IMPROVING_TOKENS)),
            np.zeros(len(pathogen_vocab)),
        ])
        self.pathogen_affinity = np.array(
            [[1.0 if t in PATHOGEN_TOKENS[p] else 0.0 for t in self.vocab] for p in PATHOGENS]
        )

        self.finding_logprob = special.log_softmax(spec.finding_loading * FINDING_AFFINITY, axis=1)
        self.unit_logprob = special.log_softmax(
            spec.unit_loading * rng.standard_normal((len(PATHOGENS), spec.n_units)), axis=1
        )
        self.finding_embedding = rng.standard_normal((len(FINDINGS), spec.image_length))
        self.pathogen_embedding = (
            rng.standard_normal((len(PATHOGENS), spec.image_length)) / np.sqrt(spec.image_length)
        )
        with np.errstate(divide="ignore"):
            self.log_pathogen_prior = np.log(np.asarray(spec.pathogen_prior))
        self.log_deviation_prior = np.log(np.asarray(spec.deviation_prior))
        self.imitation_target = np.array([ANTIBIOTIC_CLASSES.index(c) for c in IMITATION_TARGET])

    def image_mean(self, spec, pathogen, finding):
        return (spec.redundancy * self.finding_embedding[finding]
                + (1.0 - spec.redundancy) * spec.image_loading * self.pathogen_embedding[pathogen])

    def token_logits(self, spec, severity, pathogen):
        return (self.base + spec.note_severity_loading * severity * self.severity_direction
                + spec.note_pathogen_loading * self.pathogen_affinity[pathogen])


@lru_cache(maxsize=32)
def _structure(spec):
    return _Structure(spec)


@lru_cache(maxsize=32)
def label_parameters(spec):
    """Detection threshold and mortality intercept hitting the prevalence targets."""
    kappa, noise = spec.interaction, spec.label_noise
    prior = np.asarray(spec.pathogen_prior)
    spread = np.sqrt((1.0 + kappa * NOTE_SIGNAL) ** 2 + noise ** 2)
    spread = np.maximum(spread, 1e-12)

    def detection_gap(theta):
        return float(np.sum(prior * stats.norm.sf(theta / spread))) - spec.detection_prevalence

    log_phi = stats.norm.logpdf(GRID)

    def mortality_gap(bias):
        rate = trapezoid(np.exp(log_phi) * special.expit(spec.mortality_loading * GRID + bias), GRID)
        return float(rate) - spec.mortality_prevalence

    try:
        theta = optimize.brentq(detection_gap, -40.0, 40.0, xtol=1e-14)
        bias = optimize.brentq(mortality_gap, -40.0, 40.0, xtol=1e-14)
    except ValueError as exc:
        raise GenSpecError(f"prevalence targets unreachable: {exc}") from exc
    return theta, bias


def cohort_schema(spec):
    structure = _structure(spec)
    return CohortSchema(
        numeric_features=tuple(structure.static_names),
        categorical_features=(CategoricalFeature("admission_unit", spec.n_units),),
        vital_channels=tuple(structure.channel_names),
        image_length=spec.image_length,
    )


def _categorical(rng, probs, size=None):
    cdf = np.cumsum(probs)
    draw = rng.random(size)
    return np.minimum(np.searchsorted(cdf, draw * cdf[-1], side="right"), len(probs) - 1)


def _capitalise(rng, token):
    style = int(rng.integers(3))
    return (token, token.title(), token.upper())[style]


def _draw_record(spec, seed, index):
    structure = _structure(spec)
    theta, bias = label_parameters(spec)
    rng = substream(seed, index)
    T = spec.series_length

    severity = float(rng.standard_normal())
    pathogen = int(_categorical(rng, np.asarray(spec.pathogen_prior)))
    finding = int(_categorical(rng, np.exp(structure.finding_logprob[pathogen])))

    standard = (spec.static_loading * structure.static_weight * severity
                + spec.static_noise * rng.standard_normal(spec.n_static))
    numeric = np.round(structure.static_mean + structure.static_scale * standard, 6)
    unit = int(_categorical(rng, np.exp(structure.unit_logprob[pathogen])))

    trend = (np.arange(T, dtype=np.float64)[:, None] + 1.0) / T
    standard = (spec.vitals_loading * structure.vital_direction * severity * trend
                + spec.vitals_noise * rng.standard_normal((T, spec.n_vital_channels)))
    values = np.round(structure.vital_mean + structure.vital_scale * standard, 6)
    mask = rng.random((T, spec.n_vital_channels)) >= spec.missing_rate

    token_probs = special.softmax(structure.token_logits(spec, severity, pathogen))
    notes = []
    n_notes = int(rng.integers(spec.notes_per_record[0], spec.notes_per_record[1] + 1))
    for _ in range(n_notes):
        timestamp = round(float(rng.uniform(0.0, T)), 2)
        length = int(rng.integers(spec.tokens_per_note[0], spec.tokens_per_note[1] + 1))
        ids = _categorical(rng, token_probs, size=length)
        notes.append([timestamp, [structure.vocab[i] for i in ids]])

    report = None
    if rng.random() < spec.report_rate:
        report = NoteDoc((REPORT_TOKEN, FINDINGS[finding]), round(float(rng.uniform(0.0, T)), 2))

    image = None
    if rng.random() < spec.image_rate:
        noise = np.sqrt(1.0 - spec.redundancy) * spec.image_noise
        image = structure.image_mean(spec, pathogen, finding) + noise * rng.standard_normal(spec.image_length)

    signal = severity * (1.0 + spec.interaction * NOTE_SIGNAL[pathogen])
    sepsis = int(signal + spec.label_noise * rng.standard_normal() > theta)
    onset = round(float(rng.uniform(*spec.onset_window)), 2)
    mortality = int(rng.random() < special.expit(spec.mortality_loading * severity + bias))
    deviation = special.softmax(structure.log_deviation_prior
                                + spec.escalation_loading * severity * np.eye(4)[2])
    deviates = rng.random() < spec.imitation_noise
    deviation_choice = int(_categorical(rng, deviation))
    antibiotic = deviation_choice if deviates else int(structure.imitation_target[pathogen])
    administration = round(float(rng.uniform(*spec.administration_window)), 2)
    drug_class = ANTIBIOTIC_CLASSES[antibiotic]

    # contaminants: treatment names inside notes, notes written after the event
    for note in notes:
        if rng.random() < spec.drug_token_rate:
            drug = DRUG_NAMES[drug_class][int(rng.integers(len(DRUG_NAMES[drug_class])))]
            note[1].insert(int(rng.integers(len(note[1]) + 1)), _capitalise(rng, drug))
    events = []
    if "detection" in spec.tasks and sepsis:
        events.append((onset, SEPSIS_EVENT_TOKENS))
    if "antibiotic" in spec.tasks:
        events.append((administration, (DRUG_NAMES[drug_class][0],) + ANTIBIOTIC_EVENT_TOKENS))
    for hour, tokens in events:
        if rng.random() < spec.post_event_rate:
            notes.append([round(hour + float(rng.uniform(0.0, 6.0)), 2), list(tokens)])

    note_docs = [NoteDoc(tuple(tokens), timestamp) for timestamp, tokens in notes]
    if report is not None:
        note_docs.append(report)
    note_docs.sort(key=lambda n: n.timestamp)

    labels = Labels(
        sepsis=sepsis if "detection" in spec.tasks else None,
        sepsis_onset=onset if "detection" in spec.tasks and sepsis else None,
        mortality=mortality if "mortality" in spec.tasks else None,
        antibiotic_class=drug_class if "antibiotic" in spec.tasks else None,
        antibiotic_hour=administration if "antibiotic" in spec.tasks else None,
    )
    record = PatientRecord(
        id=f"P{index:06d}",
        static=StaticVector(numeric, (unit,)),
        vitals=VitalsSeries(values, mask, 0.0),
        notes=tuple(note_docs),
        image=image,
        labels=labels,
    )
    return record, Latents(severity, pathogen, finding)


# Generate cohort logic
def generate_cohort(spec, n, seed):
    if n < 0:
        raise GenSpecError(f"cohort size must be >= 0, got {n}")
    spec.validate()
    records = [_draw_record(spec, seed, index)[0] for index in range(n)]
    logger.info("generated %d records (seed %d, genspec %s)", n, seed, spec.digest[:12])
    return Cohort(cohort_schema(spec), tuple(records), f"genspec:{spec.digest}", seed)


def cohort_latents(spec, n, seed):
    """Latent draws behind generate_cohort(spec, n, seed), for audits and tests."""
    latents = [_draw_record(spec, seed, index)[1] for index in range(n)]
    return {
        "severity": np.array([l.severity for l in latents]),
        "pathogen": np.array([l.pathogen for l in latents], dtype=np.int64),
        "finding": np.array([l.finding for l in latents], dtype=np.int64),
    }


# Oracle

@dataclass(frozen=True)
class _Evidence:
    quad_a: float
    quad_b: float
    per_pathogen: np.ndarray
    token_counts: np.ndarray
    n_tokens: float


def _evidence(record, spec):
    structure = _structure(spec)
    if (record.static.numeric.shape != (spec.n_static,) or len(record.static.categorical) != 1
            or record.vitals.values.shape[1] != spec.n_vital_channels
            or (record.image is not None and record.image.shape != (spec.image_length,))):
        raise SchemaError("record does not conform to the GenSpec schema", record.id)

    # static + vitals: Gaussian in z, collapsed to a quadratic
    x = (record.static.numeric - structure.static_mean) / structure.static_scale
    w = spec.static_loading * structure.static_weight
    quad_a = float(w @ w) / spec.static_noise ** 2
    quad_b = float(w @ x) / spec.static_noise ** 2

    vitals = record.vitals
    trend = (vitals.hours[:, None] + 1.0) / spec.series_length
    slope = spec.vitals_loading * structure.vital_direction * trend
    standard = (vitals.values - structure.vital_mean) / structure.vital_scale
    slope = np.where(vitals.mask, slope, 0.0)
    standard = np.where(vitals.mask, standard, 0.0)
    quad_a += float(np.sum(slope * slope)) / spec.vitals_noise ** 2
    quad_b += float(np.sum(slope * standard)) / spec.vitals_noise ** 2

    per_pathogen = structure.log_pathogen_prior + structure.unit_logprob[:, record.static.categorical[0]]

    counts = np.zeros(len(structure.vocab))
    finding_term = np.zeros(len(FINDINGS))
    for note in record.notes:
        if note.tokens and note.tokens[0] == REPORT_TOKEN:
            if len(note.tokens) > 1 and note.tokens[1] in FINDINGS:
                observed = FINDINGS.index(note.tokens[1])
                finding_term = np.where(np.arange(len(FINDINGS)) == observed, finding_term, -np.inf)
            continue
        for token in note.tokens:
            index = structure.token_index.get(token)
            if index is not None:
                counts[index] += 1.0

    # finding and image depend on (pathogen, finding); marginalise the finding here
    joint = structure.finding_logprob + finding_term[None, :]
    if record.image is not None:
        for p in range(len(PATHOGENS)):
            for r in range(len(FINDINGS)):
                mean = structure.image_mean(spec, p, r)
                if spec.redundancy >= 1.0:
                    if not np.allclose(record.image, mean, rtol=0.0, atol=1e-9):
                        joint[p, r] = -np.inf
                else:
                    variance = (1.0 - spec.redundancy) * spec.image_noise ** 2
                    joint[p, r] += -0.5 * float(np.sum((record.image - mean) ** 2)) / variance
    per_pathogen = per_pathogen + special.logsumexp(joint, axis=1)

    return _Evidence(quad_a, quad_b, per_pathogen, counts, float(counts.sum()))


def _token_normaliser(spec, z):
    structure = _structure(spec)
    logits = (structure.base[None, None, :]
              + spec.note_severity_loading * z[None, :, None] * structure.severity_direction[None, None, :]
              + spec.note_pathogen_loading * structure.pathogen_affinity[:, None, :])
    return special.logsumexp(logits, axis=2)


@lru_cache(maxsize=32)
def _grid_normaliser(spec):
    return _token_normaliser(spec, GRID)


def _log_likelihood(evidence, spec, z, normaliser):
    structure = _structure(spec)
    counts = evidence.token_counts
    notes = (float(counts @ structure.base)
             + spec.note_severity_loading * z[None, :] * float(counts @ structure.severity_direction)
             + spec.note_pathogen_loading * (structure.pathogen_affinity @ counts)[:, None]
             - evidence.n_tokens * normaliser)
    quadratic = -0.5 * evidence.quad_a * z ** 2 + evidence.quad_b * z
    return evidence.per_pathogen[:, None] + quadratic[None, :] + notes


def _label_likelihood(spec, task, z):
    """P(label = k | z, pathogen) with shape (K, pathogens, len(z))."""
    theta, bias = label_parameters(spec)
    n_path = len(PATHOGENS)
    if task == "detection":
        signal = z[None, :] * (1.0 + spec.interaction * NOTE_SIGNAL[:, None]) - theta
        if spec.label_noise > 0:
            positive = special.ndtr(signal / spec.label_noise)
        else:
            positive = (signal > 0).astype(np.float64)
        return np.stack([1.0 - positive, positive])
    if task == "mortality":
        positive = np.broadcast_to(special.expit(spec.mortality_loading * z + bias), (n_path, len(z)))
        return np.stack([1.0 - positive, positive])
    if task == "antibiotic":
        structure = _structure(spec)
        escalation = np.eye(4)[2][:, None] * spec.escalation_loading * z[None, :]
        deviation = special.softmax(structure.log_deviation_prior[:, None] + escalation, axis=0)
        imitation = np.eye(4)[:, structure.imitation_target]
        return ((1.0 - spec.imitation_noise) * imitation[:, :, None]
                + spec.imitation_noise * deviation[:, None, :])
    task_classes(task)


def _posterior_from_log_weights(log_weights, likelihood, z=None):
    log_weights = log_weights - np.max(log_weights)
    weights = np.exp(log_weights)
    integrand = np.einsum("pg,kpg->kg", weights, likelihood)
    mass = trapezoid(integrand, z, axis=1) if z is not None else integrand.sum(axis=1)
    return mass / mass.sum()


def oracle_posterior(record, spec, task):
    """Exact posterior over task classes for a guarded record drawn from spec."""
    evidence = _evidence(record, spec)
    log_weights = _log_likelihood(evidence, spec, GRID, _grid_normaliser(spec))
    log_weights = log_weights + stats.norm.logpdf(GRID)[None, :]
    return _posterior_from_log_weights(log_weights, _label_likelihood(spec, task, GRID), GRID)


def oracle_prior(spec, task):
    structure = _structure(spec)
    log_weights = structure.log_pathogen_prior[:, None] + stats.norm.logpdf(GRID)[None, :]
    return _posterior_from_log_weights(log_weights, _label_likelihood(spec, task, GRID), GRID)


def oracle_scores(records, spec, task):
    return np.stack([oracle_posterior(record, spec, task) for record in records])


def monte_carlo_posterior(record, spec, task, n_samples=2 ** 20, seed=0, chunk=2 ** 16):
    """Brute-force posterior from scrambled Sobol draws of z with exact sums elsewhere."""
    m = int(np.ceil(np.log2(max(n_samples, 2))))
    uniforms = stats.qmc.Sobol(d=1, scramble=True, seed=seed).random_base2(m)[:, 0]
    z = stats.norm.ppf(np.clip(uniforms, 1e-16, 1.0 - 1e-16))
    evidence = _evidence(record, spec)

    log_weights = np.empty((len(PATHOGENS), len(z)))
    for start in range(0, len(z), chunk):
        part = z[start:start + chunk]
        log_weights[:, start:start + chunk] = _log_likelihood(
            evidence, spec, part, _token_normaliser(spec, part)
        )
    return _posterior_from_log_weights(log_weights, _label_likelihood(spec, task, z))

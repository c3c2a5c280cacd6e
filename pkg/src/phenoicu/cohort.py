"""ICU episodes: data model, JSONL I/O, patient-level splits and a synthetic cohort generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np
from scipy.optimize import brentq
from scipy.signal import lfilter
from scipy.special import expit, logit, ndtr

from .ontology import is_term_id


class CohortError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    kind: str  # "continuous" | "categorical"
    normal_value: float
    low: float
    high: float
    categories: tuple[int, ...] = ()


# Normal values follow the usual benchmark imputation table; ranges are clamps
# for physiologically impossible entries, not clinical reference intervals.
CHANNELS: tuple[ChannelSpec, ...] = (
    ChannelSpec("capillary refill rate", "categorical", 0, 0, 1, (0, 1)),
    ChannelSpec("diastolic blood pressure", "continuous", 59.0, 0.0, 300.0),
    ChannelSpec("fraction inspired oxygen", "continuous", 0.21, 0.21, 1.0),
    ChannelSpec("glasgow coma scale eye opening", "categorical", 4, 1, 4, (1, 2, 3, 4)),
    ChannelSpec("glasgow coma scale motor response", "categorical", 6, 1, 6, (1, 2, 3, 4, 5, 6)),
    ChannelSpec("glasgow coma scale verbal response", "categorical", 5, 1, 5, (1, 2, 3, 4, 5)),
    ChannelSpec("glasgow coma scale total", "categorical", 15, 3, 15, tuple(range(3, 16))),
    ChannelSpec("glucose", "continuous", 128.0, 10.0, 2000.0),
    ChannelSpec("heart rate", "continuous", 86.0, 0.0, 350.0),
    ChannelSpec("height", "continuous", 170.0, 40.0, 250.0),
    ChannelSpec("mean blood pressure", "continuous", 77.0, 0.0, 300.0),
    ChannelSpec("oxygen saturation", "continuous", 98.0, 0.0, 100.0),
    ChannelSpec("respiratory rate", "continuous", 19.0, 0.0, 100.0),
    ChannelSpec("systolic blood pressure", "continuous", 118.0, 0.0, 375.0),
    ChannelSpec("temperature", "continuous", 37.0, 25.0, 45.0),
    ChannelSpec("weight", "continuous", 81.0, 1.0, 400.0),
    ChannelSpec("pH", "continuous", 7.4, 6.3, 8.4),
)
CHANNEL_NAMES: tuple[str, ...] = tuple(c.name for c in CHANNELS)


@dataclass
class Note:
    hour: int
    note_id: str
    terms: list[str] | None = None
    text: str | None = None


@dataclass
class Episode:
    patient_id: str
    episode_id: str
    length_hours: int
    channels: dict[str, list]
    notes: list[Note] = field(default_factory=list)
    died_in_hospital: bool = False
    death_hour: int | None = None
    cohort_tags: list[str] = field(default_factory=list)

    def validate(self, line: int | None = None) -> None:
        if not isinstance(self.length_hours, int) or self.length_hours < 1:
            raise CohortError(f"{self.episode_id}: length_hours must be an integer >= 1", line)
        if self.death_hour is not None:
            if not self.died_in_hospital:
                raise CohortError(f"{self.episode_id}: death_hour set for a survivor", line)
            if self.death_hour < 0 or self.death_hour > self.length_hours:
                raise CohortError(f"{self.episode_id}: death_hour {self.death_hour} outside "
                                  f"[0, {self.length_hours}]", line)
        unknown = set(self.channels) - set(CHANNEL_NAMES)
        if unknown:
            raise CohortError(f"{self.episode_id}: unknown channels {sorted(unknown)}", line)
        for name, values in self.channels.items():
            if len(values) != self.length_hours:
                raise CohortError(f"{self.episode_id}: channel {name!r} has {len(values)} values, "
                                  f"expected {self.length_hours}", line)
        for note in self.notes:
            if not 0 <= note.hour < self.length_hours:
                raise CohortError(f"{self.episode_id}: note {note.note_id} hour {note.hour} outside stay", line)
            for t in note.terms or ():
                if not is_term_id(t):
                    raise CohortError(f"{self.episode_id}: malformed term id {t!r}", line)

    def to_record(self) -> dict:
        notes = []
        for n in self.notes:
            rec = {"hour": n.hour, "note_id": n.note_id, "terms": n.terms if n.terms is not None else []}
            if n.text is not None:
                rec["text"] = n.text
            notes.append(rec)
        return {
            "patient_id": self.patient_id,
            "episode_id": self.episode_id,
            "length_hours": self.length_hours,
            "channels": {name: self.channels[name] for name in CHANNEL_NAMES if name in self.channels},
            "notes": notes,
            "died_in_hospital": self.died_in_hospital,
            "death_hour": self.death_hour,
            "cohort_tags": list(self.cohort_tags),
        }


_REQUIRED = ("patient_id", "episode_id", "length_hours", "channels", "died_in_hospital")


def episode_from_record(rec: dict, line: int | None = None) -> Episode:
    if not isinstance(rec, dict):
        raise CohortError("episode record must be an object", line)
    for key in _REQUIRED:
        if key not in rec:
            raise CohortError(f"missing field {key!r}", line)
    if not isinstance(rec["channels"], dict):
        raise CohortError("'channels' must be an object", line)
    if not isinstance(rec["died_in_hospital"], bool):
        raise CohortError("'died_in_hospital' must be a boolean", line)
    length = rec["length_hours"]
    if not isinstance(length, int) or isinstance(length, bool):
        raise CohortError("'length_hours' must be an integer", line)
    death = rec.get("death_hour")
    if death is not None and (not isinstance(death, int) or isinstance(death, bool)):
        raise CohortError("'death_hour' must be an integer or null", line)
    notes = []
    for n in rec.get("notes", []):
        if not isinstance(n, dict) or "hour" not in n or "note_id" not in n:
            raise CohortError("each note needs 'hour' and 'note_id'", line)
        if not isinstance(n["hour"], int):
            raise CohortError("note hour must be an integer", line)
        notes.append(Note(hour=n["hour"], note_id=str(n["note_id"]),
                          terms=list(n.get("terms") or []), text=n.get("text")))
    for name, values in rec["channels"].items():
        if not isinstance(values, list):
            raise CohortError(f"channel {name!r} must be a list", line)
    ep = Episode(
        patient_id=str(rec["patient_id"]),
        episode_id=str(rec["episode_id"]),
        length_hours=length,
        channels={k: list(v) for k, v in rec["channels"].items()},
        notes=notes,
        died_in_hospital=rec["died_in_hospital"],
        death_hour=death,
        cohort_tags=list(rec.get("cohort_tags", [])),
    )
    ep.validate(line)
    return ep


def load_episodes(stream: TextIO | Iterable[str], require_notes: bool = False) -> list[Episode]:
    """Parse episode JSONL; ``require_notes`` drops stays without any note."""
    out = []
    seen = set()
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CohortError(f"invalid JSON: {exc.msg}", lineno) from None
        ep = episode_from_record(rec, lineno)
        if ep.episode_id in seen:
            raise CohortError(f"duplicate episode_id {ep.episode_id}", lineno)
        seen.add(ep.episode_id)
        if require_notes and not ep.notes:
            continue
        out.append(ep)
    return out


def read_episodes(path: str | Path, require_notes: bool = False) -> list[Episode]:
    with open(path, encoding="utf-8") as fh:
        return load_episodes(fh, require_notes=require_notes)


def dumps_episodes(episodes: Iterable[Episode]) -> str:
    return "".join(json.dumps(e.to_record(), separators=(",", ":")) + "\n" for e in episodes)


def save_episodes(episodes: Iterable[Episode], path: str | Path) -> None:
    Path(path).write_text(dumps_episodes(episodes), encoding="utf-8")


# ---------------------------------------------------------------------------
# splitting


def _patients(cohort: Sequence[Episode]) -> list[str]:
    return sorted({e.patient_id for e in cohort})


def train_test_split(cohort: Sequence[Episode], train_fraction: float = 0.85, seed: int = 0
                     ) -> tuple[list[Episode], list[Episode]]:
    """Patient-level split; all episodes of a patient land on the same side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    patients = _patients(cohort)
    order = np.random.default_rng(seed).permutation(len(patients))
    n_train = int(round(train_fraction * len(patients)))
    train_ids = {patients[i] for i in order[:n_train]}
    train = [e for e in cohort if e.patient_id in train_ids]
    test = [e for e in cohort if e.patient_id not in train_ids]
    return train, test


def kfold_split(cohort: Sequence[Episode], k: int = 4, seed: int = 0) -> list[list[Episode]]:
    """Disjoint patient-level folds whose patient counts differ by at most one."""
    if k < 2:
        raise ValueError("k must be >= 2")
    patients = _patients(cohort)
    if k > len(patients):
        raise ValueError(f"k={k} exceeds patient count {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    fold_of = {}
    for f, idx in enumerate(np.array_split(order, k)):
        for i in idx:
            fold_of[patients[i]] = f
    folds: list[list[Episode]] = [[] for _ in range(k)]
    for e in cohort:
        folds[fold_of[e.patient_id]].append(e)
    return folds


def split(cohort: Sequence[Episode], scheme: str = "train_test", **kw):
    if scheme == "train_test":
        return train_test_split(cohort, **kw)
    if scheme == "kfold":
        return kfold_split(cohort, **kw)
    raise ValueError(f"unknown split scheme {scheme!r}")


# ---------------------------------------------------------------------------
# synthetic generator

# Test-column stay proportions of the ten length-of-stay classes.
LOS_TEST_COUNTS = (95439, 61372, 38858, 27142, 20171, 15878, 12940, 10953, 40856, 45741)
DEFAULT_LOS_WEIGHTS = tuple(c / sum(LOS_TEST_COUNTS) for c in LOS_TEST_COUNTS)


@dataclass
class PhenotypeEffect:
    prevalence: float
    mortality_log_odds: float = 0.0
    decomp_log_odds: float = 0.0
    los_days: float = 0.0


def _default_effects() -> dict[str, PhenotypeEffect]:
    return {
        "HP:0100526": PhenotypeEffect(0.10, 2.0, 0.0, 1.0),   # neoplasm of the lung
        "HP:0100806": PhenotypeEffect(0.12, 1.2, 2.0, 1.0),   # sepsis
        "HP:0002615": PhenotypeEffect(0.20, 0.8, 4.0, 0.0),   # hypotension
        "HP:0001635": PhenotypeEffect(0.18, 0.6, 1.0, 0.5),   # congestive heart failure
        "HP:0001919": PhenotypeEffect(0.10, 0.8, 1.0, 1.0),   # acute kidney injury
        "HP:0002094": PhenotypeEffect(0.20, 0.4, 2.0, 0.0),   # dyspnea
        "HP:0001945": PhenotypeEffect(0.25, 0.2, 1.0, 0.0),   # fever
        "HP:0000819": PhenotypeEffect(0.20, 0.2, 0.0, 0.5),   # diabetes mellitus
        "HP:0000822": PhenotypeEffect(0.15, 0.0, 0.0, 0.0),   # hypertension
        "HP:0005110": PhenotypeEffect(0.10, 0.3, 0.0, 0.0),   # atrial fibrillation
        "HP:0000716": PhenotypeEffect(0.05, 0.0, 0.0, 0.5),   # depressivity
        "HP:0012531": PhenotypeEffect(0.30, 0.0, 0.0, 0.0),   # pain
    }


DEFAULT_COHORT_TERMS = {
    "cardiovascular": ["HP:0001635", "HP:0005110", "HP:0000822"],
    "diabetes": ["HP:0000819"],
    "cancer": ["HP:0100526"],
    "depression": ["HP:0000716"],
}

DEFAULT_BACKGROUND_TERMS = (
    "HP:0012735", "HP:0002017", "HP:0002014", "HP:0001903", "HP:0001873", "HP:0012378",
    "HP:0004396", "HP:0002315", "HP:0001289", "HP:0000969", "HP:0002202", "HP:0003074",
    "HP:0002902", "HP:0100749", "HP:0002027", "HP:0001649",
)


@dataclass
class GeneratorConfig:
    n_patients: int = 1000
    seed: int = 0
    mortality_rate: float = 0.1312
    decomp_rate: float = 0.0201
    note_interval_hours: float = 12.0
    los_weights: tuple[float, ...] = DEFAULT_LOS_WEIGHTS
    phenotype_effects: dict[str, PhenotypeEffect] = field(default_factory=_default_effects)
    mention_prob: float = 0.7
    background_terms: tuple[str, ...] = DEFAULT_BACKGROUND_TERMS
    background_mentions_per_note: float = 1.0
    severity_log_odds: float = 0.8
    drift_hours: tuple[int, int] = (24, 48)
    drift_scale: float = 0.4
    readmission_rate: float = 0.1
    max_los_days: float = 45.0
    los_noise_days: float = 1.0
    decomp_obs_start: int = 4
    cohort_terms: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_COHORT_TERMS.items()})
    hard_cohort_tag: str | None = None
    hard_cohort_noise: float = 0.0
    note_mode: str = "terms"  # terms | text | both

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        for name in ("mortality_rate", "decomp_rate", "mention_prob", "readmission_rate", "hard_cohort_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        w = np.asarray(self.los_weights, dtype=float)
        if w.shape != (10,) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-6:
            raise ValueError("los_weights must be 10 non-negative weights summing to 1")
        if self.los_noise_days <= 0:
            raise ValueError("los_noise_days must be positive")
        if self.note_interval_hours <= 0:
            raise ValueError("note_interval_hours must be positive")
        for t, eff in self.phenotype_effects.items():
            if not is_term_id(t):
                raise ValueError(f"malformed term id {t!r}")
            if not 0.0 <= eff.prevalence <= 1.0:
                raise ValueError(f"prevalence of {t} must be in [0, 1]")
        for t in self.background_terms:
            if not is_term_id(t):
                raise ValueError(f"malformed term id {t!r}")
        lo, hi = self.drift_hours
        if not 0 < lo <= hi:
            raise ValueError("drift_hours must satisfy 0 < lo <= hi")
        if self.note_mode not in ("terms", "text", "both"):
            raise ValueError(f"unknown note_mode {self.note_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "phenotype_effects" in d:
            d["phenotype_effects"] = {t: PhenotypeEffect(**e) for t, e in d["phenotype_effects"].items()}
        for key in ("los_weights", "background_terms", "drift_hours"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["los_weights"] = list(self.los_weights)
        d["background_terms"] = list(self.background_terms)
        d["drift_hours"] = list(self.drift_hours)
        return d


# name -> (between-patient sd, within-stay sd, AR(1) coefficient, severity loading,
#          terminal drift, hourly observation probability, decimals)
_DYNAMICS = {
    "diastolic blood pressure": (8.0, 5.0, 0.85, -3.0, -18.0, 0.85, 0),
    "fraction inspired oxygen": (0.05, 0.03, 0.9, 0.04, 0.25, 0.10, 2),
    "glucose": (25.0, 15.0, 0.8, 8.0, 30.0, 0.15, 0),
    "heart rate": (10.0, 6.0, 0.85, 5.0, 30.0, 0.90, 0),
    "mean blood pressure": (9.0, 5.0, 0.85, -4.0, -22.0, 0.85, 0),
    "oxygen saturation": (1.2, 1.0, 0.8, -0.8, -8.0, 0.90, 0),
    "respiratory rate": (3.0, 2.5, 0.7, 1.5, 10.0, 0.90, 0),
    "systolic blood pressure": (14.0, 8.0, 0.85, -5.0, -35.0, 0.85, 0),
    "temperature": (0.4, 0.3, 0.8, 0.15, 0.8, 0.30, 1),
    "pH": (0.03, 0.02, 0.85, -0.01, -0.15, 0.08, 2),
}


def _ar1(rng, n, sd, phi):
    eps = rng.normal(0.0, sd * math.sqrt(1 - phi * phi), n)
    return lfilter([1.0], [1.0, -phi], eps)


def _observe(rng, values, p, decimals):
    mask = rng.random(len(values)) < p
    if decimals == 0:
        return [int(round(float(v))) if m else None for v, m in zip(values, mask)]
    return [round(float(v), decimals) if m else None for v, m in zip(values, mask)]


def _mortality_intercept(cfg: GeneratorConfig) -> float:
    """Intercept placing the population mean death probability at cfg.mortality_rate."""
    if cfg.mortality_rate in (0.0, 1.0):
        return -math.inf if cfg.mortality_rate == 0.0 else math.inf
    rng = np.random.default_rng(20211)
    n = 40000
    shift = cfg.severity_log_odds * rng.standard_normal(n)
    for eff in cfg.phenotype_effects.values():
        shift = shift + eff.mortality_log_odds * (rng.random(n) < eff.prevalence)
    target = cfg.mortality_rate
    return brentq(lambda a: expit(a + shift).mean() - target, -30.0, 30.0, xtol=1e-12)


@dataclass
class _Draft:
    patient_idx: int
    episode_idx: int
    rng: np.random.Generator
    severity: float
    carriers: list[str]
    length_hours: int
    died: bool


def _los_shift_table(cfg) -> tuple[np.ndarray, np.ndarray]:
    """Every possible total LOS shift with its probability under independent carriage."""
    shifts, probs = np.zeros(1), np.ones(1)
    for t in sorted(cfg.phenotype_effects):
        eff = cfg.phenotype_effects[t]
        if eff.los_days:
            shifts = np.concatenate([shifts, shifts + eff.los_days])
            probs = np.concatenate([probs * (1 - eff.prevalence), probs * eff.prevalence])
    return shifts, probs


def _sample_length(rng, cfg, carriers, shift_table) -> int:
    """Length of stay whose marginal follows ``cfg.los_weights`` exactly.

    A latent score (carrier LOS shifts plus unit noise, in days) is pushed
    through its own CDF to a uniform quantile, which then indexes the inverse
    CDF of the ten-bin mixture; carriers get longer stays without distorting
    the bin histogram.
    """
    score = sum(cfg.phenotype_effects[t].los_days for t in carriers) + cfg.los_noise_days * rng.standard_normal()
    shifts, probs = shift_table
    u = float(np.sum(probs * ndtr((score - shifts) / cfg.los_noise_days)))
    w = np.asarray(cfg.los_weights, dtype=float)
    cum = np.cumsum(w / w.sum())
    k = min(int(np.searchsorted(cum, u, side="right")), 9)
    lo = cum[k - 1] if k else 0.0
    f = min(max((u - lo) / (cum[k] - lo), 0.0), 1.0 - 1e-12) if cum[k] > lo else 0.5
    if k < 8:
        days = k + f
    elif k == 8:
        days = 8 + 6 * f
    else:
        days = min(14 - 7.0 * math.log1p(-f), cfg.max_los_days)
    return max(1, int(days * 24))


def _draft_patient(idx, rng, cfg, intercept, terms, shift_table) -> list[_Draft]:
    carriers = [t for t in terms if rng.random() < cfg.phenotype_effects[t].prevalence]
    tags = _tags_for(cfg, carriers)
    drafts = []
    n_eps = 2 if rng.random() < cfg.readmission_rate else 1
    for k in range(n_eps):
        severity = float(rng.standard_normal())
        eta = intercept + cfg.severity_log_odds * severity + sum(
            cfg.phenotype_effects[t].mortality_log_odds for t in carriers)
        p = float(expit(eta)) if math.isfinite(intercept) else (0.0 if intercept < 0 else 1.0)
        died = rng.random() < p
        if cfg.hard_cohort_tag and cfg.hard_cohort_tag in tags and rng.random() < cfg.hard_cohort_noise:
            died = rng.random() < cfg.mortality_rate
        length = _sample_length(rng, cfg, carriers, shift_table)
        drafts.append(_Draft(idx, k, rng, severity, carriers, length, died))
        if died:
            break
    return drafts


def _tags_for(cfg, carriers) -> list[str]:
    return sorted(tag for tag, ts in cfg.cohort_terms.items() if set(ts) & set(carriers))


def _terminal_window(length, obs_start):
    return max(0, min(24, length - obs_start))


def _channels(rng, cfg, d: _Draft, icu_death: bool) -> dict[str, list]:
    L = d.length_hours
    out: dict[str, list] = {}
    drift = np.zeros(L)
    if icu_death:
        span = int(rng.integers(cfg.drift_hours[0], cfg.drift_hours[1] + 1))
        ramp = np.clip((np.arange(L) - (L - span)) / span, 0.0, 1.0)
        drift = ramp * cfg.drift_scale
    for spec in CHANNELS:
        dyn = _DYNAMICS.get(spec.name)
        if dyn is None:
            continue
        between, within, phi, load, terminal, p_obs, dec = dyn
        base = spec.normal_value + between * rng.standard_normal() + load * d.severity
        vals = np.clip(base + _ar1(rng, L, within, phi) + terminal * drift, spec.low, spec.high)
        out[spec.name] = _observe(rng, vals, p_obs, dec)
    # consciousness: deficit grows with severity and terminal drift
    deficit = np.clip(0.6 * d.severity + 0.8 * rng.standard_normal() + _ar1(rng, L, 0.6, 0.9) + 7.0 * drift,
                      0.0, 12.0)
    eye = np.clip(np.rint(4 - deficit * 3 / 12), 1, 4)
    motor = np.clip(np.rint(6 - deficit * 5 / 12), 1, 6)
    verbal = np.clip(np.rint(5 - deficit * 4 / 12), 1, 5)
    gcs_mask = rng.random(L) < 0.25
    for name, vals in (("glasgow coma scale eye opening", eye), ("glasgow coma scale motor response", motor),
                       ("glasgow coma scale verbal response", verbal),
                       ("glasgow coma scale total", eye + motor + verbal)):
        out[name] = [int(v) if m else None for v, m in zip(vals, gcs_mask)]
    refill_p = expit(-3.0 + 0.7 * d.severity + 3.0 * drift)
    refill = rng.random(L) < refill_p
    out["capillary refill rate"] = [int(v) if m else None for v, m in zip(refill, rng.random(L) < 0.05)]
    height = round(float(170 + 10 * rng.standard_normal()), 0)
    weight = round(float(81 + 15 * rng.standard_normal()), 1)
    out["height"] = [height if m else None for m in rng.random(L) < 0.01]
    out["weight"] = [weight if m else None for m in rng.random(L) < 0.03]
    return {name: out[name] for name in CHANNEL_NAMES}


def _note_hours(rng, cfg, L) -> list[int]:
    hours = [int(rng.integers(0, max(1, min(L, int(cfg.note_interval_hours)))))]
    shape = 4.0
    while True:
        gap = max(1, int(round(rng.gamma(shape, cfg.note_interval_hours / shape))))
        nxt = hours[-1] + gap
        if nxt >= L:
            break
        hours.append(nxt)
    return hours


def _note_text(rng, terms, names) -> str:
    if not terms:
        return "Patient resting comfortably. Vitals reviewed. Continue current plan."
    findings = ", ".join(names.get(t, t).lower() for t in terms)
    opener = ("Nursing note: patient reviewed at bedside.", "Physician progress note.",
              "Overnight events reviewed.")[int(rng.integers(0, 3))]
    return f"{opener} Findings include {findings}. Continue monitoring."


def generate(cfg: GeneratorConfig) -> list[Episode]:
    """Generate a synthetic cohort; identical output for identical configs."""
    cfg.validate()
    terms = sorted(cfg.phenotype_effects)
    intercept = _mortality_intercept(cfg)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)
    shift_table = _los_shift_table(cfg)
    drafts: list[_Draft] = []
    for i, ss in enumerate(streams):
        drafts.extend(_draft_patient(i, np.random.default_rng(ss), cfg, intercept, terms, shift_table))

    # share of deaths occurring inside the ICU, set so the positive-timestep
    # fraction of the decompensation task matches cfg.decomp_rate
    obs = cfg.decomp_obs_start
    total = sum(max(0, d.length_hours - obs) for d in drafts)
    window = sum(_terminal_window(d.length_hours, obs) for d in drafts if d.died)
    p_icu = min(1.0, cfg.decomp_rate * total / window) if window else 0.0

    names = {}
    if cfg.note_mode != "terms":
        from .ontology import bundled_ontology
        names = {t: term.name for t, term in bundled_ontology().terms.items()}

    episodes = []
    for d in drafts:
        rng = d.rng
        icu_death = d.died and rng.random() < p_icu
        channels = _channels(rng, cfg, d, icu_death)
        L = d.length_hours
        pid = f"P{d.patient_idx:05d}"
        eid = f"{pid}_E{d.episode_idx}"
        notes = []
        base_bg = cfg.background_mentions_per_note / max(1, len(cfg.background_terms))
        for j, h in enumerate(_note_hours(rng, cfg, L)):
            terminal = icu_death and L - h <= 24
            mentioned = []
            for t in terms:
                p = cfg.mention_prob if t in d.carriers else 0.01
                shift = cfg.phenotype_effects[t].decomp_log_odds
                if terminal and shift:
                    p = float(expit(logit(min(max(p, 1e-6), 1 - 1e-6)) + shift))
                if rng.random() < p:
                    mentioned.append(t)
            for t in cfg.background_terms:
                if rng.random() < base_bg and t not in mentioned:
                    mentioned.append(t)
            mentioned.sort()
            note = Note(hour=h, note_id=f"{eid}_N{j:03d}")
            if cfg.note_mode in ("terms", "both"):
                note.terms = mentioned
            if cfg.note_mode in ("text", "both"):
                note.text = _note_text(rng, mentioned, names)
            notes.append(note)
        episodes.append(Episode(
            patient_id=pid, episode_id=eid, length_hours=L, channels=channels, notes=notes,
            died_in_hospital=bool(d.died), death_hour=L if icu_death else None,
            cohort_tags=_tags_for(cfg, d.carriers),
        ))
    return episodes


def carriers_of(episode: Episode, term: str) -> bool:
    """Whether any note of the episode mentions ``term`` (pre-annotated notes only)."""
    return any(term in (n.terms or ()) for n in episode.notes)

"""Virtual patient generation: demographics and physiological parameters.

Patients carry the record a real trial would hold (name, date and place of
birth, sex, height, body weight, resting heart rate). Physiological
parameter sets are drawn per patient from the model's distribution table by
rejection sampling: a draw is kept only if every value is nonnegative,
every normally distributed parameter lies within one standard deviation of
its mean, and the implied steady-state basal rate is at least 0.4 U/h.

Generation is a pure function of (seed, n, configuration): every patient id
owns its own counter-based streams, so results do not depend on worker
count and existing patients are unchanged when a population grows.
"""

from __future__ import annotations

import datetime
import importlib.resources
import math
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from .hovorka import ParameterTable, SteadyStateError, load_parameter_table, pack_params, steady_state
from .rng import ROLE_DEMOGRAPHICS, ROLE_PARAMETERS, stream

MIN_BASAL_U_PER_H = 0.4
MAX_ATTEMPTS = 10_000
SEXES = ("female", "male")

_CHUNK = 256


class PopulationError(RuntimeError):
    """Raised when sampling cannot satisfy the configuration."""


@dataclass(slots=True)
class Patient:
    id: int
    first_name: str
    last_name: str
    date_of_birth: datetime.date
    place_of_birth: str
    sex: str
    height_cm: float
    body_weight_kg: float
    resting_heart_rate_bpm: float

    def __post_init__(self):
        if self.sex not in SEXES:
            raise PopulationError(f"unknown sex {self.sex!r}")
        if min(self.height_cm, self.body_weight_kg, self.resting_heart_rate_bpm) <= 0:
            raise PopulationError("height, weight and resting heart rate must be positive")

    def age_years(self, as_of: datetime.date) -> float:
        return (as_of - self.date_of_birth).days / 365.25

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "first_name": self.first_name,
            "last_name": self.last_name,
            "date_of_birth": self.date_of_birth.isoformat(),
            "place_of_birth": self.place_of_birth,
            "sex": self.sex,
            "height_cm": self.height_cm,
            "body_weight_kg": self.body_weight_kg,
            "resting_heart_rate_bpm": self.resting_heart_rate_bpm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Patient":
        return cls(
            id=d["id"],
            first_name=d["first_name"],
            last_name=d["last_name"],
            date_of_birth=datetime.date.fromisoformat(d["date_of_birth"]),
            place_of_birth=d["place_of_birth"],
            sex=d["sex"],
            height_cm=d["height_cm"],
            body_weight_kg=d["body_weight_kg"],
            resting_heart_rate_bpm=d["resting_heart_rate_bpm"],
        )


@dataclass(frozen=True)
class DemographicsConfig:
    height_cm: tuple  # (mean, sd)
    body_weight_kg: tuple
    resting_heart_rate_bpm: tuple
    dob_start: datetime.date
    dob_end: datetime.date
    first_names: tuple
    last_names: tuple
    places: tuple

    def __post_init__(self):
        for name in ("height_cm", "body_weight_kg", "resting_heart_rate_bpm"):
            mean, sd = getattr(self, name)
            if sd < 0:
                raise PopulationError(f"{name}: standard deviation must be nonnegative")
        if self.dob_end < self.dob_start:
            raise PopulationError("date-of-birth range is empty")
        if not (self.first_names and self.last_names and self.places):
            raise PopulationError("name/place lookup tables must be nonempty")


def load_demographics(path=None) -> DemographicsConfig:
    """Load a demographics configuration (the bundled default without a path).

    Name/place table files are resolved next to the configuration file.
    """
    if path is None:
        root = importlib.resources.files("glucotrial.data")
        raw = yaml.safe_load(root.joinpath("demographics.yaml").read_text())
        read = lambda fname: root.joinpath(fname).read_text()
    else:
        base = os.path.dirname(os.path.abspath(path))
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        read = lambda fname: open(os.path.join(base, fname)).read()
    if raw.get("schema") != "glucotrial/demographics/1":
        raise PopulationError(f"unsupported demographics schema: {raw.get('schema')!r}")

    def _names(key):
        return tuple(line.strip() for line in read(raw[key]).splitlines() if line.strip())

    def _dist(key):
        return (float(raw[key]["mean"]), float(raw[key]["sd"]))

    return DemographicsConfig(
        height_cm=_dist("height_cm"),
        body_weight_kg=_dist("body_weight_kg"),
        resting_heart_rate_bpm=_dist("resting_heart_rate_bpm"),
        dob_start=raw["date_of_birth"]["start"],
        dob_end=raw["date_of_birth"]["end"],
        first_names=_names("first_names_file"),
        last_names=_names("last_names_file"),
        places=_names("places_file"),
    )


def _positive_normal(rng: np.random.Generator, mean: float, sd: float, what: str) -> float:
    for _ in range(MAX_ATTEMPTS):
        v = rng.normal(mean, sd)
        if v > 0:
            return float(v)
    raise PopulationError(f"could not draw a positive {what}; check mean/sd")


def sample_patient(rng: np.random.Generator, config: DemographicsConfig,
                   patient_id: int = 0) -> Patient:
    """Draw one patient. Draw order is fixed (sex, names, place, birth date,
    height, weight, heart rate) and is part of the reproducibility contract."""
    sex = SEXES[int(rng.integers(2))]
    first = config.first_names[int(rng.integers(len(config.first_names)))]
    last = config.last_names[int(rng.integers(len(config.last_names)))]
    place = config.places[int(rng.integers(len(config.places)))]
    span_days = (config.dob_end - config.dob_start).days
    dob = config.dob_start + datetime.timedelta(days=int(rng.integers(span_days + 1)))
    height = _positive_normal(rng, *config.height_cm, "height")
    weight = _positive_normal(rng, *config.body_weight_kg, "body weight")
    rhr = _positive_normal(rng, *config.resting_heart_rate_bpm, "resting heart rate")
    return Patient(
        id=patient_id, first_name=first, last_name=last, date_of_birth=dob,
        place_of_birth=place, sex=sex, height_cm=height, body_weight_kg=weight,
        resting_heart_rate_bpm=rhr,
    )


@dataclass(slots=True)
class ParameterSet:
    """Named physiological parameter map plus the implied basal rate."""

    values: dict
    u_basal_u_per_h: float

    def to_dict(self) -> dict:
        return {"values": dict(self.values), "u_basal_u_per_h": self.u_basal_u_per_h}

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        return cls(values=dict(d["values"]), u_basal_u_per_h=d["u_basal_u_per_h"])


@dataclass
class SamplingStats:
    """Rejection-sampling bookkeeping across one or many patients."""

    attempts: int = 0
    accepted: int = 0
    rejected_negative: int = 0
    rejected_outside_sd: int = 0
    rejected_basal: int = 0
    rejected_no_steady_state: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0


def _draw_values(rng: np.random.Generator, table: ParameterTable) -> dict:
    values = {}
    for name, spec in table.sampled.items():
        if spec.kind == "normal":
            values[name] = float(rng.normal(spec.mean, spec.sd))
        else:
            values[name] = float(rng.lognormal(spec.log_mu, spec.log_sigma))
    return values


def sample_parameter_set(rng: np.random.Generator, patient: Patient,
                         table: ParameterTable, target_bg: float = 6.0,
                         max_attempts: int = MAX_ATTEMPTS,
                         stats: SamplingStats | None = None) -> ParameterSet:
    """Rejection-sample one accepted parameter set for ``patient``.

    Acceptance requires nonnegative values, normal draws within one standard
    deviation of their means, and a steady-state basal rate of at least
    0.4 U/h at the target BG. Raises :class:`PopulationError` when the
    attempt budget is exhausted (a sign of an inconsistent table).
    """
    if stats is None:
        stats = SamplingStats()
    for _ in range(max_attempts):
        stats.attempts += 1
        sampled = _draw_values(rng, table)
        if any(v < 0.0 for v in sampled.values()):
            stats.rejected_negative += 1
            continue
        outside = False
        for name, spec in table.sampled.items():
            if spec.kind == "normal" and abs(sampled[name] - spec.mean) > spec.sd:
                outside = True
                break
        if outside:
            stats.rejected_outside_sd += 1
            continue
        values = {"weight_kg": patient.body_weight_kg}
        values.update(sampled)
        values.update(table.fixed)
        try:
            _, u_basal = steady_state(pack_params(values), target_bg)
        except SteadyStateError:
            stats.rejected_no_steady_state += 1
            continue
        if u_basal < MIN_BASAL_U_PER_H:
            stats.rejected_basal += 1
            continue
        stats.accepted += 1
        return ParameterSet(values=values, u_basal_u_per_h=u_basal)
    raise PopulationError(
        f"no acceptable parameter set for patient {patient.id} in {max_attempts} attempts"
    )


def validate_parameter_set(pset: ParameterSet, table: ParameterTable,
                           target_bg: float = 6.0) -> list:
    """Re-check the three acceptance rules; returns violations (empty = ok)."""
    violations = []
    for name, v in pset.values.items():
        if v < 0.0:
            violations.append(f"{name} is negative")
    for name, spec in table.sampled.items():
        if name not in pset.values:
            violations.append(f"missing sampled parameter {name}")
        elif spec.kind == "normal" and abs(pset.values[name] - spec.mean) > spec.sd:
            violations.append(f"{name} outside one standard deviation")
    if pset.u_basal_u_per_h < MIN_BASAL_U_PER_H:
        violations.append(f"u_basal {pset.u_basal_u_per_h:.3f} U/h below {MIN_BASAL_U_PER_H}")
    try:
        _, u_basal = steady_state(pack_params(pset.values), target_bg)
        if not math.isclose(u_basal, pset.u_basal_u_per_h, rel_tol=1e-9, abs_tol=1e-12):
            violations.append("stored u_basal does not match the steady-state solve")
    except (SteadyStateError, ValueError) as exc:
        violations.append(f"steady state failed: {exc}")
    return violations


def _generate_range(seed: int, ids, demographics: DemographicsConfig,
                    table: ParameterTable, target_bg: float):
    out = []
    stats = SamplingStats()
    for pid in ids:
        patient = sample_patient(stream(seed, pid, ROLE_DEMOGRAPHICS), demographics, pid)
        pset = sample_parameter_set(
            stream(seed, pid, ROLE_PARAMETERS), patient, table, target_bg, stats=stats
        )
        out.append((patient, pset))
    return out, stats


def _generate_chunk(task):
    seed, lo, hi, demographics, table, target_bg = task
    return _generate_range(seed, range(lo, hi), demographics, table, target_bg)


def generate_population(seed: int, n: int, demographics: DemographicsConfig | None = None,
                        table: ParameterTable | None = None, target_bg: float = 6.0,
                        workers: int = 1, progress=None):
    """Generate ``n`` patients with parameter sets; ids are 0..n-1.

    Returns ``(entries, stats)`` where entries is a list of
    ``(Patient, ParameterSet)`` and stats aggregates rejection counters.
    Deterministic in ``seed`` for any ``workers`` value.
    """
    if n < 1:
        raise PopulationError("population size must be >= 1")
    if demographics is None:
        demographics = load_demographics()
    if table is None:
        table = load_parameter_table()

    bounds = [(lo, min(lo + _CHUNK, n)) for lo in range(0, n, _CHUNK)]
    tasks = [(seed, lo, hi, demographics, table, target_bg) for lo, hi in bounds]
    entries = []
    total_stats = SamplingStats()

    def _fold(result):
        chunk_entries, stats = result
        entries.extend(chunk_entries)
        for f in total_stats.__dataclass_fields__:
            setattr(total_stats, f, getattr(total_stats, f) + getattr(stats, f))
        if progress:
            progress(len(entries), n)

    if workers == 1 or len(tasks) == 1:
        for task in tasks:
            _fold(_generate_chunk(task))
    else:
        methods = mp.get_all_start_methods()
        ctx = mp.get_context("fork" if "fork" in methods else "spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for result in pool.map(_generate_chunk, tasks):
                _fold(result)
    return entries, total_stats

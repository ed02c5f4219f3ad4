"""File-backed trial database with checksums and an SQL-exportable schema.

The store is a directory tree::

    store/
      populations/<id>/patients.jsonl        (+ .sha256)
      parameter_sets/<id>/parameter_sets.jsonl
      protocols/<id>/protocols.jsonl
      profiles/<hash>.json
      trials/<trial_id>/record.json, report.json, traces/, figures/

Every artifact is versioned structured text with a sha256 sidecar; loads
verify the checksum and the schema line, and writes are atomic (temp file +
rename). A relational schema equivalent to the on-disk layout is available
from :func:`sql_ddl` together with CSV exports, so the same data can be
ingested into a relational server.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
import os
from dataclasses import dataclass, field

from .controller import ControllerHyperparameters
from .population import ParameterSet, Patient
from .protocol import Protocol

SCHEMA_POPULATION = "glucotrial/population/1"
SCHEMA_PARAMETER_SETS = "glucotrial/parameter-sets/1"
SCHEMA_PROTOCOLS = "glucotrial/protocols/1"
SCHEMA_TRIAL_RECORD = "glucotrial/trial-record/1"


class StorageError(RuntimeError):
    pass


class MissingArtifactError(StorageError):
    pass


class CorruptArtifactError(StorageError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_atomic(path: str, data: bytes) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    with open(path + ".sha256.tmp", "w") as fh:
        fh.write(_sha256(data) + "\n")
    os.replace(path + ".sha256.tmp", path + ".sha256")


def _read_verified(path: str) -> bytes:
    if not os.path.exists(path):
        raise MissingArtifactError(f"no such artifact: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    sidecar = path + ".sha256"
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            expected = fh.read().strip()
        if _sha256(data) != expected:
            raise CorruptArtifactError(f"checksum mismatch for {path}")
    return data


def _write_jsonl(path: str, header: dict, records) -> None:
    lines = [_dumps(header)]
    lines.extend(_dumps(r) for r in records)
    _write_atomic(path, ("\n".join(lines) + "\n").encode())


def _read_jsonl(path: str, schema: str):
    data = _read_verified(path).decode()
    lines = data.splitlines()
    if not lines:
        raise CorruptArtifactError(f"empty artifact: {path}")
    header = json.loads(lines[0])
    if header.get("schema") != schema:
        raise StorageError(
            f"schema mismatch in {path}: found {header.get('schema')!r}, need {schema!r}"
        )
    records = [json.loads(line) for line in lines[1:]]
    if header.get("count") is not None and header["count"] != len(records):
        raise CorruptArtifactError(f"record count mismatch in {path}")
    return header, records


class Store:
    """Handle on a store directory; create with ``Store(path)``."""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)

    def _path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    # -- populations and parameter sets ------------------------------------

    def save_population(self, population_id: str, patients) -> str:
        path = self._path("populations", population_id, "patients.jsonl")
        _write_jsonl(
            path,
            {"schema": SCHEMA_POPULATION, "id": population_id, "count": len(patients)},
            (p.to_dict() for p in patients),
        )
        return path

    def load_population(self, population_id: str):
        path = self._path("populations", population_id, "patients.jsonl")
        _, records = _read_jsonl(path, SCHEMA_POPULATION)
        return [Patient.from_dict(r) for r in records]

    def save_parameter_sets(self, set_id: str, entries) -> str:
        """``entries``: iterable of (patient_id, ParameterSet)."""
        entries = list(entries)
        path = self._path("parameter_sets", set_id, "parameter_sets.jsonl")
        _write_jsonl(
            path,
            {"schema": SCHEMA_PARAMETER_SETS, "id": set_id, "count": len(entries)},
            ({"patient_id": pid, **ps.to_dict()} for pid, ps in entries),
        )
        return path

    def load_parameter_sets(self, set_id: str):
        path = self._path("parameter_sets", set_id, "parameter_sets.jsonl")
        _, records = _read_jsonl(path, SCHEMA_PARAMETER_SETS)
        return [(r["patient_id"], ParameterSet.from_dict(r)) for r in records]

    def save_cohort(self, cohort_id: str, entries) -> None:
        """Save (Patient, ParameterSet) pairs as one population + one set."""
        self.save_population(cohort_id, [p for p, _ in entries])
        self.save_parameter_sets(cohort_id, [(p.id, ps) for p, ps in entries])

    def load_cohort(self, cohort_id: str):
        patients = {p.id: p for p in self.load_population(cohort_id)}
        out = []
        for pid, pset in self.load_parameter_sets(cohort_id):
            if pid not in patients:
                raise StorageError(f"parameter set references unknown patient {pid}")
            out.append((patients[pid], pset))
        return out

    # -- protocols ----------------------------------------------------------

    def save_protocols(self, set_id: str, protocols) -> str:
        protocols = list(protocols)
        path = self._path("protocols", set_id, "protocols.jsonl")
        _write_jsonl(
            path,
            {"schema": SCHEMA_PROTOCOLS, "id": set_id, "count": len(protocols)},
            (p.to_dict() for p in protocols),
        )
        return path

    def load_protocols(self, set_id: str):
        path = self._path("protocols", set_id, "protocols.jsonl")
        _, records = _read_jsonl(path, SCHEMA_PROTOCOLS)
        return [Protocol.from_dict(r) for r in records]

    # -- controller profiles --------------------------------------------

    def save_profile(self, profile: ControllerHyperparameters) -> str:
        h = profile.content_hash()
        path = self._path("profiles", f"{h}.json")
        _write_atomic(path, (_dumps(profile.to_dict()) + "\n").encode())
        return h

    def load_profile(self, profile_hash: str) -> ControllerHyperparameters:
        path = self._path("profiles", f"{profile_hash}.json")
        raw = json.loads(_read_verified(path).decode())
        from .controller import ExerciseOverrides

        kwargs = {
            k: v for k, v in raw.items() if k not in ("schema", "controller", "exercise")
        }
        kwargs["exercise"] = ExerciseOverrides(**raw.get("exercise", {}))
        profile = ControllerHyperparameters(**kwargs)
        if profile.content_hash() != profile_hash:
            raise CorruptArtifactError(f"profile content does not match hash {profile_hash}")
        return profile

    # -- trials ---------------------------------------------------------

    def trial_dir(self, trial_id: str) -> str:
        return self._path("trials", trial_id)

    def save_report(self, trial_id: str, report: dict) -> str:
        path = self._path("trials", trial_id, "report.json")
        _write_atomic(path, report_bytes(report))
        return path

    def load_report(self, trial_id: str) -> dict:
        path = self._path("trials", trial_id, "report.json")
        return json.loads(_read_verified(path).decode())

    def save_trial_record(self, record: "TrialRecord") -> str:
        path = self._path("trials", record.trial_id, "record.json")
        _write_atomic(path, (json.dumps(record.to_dict(), sort_keys=True, indent=2) + "\n").encode())
        return path

    def load_trial_record(self, trial_id: str) -> "TrialRecord":
        path = self._path("trials", trial_id, "record.json")
        return TrialRecord.from_dict(json.loads(_read_verified(path).decode()))

    def list_trials(self):
        base = self._path("trials")
        if not os.path.isdir(base):
            return []
        return sorted(d for d in os.listdir(base) if os.path.isdir(os.path.join(base, d)))


def report_bytes(report: dict) -> bytes:
    """Canonical serialization of a trial report (byte-stable)."""
    return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode()


@dataclass(frozen=True)
class TrialRecord:
    """Everything needed to re-run a trial bit-identically: the seed, the
    configuration snapshot, and references to the stored artifacts."""

    trial_id: str
    created_at: str
    seed: int
    model_id: str
    controller_id: str
    profile_hash: str
    population_ref: str
    protocol_generator: dict
    basal_scale: float
    config: dict
    workers_hint: int = 1
    engine_version: str = ""

    @classmethod
    def create(cls, trial_id, seed, model_id, controller_id, profile_hash,
               population_ref, protocol_generator, basal_scale, config,
               workers_hint=1):
        from . import __version__

        return cls(
            trial_id=trial_id,
            created_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
            seed=seed,
            model_id=model_id,
            controller_id=controller_id,
            profile_hash=profile_hash,
            population_ref=population_ref,
            protocol_generator=dict(protocol_generator),
            basal_scale=basal_scale,
            config=dict(config),
            workers_hint=workers_hint,
            engine_version=__version__,
        )

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_TRIAL_RECORD, **self.__dict__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        if d.get("schema") != SCHEMA_TRIAL_RECORD:
            raise StorageError(f"unsupported trial record schema: {d.get('schema')!r}")
        fields = {k: v for k, v in d.items() if k != "schema"}
        return cls(**fields)


def rerun_trial(store: Store, record: TrialRecord, workers: int = 1):
    """Re-execute a recorded trial from its referenced artifacts.

    Returns the fresh TrialResult; its report must equal the stored one
    byte-for-byte.
    """
    from .protocol import AnnouncementPolicy
    from .simulation import NorthernYearProtocol, SimulationConfig, run_trial

    population = store.load_cohort(record.population_ref)
    profile = store.load_profile(record.profile_hash)
    gen_spec = record.protocol_generator
    if gen_spec.get("kind") != "northern_year":
        raise StorageError(
            f"cannot rebuild protocol generator of kind {gen_spec.get('kind')!r}"
        )
    generator = NorthernYearProtocol(
        announcement=AnnouncementPolicy(
            fraction_unannounced=gen_spec["fraction_unannounced"],
            misannouncement_factor_range=tuple(gen_spec["misannouncement_factor_range"]),
        ),
        basis_days_path=gen_spec.get("basis_days_path"),
    )
    config = SimulationConfig(**record.config)
    return run_trial(
        population, generator, record.controller_id, profile, record.model_id,
        config, workers=workers, basal_scale=record.basal_scale,
        run_meta={"trial_id": record.trial_id, "population_ref": record.population_ref},
    )


# --------------------------------------------------------------------------
# Population queries


@dataclass(frozen=True)
class PopulationFilter:
    """Conjunctive demographic predicates; None disables a predicate."""

    sex: str | None = None
    min_weight_kg: float | None = None
    max_weight_kg: float | None = None
    min_height_cm: float | None = None
    max_height_cm: float | None = None
    min_age_years: float | None = None
    max_age_years: float | None = None
    as_of: datetime.date = datetime.date(2026, 1, 1)

    def matches(self, patient: Patient) -> bool:
        if self.sex is not None and patient.sex != self.sex:
            return False
        if self.min_weight_kg is not None and patient.body_weight_kg < self.min_weight_kg:
            return False
        if self.max_weight_kg is not None and patient.body_weight_kg > self.max_weight_kg:
            return False
        if self.min_height_cm is not None and patient.height_cm < self.min_height_cm:
            return False
        if self.max_height_cm is not None and patient.height_cm > self.max_height_cm:
            return False
        age = patient.age_years(self.as_of)
        if self.min_age_years is not None and age < self.min_age_years:
            return False
        if self.max_age_years is not None and age > self.max_age_years:
            return False
        return True


def query_population(entries, flt: PopulationFilter):
    """Filter patients (or (Patient, ParameterSet) pairs) by demographics."""
    out = []
    for entry in entries:
        patient = entry[0] if isinstance(entry, tuple) else entry
        if flt.matches(patient):
            out.append(entry)
    return out


# --------------------------------------------------------------------------
# SQL export

_SQL_DDL = """\
-- Relational schema mirroring the on-disk store (PostgreSQL dialect).
CREATE TABLE patients (
    population_id TEXT NOT NULL,
    id BIGINT NOT NULL,
    first_name TEXT NOT NULL,
    last_name TEXT NOT NULL,
    date_of_birth DATE NOT NULL,
    place_of_birth TEXT NOT NULL,
    sex TEXT NOT NULL CHECK (sex IN ('female', 'male')),
    height_cm DOUBLE PRECISION NOT NULL CHECK (height_cm > 0),
    body_weight_kg DOUBLE PRECISION NOT NULL CHECK (body_weight_kg > 0),
    resting_heart_rate_bpm DOUBLE PRECISION NOT NULL CHECK (resting_heart_rate_bpm > 0),
    PRIMARY KEY (population_id, id)
);

CREATE TABLE parameter_sets (
    population_id TEXT NOT NULL,
    patient_id BIGINT NOT NULL,
    u_basal_u_per_h DOUBLE PRECISION NOT NULL CHECK (u_basal_u_per_h >= 0.4),
    values_json JSONB NOT NULL,
    PRIMARY KEY (population_id, patient_id),
    FOREIGN KEY (population_id, patient_id) REFERENCES patients (population_id, id)
);

CREATE TABLE protocols (
    set_id TEXT NOT NULL,
    protocol_id TEXT NOT NULL,
    horizon_s DOUBLE PRECISION NOT NULL,
    PRIMARY KEY (set_id, protocol_id)
);

CREATE TABLE disturbances (
    set_id TEXT NOT NULL,
    protocol_id TEXT NOT NULL,
    seq INTEGER NOT NULL,
    kind TEXT NOT NULL CHECK (kind IN ('meal', 'exercise')),
    start_s DOUBLE PRECISION NOT NULL,
    end_s DOUBLE PRECISION NOT NULL,
    magnitude DOUBLE PRECISION NOT NULL,
    announced BOOLEAN NOT NULL,
    announced_magnitude DOUBLE PRECISION NOT NULL,
    PRIMARY KEY (set_id, protocol_id, seq),
    FOREIGN KEY (set_id, protocol_id) REFERENCES protocols (set_id, protocol_id)
);

CREATE TABLE trials (
    trial_id TEXT PRIMARY KEY,
    created_at TIMESTAMPTZ NOT NULL,
    seed BIGINT NOT NULL,
    model_id TEXT NOT NULL,
    controller_id TEXT NOT NULL,
    profile_hash TEXT NOT NULL,
    population_ref TEXT NOT NULL,
    basal_scale DOUBLE PRECISION NOT NULL,
    record_json JSONB NOT NULL
);

CREATE TABLE reports (
    trial_id TEXT PRIMARY KEY REFERENCES trials (trial_id),
    report_json JSONB NOT NULL
);
"""


def sql_ddl() -> str:
    return _SQL_DDL


def export_sql(store: Store, out_dir: str) -> list:
    """Write schema.sql plus COPY-ready CSV files for the store's contents."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def _out(name):
        path = os.path.join(out_dir, name)
        written.append(path)
        return path

    with open(_out("schema.sql"), "w") as fh:
        fh.write(sql_ddl())

    pop_root = os.path.join(store.root, "populations")
    pop_ids = sorted(os.listdir(pop_root)) if os.path.isdir(pop_root) else []
    with open(_out("patients.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["population_id", "id", "first_name", "last_name", "date_of_birth",
                     "place_of_birth", "sex", "height_cm", "body_weight_kg",
                     "resting_heart_rate_bpm"])
        for pop_id in pop_ids:
            for p in store.load_population(pop_id):
                wr.writerow([pop_id, p.id, p.first_name, p.last_name,
                             p.date_of_birth.isoformat(), p.place_of_birth, p.sex,
                             repr(p.height_cm), repr(p.body_weight_kg),
                             repr(p.resting_heart_rate_bpm)])
    ps_root = os.path.join(store.root, "parameter_sets")
    ps_ids = sorted(os.listdir(ps_root)) if os.path.isdir(ps_root) else []
    with open(_out("parameter_sets.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["population_id", "patient_id", "u_basal_u_per_h", "values_json"])
        for set_id in ps_ids:
            for pid, ps in store.load_parameter_sets(set_id):
                wr.writerow([set_id, pid, repr(ps.u_basal_u_per_h), _dumps(ps.values)])
    proto_root = os.path.join(store.root, "protocols")
    proto_ids = sorted(os.listdir(proto_root)) if os.path.isdir(proto_root) else []
    with open(_out("protocols.csv"), "w", newline="") as fh_p, \
         open(_out("disturbances.csv"), "w", newline="") as fh_d:
        wp = csv.writer(fh_p)
        wd = csv.writer(fh_d)
        wp.writerow(["set_id", "protocol_id", "horizon_s"])
        wd.writerow(["set_id", "protocol_id", "seq", "kind", "start_s", "end_s",
                     "magnitude", "announced", "announced_magnitude"])
        for set_id in proto_ids:
            for proto in store.load_protocols(set_id):
                wp.writerow([set_id, proto.id, repr(proto.horizon_s)])
                for i, dst in enumerate(proto.disturbances):
                    wd.writerow([set_id, proto.id, i, dst.kind, repr(dst.start_s),
                                 repr(dst.end_s), repr(dst.magnitude),
                                 dst.announced, repr(dst.announced_magnitude)])
    with open(_out("trials.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["trial_id", "created_at", "seed", "model_id", "controller_id",
                     "profile_hash", "population_ref", "basal_scale", "record_json"])
        for trial_id in store.list_trials():
            try:
                rec = store.load_trial_record(trial_id)
            except MissingArtifactError:
                continue
            wr.writerow([rec.trial_id, rec.created_at, rec.seed, rec.model_id,
                         rec.controller_id, rec.profile_hash, rec.population_ref,
                         repr(rec.basal_scale), _dumps(rec.to_dict())])
    return written

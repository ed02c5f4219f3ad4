import dataclasses
import json
import os

import pytest

from glucotrial.controller import ControllerHyperparameters
from glucotrial.population import generate_population
from glucotrial.protocol import compose_year
from glucotrial.simulation import NorthernYearProtocol, SimulationConfig, run_trial
from glucotrial.storage import (
    CorruptArtifactError,
    MissingArtifactError,
    PopulationFilter,
    Store,
    TrialRecord,
    export_sql,
    query_population,
    report_bytes,
    rerun_trial,
    sql_ddl,
)


@pytest.fixture()
def store(tmp_path):
    return Store(str(tmp_path / "store"))


def _file_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestRoundTrips:
    def test_population_round_trip_bytes(self, store, small_population, tmp_path):
        patients = [p for p, _ in small_population]
        path1 = store.save_population("pop-a", patients)
        loaded = store.load_population("pop-a")
        assert [p.to_dict() for p in loaded] == [p.to_dict() for p in patients]
        other = Store(str(tmp_path / "other"))
        path2 = other.save_population("pop-a", loaded)
        assert _file_bytes(path1) == _file_bytes(path2)

    def test_parameter_sets_round_trip(self, store, small_population):
        entries = [(p.id, ps) for p, ps in small_population]
        store.save_parameter_sets("pop-a", entries)
        loaded = store.load_parameter_sets("pop-a")
        assert [(pid, ps.to_dict()) for pid, ps in loaded] == [
            (pid, ps.to_dict()) for pid, ps in entries
        ]

    def test_cohort_round_trip(self, store, small_population):
        store.save_cohort("c1", small_population)
        loaded = store.load_cohort("c1")
        assert [(p.to_dict(), ps.to_dict()) for p, ps in loaded] == [
            (p.to_dict(), ps.to_dict()) for p, ps in small_population
        ]

    def test_protocols_round_trip(self, store):
        protos = [compose_year(3, 70.0), compose_year(4, 80.0)]
        store.save_protocols("year-set", protos)
        loaded = store.load_protocols("year-set")
        assert [p.to_dict() for p in loaded] == [p.to_dict() for p in protos]

    def test_report_round_trip_bytes(self, store):
        report = {"schema": "glucotrial/trial-report/1", "x": [1.5, 2.25], "n": 3}
        store.save_report("t1", report)
        assert store.load_report("t1") == report
        assert _file_bytes(os.path.join(store.trial_dir("t1"), "report.json")) == report_bytes(report)

    def test_profile_round_trip_by_hash(self, store, profile):
        h = store.save_profile(profile)
        assert h == profile.content_hash()
        loaded = store.load_profile(h)
        assert loaded == profile

    def test_trial_record_round_trip(self, store, profile):
        record = TrialRecord.create(
            trial_id="t2", seed=5, model_id="hovorka_ext", controller_id="dual_hormone",
            profile_hash=profile.content_hash(), population_ref="pop-a",
            protocol_generator={"kind": "northern_year"}, basal_scale=1.0,
            config={"horizon_s": 86400.0, "seed": 5},
        )
        store.save_trial_record(record)
        assert store.load_trial_record("t2") == record
        assert store.list_trials() == ["t2"]


class TestIntegrity:
    def test_missing_artifacts(self, store):
        with pytest.raises(MissingArtifactError):
            store.load_population("nope")
        with pytest.raises(MissingArtifactError):
            store.load_report("nope")
        with pytest.raises(MissingArtifactError):
            store.load_profile("feedface")

    def test_single_bit_corruption_detected(self, store, small_population):
        path = store.save_population("pop-a", [p for p, _ in small_population])
        data = bytearray(_file_bytes(path))
        data[len(data) // 2] ^= 0x01
        with open(path, "wb") as fh:
            fh.write(bytes(data))
        with pytest.raises(CorruptArtifactError):
            store.load_population("pop-a")

    def test_truncation_detected(self, store, small_population):
        path = store.save_population("pop-b", [p for p, _ in small_population])
        data = _file_bytes(path)
        with open(path, "wb") as fh:
            fh.write(data[: len(data) - 40])
        with pytest.raises(CorruptArtifactError):
            store.load_population("pop-b")

    def test_tampered_profile_hash_mismatch(self, store, profile):
        h = store.save_profile(profile)
        path = os.path.join(store.root, "profiles", f"{h}.json")
        raw = json.loads(_file_bytes(path))
        raw["setpoint"] = 7.0
        blob = (json.dumps(raw, sort_keys=True, separators=(",", ":")) + "\n").encode()
        with open(path, "wb") as fh:
            fh.write(blob)
        import hashlib

        with open(path + ".sha256", "w") as fh:
            fh.write(hashlib.sha256(blob).hexdigest() + "\n")
        with pytest.raises(CorruptArtifactError):
            store.load_profile(h)


class TestQueries:
    def test_empty_and_universal_match(self, small_population):
        patients = [p for p, _ in small_population]
        assert query_population(patients, PopulationFilter(sex="male", min_weight_kg=1e9)) == []
        assert query_population(patients, PopulationFilter()) == patients

    def test_weight_window_on_degenerate_population(self):
        import datetime

        from glucotrial.population import Patient

        patients = [
            Patient(id=i, first_name="A", last_name="B",
                    date_of_birth=datetime.date(1980, 1, 1), place_of_birth="C",
                    sex="female", height_cm=170.0, body_weight_kg=70.0,
                    resting_heart_rate_bpm=60.0)
            for i in range(5)
        ]
        flt = PopulationFilter(min_weight_kg=69.0, max_weight_kg=71.0)
        assert query_population(patients, flt) == patients

    def test_random_filters_match_bruteforce(self, small_population, rng):
        patients = [p for p, _ in small_population]
        for _ in range(25):
            lo, hi = sorted(rng.uniform(40, 120, size=2))
            sex = rng.choice([None, "female", "male"])
            flt = PopulationFilter(sex=None if sex is None else str(sex),
                                   min_weight_kg=lo, max_weight_kg=hi)
            expected = [
                p for p in patients
                if (sex is None or p.sex == sex) and lo <= p.body_weight_kg <= hi
            ]
            assert query_population(patients, flt) == expected

    def test_pairs_are_filtered_by_patient(self, small_population):
        out = query_population(small_population, PopulationFilter(sex="female"))
        assert all(p.sex == "female" for p, _ in out)
        assert all(isinstance(entry, tuple) for entry in out)

    def test_age_filter(self, small_population):
        import datetime

        patients = [p for p, _ in small_population]
        flt = PopulationFilter(min_age_years=30.0, as_of=datetime.date(2026, 1, 1))
        out = query_population(patients, flt)
        assert all(p.age_years(datetime.date(2026, 1, 1)) >= 30.0 for p in out)


class TestRerun:
    def test_rerun_reproduces_report_bytes(self, store, small_population, profile):
        store.save_cohort("pop-a", small_population[:6])
        config = SimulationConfig(horizon_s=2 * 86400.0, seed=21)
        generator = NorthernYearProtocol()
        result = run_trial(small_population[:6], generator, "dual_hormone", profile,
                           "hovorka_ext", config, workers=1, basal_scale=1.0,
                           run_meta={"trial_id": "trial-x", "population_ref": "pop-a"})
        profile_hash = store.save_profile(profile)
        store.save_report("trial-x", result.report)
        record = TrialRecord.create(
            trial_id="trial-x", seed=config.seed, model_id="hovorka_ext",
            controller_id="dual_hormone", profile_hash=profile_hash,
            population_ref="pop-a", protocol_generator=generator.describe(),
            basal_scale=1.0, config=config.to_dict(),
        )
        store.save_trial_record(record)

        fresh = rerun_trial(store, store.load_trial_record("trial-x"))
        assert report_bytes(fresh.report) == report_bytes(store.load_report("trial-x"))


def test_sql_export(store, small_population, tmp_path, profile):
    store.save_cohort("pop-a", small_population[:4])
    store.save_protocols("protos", [compose_year(1, 70.0)])
    record = TrialRecord.create(
        trial_id="t", seed=1, model_id="hovorka_ext", controller_id="dual_hormone",
        profile_hash=store.save_profile(profile), population_ref="pop-a",
        protocol_generator={"kind": "northern_year"}, basal_scale=1.0,
        config={"horizon_s": 86400.0, "seed": 1},
    )
    store.save_trial_record(record)
    out = tmp_path / "sql"
    written = export_sql(store, str(out))
    names = {os.path.basename(p) for p in written}
    assert {"schema.sql", "patients.csv", "parameter_sets.csv", "protocols.csv",
            "disturbances.csv", "trials.csv"} <= names
    assert "CREATE TABLE patients" in sql_ddl()
    patients_csv = (out / "patients.csv").read_text().splitlines()
    assert len(patients_csv) == 1 + 4

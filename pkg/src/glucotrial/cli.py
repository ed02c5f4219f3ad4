"""Command-line interface: generate cohorts, run trials, compare, export.

Runs are manifest-driven: one YAML file references the population, model,
controller profile and simulation configuration, and is embedded in the
trial record so any run can be reproduced from its store. Progress goes to
stderr; summaries go to stdout (``--format structured`` for JSON).

Exit codes: 0 success, 2 configuration error, 3 data/artifact error,
4 runtime error.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np
import yaml

from . import __version__, analytics
from .controller import ControllerHyperparameters, ProfileError, load_profile
from .hovorka import load_parameter_table
from .physiology import get_model
from .population import PopulationError, generate_population, load_demographics
from .protocol import AnnouncementPolicy, ProtocolError
from .simulation import (
    TRACE_COLUMNS,
    NorthernYearProtocol,
    SimulationConfig,
    SimulationError,
    load_trace,
    run_trial,
    save_trace,
)
from .storage import (
    CorruptArtifactError,
    MissingArtifactError,
    Store,
    StorageError,
    TrialRecord,
    export_sql,
    report_bytes,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

_CONFIG_ERRORS = (ProfileError, ProtocolError, SimulationError, PopulationError,
                  ValueError, KeyError)
_DATA_ERRORS = (MissingArtifactError, CorruptArtifactError, StorageError,
                FileNotFoundError)


class _Fail(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except _DATA_ERRORS as exc:
        raise _Fail(str(exc), EXIT_DATA) from exc
    except _CONFIG_ERRORS as exc:
        raise _Fail(str(exc), EXIT_CONFIG) from exc
    except Exception as exc:  # pragma: no cover - defensive
        raise _Fail(f"runtime error: {exc}", EXIT_RUNTIME) from exc


def _progress(label):
    def cb(done, total):
        if done == total or done % 512 == 0:
            print(f"[{label}] {done}/{total}", file=sys.stderr, flush=True)

    return cb


@click.group()
@click.version_option(version=__version__, prog_name="glucotrial")
def main():
    """Virtual clinical trials of closed-loop diabetes treatments."""


@main.command("generate-population")
@click.option("--seed", type=int, required=True, help="population seed")
@click.option("--patients", "-n", type=int, required=True, help="number of patients")
@click.option("--store", "store_dir", type=click.Path(), required=True, help="store directory")
@click.option("--id", "cohort_id", default=None, help="cohort id (default pop-<seed>-<n>)")
@click.option("--demographics", "demographics_path", type=click.Path(exists=True), default=None)
@click.option("--distributions", "distributions_path", type=click.Path(exists=True), default=None)
@click.option("--threads", type=int, default=None, help="worker processes (default: CPU count)")
@click.option("--format", "fmt", type=click.Choice(["text", "structured"]), default="text")
def cmd_generate_population(seed, patients, store_dir, cohort_id, demographics_path,
                            distributions_path, threads, fmt):
    """Generate a cohort (patients + parameter sets) into a store."""
    import time

    if patients < 1:
        raise _Fail("--patients must be >= 1", EXIT_CONFIG)
    cohort_id = cohort_id or f"pop-{seed}-{patients}"
    threads = threads or os.cpu_count() or 1
    demographics = _guard(load_demographics, demographics_path)
    table = _guard(load_parameter_table, distributions_path)
    t0 = time.perf_counter()
    entries, stats = _guard(
        generate_population, seed, patients, demographics, table,
        workers=threads, progress=_progress("generate"),
    )
    wall = time.perf_counter() - t0
    store = Store(store_dir)
    store.save_cohort(cohort_id, entries)
    summary = {
        "cohort_id": cohort_id,
        "n_patients": len(entries),
        "seed": seed,
        "acceptance_rate": stats.acceptance_rate,
        "attempts": stats.attempts,
        "wall_s": round(wall, 3),
        "patients_per_s": round(len(entries) / wall, 1) if wall > 0 else None,
        "store": store.root,
    }
    if fmt == "structured":
        print(json.dumps(summary, sort_keys=True))
    else:
        print(f"cohort {cohort_id}: {len(entries)} patients "
              f"(acceptance {stats.acceptance_rate:.1%}, {wall:.1f}s)")
        print(f"stored in {store.root}")


def _load_manifest(path: str) -> dict:
    with open(path) as fh:
        manifest = yaml.safe_load(fh)
    if manifest.get("schema") != "glucotrial/manifest/1":
        raise _Fail(f"unsupported manifest schema: {manifest.get('schema')!r}", EXIT_CONFIG)
    for key in ("trial_id", "seed", "store", "population", "model", "controller",
                "protocol", "simulation"):
        if key not in manifest:
            raise _Fail(f"manifest is missing {key!r}", EXIT_CONFIG)
    return manifest


def _resolve_manifest(manifest: dict, store_trace_override=None):
    store = Store(manifest["store"])
    population = _guard(store.load_cohort, manifest["population"])
    model = _guard(get_model, manifest["model"])
    ctl = manifest["controller"]
    if ctl.get("id") != "dual_hormone" and ctl.get("profile") is None:
        raise _Fail("non-default controllers need an explicit profile", EXIT_CONFIG)
    profile = _guard(load_profile, ctl.get("profile"))
    proto = manifest["protocol"]
    if proto.get("kind") != "northern_year":
        raise _Fail(f"unknown protocol kind {proto.get('kind')!r}", EXIT_CONFIG)
    generator = NorthernYearProtocol(
        announcement=AnnouncementPolicy(
            fraction_unannounced=float(proto.get("fraction_unannounced", 0.0)),
            misannouncement_factor_range=tuple(
                proto.get("misannouncement_factor_range", (1.0, 1.0))
            ),
        ),
        basis_days_path=proto.get("basis_days"),
    )
    sim = dict(manifest["simulation"])
    if store_trace_override:
        sim["store_trace"] = store_trace_override
    config = _guard(lambda: SimulationConfig(seed=int(manifest["seed"]), **sim))
    return store, population, model, ctl, profile, generator, config


@main.command("run")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--threads", type=int, default=None, help="worker processes (default: CPU count)")
@click.option("--store-trace", type=click.Choice(["never", "worst_case_only", "always"]),
              default=None, help="override the manifest's trace policy")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="also copy report and figure data here")
@click.option("--format", "fmt", type=click.Choice(["text", "structured"]), default="text")
def cmd_run(manifest_path, threads, store_trace, out_dir, fmt):
    """Run the trial described by a manifest; writes report + record."""
    manifest = _load_manifest(manifest_path)
    store, population, model, ctl, profile, generator, config = _resolve_manifest(
        manifest, store_trace
    )
    threads = threads or os.cpu_count() or 1
    trial_id = str(manifest["trial_id"])
    trial_dir = store.trial_dir(trial_id)
    basal_scale = float(ctl.get("basal_scale", 1.0))

    result = _guard(
        run_trial,
        population, generator, ctl["id"], profile, manifest["model"], config,
        workers=threads, basal_scale=basal_scale,
        run_meta={"trial_id": trial_id, "population_ref": manifest["population"]},
        trace_dir=os.path.join(trial_dir, "traces"),
        progress=_progress("run"),
    )

    profile_hash = store.save_profile(profile)
    store.save_report(trial_id, result.report)
    record = TrialRecord.create(
        trial_id=trial_id, seed=config.seed, model_id=manifest["model"],
        controller_id=ctl["id"], profile_hash=profile_hash,
        population_ref=manifest["population"],
        protocol_generator=generator.describe(), basal_scale=basal_scale,
        config=config.to_dict(), workers_hint=threads,
    )
    store.save_trial_record(record)
    analytics.write_figure_csvs(result.report, os.path.join(trial_dir, "figures"))
    if result.worst_trace is not None:
        os.makedirs(os.path.join(trial_dir, "traces"), exist_ok=True)
        worst_id = result.report["worst_case"]["patient_id"]
        save_trace(
            os.path.join(trial_dir, "traces", f"patient_{worst_id:06d}.npz"),
            result.worst_trace,
        )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "wb") as fh:
            fh.write(report_bytes(result.report))
        analytics.write_figure_csvs(result.report, os.path.join(out_dir, "figures"))

    tir = result.report["tir"]
    summary = {
        "trial_id": trial_id,
        "n_patients": result.report["n_patients"],
        "n_aborted": result.report["n_aborted"],
        "mean_tir": dict(zip(tir["ranges"], tir["mean"])),
        "mean_bg": result.report["bg"]["mean"],
        "worst_case_min_bg": result.report["worst_case"]["min_bg"],
        "wall_s": round(result.wall_s, 3),
        "report": os.path.join(trial_dir, "report.json"),
    }
    if fmt == "structured":
        print(json.dumps(summary, sort_keys=True))
    else:
        print(f"trial {trial_id}: {summary['n_patients']} patients "
              f"({summary['n_aborted']} aborted), wall {result.wall_s:.1f}s")
        for name, frac in summary["mean_tir"].items():
            print(f"  mean TIR {name:12s} {frac:7.2%}")
        print(f"  mean BG {summary['mean_bg']:.2f} mmol/L, "
              f"worst-case min BG {summary['worst_case_min_bg']:.2f} mmol/L")
        print(f"  report: {summary['report']}")


def _load_report_arg(store_arg: str, ref: str) -> dict:
    """Accept either a report.json path or a trial id within --store."""
    if os.path.isfile(ref):
        with open(ref) as fh:
            return json.load(fh)
    if store_arg is None:
        raise _Fail(f"{ref!r} is not a file; pass --store to resolve trial ids", EXIT_CONFIG)
    return Store(store_arg).load_report(ref)


@main.command("compare")
@click.argument("report_a")
@click.argument("report_b")
@click.option("--store", "store_dir", type=click.Path(), default=None,
              help="store directory for resolving trial ids")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--format", "fmt", type=click.Choice(["text", "structured"]), default="text")
def cmd_compare(report_a, report_b, store_dir, out_dir, fmt):
    """Compare two trial reports (A vs B); writes overlay figure data."""
    rep_a = _guard(_load_report_arg, store_dir, report_a)
    rep_b = _guard(_load_report_arg, store_dir, report_b)
    comparison = _guard(analytics.compare_trials, rep_a, rep_b)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "comparison.json"), "w") as fh:
        json.dump(comparison, fh, sort_keys=True, indent=2)
        fh.write("\n")
    analytics.write_comparison_csvs(comparison, out_dir)
    deltas = comparison["delta_b_minus_a"]
    if fmt == "structured":
        print(json.dumps(deltas, sort_keys=True))
    else:
        print("deltas (B - A):")
        print(f"  mean BG           {deltas['mean_bg']:+.3f} mmol/L")
        for name, d in deltas["mean_tir"].items():
            print(f"  mean TIR {name:12s} {d:+.2%}")
        for s, d in deltas["mean_daily_doses"].items():
            print(f"  mean daily {s:12s} {d:+.3f}")
        print(f"  outputs in {out_dir}")


@main.command("export-trace")
@click.option("--store", "store_dir", type=click.Path(exists=True), required=True)
@click.option("--trial", "trial_id", required=True)
@click.option("--patient", "patient_sel", default="worst",
              help="'worst' or a patient id (requires store_trace=always run)")
@click.option("--start", "start_s", type=float, default=0.0, help="window start, s")
@click.option("--end", "end_s", type=float, default=None, help="window end, s (default horizon)")
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_export_trace(store_dir, trial_id, patient_sel, start_s, end_s, out_path):
    """Export a retained trace window as a columnar CSV (8 signal columns)."""
    store = Store(store_dir)
    report = _guard(store.load_report, trial_id)
    if patient_sel == "worst":
        patient_id = report["worst_case"]["patient_id"]
    else:
        patient_id = int(patient_sel)
    trace_path = os.path.join(store.trial_dir(trial_id), "traces",
                              f"patient_{patient_id:06d}.npz")
    if not os.path.exists(trace_path):
        raise _Fail(
            f"no retained trace for patient {patient_id}; re-run with "
            "store_trace=always or select the worst-case patient",
            EXIT_DATA,
        )
    trace = _guard(load_trace, trace_path)
    dt = report["dt_s"]
    horizon_s = report["horizon_ticks"] * dt
    if end_s is None:
        end_s = horizon_s
    if not (0 <= start_s < end_s <= horizon_s):
        raise _Fail(
            f"window [{start_s}, {end_s}) outside the horizon [0, {horizon_s})",
            EXIT_CONFIG,
        )
    lo, hi = int(start_s // dt), int(end_s // dt)
    rows = trace[lo:hi]
    with open(out_path, "w") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {len(rows)} rows x {len(TRACE_COLUMNS)} columns to {out_path}")


@main.command("export-sql")
@click.option("--store", "store_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_export_sql(store_dir, out_dir):
    """Export the store as SQL DDL plus COPY-ready CSV files."""
    written = _guard(export_sql, Store(store_dir), out_dir)
    for path in written:
        print(path)


@main.command("rerun")
@click.option("--store", "store_dir", type=click.Path(exists=True), required=True)
@click.option("--trial", "trial_id", required=True)
@click.option("--threads", type=int, default=None)
@click.option("--check/--no-check", default=True,
              help="verify the fresh report matches the stored one byte-for-byte")
def cmd_rerun(store_dir, trial_id, threads, check):
    """Re-execute a recorded trial from its TrialRecord."""
    from .storage import rerun_trial

    store = Store(store_dir)
    record = _guard(store.load_trial_record, trial_id)
    result = _guard(rerun_trial, store, record, workers=threads or os.cpu_count() or 1)
    if check:
        stored = store.load_report(trial_id)
        if report_bytes(stored) != report_bytes(result.report):
            raise _Fail("re-run report differs from the stored report", EXIT_RUNTIME)
        print(f"trial {trial_id}: re-run reproduced the stored report byte-identically")
    else:
        print(f"trial {trial_id}: re-run complete ({result.wall_s:.1f}s)")


if __name__ == "__main__":
    main()

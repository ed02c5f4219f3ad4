"""Closed-loop simulation of single patients and parallel trial execution.

The integration scheme is explicit Euler-Maruyama at a fixed step (30 s by
default) with controller decisions held piecewise constant over each
controller period (5 min by default) and disturbances held piecewise
constant on the integration grid. Statistics stream into per-patient
accumulators at every step; whole trials merge those exactly, so a trial
report is a pure function of (population, protocol generator, controller
configuration, model, seed) regardless of worker count.

Two engines produce identical trajectories up to floating-point noise: a
fused numba kernel for the bundled model/controller pair, and a generic
pure-Python loop for pluggable models and controllers.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analytics, hovorka
from ._kernel import (
    SCAL_LAST_Y,
    SCAL_MAX_BG,
    SCAL_MIN_BG,
    SCAL_SUM_BG,
    N_SCAL,
    STATUS_NONFINITE,
    STATUS_OK,
    noise_active,
    simulate_block,
)
from .analytics import PatientStats, TrialAccumulator
from .controller import DualHormoneController, get_controller_factory
from .physiology import ModelDefinition, get_model
from .protocol import AnnouncementPolicy, Protocol, apply_announcement_policy, compose_year, validate_protocol
from .rng import (
    ROLE_ANNOUNCEMENT,
    ROLE_MEASUREMENT_NOISE,
    ROLE_PROCESS_NOISE,
    ROLE_PROTOCOL,
    derive_seed,
    stream,
)

STORE_TRACE_MODES = ("never", "worst_case_only", "always")

# Patients per worker task; fixed (not derived from the worker count) so the
# reduction structure is identical for any parallelism.
CHUNK_PATIENTS = 32

# Target integration steps per kernel call; bounds noise-buffer memory.
_BLOCK_TARGET_STEPS = 20160  # one week at dt = 30 s

TRACE_COLUMNS = (
    "t_s", "bg_mmol_per_l", "cgm_mmol_per_l", "cho_g_per_min", "hrr",
    "basal_u_per_h", "bolus_u", "glucagon_ug",
)


class SimulationError(RuntimeError):
    """Raised for invalid simulation configurations or diverged states."""


@dataclass(frozen=True)
class SimulationConfig:
    horizon_s: float
    seed: int
    dt_s: float = 30.0
    controller_period_s: float = 300.0
    store_trace: str = "never"
    initial_bg_mmol_per_l: float = 6.0
    grid_step_s: float = 3600.0
    engine: str = "auto"  # auto | fast | python

    def __post_init__(self):
        if self.dt_s <= 0:
            raise SimulationError("dt must be positive")
        for name, mult, base in (
            ("controller period", self.controller_period_s, self.dt_s),
            ("horizon", self.horizon_s, self.controller_period_s),
            ("grid step", self.grid_step_s, self.dt_s),
        ):
            ratio = mult / base
            if mult <= 0 or abs(ratio - round(ratio)) > 1e-9:
                raise SimulationError(f"{name} must be a positive integer multiple of its base step")
        if self.store_trace not in STORE_TRACE_MODES:
            raise SimulationError(f"store_trace must be one of {STORE_TRACE_MODES}")
        if self.engine not in ("auto", "fast", "python"):
            raise SimulationError("engine must be auto, fast or python")
        if self.initial_bg_mmol_per_l <= 0:
            raise SimulationError("initial BG must be positive")

    @property
    def horizon_ticks(self) -> int:
        return int(round(self.horizon_s / self.dt_s))

    @property
    def period_steps(self) -> int:
        return int(round(self.controller_period_s / self.dt_s))

    @property
    def grid_step_ticks(self) -> int:
        return int(round(self.grid_step_s / self.dt_s))

    @property
    def n_grid(self) -> int:
        return -(-self.horizon_ticks // self.grid_step_ticks)

    @property
    def n_days(self) -> int:
        return max(1, math.ceil(self.horizon_s / 86400.0))

    def to_dict(self) -> dict:
        return {
            "horizon_s": self.horizon_s,
            "seed": self.seed,
            "dt_s": self.dt_s,
            "controller_period_s": self.controller_period_s,
            "store_trace": self.store_trace,
            "initial_bg_mmol_per_l": self.initial_bg_mmol_per_l,
            "grid_step_s": self.grid_step_s,
            "engine": self.engine,
        }


@dataclass
class SimulationResult:
    patient_id: int
    status: str  # "ok" | "nonfinite"
    stats: PatientStats
    min_bg: float
    trace: np.ndarray | None = None  # (ticks, 8) per TRACE_COLUMNS


@dataclass(frozen=True)
class ProtocolArrays:
    """Protocol compiled to the flat event arrays the steppers walk."""

    meals_start: np.ndarray
    meals_end: np.ndarray
    meals_rate: np.ndarray  # g CHO per minute while active
    meals_ann: np.ndarray  # announced grams (0 when unannounced)
    ex_start: np.ndarray
    ex_end: np.ndarray
    ex_hrr: np.ndarray
    ex_announced: np.ndarray


def compile_protocol(protocol: Protocol, horizon_s: float) -> ProtocolArrays:
    meals = [d for d in protocol.disturbances if d.kind == "meal" and d.start_s < horizon_s]
    ex = [d for d in protocol.disturbances if d.kind == "exercise" and d.start_s < horizon_s]
    return ProtocolArrays(
        meals_start=np.array([m.start_s for m in meals]),
        meals_end=np.array([m.end_s for m in meals]),
        meals_rate=np.array([m.magnitude / ((m.end_s - m.start_s) / 60.0) for m in meals]),
        meals_ann=np.array([m.announced_magnitude if m.announced else 0.0 for m in meals]),
        ex_start=np.array([e.start_s for e in ex]),
        ex_end=np.array([e.end_s for e in ex]),
        ex_hrr=np.array([e.magnitude for e in ex]),
        ex_announced=np.array([1.0 if e.announced else 0.0 for e in ex]),
    )


def euler_maruyama_step(model: ModelDefinition, x, u, d, p, t_s: float, dt_s: float,
                        rng: np.random.Generator) -> np.ndarray:
    """One explicit Euler-Maruyama step with nonnegativity projection.

    The Wiener increment has covariance I*dt; the diffusion is evaluated at
    the pre-step state. Raises on a non-finite result.
    """
    if dt_s <= 0:
        raise SimulationError("dt must be positive")
    t_min = t_s / 60.0
    dt_min = dt_s / 60.0
    f = model.drift(t_min, x, u, d, p)
    mat = model.diffusion(t_min, x, u, d, p)
    dw = rng.standard_normal(model.wiener_dim) * np.sqrt(dt_min)
    out = x + f * dt_min + mat @ dw
    if not np.all(np.isfinite(out)):
        raise SimulationError(
            f"state became non-finite at t={t_s:.0f}s; check parameters and step size"
        )
    return np.maximum(out, 0.0)


def _model_noise_active(model: ModelDefinition, p: np.ndarray) -> bool:
    if model.model_id == "hovorka_ext":
        return noise_active(p)
    return True  # generic models: always draw, zero diffusion just ignores it


def _python_block(model, p, controller, cholder, x,
                  t0_s, n_steps, dt_s, period_steps, period_s,
                  pa: ProtocolArrays, ptrs, wiener, meas_norm,
                  stats: PatientStats, scal, grid_step_ticks, global_tick0, trace):
    """Generic mirror of the numba kernel for pluggable models/controllers."""
    n_meals = pa.meals_start.shape[0]
    n_ex = pa.ex_start.shape[0]
    has_noise = wiener.shape[0] > 0
    record_trace = trace.shape[0] > 0
    dt_min = dt_s / 60.0
    sqrt_dt_min = np.sqrt(dt_min)
    r_var = model.noise_variance(p)
    sqrt_r = np.sqrt(r_var)

    u = np.zeros(3)
    d = np.zeros(2)
    meal_ptr, ann_ptr, ex_ptr = int(ptrs[0]), int(ptrs[1]), int(ptrs[2])
    tick_idx = 0
    basal_uh = 0.0

    for i in range(n_steps):
        t = t0_s + i * dt_s
        global_tick = global_tick0 + i

        while meal_ptr < n_meals and pa.meals_end[meal_ptr] <= t:
            meal_ptr += 1
        d[0] = pa.meals_rate[meal_ptr] if meal_ptr < n_meals and pa.meals_start[meal_ptr] <= t else 0.0
        while ex_ptr < n_ex and pa.ex_end[ex_ptr] <= t:
            ex_ptr += 1
        ex_active = ex_ptr < n_ex and pa.ex_start[ex_ptr] <= t
        d[1] = pa.ex_hrr[ex_ptr] if ex_active else 0.0

        bolus_u = 0.0
        glucagon_ug = 0.0
        if i % period_steps == 0:
            if not np.all(np.isfinite(x)):
                ptrs[:] = (meal_ptr, ann_ptr, ex_ptr)
                return STATUS_NONFINITE
            while ann_ptr < n_meals and pa.meals_start[ann_ptr] < t:
                ann_ptr += 1
            announced = 0.0
            j = ann_ptr
            while j < n_meals and pa.meals_start[j] < t + period_s:
                announced += pa.meals_ann[j]
                j += 1
            if ex_active and pa.ex_announced[ex_ptr] != 0.0:
                phase = t - pa.ex_start[ex_ptr]
            else:
                phase = -1.0
            y = model.measure_mean(t / 60.0, x, p) + sqrt_r * meas_norm[tick_idx]
            tick_idx += 1
            scal[SCAL_LAST_Y] = y
            new_state, decision = controller.step(cholder[0], y, announced, phase, t, period_s)
            cholder[0] = new_state
            basal_uh = decision.basal_rate_u_per_h
            bolus_u = decision.insulin_bolus_u
            glucagon_ug = decision.glucagon_bolus_ug
            u[0] = basal_uh * 1000.0 / 60.0
            u[1] = bolus_u * 1000.0 / (period_s / 60.0)
            u[2] = glucagon_ug / (period_s / 60.0)
            if bolus_u > 0.0 or glucagon_ug > 0.0:
                day = int(t // 86400.0)
                stats.day_dose[day, 1] += bolus_u
                stats.day_dose[day, 2] += glucagon_ug

        bg = model.output(t / 60.0, x, p)
        if not np.isfinite(bg):
            ptrs[:] = (meal_ptr, ann_ptr, ex_ptr)
            return STATUS_NONFINITE
        stats.tir_ticks[int(np.searchsorted(analytics.RANGE_BOUNDS, bg, side="right"))] += 1
        stats.bg_hist[int(np.searchsorted(analytics.THRESHOLDS, bg, side="right"))] += 1
        if bg < scal[SCAL_MIN_BG]:
            scal[SCAL_MIN_BG] = bg
        if bg > scal[SCAL_MAX_BG]:
            scal[SCAL_MAX_BG] = bg
        scal[SCAL_SUM_BG] += bg
        day = int(t // 86400.0)
        stats.day_dose[day, 0] += basal_uh
        if global_tick % grid_step_ticks == 0:
            stats.timeline_bg[global_tick // grid_step_ticks] = bg
        if record_trace:
            trace[i, 0] = t
            trace[i, 1] = bg
            trace[i, 2] = scal[SCAL_LAST_Y]
            trace[i, 3] = d[0]
            trace[i, 4] = d[1]
            trace[i, 5] = basal_uh
            trace[i, 6] = bolus_u
            trace[i, 7] = glucagon_ug

        f = model.drift(t / 60.0, x, u, d, p)
        if has_noise:
            mat = model.diffusion(t / 60.0, x, u, d, p)
            x += f * dt_min + mat @ (sqrt_dt_min * wiener[i])
        else:
            x += f * dt_min
        np.maximum(x, 0.0, out=x)

    ptrs[:] = (meal_ptr, ann_ptr, ex_ptr)
    return STATUS_OK


def _resolve_engine(config: SimulationConfig, model: ModelDefinition, controller) -> str:
    fast_ok = model.model_id == "hovorka_ext" and isinstance(controller, DualHormoneController)
    if config.engine == "fast":
        if not fast_ok:
            raise SimulationError(
                "fast engine requires the hovorka_ext model with the dual_hormone controller"
            )
        return "fast"
    if config.engine == "python":
        return "python"
    return "fast" if fast_ok else "python"


def _simulate_arrays(patient_id: int, params_values: dict, pa: ProtocolArrays,
                     controller, model: ModelDefinition, config: SimulationConfig,
                     record_trace: bool):
    p = model.pack_params(params_values)
    x, _ = model.steady_state(p, config.initial_bg_mmol_per_l)
    x = np.ascontiguousarray(x, dtype=np.float64)

    engine = _resolve_engine(config, model, controller)
    dt_s = config.dt_s
    period_steps = config.period_steps
    horizon_ticks = config.horizon_ticks

    stats = PatientStats(
        dt_s=dt_s, horizon_ticks=horizon_ticks, n_days=config.n_days, n_grid=config.n_grid,
    )
    scal = np.array([np.inf, -np.inf, 0.0, 0.0])
    ptrs = np.zeros(3, dtype=np.int64)
    trace_full = np.zeros((horizon_ticks, 8)) if record_trace else np.zeros((0, 8))

    wiener_rng = stream(config.seed, patient_id, ROLE_PROCESS_NOISE)
    meas_rng = stream(config.seed, patient_id, ROLE_MEASUREMENT_NOISE)
    use_noise = _model_noise_active(model, p)
    r_var = model.noise_variance(p)

    if engine == "fast":
        c_vec = controller.initial_state().to_vec()
        hyper_vec = controller.hyper_vec
        assumed_basal = controller.assumed_basal_u_per_h
    else:
        cholder = [controller.initial_state()]

    block = period_steps * max(1, _BLOCK_TARGET_STEPS // period_steps)
    done = 0
    status_code = STATUS_OK
    while done < horizon_ticks:
        n = min(block, horizon_ticks - done)
        wiener = (
            wiener_rng.standard_normal((n, model.wiener_dim))
            if use_noise else np.zeros((0, model.wiener_dim))
        )
        n_ticks_blk = n // period_steps
        meas = (
            meas_rng.standard_normal(n_ticks_blk) if r_var > 0.0 else np.zeros(n_ticks_blk)
        )
        tr = trace_full[done:done + n] if record_trace else trace_full[:0]
        if engine == "fast":
            status_code = simulate_block(
                x, c_vec, p, hyper_vec, assumed_basal,
                done * dt_s, n, dt_s, period_steps, config.controller_period_s,
                pa.meals_start, pa.meals_end, pa.meals_rate, pa.meals_ann,
                pa.ex_start, pa.ex_end, pa.ex_hrr, pa.ex_announced,
                ptrs, wiener, meas,
                analytics.RANGE_BOUNDS, analytics.THRESHOLDS,
                stats.tir_ticks, stats.bg_hist, scal, stats.day_dose,
                stats.timeline_bg, config.grid_step_ticks, done, tr,
            )
        else:
            status_code = _python_block(
                model, p, controller, cholder, x,
                done * dt_s, n, dt_s, period_steps, config.controller_period_s,
                pa, ptrs, wiener, meas, stats, scal,
                config.grid_step_ticks, done, tr,
            )
        if status_code != STATUS_OK:
            break
        done += n

    stats.ticks = int(stats.tir_ticks.sum())
    stats.min_bg = float(scal[SCAL_MIN_BG])
    stats.max_bg = float(scal[SCAL_MAX_BG])
    stats.sum_bg = float(scal[SCAL_SUM_BG])
    return SimulationResult(
        patient_id=patient_id,
        status="ok" if status_code == STATUS_OK else "nonfinite",
        stats=stats,
        min_bg=stats.min_bg,
        trace=trace_full[:stats.ticks] if record_trace else None,
    )


def simulate_closed_loop(patient, parameter_set, protocol: Protocol, controller,
                         model: ModelDefinition, config: SimulationConfig,
                         record_trace: bool | None = None,
                         validate: bool = True) -> SimulationResult:
    """Simulate one patient closed loop over the configured horizon.

    ``controller`` is a controller object (see :mod:`glucotrial.controller`);
    ``parameter_set`` provides the named parameter map. The initial state is
    the fasting steady state at the configured initial BG.
    """
    if validate:
        violations = validate_protocol(protocol)
        if violations:
            raise SimulationError(f"invalid protocol: {violations[:3]}")
    if record_trace is None:
        record_trace = config.store_trace == "always"
    pa = compile_protocol(protocol, config.horizon_s)
    return _simulate_arrays(
        patient.id, parameter_set.values, pa, controller, model, config, record_trace
    )


# --------------------------------------------------------------------------
# Protocol generators (what a trial stores instead of materialized protocols)


@dataclass(frozen=True)
class NorthernYearProtocol:
    """Per-patient 52-week lifestyle protocol, seeded from the trial seed.

    Each patient gets an independent composition stream, so populations can
    grow without perturbing existing patients' schedules.
    """

    announcement: AnnouncementPolicy = field(default_factory=AnnouncementPolicy)
    basis_days_path: str | None = None

    def build(self, trial_seed: int, patient) -> Protocol:
        from .protocol import load_basis_days  # local import to use the cache

        basis = load_basis_days(self.basis_days_path)
        proto = compose_year(
            derive_seed(trial_seed, patient.id, ROLE_PROTOCOL),
            patient.body_weight_kg,
            basis_days=basis,
        )
        pol = self.announcement
        if pol.fraction_unannounced > 0.0 or pol.misannouncement_factor_range != (1.0, 1.0):
            proto = apply_announcement_policy(
                proto, pol, stream(trial_seed, patient.id, ROLE_ANNOUNCEMENT)
            )
        return proto

    def describe(self) -> dict:
        return {
            "kind": "northern_year",
            "fraction_unannounced": self.announcement.fraction_unannounced,
            "misannouncement_factor_range": list(self.announcement.misannouncement_factor_range),
            "basis_days_path": self.basis_days_path,
        }


@dataclass(frozen=True)
class FixedProtocol:
    """The same explicit protocol for every patient (tests, custom studies)."""

    protocol: Protocol

    def build(self, trial_seed: int, patient) -> Protocol:
        return self.protocol

    def describe(self) -> dict:
        return {"kind": "fixed", "protocol_id": self.protocol.id}


# --------------------------------------------------------------------------
# Trial orchestration


@dataclass
class TrialResult:
    report: dict
    accumulator: TrialAccumulator
    worst_trace: np.ndarray | None
    wall_s: float
    n_patients: int


def _empty_accumulator(config: SimulationConfig) -> TrialAccumulator:
    return TrialAccumulator(
        dt_s=config.dt_s,
        horizon_ticks=config.horizon_ticks,
        n_days=config.n_days,
        n_grid=config.n_grid,
        grid_step_s=config.grid_step_s,
    )


def _run_chunk(task):
    (entries, generator, controller_id, profile, model_id, config, basal_scale,
     trace_dir) = task
    model = get_model(model_id)
    factory = get_controller_factory(controller_id)
    acc = _empty_accumulator(config)
    record = config.store_trace == "always"
    for patient, pset in entries:
        protocol = generator.build(config.seed, patient)
        pa = compile_protocol(protocol, config.horizon_s)
        controller = factory(profile, pset.u_basal_u_per_h * basal_scale)
        try:
            result = _simulate_arrays(
                patient.id, pset.values, pa, controller, model, config, record
            )
        except hovorka.SteadyStateError:
            # no valid initial state for this parameter set: flag, don't kill
            acc.add_aborted(patient.id)
            continue
        if result.status != "ok":
            acc.add_aborted(patient.id)
            continue
        acc.add_patient(patient.id, result.stats)
        if record and trace_dir is not None:
            save_trace(os.path.join(trace_dir, f"patient_{patient.id:06d}.npz"), result.trace)
    return acc


def save_trace(path: str, trace: np.ndarray) -> None:
    np.savez_compressed(path, columns=np.array(TRACE_COLUMNS), trace=trace)


def load_trace(path: str) -> np.ndarray:
    with np.load(path) as data:
        if tuple(data["columns"]) != TRACE_COLUMNS:
            raise SimulationError(f"unexpected trace columns in {path}")
        return data["trace"]


_warmed_up = False


def _warmup_fast_path() -> None:
    """Compile the kernel in the parent so forked workers inherit it."""
    global _warmed_up
    if _warmed_up:
        return
    from .controller import load_profile
    from .population import Patient, ParameterSet

    config = SimulationConfig(horizon_s=300.0, seed=0, grid_step_s=300.0)
    values = hovorka.nominal_values(70.0)
    x, ub = hovorka.steady_state(hovorka.pack_params(values), 6.0)
    controller = DualHormoneController(load_profile(), ub)
    pa = compile_protocol(Protocol(id="warmup", horizon_s=300.0, disturbances=[]), 300.0)
    _simulate_arrays(0, values, pa, controller, get_model("hovorka_ext"), config, False)
    _warmed_up = True


def run_trial(population, protocol_generator, controller_id: str, profile,
              model_id: str, config: SimulationConfig, workers: int = 1,
              basal_scale: float = 1.0, run_meta: dict | None = None,
              trace_dir: str | None = None, progress=None) -> TrialResult:
    """Simulate every patient and merge the streaming statistics.

    The population is split into fixed-size chunks; chunk accumulators merge
    exactly, so the report is byte-identical for any ``workers`` value.
    Diverged patients are excluded from statistics and listed in the report.
    Under ``store_trace="worst_case_only"`` the worst patient (lowest BG,
    ties: more time below 3 mmol/L, then lower id) is re-simulated after the
    trial to retain its full trace.
    """
    if not population:
        raise SimulationError("population must be nonempty")
    if workers < 1:
        raise SimulationError("workers must be >= 1")
    if config.store_trace == "always" and trace_dir is not None:
        os.makedirs(trace_dir, exist_ok=True)

    t0 = time.perf_counter()
    chunks = [
        population[i:i + CHUNK_PATIENTS]
        for i in range(0, len(population), CHUNK_PATIENTS)
    ]
    tasks = [
        (chunk, protocol_generator, controller_id, profile, model_id, config,
         basal_scale, trace_dir if config.store_trace == "always" else None)
        for chunk in chunks
    ]

    acc = _empty_accumulator(config)
    done = 0
    if workers == 1:
        for task in tasks:
            acc = analytics.merge(acc, _run_chunk(task))
            done += len(task[0])
            if progress:
                progress(done, len(population))
    else:
        _warmup_fast_path()
        methods = mp.get_all_start_methods()
        ctx = mp.get_context("fork" if "fork" in methods else "spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for i, chunk_acc in enumerate(pool.map(_run_chunk, tasks)):
                acc = analytics.merge(acc, chunk_acc)
                done += len(chunks[i])
                if progress:
                    progress(done, len(population))
    wall_s = time.perf_counter() - t0

    if acc.n_patients == 0:
        raise SimulationError("all simulations diverged; nothing to report")

    meta = {
        "seed": config.seed,
        "n_patients": len(population),
        "model": model_id,
        "controller": controller_id,
        "profile_hash": profile.content_hash() if hasattr(profile, "content_hash") else None,
        "basal_scale": basal_scale,
        "protocol": protocol_generator.describe(),
        "config": config.to_dict(),
    }
    if run_meta:
        meta.update(run_meta)
    report = analytics.build_trial_report(acc, meta)

    worst_trace = None
    if config.store_trace in ("worst_case_only", "always") and acc.worst is not None:
        worst_trace = _resimulate_with_trace(
            population, acc.worst.patient_id, protocol_generator, controller_id,
            profile, model_id, config, basal_scale,
        )
    return TrialResult(
        report=report, accumulator=acc, worst_trace=worst_trace,
        wall_s=wall_s, n_patients=len(population),
    )


def _resimulate_with_trace(population, patient_id, protocol_generator, controller_id,
                           profile, model_id, config, basal_scale) -> np.ndarray:
    entry = next(((pt, ps) for pt, ps in population if pt.id == patient_id), None)
    if entry is None:
        raise SimulationError(f"worst-case patient {patient_id} not in population")
    patient, pset = entry
    model = get_model(model_id)
    controller = get_controller_factory(controller_id)(
        profile, pset.u_basal_u_per_h * basal_scale
    )
    protocol = protocol_generator.build(config.seed, patient)
    pa = compile_protocol(protocol, config.horizon_s)
    result = _simulate_arrays(patient.id, pset.values, pa, controller, model, config, True)
    return result.trace

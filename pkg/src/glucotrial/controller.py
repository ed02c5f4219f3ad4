"""Feedback controllers: the generic interface and the dual-hormone AP.

A controller is an object with ``initial_state()`` and
``step(state, y_k, announced_cho_g, exercise_phase_s, t_s, period_s)``
returning ``(new_state, ControlDecision)``. Controllers register under a
string id with a factory, which is the extension point for other control
strategies (PID, MPC, ...): they only need to produce decisions from sensor
readings, announcements and setpoint data carried in their own state.

The bundled controller is a dual-hormone heuristic that switches between an
insulin mode (basal microadjustments, a meal bolus calculator with
superboli, an insulin-to-carb ratio estimator) and a glucagon mode (fixed
microboli only). In both modes a 100 ug glucagon bolus is given at the
start of exercise when the filtered glucose is below 7 mmol/L, and no
insulin is delivered on that step. All gains and thresholds live in a
profile file (``data/controller_default.yaml``); several take different
values while the patient is exercising.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import json
from dataclasses import dataclass, field, replace

import numpy as np
import yaml
from numba import njit

# Hyperparameter vector layout (kernel-facing).
(HFILTER, HSETPOINT, HGLUCTHR, HHYST, HPREDHOR, HBKP, HBKD, HBFMAX, HSUPBG,
 HSUPFRAC, HSUSPMIN, HMICROUG, HLOCKMIN, HMICROTREND, HCFICR, HICRSTEP,
 HICRSTEPUP, HICRMIN, HICRMAX, HMEALWIN, HEXCHI, HUNDERBG, HMAXBOLUS,
 HMAXGLUC, HEXBOLUS, HEXBOLUSBG, HEXSETPOINT, HEXBFACTOR, HEXGLUCTHR,
 HEXMICROUG) = range(30)
N_HYPER = 30

# Controller state vector layout.
(CFILT, CPREV, CMODE, CICR, CSUSPEND_UNTIL, CEXBOLUSDONE, CLASTGLUC, CWINEND,
 CWINPEAK, CWINMIN, CINIT) = range(11)
N_CSTATE = 11

MODE_INSULIN = 0.0
MODE_GLUCAGON = 1.0

# Assumed basal share of total daily insulin, for the initial ICR guess.
_BASAL_FRACTION = 0.47


class ProfileError(ValueError):
    """Raised for malformed controller profiles."""


@dataclass(frozen=True)
class ExerciseOverrides:
    setpoint: float = 8.0
    basal_factor: float = 0.5
    gluc_threshold: float = 5.5
    microbolus_ug: float = 50.0


@dataclass(frozen=True)
class ControllerHyperparameters:
    filter_coeff: float = 0.35
    setpoint: float = 6.0
    gluc_threshold: float = 4.5
    mode_hysteresis: float = 0.5
    predict_horizon_min: float = 30.0
    basal_kp: float = 0.15
    basal_kd: float = 3.0
    basal_factor_max: float = 2.0
    superbolus_bg: float = 9.0
    superbolus_fraction: float = 0.5
    suspend_min: float = 90.0
    microbolus_ug: float = 40.0
    microbolus_lockout_min: float = 15.0
    microbolus_falling_trend: float = 0.0
    cf_per_icr: float = 0.3
    icr_initial_factor: float = 1.6
    icr_step: float = 0.05
    icr_step_up: float = 0.06
    icr_min: float = 2.0
    icr_max: float = 50.0
    meal_window_min: float = 240.0
    excursion_hi: float = 7.0
    undershoot_bg: float = 4.7
    max_bolus_u: float = 25.0
    max_glucagon_ug: float = 200.0
    exercise_bolus_ug: float = 100.0
    exercise_bolus_bg: float = 7.0
    exercise: ExerciseOverrides = field(default_factory=ExerciseOverrides)

    def __post_init__(self):
        if not 0.0 < self.filter_coeff <= 1.0:
            raise ProfileError("filter_coeff must be in (0, 1]")
        if not self.gluc_threshold < self.setpoint:
            raise ProfileError("glucagon-mode threshold must be below the setpoint")

    def to_vec(self) -> np.ndarray:
        v = np.empty(N_HYPER)
        v[HFILTER] = self.filter_coeff
        v[HSETPOINT] = self.setpoint
        v[HGLUCTHR] = self.gluc_threshold
        v[HHYST] = self.mode_hysteresis
        v[HPREDHOR] = self.predict_horizon_min
        v[HBKP] = self.basal_kp
        v[HBKD] = self.basal_kd
        v[HBFMAX] = self.basal_factor_max
        v[HSUPBG] = self.superbolus_bg
        v[HSUPFRAC] = self.superbolus_fraction
        v[HSUSPMIN] = self.suspend_min
        v[HMICROUG] = self.microbolus_ug
        v[HLOCKMIN] = self.microbolus_lockout_min
        v[HMICROTREND] = self.microbolus_falling_trend
        v[HCFICR] = self.cf_per_icr
        v[HICRSTEP] = self.icr_step
        v[HICRSTEPUP] = self.icr_step_up
        v[HICRMIN] = self.icr_min
        v[HICRMAX] = self.icr_max
        v[HMEALWIN] = self.meal_window_min
        v[HEXCHI] = self.excursion_hi
        v[HUNDERBG] = self.undershoot_bg
        v[HMAXBOLUS] = self.max_bolus_u
        v[HMAXGLUC] = self.max_glucagon_ug
        v[HEXBOLUS] = self.exercise_bolus_ug
        v[HEXBOLUSBG] = self.exercise_bolus_bg
        v[HEXSETPOINT] = self.exercise.setpoint
        v[HEXBFACTOR] = self.exercise.basal_factor
        v[HEXGLUCTHR] = self.exercise.gluc_threshold
        v[HEXMICROUG] = self.exercise.microbolus_ug
        return v

    def to_dict(self) -> dict:
        d = {
            "schema": "glucotrial/controller-profile/1",
            "controller": "dual_hormone",
        }
        for name in self.__dataclass_fields__:
            if name == "exercise":
                d["exercise"] = {
                    "setpoint": self.exercise.setpoint,
                    "basal_factor": self.exercise.basal_factor,
                    "gluc_threshold": self.exercise.gluc_threshold,
                    "microbolus_ug": self.exercise.microbolus_ug,
                }
            else:
                d[name] = getattr(self, name)
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_profile(path=None) -> ControllerHyperparameters:
    """Load a hyperparameter profile (the bundled default without a path)."""
    if path is None:
        src = importlib.resources.files("glucotrial.data").joinpath(
            "controller_default.yaml"
        )
        raw = yaml.safe_load(src.read_text())
    else:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    if raw.get("schema") != "glucotrial/controller-profile/1":
        raise ProfileError(f"unsupported profile schema: {raw.get('schema')!r}")
    if raw.get("controller") != "dual_hormone":
        raise ProfileError(f"profile is for controller {raw.get('controller')!r}")
    kwargs = {
        k: float(v)
        for k, v in raw.items()
        if k not in ("schema", "controller", "exercise")
    }
    unknown = set(kwargs) - set(ControllerHyperparameters.__dataclass_fields__)
    if unknown:
        raise ProfileError(f"unknown profile fields: {sorted(unknown)}")
    ex = raw.get("exercise", {})
    kwargs["exercise"] = ExerciseOverrides(**{k: float(v) for k, v in ex.items()})
    return ControllerHyperparameters(**kwargs)


@dataclass(slots=True)
class ControllerState:
    filtered_bg: float = 0.0
    prev_filtered_bg: float = 0.0
    mode: str = "insulin"  # "insulin" | "glucagon"
    icr: float = 10.0  # g CHO per U
    suspend_until_s: float = 0.0
    exercise_bolus_given: bool = False
    last_glucagon_s: float = -1e18
    meal_window_end_s: float = 0.0
    meal_window_peak: float = 0.0
    meal_window_min: float = 0.0
    initialized: bool = False

    def to_vec(self) -> np.ndarray:
        v = np.empty(N_CSTATE)
        v[CFILT] = self.filtered_bg
        v[CPREV] = self.prev_filtered_bg
        v[CMODE] = MODE_GLUCAGON if self.mode == "glucagon" else MODE_INSULIN
        v[CICR] = self.icr
        v[CSUSPEND_UNTIL] = self.suspend_until_s
        v[CEXBOLUSDONE] = 1.0 if self.exercise_bolus_given else 0.0
        v[CLASTGLUC] = self.last_glucagon_s
        v[CWINEND] = self.meal_window_end_s
        v[CWINPEAK] = self.meal_window_peak
        v[CWINMIN] = self.meal_window_min
        v[CINIT] = 1.0 if self.initialized else 0.0
        return v

    @classmethod
    def from_vec(cls, v: np.ndarray) -> "ControllerState":
        return cls(
            filtered_bg=float(v[CFILT]),
            prev_filtered_bg=float(v[CPREV]),
            mode="glucagon" if v[CMODE] == MODE_GLUCAGON else "insulin",
            icr=float(v[CICR]),
            suspend_until_s=float(v[CSUSPEND_UNTIL]),
            exercise_bolus_given=v[CEXBOLUSDONE] == 1.0,
            last_glucagon_s=float(v[CLASTGLUC]),
            meal_window_end_s=float(v[CWINEND]),
            meal_window_peak=float(v[CWINPEAK]),
            meal_window_min=float(v[CWINMIN]),
            initialized=v[CINIT] == 1.0,
        )


@dataclass(frozen=True)
class ControlDecision:
    basal_rate_u_per_h: float
    insulin_bolus_u: float
    glucagon_bolus_ug: float

    def __post_init__(self):
        assert self.basal_rate_u_per_h >= 0.0
        assert self.insulin_bolus_u >= 0.0
        assert self.glucagon_bolus_ug >= 0.0


def initial_icr(u_basal_u_per_h: float, hyper: ControllerHyperparameters) -> float:
    """Initial insulin-to-carb ratio from the 500 rule, U/h basal -> g/U.

    The configured margin starts dosing on the weak side; the estimator
    walks the ratio down from there, which avoids first-day overdosing of
    insulin-sensitive patients.
    """
    tdd = u_basal_u_per_h * 24.0 / _BASAL_FRACTION
    icr = 500.0 / tdd * hyper.icr_initial_factor
    return float(np.clip(icr, hyper.icr_min, hyper.icr_max))


def low_pass_filter(prev_estimate: float, y_k: float, coefficient: float) -> float:
    """Exponential smoothing with weight ``coefficient`` on the new sample."""
    return (1.0 - coefficient) * prev_estimate + coefficient * y_k


def meal_bolus(
    announced_cho_g: float,
    icr: float,
    filtered_bg: float,
    hyper: ControllerHyperparameters,
    assumed_basal_u_per_h: float,
    setpoint: float | None = None,
) -> tuple:
    """Carb-counted bolus with correction term; returns (units, superbolus flag).

    Above the superbolus threshold, the bolus borrows the basal insulin that
    the post-meal suspension will withhold.
    """
    if setpoint is None:
        setpoint = hyper.setpoint
    correction_factor = hyper.cf_per_icr * icr
    bolus = announced_cho_g / icr + (filtered_bg - setpoint) / correction_factor
    superbolus = filtered_bg > hyper.superbolus_bg
    if superbolus:
        bolus += hyper.superbolus_fraction * assumed_basal_u_per_h * hyper.suspend_min / 60.0
    return min(max(bolus, 0.0), hyper.max_bolus_u), superbolus


def basal_microadjust(
    filtered_bg: float,
    trend: float,
    patient_basal_u_per_h: float,
    hyper: ControllerHyperparameters,
    suspended: bool = False,
    exercising: bool = False,
) -> float:
    """Basal rate scaled by a bounded factor in the deviation and trend."""
    if suspended:
        return 0.0
    setpoint = hyper.exercise.setpoint if exercising else hyper.setpoint
    factor = 1.0 + hyper.basal_kp * (filtered_bg - setpoint) + hyper.basal_kd * trend
    factor = min(max(factor, 0.0), hyper.basal_factor_max)
    basal = patient_basal_u_per_h * factor
    if exercising:
        basal *= hyper.exercise.basal_factor
    return basal


def glucagon_microbolus(
    filtered_bg: float,
    trend: float,
    hyper: ControllerHyperparameters,
    time_since_last_s: float,
    exercising: bool = False,
) -> float:
    """Fixed-size glucagon microbolus, gated by threshold, trend and lockout.

    "Falling" means a trend below ``-microbolus_falling_trend`` per sample
    period: slow drifts are left to the basal cut-off of the glucagon mode,
    and sensor noise alone cannot trigger a bolus.
    """
    threshold = hyper.exercise.gluc_threshold if exercising else hyper.gluc_threshold
    size = hyper.exercise.microbolus_ug if exercising else hyper.microbolus_ug
    if (filtered_bg < threshold and trend < -hyper.microbolus_falling_trend
            and time_since_last_s >= hyper.microbolus_lockout_min * 60.0):
        return min(size, hyper.max_glucagon_ug)
    return 0.0


def icr_update(
    icr: float,
    postprandial_excursion: float,
    post_meal_min_bg: float,
    hyper: ControllerHyperparameters,
) -> float:
    """Multiplicative ICR update from one completed announced-meal window.

    ``postprandial_excursion`` is the window's peak filtered BG above the
    setpoint. A post-meal dip below the undershoot level raises the ICR
    (weaker dosing, by ``icr_step_up``) and takes priority; otherwise an
    excursion beyond the band lowers it (stronger dosing, by ``icr_step``).
    The result is clamped to the configured range.
    """
    if post_meal_min_bg < hyper.undershoot_bg:
        icr *= 1.0 + hyper.icr_step_up
    elif postprandial_excursion > hyper.excursion_hi:
        icr *= 1.0 - hyper.icr_step
    return float(np.clip(icr, hyper.icr_min, hyper.icr_max))


@njit
def controller_step_vec(c, y, announced_cho_g, exercise_phase_s, t_s, period_s,
                        hyper, assumed_basal_uh, out):
    """Kernel-facing controller step over packed vectors.

    Mutates the controller state ``c`` in place and writes the decision
    ``(basal U/h, bolus U, glucagon ug)`` into ``out``. Mirrors the public
    step exactly; the two are pinned together by tests.
    """
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0

    # Low-pass filter update.
    if c[CINIT] == 0.0:
        c[CFILT] = y
        c[CPREV] = y
        c[CINIT] = 1.0
    else:
        c[CPREV] = c[CFILT]
        c[CFILT] = (1.0 - hyper[HFILTER]) * c[CFILT] + hyper[HFILTER] * y
    filt = c[CFILT]
    trend = filt - c[CPREV]

    exercising = exercise_phase_s >= 0.0
    if exercising:
        setpoint = hyper[HEXSETPOINT]
        gluc_thr = hyper[HEXGLUCTHR]
        micro = hyper[HEXMICROUG]
    else:
        setpoint = hyper[HSETPOINT]
        gluc_thr = hyper[HGLUCTHR]
        micro = hyper[HMICROUG]

    # Exercise-start glucagon bolus (both modes, at most once per session);
    # no insulin is delivered on the step where it fires.
    if exercising:
        if c[CEXBOLUSDONE] == 0.0:
            c[CEXBOLUSDONE] = 1.0
            if filt < hyper[HEXBOLUSBG]:
                g = hyper[HEXBOLUS]
                if g > hyper[HMAXGLUC]:
                    g = hyper[HMAXGLUC]
                out[2] = g
                c[CLASTGLUC] = t_s
                return
    else:
        c[CEXBOLUSDONE] = 0.0

    # Mode selection with trend lookahead and hysteresis.
    pred = filt + trend * (hyper[HPREDHOR] * 60.0 / period_s)
    if c[CMODE] == 0.0:
        if filt < gluc_thr or pred < gluc_thr:
            c[CMODE] = 1.0
    else:
        if filt >= gluc_thr + hyper[HHYST] and pred >= gluc_thr:
            c[CMODE] = 0.0

    # Track and settle the post-meal ICR window in any mode. The excursion
    # is the peak above the (resting) setpoint; undershoot takes priority.
    if c[CWINEND] > 0.0:
        if filt > c[CWINPEAK]:
            c[CWINPEAK] = filt
        if filt < c[CWINMIN]:
            c[CWINMIN] = filt
        if t_s >= c[CWINEND]:
            icr = c[CICR]
            if c[CWINMIN] < hyper[HUNDERBG]:
                icr *= 1.0 + hyper[HICRSTEPUP]
            elif c[CWINPEAK] - hyper[HSETPOINT] > hyper[HEXCHI]:
                icr *= 1.0 - hyper[HICRSTEP]
            if icr < hyper[HICRMIN]:
                icr = hyper[HICRMIN]
            if icr > hyper[HICRMAX]:
                icr = hyper[HICRMAX]
            c[CICR] = icr
            c[CWINEND] = 0.0

    if c[CMODE] == 1.0:
        # Glucagon mode: microboli only, no insulin.
        if (filt < gluc_thr and trend < -hyper[HMICROTREND]
                and t_s - c[CLASTGLUC] >= hyper[HLOCKMIN] * 60.0):
            if micro > hyper[HMAXGLUC]:
                micro = hyper[HMAXGLUC]
            out[2] = micro
            c[CLASTGLUC] = t_s
        return

    # Insulin mode: meal bolus (with superbolus and suspension), then basal.
    if announced_cho_g > 0.0:
        bolus = announced_cho_g / c[CICR] + (filt - setpoint) / (hyper[HCFICR] * c[CICR])
        if filt > hyper[HSUPBG]:
            bolus += hyper[HSUPFRAC] * assumed_basal_uh * hyper[HSUSPMIN] / 60.0
        if bolus < 0.0:
            bolus = 0.0
        if bolus > hyper[HMAXBOLUS]:
            bolus = hyper[HMAXBOLUS]
        out[1] = bolus
        c[CSUSPEND_UNTIL] = t_s + hyper[HSUSPMIN] * 60.0
        c[CWINEND] = t_s + hyper[HMEALWIN] * 60.0
        c[CWINPEAK] = filt
        c[CWINMIN] = filt

    if t_s < c[CSUSPEND_UNTIL]:
        out[0] = 0.0
    else:
        factor = 1.0 + hyper[HBKP] * (filt - setpoint) + hyper[HBKD] * trend
        if factor < 0.0:
            factor = 0.0
        if factor > hyper[HBFMAX]:
            factor = hyper[HBFMAX]
        basal = assumed_basal_uh * factor
        if exercising:
            basal *= hyper[HEXBFACTOR]
        out[0] = basal
    return


class DualHormoneController:
    """Public wrapper around the packed-vector controller step."""

    controller_id = "dual_hormone"

    def __init__(self, hyper: ControllerHyperparameters, assumed_basal_u_per_h: float):
        if assumed_basal_u_per_h < 0:
            raise ValueError("assumed basal rate must be nonnegative")
        self.hyper = hyper
        self.hyper_vec = hyper.to_vec()
        self.assumed_basal_u_per_h = float(assumed_basal_u_per_h)
        self._icr0 = initial_icr(assumed_basal_u_per_h, hyper)

    def initial_state(self) -> ControllerState:
        return ControllerState(icr=self._icr0)

    def step(self, state: ControllerState, y_k: float, announced_cho_g: float,
             exercise_phase_s: float, t_s: float, period_s: float):
        c = state.to_vec()
        out = np.zeros(3)
        controller_step_vec(c, y_k, announced_cho_g, exercise_phase_s, t_s,
                            period_s, self.hyper_vec, self.assumed_basal_u_per_h, out)
        return ControllerState.from_vec(c), ControlDecision(
            basal_rate_u_per_h=float(out[0]),
            insulin_bolus_u=float(out[1]),
            glucagon_bolus_ug=float(out[2]),
        )


def controller_step(state: ControllerState, y_k: float, announcement: float,
                    exercise_phase_s: float, hyper: ControllerHyperparameters,
                    patient_basal_u_per_h: float, t_k_s: float,
                    period_s: float = 300.0):
    """One controller update; returns ``(new_state, ControlDecision)``.

    ``announcement`` is announced g CHO starting this period (0 for none);
    ``exercise_phase_s`` is seconds since exercise onset, negative when not
    exercising.
    """
    if y_k <= 0:
        raise ValueError("sensor reading must be positive")
    ctl = DualHormoneController(hyper, patient_basal_u_per_h)
    return ctl.step(state, y_k, announcement, exercise_phase_s, t_k_s, period_s)


_CONTROLLERS: dict = {}


def register_controller(controller_id: str, factory) -> None:
    if controller_id in _CONTROLLERS:
        raise ValueError(f"controller id already registered: {controller_id!r}")
    _CONTROLLERS[controller_id] = factory


def get_controller_factory(controller_id: str):
    try:
        return _CONTROLLERS[controller_id]
    except KeyError:
        raise KeyError(
            f"unknown controller {controller_id!r}; registered: {sorted(_CONTROLLERS)}"
        ) from None


register_controller(
    "dual_hormone",
    lambda profile, assumed_basal_u_per_h: DualHormoneController(profile, assumed_basal_u_per_h),
)

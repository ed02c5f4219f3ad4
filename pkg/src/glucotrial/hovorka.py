"""Extended Hovorka glucose-insulin model.

The metabolic core (gut absorption, subcutaneous insulin absorption, plasma
insulin, three insulin-action states, two glucose mass compartments) is the
model of Hovorka et al., "Nonlinear model predictive control of glucose
concentration in subjects with type 1 diabetes", Physiol Meas 25:905, 2004.
It is extended with

* a one-state interstitial sensor-glucose lag (first-order filter on plasma
  glucose, the standard CGM dynamics model),
* a two-compartment subcutaneous glucagon pharmacokinetic chain with linear
  plasma elimination and a hepatic glucose-release term linear in plasma
  glucagon (structure after Wendt et al., J Diabetes Sci Technol 11:43,
  2017), and
* a three-state exercise response (heart-rate-reserve dynamics, a fast
  glucose-uptake effect, and a slowly decaying insulin-sensitization effect;
  structure after Rashid et al., Comput Chem Eng 130:106565, 2019).

All model functions work in MINUTES: rates are per minute, diffusion
intensities per sqrt(minute). Inputs are ``u = (basal mU/min, bolus mU/min,
glucagon ug/min)`` and ``d = (CHO g/min, heart-rate-reserve fraction)``.

Parameter values and per-patient distributions live in
``data/hovorka_distributions.yaml``; see :func:`load_parameter_table`.
"""

from __future__ import annotations

import importlib.resources
import math
from dataclasses import dataclass

import numpy as np
import yaml
from numba import njit
from scipy.optimize import brentq

# State vector layout.
(IQ1, IQ2, IS1, IS2, II, IX1, IX2, IX3, ID1, ID2, IGSC, IZ1, IZ2, IE1, IE2, IE3) = range(16)
N_STATES = 16
STATE_NAMES = (
    "Q1_mmol", "Q2_mmol", "S1_mU", "S2_mU", "I_mU_per_L",
    "x1_per_min", "x2_per_min", "x3", "D1_mmol", "D2_mmol",
    "G_sensor_mmol_per_L", "Z1_ug", "Z2_ug", "E_hrr", "E_uptake", "E_late",
)

# Diffusion acts on (Q1, D1, D2): unmodeled endogenous-production
# fluctuation and meal-absorption uncertainty.
N_WIENER = 3
DIFFUSION_STATES = (IQ1, ID1, ID2)

# Parameter vector layout.
(PW, PEGP0, PF01, PK12, PKA1, PKA2, PKA3, PSIT, PSID, PSIE, PKE, PVI, PVG,
 PTMAXI, PTMAXG, PAG, PTAUCGM, PTGLUC, PKEGLUC, PVGLUC, PSGLUC, PTAUHR,
 PTAUEX, PTAULATE, PALATE, PQEX, PSEX, PSIGEGP, PSIGGUT, PR) = range(30)
N_PARAMS = 30
PARAM_NAMES = (
    "weight_kg", "EGP0", "F01", "k12", "ka1", "ka2", "ka3", "SIT", "SID",
    "SIE", "ke", "VI", "VG", "tmaxI", "tmaxG", "AG", "tau_cgm", "t_gluc",
    "ke_gluc", "V_gluc", "S_gluc", "tau_hr", "tau_ex", "tau_late", "a_late",
    "q_ex", "s_ex", "sigma_egp", "sigma_gut", "R",
)

MMOL_PER_G_CHO = 1000.0 / 180.16  # molar mass of glucose

# Thresholds of the Hovorka 2004 piecewise terms (mmol/L).
_F01_SAT_BG = 4.5
_RENAL_BG = 9.0
_RENAL_RATE = 0.003  # 1/min


class SteadyStateError(RuntimeError):
    """Raised when no basal rate holds the target glucose concentration."""


@njit
def drift_vec(t, x, u, d, p, out):
    """Deterministic right-hand side, dx/dt in per-minute units."""
    w = p[PW]
    bg = x[IQ1] / (p[PVG] * w)

    # Gut glucose absorption (Hovorka 2004, two compartments).
    cho_mmol = d[0] * MMOL_PER_G_CHO
    tmaxg = p[PTMAXG]
    out[ID1] = p[PAG] * cho_mmol - x[ID1] / tmaxg
    out[ID2] = (x[ID1] - x[ID2]) / tmaxg
    gut_appearance = x[ID2] / tmaxg

    # Subcutaneous insulin absorption (Hovorka 2004, two compartments).
    tmaxi = p[PTMAXI]
    u_ins = u[0] + u[1]
    out[IS1] = u_ins - x[IS1] / tmaxi
    out[IS2] = (x[IS1] - x[IS2]) / tmaxi
    plasma_appearance = x[IS2] / tmaxi

    # Plasma insulin and the three insulin-action states (Hovorka 2004).
    out[II] = plasma_appearance / (p[PVI] * w) - p[PKE] * x[II]
    out[IX1] = p[PKA1] * (p[PSIT] * x[II] - x[IX1])
    out[IX2] = p[PKA2] * (p[PSID] * x[II] - x[IX2])
    out[IX3] = p[PKA3] * (p[PSIE] * x[II] - x[IX3])

    # Subcutaneous glucagon chain and plasma elimination (Wendt 2017).
    tg = p[PTGLUC]
    out[IZ1] = u[2] - x[IZ1] / tg
    out[IZ2] = x[IZ1] / tg - p[PKEGLUC] * x[IZ2]
    glucagon_conc = x[IZ2] / (p[PVGLUC] * w)

    # Exercise response (Rashid 2019 structure).
    out[IE1] = (d[1] - x[IE1]) / p[PTAUHR]
    out[IE2] = (x[IE1] - x[IE2]) / p[PTAUEX]
    out[IE3] = p[PALATE] * x[IE1] - x[IE3] / p[PTAULATE]

    # Glucose mass balance (Hovorka 2004 with extension terms).
    if bg < _F01_SAT_BG:
        f01c = p[PF01] * w * bg / _F01_SAT_BG
    else:
        f01c = p[PF01] * w
    if bg > _RENAL_BG:
        renal = _RENAL_RATE * (bg - _RENAL_BG) * p[PVG] * w
    else:
        renal = 0.0
    egp = p[PEGP0] * w * (1.0 - x[IX3])
    if egp < 0.0:
        egp = 0.0
    egp += p[PSGLUC] * w * glucagon_conc
    uptake_boost = 1.0 + p[PQEX] * x[IE2]
    action_boost = 1.0 + p[PSEX] * x[IE3]
    x1 = x[IX1] * action_boost
    x2 = x[IX2] * action_boost
    out[IQ1] = (gut_appearance - f01c * uptake_boost - x1 * x[IQ1]
                + p[PK12] * x[IQ2] - renal + egp)
    out[IQ2] = x1 * x[IQ1] - (p[PK12] + x2) * x[IQ2]

    # Sensor glucose lag.
    out[IGSC] = (bg - x[IGSC]) / p[PTAUCGM]
    return out


@njit
def diffusion_diag(t, x, u, d, p, out):
    """Diffusion intensities for the three driven states, per sqrt(minute).

    ``out[k]`` multiplies the k-th Wiener increment and adds to state
    ``DIFFUSION_STATES[k]``: additive intensity on accessible glucose mass,
    proportional intensity on the two gut-absorption compartments.
    """
    out[0] = p[PSIGEGP] * p[PW]
    out[1] = p[PSIGGUT] * x[ID1]
    out[2] = p[PSIGGUT] * x[ID2]
    return out


def diffusion_matrix(t, x, u, d, p):
    """Full (state_dim x wiener_dim) diffusion matrix for the generic API."""
    sig = np.zeros(N_WIENER)
    diffusion_diag(t, x, u, d, p, sig)
    mat = np.zeros((N_STATES, N_WIENER))
    for k, row in enumerate(DIFFUSION_STATES):
        mat[row, k] = sig[k]
    return mat


def drift(t, x, u, d, p):
    out = np.empty(N_STATES)
    drift_vec(t, x, u, d, p, out)
    return out


def output(t, x, p):
    """Plasma blood glucose concentration, mmol/L."""
    return x[IQ1] / (p[PVG] * p[PW])


def measure_mean(t, x, p):
    """Noise-free sensor reading: the lagged interstitial glucose state."""
    return x[IGSC]


def noise_variance(p):
    return p[PR]


def _net_glucose_flux_at(insulin_conc, bg, p):
    """Net glucose mass flux (mmol/min) at steady state for a given plasma
    insulin concentration, with gut/glucagon/exercise states at zero."""
    w = p[PW]
    q1 = bg * p[PVG] * w
    x1 = p[PSIT] * insulin_conc
    x2 = p[PSID] * insulin_conc
    x3 = p[PSIE] * insulin_conc
    q2 = x1 * q1 / (p[PK12] + x2)
    if bg < _F01_SAT_BG:
        f01c = p[PF01] * w * bg / _F01_SAT_BG
    else:
        f01c = p[PF01] * w
    renal = _RENAL_RATE * (bg - _RENAL_BG) * p[PVG] * w if bg > _RENAL_BG else 0.0
    egp = max(0.0, p[PEGP0] * w * (1.0 - x3))
    return -f01c - x1 * q1 + p[PK12] * q2 - renal + egp


def steady_state(p, target_bg):
    """Solve for the fasting steady state holding ``target_bg``.

    Returns ``(x_ss, u_basal_U_per_h)``. The net glucose flux is strictly
    decreasing in plasma insulin, so the root is bracketed and unique.
    """
    if target_bg <= 0:
        raise SteadyStateError("target BG must be positive")
    w = p[PW]
    if _net_glucose_flux_at(0.0, target_bg, p) <= 0.0:
        raise SteadyStateError(
            "no positive basal rate holds the target: endogenous production "
            "does not exceed insulin-independent uptake"
        )
    lo, hi = 0.0, 50.0
    for _ in range(30):
        if _net_glucose_flux_at(hi, target_bg, p) < 0.0:
            break
        lo, hi = hi, hi * 2.0
    else:
        raise SteadyStateError("net glucose flux never becomes negative")
    insulin_conc = brentq(
        _net_glucose_flux_at, lo, hi, args=(target_bg, p),
        xtol=1e-14, rtol=8.9e-16, maxiter=200,
    )

    u_basal_mU_min = insulin_conc * p[PKE] * p[PVI] * w
    x = np.zeros(N_STATES)
    x[IQ1] = target_bg * p[PVG] * w
    x[II] = insulin_conc
    x[IX1] = p[PSIT] * insulin_conc
    x[IX2] = p[PSID] * insulin_conc
    x[IX3] = p[PSIE] * insulin_conc
    x[IQ2] = x[IX1] * x[IQ1] / (p[PK12] + x[IX2])
    x[IS1] = u_basal_mU_min * p[PTMAXI]
    x[IS2] = u_basal_mU_min * p[PTMAXI]
    x[IGSC] = target_bg

    residual = drift(0.0, x, np.array([u_basal_mU_min, 0.0, 0.0]), np.zeros(2), p)
    scale = np.maximum(1.0, np.abs(x))
    if np.max(np.abs(residual) / scale) > 1e-9:
        raise SteadyStateError("steady-state residual exceeds tolerance")
    return x, u_basal_mU_min * 60.0 / 1000.0


@dataclass(frozen=True)
class DistributionSpec:
    """One sampled parameter: normal (mean, sd) or lognormal (mean, cv)."""

    name: str
    kind: str  # "normal" | "lognormal"
    mean: float
    sd: float = 0.0  # normal only
    cv: float = 0.0  # lognormal only
    unit: str = ""

    @property
    def log_sigma(self) -> float:
        return math.sqrt(math.log(1.0 + self.cv**2))

    @property
    def log_mu(self) -> float:
        return math.log(self.mean) - 0.5 * math.log(1.0 + self.cv**2)


@dataclass(frozen=True)
class ParameterTable:
    """Sampled-parameter distributions plus values fixed for all patients."""

    model_id: str
    sampled: dict  # name -> DistributionSpec, in file order
    fixed: dict  # name -> float


def load_parameter_table(path=None) -> ParameterTable:
    """Load a parameter-distribution table (the bundled one by default)."""
    if path is None:
        src = importlib.resources.files("glucotrial.data").joinpath(
            "hovorka_distributions.yaml"
        )
        raw = yaml.safe_load(src.read_text())
    else:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    if raw.get("schema") != "glucotrial/parameter-distributions/1":
        raise ValueError(f"unsupported distribution schema: {raw.get('schema')!r}")
    sampled = {}
    for name, entry in raw["sampled"].items():
        kind = entry["kind"]
        if kind not in ("normal", "lognormal"):
            raise ValueError(f"parameter {name!r}: unknown kind {kind!r}")
        if kind == "normal" and entry["sd"] < 0:
            raise ValueError(f"parameter {name!r}: negative sd")
        sampled[name] = DistributionSpec(
            name=name,
            kind=kind,
            mean=float(entry["mean"]),
            sd=float(entry.get("sd", 0.0)),
            cv=float(entry.get("cv", 0.0)),
            unit=str(entry.get("unit", "")),
        )
    fixed = {name: float(entry["value"]) for name, entry in raw["fixed"].items()}
    return ParameterTable(model_id=raw["model"], sampled=sampled, fixed=fixed)


def pack_params(values: dict) -> np.ndarray:
    """Pack a named parameter map into the model's parameter vector."""
    missing = [n for n in PARAM_NAMES if n not in values]
    if missing:
        raise ValueError(f"missing parameters: {missing}")
    return np.array([float(values[n]) for n in PARAM_NAMES])


def unpack_params(p: np.ndarray) -> dict:
    return {name: float(p[i]) for i, name in enumerate(PARAM_NAMES)}


def nominal_values(weight_kg: float, table: ParameterTable | None = None) -> dict:
    """Parameter map at distribution means, for a patient of given weight."""
    if table is None:
        table = load_parameter_table()
    values = {"weight_kg": weight_kg}
    values.update({name: spec.mean for name, spec in table.sampled.items()})
    values.update(table.fixed)
    return values


def nominal_params(weight_kg: float = 70.0) -> np.ndarray:
    return pack_params(nominal_values(weight_kg))

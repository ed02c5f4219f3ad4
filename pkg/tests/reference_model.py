"""Independent oracles used by the tests.

``reference_drift`` is a second, deliberately separate transcription of the
same published equations the package model implements (Hovorka et al. 2004
core with sensor-lag, glucagon-PK and exercise extensions). It is written in
named-scalar style against the parameter map, without sharing code with the
package, so transcription errors on either side surface as disagreement.

``reference_closed_loop`` re-runs the closed loop with the identical
controller and input-hold semantics but integrates each step with a
high-accuracy adaptive ODE solver instead of Euler steps.
"""

import numpy as np
from scipy.integrate import solve_ivp

MMOL_PER_G = 1000.0 / 180.16


def reference_drift(state: dict, u: dict, d: dict, p: dict) -> dict:
    """Named-scalar transcription of the extended model's right-hand side
    (per-minute units)."""
    w = p["weight_kg"]
    G = state["Q1"] / (p["VG"] * w)

    D1dot = p["AG"] * d["cho_g_per_min"] * MMOL_PER_G - state["D1"] / p["tmaxG"]
    D2dot = (state["D1"] - state["D2"]) / p["tmaxG"]
    U_G = state["D2"] / p["tmaxG"]

    u_total = u["basal_mU_per_min"] + u["bolus_mU_per_min"]
    S1dot = u_total - state["S1"] / p["tmaxI"]
    S2dot = (state["S1"] - state["S2"]) / p["tmaxI"]
    U_I = state["S2"] / p["tmaxI"]

    Idot = U_I / (p["VI"] * w) - p["ke"] * state["I"]
    x1dot = -p["ka1"] * state["x1"] + p["ka1"] * p["SIT"] * state["I"]
    x2dot = -p["ka2"] * state["x2"] + p["ka2"] * p["SID"] * state["I"]
    x3dot = -p["ka3"] * state["x3"] + p["ka3"] * p["SIE"] * state["I"]

    Z1dot = u["glucagon_ug_per_min"] - state["Z1"] / p["t_gluc"]
    Z2dot = state["Z1"] / p["t_gluc"] - p["ke_gluc"] * state["Z2"]
    C_gluc = state["Z2"] / (p["V_gluc"] * w)

    E1dot = (d["hrr"] - state["E1"]) / p["tau_hr"]
    E2dot = (state["E1"] - state["E2"]) / p["tau_ex"]
    E3dot = p["a_late"] * state["E1"] - state["E3"] / p["tau_late"]

    if G >= 4.5:
        F01c = p["F01"] * w
    else:
        F01c = p["F01"] * w * G / 4.5
    FR = 0.003 * (G - 9.0) * p["VG"] * w if G > 9.0 else 0.0
    EGP = max(p["EGP0"] * w * (1.0 - state["x3"]), 0.0) + p["S_gluc"] * w * C_gluc

    x1_eff = state["x1"] * (1.0 + p["s_ex"] * state["E3"])
    x2_eff = state["x2"] * (1.0 + p["s_ex"] * state["E3"])
    uptake = F01c * (1.0 + p["q_ex"] * state["E2"])

    Q1dot = U_G - uptake - x1_eff * state["Q1"] + p["k12"] * state["Q2"] - FR + EGP
    Q2dot = x1_eff * state["Q1"] - p["k12"] * state["Q2"] - x2_eff * state["Q2"]

    Gscdot = (G - state["Gsc"]) / p["tau_cgm"]

    return {
        "Q1": Q1dot, "Q2": Q2dot, "S1": S1dot, "S2": S2dot, "I": Idot,
        "x1": x1dot, "x2": x2dot, "x3": x3dot, "D1": D1dot, "D2": D2dot,
        "Gsc": Gscdot, "Z1": Z1dot, "Z2": Z2dot, "E1": E1dot, "E2": E2dot,
        "E3": E3dot,
    }


STATE_KEYS = ("Q1", "Q2", "S1", "S2", "I", "x1", "x2", "x3", "D1", "D2",
              "Gsc", "Z1", "Z2", "E1", "E2", "E3")


def reference_drift_vector(x: np.ndarray, u3, d2, values: dict) -> np.ndarray:
    """Adapter: packed state/input arrays -> reference_drift -> packed."""
    state = dict(zip(STATE_KEYS, x))
    u = {"basal_mU_per_min": u3[0], "bolus_mU_per_min": u3[1], "glucagon_ug_per_min": u3[2]}
    d = {"cho_g_per_min": d2[0], "hrr": d2[1]}
    der = reference_drift(state, u, d, values)
    return np.array([der[k] for k in STATE_KEYS])


def reference_closed_loop(values: dict, x0: np.ndarray, controller, protocol_arrays,
                          horizon_s: float, dt_s: float, period_s: float):
    """Deterministic closed loop (sigma = 0, R = 0) with adaptive integration.

    Inputs are held piecewise constant exactly as in the production loop:
    controller decisions per period, disturbances per dt tick. Returns the
    BG trajectory sampled at every dt tick.
    """
    pa = protocol_arrays
    n_steps = int(round(horizon_s / dt_s))
    period_steps = int(round(period_s / dt_s))
    x = x0.copy()
    state = controller.initial_state()
    bg = np.zeros(n_steps)
    gsc_index = STATE_KEYS.index("Gsc")
    q1_index = STATE_KEYS.index("Q1")
    vg_w = values["VG"] * values["weight_kg"]
    u3 = np.zeros(3)
    meal_ptr = ann_ptr = ex_ptr = 0
    n_meals = len(pa.meals_start)
    n_ex = len(pa.ex_start)

    for i in range(n_steps):
        t = i * dt_s
        while meal_ptr < n_meals and pa.meals_end[meal_ptr] <= t:
            meal_ptr += 1
        cho = pa.meals_rate[meal_ptr] if meal_ptr < n_meals and pa.meals_start[meal_ptr] <= t else 0.0
        while ex_ptr < n_ex and pa.ex_end[ex_ptr] <= t:
            ex_ptr += 1
        ex_active = ex_ptr < n_ex and pa.ex_start[ex_ptr] <= t
        hrr = pa.ex_hrr[ex_ptr] if ex_active else 0.0

        if i % period_steps == 0:
            while ann_ptr < n_meals and pa.meals_start[ann_ptr] < t:
                ann_ptr += 1
            announced = 0.0
            j = ann_ptr
            while j < n_meals and pa.meals_start[j] < t + period_s:
                announced += pa.meals_ann[j]
                j += 1
            phase = (t - pa.ex_start[ex_ptr]) if (ex_active and pa.ex_announced[ex_ptr]) else -1.0
            y = x[gsc_index]
            state, dec = controller.step(state, y, announced, phase, t, period_s)
            u3[0] = dec.basal_rate_u_per_h * 1000.0 / 60.0
            u3[1] = dec.insulin_bolus_u * 1000.0 / (period_s / 60.0)
            u3[2] = dec.glucagon_bolus_ug / (period_s / 60.0)

        bg[i] = x[q1_index] / vg_w
        d2 = np.array([cho, hrr])
        sol = solve_ivp(
            lambda _t, _x: reference_drift_vector(_x, u3, d2, values),
            (0.0, dt_s / 60.0), x, method="LSODA", rtol=1e-10, atol=1e-12,
        )
        x = sol.y[:, -1]
    return bg

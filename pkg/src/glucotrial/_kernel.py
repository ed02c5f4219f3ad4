"""Fused closed-loop integration kernel for the bundled model/controller.

One call advances a single patient by a block of Euler-Maruyama steps with
the dual-hormone controller running every ``period_steps`` ticks, updating
the per-patient statistics arrays in place. Splitting a horizon into blocks
keeps pre-drawn noise buffers small (peak memory independent of horizon)
without changing results: the same streams are consumed in the same order.

The generic pure-Python loop in :mod:`glucotrial.simulation` mirrors this
step for pluggable models and controllers; equivalence of the two paths is
pinned by tests.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .controller import controller_step_vec
from .hovorka import ID1, ID2, IGSC, IQ1, PR, PSIGEGP, PSIGGUT, PVG, PW, diffusion_diag, drift_vec

STATUS_OK = 0
STATUS_NONFINITE = 1

# scal carry layout: running extremes/sum plus the latest sensor reading.
SCAL_MIN_BG = 0
SCAL_MAX_BG = 1
SCAL_SUM_BG = 2
SCAL_LAST_Y = 3
N_SCAL = 4


def noise_active(p: np.ndarray) -> bool:
    """Whether the packed parameters produce any diffusion."""
    return p[PSIGEGP] > 0.0 or p[PSIGGUT] > 0.0


@njit
def simulate_block(
    x, c, p, hyper, assumed_basal_uh,
    t0_s, n_steps, dt_s, period_steps, period_s,
    meals_start, meals_end, meals_rate, meals_ann,
    ex_start, ex_end, ex_hrr, ex_announced,
    ptrs,
    wiener, meas_norm,
    range_bounds, thresholds,
    tir_ticks, bg_hist, scal, day_dose, timeline, grid_step_ticks, global_tick0,
    trace,
):
    """Advance one patient by ``n_steps`` ticks starting at ``t0_s``.

    ``t0_s`` must be a multiple of the controller period so every block
    opens with a controller tick. Returns STATUS_OK or STATUS_NONFINITE
    (diverged state; accounting stops at the offending tick).
    """
    n_states = x.shape[0]
    n_meals = meals_start.shape[0]
    n_ex = ex_start.shape[0]
    has_noise = wiener.shape[0] > 0
    record_trace = trace.shape[0] > 0

    vg_w = p[PVG] * p[PW]
    dt_min = dt_s / 60.0
    sqrt_dt_min = np.sqrt(dt_min)
    sqrt_r = np.sqrt(p[PR])

    f = np.zeros(n_states)
    sig = np.zeros(3)
    dec = np.zeros(3)
    u = np.zeros(3)
    d = np.zeros(2)

    meal_ptr = ptrs[0]
    ann_ptr = ptrs[1]
    ex_ptr = ptrs[2]
    tick_idx = 0
    basal_uh = 0.0

    for i in range(n_steps):
        t = t0_s + i * dt_s
        global_tick = global_tick0 + i

        # Active disturbances at time t (events are time-ordered and
        # non-overlapping within a kind).
        while meal_ptr < n_meals and meals_end[meal_ptr] <= t:
            meal_ptr += 1
        if meal_ptr < n_meals and meals_start[meal_ptr] <= t:
            d[0] = meals_rate[meal_ptr]
        else:
            d[0] = 0.0
        while ex_ptr < n_ex and ex_end[ex_ptr] <= t:
            ex_ptr += 1
        ex_active = ex_ptr < n_ex and ex_start[ex_ptr] <= t
        d[1] = ex_hrr[ex_ptr] if ex_active else 0.0

        bolus_u = 0.0
        glucagon_ug = 0.0
        if i % period_steps == 0:
            # Divergence is caught at controller cadence; the per-step BG
            # check below catches glucose blow-ups immediately.
            for k in range(n_states):
                if not np.isfinite(x[k]):
                    return STATUS_NONFINITE

            # Announced carbs starting within the upcoming period.
            while ann_ptr < n_meals and meals_start[ann_ptr] < t:
                ann_ptr += 1
            announced = 0.0
            j = ann_ptr
            while j < n_meals and meals_start[j] < t + period_s:
                announced += meals_ann[j]
                j += 1

            # Exercise phase visible to the controller (announced sessions).
            if ex_active and ex_announced[ex_ptr] != 0.0:
                phase = t - ex_start[ex_ptr]
            else:
                phase = -1.0

            y = x[IGSC] + sqrt_r * meas_norm[tick_idx]
            tick_idx += 1
            scal[SCAL_LAST_Y] = y

            controller_step_vec(c, y, announced, phase, t, period_s, hyper,
                                assumed_basal_uh, dec)
            basal_uh = dec[0]
            bolus_u = dec[1]
            glucagon_ug = dec[2]
            u[0] = basal_uh * 1000.0 / 60.0          # U/h -> mU/min
            u[1] = bolus_u * 1000.0 / (period_s / 60.0)   # U over period -> mU/min
            u[2] = glucagon_ug / (period_s / 60.0)        # ug over period -> ug/min
            if bolus_u > 0.0 or glucagon_ug > 0.0:
                day = int(t // 86400.0)
                day_dose[day, 1] += bolus_u
                day_dose[day, 2] += glucagon_ug

        # Statistics of the state at time t.
        bg = x[IQ1] / vg_w
        if not np.isfinite(bg):
            return STATUS_NONFINITE
        tir_ticks[int(np.searchsorted(range_bounds, bg, side="right"))] += 1
        bg_hist[int(np.searchsorted(thresholds, bg, side="right"))] += 1
        if bg < scal[SCAL_MIN_BG]:
            scal[SCAL_MIN_BG] = bg
        if bg > scal[SCAL_MAX_BG]:
            scal[SCAL_MAX_BG] = bg
        scal[SCAL_SUM_BG] += bg
        day = int(t // 86400.0)
        day_dose[day, 0] += basal_uh
        if global_tick % grid_step_ticks == 0:
            timeline[global_tick // grid_step_ticks] = bg
        if record_trace:
            trace[i, 0] = t
            trace[i, 1] = bg
            trace[i, 2] = scal[SCAL_LAST_Y]
            trace[i, 3] = d[0]
            trace[i, 4] = d[1]
            trace[i, 5] = basal_uh
            trace[i, 6] = bolus_u
            trace[i, 7] = glucagon_ug

        # Euler-Maruyama step (diffusion evaluated at the pre-step state),
        # then projection onto the nonnegative orthant.
        drift_vec(t / 60.0, x, u, d, p, f)
        if has_noise:
            diffusion_diag(t / 60.0, x, u, d, p, sig)
            for k in range(n_states):
                x[k] += f[k] * dt_min
            x[IQ1] += sig[0] * sqrt_dt_min * wiener[i, 0]
            x[ID1] += sig[1] * sqrt_dt_min * wiener[i, 1]
            x[ID2] += sig[2] * sqrt_dt_min * wiener[i, 2]
        else:
            for k in range(n_states):
                x[k] += f[k] * dt_min
        for k in range(n_states):
            if x[k] < 0.0:
                x[k] = 0.0

    ptrs[0] = meal_ptr
    ptrs[1] = ann_ptr
    ptrs[2] = ex_ptr
    return STATUS_OK

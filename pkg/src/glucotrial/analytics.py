"""Streaming, mergeable trial statistics and report assembly.

Per-patient statistics are folded into a :class:`TrialAccumulator` as soon
as the patient's simulation finishes, so a trial never stores per-patient
traces (except the retained worst case). Every accumulator field is an
integer count, a fixed-point integer sum, or a min/max, which makes
:func:`merge` bit-exact, associative and commutative — population results
are identical for any worker count or reduction order.

Glycemic ranges, the below-threshold grid, and the histogram binning are
fixed at module level; accumulators built with different grids refuse to
merge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RANGE_NAMES = ("severe_hypo", "hypo", "normo", "hyper", "severe_hyper")
# Boundaries between the five ranges, mmol/L; each range is [lower, upper).
RANGE_BOUNDS = np.array([3.0, 3.9, 10.0, 13.9])

# Below-threshold grid: 0.5..25.0 mmol/L in 0.1 steps (246 points).
N_THRESHOLDS = 246
THRESHOLDS = np.array([(5 + i) / 10 for i in range(N_THRESHOLDS)])
_IDX_3_MMOL = 25  # THRESHOLDS[25] == 3.0, used for the worst-case tie-break
assert THRESHOLDS[_IDX_3_MMOL] == 3.0

# Per-patient time-in-range fractions are binned at 0.5% resolution.
TIR_BINS = 200

# Daily-dose histograms: (bin width, bin count); one overflow bin at the end.
DOSE_SIGNALS = ("basal_u", "bolus_u", "glucagon_ug")
DOSE_BIN_WIDTH = {"basal_u": 0.5, "bolus_u": 0.5, "glucagon_ug": 10.0}
DOSE_BIN_COUNT = {"basal_u": 200, "bolus_u": 200, "glucagon_ug": 200}

# Fixed-point scale for exactly-mergeable sums of per-patient floats.
FP_SCALE = 2**24

SCHEMA_REPORT = "glucotrial/trial-report/1"


class GridMismatchError(ValueError):
    """Raised when accumulators or reports with different grids are combined."""


def classify_bg(bg: float) -> str:
    """Map a BG concentration to its glycemic range (boundaries [lo, up))."""
    if bg <= 0:
        raise ValueError("BG must be positive")
    return RANGE_NAMES[int(np.searchsorted(RANGE_BOUNDS, bg, side="right"))]


def _fp(x: float) -> int:
    return int(round(x * FP_SCALE))


def _fp_arr(a: np.ndarray) -> np.ndarray:
    return np.rint(a * FP_SCALE).astype(np.int64)


@dataclass
class PatientStats:
    """Streaming statistics of one simulated patient.

    Occupancy is counted in integer ticks of ``dt_s`` so range times always
    sum exactly to the horizon. ``bg_hist[c]`` counts ticks whose BG fell
    between thresholds c-1 and c; prefix sums give time-below-threshold.
    """

    dt_s: float
    horizon_ticks: int
    n_days: int
    n_grid: int
    ticks: int = 0
    tir_ticks: np.ndarray = None
    bg_hist: np.ndarray = None
    min_bg: float = np.inf
    max_bg: float = -np.inf
    sum_bg: float = 0.0
    timeline_bg: np.ndarray = None
    day_dose: np.ndarray = None

    def __post_init__(self):
        if self.tir_ticks is None:
            self.tir_ticks = np.zeros(5, dtype=np.int64)
        if self.bg_hist is None:
            self.bg_hist = np.zeros(N_THRESHOLDS + 1, dtype=np.int64)
        if self.timeline_bg is None:
            self.timeline_bg = np.zeros(self.n_grid)
        if self.day_dose is None:
            self.day_dose = np.zeros((self.n_days, 3))

    def add_sample(self, bg: float, basal_u_per_h: float) -> None:
        """Account one integration tick: range occupancy, threshold
        histogram, extremes, and basal accrual into the current day.
        Boluses are attributed separately via :meth:`add_bolus`.

        Basal is stored as a sum of rates and converted to units per day on
        read (:meth:`day_totals`), so whole ticks at a constant rate total
        exactly."""
        self.tir_ticks[int(np.searchsorted(RANGE_BOUNDS, bg, side="right"))] += 1
        self.bg_hist[int(np.searchsorted(THRESHOLDS, bg, side="right"))] += 1
        if bg < self.min_bg:
            self.min_bg = bg
        if bg > self.max_bg:
            self.max_bg = bg
        self.sum_bg += bg
        day = int(self.ticks * self.dt_s // 86400)
        self.day_dose[day, 0] += basal_u_per_h
        self.ticks += 1

    def add_bolus(self, t_s: float, bolus_u: float, glucagon_ug: float) -> None:
        day = int(t_s // 86400)
        self.day_dose[day, 1] += bolus_u
        self.day_dose[day, 2] += glucagon_ug

    def set_timeline_point(self, idx: int, bg: float) -> None:
        self.timeline_bg[idx] = bg

    def day_totals(self) -> np.ndarray:
        """Per-day dose totals (basal U, bolus U, glucagon ug)."""
        out = self.day_dose.copy()
        out[:, 0] = out[:, 0] * self.dt_s / 3600.0
        return out

    def below_threshold_ticks(self) -> np.ndarray:
        """Ticks with BG strictly below each grid threshold."""
        return np.cumsum(self.bg_hist)[:N_THRESHOLDS]

    @property
    def ticks_below_3(self) -> int:
        return int(self.below_threshold_ticks()[_IDX_3_MMOL])


def accumulate_sample(stats: PatientStats, bg: float, doses: tuple, dt: float) -> PatientStats:
    """One streaming update; ``doses = (basal U/h, bolus U, glucagon ug)``."""
    if dt != stats.dt_s:
        raise ValueError("sample dt differs from the accumulator's tick size")
    basal, bolus, glucagon = doses
    t_s = stats.ticks * stats.dt_s
    stats.add_sample(bg, basal)
    if bolus or glucagon:
        stats.add_bolus(t_s, bolus, glucagon)
    return stats


def _worst_order(min_bg: float, ticks_below_3: int, patient_id: int) -> tuple:
    # Lower minimum BG is worse; ties broken by more time below 3 mmol/L,
    # then by lower patient id.
    return (min_bg, -ticks_below_3, patient_id)


@dataclass
class WorstCase:
    patient_id: int
    min_bg: float
    max_bg: float
    ticks_below_3: int
    ticks: int
    tir_ticks: np.ndarray
    bg_hist: np.ndarray

    @classmethod
    def from_stats(cls, patient_id: int, stats: PatientStats) -> "WorstCase":
        return cls(
            patient_id=patient_id,
            min_bg=float(stats.min_bg),
            max_bg=float(stats.max_bg),
            ticks_below_3=stats.ticks_below_3,
            ticks=stats.ticks,
            tir_ticks=stats.tir_ticks.copy(),
            bg_hist=stats.bg_hist.copy(),
        )


@dataclass
class TrialAccumulator:
    """Population statistics with an exact, order-independent merge."""

    dt_s: float
    horizon_ticks: int
    n_days: int
    n_grid: int
    grid_step_s: float
    n_patients: int = 0
    n_aborted: int = 0
    aborted_ids: tuple = ()
    tir_ticks_total: np.ndarray = None
    tir_hist: np.ndarray = None
    bg_hist_total: np.ndarray = None
    below_min: np.ndarray = None
    below_max: np.ndarray = None
    sum_bg_fp: int = 0
    min_bg: float = np.inf
    max_bg: float = -np.inf
    timeline_sum_fp: np.ndarray = None
    timeline_min_fp: np.ndarray = None
    timeline_max_fp: np.ndarray = None
    dose_hist: dict = None
    dose_sum_fp: list = None
    n_patient_days: int = 0
    worst: WorstCase | None = None

    def __post_init__(self):
        if self.tir_ticks_total is None:
            self.tir_ticks_total = np.zeros(5, dtype=np.int64)
        if self.tir_hist is None:
            self.tir_hist = np.zeros((5, TIR_BINS + 1), dtype=np.int64)
        if self.bg_hist_total is None:
            self.bg_hist_total = np.zeros(N_THRESHOLDS + 1, dtype=np.int64)
        if self.below_min is None:
            self.below_min = np.full(N_THRESHOLDS, np.iinfo(np.int64).max, dtype=np.int64)
        if self.below_max is None:
            self.below_max = np.zeros(N_THRESHOLDS, dtype=np.int64)
        if self.timeline_sum_fp is None:
            self.timeline_sum_fp = np.zeros(self.n_grid, dtype=np.int64)
        if self.timeline_min_fp is None:
            self.timeline_min_fp = np.full(self.n_grid, np.iinfo(np.int64).max, dtype=np.int64)
        if self.timeline_max_fp is None:
            self.timeline_max_fp = np.full(self.n_grid, np.iinfo(np.int64).min, dtype=np.int64)
        if self.dose_hist is None:
            self.dose_hist = {
                s: np.zeros(DOSE_BIN_COUNT[s] + 1, dtype=np.int64) for s in DOSE_SIGNALS
            }
        if self.dose_sum_fp is None:
            self.dose_sum_fp = [0, 0, 0]

    def grid_meta(self) -> tuple:
        return (self.dt_s, self.horizon_ticks, self.n_days, self.n_grid, self.grid_step_s)

    def add_patient(self, patient_id: int, stats: PatientStats) -> None:
        if stats.ticks != self.horizon_ticks:
            raise ValueError("patient tick count does not match the trial horizon")
        self.n_patients += 1
        self.tir_ticks_total += stats.tir_ticks
        for r in range(5):
            frac_bin = min(TIR_BINS, int(stats.tir_ticks[r] * TIR_BINS // self.horizon_ticks))
            self.tir_hist[r, frac_bin] += 1
        self.bg_hist_total += stats.bg_hist
        below = stats.below_threshold_ticks()
        np.minimum(self.below_min, below, out=self.below_min)
        np.maximum(self.below_max, below, out=self.below_max)
        self.sum_bg_fp += _fp(stats.sum_bg)
        self.min_bg = min(self.min_bg, float(stats.min_bg))
        self.max_bg = max(self.max_bg, float(stats.max_bg))
        tl = _fp_arr(stats.timeline_bg)
        self.timeline_sum_fp += tl
        np.minimum(self.timeline_min_fp, tl, out=self.timeline_min_fp)
        np.maximum(self.timeline_max_fp, tl, out=self.timeline_max_fp)
        day_totals = stats.day_totals()
        for k, s in enumerate(DOSE_SIGNALS):
            width, nbins = DOSE_BIN_WIDTH[s], DOSE_BIN_COUNT[s]
            idx = np.minimum((day_totals[:, k] // width).astype(np.int64), nbins)
            np.add.at(self.dose_hist[s], idx, 1)
            self.dose_sum_fp[k] += _fp(float(np.sum(day_totals[:, k])))
        self.n_patient_days += self.n_days
        cand = WorstCase.from_stats(patient_id, stats)
        if self.worst is None or (
            _worst_order(cand.min_bg, cand.ticks_below_3, cand.patient_id)
            < _worst_order(self.worst.min_bg, self.worst.ticks_below_3, self.worst.patient_id)
        ):
            self.worst = cand

    def add_aborted(self, patient_id: int) -> None:
        self.n_aborted += 1
        self.aborted_ids = tuple(sorted(self.aborted_ids + (patient_id,)))


def merge(a: TrialAccumulator, b: TrialAccumulator) -> TrialAccumulator:
    """Combine two accumulators; exact, associative and commutative."""
    if a.grid_meta() != b.grid_meta():
        raise GridMismatchError("accumulators were built with different grids")
    out = TrialAccumulator(
        dt_s=a.dt_s, horizon_ticks=a.horizon_ticks, n_days=a.n_days,
        n_grid=a.n_grid, grid_step_s=a.grid_step_s,
    )
    out.n_patients = a.n_patients + b.n_patients
    out.n_aborted = a.n_aborted + b.n_aborted
    out.aborted_ids = tuple(sorted(a.aborted_ids + b.aborted_ids))
    out.tir_ticks_total = a.tir_ticks_total + b.tir_ticks_total
    out.tir_hist = a.tir_hist + b.tir_hist
    out.bg_hist_total = a.bg_hist_total + b.bg_hist_total
    out.below_min = np.minimum(a.below_min, b.below_min)
    out.below_max = np.maximum(a.below_max, b.below_max)
    out.sum_bg_fp = a.sum_bg_fp + b.sum_bg_fp
    out.min_bg = min(a.min_bg, b.min_bg)
    out.max_bg = max(a.max_bg, b.max_bg)
    out.timeline_sum_fp = a.timeline_sum_fp + b.timeline_sum_fp
    out.timeline_min_fp = np.minimum(a.timeline_min_fp, b.timeline_min_fp)
    out.timeline_max_fp = np.maximum(a.timeline_max_fp, b.timeline_max_fp)
    out.dose_hist = {s: a.dose_hist[s] + b.dose_hist[s] for s in DOSE_SIGNALS}
    out.dose_sum_fp = [x + y for x, y in zip(a.dose_sum_fp, b.dose_sum_fp)]
    out.n_patient_days = a.n_patient_days + b.n_patient_days
    worst = [w for w in (a.worst, b.worst) if w is not None]
    if worst:
        out.worst = min(
            worst, key=lambda w: _worst_order(w.min_bg, w.ticks_below_3, w.patient_id)
        )
    return out


def _quantile_bin_center(hist: np.ndarray, n: int, num: int, den: int, width: float) -> float:
    """Value of the q = num/den quantile from binned counts (nearest rank).

    Exact integer arithmetic: the quantile is the center of the smallest bin
    whose cumulative count reaches ceil(q * n). Accurate to one bin width.
    """
    target = -(-num * n // den)  # ceil(num*n/den)
    cum = 0
    for b, c in enumerate(hist):
        cum += int(c)
        if cum >= target:
            return (b + 0.5) * width
    return (len(hist) - 0.5) * width


def _box_stats(hist: np.ndarray, n: int, width: float) -> dict:
    q1 = _quantile_bin_center(hist, n, 1, 4, width)
    med = _quantile_bin_center(hist, n, 1, 2, width)
    q3 = _quantile_bin_center(hist, n, 3, 4, width)
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    nonzero = np.nonzero(hist)[0]
    centers = (nonzero + 0.5) * width
    inside = centers[(centers >= lo_fence) & (centers <= hi_fence)]
    whisker_lo = float(inside[0]) if inside.size else q1
    whisker_hi = float(inside[-1]) if inside.size else q3
    n_out_lo = int(np.sum(hist[nonzero[centers < lo_fence]])) if nonzero.size else 0
    n_out_hi = int(np.sum(hist[nonzero[centers > hi_fence]])) if nonzero.size else 0
    return {
        "q1": q1, "median": med, "q3": q3,
        "whisker_lo": whisker_lo, "whisker_hi": whisker_hi,
        "n_outliers_lo": n_out_lo, "n_outliers_hi": n_out_hi,
    }


def _require_nonempty(acc: TrialAccumulator) -> None:
    if acc.n_patients == 0:
        raise ValueError("empty accumulator")


def tir_report(acc: TrialAccumulator) -> dict:
    """Population TIR distribution: mean stacked bar, worst-case stacked
    bar, and per-range box-plot statistics (fractions in [0, 1])."""
    _require_nonempty(acc)
    denom = acc.n_patients * acc.horizon_ticks
    out = {"ranges": list(RANGE_NAMES), "n_patients": acc.n_patients}
    out["mean"] = [int(t) / denom for t in acc.tir_ticks_total]
    out["worst_case"] = [int(t) / acc.worst.ticks for t in acc.worst.tir_ticks]
    out["box"] = {
        name: _box_stats(acc.tir_hist[r], acc.n_patients, 1.0 / TIR_BINS)
        for r, name in enumerate(RANGE_NAMES)
    }
    return out


def bg_cdf_report(acc: TrialAccumulator) -> dict:
    """Fraction of time below each grid threshold: population mean, the
    [min, max] envelope, and the worst-case patient's curve."""
    _require_nonempty(acc)
    denom = acc.n_patients * acc.horizon_ticks
    mean_below = np.cumsum(acc.bg_hist_total)[:N_THRESHOLDS]
    worst_below = np.cumsum(acc.worst.bg_hist)[:N_THRESHOLDS]
    return {
        "thresholds_mmol_per_l": [float(t) for t in THRESHOLDS],
        "mean": [int(t) / denom for t in mean_below],
        "min": [int(t) / acc.horizon_ticks for t in acc.below_min],
        "max": [int(t) / acc.horizon_ticks for t in acc.below_max],
        "worst_case": [int(t) / acc.worst.ticks for t in worst_below],
    }


def dose_report(acc: TrialAccumulator) -> dict:
    """Histograms of total daily basal/bolus insulin and bolus glucagon."""
    _require_nonempty(acc)
    out = {"n_patient_days": acc.n_patient_days, "signals": {}}
    for k, s in enumerate(DOSE_SIGNALS):
        width, nbins = DOSE_BIN_WIDTH[s], DOSE_BIN_COUNT[s]
        out["signals"][s] = {
            "bin_width": width,
            "bin_edges_start": 0.0,
            "counts": [int(c) for c in acc.dose_hist[s][:nbins]],
            "overflow": int(acc.dose_hist[s][nbins]),
            "mean_daily": acc.dose_sum_fp[k] / FP_SCALE / acc.n_patient_days,
        }
    return out


def timeline_report(acc: TrialAccumulator) -> dict:
    """Population mean/min/max BG versus time of trial."""
    _require_nonempty(acc)
    return {
        "grid_step_s": acc.grid_step_s,
        "times_s": [i * acc.grid_step_s for i in range(acc.n_grid)],
        "mean": [int(v) / FP_SCALE / acc.n_patients for v in acc.timeline_sum_fp],
        "min": [int(v) / FP_SCALE for v in acc.timeline_min_fp],
        "max": [int(v) / FP_SCALE for v in acc.timeline_max_fp],
    }


def build_trial_report(acc: TrialAccumulator, run_meta: dict) -> dict:
    """Assemble the full JSON-ready trial report."""
    _require_nonempty(acc)
    denom = acc.n_patients * acc.horizon_ticks
    return {
        "schema": SCHEMA_REPORT,
        "run": dict(run_meta),
        "n_patients": acc.n_patients,
        "n_aborted": acc.n_aborted,
        "aborted_ids": list(acc.aborted_ids),
        "horizon_ticks": acc.horizon_ticks,
        "dt_s": acc.dt_s,
        "bg": {
            "mean": acc.sum_bg_fp / FP_SCALE / denom,
            "min": acc.min_bg,
            "max": acc.max_bg,
        },
        "worst_case": {
            "patient_id": acc.worst.patient_id,
            "min_bg": acc.worst.min_bg,
            "max_bg": acc.worst.max_bg,
            "ticks_below_3_mmol": acc.worst.ticks_below_3,
        },
        "tir": tir_report(acc),
        "cdf": bg_cdf_report(acc),
        "doses": dose_report(acc),
        "timeline": timeline_report(acc),
    }


def _grid_signature(report: dict) -> tuple:
    return (
        report["dt_s"],
        report["horizon_ticks"],
        tuple(report["cdf"]["thresholds_mmol_per_l"]),
        tuple(
            (s, report["doses"]["signals"][s]["bin_width"],
             len(report["doses"]["signals"][s]["counts"]))
            for s in sorted(report["doses"]["signals"])
        ),
        report["timeline"]["grid_step_s"],
        len(report["timeline"]["times_s"]),
    )


def compare_trials(report_a: dict, report_b: dict) -> dict:
    """Overlay data and scalar deltas (B minus A) for two trial reports."""
    for r in (report_a, report_b):
        if r.get("schema") != SCHEMA_REPORT:
            raise ValueError(f"not a trial report: schema {r.get('schema')!r}")
    if _grid_signature(report_a) != _grid_signature(report_b):
        raise GridMismatchError("trial reports were built on different grids")
    ranges = report_a["tir"]["ranges"]
    tir_a, tir_b = report_a["tir"]["mean"], report_b["tir"]["mean"]
    doses_a, doses_b = report_a["doses"]["signals"], report_b["doses"]["signals"]
    return {
        "schema": "glucotrial/trial-comparison/1",
        "a": {"run": report_a["run"]},
        "b": {"run": report_b["run"]},
        "delta_b_minus_a": {
            "mean_bg": report_b["bg"]["mean"] - report_a["bg"]["mean"],
            "mean_tir": {
                name: tir_b[i] - tir_a[i] for i, name in enumerate(ranges)
            },
            "mean_daily_doses": {
                s: doses_b[s]["mean_daily"] - doses_a[s]["mean_daily"]
                for s in DOSE_SIGNALS
            },
            "worst_case_min_bg": (
                report_b["worst_case"]["min_bg"] - report_a["worst_case"]["min_bg"]
            ),
        },
        "overlay": {
            "cdf": {"a": report_a["cdf"], "b": report_b["cdf"]},
            "tir": {"a": report_a["tir"], "b": report_b["tir"]},
            "doses": {"a": report_a["doses"], "b": report_b["doses"]},
            "timeline": {"a": report_a["timeline"], "b": report_b["timeline"]},
        },
    }


# --------------------------------------------------------------------------
# Plot-ready columnar exports (CSV; floats written with repr round-tripping)


def _write_csv(path: str, header, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_figure_csvs(report: dict, out_dir: str) -> list:
    """Write one columnar file per figure type; returns the paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def _p(name):
        paths.append(os.path.join(out_dir, name))
        return paths[-1]

    cdf = report["cdf"]
    _write_csv(
        _p("cdf.csv"),
        ["threshold_mmol_per_l", "mean", "min", "max", "worst_case"],
        zip(cdf["thresholds_mmol_per_l"], cdf["mean"], cdf["min"], cdf["max"], cdf["worst_case"]),
    )
    tir = report["tir"]
    _write_csv(
        _p("tir_mean.csv"),
        ["range", "mean_fraction", "worst_case_fraction"],
        zip(tir["ranges"], tir["mean"], tir["worst_case"]),
    )
    _write_csv(
        _p("tir_box.csv"),
        ["range", "q1", "median", "q3", "whisker_lo", "whisker_hi",
         "n_outliers_lo", "n_outliers_hi"],
        (
            [name, b["q1"], b["median"], b["q3"], b["whisker_lo"], b["whisker_hi"],
             b["n_outliers_lo"], b["n_outliers_hi"]]
            for name, b in ((n, tir["box"][n]) for n in tir["ranges"])
        ),
    )
    rows = []
    for s in DOSE_SIGNALS:
        sig = report["doses"]["signals"][s]
        w = sig["bin_width"]
        for i, c in enumerate(sig["counts"]):
            rows.append([s, i * w, (i + 1) * w, c])
        rows.append([s, len(sig["counts"]) * w, float("inf"), sig["overflow"]])
    _write_csv(_p("doses.csv"), ["signal", "bin_start", "bin_end", "count"], rows)
    tl = report["timeline"]
    _write_csv(
        _p("timeline.csv"),
        ["t_s", "mean_bg", "min_bg", "max_bg"],
        zip(tl["times_s"], tl["mean"], tl["min"], tl["max"]),
    )
    return paths


def write_comparison_csvs(comparison: dict, out_dir: str) -> list:
    """Write overlaid/side-by-side figure data for a trial comparison."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def _p(name):
        paths.append(os.path.join(out_dir, name))
        return paths[-1]

    cdf_a = comparison["overlay"]["cdf"]["a"]
    cdf_b = comparison["overlay"]["cdf"]["b"]
    _write_csv(
        _p("compare_cdf.csv"),
        ["threshold_mmol_per_l", "mean_a", "mean_b", "min_a", "min_b",
         "max_a", "max_b", "worst_a", "worst_b"],
        zip(cdf_a["thresholds_mmol_per_l"], cdf_a["mean"], cdf_b["mean"],
            cdf_a["min"], cdf_b["min"], cdf_a["max"], cdf_b["max"],
            cdf_a["worst_case"], cdf_b["worst_case"]),
    )
    tir_a = comparison["overlay"]["tir"]["a"]
    tir_b = comparison["overlay"]["tir"]["b"]
    _write_csv(
        _p("compare_tir.csv"),
        ["range", "mean_a", "mean_b", "worst_a", "worst_b"],
        zip(tir_a["ranges"], tir_a["mean"], tir_b["mean"],
            tir_a["worst_case"], tir_b["worst_case"]),
    )
    rows = []
    for s in DOSE_SIGNALS:
        sa = comparison["overlay"]["doses"]["a"]["signals"][s]
        sb = comparison["overlay"]["doses"]["b"]["signals"][s]
        w = sa["bin_width"]
        for i, (ca, cb) in enumerate(zip(sa["counts"], sb["counts"])):
            rows.append([s, i * w, (i + 1) * w, ca, cb])
        rows.append([s, len(sa["counts"]) * w, float("inf"), sa["overflow"], sb["overflow"]])
    _write_csv(_p("compare_doses.csv"),
               ["signal", "bin_start", "bin_end", "count_a", "count_b"], rows)
    tl_a = comparison["overlay"]["timeline"]["a"]
    tl_b = comparison["overlay"]["timeline"]["b"]
    _write_csv(
        _p("compare_timeline.csv"),
        ["t_s", "mean_a", "mean_b", "min_a", "min_b", "max_a", "max_b"],
        zip(tl_a["times_s"], tl_a["mean"], tl_b["mean"], tl_a["min"], tl_b["min"],
            tl_a["max"], tl_b["max"]),
    )
    return paths

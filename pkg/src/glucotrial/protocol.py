"""Lifestyle protocols: time-stamped meal and exercise disturbances.

A protocol is composed hierarchically: a year is four seasons of 13 weeks,
each week is drawn from a fixed multiset of basis days, and each basis day
is an ordered list of clock-time events (meal classes, exercise sessions).
The season/week composition tables are fixed; the basis-day event lists live
in a bundled, editable data file (``data/basis_days.yaml``) because the
published overview of the basis days is graphical.

Meal sizes scale linearly with body weight; see :func:`meal_grams`.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .rng import stream

DAY_TYPES = ("standard", "active", "movie_night", "late_night")
WEEK_TYPES = ("standard", "active", "vacation")
SEASON_NAMES = ("winter", "spring", "summer", "autumn")
SEASON_CLASSES = ("winter_autumn", "summer_spring")
MEAL_CLASSES = ("large", "medium", "small", "snack")

# g CHO per kg body weight, per meal class.
MEAL_CHO_PER_KG = {"large": 1.29, "medium": 0.86, "small": 0.57, "snack": 0.29}

# Days per basis week: {week_type: {day_type: count}}; counts sum to 7.
WEEK_COMPOSITIONS = {
    "standard": {"standard": 4, "active": 1, "movie_night": 1, "late_night": 1},
    "active": {"standard": 3, "active": 3, "movie_night": 1, "late_night": 0},
    "vacation": {"standard": 5, "active": 0, "movie_night": 0, "late_night": 2},
}

# Weeks per season: {season: {week_type: count}}; counts sum to 13.
SEASON_COMPOSITIONS = {
    "winter": {"standard": 6, "active": 4, "vacation": 3},
    "spring": {"standard": 6, "active": 6, "vacation": 1},
    "summer": {"standard": 7, "active": 3, "vacation": 3},
    "autumn": {"standard": 9, "active": 3, "vacation": 1},
}

SEASON_CLASS_OF = {
    "winter": "winter_autumn",
    "autumn": "winter_autumn",
    "spring": "summer_spring",
    "summer": "summer_spring",
}

DAY_S = 86400.0
WEEK_S = 7 * DAY_S
YEAR_WEEKS = 52
YEAR_S = YEAR_WEEKS * WEEK_S


class ProtocolError(ValueError):
    """Raised for malformed protocol definitions or compositions."""


@dataclass(slots=True)
class Disturbance:
    """One uncontrolled model input over a time window.

    ``magnitude`` is total g CHO for meals and the heart-rate-reserve
    fraction for exercise. ``announced_magnitude`` is what the patient tells
    the controller; it can differ from the true size for incorrectly
    announced meals and is ignored when ``announced`` is False.
    """

    kind: str  # "meal" | "exercise"
    start_s: float
    end_s: float
    magnitude: float
    announced: bool = True
    announced_magnitude: float | None = None

    def __post_init__(self):
        if self.announced_magnitude is None:
            self.announced_magnitude = self.magnitude

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "start_s": self.start_s,
            "end_s": self.end_s,
            "magnitude": self.magnitude,
            "announced": self.announced,
            "announced_magnitude": self.announced_magnitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Disturbance":
        return cls(
            kind=d["kind"],
            start_s=d["start_s"],
            end_s=d["end_s"],
            magnitude=d["magnitude"],
            announced=d["announced"],
            announced_magnitude=d["announced_magnitude"],
        )


@dataclass(slots=True)
class BasisDay:
    """Event template for one day type within a season class.

    ``events`` is ordered by clock time; each entry is either
    ``("meal", clock_s, meal_class)`` or
    ``("exercise", clock_s, duration_s, hrr_fraction)``.
    """

    day_type: str
    season_class: str
    events: list = field(default_factory=list)
    meal_duration_s: float = 900.0


@dataclass(slots=True)
class BasisWeek:
    week_type: str
    day_counts: dict

    def __post_init__(self):
        if sum(self.day_counts.values()) != 7:
            raise ProtocolError(f"week {self.week_type!r}: day counts must sum to 7")


@dataclass(slots=True)
class Season:
    name: str
    week_counts: dict

    def __post_init__(self):
        if sum(self.week_counts.values()) != 13:
            raise ProtocolError(f"season {self.name!r}: week counts must sum to 13")


@dataclass(slots=True)
class Protocol:
    id: str
    horizon_s: float
    disturbances: list

    def to_dict(self) -> dict:
        return {
            "schema": "glucotrial/protocol/1",
            "id": self.id,
            "horizon_s": self.horizon_s,
            "disturbances": [d.to_dict() for d in self.disturbances],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Protocol":
        if d.get("schema") != "glucotrial/protocol/1":
            raise ProtocolError(f"unsupported protocol schema: {d.get('schema')!r}")
        return cls(
            id=d["id"],
            horizon_s=d["horizon_s"],
            disturbances=[Disturbance.from_dict(x) for x in d["disturbances"]],
        )


@dataclass(slots=True)
class AnnouncementPolicy:
    """Fraction of meals left unannounced, and the misannouncement factor
    range applied to the announced sizes of the rest."""

    fraction_unannounced: float = 0.0
    misannouncement_factor_range: tuple = (1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.fraction_unannounced <= 1.0:
            raise ProtocolError("fraction_unannounced must be in [0, 1]")
        lo, hi = self.misannouncement_factor_range
        if lo < 0 or hi < lo:
            raise ProtocolError("misannouncement factor range must be 0 <= lo <= hi")


def _clock_to_seconds(text: str) -> float:
    hh, mm = text.split(":")
    sec = int(hh) * 3600 + int(mm) * 60
    if not 0 <= sec < DAY_S:
        raise ProtocolError(f"clock time out of range: {text!r}")
    return float(sec)


def load_basis_days(path=None) -> dict:
    """Load basis-day templates, keyed by ``(day_type, season_class)``.

    Without a path, the bundled transcription data file is used.
    """
    if path is None:
        src = importlib.resources.files("glucotrial.data").joinpath("basis_days.yaml")
        raw = yaml.safe_load(src.read_text())
    else:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    if raw.get("schema") != "glucotrial/basis-days/1":
        raise ProtocolError(f"unsupported basis-days schema: {raw.get('schema')!r}")

    meal_dur = float(raw["meal_duration_min"]) * 60.0
    ex = raw["exercise"]
    exercise_event = (
        "exercise",
        _clock_to_seconds(ex["start"]),
        float(ex["duration_min"]) * 60.0,
        float(ex["hrr"]),
    )

    extras = raw["days"]["extras"]
    out = {}
    for season_class in SEASON_CLASSES:
        base = [
            ("meal", _clock_to_seconds(e["at"]), e["meal"])
            for e in raw["days"]["standard"][season_class]
        ]
        for day_type in DAY_TYPES:
            events = list(base)
            if day_type != "standard":
                spec = extras[day_type]
                if spec.get("exercise"):
                    events.append(exercise_event)
                for e in spec.get("meals", ()):
                    events.append(("meal", _clock_to_seconds(e["at"]), e["meal"]))
            events.sort(key=lambda ev: ev[1])
            for ev in events:
                if ev[0] == "meal" and ev[2] not in MEAL_CLASSES:
                    raise ProtocolError(f"unknown meal class {ev[2]!r}")
            out[(day_type, season_class)] = BasisDay(
                day_type=day_type,
                season_class=season_class,
                events=events,
                meal_duration_s=meal_dur,
            )
    return out


def meal_grams(meal_class: str, body_weight_kg: float) -> float:
    """Total g CHO of a meal class for a patient of the given weight."""
    if body_weight_kg <= 0:
        raise ProtocolError("body weight must be positive")
    try:
        return MEAL_CHO_PER_KG[meal_class] * body_weight_kg
    except KeyError:
        raise ProtocolError(f"unknown meal class {meal_class!r}") from None


def compose_day(day: BasisDay, body_weight_kg: float, day_offset_s: float) -> list:
    """Instantiate a basis day at an absolute offset for a given patient."""
    out = []
    for ev in day.events:
        if ev[0] == "meal":
            _, clock_s, meal_class = ev
            start = day_offset_s + clock_s
            out.append(
                Disturbance(
                    kind="meal",
                    start_s=start,
                    end_s=start + day.meal_duration_s,
                    magnitude=meal_grams(meal_class, body_weight_kg),
                )
            )
        else:
            _, clock_s, duration_s, hrr = ev
            start = day_offset_s + clock_s
            out.append(
                Disturbance(
                    kind="exercise",
                    start_s=start,
                    end_s=start + duration_s,
                    magnitude=hrr,
                )
            )
    return out


def _has_bad_adjacency(days: list) -> bool:
    for a, b in zip(days, days[1:]):
        if {a, b} == {"active", "late_night"}:
            return True
    return False


def plan_week(week: BasisWeek, rng: np.random.Generator) -> list:
    """Order the week's day multiset.

    The multiset is shuffled; an active day is never placed next to a late
    night (re-shuffled until the constraint holds).
    """
    days = [d for d in DAY_TYPES for _ in range(week.day_counts.get(d, 0))]
    constrained = week.day_counts.get("active", 0) > 0 and week.day_counts.get("late_night", 0) > 0
    for _ in range(1000):
        rng.shuffle(days)
        if not constrained or not _has_bad_adjacency(days):
            return list(days)
    raise ProtocolError(f"could not order week {week.week_type!r} within bounds")


def plan_season(season: Season, rng: np.random.Generator) -> list:
    """Order the season's week multiset (uniform shuffle)."""
    weeks = [w for w in WEEK_TYPES for _ in range(season.week_counts.get(w, 0))]
    rng.shuffle(weeks)
    return list(weeks)


@dataclass(slots=True)
class YearPlan:
    """Composition of one simulated year: 4 seasons x 13 weeks x 7 days."""

    seed: int
    season_names: list  # 4 entries
    week_types: list  # 52 entries
    day_types: list  # 52 lists of 7 entries

    def __post_init__(self):
        assert len(self.week_types) == YEAR_WEEKS
        assert len(self.day_types) == YEAR_WEEKS


def plan_year(seed: int) -> YearPlan:
    rng = stream(seed, 0)
    week_types: list = []
    day_types: list = []
    for name in SEASON_NAMES:
        season = Season(name, SEASON_COMPOSITIONS[name])
        for week_type in plan_season(season, rng):
            week = BasisWeek(week_type, WEEK_COMPOSITIONS[week_type])
            week_types.append(week_type)
            day_types.append(plan_week(week, rng))
    return YearPlan(seed=seed, season_names=list(SEASON_NAMES), week_types=week_types, day_types=day_types)


def compose_week(
    week: BasisWeek,
    season_class: str,
    rng: np.random.Generator,
    body_weight_kg: float,
    week_offset_s: float,
    basis_days: dict,
) -> list:
    out = []
    for i, day_type in enumerate(plan_week(week, rng)):
        day = basis_days[(day_type, season_class)]
        out.extend(compose_day(day, body_weight_kg, week_offset_s + i * DAY_S))
    return out


def compose_year(seed: int, body_weight_kg: float, basis_days: dict | None = None) -> Protocol:
    """Compose a 52-week (364-day) protocol, deterministic in ``seed``."""
    if body_weight_kg <= 0:
        raise ProtocolError("body weight must be positive")
    if basis_days is None:
        basis_days = load_basis_days()
    plan = plan_year(seed)
    disturbances = []
    for week_idx in range(YEAR_WEEKS):
        season_class = SEASON_CLASS_OF[plan.season_names[week_idx // 13]]
        week_offset = week_idx * WEEK_S
        for day_idx, day_type in enumerate(plan.day_types[week_idx]):
            day = basis_days[(day_type, season_class)]
            disturbances.extend(compose_day(day, body_weight_kg, week_offset + day_idx * DAY_S))
    return Protocol(
        id=f"northern-year/seed={seed}/bw={body_weight_kg:g}",
        horizon_s=YEAR_S,
        disturbances=disturbances,
    )


def apply_announcement_policy(
    protocol: Protocol, policy: AnnouncementPolicy, rng: np.random.Generator
) -> Protocol:
    """Return a copy with some meals unannounced and the rest (mis)announced.

    Each meal is independently left unannounced with probability
    ``fraction_unannounced``; otherwise its announced size is the true size
    scaled by a factor drawn uniformly from the configured range. True CHO
    magnitudes are never altered.
    """
    lo, hi = policy.misannouncement_factor_range
    out = []
    for d in protocol.disturbances:
        if d.kind != "meal":
            out.append(replace(d))
            continue
        if rng.random() < policy.fraction_unannounced:
            out.append(replace(d, announced=False, announced_magnitude=0.0))
        else:
            factor = lo if lo == hi else rng.uniform(lo, hi)
            out.append(replace(d, announced=True, announced_magnitude=d.magnitude * factor))
    return Protocol(id=protocol.id, horizon_s=protocol.horizon_s, disturbances=out)


def validate_protocol(protocol: Protocol) -> list:
    """Return all invariant violations (empty list means the protocol is ok)."""
    violations = []
    if protocol.horizon_s < 0:
        violations.append("horizon is negative")
    last_start = -np.inf
    last_end = {"meal": -np.inf, "exercise": -np.inf}
    last_idx = {"meal": None, "exercise": None}
    for i, d in enumerate(protocol.disturbances):
        tag = f"disturbance[{i}] ({d.kind} @ {d.start_s:g}s)"
        if d.kind not in ("meal", "exercise"):
            violations.append(f"{tag}: unknown kind")
            continue
        if not d.start_s < d.end_s:
            violations.append(f"{tag}: start must be before end")
        if d.magnitude < 0:
            violations.append(f"{tag}: negative magnitude")
        if d.announced_magnitude is None or d.announced_magnitude < 0:
            violations.append(f"{tag}: negative announced magnitude")
        if d.start_s < 0 or d.end_s > protocol.horizon_s:
            violations.append(f"{tag}: outside [0, horizon]")
        if d.start_s < last_start:
            violations.append(f"{tag}: disturbances not time-ordered")
        last_start = d.start_s
        if d.start_s < last_end[d.kind]:
            violations.append(f"{tag}: overlaps disturbance[{last_idx[d.kind]}] of same kind")
        if d.end_s > last_end[d.kind]:
            last_end[d.kind] = d.end_s
            last_idx[d.kind] = i
    return violations

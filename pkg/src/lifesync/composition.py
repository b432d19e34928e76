"""Composition layer: turn validated readings into dimension point deltas.

Rules are data, loaded from a JSON catalog (``kind -> rule``). Three rule
modes exist:

``linear``
    ``floor(quantity * rate)`` credited, clipped by the per-sensor daily cap.
``penalty_over_threshold``
    units beyond a per-day threshold debit ``rate`` each (screen time). The
    daily cap bounds the penalty magnitude.
``gameplay_budget``
    minutes of play credit ``rate`` each until the account's daily budget is
    spent; later minutes earn nothing (or debit, in punitive mode).

Quantities are interpreted through their shortest decimal repr so that
``0.29`` minutes at 100 mpt/min is 29 mpt, not 28.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterator

from .errors import ConfigError
from .twin import Dimension

GAMEPLAY_KIND = "gameplay_session"


class RuleMode(str, Enum):
    LINEAR = "linear"
    PENALTY_OVER_THRESHOLD = "penalty_over_threshold"
    GAMEPLAY_BUDGET = "gameplay_budget"


@dataclass(frozen=True)
class ConversionRule:
    kind: str
    dimension: Dimension
    rate_mpt_per_unit: int
    daily_cap_mpt: int
    unit_name: str
    mode: RuleMode = RuleMode.LINEAR
    threshold_units: float = 0.0
    daily_budget_units: int | None = None


@dataclass(frozen=True)
class DailyCapCounter:
    sensor_id: str
    utc_date: str
    credited_so_far_mpt: int = 0
    quantity_so_far: float = 0.0


@dataclass(frozen=True)
class GameplayBudget:
    daily_budget_minutes: int = 120
    credit_rate_mpt_per_minute: int = 50
    punitive: bool = False

    def __post_init__(self):
        if self.daily_budget_minutes <= 0:
            raise ValueError("daily_budget_minutes must be positive")
        if self.credit_rate_mpt_per_minute < 0:
            raise ValueError("credit rate must be non-negative")


@dataclass(frozen=True)
class Conversion:
    dimension: Dimension
    credited_mpt: int
    counter: DailyCapCounter
    uncapped_mpt: int


def _exact(q: float) -> Fraction:
    return Fraction(repr(float(q)))


def convert_reading(quantity: float, rule: ConversionRule) -> tuple[Dimension, int]:
    return rule.dimension, math.floor(_exact(quantity) * rule.rate_mpt_per_unit)


def apply_daily_cap(
    counter: DailyCapCounter, delta_mpt_uncapped: int, rule: ConversionRule
) -> tuple[int, DailyCapCounter]:
    room = max(0, rule.daily_cap_mpt - counter.credited_so_far_mpt)
    credited = max(0, min(delta_mpt_uncapped, room))
    return credited, replace(counter, credited_so_far_mpt=counter.credited_so_far_mpt + credited)


def gameplay_session_credit(
    session_minutes: float, minutes_already_today: float, budget: GameplayBudget
) -> int:
    creditable = _creditable_minutes(session_minutes, minutes_already_today, budget)
    return math.floor(creditable * budget.credit_rate_mpt_per_minute)


def _creditable_minutes(session: float, already: float, budget: GameplayBudget) -> Fraction:
    if not (math.isfinite(session) and math.isfinite(already)):
        raise ValueError("gameplay minutes must be finite")
    remaining = budget.daily_budget_minutes - _exact(already)
    return max(Fraction(0), min(_exact(session), remaining))


def compose(
    rule: ConversionRule,
    quantity: float,
    counter: DailyCapCounter,
    *,
    gameplay_minutes_today: float = 0.0,
    budget: GameplayBudget | None = None,
) -> Conversion:
    """Full conversion of one reading: rule arithmetic, budget and daily cap."""
    new_quantity = counter.quantity_so_far + quantity
    if rule.mode is RuleMode.LINEAR:
        _, raw = convert_reading(quantity, rule)
        credited, counter = apply_daily_cap(counter, raw, rule)
        signed = credited
    elif rule.mode is RuleMode.PENALTY_OVER_THRESHOLD:
        before = _exact(counter.quantity_so_far)
        over = max(Fraction(0), before + _exact(quantity) - max(_exact(rule.threshold_units), before))
        raw = math.floor(over * rule.rate_mpt_per_unit)
        magnitude, counter = apply_daily_cap(counter, raw, rule)
        signed = -magnitude
        raw = -raw
    else:
        budget = budget or gameplay_budget_for(rule)
        raw = gameplay_session_credit(quantity, gameplay_minutes_today, budget)
        credited, counter = apply_daily_cap(counter, raw, rule)
        signed = credited
        if budget.punitive:
            earned = _creditable_minutes(quantity, gameplay_minutes_today, budget)
            signed -= math.floor((_exact(quantity) - earned) * budget.credit_rate_mpt_per_minute)
    return Conversion(rule.dimension, signed, replace(counter, quantity_so_far=new_quantity), raw)


def gameplay_budget_for(rule: ConversionRule, punitive: bool = False) -> GameplayBudget:
    return GameplayBudget(
        daily_budget_minutes=rule.daily_budget_units or 120,
        credit_rate_mpt_per_minute=rule.rate_mpt_per_unit,
        punitive=punitive,
    )


_REQUIRED = {"dimension", "rate_mpt_per_unit", "daily_cap_mpt", "unit_name"}
_OPTIONAL = {"mode", "threshold_units", "daily_budget_units"}


def _positive_int(value, what: str) -> int:
    if type(value) is not int or value <= 0:
        raise ConfigError(f"{what} must be a positive integer, got {value!r}")
    return value


def parse_rule(kind: str, spec: Mapping) -> ConversionRule:
    if not isinstance(spec, Mapping):
        raise ConfigError(f"rule {kind!r} must be an object")
    missing = _REQUIRED - spec.keys()
    unknown = spec.keys() - _REQUIRED - _OPTIONAL
    if missing:
        raise ConfigError(f"rule {kind!r} missing fields: {sorted(missing)}")
    if unknown:
        raise ConfigError(f"rule {kind!r} has unknown fields: {sorted(unknown)}")
    try:
        dimension = Dimension(spec["dimension"])
        mode = RuleMode(spec.get("mode", "linear"))
    except ValueError as exc:
        raise ConfigError(f"rule {kind!r}: {exc}") from None
    if not isinstance(spec["unit_name"], str) or not spec["unit_name"]:
        raise ConfigError(f"rule {kind!r}: unit_name must be a non-empty string")
    threshold = spec.get("threshold_units", 0.0)
    if isinstance(threshold, bool) or not isinstance(threshold, (int, float)) or not (
        math.isfinite(threshold) and threshold >= 0
    ):
        raise ConfigError(f"rule {kind!r}: threshold_units must be a finite non-negative number")
    budget_units = spec.get("daily_budget_units")
    if mode is RuleMode.GAMEPLAY_BUDGET:
        budget_units = _positive_int(budget_units, f"rule {kind!r} daily_budget_units")
    elif budget_units is not None:
        raise ConfigError(f"rule {kind!r}: daily_budget_units only applies to gameplay_budget")
    return ConversionRule(
        kind=kind,
        dimension=dimension,
        rate_mpt_per_unit=_positive_int(spec["rate_mpt_per_unit"], f"rule {kind!r} rate"),
        daily_cap_mpt=_positive_int(spec["daily_cap_mpt"], f"rule {kind!r} daily cap"),
        unit_name=spec["unit_name"],
        mode=mode,
        threshold_units=float(threshold),
        daily_budget_units=budget_units,
    )


class RuleCatalog(Mapping):
    """Immutable ``kind -> ConversionRule`` map, validated on construction."""

    def __init__(self, rules: Mapping[str, ConversionRule]):
        self._rules = dict(rules)

    @classmethod
    def from_json(cls, data: Mapping) -> "RuleCatalog":
        if not isinstance(data, Mapping) or not data:
            raise ConfigError("rule catalog must be a non-empty JSON object")
        return cls({kind: parse_rule(kind, spec) for kind, spec in data.items()})

    @classmethod
    def load(cls, path: str | Path) -> "RuleCatalog":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read rule catalog {path}: {exc}") from None
        return cls.from_json(data)

    @classmethod
    def default(cls) -> "RuleCatalog":
        text = resources.files("lifesync.data").joinpath("default_rules.json").read_text("utf-8")
        return cls.from_json(json.loads(text))

    def __getitem__(self, kind: str) -> ConversionRule:
        return self._rules[kind]

    def __iter__(self) -> Iterator[str]:
        return iter(self._rules)

    def __len__(self) -> int:
        return len(self._rules)

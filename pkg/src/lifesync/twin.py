"""Digital-twin arithmetic: dimensions, decaying balances, scores, modifiers.

Everything here is pure. Time is always passed in explicitly as integer UTC
milliseconds; nothing reads a clock.

Balances are integer millipoints (1/1000 of a display point). The decay
factor ``2 ** -(elapsed_hours / half_life_hours)`` is evaluated once in IEEE
double precision, then multiplied *exactly* with the integer base using the
float's rational value and floored. That keeps folds bit-reproducible on any
runtime with a correctly behaving ``pow``.

A double carries 53 bits, so from ``2**53`` mpt upward its rounding error
would exceed one millipoint. Bases that large take a slower path: exact
shifts for whole numbers of half-lives, 60-digit decimal arithmetic otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_FLOOR, Decimal, localcontext
from enum import Enum
from fractions import Fraction
from typing import Mapping

from ._util import MS_PER_HOUR
from .errors import InsufficientPoints, InvalidBinding, NotPassive, Overflow, TimeBeforeBase

SKEW_MS = 300_000
MAX_MPT = 2**62
FLOAT_EXACT_LIMIT = 2**53
DEFAULT_HALF_LIFE_HOURS = 72.0
DEFAULT_SOFT_CAP_MPT = 100_000


class Dimension(str, Enum):
    PHYSICAL = "PHYSICAL"
    COGNITIVE = "COGNITIVE"
    AFFECTIVE = "AFFECTIVE"
    SOCIAL = "SOCIAL"
    LIFESTYLE = "LIFESTYLE"


class MechanicMode(str, Enum):
    PASSIVE = "PASSIVE"
    ON_DEMAND = "ON_DEMAND"


@dataclass(frozen=True)
class DimensionBalance:
    base_mpt: int = 0
    base_time: int = 0
    half_life_hours: float = DEFAULT_HALF_LIFE_HOURS

    def __post_init__(self):
        if self.base_mpt < 0:
            raise ValueError("base_mpt must be non-negative")
        if not self.half_life_hours > 0:
            raise ValueError("half_life_hours must be positive")


@dataclass(frozen=True)
class TwinSettings:
    """Per-dimension decay and normalization constants."""

    half_life_hours: Mapping[Dimension, float] = field(
        default_factory=lambda: {d: DEFAULT_HALF_LIFE_HOURS for d in Dimension}
    )
    soft_cap_mpt: Mapping[Dimension, int] = field(
        default_factory=lambda: {d: DEFAULT_SOFT_CAP_MPT for d in Dimension}
    )

    def __post_init__(self):
        for d in Dimension:
            if not self.half_life_hours.get(d, 0) > 0:
                raise ValueError(f"half life for {d.value} must be positive")
            cap = self.soft_cap_mpt.get(d, 0)
            if not isinstance(cap, int) or cap <= 0:
                raise ValueError(f"soft cap for {d.value} must be a positive integer")

    def empty_balance(self, dimension: Dimension, at: int) -> DimensionBalance:
        return DimensionBalance(0, at, self.half_life_hours[dimension])


def clamp_time(b: DimensionBalance, at: int) -> int:
    """Pull ``at`` up to ``b.base_time`` inside the skew window, reject older."""
    if at >= b.base_time:
        return at
    if at < b.base_time - SKEW_MS:
        raise TimeBeforeBase(
            f"time {at} precedes balance base time {b.base_time} by more than {SKEW_MS} ms",
            at=at,
            base_time=b.base_time,
        )
    return b.base_time


def decay_factor(elapsed_ms: int, half_life_hours: float) -> float:
    return 2.0 ** (-(elapsed_ms / (MS_PER_HOUR * half_life_hours)))


def _precise_decay(base: int, elapsed_ms: int, half_life_hours: float) -> int:
    x = Fraction(elapsed_ms) / (MS_PER_HOUR * Fraction(half_life_hours))
    if x.denominator == 1:
        return base >> x.numerator
    with localcontext() as ctx:
        ctx.prec = 60
        f = Decimal(2) ** -(Decimal(x.numerator) / Decimal(x.denominator))
        return int((Decimal(base) * f).to_integral_value(rounding=ROUND_FLOOR))


def effective_balance(b: DimensionBalance, at: int) -> int:
    at = clamp_time(b, at)
    if b.base_mpt == 0 or at == b.base_time:
        return b.base_mpt
    if b.base_mpt >= FLOAT_EXACT_LIMIT:
        return _precise_decay(b.base_mpt, at - b.base_time, b.half_life_hours)
    num, den = decay_factor(at - b.base_time, b.half_life_hours).as_integer_ratio()
    return b.base_mpt * num // den


def credit(b: DimensionBalance, delta_mpt: int, at: int) -> DimensionBalance:
    """Decay ``b`` to ``at`` and add a signed delta, flooring the result at zero."""
    at = clamp_time(b, at)
    new = max(0, effective_balance(b, at) + delta_mpt)
    if new > MAX_MPT:
        raise Overflow(f"balance would exceed {MAX_MPT} mpt")
    return replace(b, base_mpt=new, base_time=at)


def debit(b: DimensionBalance, amount_mpt: int, at: int) -> DimensionBalance:
    if amount_mpt <= 0:
        raise ValueError("debit amount must be positive")
    at = clamp_time(b, at)
    available = effective_balance(b, at)
    if available < amount_mpt:
        raise InsufficientPoints(available, amount_mpt)
    return replace(b, base_mpt=available - amount_mpt, base_time=at)


def attribute_score(effective_mpt: int, soft_cap_mpt: int) -> float:
    if soft_cap_mpt <= 0:
        raise ValueError("soft_cap_mpt must be positive")
    if effective_mpt <= 0:
        return 0.0
    return effective_mpt / (effective_mpt + soft_cap_mpt)


@dataclass(frozen=True)
class MechanicBinding:
    """How one game mechanic consumes (ON_DEMAND) or maps (PASSIVE) a dimension."""

    mechanic_id: str
    game_id: str
    dimension: Dimension
    mode: MechanicMode
    cost_mpt: int | None = None
    modifier_lo: float | None = None
    modifier_hi: float | None = None

    def __post_init__(self):
        if not isinstance(self.mechanic_id, str) or not 1 <= len(self.mechanic_id) <= 64:
            raise InvalidBinding("mechanic_id must be 1-64 characters")
        object.__setattr__(self, "dimension", _enum(Dimension, self.dimension))
        object.__setattr__(self, "mode", _enum(MechanicMode, self.mode))
        if self.mode is MechanicMode.ON_DEMAND:
            if self.modifier_lo is not None or self.modifier_hi is not None:
                raise InvalidBinding("ON_DEMAND bindings take no modifier range")
            if type(self.cost_mpt) is not int or not 0 < self.cost_mpt <= MAX_MPT:
                raise InvalidBinding("ON_DEMAND bindings need a positive integer cost_mpt")
        else:
            if self.cost_mpt is not None:
                raise InvalidBinding("PASSIVE bindings carry no cost")
            lo, hi = self.modifier_lo, self.modifier_hi
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in (lo, hi)):
                raise InvalidBinding("PASSIVE bindings need numeric modifier_lo and modifier_hi")
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise InvalidBinding("modifier range must be finite with lo <= hi")
            object.__setattr__(self, "modifier_lo", float(lo))
            object.__setattr__(self, "modifier_hi", float(hi))

    def to_json(self) -> dict:
        return {
            "mechanic_id": self.mechanic_id,
            "game_id": self.game_id,
            "dimension": self.dimension.value,
            "mode": self.mode.value,
            "cost_mpt": self.cost_mpt,
            "modifier_lo": self.modifier_lo,
            "modifier_hi": self.modifier_hi,
        }


def _enum(cls, value):
    try:
        return cls(value)
    except ValueError:
        raise InvalidBinding(f"unknown {cls.__name__}: {value!r}") from None


def mechanic_modifier(score: float, binding: MechanicBinding) -> float:
    if binding.mode is not MechanicMode.PASSIVE:
        raise NotPassive(f"mechanic {binding.mechanic_id} is not PASSIVE")
    if not 0.0 <= score < 1.0:
        raise ValueError("score must lie in [0, 1)")
    lo, hi = binding.modifier_lo, binding.modifier_hi
    value = lo + (hi - lo) * score
    if hi > lo and value >= hi:
        # rounding near score -> 1 can land on hi; the range is half-open
        value = math.nextafter(hi, lo)
    return value

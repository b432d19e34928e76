from __future__ import annotations

import math

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifesync.errors import InsufficientPoints, InvalidBinding, NotPassive, Overflow, TimeBeforeBase
from lifesync.twin import (
    MAX_MPT,
    SKEW_MS,
    Dimension,
    DimensionBalance,
    MechanicBinding,
    MechanicMode,
    TwinSettings,
    attribute_score,
    credit,
    debit,
    effective_balance,
    mechanic_modifier,
)

H = 3_600_000
T0 = 1_772_438_400_000


def exact_floor(base: int, dt_ms: int, hl_hours: float) -> int:
    with mpmath.workdps(60):
        return int(mpmath.floor(mpmath.mpf(base) * mpmath.power(2, -mpmath.mpf(dt_ms) / (mpmath.mpf(hl_hours) * H))))


def speed(lo=0.8, hi=1.2):
    return MechanicBinding("speed", "g", Dimension.PHYSICAL, MechanicMode.PASSIVE, None, lo, hi)


# -- decay ---------------------------------------------------------------------


def test_zero_elapsed_keeps_base():
    assert effective_balance(DimensionBalance(100_000, T0), T0) == 100_000


def test_one_half_life_halves_exactly():
    assert effective_balance(DimensionBalance(100_000, T0, 72.0), T0 + 72 * H) == 50_000


def test_half_a_half_life():
    # floor(100000 * 2**-0.5) evaluated at 60 digits
    assert exact_floor(100_000, 36 * H, 72.0) == 70_710
    assert effective_balance(DimensionBalance(100_000, T0, 72.0), T0 + 36 * H) == 70_710


def test_query_slightly_before_base_is_clamped():
    b = DimensionBalance(1000, T0)
    assert effective_balance(b, T0 - SKEW_MS) == 1000
    with pytest.raises(TimeBeforeBase):
        effective_balance(b, T0 - SKEW_MS - 1)


@settings(max_examples=300)
@given(
    base=st.integers(0, MAX_MPT),
    dt=st.integers(0, 400 * 24 * H),
    hl=st.floats(1.0, 2000.0),
)
def test_decay_matches_high_precision_within_one(base, dt, hl):
    got = effective_balance(DimensionBalance(base, T0, hl), T0 + dt)
    assert abs(got - exact_floor(base, dt, hl)) <= 1


def test_large_bases_keep_unit_precision():
    # a double factor would be off by hundreds of mpt here
    base = MAX_MPT - 12345
    assert effective_balance(DimensionBalance(base, T0, 72.0), T0 + 36 * H) == exact_floor(base, 36 * H, 72.0)
    assert effective_balance(DimensionBalance(base, T0, 72.0), T0 + 144 * H) == base // 4


@given(base=st.integers(0, 10**9), a=st.integers(0, 10**9), b=st.integers(0, 10**9))
def test_decay_is_monotone_and_bounded(base, a, b):
    bal = DimensionBalance(base, T0)
    early, late = sorted((a, b))
    e1, e2 = effective_balance(bal, T0 + early), effective_balance(bal, T0 + late)
    assert 0 <= e2 <= e1 <= base


# -- credit / debit ------------------------------------------------------------


def test_credit_to_empty():
    assert credit(DimensionBalance(0, T0), 10_000, T0 + 5 * H) == DimensionBalance(10_000, T0 + 5 * H)


def test_credit_floors_at_zero():
    assert credit(DimensionBalance(100_000, T0), -200_000, T0).base_mpt == 0


def test_credit_after_one_half_life():
    # 50000 decayed remainder plus the new 10000
    out = credit(DimensionBalance(100_000, T0, 72.0), 10_000, T0 + 72 * H)
    assert out == DimensionBalance(60_000, T0 + 72 * H, 72.0)


def test_credit_overflow():
    with pytest.raises(Overflow):
        credit(DimensionBalance(MAX_MPT, T0), 1, T0)


def test_debit_full_and_unit():
    assert debit(DimensionBalance(100_000, T0), 100_000, T0).base_mpt == 0
    assert debit(DimensionBalance(100_000, T0), 1, T0).base_mpt == 99_999


def test_debit_after_decay_is_insufficient():
    with pytest.raises(InsufficientPoints) as info:
        debit(DimensionBalance(100_000, T0, 72.0), 60_000, T0 + 72 * H)
    assert info.value.details["effective_mpt"] == 50_000


def test_debit_rejects_non_positive():
    with pytest.raises(ValueError):
        debit(DimensionBalance(10, T0), 0, T0)


@given(base=st.integers(0, 10**9), delta=st.integers(-(10**9), 10**9), dt=st.integers(0, 10**9))
def test_credit_is_decay_then_add(base, delta, dt):
    b = DimensionBalance(base, T0)
    out = credit(b, delta, T0 + dt)
    assert out.base_time == T0 + dt
    assert out.base_mpt == max(0, effective_balance(b, T0 + dt) + delta)


# -- scores and modifiers ------------------------------------------------------


@pytest.mark.parametrize("e,expected", [(0, 0.0), (100_000, 0.5), (300_000, 0.75)])
def test_attribute_score(e, expected):
    assert attribute_score(e, 100_000) == expected


@given(a=st.integers(0, MAX_MPT), b=st.integers(0, MAX_MPT))
def test_score_monotone_in_unit_interval(a, b):
    lo, hi = sorted((a, b))
    s1, s2 = attribute_score(lo, 100_000), attribute_score(hi, 100_000)
    assert 0.0 <= s1 <= s2 < 1.0


def test_modifier_examples():
    assert mechanic_modifier(0.0, speed()) == 0.8
    assert mechanic_modifier(0.5, speed()) == pytest.approx(1.0, abs=1e-15)
    assert mechanic_modifier(0.75, speed()) == pytest.approx(1.1, abs=1e-15)
    assert mechanic_modifier(0.0, speed(1.3, 1.3)) == 1.3
    assert mechanic_modifier(0.9, speed(1.3, 1.3)) == 1.3


@given(score=st.floats(0.0, 1.0, exclude_max=True), lo=st.floats(-100, 100), width=st.floats(1e-6, 100))
def test_modifier_stays_in_half_open_range(score, lo, width):
    b = speed(lo, lo + width)
    value = mechanic_modifier(score, b)
    assert b.modifier_lo <= value < b.modifier_hi


def test_modifier_rejects_on_demand_binding():
    b = MechanicBinding("boost", "g", "PHYSICAL", "ON_DEMAND", 100)
    with pytest.raises(NotPassive):
        mechanic_modifier(0.2, b)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(mode="PASSIVE", cost_mpt=5, modifier_lo=0.8, modifier_hi=1.2),
        dict(mode="PASSIVE", modifier_lo=1.2, modifier_hi=0.8),
        dict(mode="PASSIVE", modifier_lo=math.nan, modifier_hi=1.0),
        dict(mode="ON_DEMAND", cost_mpt=0),
        dict(mode="ON_DEMAND", cost_mpt=1.5),
        dict(mode="ON_DEMAND", cost_mpt=10, modifier_lo=1.0, modifier_hi=2.0),
        dict(mode="SOMETIMES", cost_mpt=10),
    ],
)
def test_invalid_bindings(kwargs):
    with pytest.raises(InvalidBinding):
        MechanicBinding("m", "g", "PHYSICAL", **kwargs)


def test_settings_validation():
    with pytest.raises(ValueError):
        TwinSettings(half_life_hours={d: 0.0 for d in Dimension})
    with pytest.raises(ValueError):
        TwinSettings(soft_cap_mpt={d: 1.5 for d in Dimension})

"""A toy endless-runner loop used to exercise the SDK the way a game would.

Each frame reads the passive speed modifier and every ``boost_every`` frames
tries an on-demand boost. Frames record how long the SDK calls blocked, which
is what the no-stall guarantee is measured against.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

from ..sdk import Session, SpendResult
from ..twin import MechanicBinding


@dataclass(frozen=True)
class Frame:
    index: int
    modifier: float
    speed: float
    spend: SpendResult | None
    sdk_seconds: float


@dataclass(frozen=True)
class RunSummary:
    frames: tuple[Frame, ...]
    distance: float

    @property
    def max_sdk_seconds(self) -> float:
        return max((f.sdk_seconds for f in self.frames), default=0.0)


class SimulatedGame:
    def __init__(
        self,
        session: Session | None,
        speed_binding: MechanicBinding,
        boost_mechanic: str | None = None,
        *,
        base_speed: float = 10.0,
        boost_every: int = 0,
        boost_factor: float = 1.5,
        timer: Callable[[], float] = time.perf_counter,
    ):
        self.session = session
        self.binding = speed_binding
        self.boost_mechanic = boost_mechanic
        self.base_speed = base_speed
        self.boost_every = boost_every
        self.boost_factor = boost_factor
        self.timer = timer

    def frame(self, index: int) -> Frame:
        spend = None
        t0 = self.timer()
        if self.session is None:
            # built without the SDK at all: neutral midpoint of the designed range
            modifier = (self.binding.modifier_lo + self.binding.modifier_hi) / 2.0
        else:
            modifier = self.session.passive_modifier(self.binding)
            if self.boost_mechanic and self.boost_every and index % self.boost_every == 0:
                spend = self.session.spend(self.boost_mechanic).result
        elapsed = self.timer() - t0
        speed = self.base_speed * modifier
        if spend is SpendResult.GRANTED:
            speed *= self.boost_factor
        return Frame(index, modifier, speed, spend, elapsed)

    def run(self, frames: int) -> RunSummary:
        out = tuple(self.frame(i) for i in range(frames))
        return RunSummary(out, sum(f.speed for f in out))

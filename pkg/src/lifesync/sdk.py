"""Game-side SDK: link a player profile and consume it without ever stalling
the game loop.

Every network call runs on a small worker pool and the caller waits at most
``request_timeout_ms``. When the server is slow, down or the player has no
profile, calls degrade to values (cached scores, the neutral offline score,
``DECLINED_OFFLINE``) instead of raising, so a game plays the same with or
without an account.

    session = connect(SdkConfig(url, game_token, account_id))
    speed = base_speed * session.passive_modifier(speed_binding)
    if player_pressed_boost:
        outcome = session.spend("boost")
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, replace
from datetime import datetime
from enum import Enum
from types import MappingProxyType
from typing import Any, Callable, Mapping

from ._util import format_ts, new_id, to_ms
from .client import ApiClient, HeaderSource, TransportError
from .errors import LsgError, NotPassive
from .twin import Dimension, MechanicBinding, MechanicMode, mechanic_modifier

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 3

Transport = Callable[[str, str, Any, "str | None"], Any]


class SessionStatus(str, Enum):
    LIVE = "LIVE"
    UNLINKED = "UNLINKED"


class Freshness(str, Enum):
    LIVE = "LIVE"
    CACHED = "CACHED"
    OFFLINE_DEFAULT = "OFFLINE_DEFAULT"


class SpendResult(str, Enum):
    GRANTED = "GRANTED"
    INSUFFICIENT = "INSUFFICIENT"
    DECLINED_OFFLINE = "DECLINED_OFFLINE"
    ERROR = "ERROR"


class ReportStatus(str, Enum):
    ACCEPTED = "ACCEPTED"
    DUPLICATE = "DUPLICATE"
    REJECTED = "REJECTED"
    INVALID = "INVALID"
    DROPPED = "DROPPED"


@dataclass(frozen=True)
class SdkConfig:
    server_base_url: str
    game_token: str
    account_id: str | None = None
    request_timeout_ms: int = 100
    snapshot_ttl_ms: int = 5000
    offline_default_score: float = 0.5
    extra_headers: HeaderSource = None

    def __post_init__(self):
        if not self.request_timeout_ms > 0:
            raise ValueError("request_timeout_ms must be positive")
        if self.snapshot_ttl_ms < 0:
            raise ValueError("snapshot_ttl_ms must be non-negative")
        if not 0.0 <= self.offline_default_score < 1.0:
            raise ValueError("offline_default_score must lie in [0, 1)")


@dataclass(frozen=True)
class SdkSnapshot:
    scores: Mapping[Dimension, float]
    freshness: Freshness
    fetched_at: float | None

    def score(self, dimension: Dimension | str) -> float:
        return self.scores[Dimension(dimension)]


@dataclass(frozen=True)
class SpendOutcome:
    result: SpendResult
    idempotency_key: str | None = None
    grant_token: str | None = None
    error_code: str | None = None


@dataclass(frozen=True)
class ReportOutcome:
    status: ReportStatus
    reading_id: str | None = None
    credited_mpt: int = 0
    reason: str | None = None


class _Deadline(Exception):
    pass


def session_reading_id(game_id: str, started_at_ms: int) -> str:
    """Deterministic dedup key for one play session (stable across restarts)."""
    return hashlib.sha256(f"{game_id}|{format_ts(started_at_ms)}".encode("utf-8")).hexdigest()


def _ms(value: datetime | int) -> int:
    return to_ms(value) if isinstance(value, datetime) else int(value)


class Session:
    """One game's view of one (optional) player profile. Thread-safe."""

    def __init__(
        self,
        config: SdkConfig,
        *,
        linked: bool,
        transport: Transport | None = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.config = config
        self.status = SessionStatus.LIVE if linked and config.account_id else SessionStatus.UNLINKED
        self._clock = clock
        self._timeout = config.request_timeout_ms / 1000.0
        if transport is None:
            client = ApiClient(config.server_base_url, timeout=self._timeout, headers=config.extra_headers)
            transport = client.request
        self._transport = transport
        self._pool = ThreadPoolExecutor(max_workers=4, thread_name_prefix="lsg-sdk")
        self._offline = SdkSnapshot(
            MappingProxyType({d: config.offline_default_score for d in Dimension}),
            Freshness.OFFLINE_DEFAULT,
            None,
        )
        # (snapshot, monotonic fetch time); replaced as one object so readers never see a torn pair
        self._cache: tuple[SdkSnapshot, float] | None = None
        self._refresh_lock = threading.Lock()
        self._inflight: Future | None = None
        self._sensor: dict | None = None
        self._sensor_lock = threading.Lock()
        self.fetch_count = 0

    @property
    def linked(self) -> bool:
        return self.status is SessionStatus.LIVE

    def close(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- plumbing --------------------------------------------------------------

    def _call(self, method: str, path: str, body: Any, token: str | None, deadline: float) -> Any:
        remaining = deadline - self._clock()
        if remaining <= 0:
            raise _Deadline()

        def task():
            if self._clock() > deadline:
                raise _Deadline()
            return self._transport(method, path, body, token)

        try:
            fut = self._pool.submit(task)
        except RuntimeError:
            raise _Deadline() from None
        try:
            return fut.result(timeout=remaining)
        except FutureTimeout:
            raise _Deadline() from None

    # -- snapshots ---------------------------------------------------------------

    def _fetch_snapshot(self) -> SdkSnapshot:
        self.fetch_count += 1
        payload = self._transport(
            "GET", f"/v1/profiles/{self.config.account_id}/snapshot", None, self.config.game_token
        )
        scores = {Dimension(k): float(v["score"]) for k, v in payload["dimensions"].items()}
        snap = SdkSnapshot(MappingProxyType(scores), Freshness.LIVE, time.time())
        self._cache = (snap, self._clock())
        return snap

    def current_snapshot(self) -> SdkSnapshot:
        if not self.linked:
            return self._offline
        cached = self._cache
        now = self._clock()
        if cached is not None and (now - cached[1]) * 1000.0 < self.config.snapshot_ttl_ms:
            return cached[0]
        deadline = now + self._timeout
        with self._refresh_lock:
            fut = self._inflight
            if fut is None or fut.done():
                try:
                    fut = self._pool.submit(self._fetch_snapshot)
                except RuntimeError:
                    fut = None
                self._inflight = fut
        if fut is not None:
            try:
                return fut.result(timeout=max(0.0, deadline - self._clock()))
            except FutureTimeout:
                pass
            except (TransportError, LsgError, KeyError, TypeError, ValueError) as exc:
                log.debug("snapshot refresh failed: %s", exc)
        cached = self._cache
        if cached is None:
            return self._offline
        return replace(cached[0], freshness=Freshness.CACHED)

    def passive_modifier(self, binding: MechanicBinding) -> float:
        if binding.mode is not MechanicMode.PASSIVE:
            raise NotPassive(f"mechanic {binding.mechanic_id} is not PASSIVE")
        return mechanic_modifier(self.current_snapshot().scores[binding.dimension], binding)

    # -- spending ----------------------------------------------------------------

    def spend(self, mechanic_id: str, idempotency_key: str | None = None) -> SpendOutcome:
        """Trigger an on-demand mechanic. Pass the key of a previous
        ``DECLINED_OFFLINE`` outcome to retry the same logical spend."""
        if not self.linked:
            return SpendOutcome(SpendResult.DECLINED_OFFLINE, idempotency_key)
        key = idempotency_key or new_id()
        body = {"account_id": self.config.account_id, "mechanic_id": mechanic_id, "idempotency_key": key}
        deadline = self._clock() + self._timeout
        for _ in range(MAX_ATTEMPTS):
            try:
                rec = self._call("POST", "/v1/redemptions", body, self.config.game_token, deadline)
            except _Deadline:
                break
            except TransportError:
                continue
            except LsgError as exc:
                if exc.retryable:
                    continue
                return SpendOutcome(SpendResult.ERROR, key, error_code=exc.code)
            if rec.get("result") == "GRANTED":
                return SpendOutcome(SpendResult.GRANTED, key, rec.get("grant_token"))
            return SpendOutcome(SpendResult.INSUFFICIENT, key)
        return SpendOutcome(SpendResult.DECLINED_OFFLINE, key)

    # -- telemetry ---------------------------------------------------------------

    def _gameplay_sensor(self, deadline: float) -> dict:
        if self._sensor is not None:
            return self._sensor
        if not self._sensor_lock.acquire(timeout=max(0.0, deadline - self._clock())):
            raise _Deadline()
        try:
            if self._sensor is None:
                self._sensor = self._call(
                    "POST", "/v1/gameplay-sensors", {"account_id": self.config.account_id},
                    self.config.game_token, deadline,
                )
            return self._sensor
        finally:
            self._sensor_lock.release()

    def report_session(self, started_at: datetime | int, ended_at: datetime | int) -> ReportOutcome:
        """Report one finished play session as a ``gameplay_session`` reading.

        Never raises for network trouble: after the retries the report is
        dropped, because telemetry must not cost the player anything.
        """
        start, end = _ms(started_at), _ms(ended_at)
        if end < start:
            return ReportOutcome(ReportStatus.INVALID, reason="ended_at precedes started_at")
        if not self.linked:
            return ReportOutcome(ReportStatus.DROPPED, reason="unlinked")
        minutes = (end - start) / 60_000.0
        deadline = self._clock() + self._timeout
        reading_id = None
        for _ in range(MAX_ATTEMPTS):
            try:
                sensor = self._gameplay_sensor(deadline)
                reading_id = session_reading_id(sensor["game_id"], start)
                row = {
                    "reading_id": reading_id,
                    "sensor_id": sensor["sensor_id"],
                    "quantity": minutes,
                    "observed_at": format_ts(end),
                }
                reply = self._call("POST", "/v1/readings", {"readings": [row]}, sensor["api_key"], deadline)
                (res,) = reply["results"]
            except _Deadline:
                break
            except TransportError:
                continue
            except LsgError as exc:
                if exc.retryable:
                    continue
                return ReportOutcome(ReportStatus.REJECTED, reading_id, reason=exc.code)
            status = res["status"]
            if status in ("ACCEPTED", "DUPLICATE"):
                return ReportOutcome(ReportStatus(status), reading_id, res["credited_mpt"])
            return ReportOutcome(ReportStatus.REJECTED, reading_id, reason=res.get("reason") or status)
        return ReportOutcome(ReportStatus.DROPPED, reading_id, reason="server unreachable")


def connect(config: SdkConfig, *, transport: Transport | None = None) -> Session:
    """Open a session; returns an UNLINKED session (never raises) when there is
    no account or the server does not answer within the timeout."""
    if not config.account_id:
        return Session(config, linked=False, transport=transport)
    session = Session(config, linked=True, transport=transport)
    snap = session.current_snapshot()
    if snap.freshness is not Freshness.LIVE:
        session.close()
        return Session(config, linked=False, transport=transport)
    return session


def offline_is_midpoint(binding: MechanicBinding, offline_score: float = 0.5) -> bool:
    """True when an UNLINKED session plays this binding at its range midpoint."""
    mid = (binding.modifier_lo + binding.modifier_hi) / 2.0
    return math.isclose(mechanic_modifier(offline_score, binding), mid, rel_tol=0, abs_tol=1e-12)

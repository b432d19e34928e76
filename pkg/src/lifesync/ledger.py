"""Append-only event ledger with a deterministic fold to profile state.

Every account and every game is a *stream*: a dense, seq-numbered list of
:class:`LedgerEvent` persisted as one JSON Lines file ``<stream_id>.log``.
All in-memory state is a fold over those events, so ``rebuild`` after a
crash reproduces the live state exactly.

Writers to one stream are serialized by that stream's lock; readers take no
lock and see the last committed ``Committed`` tuple, which is swapped in
atomically after the batch's lines reach the file.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterator, Mapping

from ._util import MS_PER_HOUR, canonical_json, format_ts, new_token, parse_ts
from .composition import GAMEPLAY_KIND, DailyCapCounter
from .errors import (
    AsOfBeforeLastEvent,
    CorruptLog,
    InsufficientPoints,
    InvalidBinding,
    InvalidTransition,
    KeyPayloadMismatch,
    LsgError,
    NotOnDemand,
    PriceMismatch,
    SequenceConflict,
    StorageError,
    TimeBeforeBase,
    UnknownAccount,
    UnknownGame,
    UnknownMechanic,
    ValidationFailed,
)
from .twin import (
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
)

log = logging.getLogger(__name__)

DECLINED_FILE = "declined.jsonl"


class EventKind(str, Enum):
    ACCOUNT_CREATED = "ACCOUNT_CREATED"
    SENSOR_REGISTERED = "SENSOR_REGISTERED"
    READING_CREDITED = "READING_CREDITED"
    POINTS_REDEEMED = "POINTS_REDEEMED"
    MECHANIC_REGISTERED = "MECHANIC_REGISTERED"
    GAME_REGISTERED = "GAME_REGISTERED"


@dataclass(frozen=True)
class LedgerEvent:
    seq: int
    occurred_at: int
    kind: EventKind
    payload: Mapping[str, Any]

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "occurred_at": format_ts(self.occurred_at),
            "kind": self.kind.value,
            "payload": dict(self.payload),
        }

    def to_line(self) -> str:
        return canonical_json(self.to_json()) + "\n"

    @classmethod
    def from_json(cls, obj: Mapping) -> "LedgerEvent":
        if not isinstance(obj, Mapping) or set(obj) != {"seq", "occurred_at", "kind", "payload"}:
            raise ValueError("event must have exactly seq, occurred_at, kind, payload")
        if type(obj["seq"]) is not int or not isinstance(obj["payload"], Mapping):
            raise ValueError("bad seq or payload type")
        return cls(obj["seq"], parse_ts(obj["occurred_at"]), EventKind(obj["kind"]), obj["payload"])


@dataclass(frozen=True)
class SensorInfo:
    sensor_id: str
    kind: str
    origin: str
    created_at: int
    game_id: str | None = None
    api_key_sha256: str = ""

    @property
    def dedup_scope(self) -> str:
        # in-game session sensors are short-lived; dedup their reports per game
        return f"game:{self.game_id}" if self.game_id else self.sensor_id


@dataclass(frozen=True)
class Committed:
    last_seq: int
    head_time: int | None
    balances: Mapping[Dimension, DimensionBalance]


@dataclass
class AccountState:
    account_id: str
    settings: TwinSettings
    owner_token_sha256: str = ""
    created_at: int | None = None
    last_seq: int = 0
    head_time: int | None = None
    balances: dict[Dimension, DimensionBalance] = field(default_factory=dict)
    sensors: dict[str, SensorInfo] = field(default_factory=dict)
    credited: dict[tuple[str, str], tuple[int, str]] = field(default_factory=dict)
    day_counters: dict[tuple[str, str], DailyCapCounter] = field(default_factory=dict)
    gameplay_minutes: dict[str, float] = field(default_factory=dict)
    events: list[LedgerEvent] = field(default_factory=list)
    committed: Committed = Committed(0, None, MappingProxyType({}))

    def publish(self) -> None:
        self.committed = Committed(self.last_seq, self.head_time, MappingProxyType(dict(self.balances)))

    def counter(self, sensor_id: str, date: str) -> DailyCapCounter:
        return self.day_counters.get((sensor_id, date)) or DailyCapCounter(sensor_id, date)


@dataclass
class GameState:
    game_id: str
    game_token_sha256: str = ""
    name: str = ""
    last_seq: int = 0
    head_time: int | None = None
    mechanics: dict[str, MechanicBinding] = field(default_factory=dict)
    events: list[LedgerEvent] = field(default_factory=list)

    def publish(self) -> None:
        pass


@dataclass(frozen=True)
class ProfileSnapshot:
    account_id: str
    as_of: int
    last_seq: int
    effective_mpt: Mapping[Dimension, int]
    scores: Mapping[Dimension, float]

    def to_json(self) -> dict:
        return {
            "account_id": self.account_id,
            "as_of": format_ts(self.as_of),
            "last_seq": self.last_seq,
            "dimensions": {
                d.value: {"effective_mpt": self.effective_mpt[d], "score": self.scores[d]}
                for d in Dimension
            },
        }


class RedemptionResult(str, Enum):
    GRANTED = "GRANTED"
    INSUFFICIENT = "INSUFFICIENT"


@dataclass(frozen=True)
class RedemptionRecord:
    idempotency_key: str
    game_id: str
    account_id: str
    mechanic_id: str
    amount_mpt: int
    result: RedemptionResult
    grant_token: str | None
    decided_at: int

    def to_json(self) -> dict:
        return {
            "idempotency_key": self.idempotency_key,
            "game_id": self.game_id,
            "account_id": self.account_id,
            "mechanic_id": self.mechanic_id,
            "amount_mpt": self.amount_mpt,
            "result": self.result.value,
            "grant_token": self.grant_token,
            "decided_at": format_ts(self.decided_at),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RedemptionRecord":
        return cls(
            obj["idempotency_key"],
            obj["game_id"],
            obj["account_id"],
            obj["mechanic_id"],
            obj["amount_mpt"],
            RedemptionResult(obj["result"]),
            obj["grant_token"],
            parse_ts(obj["decided_at"]),
        )


# -- fold --------------------------------------------------------------------


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise InvalidTransition(message)


def apply_event(state: AccountState | GameState, event: LedgerEvent) -> None:
    """Fold one event into ``state``. Validates fully before mutating."""
    if event.seq != state.last_seq + 1:
        raise SequenceConflict(f"expected seq {state.last_seq + 1}, got {event.seq}")
    if state.head_time is not None and event.occurred_at < state.head_time:
        raise InvalidTransition("occurred_at moves backwards")
    if isinstance(state, GameState):
        _apply_game(state, event)
    else:
        _apply_account(state, event)
    state.last_seq = event.seq
    state.head_time = event.occurred_at
    state.events.append(event)


def _apply_account(state: AccountState, event: LedgerEvent) -> None:
    p, at, kind = event.payload, event.occurred_at, event.kind
    if event.seq == 1 or kind is EventKind.ACCOUNT_CREATED:
        _require(event.seq == 1 and kind is EventKind.ACCOUNT_CREATED, "ACCOUNT_CREATED must open the stream")
        _require(p.get("account_id") == state.account_id, "account_id mismatch")
        state.owner_token_sha256 = p.get("owner_token_sha256", "")
        state.created_at = at
        state.balances = {d: state.settings.empty_balance(d, at) for d in Dimension}
        return
    if kind is EventKind.SENSOR_REGISTERED:
        sid = p.get("sensor_id")
        _require(isinstance(sid, str) and sid not in state.sensors, "sensor already registered")
        state.sensors[sid] = SensorInfo(
            sid, p["kind"], p["origin"], at, p.get("game_id"), p.get("api_key_sha256", "")
        )
    elif kind is EventKind.READING_CREDITED:
        sensor = state.sensors.get(p.get("sensor_id"))
        _require(sensor is not None, f"reading for unregistered sensor {p.get('sensor_id')}")
        key = (sensor.dedup_scope, p["reading_id"])
        _require(key not in state.credited, f"reading {p['reading_id']} already credited")
        dim = Dimension(p["dimension"])
        delta, cap_used, quantity = p["credited_mpt"], p["cap_used_mpt"], p["quantity"]
        _require(type(delta) is int and type(cap_used) is int and cap_used >= 0, "bad amounts")
        new_balance = credit(state.balances[dim], delta, at)
        date = p["utc_date"]
        c = state.counter(sensor.sensor_id, date)
        state.day_counters[(sensor.sensor_id, date)] = DailyCapCounter(
            sensor.sensor_id, date, c.credited_so_far_mpt + cap_used, c.quantity_so_far + quantity
        )
        if sensor.kind == GAMEPLAY_KIND:
            state.gameplay_minutes[date] = state.gameplay_minutes.get(date, 0.0) + quantity
        state.credited[key] = (delta, dim.value)
        state.balances[dim] = new_balance
    elif kind is EventKind.POINTS_REDEEMED:
        dim = Dimension(p["dimension"])
        try:
            state.balances[dim] = debit(state.balances[dim], p["amount_mpt"], at)
        except InsufficientPoints as exc:
            raise InvalidTransition(f"redemption exceeds balance: {exc.message}") from None
    else:
        raise InvalidTransition(f"{kind.value} is not valid on an account stream")


def _apply_game(state: GameState, event: LedgerEvent) -> None:
    p, kind = event.payload, event.kind
    if event.seq == 1 or kind is EventKind.GAME_REGISTERED:
        _require(event.seq == 1 and kind is EventKind.GAME_REGISTERED, "GAME_REGISTERED must open the stream")
        _require(p.get("game_id") == state.game_id, "game_id mismatch")
        state.game_token_sha256 = p.get("game_token_sha256", "")
        state.name = p.get("name", "")
    elif kind is EventKind.MECHANIC_REGISTERED:
        _require(p.get("mechanic_id") not in state.mechanics, "mechanic already registered")
        try:
            binding = MechanicBinding(game_id=state.game_id, **p)
        except (InvalidBinding, TypeError) as exc:
            raise InvalidTransition(f"bad mechanic payload: {exc}") from None
        state.mechanics[binding.mechanic_id] = binding
    else:
        raise InvalidTransition(f"{kind.value} is not valid on a game stream")


def new_stream_state(stream_id: str, first: LedgerEvent, settings: TwinSettings) -> AccountState | GameState:
    if first.kind is EventKind.GAME_REGISTERED:
        return GameState(stream_id)
    return AccountState(stream_id, settings)


def fold(stream_id: str, events: list[LedgerEvent], settings: TwinSettings | None = None):
    """Fold an ordered event list into a fresh state (``None`` for an empty list)."""
    settings = settings or TwinSettings()
    if not events:
        return None
    state = new_stream_state(stream_id, events[0], settings)
    for ev in events:
        try:
            apply_event(state, ev)
        except (LsgError, KeyError, ValueError, TypeError) as exc:
            reason = exc.message if isinstance(exc, LsgError) else repr(exc)
            raise CorruptLog(state.last_seq + 1, reason) from None
    state.publish()
    return state


def read_log(path: Path, repair: bool = False) -> list[LedgerEvent]:
    """Parse a log file. A final line without its newline is a torn write and
    is dropped (and truncated away when ``repair`` is set)."""
    data = path.read_bytes()
    torn = b""
    if data and not data.endswith(b"\n"):
        cut = data.rfind(b"\n") + 1
        data, torn = data[:cut], data[cut:]
    events = []
    for n, raw in enumerate(data.splitlines(), start=1):
        try:
            ev = LedgerEvent.from_json(json.loads(raw.decode("utf-8")))
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise CorruptLog(n, f"unparseable record: {exc}", str(path)) from None
        if ev.seq != n:
            raise CorruptLog(n, f"found seq {ev.seq} where {n} was expected", str(path))
        events.append(ev)
    if torn:
        log.warning("dropping torn tail of %s (%d bytes)", path, len(torn))
        if repair:
            with open(path, "r+b") as fh:
                fh.truncate(len(data))
    return events


# -- ledger ------------------------------------------------------------------


class _Entry:
    __slots__ = ("lock", "state")

    def __init__(self, state):
        self.lock = threading.RLock()
        self.state = state


class Txn:
    def __init__(self, ledger: "Ledger", entry: _Entry):
        self._ledger = ledger
        self._entry = entry
        self.pending: list[LedgerEvent] = []

    @property
    def state(self):
        return self._entry.state

    def append(self, kind: EventKind, payload: Mapping, at: int, expected_seq: int | None = None) -> LedgerEvent:
        state = self._entry.state
        seq = state.last_seq + 1
        if expected_seq is not None and expected_seq != seq:
            raise SequenceConflict(f"expected seq {expected_seq} but next is {seq}")
        event = LedgerEvent(seq, at, kind, MappingProxyType(dict(payload)))
        apply_event(state, event)
        self.pending.append(event)
        return event


class Ledger:
    """Event store plus live fold state for every stream.

    With ``data_dir=None`` the ledger is memory-only (used by unit tests and
    the in-process harness); otherwise every committed batch is appended to
    ``<data_dir>/<stream_id>.log`` before it becomes visible.
    """

    def __init__(
        self,
        data_dir: str | Path | None = None,
        settings: TwinSettings | None = None,
        *,
        fsync: bool = True,
        retention_hours: float = 24.0,
    ):
        if retention_hours < 24.0:
            raise ValueError("idempotency retention must be at least 24 hours")
        self.settings = settings or TwinSettings()
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.fsync = fsync
        self.retention_ms = int(retention_hours * MS_PER_HOUR)
        self._entries: dict[str, _Entry] = {}
        self._create_lock = threading.Lock()
        self._key_locks = [threading.Lock() for _ in range(64)]
        self._redemptions: dict[tuple[str, str], RedemptionRecord] = {}
        self._declined_lock = threading.Lock()
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- loading / persistence ----------------------------------------------

    def _path(self, stream_id: str) -> Path:
        return self.data_dir / f"{stream_id}.log"

    def _load(self) -> None:
        for path in sorted(self.data_dir.glob("*.log")):
            events = read_log(path, repair=True)
            state = fold(path.stem, events, self.settings)
            if state is None:
                continue
            self._entries[path.stem] = _Entry(state)
            self._index_grants(state)
        declined = self.data_dir / DECLINED_FILE
        if declined.exists():
            for line in declined.read_bytes().splitlines():
                try:
                    rec = RedemptionRecord.from_json(json.loads(line))
                except (ValueError, KeyError):
                    log.warning("skipping unreadable declined-redemption record")
                    continue
                self._redemptions.setdefault((rec.game_id, rec.idempotency_key), rec)
        log.info("loaded %d streams from %s", len(self._entries), self.data_dir)

    def _index_grants(self, state) -> None:
        if not isinstance(state, AccountState):
            return
        for ev in state.events:
            if ev.kind is EventKind.POINTS_REDEEMED:
                rec = _grant_record(state.account_id, ev)
                self._redemptions[(rec.game_id, rec.idempotency_key)] = rec

    def _write(self, path: Path, lines: list[str]) -> None:
        blob = "".join(lines).encode("utf-8")
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        try:
            os.write(fd, blob)
            if self.fsync:
                os.fsync(fd)
        finally:
            os.close(fd)

    # -- stream access --------------------------------------------------------

    def _entry(self, stream_id: str) -> _Entry:
        entry = self._entries.get(stream_id)
        if entry is None:
            raise UnknownAccount(f"unknown stream {stream_id}")
        return entry

    def account(self, account_id: str) -> AccountState:
        entry = self._entries.get(account_id)
        if entry is None or not isinstance(entry.state, AccountState):
            raise UnknownAccount(f"unknown account {account_id}")
        return entry.state

    def game(self, game_id: str) -> GameState:
        entry = self._entries.get(game_id)
        if entry is None or not isinstance(entry.state, GameState):
            raise UnknownGame(f"unknown game {game_id}")
        return entry.state

    def has_account(self, account_id: str) -> bool:
        entry = self._entries.get(account_id)
        return entry is not None and isinstance(entry.state, AccountState)

    def accounts(self) -> list[AccountState]:
        return [e.state for e in list(self._entries.values()) if isinstance(e.state, AccountState)]

    def games(self) -> list[GameState]:
        return [e.state for e in list(self._entries.values()) if isinstance(e.state, GameState)]

    def events(self, stream_id: str, since_seq: int = 0, limit: int = 1000) -> list[LedgerEvent]:
        state = self._entry(stream_id).state
        # events list is append-only; slicing a prefix-stable list is safe without the lock
        upto = state.last_seq if isinstance(state, GameState) else state.committed.last_seq
        return state.events[max(0, since_seq) : upto][:limit]

    # -- writes ------------------------------------------------------------------

    @contextmanager
    def transaction(self, stream_id: str) -> Iterator[Txn]:
        """Serialize a batch of appends on one stream; durable on clean exit."""
        entry = self._entry(stream_id)
        with entry.lock:
            txn = Txn(self, entry)
            try:
                yield txn
                if txn.pending and self.data_dir is not None:
                    self._write(self._path(stream_id), [ev.to_line() for ev in txn.pending])
            except BaseException as exc:
                if txn.pending:
                    self._rollback(stream_id, entry, len(txn.pending))
                if isinstance(exc, OSError):
                    raise StorageError(f"append to {stream_id} failed: {exc}") from exc
                raise
            entry.state.publish()

    def _rollback(self, stream_id: str, entry: _Entry, n: int) -> None:
        durable = entry.state.events[:-n]
        entry.state = fold(stream_id, durable, self.settings)

    def create_stream(self, stream_id: str, kind: EventKind, payload: Mapping, at: int) -> LedgerEvent:
        first = LedgerEvent(1, at, kind, payload)
        with self._create_lock:
            if stream_id in self._entries:
                raise InvalidTransition(f"stream {stream_id} already exists")
            state = new_stream_state(stream_id, first, self.settings)
            entry = _Entry(state)
            self._entries[stream_id] = entry
        try:
            with self.transaction(stream_id) as txn:
                return txn.append(kind, payload, at)
        except BaseException:
            self._entries.pop(stream_id, None)
            raise

    def append_event(
        self, stream_id: str, kind: EventKind, payload: Mapping, at: int, expected_seq: int | None = None
    ) -> int:
        with self.transaction(stream_id) as txn:
            return txn.append(kind, payload, at, expected_seq).seq

    def event_time(self, state: AccountState | GameState, at: int) -> int:
        """Clamp a server-side event time onto the stream head within the skew window."""
        head = state.head_time
        if head is None or at >= head:
            return at
        if at < head - SKEW_MS:
            raise TimeBeforeBase(f"time {format_ts(at)} precedes stream head {format_ts(head)}")
        return head

    # -- reads -------------------------------------------------------------------

    def get_snapshot(self, account_id: str, as_of: int) -> ProfileSnapshot:
        state = self.account(account_id)
        c = state.committed
        if c.head_time is not None and as_of < c.head_time:
            if as_of < c.head_time - SKEW_MS:
                raise AsOfBeforeLastEvent(
                    f"as_of {format_ts(as_of)} precedes last event {format_ts(c.head_time)}"
                )
            as_of = c.head_time
        effective, scores = {}, {}
        for d in Dimension:
            b = c.balances.get(d)
            e = effective_balance(b, as_of) if b is not None else 0
            effective[d] = e
            scores[d] = attribute_score(e, self.settings.soft_cap_mpt[d])
        return ProfileSnapshot(account_id, as_of, c.last_seq, effective, scores)

    def rebuild(self, account_id: str):
        """Discard in-memory state for a stream and re-fold it from seq 1."""
        entry = self._entry(account_id)
        with entry.lock:
            if self.data_dir is not None:
                events = read_log(self._path(account_id))
            else:
                events = list(entry.state.events)
            state = fold(account_id, events, self.settings)
            if state is None:
                raise CorruptLog(1, "empty log")
            entry.state = state
            return state

    # -- redemption --------------------------------------------------------------

    def redemption(self, game_id: str, key: str) -> RedemptionRecord | None:
        return self._redemptions.get((game_id, key))

    def redeem(
        self,
        game_id: str,
        idempotency_key: str,
        account_id: str,
        mechanic_id: str,
        at: int,
        amount_mpt: int | None = None,
    ) -> RedemptionRecord:
        if not isinstance(idempotency_key, str) or not 1 <= len(idempotency_key) <= 64:
            raise ValidationFailed("idempotency_key must be 1-64 characters")
        lock = self._key_locks[zlib.crc32(f"{game_id}\x00{idempotency_key}".encode()) % len(self._key_locks)]
        with lock:
            rec = self._redemptions.get((game_id, idempotency_key))
            if rec is not None and at - rec.decided_at > self.retention_ms:
                rec = None
            if rec is not None:
                if (rec.account_id, rec.mechanic_id) != (account_id, mechanic_id) or (
                    amount_mpt is not None and amount_mpt != rec.amount_mpt
                ):
                    raise KeyPayloadMismatch(
                        f"idempotency key {idempotency_key} was used with different parameters"
                    )
                return rec
            binding = self.game(game_id).mechanics.get(mechanic_id)
            if binding is None:
                raise UnknownMechanic(f"mechanic {mechanic_id} is not registered for game {game_id}")
            if binding.mode is not MechanicMode.ON_DEMAND:
                raise NotOnDemand(f"mechanic {mechanic_id} is PASSIVE")
            cost = binding.cost_mpt
            if amount_mpt is not None and amount_mpt != cost:
                raise PriceMismatch(f"mechanic {mechanic_id} costs {cost} mpt")
            self.account(account_id)
            with self.transaction(account_id) as txn:
                when = self.event_time(txn.state, at)
                available = effective_balance(txn.state.balances[binding.dimension], when)
                if available >= cost:
                    ev = txn.append(
                        EventKind.POINTS_REDEEMED,
                        {
                            "game_id": game_id,
                            "mechanic_id": mechanic_id,
                            "idempotency_key": idempotency_key,
                            "dimension": binding.dimension.value,
                            "amount_mpt": cost,
                            "grant_token": new_token(),
                        },
                        when,
                    )
                    rec = _grant_record(account_id, ev)
                else:
                    rec = RedemptionRecord(
                        idempotency_key, game_id, account_id, mechanic_id, cost,
                        RedemptionResult.INSUFFICIENT, None, when,
                    )
                    self._persist_declined(rec)
            self._redemptions[(game_id, idempotency_key)] = rec
            return rec

    def _persist_declined(self, rec: RedemptionRecord) -> None:
        if self.data_dir is None:
            return
        with self._declined_lock:
            try:
                self._write(self.data_dir / DECLINED_FILE, [canonical_json(rec.to_json()) + "\n"])
            except OSError as exc:
                raise StorageError(f"cannot persist redemption record: {exc}") from exc


def _grant_record(account_id: str, ev: LedgerEvent) -> RedemptionRecord:
    p = ev.payload
    return RedemptionRecord(
        p["idempotency_key"], p["game_id"], account_id, p["mechanic_id"], p["amount_mpt"],
        RedemptionResult.GRANTED, p["grant_token"], ev.occurred_at,
    )

"""Reading intake: sensor registration, validation, dedup and crediting.

Readings arrive in ordered batches and are processed row by row; a bad row
never aborts the batch. Dedup is keyed by the client-supplied ``reading_id``
per sensor, so a flaky device can retry a whole upload safely.
"""

from __future__ import annotations

import json
import math
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

from ._util import format_ts, new_id, new_token, parse_ts, token_hash, utc_date
from .composition import GAMEPLAY_KIND, GameplayBudget, RuleCatalog, compose, gameplay_budget_for
from .errors import BadRequest, Overflow, UnknownKind, ValidationFailed
from .ledger import EventKind, Ledger
from .twin import SKEW_MS

READING_ID_RE = re.compile(r"^[\x21-\x7e]{1,64}$")
READING_FIELDS = {"reading_id", "sensor_id", "quantity", "observed_at", "metadata"}


class SensorOrigin(str, Enum):
    PHYSICAL_DEVICE = "PHYSICAL_DEVICE"
    VIRTUAL = "VIRTUAL"
    IN_GAME = "IN_GAME"


class ReadingStatus(str, Enum):
    ACCEPTED = "ACCEPTED"
    DUPLICATE = "DUPLICATE"
    VALIDATION_FAILED = "VALIDATION_FAILED"
    STALE_READING = "STALE_READING"


@dataclass(frozen=True)
class SensorDescriptor:
    sensor_id: str
    account_id: str
    kind: str
    origin: SensorOrigin
    api_key: str
    created_at: int
    game_id: str | None = None

    def to_json(self) -> dict:
        out = {
            "sensor_id": self.sensor_id,
            "account_id": self.account_id,
            "kind": self.kind,
            "origin": self.origin.value,
            "api_key": self.api_key,
            "created_at": format_ts(self.created_at),
        }
        if self.game_id:
            out["game_id"] = self.game_id
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "SensorDescriptor":
        return cls(
            obj["sensor_id"], obj["account_id"], obj["kind"], SensorOrigin(obj["origin"]),
            obj["api_key"], parse_ts(obj["created_at"]), obj.get("game_id"),
        )


@dataclass(frozen=True)
class SensorReading:
    reading_id: str
    sensor_id: str
    quantity: float
    observed_at: int
    metadata: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: Mapping, sensor_id: str | None = None) -> "SensorReading":
        """Strict parse of one wire row.

        Unknown fields raise :class:`BadRequest`; malformed values raise
        :class:`ValidationFailed` so the batch can report them inline.
        """
        if not isinstance(obj, Mapping):
            raise ValidationFailed("reading must be an object")
        unknown = set(obj) - READING_FIELDS
        if unknown:
            raise BadRequest(f"unknown reading fields: {sorted(unknown)}")
        rid = obj.get("reading_id")
        if not isinstance(rid, str):
            raise ValidationFailed("missing reading_id")
        q = obj.get("quantity")
        if isinstance(q, bool) or not isinstance(q, (int, float)):
            raise ValidationFailed("quantity must be a number")
        try:
            observed = parse_ts(obj.get("observed_at"))
        except (TypeError, ValueError):
            raise ValidationFailed("bad observed_at timestamp") from None
        meta = obj.get("metadata") or {}
        if not isinstance(meta, Mapping) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
        ):
            raise ValidationFailed("metadata must be a flat string map")
        sid = obj.get("sensor_id", sensor_id)
        if not isinstance(sid, str):
            raise ValidationFailed("missing sensor_id")
        return cls(rid, sid, float(q), observed, dict(meta))

    def to_json(self) -> dict:
        out = {
            "reading_id": self.reading_id,
            "sensor_id": self.sensor_id,
            "quantity": self.quantity,
            "observed_at": format_ts(self.observed_at),
        }
        if self.metadata:
            out["metadata"] = dict(self.metadata)
        return out


@dataclass(frozen=True)
class RejectedRow:
    """A row that failed to parse; carried through so results stay in order."""

    reading_id: str | None
    reason: str


@dataclass(frozen=True)
class ReadingResult:
    reading_id: str | None
    status: ReadingStatus
    credited_mpt: int = 0
    dimension: str | None = None
    reason: str | None = None

    def to_json(self) -> dict:
        out = {
            "reading_id": self.reading_id,
            "status": self.status.value,
            "credited_mpt": self.credited_mpt,
            "dimension": self.dimension,
        }
        if self.reason:
            out["reason"] = self.reason
        return out


def validate_reading(reading: SensorReading, now: int) -> str | None:
    """Return a rejection reason, or ``None`` when the reading is well formed."""
    if not isinstance(reading.reading_id, str) or not READING_ID_RE.match(reading.reading_id):
        return "bad reading_id"
    q = reading.quantity
    if not isinstance(q, (int, float)) or isinstance(q, bool):
        return "quantity must be a number"
    if not math.isfinite(q):
        return "non-finite"
    if q < 0:
        return "negative quantity"
    if reading.observed_at > now + SKEW_MS:
        return "future timestamp"
    return None


def register_sensor(
    ledger: Ledger,
    catalog: RuleCatalog,
    account_id: str,
    kind: str,
    origin: SensorOrigin | str,
    at: int,
    game_id: str | None = None,
) -> SensorDescriptor:
    ledger.account(account_id)
    if kind not in catalog:
        raise UnknownKind(f"no conversion rule for sensor kind {kind!r}")
    try:
        origin = SensorOrigin(origin)
    except ValueError:
        raise ValidationFailed(f"unknown origin {origin!r}") from None
    sensor_id, api_key = new_id(), new_token()
    payload = {
        "sensor_id": sensor_id,
        "kind": kind,
        "origin": origin.value,
        "api_key_sha256": token_hash(api_key),
    }
    if game_id:
        payload["game_id"] = game_id
    with ledger.transaction(account_id) as txn:
        when = ledger.event_time(txn.state, at)
        txn.append(EventKind.SENSOR_REGISTERED, payload, when)
    return SensorDescriptor(sensor_id, account_id, kind, origin, api_key, when, game_id)


def submit_readings(
    ledger: Ledger,
    catalog: RuleCatalog,
    account_id: str,
    sensor_id: str,
    readings: Sequence[SensorReading | RejectedRow],
    now: int,
    *,
    punitive_overplay: bool = False,
) -> list[ReadingResult]:
    """Validate, dedup, convert and credit a batch for one sensor, in order."""
    results: list[ReadingResult] = []
    with ledger.transaction(account_id) as txn:
        state = txn.state
        sensor = state.sensors.get(sensor_id)
        if sensor is None:
            raise ValidationFailed(f"sensor {sensor_id} not registered on account {account_id}")
        rule = catalog.get(sensor.kind)
        budget: GameplayBudget | None = None
        if rule is not None and sensor.kind == GAMEPLAY_KIND:
            budget = gameplay_budget_for(rule, punitive_overplay)
        for r in readings:
            if isinstance(r, RejectedRow):
                results.append(ReadingResult(r.reading_id, ReadingStatus.VALIDATION_FAILED, reason=r.reason))
                continue
            reason = validate_reading(r, now)
            if reason is None and rule is None:
                reason = f"no conversion rule for kind {sensor.kind!r}"
            if reason is not None:
                results.append(ReadingResult(r.reading_id, ReadingStatus.VALIDATION_FAILED, reason=reason))
                continue
            seen = state.credited.get((sensor.dedup_scope, r.reading_id))
            if seen is not None:
                results.append(ReadingResult(r.reading_id, ReadingStatus.DUPLICATE, seen[0], seen[1]))
                continue
            base_time = state.balances[rule.dimension].base_time
            if r.observed_at < base_time - SKEW_MS:
                results.append(
                    ReadingResult(
                        r.reading_id, ReadingStatus.STALE_READING,
                        reason=f"observed_at precedes {rule.dimension.value} base time by more than {SKEW_MS // 1000} s",
                    )
                )
                continue
            date = utc_date(r.observed_at)
            before = state.counter(sensor_id, date)
            conv = compose(
                rule, r.quantity, before,
                gameplay_minutes_today=state.gameplay_minutes.get(date, 0.0),
                budget=budget,
            )
            payload = {
                "sensor_id": sensor_id,
                "reading_id": r.reading_id,
                "dimension": conv.dimension.value,
                "credited_mpt": conv.credited_mpt,
                "cap_used_mpt": conv.counter.credited_so_far_mpt - before.credited_so_far_mpt,
                "quantity": r.quantity,
                "observed_at": format_ts(r.observed_at),
                "utc_date": date,
            }
            if r.metadata:
                payload["metadata"] = dict(r.metadata)
            try:
                txn.append(EventKind.READING_CREDITED, payload, max(r.observed_at, state.head_time))
            except Overflow:
                results.append(ReadingResult(r.reading_id, ReadingStatus.VALIDATION_FAILED, reason="overflow"))
                continue
            results.append(
                ReadingResult(r.reading_id, ReadingStatus.ACCEPTED, conv.credited_mpt, conv.dimension.value)
            )
    return results


# -- replay adapter ----------------------------------------------------------

AS_FAST_AS_POSSIBLE = None


@dataclass(frozen=True)
class TraceRow:
    reading_id: str
    observed_at: int
    quantity: float
    metadata: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class AdapterTrace:
    source: str
    rows: tuple[TraceRow, ...] = ()

    def __post_init__(self):
        for a, b in zip(self.rows, self.rows[1:]):
            if b.observed_at < a.observed_at:
                raise ValueError(f"trace rows out of order at {b.reading_id}")


_TRACE_FIELDS = {"reading_id", "observed_at", "quantity", "metadata"}


def load_trace(path: str | Path) -> AdapterTrace:
    """Read a JSON Lines trace file (one row object per line)."""
    rows = []
    text = Path(path).read_text(encoding="utf-8")
    for n, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if not isinstance(obj, dict) or not {"reading_id", "observed_at", "quantity"} <= obj.keys():
            raise ValueError(f"{path}:{n}: row needs reading_id, observed_at, quantity")
        if obj.keys() - _TRACE_FIELDS:
            raise ValueError(f"{path}:{n}: unknown fields {sorted(obj.keys() - _TRACE_FIELDS)}")
        rows.append(TraceRow(obj["reading_id"], parse_ts(obj["observed_at"]), obj["quantity"], obj.get("metadata") or {}))
    return AdapterTrace(str(path), tuple(rows))


def dump_trace(trace: AdapterTrace, path: str | Path) -> None:
    lines = []
    for row in trace.rows:
        obj = {"reading_id": row.reading_id, "observed_at": format_ts(row.observed_at), "quantity": row.quantity}
        if row.metadata:
            obj["metadata"] = dict(row.metadata)
        lines.append(json.dumps(obj, sort_keys=True) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


class ReadingSink(Protocol):
    def submit_readings(self, api_key: str, rows: list[dict]) -> list[dict]: ...


@dataclass(frozen=True)
class ReplayReport:
    source: str
    sensor_id: str
    rows: tuple[dict, ...]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rows:
            out[r["status"]] = out.get(r["status"], 0) + 1
        return out

    def to_json(self) -> dict:
        return {"source": self.source, "sensor_id": self.sensor_id, "rows": list(self.rows)}

    def to_bytes(self) -> bytes:
        return (json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n").encode("utf-8")


def run_replay_adapter(
    trace: AdapterTrace,
    sensor: SensorDescriptor,
    sink: ReadingSink,
    speed: float | None = AS_FAST_AS_POSSIBLE,
    sleep: Callable[[float], None] = time.sleep,
) -> ReplayReport:
    """Submit every trace row, in order, through ``sink``.

    ``speed`` is a wall-clock acceleration factor (2.0 replays a day in 12 h);
    ``None`` submits back to back. Auth failures propagate and abort the run;
    per-row rejections are recorded and the run continues.
    """
    if speed is not None and not speed > 0:
        raise ValueError("speed must be positive")
    out = []
    prev = None
    for row in trace.rows:
        if speed is not None and prev is not None:
            sleep((row.observed_at - prev) / 1000.0 / speed)
        prev = row.observed_at
        wire = {
            "reading_id": row.reading_id,
            "sensor_id": sensor.sensor_id,
            "quantity": row.quantity,
            "observed_at": format_ts(row.observed_at),
        }
        if row.metadata:
            wire["metadata"] = dict(row.metadata)
        (result,) = sink.submit_readings(sensor.api_key, [wire])
        out.append(result)
    return ReplayReport(trace.source, sensor.sensor_id, tuple(out))

"""Independent re-fold of ledger log files.

This module deliberately shares no code with :mod:`lifesync.ledger` or
:mod:`lifesync.twin`: it parses the JSON Lines logs itself and replays the
balance arithmetic in straight-line code, so agreement with the live service
is real evidence rather than a tautology.

The arithmetic it re-implements: a dimension holds ``(base, base_time)``;
at time ``t`` its value is ``floor(base * f)`` where ``f`` is the IEEE double
``2 ** -((t - base_time) / (3.6e6 * half_life_hours))`` taken as an exact
rational. Bases of ``2**53`` or more are evaluated at high precision
instead (whole half-lives exactly). A credit or debit at ``t`` replaces the
pair with ``(max(0, value + delta), t)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Context, Decimal
from pathlib import Path
from typing import Iterable, Mapping

DIMENSIONS = ("PHYSICAL", "COGNITIVE", "AFFECTIVE", "SOCIAL", "LIFESTYLE")


class OracleCorruptLog(Exception):
    def __init__(self, path: str, seq: int, reason: str):
        super().__init__(f"CORRUPT_LOG {path} seq {seq}: {reason}")
        self.path, self.seq, self.reason = path, seq, reason


def _ts(text: str) -> int:
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)
    return int(dt.timestamp()) * 1000 + dt.microsecond // 1000


def _wide(base: int, dt: int, half_life_hours: float) -> int:
    num, den = half_life_hours.as_integer_ratio()
    p, q = dt * den, 3_600_000 * num
    if p % q == 0:
        return base // 2 ** (p // q)
    ctx = Context(prec=70)
    x = ctx.divide(Decimal(p), Decimal(q))
    f = ctx.exp(ctx.minus(ctx.multiply(x, ctx.ln(Decimal(2)))))
    return int(ctx.multiply(Decimal(base), f).__floor__())


def decayed(base: int, base_time: int, at: int, half_life_hours: float) -> int:
    if at < base_time:
        raise ValueError("decay queried before base time")
    if base >= 2**53 and at > base_time:
        return _wide(base, at - base_time, half_life_hours)
    f = math.pow(2.0, -((at - base_time) / (3_600_000.0 * half_life_hours)))
    num, den = f.as_integer_ratio()
    return (base * num) // den


@dataclass
class OracleAccount:
    account_id: str
    created_at: int
    last_seq: int = 0
    last_time: int = 0
    base: dict[str, int] = field(default_factory=dict)
    base_time: dict[str, int] = field(default_factory=dict)
    events: int = 0

    def effective(self, dim: str, at: int, half_life_hours: float) -> int:
        return decayed(self.base[dim], self.base_time[dim], at, half_life_hours)


@dataclass
class OracleResult:
    accounts: dict[str, OracleAccount]
    violations: list[str]
    events: int

    def state(self) -> dict[str, dict[str, tuple[int, int]]]:
        return {
            aid: {d: (a.base[d], a.base_time[d]) for d in DIMENSIONS}
            for aid, a in self.accounts.items()
        }


def _lines(path: Path) -> list[bytes]:
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        data = data[: data.rfind(b"\n") + 1]  # torn final write, never acknowledged
    return data.splitlines()


def oracle_recompute(
    log_files: Iterable[str | Path],
    *,
    half_life_hours: Mapping[str, float] | None = None,
    daily_caps: Mapping[str, int] | None = None,
    retention_hours: float = 24.0,
) -> OracleResult:
    """Re-fold every account log in ``log_files``.

    ``daily_caps`` (sensor kind -> cap) enables the per-(sensor, UTC day)
    conservation check. An idempotency key may be granted again only once
    ``retention_hours`` have passed since its previous grant. Game streams are
    recognised and skipped.
    """
    retention_ms = retention_hours * 3_600_000
    hl = {d: 72.0 for d in DIMENSIONS}
    hl.update(half_life_hours or {})
    accounts: dict[str, OracleAccount] = {}
    violations: list[str] = []
    grants: dict[tuple[str, str], int] = {}
    total = 0
    for path in sorted(Path(p) for p in log_files):
        rows = _lines(path)
        if not rows:
            continue
        acct = None
        sensors: dict[str, tuple[str, str | None]] = {}
        seen: set[tuple[str, str]] = set()
        day_used: dict[tuple[str, str], int] = {}
        prev_time = None
        for n, raw in enumerate(rows, start=1):
            try:
                ev = json.loads(raw)
                seq, kind, p, t = ev["seq"], ev["kind"], ev["payload"], _ts(ev["occurred_at"])
            except (ValueError, KeyError, TypeError) as exc:
                raise OracleCorruptLog(str(path), n, f"unparseable: {exc}") from None
            if seq != n:
                raise OracleCorruptLog(str(path), n, f"seq {seq} found where {n} expected")
            if prev_time is not None and t < prev_time:
                raise OracleCorruptLog(str(path), n, "time moves backwards")
            prev_time = t
            total += 1
            if n == 1:
                if kind == "GAME_REGISTERED":
                    break
                if kind != "ACCOUNT_CREATED":
                    raise OracleCorruptLog(str(path), 1, f"stream opens with {kind}")
                acct = OracleAccount(p["account_id"], t)
                for d in DIMENSIONS:
                    acct.base[d] = 0
                    acct.base_time[d] = t
                accounts[acct.account_id] = acct
            elif kind == "SENSOR_REGISTERED":
                sensors[p["sensor_id"]] = (p["kind"], p.get("game_id"))
            elif kind == "READING_CREDITED":
                sid = p["sensor_id"]
                if sid not in sensors:
                    raise OracleCorruptLog(str(path), n, "reading from unknown sensor")
                scope = "game:" + sensors[sid][1] if sensors[sid][1] else sid
                if (scope, p["reading_id"]) in seen:
                    violations.append(f"{acct.account_id}: reading {p['reading_id']} credited twice")
                seen.add((scope, p["reading_id"]))
                key = (sid, p["utc_date"])
                day_used[key] = day_used.get(key, 0) + p["cap_used_mpt"]
                cap = (daily_caps or {}).get(sensors[sid][0])
                if cap is not None and day_used[key] > cap:
                    violations.append(f"{acct.account_id}: sensor {sid} exceeded daily cap on {key[1]}")
                d = p["dimension"]
                value = decayed(acct.base[d], acct.base_time[d], t, hl[d])
                acct.base[d] = max(0, value + p["credited_mpt"])
                acct.base_time[d] = t
            elif kind == "POINTS_REDEEMED":
                d = p["dimension"]
                value = decayed(acct.base[d], acct.base_time[d], t, hl[d])
                if p["amount_mpt"] > value:
                    violations.append(f"{acct.account_id}: redemption seq {seq} overdraws {d}")
                acct.base[d] = max(0, value - p["amount_mpt"])
                acct.base_time[d] = t
                gk = (p["game_id"], p["idempotency_key"])
                if gk in grants and t - grants[gk] <= retention_ms:
                    violations.append(f"idempotency key {gk[1]} granted twice within retention")
                grants[gk] = t
            else:
                raise OracleCorruptLog(str(path), n, f"unexpected {kind} on account stream")
            if acct is not None:
                acct.last_seq, acct.last_time = seq, t
                acct.events = n
    return OracleResult(accounts, violations, total)


def recompute_dir(data_dir: str | Path, **kwargs) -> OracleResult:
    return oracle_recompute(sorted(Path(data_dir).glob("*.log")), **kwargs)


def score(effective: int, soft_cap: int) -> float:
    return 0.0 if effective <= 0 else effective / (effective + soft_cap)

from __future__ import annotations

import json
import threading

import pytest

from lifesync.errors import (
    AsOfBeforeLastEvent,
    CorruptLog,
    InvalidTransition,
    KeyPayloadMismatch,
    NotOnDemand,
    PriceMismatch,
    SequenceConflict,
    StorageError,
    UnknownAccount,
    UnknownMechanic,
)
from lifesync.ledger import EventKind, Ledger, LedgerEvent, RedemptionResult, fold, read_log
from lifesync.twin import Dimension

from .conftest import HOUR, T0

PHYS = Dimension.PHYSICAL


def new_account(ledger, aid="acct1", at=T0):
    ledger.create_stream(aid, EventKind.ACCOUNT_CREATED, {"account_id": aid, "owner_token_sha256": "x"}, at)
    ledger.append_event(
        aid, EventKind.SENSOR_REGISTERED,
        {"sensor_id": "s1", "kind": "pedometer", "origin": "PHYSICAL_DEVICE", "api_key_sha256": "y"}, at,
    )
    return aid


def credit_event(ledger, aid, amount, at, rid="r1", dim="PHYSICAL"):
    return ledger.append_event(aid, EventKind.READING_CREDITED, {
        "sensor_id": "s1", "reading_id": rid, "dimension": dim, "credited_mpt": amount,
        "cap_used_mpt": max(amount, 0), "quantity": amount / 10, "observed_at": "2026-03-02T08:00:00.000Z",
        "utc_date": "2026-03-02",
    }, at)


def new_game(ledger, gid="game1", cost=30_000):
    ledger.create_stream(gid, EventKind.GAME_REGISTERED, {"game_id": gid, "game_token_sha256": "z", "name": "g"}, T0)
    ledger.append_event(gid, EventKind.MECHANIC_REGISTERED, {
        "mechanic_id": "boost", "dimension": "PHYSICAL", "mode": "ON_DEMAND", "cost_mpt": cost,
        "modifier_lo": None, "modifier_hi": None,
    }, T0)
    ledger.append_event(gid, EventKind.MECHANIC_REGISTERED, {
        "mechanic_id": "speed", "dimension": "PHYSICAL", "mode": "PASSIVE", "cost_mpt": None,
        "modifier_lo": 0.8, "modifier_hi": 1.2,
    }, T0)
    return gid


def test_first_event_is_seq_one(ledger):
    ev = ledger.create_stream("a", EventKind.ACCOUNT_CREATED, {"account_id": "a", "owner_token_sha256": ""}, T0)
    assert ev.seq == 1


def test_expected_seq_conflict(ledger):
    aid = new_account(ledger)
    with pytest.raises(SequenceConflict):
        ledger.append_event(aid, EventKind.READING_CREDITED, {}, T0, expected_seq=7)


def test_concurrent_appends_are_dense(ledger):
    aid = new_account(ledger)
    start = ledger.account(aid).last_seq

    def worker(i):
        credit_event(ledger, aid, 10, T0, rid=f"r{i}")

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    seqs = [e.seq for e in ledger.events(aid, 0, 1000)]
    assert seqs == list(range(1, start + 17))


def test_reading_for_unregistered_sensor(ledger):
    aid = new_account(ledger)
    with pytest.raises(InvalidTransition):
        ledger.append_event(aid, EventKind.READING_CREDITED, {
            "sensor_id": "ghost", "reading_id": "r", "dimension": "PHYSICAL", "credited_mpt": 1,
            "cap_used_mpt": 1, "quantity": 1, "observed_at": "x", "utc_date": "2026-03-02",
        }, T0)
    # the failed append left nothing behind
    assert ledger.account(aid).last_seq == 2
    assert len(read_log(ledger.data_dir / f"{aid}.log")) == 2


def test_time_cannot_move_backwards(ledger):
    aid = new_account(ledger, at=T0 + HOUR)
    with pytest.raises(InvalidTransition):
        credit_event(ledger, aid, 5, T0)


def test_fold_empty_and_single_credit(ledger):
    assert fold("a", []) is None
    aid = new_account(ledger)
    credit_event(ledger, aid, 100_000, T0)
    snap = ledger.get_snapshot(aid, T0)
    assert snap.effective_mpt[PHYS] == 100_000
    assert snap.scores[PHYS] == 0.5
    assert all(snap.effective_mpt[d] == 0 for d in Dimension if d is not PHYS)


def test_snapshot_fresh_and_pure(ledger):
    aid = new_account(ledger)
    a, b = ledger.get_snapshot(aid, T0 + HOUR), ledger.get_snapshot(aid, T0 + HOUR)
    assert a == b
    assert set(a.scores.values()) == {0.0}


def test_snapshot_as_of_rules(ledger):
    aid = new_account(ledger)
    credit_event(ledger, aid, 1000, T0 + HOUR)
    # within the skew window the query is pulled forward to the last event
    assert ledger.get_snapshot(aid, T0 + HOUR - 1000).as_of == T0 + HOUR
    with pytest.raises(AsOfBeforeLastEvent):
        ledger.get_snapshot(aid, T0)
    with pytest.raises(UnknownAccount):
        ledger.get_snapshot("nobody", T0)


def test_credit_then_redeem_after_half_life(ledger):
    aid, gid = new_account(ledger), new_game(ledger, cost=50_000)
    credit_event(ledger, aid, 100_000, T0)
    rec = ledger.redeem(gid, "k", aid, "boost", T0 + 72 * HOUR)
    assert rec.result is RedemptionResult.GRANTED
    assert ledger.get_snapshot(aid, T0 + 72 * HOUR).effective_mpt[PHYS] == 0


def test_redeem_granted_and_replayed(ledger):
    aid, gid = new_account(ledger), new_game(ledger)
    credit_event(ledger, aid, 100_000, T0)
    first = ledger.redeem(gid, "k1", aid, "boost", T0)
    assert first.result is RedemptionResult.GRANTED and first.grant_token
    replays = [ledger.redeem(gid, "k1", aid, "boost", T0 + i) for i in range(100)]
    assert all(r == first for r in replays)
    assert ledger.get_snapshot(aid, T0).effective_mpt[PHYS] == 70_000
    kinds = [e.kind for e in ledger.events(aid, 0, 1000)]
    assert kinds.count(EventKind.POINTS_REDEEMED) == 1


def test_redeem_insufficient_leaves_balance(ledger):
    aid, gid = new_account(ledger), new_game(ledger)
    credit_event(ledger, aid, 10_000, T0)
    rec = ledger.redeem(gid, "k", aid, "boost", T0)
    assert rec.result is RedemptionResult.INSUFFICIENT and rec.grant_token is None
    assert ledger.get_snapshot(aid, T0).effective_mpt[PHYS] == 10_000
    # the decision is remembered even after more points arrive
    credit_event(ledger, aid, 100_000, T0, rid="r2")
    assert ledger.redeem(gid, "k", aid, "boost", T0).result is RedemptionResult.INSUFFICIENT


def test_redeem_errors(ledger):
    aid, gid = new_account(ledger), new_game(ledger)
    credit_event(ledger, aid, 100_000, T0)
    with pytest.raises(UnknownMechanic):
        ledger.redeem(gid, "a", aid, "warp", T0)
    with pytest.raises(NotOnDemand):
        ledger.redeem(gid, "b", aid, "speed", T0)
    with pytest.raises(PriceMismatch):
        ledger.redeem(gid, "c", aid, "boost", T0, amount_mpt=1)
    ledger.redeem(gid, "d", aid, "boost", T0)
    other = new_account(ledger, "acct2")
    with pytest.raises(KeyPayloadMismatch):
        ledger.redeem(gid, "d", other, "boost", T0)


def test_key_expires_after_retention(ledger):
    aid, gid = new_account(ledger), new_game(ledger, cost=10)
    credit_event(ledger, aid, 100_000, T0)
    a = ledger.redeem(gid, "k", aid, "boost", T0)
    b = ledger.redeem(gid, "k", aid, "boost", T0 + 24 * HOUR)
    c = ledger.redeem(gid, "k", aid, "boost", T0 + 24 * HOUR + 1)
    assert a == b and c.grant_token != a.grant_token


def test_rebuild_equals_live_and_restart(tmp_path):
    data = tmp_path / "d"
    ledger = Ledger(data, fsync=False)
    aid, gid = new_account(ledger), new_game(ledger)
    for i in range(20):
        credit_event(ledger, aid, 9_000, T0 + i * HOUR, rid=f"r{i}")
    ledger.redeem(gid, "k", aid, "boost", T0 + 20 * HOUR)
    ledger.redeem(gid, "poor", aid, "boost", T0 + 20 * HOUR)
    live = dict(ledger.account(aid).balances)
    assert dict(ledger.rebuild(aid).balances) == live
    again = Ledger(data, fsync=False)
    assert dict(again.account(aid).balances) == live
    assert again.redemption(gid, "k") == ledger.redemption(gid, "k")
    assert again.redemption(gid, "poor") == ledger.redemption(gid, "poor")
    assert again.game(gid).mechanics == ledger.game(gid).mechanics


def test_torn_tail_is_dropped(tmp_path):
    data = tmp_path / "d"
    ledger = Ledger(data, fsync=False)
    aid = new_account(ledger)
    credit_event(ledger, aid, 500, T0)
    path = data / f"{aid}.log"
    with open(path, "ab") as fh:
        fh.write(b'{"seq":4,"occurred_at":"2026')
    again = Ledger(data, fsync=False)
    assert again.account(aid).last_seq == 3
    assert path.read_bytes().endswith(b"\n")


def test_gap_is_corrupt(tmp_path):
    data = tmp_path / "d"
    ledger = Ledger(data, fsync=False)
    aid = new_account(ledger)
    for i in range(3):
        credit_event(ledger, aid, 5, T0, rid=f"r{i}")
    path = data / f"{aid}.log"
    lines = path.read_bytes().splitlines(keepends=True)
    path.write_bytes(b"".join(lines[:2] + lines[3:]))
    with pytest.raises(CorruptLog) as info:
        Ledger(data, fsync=False)
    assert info.value.details["seq"] == 3


def test_corrupt_payload_reports_seq(tmp_path):
    events = [
        LedgerEvent(1, T0, EventKind.ACCOUNT_CREATED, {"account_id": "a", "owner_token_sha256": ""}),
        LedgerEvent(2, T0, EventKind.POINTS_REDEEMED, {"dimension": "PHYSICAL", "amount_mpt": 5}),
    ]
    with pytest.raises(CorruptLog) as info:
        fold("a", events)
    assert info.value.details["seq"] == 2


def test_events_are_canonical_json_lines(ledger):
    aid = new_account(ledger)
    line = (ledger.data_dir / f"{aid}.log").read_text().splitlines()[0]
    obj = json.loads(line)
    assert line == json.dumps(obj, sort_keys=True, separators=(",", ":"))
    assert obj["occurred_at"].endswith("Z")


def test_storage_failure_rolls_back(ledger, monkeypatch):
    aid = new_account(ledger)

    def boom(path, lines):
        raise OSError("disk full")

    monkeypatch.setattr(ledger, "_write", boom)
    with pytest.raises(StorageError):
        credit_event(ledger, aid, 100, T0)
    monkeypatch.undo()
    assert ledger.account(aid).last_seq == 2
    assert ledger.get_snapshot(aid, T0).effective_mpt[PHYS] == 0
    credit_event(ledger, aid, 100, T0)
    assert ledger.get_snapshot(aid, T0).effective_mpt[PHYS] == 100


def test_memory_only_ledger():
    ledger = Ledger(None)
    aid = new_account(ledger)
    credit_event(ledger, aid, 7, T0)
    assert ledger.rebuild(aid).balances[PHYS].base_mpt == 7


def test_retention_floor():
    with pytest.raises(ValueError):
        Ledger(None, retention_hours=1)

from __future__ import annotations

import itertools
import json

import pytest

from lifesync._util import format_ts
from lifesync.api import CLOCK_HEADER, ApiApp
from lifesync.client import ApiClient
from lifesync.errors import AuthFailed, BadRequest, Forbidden, LsgError, UnknownAccount

from .conftest import HOUR, T0

_ids = itertools.count()


def call(app, method, path, token=None, body=None, headers=None):
    h = dict(headers or {})
    if token:
        h["Authorization"] = f"Bearer {token}"
    raw = json.dumps(body).encode() if body is not None else b""
    status, payload = app.handle(method, path, h, raw)
    json.dumps(payload)  # every body must be serializable
    return status, payload


@pytest.fixture
def world(app):
    _, a = call(app, "POST", "/v1/accounts", body={})
    _, b = call(app, "POST", "/v1/accounts", body={})
    _, s = call(app, "POST", f"/v1/accounts/{a['account_id']}/sensors", a["owner_token"],
                {"kind": "pedometer", "origin": "PHYSICAL_DEVICE"})
    _, g = call(app, "POST", "/v1/games", body={"name": "runner"})
    _, h = call(app, "POST", "/v1/games", body={})
    call(app, "POST", f"/v1/games/{g['game_id']}/mechanics", g["game_token"],
         {"mechanic_id": "boost", "dimension": "PHYSICAL", "mode": "ON_DEMAND", "cost_mpt": 5000})
    return {
        "A": a["account_id"], "G": g["game_id"],
        "tokens": {
            "none": None,
            "owner": a["owner_token"],
            "other_owner": b["owner_token"],
            "sensor": s["api_key"],
            "game": g["game_token"],
            "other_game": h["game_token"],
        },
    }


def requests(w):
    A, G = w["A"], w["G"]
    return {
        "create_account": ("POST", "/v1/accounts", lambda: {}),
        "add_sensor": ("POST", f"/v1/accounts/{A}/sensors", lambda: {"kind": "pedometer", "origin": "VIRTUAL"}),
        "readings": ("POST", "/v1/readings", lambda: {"readings": []}),
        "snapshot": ("GET", f"/v1/profiles/{A}/snapshot", lambda: None),
        "events": ("GET", f"/v1/profiles/{A}/events", lambda: None),
        "create_game": ("POST", "/v1/games", lambda: {}),
        "add_mechanic": ("POST", f"/v1/games/{G}/mechanics", lambda: {
            "mechanic_id": f"m{next(_ids)}", "dimension": "SOCIAL", "mode": "PASSIVE",
            "modifier_lo": 1.0, "modifier_hi": 2.0}),
        "list_mechanics": ("GET", f"/v1/games/{G}/mechanics", lambda: None),
        "gameplay_sensor": ("POST", "/v1/gameplay-sensors", lambda: {"account_id": A}),
        "redeem": ("POST", "/v1/redemptions", lambda: {
            "account_id": A, "mechanic_id": "boost", "idempotency_key": f"k{next(_ids)}"}),
        "healthz": ("GET", "/v1/healthz", lambda: None),
    }


# expected status per (endpoint, credential)
MATRIX = {
    "create_account": dict(none=201, owner=201, other_owner=201, sensor=201, game=201, other_game=201),
    "add_sensor": dict(none=401, owner=201, other_owner=403, sensor=401, game=401, other_game=401),
    "readings": dict(none=401, owner=401, other_owner=401, sensor=200, game=401, other_game=401),
    "snapshot": dict(none=401, owner=200, other_owner=403, sensor=401, game=200, other_game=200),
    "events": dict(none=401, owner=200, other_owner=403, sensor=401, game=401, other_game=401),
    "create_game": dict(none=201, owner=201, other_owner=201, sensor=201, game=201, other_game=201),
    "add_mechanic": dict(none=401, owner=401, other_owner=401, sensor=401, game=201, other_game=403),
    "list_mechanics": dict(none=401, owner=401, other_owner=401, sensor=401, game=200, other_game=403),
    "gameplay_sensor": dict(none=401, owner=401, other_owner=401, sensor=401, game=201, other_game=201),
    # the other game has no "boost" mechanic, which is a 404 after auth passes
    "redeem": dict(none=401, owner=401, other_owner=401, sensor=401, game=200, other_game=404),
    "healthz": dict(none=200, owner=200, other_owner=200, sensor=200, game=200, other_game=200),
}


def test_role_matrix_is_exhaustive(app, world):
    reqs = requests(world)
    assert set(reqs) == set(MATRIX)
    for endpoint, expected in MATRIX.items():
        method, path, body = reqs[endpoint]
        for cred, want in expected.items():
            status, payload = call(app, method, path, world["tokens"][cred], body())
            assert status == want, (endpoint, cred, payload)
            if status >= 400:
                assert set(payload) >= {"code", "message", "retryable"}


def test_unknown_token_is_401(app, world):
    status, body = call(app, "GET", f"/v1/profiles/{world['A']}/snapshot", "not-a-token")
    assert (status, body["code"]) == (401, "AUTH_FAILED")


def test_create_account_fresh_ids(app):
    s1, a = call(app, "POST", "/v1/accounts", body={})
    s2, b = call(app, "POST", "/v1/accounts", body={})
    assert s1 == s2 == 201 and a["account_id"] != b["account_id"]


def test_bad_json_and_unknown_fields(app, world):
    status, body = app.handle("POST", "/v1/accounts", {}, b"{not json")
    assert (status, body["code"]) == (400, "BAD_JSON")
    status, body = call(app, "POST", "/v1/accounts", body={"nickname": "x"})
    assert (status, body["code"]) == (400, "BAD_REQUEST")
    status, body = call(app, "POST", "/v1/readings", world["tokens"]["sensor"], {"readings": [], "x": 1})
    assert status == 400


def test_routing_errors(app):
    assert call(app, "GET", "/v1/nothing")[0] == 404
    assert call(app, "DELETE", "/v1/accounts")[0] == 405
    assert call(app, "GET", "/v1/accounts")[0] == 405


def test_sensor_registration_statuses(app, world):
    owner, A = world["tokens"]["owner"], world["A"]
    status, body = call(app, "POST", f"/v1/accounts/{A}/sensors", owner, {"kind": "typo", "origin": "VIRTUAL"})
    assert (status, body["code"]) == (422, "UNKNOWN_KIND")


def test_readings_partial_and_duplicate(app, world):
    sensor = world["tokens"]["sensor"]
    rows = [
        {"reading_id": "a", "quantity": 100, "observed_at": format_ts(T0)},
        {"reading_id": "b", "quantity": -1, "observed_at": format_ts(T0)},
    ]
    hdr = {CLOCK_HEADER: format_ts(T0)}
    status, body = call(app, "POST", "/v1/readings", sensor, {"readings": rows}, hdr)
    assert status == 200
    assert [r["status"] for r in body["results"]] == ["ACCEPTED", "VALIDATION_FAILED"]
    _, again = call(app, "POST", "/v1/readings", sensor, {"readings": rows[:1]}, hdr)
    assert again["results"][0] == {"reading_id": "a", "status": "DUPLICATE", "credited_mpt": 1000, "dimension": "PHYSICAL"}


def test_reading_for_other_sensor_rejected(app, world):
    row = {"reading_id": "a", "sensor_id": "SOMEONE-ELSE", "quantity": 1, "observed_at": format_ts(T0)}
    status, body = call(app, "POST", "/v1/readings", world["tokens"]["sensor"], {"readings": [row]})
    assert (status, body["code"]) == (401, "AUTH_FAILED")


def test_snapshot_scores(app, world):
    owner, A = world["tokens"]["owner"], world["A"]
    status, snap = call(app, "GET", f"/v1/profiles/{A}/snapshot", owner)
    assert status == 200 and {d["score"] for d in snap["dimensions"].values()} == {0.0}
    call(app, "POST", "/v1/readings", world["tokens"]["sensor"],
         {"readings": [{"reading_id": "x", "quantity": 10_000, "observed_at": format_ts(T0)}]},
         {CLOCK_HEADER: format_ts(T0)})
    _, snap = call(app, "GET", f"/v1/profiles/{A}/snapshot", owner, headers={CLOCK_HEADER: format_ts(T0)})
    assert snap["dimensions"]["PHYSICAL"] == {"effective_mpt": 100_000, "score": 0.5}
    status, body = call(app, "GET", "/v1/profiles/NOPE/snapshot", world["tokens"]["game"])
    assert (status, body["code"]) == (404, "UNKNOWN_ACCOUNT")


def test_mechanic_registration_statuses(app, world):
    game, G = world["tokens"]["game"], world["G"]
    path = f"/v1/games/{G}/mechanics"
    ok = {"mechanic_id": "jump", "dimension": "PHYSICAL", "mode": "ON_DEMAND", "cost_mpt": 10}
    assert call(app, "POST", path, game, ok)[0] == 201
    assert call(app, "POST", path, game, ok)[1]["code"] == "DUPLICATE_MECHANIC"
    bad = {"mechanic_id": "fly", "dimension": "PHYSICAL", "mode": "PASSIVE", "cost_mpt": 10,
           "modifier_lo": 0.8, "modifier_hi": 1.2}
    status, body = call(app, "POST", path, game, bad)
    assert (status, body["code"]) == (422, "INVALID_BINDING")
    _, listed = call(app, "GET", path, game)
    assert {m["mechanic_id"] for m in listed["mechanics"]} == {"boost", "jump"}


def test_redemption_paths(app, world):
    game, A = world["tokens"]["game"], world["A"]
    hdr = {CLOCK_HEADER: format_ts(T0)}
    body = {"account_id": A, "mechanic_id": "boost", "idempotency_key": "poor"}
    status, rec = call(app, "POST", "/v1/redemptions", game, body, hdr)
    assert (status, rec["result"]) == (200, "INSUFFICIENT")
    call(app, "POST", "/v1/readings", world["tokens"]["sensor"],
         {"readings": [{"reading_id": "x", "quantity": 1000, "observed_at": format_ts(T0)}]}, hdr)
    body["idempotency_key"] = "rich"
    s1, first = call(app, "POST", "/v1/redemptions", game, body, hdr)
    s2, second = call(app, "POST", "/v1/redemptions", game, body, hdr)
    assert s1 == s2 == 200 and first == second and first["result"] == "GRANTED"
    body["mechanic_id"] = "other"
    status, err = call(app, "POST", "/v1/redemptions", game, body, hdr)
    assert (status, err["code"]) == (409, "KEY_PAYLOAD_MISMATCH")


def test_events_pagination(app, platform, world):
    A, owner = world["A"], world["tokens"]["owner"]
    sensor = world["tokens"]["sensor"]
    rows = [{"reading_id": f"r{i}", "quantity": 1, "observed_at": format_ts(T0)} for i in range(2498)]
    platform.submit_readings(sensor, rows, T0)
    pages, since = [], 0
    while True:
        status, page = call(app, "GET", f"/v1/profiles/{A}/events?since_seq={since}", owner)
        assert status == 200
        if not page["events"]:
            break
        pages.append(page["events"])
        since = page["next_seq"]
    assert [len(p) for p in pages] == [1000, 1000, 500]
    assert [e["seq"] for p in pages for e in p] == list(range(1, 2501))
    _, beyond = call(app, "GET", f"/v1/profiles/{A}/events?since_seq=99999", owner)
    assert beyond["events"] == []
    assert call(app, "GET", f"/v1/profiles/{A}/events?since_seq=x", owner)[0] == 400


def test_fresh_account_events(app):
    _, a = call(app, "POST", "/v1/accounts", body={})
    _, page = call(app, "GET", f"/v1/profiles/{a['account_id']}/events?since_seq=0", a["owner_token"])
    assert [e["kind"] for e in page["events"]] == ["ACCOUNT_CREATED"]


def test_clock_header_only_in_test_builds(platform, world):
    prod = ApiApp(platform, test_clock=False)
    hdr = {CLOCK_HEADER: format_ts(T0 + 1000 * HOUR)}
    _, snap = call(prod, "GET", f"/v1/profiles/{world['A']}/snapshot", world["tokens"]["owner"], headers=hdr)
    assert snap["as_of"] == format_ts(platform.clock())
    test = ApiApp(platform, test_clock=True)
    _, snap = call(test, "GET", f"/v1/profiles/{world['A']}/snapshot", world["tokens"]["owner"], headers=hdr)
    assert snap["as_of"] == format_ts(T0 + 1000 * HOUR)
    assert call(test, "GET", "/v1/healthz", headers={CLOCK_HEADER: "yesterday"})[0] == 400


def test_over_http(client, server):
    assert client.healthz() == "ok"
    acct = client.create_account()
    snap = client.snapshot(acct["owner_token"], acct["account_id"])
    assert snap["last_seq"] == 1
    with pytest.raises(AuthFailed):
        client.snapshot("nope", acct["account_id"])
    with pytest.raises(UnknownAccount):
        client.snapshot(client.create_game()["game_token"], "missing")
    with pytest.raises(Forbidden):
        client.events(client.create_account()["owner_token"], acct["account_id"])
    with pytest.raises(BadRequest):
        client.request("POST", "/v1/games", {"colour": "red"})
    # keep-alive: many requests over one connection
    for _ in range(50):
        client.healthz()


def test_raw_bad_json_over_http(server):
    c = ApiClient(server.url)
    conn, _ = c._conn()
    conn.request("POST", "/v1/accounts", body=b"{oops", headers={"Content-Type": "application/json"})
    resp = conn.getresponse()
    assert resp.status == 400 and json.loads(resp.read())["code"] == "BAD_JSON"
    c.close()


def test_client_rebuilds_typed_errors():
    from lifesync.errors import error_from_body

    err = error_from_body(409, {"code": "SEQUENCE_CONFLICT", "message": "m", "retryable": True})
    assert err.code == "SEQUENCE_CONFLICT" and err.retryable
    odd = error_from_body(418, {"code": "TEAPOT", "message": "short and stout"})
    assert isinstance(odd, LsgError) and odd.code == "TEAPOT"

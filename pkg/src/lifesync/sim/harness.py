"""Scenario runner: drives a real service over HTTP on a virtual clock.

A scenario is one JSON document (schema in ``lifesync/data``) naming actors,
their sensors, games with mechanics, and a time-ordered action list. Every
request carries the ``X-LSG-Test-Clock`` header set to the action's ``at``,
so one service instance can live through many simulated days in seconds.

Reports contain no generated ids or tokens, which makes them byte-identical
across runs of the same scenario.
"""

from __future__ import annotations

import json
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterator, Mapping

import jsonschema

from .._util import MS_PER_DAY, MS_PER_HOUR, canonical_json, format_ts, parse_ts
from ..api import CLOCK_HEADER, ApiApp, start_background
from ..client import ApiClient, TransportError
from ..composition import RuleCatalog
from ..errors import HarnessAbort, LsgError
from ..ledger import AccountState, Ledger, fold, read_log
from ..sdk import SdkConfig, Session, SessionStatus, SpendResult, connect
from ..service import Platform
from ..twin import Dimension, MechanicBinding, MechanicMode, TwinSettings
from .oracle import OracleCorruptLog, recompute_dir, score

VERBS = ("SUBMIT_READING", "SPEND", "CONCURRENT_SPEND", "SNAPSHOT", "REPORT_SESSION")


class ScenarioError(ValueError):
    pass


def scenario_schema() -> dict:
    text = resources.files("lifesync.data").joinpath("scenario.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_scenario(doc: Mapping) -> None:
    """Schema check plus the cross-reference invariants a schema cannot express."""
    try:
        jsonschema.validate(doc, scenario_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"{where}: {exc.message}") from None
    actors = {a["name"]: a for a in doc["actors"]}
    games = {g["name"]: g for g in doc.get("games", [])}
    if len(actors) != len(doc["actors"]) or len(games) != len(doc.get("games", [])):
        raise ScenarioError("actor and game names must be unique")
    start = parse_ts(doc["start"])
    prev = start
    for n, action in enumerate(doc["actions"]):
        at = parse_ts(action["at"])
        if at < prev:
            raise ScenarioError(f"actions[{n}]: not sorted by at")
        prev = at
        actor = actors.get(action["actor"])
        if actor is None:
            raise ScenarioError(f"actions[{n}]: undeclared actor {action['actor']!r}")
        args = action.get("args", {})
        if action["verb"] == "SUBMIT_READING":
            sensors = {s["name"] for s in actor.get("sensors", [])}
            if args.get("sensor") not in sensors:
                raise ScenarioError(f"actions[{n}]: actor has no sensor {args.get('sensor')!r}")
        elif args.get("game") not in games:
            if action["verb"] != "SNAPSHOT" or "game" in args:
                raise ScenarioError(f"actions[{n}]: unknown game {args.get('game')!r}")
        if action["verb"] == "SNAPSHOT" and "game" not in args and not actor.get("linked", True):
            raise ScenarioError(f"actions[{n}]: unlinked actor needs a game to snapshot through")
    if "end" in doc and parse_ts(doc["end"]) < prev:
        raise ScenarioError("end precedes the last action")


def load_scenario(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    validate_scenario(doc)
    return doc


@dataclass
class RunReport:
    seed: int
    outcomes: list[dict] = field(default_factory=list)
    final_snapshots: dict[str, dict] = field(default_factory=dict)
    oracle_snapshots: dict[str, dict] = field(default_factory=dict)
    divergences: list[str] = field(default_factory=list)
    oracle_events: int = 0

    @property
    def ok(self) -> bool:
        return not self.divergences

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "outcomes": self.outcomes,
            "final_snapshots": self.final_snapshots,
            "oracle_snapshots": self.oracle_snapshots,
            "divergences": self.divergences,
            "oracle_events": self.oracle_events,
        }

    def to_bytes(self) -> bytes:
        return (canonical_json(self.to_json()) + "\n").encode("utf-8")


@dataclass
class _Actor:
    name: str
    linked: bool
    account_id: str | None = None
    owner_token: str | None = None
    sensors: dict[str, dict] = field(default_factory=dict)


@dataclass
class _Game:
    name: str
    game_id: str
    token: str
    mechanics: dict[str, MechanicBinding]


class _Runner:
    def __init__(
        self,
        doc: Mapping,
        base_url: str,
        data_dir: Path,
        settings: TwinSettings,
        catalog: RuleCatalog,
        request_timeout_ms: int,
    ):
        self.doc = doc
        self.base_url = base_url
        self.data_dir = data_dir
        self.settings = settings
        self.catalog = catalog
        self.timeout_ms = request_timeout_ms
        self.now = parse_ts(doc["start"])
        self.client = ApiClient(base_url, timeout=request_timeout_ms / 1000.0, headers=self._headers)
        self.actors: dict[str, _Actor] = {}
        self.games: dict[str, _Game] = {}
        self.sessions: dict[tuple[str, str], Session] = {}
        self.report = RunReport(doc["seed"])

    def _headers(self) -> dict[str, str]:
        return {CLOCK_HEADER: format_ts(self.now)}

    def _api(self, method: str, *args):
        try:
            return getattr(self.client, method)(*args)
        except TransportError as exc:
            raise HarnessAbort(f"transport failure talking to {self.base_url}: {exc}") from exc

    # -- setup -------------------------------------------------------------------

    def setup(self) -> None:
        for spec in self.doc["actors"]:
            actor = _Actor(spec["name"], spec.get("linked", True))
            if actor.linked:
                acct = self._api("create_account")
                actor.account_id, actor.owner_token = acct["account_id"], acct["owner_token"]
                for s in spec.get("sensors", []):
                    actor.sensors[s["name"]] = self._api(
                        "register_sensor", actor.owner_token, actor.account_id,
                        s["kind"], s.get("origin", "PHYSICAL_DEVICE"),
                    )
            self.actors[actor.name] = actor
        for spec in self.doc.get("games", []):
            created = self._api("create_game", spec["name"])
            mechanics = {}
            for m in spec.get("mechanics", []):
                body = self._api("register_mechanic", created["game_token"], created["game_id"], m)
                mechanics[m["mechanic_id"]] = MechanicBinding(
                    body["mechanic_id"], created["game_id"], body["dimension"], body["mode"],
                    body.get("cost_mpt"), body.get("modifier_lo"), body.get("modifier_hi"),
                )
            self.games[spec["name"]] = _Game(spec["name"], created["game_id"], created["game_token"], mechanics)

    def session(self, actor: _Actor, game: _Game) -> Session:
        key = (actor.name, game.name)
        sess = self.sessions.get(key)
        if sess is None:
            config = SdkConfig(
                self.base_url, game.token, actor.account_id if actor.linked else None,
                request_timeout_ms=self.timeout_ms, snapshot_ttl_ms=0, extra_headers=self._headers,
            )
            sess = connect(config)
            if actor.linked and sess.status is not SessionStatus.LIVE:
                raise HarnessAbort(f"service did not answer the session handshake for {actor.name}")
            self.sessions[key] = sess
        return sess

    def close(self) -> None:
        for sess in self.sessions.values():
            sess.close()
        self.client.close()

    # -- verbs ---------------------------------------------------------------------

    def _submit(self, actor: _Actor, args: Mapping, at: int) -> dict:
        sensor = actor.sensors[args["sensor"]]
        raw_rows = args["readings"] if "readings" in args else [args]
        rows = []
        for r in raw_rows:
            row = {
                "reading_id": r["reading_id"],
                "sensor_id": sensor["sensor_id"],
                "quantity": r["quantity"],
                "observed_at": r.get("observed_at", format_ts(at)),
            }
            if "metadata" in r:
                row["metadata"] = r["metadata"]
            rows.append(row)
        results = self._api("submit_readings", sensor["api_key"], rows)
        out = []
        for res in results:
            item = {"reading_id": res["reading_id"], "status": res["status"], "credited_mpt": res["credited_mpt"]}
            if res.get("reason"):
                item["reason"] = res["reason"]
            out.append(item)
        return {"results": out}

    def _spend(self, actor: _Actor, args: Mapping, index: int) -> dict:
        game = self.games[args["game"]]
        key = args.get("key") or f"k{self.doc['seed']}-{index}"
        outcome = self.session(actor, game).spend(args["mechanic"], key)
        if outcome.result is SpendResult.DECLINED_OFFLINE and actor.linked:
            raise HarnessAbort(f"spend {key} declined offline against a live service")
        out = {"result": outcome.result.value, "key": key}
        if outcome.error_code:
            out["error"] = outcome.error_code
        return out

    def _concurrent_spend(self, actor: _Actor, args: Mapping, index: int) -> dict:
        game = self.games[args["game"]]
        n = int(args.get("n", 10))
        key = args.get("key") or f"k{self.doc['seed']}-{index}"
        if not actor.linked:
            return {"requests": n, "result": "DECLINED_OFFLINE", "key": key}
        barrier = threading.Barrier(n)

        def one(_):
            barrier.wait()
            try:
                return self.client.redeem(game.token, actor.account_id, args["mechanic"], key)
            except LsgError as exc:
                return {"error": exc.code}

        try:
            with ThreadPoolExecutor(max_workers=n) as pool:
                bodies = list(pool.map(one, range(n)))
        except TransportError as exc:
            raise HarnessAbort(f"transport failure during concurrent spend: {exc}") from exc
        first = bodies[0]
        identical = all(b == first for b in bodies)
        return {
            "requests": n,
            "key": key,
            "identical": identical,
            "result": first.get("result", first.get("error")) if identical else "MIXED",
        }

    def _snapshot(self, actor: _Actor, args: Mapping) -> dict:
        if "game" not in args:
            snap = self._api("snapshot", actor.owner_token, actor.account_id)
            return {"as_of": snap["as_of"], "dimensions": snap["dimensions"]}
        game = self.games[args["game"]]
        sess = self.session(actor, game)
        snap = sess.current_snapshot()
        modifiers = {
            mid: sess.passive_modifier(b)
            for mid, b in sorted(game.mechanics.items())
            if b.mode is MechanicMode.PASSIVE
        }
        return {
            "freshness": snap.freshness.value,
            "scores": {d.value: snap.scores[d] for d in Dimension},
            "modifiers": modifiers,
        }

    def _report_session(self, actor: _Actor, args: Mapping, at: int) -> dict:
        game = self.games[args["game"]]
        ended = parse_ts(args["ended_at"]) if "ended_at" in args else at
        if "started_at" in args:
            started = parse_ts(args["started_at"])
        else:
            started = ended - int(round(float(args["minutes"]) * 60_000))
        out = self.session(actor, game).report_session(started, ended)
        if out.status.value == "DROPPED" and actor.linked:
            raise HarnessAbort("session report dropped by a live service")
        res = {"status": out.status.value, "credited_mpt": out.credited_mpt}
        if out.reason:
            res["reason"] = out.reason
        return res

    def act(self, index: int, action: Mapping) -> dict:
        at = parse_ts(action["at"])
        self.now = at
        actor = self.actors[action["actor"]]
        verb, args = action["verb"], action.get("args", {})
        head = {"index": index, "at": format_ts(at), "actor": actor.name, "verb": verb}
        if "game" in args:
            head["game"] = args["game"]
        try:
            if verb == "SUBMIT_READING":
                body = self._submit(actor, args, at)
            elif verb == "SPEND":
                body = self._spend(actor, args, index)
            elif verb == "CONCURRENT_SPEND":
                body = self._concurrent_spend(actor, args, index)
            elif verb == "SNAPSHOT":
                body = self._snapshot(actor, args)
            else:
                body = self._report_session(actor, args, at)
        except LsgError as exc:
            if isinstance(exc, HarnessAbort):
                raise
            body = {"error": exc.code}
        head.update(body)
        return head

    # -- finish --------------------------------------------------------------------

    def finish(self, end: int) -> None:
        self.now = end
        live: dict[str, dict] = {}
        for actor in self.actors.values():
            if not actor.linked:
                continue
            snap = self._api("snapshot", actor.owner_token, actor.account_id)
            live[actor.name] = {k: snap[k] for k in ("as_of", "last_seq", "dimensions")}
        self.report.final_snapshots = live
        hl = {d.value: self.settings.half_life_hours[d] for d in Dimension}
        caps = {d.value: self.settings.soft_cap_mpt[d] for d in Dimension}
        try:
            result = recompute_dir(
                self.data_dir, half_life_hours=hl,
                daily_caps={k: r.daily_cap_mpt for k, r in self.catalog.items()},
            )
        except OracleCorruptLog as exc:
            self.report.divergences.append(f"oracle: {exc}")
            return
        self.report.oracle_events = result.events
        self.report.divergences.extend(f"oracle: {v}" for v in result.violations)
        for actor in self.actors.values():
            if not actor.linked:
                continue
            acct = result.accounts.get(actor.account_id)
            if acct is None:
                self.report.divergences.append(f"{actor.name}: account missing from logs")
                continue
            at = max(end, acct.last_time)
            dims = {}
            for d in Dimension:
                e = acct.effective(d.value, at, hl[d.value])
                dims[d.value] = {"effective_mpt": e, "score": score(e, caps[d.value])}
            expected = {"as_of": format_ts(at), "last_seq": acct.last_seq, "dimensions": dims}
            self.report.oracle_snapshots[actor.name] = expected
            got = live[actor.name]
            for k in ("as_of", "last_seq"):
                if got[k] != expected[k]:
                    self.report.divergences.append(f"{actor.name}: {k} live {got[k]} oracle {expected[k]}")
            for d, want in dims.items():
                if got["dimensions"][d] != want:
                    self.report.divergences.append(
                        f"{actor.name}: {d} live {got['dimensions'][d]} oracle {want}"
                    )


def run_scenario(
    scenario: Mapping,
    base_url: str,
    data_dir: str | Path,
    *,
    settings: TwinSettings | None = None,
    catalog: RuleCatalog | None = None,
    request_timeout_ms: int = 5000,
) -> RunReport:
    """Execute ``scenario`` against the service at ``base_url``.

    ``data_dir`` is the service's (initially empty) data directory, read by
    the oracle after the last action. ``settings`` and ``catalog`` must match
    the service's configuration.
    """
    validate_scenario(scenario)
    data_dir = Path(data_dir)
    if any(data_dir.glob("*.log")):
        raise ScenarioError(f"data dir {data_dir} is not empty")
    runner = _Runner(
        scenario, base_url, data_dir, settings or TwinSettings(), catalog or RuleCatalog.default(),
        request_timeout_ms,
    )
    try:
        runner.client.healthz()
    except TransportError as exc:
        raise HarnessAbort(f"service at {base_url} is not reachable: {exc}") from exc
    try:
        runner.setup()
        last = parse_ts(scenario["start"])
        for index, action in enumerate(scenario["actions"]):
            runner.report.outcomes.append(runner.act(index, action))
            last = runner.now
        end = parse_ts(scenario["end"]) if "end" in scenario else last
        runner.finish(end)
    finally:
        runner.close()
    return runner.report


@contextmanager
def local_service(
    data_dir: str | Path,
    *,
    settings: TwinSettings | None = None,
    catalog: RuleCatalog | None = None,
    fsync: bool = False,
) -> Iterator[tuple[str, Platform]]:
    """In-process service with the test clock enabled, on an ephemeral port."""
    ledger = Ledger(data_dir, settings, fsync=fsync)
    platform = Platform(ledger, catalog)
    server = start_background(ApiApp(platform, test_clock=True))
    try:
        yield server.url, platform
    finally:
        server.shutdown()
        server.server_close()


def run_scenario_local(
    scenario: Mapping,
    data_dir: str | Path,
    *,
    settings: TwinSettings | None = None,
    catalog: RuleCatalog | None = None,
    fsync: bool = False,
) -> tuple[RunReport, Platform]:
    with local_service(data_dir, settings=settings, catalog=catalog, fsync=fsync) as (url, platform):
        report = run_scenario(scenario, url, data_dir, settings=settings, catalog=catalog)
    return report, platform


def verify_data_dir(
    data_dir: str | Path,
    *,
    settings: TwinSettings | None = None,
    catalog: RuleCatalog | None = None,
) -> tuple[list[str], int]:
    """Compare the ledger's own fold of every log against the oracle.

    Read-only: torn tails are skipped, never truncated. Returns the divergence
    list and the number of events the oracle read.
    """
    settings = settings or TwinSettings()
    catalog = catalog or RuleCatalog.default()
    data_dir = Path(data_dir)
    hl = {d.value: settings.half_life_hours[d] for d in Dimension}
    try:
        result = recompute_dir(
            data_dir, half_life_hours=hl, daily_caps={k: r.daily_cap_mpt for k, r in catalog.items()}
        )
    except OracleCorruptLog as exc:
        return [f"oracle: {exc}"], 0
    out = [f"oracle: {v}" for v in result.violations]
    seen = set()
    for path in sorted(data_dir.glob("*.log")):
        try:
            state = fold(path.stem, read_log(path), settings)
        except LsgError as exc:
            out.append(f"{path.stem}: ledger fold failed: {exc}")
            continue
        if not isinstance(state, AccountState):
            continue
        seen.add(state.account_id)
        acct = result.accounts.get(state.account_id)
        if acct is None:
            out.append(f"{state.account_id}: missing from oracle")
            continue
        if acct.last_seq != state.last_seq:
            out.append(f"{state.account_id}: last_seq ledger {state.last_seq} oracle {acct.last_seq}")
        for d in Dimension:
            b = state.balances[d]
            want = (acct.base[d.value], acct.base_time[d.value])
            if (b.base_mpt, b.base_time) != want:
                out.append(f"{state.account_id}: {d.value} ledger {(b.base_mpt, b.base_time)} oracle {want}")
    out.extend(f"{aid}: missing from ledger fold" for aid in sorted(set(result.accounts) - seen))
    return out, result.events


# -- scenario builders -----------------------------------------------------------


SPEED = {"mechanic_id": "speed", "dimension": "PHYSICAL", "mode": "PASSIVE", "modifier_lo": 0.8, "modifier_hi": 1.2}


def active_vs_sedentary(days: int = 3, steps_per_day: int = 10_000, start: str = "2026-03-02T00:00:00.000Z") -> dict:
    """Actor A walks ``steps_per_day`` every day, actor B never moves; two
    games read the same passive speed mechanic at the end."""
    t0 = parse_ts(start)
    actions = []
    for day in range(days):
        actions.append({
            "at": format_ts(t0 + day * MS_PER_DAY + 18 * MS_PER_HOUR),
            "actor": "A",
            "verb": "SUBMIT_READING",
            "args": {"sensor": "steps", "reading_id": f"A-day{day}", "quantity": steps_per_day},
        })
    end = t0 + days * MS_PER_DAY
    for actor in ("A", "B"):
        for game in ("runner", "kart"):
            actions.append({"at": format_ts(end), "actor": actor, "verb": "SNAPSHOT", "args": {"game": game}})
    return {
        "seed": 0,
        "description": "illustrative two-player reciprocal loop",
        "start": start,
        "end": format_ts(end),
        "actors": [
            {"name": "A", "sensors": [{"name": "steps", "kind": "pedometer"}]},
            {"name": "B", "sensors": [{"name": "steps", "kind": "pedometer"}]},
        ],
        "games": [{"name": "runner", "mechanics": [SPEED]}, {"name": "kart", "mechanics": [SPEED]}],
        "actions": actions,
    }


def fuzz_scenario(
    seed: int,
    *,
    accounts: int = 50,
    days: int = 3,
    batches_per_day: int = 12,
    batch_size: int = 20,
    start: str = "2026-03-02T00:00:00.000Z",
) -> dict:
    """Random but seed-determined workload across many accounts.

    Batches mix fresh readings, replayed reading ids, malformed rows and stale
    timestamps; spends reuse keys and occasionally race; some players report
    play sessions.
    """
    rng = random.Random(seed)
    t0 = parse_ts(start)
    kinds = [("steps", "pedometer", (0, 3000)), ("focus", "focus_eeg", (0, 40)), ("screen", "screen_time", (0, 90)),
             ("social", "social_activity", (0, 8))]
    actors = [
        {"name": f"p{i:03d}", "sensors": [{"name": n, "kind": k} for n, k, _ in kinds]}
        for i in range(accounts)
    ]
    actors.append({"name": "guest", "linked": False})
    games = [{
        "name": "arena",
        "mechanics": [
            SPEED,
            {"mechanic_id": "boost", "dimension": "PHYSICAL", "mode": "ON_DEMAND", "cost_mpt": 5000},
            {"mechanic_id": "hint", "dimension": "COGNITIVE", "mode": "ON_DEMAND", "cost_mpt": 2000},
        ],
    }]
    actions: list[tuple[int, int, dict]] = []
    step = MS_PER_DAY // (batches_per_day + 1)
    for i, actor in enumerate(actors[:-1]):
        name = actor["name"]
        used_ids: list[tuple[str, str]] = []
        keys: list[str] = []
        for day in range(days):
            for b in range(batches_per_day):
                at = t0 + day * MS_PER_DAY + (b + 1) * step + rng.randrange(step // 2)
                sname, _, (lo, hi) = rng.choice(kinds)
                rows = []
                for r in range(batch_size):
                    observed = at - (batch_size - r) * 1000
                    roll = rng.random()
                    if roll < 0.04 and used_ids:
                        sn, rid = rng.choice(used_ids)
                        if sn != sname:
                            rid = f"{name}-{day}-{b}-{r}"
                        rows.append({"reading_id": rid, "quantity": rng.uniform(lo, hi), "observed_at": format_ts(observed)})
                        continue
                    rid = f"{name}-{day}-{b}-{r}"
                    if roll < 0.06:
                        rows.append({"reading_id": rid, "quantity": -1.0, "observed_at": format_ts(observed)})
                    elif roll < 0.07:
                        rows.append({"reading_id": rid, "quantity": 5, "observed_at": format_ts(observed - 2 * MS_PER_DAY)})
                    else:
                        q = round(rng.uniform(lo, hi), rng.choice([0, 2]))
                        rows.append({"reading_id": rid, "quantity": q, "observed_at": format_ts(observed)})
                        used_ids.append((sname, rid))
                actions.append((at, i, {"actor": name, "verb": "SUBMIT_READING", "args": {"sensor": sname, "readings": rows}}))
                roll = rng.random()
                when = at + 1000
                if roll < 0.15:
                    key = rng.choice(keys) if keys and rng.random() < 0.3 else f"{name}-key{len(keys)}"
                    keys.append(key)
                    mech = rng.choice(["boost", "hint"])
                    actions.append((when, i, {"actor": name, "verb": "SPEND", "args": {"game": "arena", "mechanic": mech, "key": key}}))
                elif roll < 0.17:
                    key = f"{name}-race{len(keys)}"
                    keys.append(key)
                    actions.append((when, i, {"actor": name, "verb": "CONCURRENT_SPEND", "args": {"game": "arena", "mechanic": "boost", "key": key, "n": 4}}))
                elif roll < 0.22:
                    actions.append((when, i, {"actor": name, "verb": "REPORT_SESSION", "args": {"game": "arena", "minutes": round(rng.uniform(5, 90), 1)}}))
                elif roll < 0.25:
                    actions.append((when, i, {"actor": name, "verb": "SNAPSHOT", "args": {"game": "arena"}}))
    actions.append((t0 + MS_PER_HOUR, len(actors), {"actor": "guest", "verb": "SNAPSHOT", "args": {"game": "arena"}}))
    actions.sort(key=lambda a: (a[0], a[1]))
    end = t0 + days * MS_PER_DAY
    return {
        "seed": seed,
        "start": start,
        "end": format_ts(end),
        "actors": actors,
        "games": games,
        "actions": [dict(at=format_ts(at), **body) for at, _, body in actions],
    }

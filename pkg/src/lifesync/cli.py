"""``lsg``: admin and ops command line, a thin client of the HTTP API.

Exit codes: 0 success, 1 a decided negative outcome (INSUFFICIENT,
divergences found), 2 any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from ._util import new_id
from .api import ApiApp, LsgServer
from .client import ApiClient, TransportError
from .config import load_config
from .errors import LsgError
from .ingestion import SensorDescriptor, SensorOrigin, load_trace, run_replay_adapter
from .service import Platform

DEFAULT_URL = "http://127.0.0.1:8080"


class _Negative(Exception):
    pass


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _token(args) -> str:
    token = args.token or os.environ.get("LSG_TOKEN")
    if not token:
        raise LsgError("a bearer token is required (--token or LSG_TOKEN)")
    return token


def _client(args) -> ApiClient:
    return ApiClient(args.url, timeout=args.timeout)


def cmd_serve(args) -> int:
    config = load_config(args.config)
    platform = Platform.from_config(config)
    host, port = config.host_port()
    server = LsgServer((host, port), ApiApp(platform, test_clock=config.test_clock))
    print(f"lsg serving on {server.url} (data dir {config.data_dir})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_account_create(args) -> int:
    _print(_client(args).create_account())
    return 0


def cmd_sensor_add(args) -> int:
    _print(_client(args).register_sensor(_token(args), args.account, args.kind, args.origin))
    return 0


def cmd_reading_submit(args) -> int:
    trace = load_trace(args.file)
    # the adapter only needs the sensor id and its key
    sensor = SensorDescriptor(args.sensor, "", "", SensorOrigin.PHYSICAL_DEVICE, _token(args), 0)
    report = run_replay_adapter(trace, sensor, _client(args), speed=args.speed)
    _print({"counts": report.counts(), "rows": list(report.rows)} if args.verbose else report.counts())
    return 0


def cmd_snapshot(args) -> int:
    _print(_client(args).snapshot(_token(args), args.account))
    return 0


def cmd_redeem(args) -> int:
    client, token = _client(args), _token(args)
    client.mechanics(token, args.game)  # FORBIDDEN unless the token belongs to this game
    rec = client.redeem(token, args.account, args.mechanic, args.key or new_id())
    _print(rec)
    if rec["result"] != "GRANTED":
        print(rec["result"])
        raise _Negative()
    return 0


def cmd_scenario_run(args) -> int:
    from .sim.harness import load_scenario, run_scenario, run_scenario_local

    scenario = load_scenario(args.file)
    config = load_config(args.config)
    settings, catalog = config.twin_settings(), config.catalog()
    if args.url_given:
        if not args.data_dir:
            raise LsgError("--data-dir (the service's data dir) is required with --url")
        report = run_scenario(scenario, args.url, args.data_dir, settings=settings, catalog=catalog)
    elif args.data_dir:
        report, _ = run_scenario_local(scenario, args.data_dir, settings=settings, catalog=catalog)
    else:
        with tempfile.TemporaryDirectory(prefix="lsg-scenario-") as tmp:
            report, _ = run_scenario_local(scenario, tmp, settings=settings, catalog=catalog)
    data = report.to_bytes()
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.write(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    print(f"{len(report.divergences)} divergences", file=sys.stderr if not args.out else sys.stdout)
    if report.divergences:
        raise _Negative()
    return 0


def cmd_oracle_verify(args) -> int:
    from .sim.harness import verify_data_dir

    if not Path(args.data_dir).is_dir():
        raise LsgError(f"no such data dir {args.data_dir}")
    config = load_config(args.config)
    divergences, events = verify_data_dir(args.data_dir, settings=config.twin_settings(), catalog=config.catalog())
    for d in divergences:
        print(d)
    print(f"{len(divergences)} divergences ({events} events checked)")
    if divergences:
        raise _Negative()
    return 0


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's defaults from clobbering options given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--url", help=f"service base URL (default $LSG_URL or {DEFAULT_URL})")
    common.add_argument("--token", help="bearer token (default $LSG_TOKEN)")
    common.add_argument("--timeout", type=float, help="request timeout in seconds (default 10)")
    common.add_argument("--config", help="service config file (JSON)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lsg", description="LifeSync-Games platform tool", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("serve", parents=[common], help="run the service").set_defaults(func=cmd_serve)

    account = sub.add_parser("account", parents=[common]).add_subparsers(dest="sub", required=True)
    account.add_parser("create", parents=[common], help="create an account").set_defaults(func=cmd_account_create)

    sensor = sub.add_parser("sensor", parents=[common]).add_subparsers(dest="sub", required=True)
    s = sensor.add_parser("add", parents=[common], help="register a sensor (owner token)")
    s.add_argument("account")
    s.add_argument("kind")
    s.add_argument("--origin", default="PHYSICAL_DEVICE", choices=[o.value for o in SensorOrigin])
    s.set_defaults(func=cmd_sensor_add)

    reading = sub.add_parser("reading", parents=[common]).add_subparsers(dest="sub", required=True)
    r = reading.add_parser("submit", parents=[common], help="replay a JSONL trace (sensor api key as token)")
    r.add_argument("sensor")
    r.add_argument("file")
    r.add_argument("--speed", type=float, default=None, help="replay speed factor (default: as fast as possible)")
    r.set_defaults(func=cmd_reading_submit)

    snap = sub.add_parser("snapshot", parents=[common], help="profile snapshot (owner or game token)")
    snap.add_argument("account")
    snap.set_defaults(func=cmd_snapshot)

    red = sub.add_parser("redeem", parents=[common], help="trigger an on-demand mechanic (game token)")
    red.add_argument("game")
    red.add_argument("account")
    red.add_argument("mechanic")
    red.add_argument("--key", default=None, help="idempotency key (default: fresh)")
    red.set_defaults(func=cmd_redeem)

    scen = sub.add_parser("scenario", parents=[common]).add_subparsers(dest="sub", required=True)
    sr = scen.add_parser("run", parents=[common], help="run a scenario file")
    sr.add_argument("file")
    sr.add_argument("--data-dir", default=None)
    sr.add_argument("--out", default=None, help="write the canonical report bytes here")
    sr.set_defaults(func=cmd_scenario_run)

    oracle = sub.add_parser("oracle", parents=[common]).add_subparsers(dest="sub", required=True)
    ov = oracle.add_parser("verify", parents=[common], help="re-fold a data dir independently")
    ov.add_argument("data_dir")
    ov.set_defaults(func=cmd_oracle_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("url", None), ("token", None), ("timeout", 10.0), ("config", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    args.url_given = args.url is not None or "LSG_URL" in os.environ
    args.url = args.url or os.environ.get("LSG_URL") or DEFAULT_URL
    try:
        return args.func(args)
    except _Negative:
        return 1
    except LsgError as exc:
        print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
        return 2
    except TransportError as exc:
        print(f"error: cannot reach {args.url}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

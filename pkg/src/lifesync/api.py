"""HTTP/JSON facade (``/v1``) over :class:`~lifesync.service.Platform`.

Routing and encoding live in :class:`ApiApp`, which maps one request tuple to
``(status, body)`` and has no socket code, so it is testable directly. The
threaded stdlib server below only moves bytes.

Role matrix (anything else is 401, or 403 for the right role on the wrong
resource)::

    POST /v1/accounts                       anyone
    POST /v1/accounts/{id}/sensors          ACCOUNT_OWNER of {id}
    POST /v1/readings                       SENSOR
    GET  /v1/profiles/{id}/snapshot         ACCOUNT_OWNER of {id}, GAME
    GET  /v1/profiles/{id}/events           ACCOUNT_OWNER of {id}
    POST /v1/games                          anyone
    POST /v1/games/{id}/mechanics           GAME {id}
    GET  /v1/games/{id}/mechanics           GAME {id}
    POST /v1/gameplay-sensors               GAME
    POST /v1/redemptions                    GAME
    GET  /v1/healthz                        anyone
"""

from __future__ import annotations

import json
import logging
import re
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Mapping
from urllib.parse import parse_qs, urlsplit

from ._util import parse_ts
from .errors import BadJson, BadRequest, Forbidden, LsgError, MethodNotAllowed, NotFound
from .service import Platform, Principal, Role

log = logging.getLogger(__name__)

CLOCK_HEADER = "X-LSG-Test-Clock"
EVENTS_PAGE = 1000

ROLE_MATRIX: dict[tuple[str, str], tuple[Role, ...] | None] = {
    ("POST", "create_account"): None,
    ("POST", "add_sensor"): (Role.ACCOUNT_OWNER,),
    ("POST", "readings"): (Role.SENSOR,),
    ("GET", "snapshot"): (Role.ACCOUNT_OWNER, Role.GAME),
    ("GET", "events"): (Role.ACCOUNT_OWNER,),
    ("POST", "create_game"): None,
    ("POST", "add_mechanic"): (Role.GAME,),
    ("GET", "list_mechanics"): (Role.GAME,),
    ("POST", "gameplay_sensor"): (Role.GAME,),
    ("POST", "redeem"): (Role.GAME,),
    ("GET", "healthz"): None,
}

_ROUTES = [
    (re.compile(r"^/v1/healthz$"), "healthz"),
    (re.compile(r"^/v1/accounts$"), "create_account"),
    (re.compile(r"^/v1/accounts/(?P<account_id>[^/]+)/sensors$"), "add_sensor"),
    (re.compile(r"^/v1/readings$"), "readings"),
    (re.compile(r"^/v1/profiles/(?P<account_id>[^/]+)/snapshot$"), "snapshot"),
    (re.compile(r"^/v1/profiles/(?P<account_id>[^/]+)/events$"), "events"),
    (re.compile(r"^/v1/games$"), "create_game"),
    (re.compile(r"^/v1/games/(?P<game_id>[^/]+)/mechanics$"), "add_mechanic"),
    (re.compile(r"^/v1/gameplay-sensors$"), "gameplay_sensor"),
    (re.compile(r"^/v1/redemptions$"), "redeem"),
]


def _fields(body: Any, required: set[str], optional: set[str] = frozenset()) -> dict:
    if not isinstance(body, dict):
        raise BadRequest("request body must be a JSON object")
    unknown = set(body) - required - optional
    if unknown:
        raise BadRequest(f"unknown fields: {sorted(unknown)}")
    missing = required - set(body)
    if missing:
        raise BadRequest(f"missing fields: {sorted(missing)}")
    return body


def _str_field(body: dict, name: str) -> str:
    value = body[name]
    if not isinstance(value, str) or not value:
        raise BadRequest(f"{name} must be a non-empty string")
    return value


class ApiApp:
    def __init__(self, platform: Platform, *, test_clock: bool = False):
        self.platform = platform
        self.test_clock = test_clock

    def _route(self, method: str, path: str) -> tuple[str, dict]:
        for pattern, name in _ROUTES:
            m = pattern.match(path)
            if m is None:
                continue
            if name == "add_mechanic" and method == "GET":
                name = "list_mechanics"
            if (method, name) not in ROLE_MATRIX:
                raise MethodNotAllowed(f"{method} not allowed on {path}")
            return name, m.groupdict()
        raise NotFound(f"no route for {path}")

    def _now(self, headers: Mapping[str, str]) -> int:
        if self.test_clock:
            value = headers.get(CLOCK_HEADER)
            if value:
                try:
                    return parse_ts(value)
                except ValueError:
                    raise BadRequest(f"bad {CLOCK_HEADER} header") from None
        return self.platform.clock()

    def _principal(self, name: str, method: str, headers: Mapping[str, str]) -> Principal | None:
        roles = ROLE_MATRIX[(method, name)]
        if roles is None:
            return None
        auth = headers.get("Authorization", "")
        token = auth[7:].strip() if auth.startswith("Bearer ") else None
        return self.platform.authenticate(token, *roles)

    def handle(
        self, method: str, target: str, headers: Mapping[str, str], body: bytes = b""
    ) -> tuple[int, Any]:
        """Dispatch one request; always returns a JSON-serializable body."""
        try:
            url = urlsplit(target)
            name, params = self._route(method, url.path)
            principal = self._principal(name, method, headers)
            payload = None
            if method == "POST":
                try:
                    payload = json.loads(body.decode("utf-8")) if body.strip() else {}
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise BadJson(f"malformed JSON body: {exc}") from None
            query = parse_qs(url.query, keep_blank_values=True)
            handler: Callable = getattr(self, "_" + name)
            return handler(principal=principal, payload=payload, query=query, now=self._now(headers), **params)
        except LsgError as exc:
            return exc.status, exc.body()
        except Exception as exc:  # pragma: no cover - last-resort guard
            log.exception("unhandled error for %s %s", method, target)
            return 500, {"code": "INTERNAL", "message": str(exc), "retryable": True}

    # -- handlers ---------------------------------------------------------------

    def _healthz(self, **_):
        return 200, "ok"

    def _create_account(self, payload, now, **_):
        _fields(payload, set())
        account_id, token = self.platform.create_account(now)
        return 201, {"account_id": account_id, "owner_token": token}

    def _add_sensor(self, principal, payload, now, account_id, **_):
        self.platform.check_owner(principal, account_id)
        body = _fields(payload, {"kind", "origin"})
        desc = self.platform.register_sensor(account_id, _str_field(body, "kind"), _str_field(body, "origin"), now)
        return 201, desc.to_json()

    def _readings(self, principal, payload, now, **_):
        body = _fields(payload, {"readings"})
        return 200, {"results": self.platform.submit_as(principal, body["readings"], now)}

    def _snapshot(self, principal, query, now, account_id, **_):
        self.platform.check_owner(principal, account_id)
        return 200, self.platform.snapshot(account_id, now).to_json()

    def _events(self, principal, query, account_id, **_):
        self.platform.check_owner(principal, account_id)
        raw = query.get("since_seq", ["0"])[-1]
        try:
            since = int(raw)
        except ValueError:
            raise BadRequest("since_seq must be an integer") from None
        if since < 0:
            raise BadRequest("since_seq must be non-negative")
        events, next_seq = self.platform.events(account_id, since, EVENTS_PAGE)
        return 200, {"events": events, "next_seq": next_seq}

    def _create_game(self, payload, now, **_):
        body = _fields(payload, set(), {"name"})
        game_id, token = self.platform.register_game(body.get("name", ""), now)
        return 201, {"game_id": game_id, "game_token": token}

    def _own_game(self, principal, game_id):
        if principal.principal_id != game_id:
            raise Forbidden("game token belongs to a different game")

    def _add_mechanic(self, principal, payload, now, game_id, **_):
        self._own_game(principal, game_id)
        if not isinstance(payload, dict):
            raise BadRequest("request body must be a JSON object")
        binding = self.platform.register_mechanic(game_id, payload, now)
        return 201, binding.to_json()

    def _list_mechanics(self, principal, game_id, **_):
        self._own_game(principal, game_id)
        return 200, {"mechanics": [b.to_json() for b in self.platform.mechanics(game_id)]}

    def _gameplay_sensor(self, principal, payload, now, **_):
        body = _fields(payload, {"account_id"})
        desc = self.platform.gameplay_sensor(principal.principal_id, _str_field(body, "account_id"), now)
        return 201, desc.to_json()

    def _redeem(self, principal, payload, now, **_):
        body = _fields(payload, {"account_id", "mechanic_id", "idempotency_key"})
        rec = self.platform.redeem(
            principal.principal_id,
            _str_field(body, "account_id"),
            _str_field(body, "mechanic_id"),
            _str_field(body, "idempotency_key"),
            now,
        )
        return 200, rec.to_json()


# -- server ---------------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "lifesync/0.1"

    def setup(self):
        super().setup()
        try:
            self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass

    def _dispatch(self, method: str) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length > 0 else b""
        status, payload = self.server.app.handle(method, self.path, self.headers, body)
        data = json.dumps(payload).encode("utf-8")
        head = (
            f"HTTP/1.1 {status} {self.responses.get(status, ('',))[0]}\r\n"
            f"Content-Type: application/json; charset=utf-8\r\n"
            f"Content-Length: {len(data)}\r\n"
            f"{'Connection: close' if self.close_connection else 'Connection: keep-alive'}\r\n\r\n"
        ).encode("latin-1")
        self.wfile.write(head + data)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")

    def do_DELETE(self):
        self._dispatch("DELETE")

    def log_message(self, fmt, *args):
        log.debug("%s - " + fmt, self.address_string(), *args)


class LsgServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 256

    def __init__(self, address: tuple[str, int], app: ApiApp):
        super().__init__(address, _Handler)
        self.app = app

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


def start_background(app: ApiApp, host: str = "127.0.0.1", port: int = 0) -> LsgServer:
    """Start a server on a daemon thread; ``port=0`` picks a free port."""
    server = LsgServer((host, port), app)
    thread = threading.Thread(target=server.serve_forever, name="lsg-http", daemon=True)
    thread.start()
    server.thread = thread
    return server

"""Thin blocking HTTP client for the ``/v1`` API.

Error bodies are turned back into the same typed :class:`LsgError`
subclasses the service raised. Network failures raise :class:`TransportError`.
Connections are kept alive per thread.
"""

from __future__ import annotations

import http.client
import json
import socket
import threading
from typing import Any, Callable, Mapping
from urllib.parse import urlencode, urlsplit

from .errors import error_from_body


class TransportError(Exception):
    """The request did not produce an HTTP response (refused, reset, timed out)."""


HeaderSource = Callable[[], Mapping[str, str]] | Mapping[str, str] | None


class ApiClient:
    def __init__(self, base_url: str, *, timeout: float = 5.0, headers: HeaderSource = None):
        parts = urlsplit(base_url)
        if parts.scheme != "http" or not parts.hostname:
            raise ValueError(f"unsupported base url {base_url!r}")
        self.base_url = base_url.rstrip("/")
        self.host = parts.hostname
        self.port = parts.port or 80
        self.timeout = timeout
        self._headers = headers
        self._local = threading.local()

    def _conn(self) -> tuple[http.client.HTTPConnection, bool]:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            return conn, True
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        conn.connect()
        conn.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._local.conn = conn
        return conn, False

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    def request(self, method: str, path: str, body: Any = None, token: str | None = None) -> Any:
        headers = {"Accept": "application/json"}
        extra = self._headers() if callable(self._headers) else self._headers
        if extra:
            headers.update(extra)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        data = None
        if body is not None:
            data = json.dumps(body).encode("utf-8")
            headers["Content-Type"] = "application/json"
        for attempt in (0, 1):
            try:
                conn, reused = self._conn()
            except OSError as exc:
                raise TransportError(f"connect to {self.base_url} failed: {exc}") from exc
            try:
                conn.request(method, path, body=data, headers=headers)
                resp = conn.getresponse()
                raw = resp.read()
                status = resp.status
                if resp.will_close:
                    self.close()
                break
            except (http.client.RemoteDisconnected, BrokenPipeError, ConnectionResetError) as exc:
                self.close()
                # a kept-alive socket the server already closed: retry once on a fresh one
                if reused and attempt == 0:
                    continue
                raise TransportError(str(exc) or type(exc).__name__) from exc
            except (OSError, http.client.HTTPException) as exc:
                self.close()
                raise TransportError(str(exc) or type(exc).__name__) from exc
        try:
            payload = json.loads(raw.decode("utf-8")) if raw else None
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TransportError(f"non-JSON response ({status})") from exc
        if status >= 400:
            raise error_from_body(status, payload)
        return payload

    # -- endpoint helpers -------------------------------------------------------

    def healthz(self) -> str:
        return self.request("GET", "/v1/healthz")

    def create_account(self) -> dict:
        return self.request("POST", "/v1/accounts", {})

    def register_sensor(self, owner_token: str, account_id: str, kind: str, origin: str) -> dict:
        return self.request(
            "POST", f"/v1/accounts/{account_id}/sensors", {"kind": kind, "origin": origin}, owner_token
        )

    def submit_readings(self, api_key: str, rows: list[dict]) -> list[dict]:
        return self.request("POST", "/v1/readings", {"readings": rows}, api_key)["results"]

    def snapshot(self, token: str, account_id: str) -> dict:
        return self.request("GET", f"/v1/profiles/{account_id}/snapshot", token=token)

    def events(self, owner_token: str, account_id: str, since_seq: int = 0) -> dict:
        q = urlencode({"since_seq": since_seq})
        return self.request("GET", f"/v1/profiles/{account_id}/events?{q}", token=owner_token)

    def create_game(self, name: str = "") -> dict:
        return self.request("POST", "/v1/games", {"name": name} if name else {})

    def register_mechanic(self, game_token: str, game_id: str, binding: Mapping) -> dict:
        return self.request("POST", f"/v1/games/{game_id}/mechanics", dict(binding), game_token)

    def mechanics(self, game_token: str, game_id: str) -> list[dict]:
        return self.request("GET", f"/v1/games/{game_id}/mechanics", token=game_token)["mechanics"]

    def gameplay_sensor(self, game_token: str, account_id: str) -> dict:
        return self.request("POST", "/v1/gameplay-sensors", {"account_id": account_id}, game_token)

    def redeem(self, game_token: str, account_id: str, mechanic_id: str, idempotency_key: str) -> dict:
        body = {"account_id": account_id, "mechanic_id": mechanic_id, "idempotency_key": idempotency_key}
        return self.request("POST", "/v1/redemptions", body, game_token)

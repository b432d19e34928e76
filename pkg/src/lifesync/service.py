"""Service core: ties ingestion, composition and the ledger together behind
token-authenticated operations. The HTTP facade in :mod:`lifesync.api` is a
pure re-encoding of these calls.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping

from ._util import new_id, new_token, token_hash, wall_ms
from .composition import GAMEPLAY_KIND, RuleCatalog
from .config import ServiceConfig
from .errors import AuthFailed, BadRequest, DuplicateMechanic, Forbidden, ValidationFailed
from .ingestion import (
    RejectedRow,
    SensorDescriptor,
    SensorOrigin,
    SensorReading,
    register_sensor,
    submit_readings,
)
from .ledger import AccountState, EventKind, Ledger, ProfileSnapshot, RedemptionRecord
from .twin import MechanicBinding

log = logging.getLogger(__name__)

MAX_BATCH = 10_000
MECHANIC_FIELDS = {"mechanic_id", "dimension", "mode", "cost_mpt", "modifier_lo", "modifier_hi"}


class Role(str, Enum):
    ACCOUNT_OWNER = "ACCOUNT_OWNER"
    SENSOR = "SENSOR"
    GAME = "GAME"


@dataclass(frozen=True)
class Principal:
    role: Role
    principal_id: str
    account_id: str | None = None


class Platform:
    """All service operations. ``now`` arguments are UTC milliseconds; when
    omitted the injected ``clock`` is read."""

    def __init__(
        self,
        ledger: Ledger,
        catalog: RuleCatalog | None = None,
        *,
        punitive_overplay: bool = False,
        clock: Callable[[], int] = wall_ms,
    ):
        self.ledger = ledger
        self.catalog = catalog or RuleCatalog.default()
        self.punitive_overplay = punitive_overplay
        self.clock = clock
        self._principals: dict[str, Principal] = {}
        self._index_principals()

    @classmethod
    def from_config(cls, config: ServiceConfig) -> "Platform":
        ledger = Ledger(
            config.data_dir,
            config.twin_settings(),
            fsync=config.fsync,
            retention_hours=config.idempotency_retention_hours,
        )
        return cls(ledger, config.catalog(), punitive_overplay=config.punitive_overplay)

    def _index_principals(self) -> None:
        for acct in self.ledger.accounts():
            self._principals[acct.owner_token_sha256] = Principal(Role.ACCOUNT_OWNER, acct.account_id)
            for s in acct.sensors.values():
                self._principals[s.api_key_sha256] = Principal(Role.SENSOR, s.sensor_id, acct.account_id)
        for game in self.ledger.games():
            self._principals[game.game_token_sha256] = Principal(Role.GAME, game.game_id)
        self._principals.pop("", None)

    def _now(self, now: int | None) -> int:
        return self.clock() if now is None else now

    # -- auth ------------------------------------------------------------------

    def authenticate(self, token: str | None, *roles: Role) -> Principal:
        principal = self._principals.get(token_hash(token)) if token else None
        if principal is None or (roles and principal.role not in roles):
            raise AuthFailed("missing, unknown or wrong-role bearer token")
        return principal

    # -- accounts & sensors -------------------------------------------------------

    def create_account(self, now: int | None = None) -> tuple[str, str]:
        account_id, token = new_id(), new_token()
        self.ledger.create_stream(
            account_id,
            EventKind.ACCOUNT_CREATED,
            {"account_id": account_id, "owner_token_sha256": token_hash(token)},
            self._now(now),
        )
        self._principals[token_hash(token)] = Principal(Role.ACCOUNT_OWNER, account_id)
        return account_id, token

    def register_sensor(
        self, account_id: str, kind: str, origin: SensorOrigin | str, now: int | None = None
    ) -> SensorDescriptor:
        desc = register_sensor(self.ledger, self.catalog, account_id, kind, origin, self._now(now))
        self._principals[token_hash(desc.api_key)] = Principal(Role.SENSOR, desc.sensor_id, account_id)
        return desc

    def gameplay_sensor(self, game_id: str, account_id: str, now: int | None = None) -> SensorDescriptor:
        """Issue a session-scoped IN_GAME sensor reporting play time for a game."""
        self.ledger.game(game_id)
        desc = register_sensor(
            self.ledger, self.catalog, account_id, GAMEPLAY_KIND, SensorOrigin.IN_GAME,
            self._now(now), game_id=game_id,
        )
        self._principals[token_hash(desc.api_key)] = Principal(Role.SENSOR, desc.sensor_id, account_id)
        return desc

    # -- readings ----------------------------------------------------------------

    def submit_readings(self, api_key: str, rows: list, now: int | None = None) -> list[dict]:
        return self.submit_as(self.authenticate(api_key, Role.SENSOR), rows, now)

    def submit_as(self, principal: Principal, rows: list, now: int | None = None) -> list[dict]:
        if not isinstance(rows, list):
            raise BadRequest("readings must be a list")
        if len(rows) > MAX_BATCH:
            raise BadRequest(f"batch larger than {MAX_BATCH} rows")
        parsed: list[SensorReading | RejectedRow] = []
        for row in rows:
            try:
                reading = SensorReading.from_json(row, principal.principal_id)
            except ValidationFailed as exc:
                rid = row.get("reading_id") if isinstance(row, Mapping) else None
                parsed.append(RejectedRow(rid if isinstance(rid, str) else None, exc.message))
                continue
            if reading.sensor_id != principal.principal_id:
                raise AuthFailed("sensor token does not match reading sensor_id")
            parsed.append(reading)
        results = submit_readings(
            self.ledger, self.catalog, principal.account_id, principal.principal_id,
            parsed, self._now(now), punitive_overplay=self.punitive_overplay,
        )
        return [r.to_json() for r in results]

    def submit_reading(self, api_key: str, row: dict, now: int | None = None) -> dict:
        (result,) = self.submit_readings(api_key, [row], now)
        return result

    # -- profiles ----------------------------------------------------------------

    def snapshot(self, account_id: str, as_of: int | None = None) -> ProfileSnapshot:
        return self.ledger.get_snapshot(account_id, self._now(as_of))

    def events(self, account_id: str, since_seq: int = 0, limit: int = 1000) -> tuple[list[dict], int]:
        self.ledger.account(account_id)
        evs = self.ledger.events(account_id, since_seq, limit)
        next_seq = evs[-1].seq if evs else max(0, since_seq)
        return [e.to_json() for e in evs], next_seq

    def account_state(self, account_id: str) -> AccountState:
        return self.ledger.account(account_id)

    # -- games -------------------------------------------------------------------

    def register_game(self, name: str = "", now: int | None = None) -> tuple[str, str]:
        if not isinstance(name, str) or len(name) > 200:
            raise ValidationFailed("game name must be a string of at most 200 characters")
        game_id, token = new_id(), new_token()
        self.ledger.create_stream(
            game_id,
            EventKind.GAME_REGISTERED,
            {"game_id": game_id, "game_token_sha256": token_hash(token), "name": name},
            self._now(now),
        )
        self._principals[token_hash(token)] = Principal(Role.GAME, game_id)
        return game_id, token

    def register_mechanic(self, game_id: str, spec: Mapping, now: int | None = None) -> MechanicBinding:
        unknown = set(spec) - MECHANIC_FIELDS
        if unknown:
            raise BadRequest(f"unknown mechanic fields: {sorted(unknown)}")
        fields = {k: spec.get(k) for k in MECHANIC_FIELDS}
        if not isinstance(fields["mechanic_id"], str):
            raise ValidationFailed("mechanic_id must be a string")
        binding = MechanicBinding(game_id=game_id, **fields)
        self.ledger.game(game_id)
        with self.ledger.transaction(game_id) as txn:
            if binding.mechanic_id in txn.state.mechanics:
                raise DuplicateMechanic(f"mechanic {binding.mechanic_id} already registered")
            payload = binding.to_json()
            del payload["game_id"]
            txn.append(EventKind.MECHANIC_REGISTERED, payload, self.ledger.event_time(txn.state, self._now(now)))
        return binding

    def mechanics(self, game_id: str) -> list[MechanicBinding]:
        return list(self.ledger.game(game_id).mechanics.values())

    def redeem(
        self,
        game_id: str,
        account_id: str,
        mechanic_id: str,
        idempotency_key: str,
        now: int | None = None,
        amount_mpt: int | None = None,
    ) -> RedemptionRecord:
        return self.ledger.redeem(game_id, idempotency_key, account_id, mechanic_id, self._now(now), amount_mpt)

    def check_owner(self, principal: Principal, account_id: str) -> None:
        if principal.role is Role.ACCOUNT_OWNER and principal.principal_id != account_id:
            raise Forbidden("owner token belongs to a different account")


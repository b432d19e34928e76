"""Error types shared by every layer.

Each error carries a stable UPPER_SNAKE ``code`` that the HTTP facade maps
onto a status and an error body, so callers never need to parse messages.
"""

from __future__ import annotations

from typing import Any


class LsgError(Exception):
    code = "INTERNAL"
    status = 500
    retryable = False

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def body(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "code": self.code,
            "message": self.message,
            "retryable": self.retryable,
        }
        if self.details:
            out["details"] = self.details
        return out


def _error(name: str, code: str, status: int, retryable: bool = False) -> type[LsgError]:
    return type(name, (LsgError,), {"code": code, "status": status, "retryable": retryable})


TimeBeforeBase = _error("TimeBeforeBase", "TIME_BEFORE_BASE", 422)
Overflow = _error("Overflow", "OVERFLOW", 422)
NotPassive = _error("NotPassive", "NOT_PASSIVE", 422)
NotOnDemand = _error("NotOnDemand", "NOT_ON_DEMAND", 422)
InvalidBinding = _error("InvalidBinding", "INVALID_BINDING", 422)
UnknownAccount = _error("UnknownAccount", "UNKNOWN_ACCOUNT", 404)
UnknownGame = _error("UnknownGame", "UNKNOWN_GAME", 404)
UnknownKind = _error("UnknownKind", "UNKNOWN_KIND", 422)
UnknownMechanic = _error("UnknownMechanic", "UNKNOWN_MECHANIC", 404)
DuplicateMechanic = _error("DuplicateMechanic", "DUPLICATE_MECHANIC", 409)
AuthFailed = _error("AuthFailed", "AUTH_FAILED", 401)
Forbidden = _error("Forbidden", "FORBIDDEN", 403)
ValidationFailed = _error("ValidationFailed", "VALIDATION_FAILED", 422)
StaleReading = _error("StaleReading", "STALE_READING", 422)
KeyPayloadMismatch = _error("KeyPayloadMismatch", "KEY_PAYLOAD_MISMATCH", 409)
PriceMismatch = _error("PriceMismatch", "PRICE_MISMATCH", 422)
SequenceConflict = _error("SequenceConflict", "SEQUENCE_CONFLICT", 409, retryable=True)
InvalidTransition = _error("InvalidTransition", "INVALID_TRANSITION", 409)
AsOfBeforeLastEvent = _error("AsOfBeforeLastEvent", "AS_OF_BEFORE_LAST_EVENT", 409)
BadJson = _error("BadJson", "BAD_JSON", 400)
BadRequest = _error("BadRequest", "BAD_REQUEST", 400)
NotFound = _error("NotFound", "NOT_FOUND", 404)
MethodNotAllowed = _error("MethodNotAllowed", "METHOD_NOT_ALLOWED", 405)
StorageError = _error("StorageError", "STORAGE_ERROR", 503, retryable=True)
ConfigError = _error("ConfigError", "CONFIG_ERROR", 500)


class InsufficientPoints(LsgError):
    code = "INSUFFICIENT_POINTS"
    status = 409

    def __init__(self, effective_mpt: int, requested_mpt: int):
        super().__init__(
            f"effective balance {effective_mpt} mpt is below {requested_mpt} mpt",
            effective_mpt=effective_mpt,
            requested_mpt=requested_mpt,
        )
        self.effective_mpt = effective_mpt


class CorruptLog(LsgError):
    code = "CORRUPT_LOG"
    status = 500

    def __init__(self, seq: int, reason: str, path: str | None = None):
        super().__init__(f"log corrupt at seq {seq}: {reason}", seq=seq, path=path)
        self.seq = seq


class HarnessAbort(LsgError):
    code = "HARNESS_ABORT"


def error_from_body(status: int, body: object) -> LsgError:
    """Rebuild a typed error from an HTTP error body (client side)."""
    code = body.get("code") if isinstance(body, dict) else None
    message = body.get("message", "") if isinstance(body, dict) else str(body)
    cls = _BY_CODE.get(code)
    if cls is None or cls in (InsufficientPoints, CorruptLog):
        err = LsgError(message)
        err.code = code or "HTTP_%d" % status
        err.retryable = bool(body.get("retryable")) if isinstance(body, dict) else status >= 500
    else:
        err = cls(message)
    err.status = status
    if isinstance(body, dict) and isinstance(body.get("details"), dict):
        err.details = body["details"]
    return err


_BY_CODE = {
    cls.code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, LsgError) and cls is not LsgError
}

"""LifeSync-Games platform core.

Real-world sensor readings become decaying per-dimension point balances in an
event-sourced ledger; games read normalized scores through an HTTP API and a
never-blocking SDK, and spend points on server-priced mechanics.
"""

from .composition import ConversionRule, RuleCatalog, RuleMode
from .errors import LsgError
from .ledger import Ledger, LedgerEvent, ProfileSnapshot, RedemptionRecord
from .sdk import Freshness, SdkConfig, Session, SessionStatus, SpendResult, connect
from .service import Platform
from .twin import (
    Dimension,
    DimensionBalance,
    MechanicBinding,
    MechanicMode,
    TwinSettings,
    attribute_score,
    effective_balance,
    mechanic_modifier,
)

__version__ = "0.1.0"

__all__ = [
    "ConversionRule",
    "Dimension",
    "DimensionBalance",
    "Freshness",
    "Ledger",
    "LedgerEvent",
    "LsgError",
    "MechanicBinding",
    "MechanicMode",
    "Platform",
    "ProfileSnapshot",
    "RedemptionRecord",
    "RuleCatalog",
    "RuleMode",
    "SdkConfig",
    "Session",
    "SessionStatus",
    "SpendResult",
    "TwinSettings",
    "attribute_score",
    "connect",
    "effective_balance",
    "mechanic_modifier",
]

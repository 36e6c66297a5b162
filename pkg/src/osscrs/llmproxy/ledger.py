"""Per-CRS API keys, dollar budgets and usage records.

Money is ``Decimal`` rounded half-up to the cent per request. Admission
checks ``spent < limit`` at arrival and the real cost is posted when the
upstream answers, so a ledger can overshoot its limit by at most the cost
of the requests in flight when it crossed.
"""

from __future__ import annotations

import secrets
import threading
from collections import defaultdict
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

CENT = Decimal("0.01")
PER_MILLION = Decimal(1_000_000)


def usage_cost(prompt_tokens: int, completion_tokens: int, price_in: Decimal, price_out: Decimal) -> Decimal:
    """Dollar cost of one request; prices are per million tokens."""
    raw = (Decimal(prompt_tokens) * Decimal(price_in) + Decimal(completion_tokens) * Decimal(price_out)) / PER_MILLION
    return raw.quantize(CENT, rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class UsageRecord:
    crs_name: str
    alias: str
    provider_model: str
    prompt_tokens: int
    completion_tokens: int
    cost: Decimal
    timestamp: float
    status: str = "ok"


class BudgetLedger:
    def __init__(self, crs_name: str, limit: Decimal, enforce: bool = True):
        self.crs_name = crs_name
        self.limit = Decimal(limit).quantize(CENT)
        self.enforce = enforce
        self._spent = Decimal("0.00")
        self._records: list[UsageRecord] = []
        self._lock = threading.Lock()
        self.admitted = 0
        self.rejected = 0

    @property
    def spent(self) -> Decimal:
        with self._lock:
            return self._spent

    @property
    def records(self) -> tuple[UsageRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def try_admit(self) -> bool:
        with self._lock:
            if self.enforce and self._spent >= self.limit:
                self.rejected += 1
                return False
            self.admitted += 1
            return True

    def post(self, record: UsageRecord) -> None:
        if record.cost < 0:
            raise ValueError("negative cost")
        with self._lock:
            self._records.append(record)
            self._spent += record.cost

    def snapshot(self) -> tuple[Decimal, int, int, tuple[UsageRecord, ...]]:
        with self._lock:
            return self._spent, self.admitted, self.rejected, tuple(self._records)


@dataclass(frozen=True)
class ApiKey:
    token: str
    crs_name: str
    ledger: BudgetLedger


def new_token() -> str:
    return "sk-crs-" + secrets.token_urlsafe(32)


def issue_keys(budgets, enforce: bool = True) -> dict[str, ApiKey]:
    """One key and ledger per CRS.

    ``budgets`` is a ``ValidatedPlan`` or a mapping of CRS name to budget
    (``None`` meaning no budget, i.e. $0).
    """
    if hasattr(budgets, "crses"):
        budgets = {c.name: c.deployment.llm_budget for c in budgets.crses}
    keys: dict[str, ApiKey] = {}
    used = set()
    for name, budget in budgets.items():
        token = new_token()
        while token in used:
            token = new_token()
        used.add(token)
        limit = Decimal("0.00") if budget is None else Decimal(budget)
        keys[name] = ApiKey(token, name, BudgetLedger(name, limit, enforce))
    return keys


def usage_report(ledgers) -> dict:
    """Per-CRS totals with a per-alias breakdown. Accepts ledgers or keys."""
    report = {}
    for item in ledgers:
        ledger = item.ledger if isinstance(item, ApiKey) else item
        spent, admitted, rejected, records = ledger.snapshot()
        per_alias: dict[str, dict] = defaultdict(lambda: {
            "requests": 0, "prompt_tokens": 0, "completion_tokens": 0, "cost": Decimal("0.00")})
        for r in records:
            row = per_alias[r.alias]
            row["requests"] += 1
            row["prompt_tokens"] += r.prompt_tokens
            row["completion_tokens"] += r.completion_tokens
            row["cost"] += r.cost
        report[ledger.crs_name] = {
            "requests": len(records),
            "admitted": admitted,
            "rejected": rejected,
            "prompt_tokens": sum(r.prompt_tokens for r in records),
            "completion_tokens": sum(r.completion_tokens for r in records),
            "spent": str(spent),
            "limit": str(ledger.limit),
            "per_alias": {a: {**row, "cost": str(row["cost"])} for a, row in sorted(per_alias.items())},
        }
    return report

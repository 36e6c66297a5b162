from osscrs.llmproxy.ledger import (
    ApiKey,
    BudgetLedger,
    UsageRecord,
    issue_keys,
    usage_cost,
    usage_report,
)
from osscrs.llmproxy.server import LlmProxy, ProxyCore, UpstreamError

__all__ = [
    "ApiKey", "BudgetLedger", "LlmProxy", "ProxyCore", "UpstreamError", "UsageRecord",
    "issue_keys", "usage_cost", "usage_report",
]

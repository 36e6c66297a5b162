"""OpenAI-compatible completion proxy with model aliasing and per-CRS budgets."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from decimal import Decimal
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

from osscrs.config import LlmSettings, ModelRoute
from osscrs.llmproxy.ledger import ApiKey, UsageRecord, usage_cost, usage_report

log = logging.getLogger(__name__)

COMPLETIONS_PATHS = ("/v1/chat/completions", "/chat/completions")

# (url, body, headers, timeout) -> (status, body)
Forwarder = Callable[[str, bytes, dict, float], tuple[int, bytes]]


class UpstreamError(Exception):
    pass


def urllib_forward(url: str, body: bytes, headers: dict, timeout: float) -> tuple[int, bytes]:
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()
    except (urllib.error.URLError, OSError) as exc:
        raise UpstreamError(str(exc)) from None


def _error(status: int, type_: str, message: str, **extra) -> tuple[int, bytes]:
    body = {"error": {"type": type_, "message": message, **extra}}
    return status, json.dumps(body).encode()


class ProxyCore:
    """Request handling independent of the HTTP layer."""

    def __init__(self, settings: LlmSettings, keys: dict[str, ApiKey],
                 forward: Forwarder = urllib_forward, upstream_timeout: float = 600.0):
        if settings.mode not in ("internal", "external"):
            raise ValueError(f"proxy cannot run in {settings.mode!r} mode")
        self.settings = settings
        self.keys = keys
        self._by_token = {k.token: k for k in keys.values()}
        self.forward = forward
        self.timeout = upstream_timeout

    @property
    def mode(self) -> str:
        return self.settings.mode

    def route_model(self, alias: str) -> ModelRoute | None:
        return self.settings.route(alias)

    def authenticate(self, header: str | None) -> ApiKey | None:
        if not header or not header.startswith("Bearer "):
            return None
        return self._by_token.get(header[len("Bearer "):].strip())

    def handle_completion(self, auth_header: str | None, body: bytes) -> tuple[int, bytes]:
        key = self.authenticate(auth_header)
        if key is None:
            return _error(401, "invalid_api_key", "missing or unknown API key")
        try:
            request = json.loads(body)
            if not isinstance(request, dict):
                raise ValueError
        except ValueError:
            return _error(400, "invalid_request", "body must be a JSON object")
        alias = request.get("model")
        if not isinstance(alias, str) or not alias:
            return _error(400, "invalid_request", "model is required")
        if request.get("stream"):
            return _error(400, "unsupported", "streaming responses are not supported")
        if self.mode == "external":
            return self.forward_external(key, alias, body)

        route = self.route_model(alias)
        if route is None:
            return _error(404, "model_not_found", f"model {alias!r} not found")
        ledger = key.ledger
        if not ledger.try_admit():
            return _error(402, "budget_exhausted", f"LLM budget of CRS {key.crs_name!r} is exhausted",
                          crs=key.crs_name, spent=str(ledger.spent), limit=str(ledger.limit))
        request["model"] = route.provider_model
        headers = {"Content-Type": "application/json"}
        credential = os.environ.get(route.credential_ref, "") if route.credential_ref else ""
        if credential:
            headers["Authorization"] = f"Bearer {credential}"
        url = route.endpoint.rstrip("/") + "/chat/completions"
        try:
            status, payload = self.forward(url, json.dumps(request).encode(), headers, self.timeout)
        except UpstreamError as exc:
            self._post(key, route.alias, route.provider_model, 0, 0, Decimal(0), "upstream_error")
            return _error(502, "upstream_error", f"upstream request failed: {exc}")
        if status >= 500:
            self._post(key, route.alias, route.provider_model, 0, 0, Decimal(0), "upstream_error")
            return _error(502, "upstream_error", f"upstream returned {status}")
        prompt, completion = _usage(payload) if status < 400 else (0, 0)
        cost = usage_cost(prompt, completion, route.price_in, route.price_out)
        self._post(key, route.alias, route.provider_model, prompt, completion, cost,
                   "ok" if status < 400 else f"upstream_{status}")
        return status, payload

    def forward_external(self, key: ApiKey, alias: str, body: bytes) -> tuple[int, bytes]:
        """Relay the request verbatim to the operator's proxy; usage is recorded, never enforced."""
        key.ledger.try_admit()
        headers = {"Content-Type": "application/json"}
        if self.settings.external_key:
            headers["Authorization"] = f"Bearer {self.settings.external_key}"
        url = self.settings.external_endpoint.rstrip("/") + "/chat/completions"
        route = self.route_model(alias)
        provider = route.provider_model if route else alias
        try:
            status, payload = self.forward(url, body, headers, self.timeout)
        except UpstreamError as exc:
            self._post(key, alias, provider, 0, 0, Decimal(0), "upstream_error")
            return _error(502, "upstream_error", f"external endpoint unreachable: {exc}")
        prompt, completion = _usage(payload) if status < 400 else (0, 0)
        cost = usage_cost(prompt, completion, route.price_in, route.price_out) if route else Decimal("0.00")
        self._post(key, alias, provider, prompt, completion, cost, "ok" if status < 400 else f"upstream_{status}")
        return status, payload

    def _post(self, key, alias, provider, prompt, completion, cost, status) -> None:
        key.ledger.post(UsageRecord(key.crs_name, alias, provider, prompt, completion,
                                    Decimal(cost).quantize(Decimal("0.01")), time.time(), status))

    def models(self) -> dict:
        return {"object": "list", "data": [
            {"id": r.alias, "object": "model", "owned_by": "oss-crs"} for r in self.settings.model_routes]}

    def usage_report(self) -> dict:
        return usage_report(self.keys.values())


def _usage(payload: bytes) -> tuple[int, int]:
    try:
        usage = json.loads(payload).get("usage") or {}
        return int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))
    except (ValueError, AttributeError, TypeError):
        return 0, 0


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 256
    allow_reuse_address = True


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "oss-crs-llm-proxy"

    @property
    def core(self) -> ProxyCore:
        return self.server.core  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):
        log.debug("llm-proxy: " + fmt, *args)

    def _send(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        if self.path.split("?")[0] not in COMPLETIONS_PATHS:
            self._send(*_error(404, "not_found", f"no route for {self.path}"))
            return
        try:
            status, payload = self.core.handle_completion(self.headers.get("Authorization"), body)
        except Exception as exc:  # the proxy must keep serving other CRSs
            log.exception("llm proxy request failed")
            status, payload = _error(500, "internal_error", str(exc))
        self._send(status, payload)

    def do_GET(self):
        path = self.path.split("?")[0]
        if path in ("/health", "/healthz"):
            self._send(200, b'{"status":"ok"}')
        elif path in ("/v1/models", "/models"):
            if self.core.authenticate(self.headers.get("Authorization")) is None:
                self._send(*_error(401, "invalid_api_key", "missing or unknown API key"))
            else:
                self._send(200, json.dumps(self.core.models()).encode())
        else:
            self._send(*_error(404, "not_found", f"no route for {self.path}"))


class LlmProxy:
    """The proxy service; ``start`` returns the bound port."""

    def __init__(self, core: ProxyCore):
        self.core = core
        self._server: _Server | None = None
        self._thread: threading.Thread | None = None

    def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        self._server = _Server((host, port), _Handler)
        self._server.core = self.core  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever, args=(0.05,), name="llm-proxy",
                                        daemon=True)
        self._thread.start()
        return self.port

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def alive(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._thread.join(5)
            self._server = None

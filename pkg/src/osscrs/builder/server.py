"""HTTP front end for a :class:`BuilderService`.

    POST /patch-build   body: unified diff                      -> build result
    POST /run-pov       multipart: pov (file), harness, build   -> pov result
    POST /run-test      JSON {"build": ref} or empty body       -> test result
    GET  /health
"""

from __future__ import annotations

import json
import logging
import threading
from email.parser import BytesParser
from email.policy import HTTP
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from osscrs.builder.service import BuilderError, BuilderService, UnknownBuild

log = logging.getLogger(__name__)


def parse_multipart(content_type: str, body: bytes) -> dict[str, bytes]:
    msg = BytesParser(policy=HTTP).parsebytes(
        b"Content-Type: " + content_type.encode() + b"\r\n\r\n" + body)
    if not msg.is_multipart():
        raise ValueError("expected multipart/form-data")
    fields = {}
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if name:
            fields[name] = part.get_payload(decode=True) or b""
    return fields


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 64


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("builder: " + fmt, *args)

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path.split("?")[0] == "/health":
            self._send(200, {"status": "ok"})
        else:
            self._send(404, {"error": f"no route for {self.path}"})

    def do_POST(self):
        service: BuilderService = self.server.service  # type: ignore[attr-defined]
        body = self.rfile.read(int(self.headers.get("Content-Length") or 0))
        path = self.path.split("?")[0]
        try:
            if path == "/patch-build":
                result = service.apply_patch_build(body.decode(errors="replace"))
            elif path == "/run-pov":
                fields = parse_multipart(self.headers.get("Content-Type", ""), body)
                if "pov" not in fields or "harness" not in fields:
                    raise ValueError("run-pov needs 'pov' and 'harness' fields")
                build = fields.get("build", b"").decode() or None
                result = service.run_pov(build, fields["pov"], fields["harness"].decode())
            elif path == "/run-test":
                request = json.loads(body) if body.strip() else {}
                result = service.run_test(request.get("build"))
            else:
                self._send(404, {"error": f"no route for {self.path}"})
                return
        except UnknownBuild as exc:
            self._send(404, {"error": str(exc)})
        except (ValueError, BuilderError) as exc:
            self._send(400, {"error": str(exc)})
        except Exception as exc:
            log.exception("builder request failed")
            self._send(500, {"error": str(exc)})
        else:
            self._send(200, result.to_json())


class BuilderServer:
    def __init__(self, service: BuilderService):
        self.service = service
        self._server: _Server | None = None
        self._thread: threading.Thread | None = None

    def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        self._server = _Server((host, port), _Handler)
        self._server.service = self.service  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever, args=(0.05,),
                                        name=f"builder-{self.service.crs_name}", daemon=True)
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

"""A canned OpenAI-compatible upstream for offline budget and routing tests.

    python -m osscrs.llmproxy.stub --port 8099 --prompt-tokens 1000 --completion-tokens 0
"""

from __future__ import annotations

import argparse
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class StubUpstream:
    def __init__(self, prompt_tokens: int = 10, completion_tokens: int = 5,
                 reply: str = "stub reply", status: int = 200, delay: float = 0.0):
        self.prompt_tokens = prompt_tokens
        self.completion_tokens = completion_tokens
        self.reply = reply
        self.status = status
        self.delay = delay
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        self._server = None

    def response_body(self, model: str) -> bytes:
        return json.dumps({
            "id": "chatcmpl-stub",
            "object": "chat.completion",
            "model": model,
            "choices": [{"index": 0, "finish_reason": "stop",
                         "message": {"role": "assistant", "content": self.reply}}],
            "usage": {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens,
                      "total_tokens": self.prompt_tokens + self.completion_tokens},
        }).encode()

    def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        stub = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length") or 0))
                try:
                    req = json.loads(body)
                except ValueError:
                    req = {}
                with stub._lock:
                    stub.requests.append({"path": self.path, "body": req,
                                          "authorization": self.headers.get("Authorization")})
                if stub.delay:
                    time.sleep(stub.delay)
                payload = stub.response_body(str(req.get("model", "")))
                self.send_response(stub.status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        class Server(ThreadingHTTPServer):
            daemon_threads = True
            request_queue_size = 256

        self._server = Server((host, port), Handler)
        threading.Thread(target=self._server.serve_forever, args=(0.05,), daemon=True).start()
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1"

    def stop(self) -> None:
        if self._server:
            self._server.shutdown()
            self._server.server_close()
            self._server = None


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8099)
    ap.add_argument("--prompt-tokens", type=int, default=10)
    ap.add_argument("--completion-tokens", type=int, default=5)
    args = ap.parse_args(argv)
    stub = StubUpstream(args.prompt_tokens, args.completion_tokens)
    port = stub.start(args.host, args.port)
    print(f"stub upstream on http://{args.host}:{port}/v1", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        stub.stop()


if __name__ == "__main__":
    main()

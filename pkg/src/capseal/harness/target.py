"""Local loopback HTTP target used by every system in the comparison.

Behavior:
  * the authorized path requires `Authorization: Bearer <expected>`;
  * request headers come back as `x-echo-<name>` response headers and inside
    the JSON body (so redaction is observable end to end);
  * any other path returns 403, and the target counts the attempt as an
    authenticated out-of-scope event when the request carried the valid
    credential (a 403 is still not an unauthorized *success*).
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

AUTHORIZED_PATH = "/v1/chat/completions"


class TargetState:
    def __init__(self, expected_bearer: str,
                 authorized_path: str = AUTHORIZED_PATH):
        self.expected_bearer = expected_bearer
        self.authorized_path = authorized_path
        self.unauthorized_attempts = 0  # authenticated, out-of-scope
        self.unauthorized_successes = 0
        self.requests = 0
        self.lock = threading.Lock()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    state: TargetState = None  # set per server class

    def log_message(self, *args):
        pass

    def _respond(self, status: int, body: dict):
        echoed = {f"x-echo-{k.lower()}": v for k, v in self.headers.items()}
        body = dict(body)
        body["echo_headers"] = echoed
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        for name, value in echoed.items():
            self.send_header(name, value)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _handle(self):
        state = self.state
        with state.lock:
            state.requests += 1
        length = int(self.headers.get("Content-Length") or 0)
        self.rfile.read(length) if length else b""
        auth = self.headers.get("Authorization", "")
        authenticated = auth == f"Bearer {state.expected_bearer}"
        if self.path == state.authorized_path:
            if not authenticated:
                self._respond(401, {"ok": False, "error": "unauthorized"})
                return
            self._respond(200, {"ok": True})
            return
        if authenticated:
            with state.lock:
                state.unauthorized_attempts += 1
        self._respond(403, {"ok": False, "error": "forbidden"})

    do_GET = do_POST = do_PUT = do_DELETE = _handle


class HttpTarget:
    def __init__(self, expected_bearer: str, port: int = 0,
                 authorized_path: str = AUTHORIZED_PATH):
        self.state = TargetState(expected_bearer, authorized_path)
        handler = type("Handler", (_Handler,), {"state": self.state})
        self.server = ThreadingHTTPServer(("127.0.0.1", port), handler)
        self.port = self.server.server_address[1]
        self._thread: threading.Thread | None = None

    def start(self) -> "HttpTarget":
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()

    def __enter__(self) -> "HttpTarget":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

"""Stub diffusion service speaking the HTTP backend wire protocol.

Serves the procedural mock generator over POST /generate so the HTTP client
can be exercised end to end without a real diffusion deployment. Run with
``python -m datasetclone.stub_server --port 8675``; failure injection
(``fail_first``) makes the first N requests return 503 for retry tests.
"""

from __future__ import annotations

import argparse
import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .generation import mock_generate
from .prompts import GenParams


class StubState:
    def __init__(self, fail_first: int = 0, token: str = ""):
        self.fail_first = fail_first
        self.token = token
        self.requests_seen = 0
        self.lock = threading.Lock()

    def should_fail(self) -> bool:
        with self.lock:
            self.requests_seen += 1
            return self.requests_seen <= self.fail_first


class StubHandler(BaseHTTPRequestHandler):
    state: StubState

    def log_message(self, fmt, *args):
        pass

    def _send_json(self, code: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        if self.path != "/generate":
            self._send_json(404, {"error": "not_found"})
            return
        if self.state.token:
            if self.headers.get("Authorization") != f"Bearer {self.state.token}":
                self._send_json(401, {"error": "unauthorized"})
                return
        if self.state.should_fail():
            self._send_json(503, {"error": "try_again"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        try:
            body = json.loads(self.rfile.read(length))
            params = GenParams(
                steps=body["num_inference_steps"],
                guidance=body["guidance_scale"],
                width=body["width"],
                height=body["height"],
            )
            result = mock_generate(body["prompt"], body["seed"], params)
        except (KeyError, TypeError, ValueError) as exc:
            self._send_json(400, {"error": f"bad_request: {exc}"})
            return
        self._send_json(
            200,
            {
                "image_base64": base64.b64encode(result.png_bytes).decode("ascii"),
                "safety_flagged": result.safety_flagged,
            },
        )


def make_server(port: int = 0, fail_first: int = 0, token: str = "") -> ThreadingHTTPServer:
    handler = type("BoundStubHandler", (StubHandler,), {"state": StubState(fail_first, token)})
    return ThreadingHTTPServer(("127.0.0.1", port), handler)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Stub text-to-image service (mock generator)")
    parser.add_argument("--port", type=int, default=8675)
    parser.add_argument("--fail-first", type=int, default=0, help="return 503 for the first N requests")
    parser.add_argument("--token", default="", help="require this bearer token when set")
    args = parser.parse_args(argv)
    server = make_server(args.port, args.fail_first, args.token)
    print(f"stub backend listening on http://127.0.0.1:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

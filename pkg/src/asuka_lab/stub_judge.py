"""A local stand-in for the VLM judge endpoint.

Serves ``POST /v1/chat/completions``.  The reply for each request is chosen
by ``reply_fn(item_id)`` where ``item_id`` comes from the ``X-Request-Id``
header.  The server records the peak number of concurrent requests and can
inject transient 503s.

    python -m asuka_lab.stub_judge --mode mixed --port 8011
"""

from __future__ import annotations

import argparse
import json
import threading
import time
import zlib
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

REPLIES = {
    "yes": "The masked region now contains a lamp that the context does not support.\nANSWER: YES",
    "no": "The fill continues the surrounding texture.\nANSWER: NO",
    "garbage": "I am not sure what to say about this picture.",
}


def mixed_reply(item_id: str) -> str:
    """Deterministic yes/no/garbage rotation keyed on the item id."""
    return ("yes", "no", "garbage")[zlib.crc32(str(item_id).encode()) % 3]


class StubJudgeServer:
    def __init__(self, reply_fn: Callable[[str], str] = lambda _id: "yes", delay_s: float = 0.0,
                 fail_first: int = 0, host: str = "127.0.0.1", port: int = 0):
        self.reply_fn = reply_fn
        self.delay_s = delay_s
        self.fail_first = fail_first  # number of 503s per item before answering
        self.in_flight = 0
        self.max_in_flight = 0
        self.requests = 0
        self.attempts: dict[str, int] = {}
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer((host, port), self._handler())
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1"

    def _handler(self):
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                item_id = self.headers.get("X-Request-Id", "")
                with stub._lock:
                    stub.in_flight += 1
                    stub.requests += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub.in_flight)
                    n = stub.attempts.get(item_id, 0)
                    stub.attempts[item_id] = n + 1
                try:
                    if stub.delay_s:
                        time.sleep(stub.delay_s)
                    if not self.path.endswith("/chat/completions"):
                        return self._send(404, {"error": "not found"})
                    try:
                        json.loads(body)
                    except ValueError:
                        return self._send(400, {"error": "bad json"})
                    if n < stub.fail_first:
                        return self._send(503, {"error": "busy"})
                    key = stub.reply_fn(item_id)
                    text = REPLIES.get(key, key)
                    self._send(200, {"id": f"stub-{item_id}", "object": "chat.completion",
                                     "choices": [{"index": 0, "message": {"role": "assistant", "content": text},
                                                  "finish_reason": "stop"}]})
                finally:
                    with stub._lock:
                        stub.in_flight -= 1

            def _send(self, code, obj):
                data = json.dumps(obj).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        return Handler

    def start(self) -> "StubJudgeServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mode", choices=["yes", "no", "garbage", "mixed"], default="mixed")
    ap.add_argument("--port", type=int, default=8011)
    ap.add_argument("--delay", type=float, default=0.0)
    args = ap.parse_args(argv)
    fn = mixed_reply if args.mode == "mixed" else (lambda _id, m=args.mode: m)
    server = StubJudgeServer(fn, args.delay, port=args.port)
    print(f"stub judge listening on {server.base_url}", flush=True)
    try:
        server._server.serve_forever()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()

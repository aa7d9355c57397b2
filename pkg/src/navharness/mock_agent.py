"""Local HTTP stand-in for a served navigation model (chat-completion shaped)."""

from __future__ import annotations

import errno
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

from .action_lang import format_action
from .episode import OracleAgent, OracleConfig, oracle_next_action
from .errors import PortInUse, Unreachable
from .scene import Scene


class _Responder:
    def __init__(self, responses: Sequence[str] | None, scene: Scene | None, oracle_cfg: OracleConfig):
        self.responses = list(responses or [])
        self.calls = 0
        self.lock = threading.Lock()
        self.oracle = OracleAgent(scene, oracle_cfg) if scene is not None else None

    def reply(self, body: dict) -> str:
        pose = (body.get("metadata") or {}).get("pose")
        if self.oracle is not None and pose is not None:
            o = self.oracle
            with self.lock:
                try:
                    action = oracle_next_action(
                        o.grid, (pose["x"], pose["y"], pose["yaw"]), o.scene.goal, o.cfg, o.plan_grid
                    )
                except Unreachable:
                    return "I cannot find a way to the goal."
            return format_action(action)
        with self.lock:
            k = self.calls
            self.calls += 1
        return self.responses[k] if k < len(self.responses) else "stop"


def _check_request(body) -> str | None:
    if not isinstance(body, dict):
        return "request body must be a JSON object"
    msgs = body.get("messages")
    if not isinstance(msgs, list) or not msgs:
        return "messages must be a non-empty list"
    for m in msgs:
        if not isinstance(m, dict) or "content" not in m:
            return "every message needs a content field"
    meta = body.get("metadata")
    if meta is not None and not isinstance(meta, dict):
        return "metadata must be an object"
    pose = (meta or {}).get("pose")
    if pose is not None and not (isinstance(pose, dict) and all(k in pose for k in ("x", "y", "yaw"))):
        return "metadata.pose needs x, y and yaw"
    return None


def _handler(responder: _Responder):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args) -> None:  # keep test output quiet
            pass

        def _send(self, status: int, payload: dict) -> None:
            data = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length)
            try:
                body = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError):
                self._send(400, {"error": {"type": "bad_request", "message": "body is not valid JSON"}})
                return
            problem = _check_request(body)
            if problem:
                self._send(400, {"error": {"type": "bad_request", "message": problem}})
                return
            text = responder.reply(body)
            self._send(
                200,
                {
                    "object": "chat.completion",
                    "choices": [
                        {"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
                    ],
                },
            )

    return Handler


class MockAgentServer:
    """Threaded server; ``port=0`` picks a free port."""

    def __init__(
        self,
        port: int = 0,
        responses: Sequence[str] | None = None,
        scene: Scene | None = None,
        host: str = "127.0.0.1",
        oracle_cfg: OracleConfig = OracleConfig(),
    ):
        self.responder = _Responder(responses, scene, oracle_cfg)
        try:
            self.httpd = ThreadingHTTPServer((host, port), _handler(self.responder))
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"port {port} is already in use") from None
            raise
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    @property
    def url(self) -> str:
        host = self.httpd.server_address[0]
        return f"http://{host}:{self.port}/v1/chat/completions"

    def start(self) -> MockAgentServer:
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> MockAgentServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

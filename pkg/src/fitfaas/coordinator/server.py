"""HTTP + JSON front end for :class:`Broker` on the standard-library threading server."""

from __future__ import annotations

import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .. import errors
from .broker import Broker

log = logging.getLogger(__name__)

# request bodies carry batches of payloads, each up to the per-payload limit
MAX_BODY = 512 * 1024 * 1024

_STATUS = {
    "UnknownFunction": 404,
    "UnknownEndpoint": 404,
    "UnknownTask": 404,
    "PayloadTooLarge": 413,
    "StaleLease": 409,
    "BadRequest": 400,
}

_ID = r"([0-9a-zA-Z_-]+)"
_ROUTES = [
    ("GET", r"/api/health", "health"),
    ("POST", r"/api/functions", "register_function"),
    ("POST", r"/api/endpoints", "register_endpoint"),
    ("GET", r"/api/endpoints", "list_endpoints"),
    ("GET", rf"/api/endpoints/{_ID}", "endpoint_status"),
    ("POST", rf"/api/endpoints/{_ID}/heartbeat", "heartbeat"),
    ("POST", rf"/api/endpoints/{_ID}/lease", "lease"),
    ("POST", r"/api/tasks", "submit"),
    ("GET", rf"/api/tasks/{_ID}", "poll"),
    ("POST", rf"/api/tasks/{_ID}/running", "running"),
    ("POST", rf"/api/tasks/{_ID}/result", "result"),
]
_COMPILED = [(m, re.compile(p + r"/?"), name) for m, p, name in _ROUTES]


def _field(body, key, kind, default=...):
    if key not in body:
        if default is ...:
            raise errors.BadRequest(f"missing field {key!r}")
        return default
    value = body[key]
    if kind is not None and not isinstance(value, kind):
        raise errors.BadRequest(f"field {key!r} has the wrong type")
    return value


class _Handlers:
    def __init__(self, broker: Broker):
        self.broker = broker

    def health(self, body):
        return {"ok": True, "tasks": self.broker.snapshot()}

    def register_function(self, body):
        return {"function_id": self.broker.register_function(_field(body, "name", str))}

    def register_endpoint(self, body):
        eid = self.broker.register_endpoint(_field(body, "name", str), _field(body, "description", str, ""))
        return {"endpoint_id": eid}

    def list_endpoints(self, body):
        return {"endpoints": self.broker.list_endpoints()}

    def endpoint_status(self, body, endpoint_id):
        return self.broker.endpoint_status(endpoint_id)

    def heartbeat(self, body, endpoint_id):
        capacity = _field(body, "capacity", int, 0)
        self.broker.heartbeat(endpoint_id, capacity)
        return {}

    def lease(self, body, endpoint_id):
        max_n = _field(body, "max_n", int, 1)
        if max_n < 0:
            raise errors.BadRequest("max_n must be non-negative")
        return {"tasks": self.broker.lease_tasks(endpoint_id, max_n)}

    def submit(self, body):
        ids = self.broker.submit_tasks(
            _field(body, "function_id", str), _field(body, "endpoint_id", str), _field(body, "payloads", list)
        )
        return {"task_ids": ids}

    def poll(self, body, task_id):
        return self.broker.poll_result(task_id)

    def running(self, body, task_id):
        return self.broker.mark_running(task_id, _field(body, "lease_id", str, None))

    def result(self, body, task_id):
        error = _field(body, "error", dict, None)
        if error is None and "success" not in body:
            raise errors.BadRequest("one of 'success' or 'error' is required")
        status = self.broker.post_result(
            task_id, result=body.get("success"), error=error, lease_id=_field(body, "lease_id", str, None)
        )
        return {"recorded_status": status}


def _make_handler(handlers: _Handlers):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "fitfaas-coordinator"

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status, doc):
            data = json.dumps(doc, separators=(",", ":"), allow_nan=False).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _read_body(self):
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                raise errors.PayloadTooLarge(f"request body of {length} bytes")
            raw = self.rfile.read(length) if length else b""
            if not raw:
                return {}
            try:
                body = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise errors.BadRequest(f"body is not JSON: {exc}") from None
            if not isinstance(body, dict):
                raise errors.BadRequest("body must be a JSON object")
            return body

        def _dispatch(self, method):
            path = self.path.split("?", 1)[0]
            try:
                body = self._read_body()
                for m, pattern, name in _COMPILED:
                    match = pattern.fullmatch(path)
                    if match and m == method:
                        self._send(200, getattr(handlers, name)(body, *match.groups()))
                        return
                self._send(404, {"error": {"code": "NotFound", "message": f"{method} {path}", "retriable": False}})
            except errors.FitFaaSError as exc:
                self._send(_STATUS.get(exc.code, 500), {"error": exc.to_report()})
            except Exception as exc:  # noqa: BLE001 - report, keep serving
                log.exception("handler failure")
                report = errors.InternalError(str(exc)).to_report()
                self._send(500, {"error": report})

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

    return Handler


class CoordinatorServer:
    """Serve a broker over HTTP.

    ``port=0`` picks a free port; :attr:`url` reports the bound address.
    """

    def __init__(self, broker: Broker | None = None, host="127.0.0.1", port=0):
        self.broker = broker or Broker()
        self.httpd = ThreadingHTTPServer((host, port), _make_handler(_Handlers(self.broker)))
        self.httpd.daemon_threads = True
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "CoordinatorServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="coordinator", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self.httpd.serve_forever()

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.broker.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

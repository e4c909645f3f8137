"""Client for the coordinator wire protocol.

Broker errors come back as the same exception classes raised in-process;
connection failures raise :class:`CoordinatorUnreachable`.
"""

from __future__ import annotations

import threading

import requests

from .. import errors


class CoordinatorClient:
    """Thin JSON client. Safe to share across threads (one session per thread)."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = self._local.session = requests.Session()
        return session

    def _call(self, method, path, body=None):
        try:
            resp = self._session().request(method, self.url + path, json=body, timeout=self.timeout)
        except requests.RequestException as exc:
            raise errors.CoordinatorUnreachable(f"{self.url}: {exc}") from None
        try:
            doc = resp.json()
        except ValueError:
            raise errors.CoordinatorUnreachable(f"{self.url}: non-JSON response ({resp.status_code})") from None
        if resp.status_code != 200:
            report = doc.get("error", {}) if isinstance(doc, dict) else {}
            raise errors.from_code(report.get("code", "InternalError"), report.get("message", ""))
        return doc

    def health(self) -> dict:
        return self._call("GET", "/api/health")

    def register_function(self, name: str) -> str:
        return self._call("POST", "/api/functions", {"name": name})["function_id"]

    def register_endpoint(self, name: str, description: str = "") -> str:
        return self._call("POST", "/api/endpoints", {"name": name, "description": description})["endpoint_id"]

    def list_endpoints(self) -> list[dict]:
        return self._call("GET", "/api/endpoints")["endpoints"]

    def endpoint_status(self, endpoint_id: str) -> dict:
        return self._call("GET", f"/api/endpoints/{endpoint_id}")

    def heartbeat(self, endpoint_id: str, capacity: int) -> None:
        self._call("POST", f"/api/endpoints/{endpoint_id}/heartbeat", {"capacity": int(capacity)})

    def submit_tasks(self, function_id: str, endpoint_id: str, payloads: list) -> list[str]:
        body = {"function_id": function_id, "endpoint_id": endpoint_id, "payloads": list(payloads)}
        return self._call("POST", "/api/tasks", body)["task_ids"]

    def poll_result(self, task_id: str) -> dict:
        return self._call("GET", f"/api/tasks/{task_id}")

    def lease_tasks(self, endpoint_id: str, max_n: int) -> list[dict]:
        return self._call("POST", f"/api/endpoints/{endpoint_id}/lease", {"max_n": int(max_n)})["tasks"]

    def mark_running(self, task_id: str, lease_id: str | None = None) -> dict:
        return self._call("POST", f"/api/tasks/{task_id}/running", {"lease_id": lease_id} if lease_id else {})

    def post_result(self, task_id: str, result=None, error=None, lease_id: str | None = None) -> str:
        body = {"error": error} if error is not None else {"success": result}
        if lease_id:
            body["lease_id"] = lease_id
        return self._call("POST", f"/api/tasks/{task_id}/result", body)["recorded_status"]

"""HTTP client for the experiment service REST surface.

One client serves three consumers: the campaign runner, the cascaded backend
(which drives a delegate service through the very same API it serves), and
tests. State waits prefer the server's long-poll support and degrade to
client-side polling with exponential backoff when a response comes back
immediately unchanged.
"""

from __future__ import annotations

import time
from typing import Any

import httpx

from simlab.errors import ApiError, DelegateUnreachable



class EvalClient:
    def __init__(
        self,
        base_url: str,
        token: str | None = None,
        timeout_s: float = 30.0,
        max_connections: int = 64,
    ):
        self.base_url = base_url.rstrip("/")
        self._timeout_s = timeout_s
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._http = httpx.Client(
            base_url=self.base_url,
            headers=headers,
            timeout=httpx.Timeout(timeout_s, read=timeout_s + 15.0),
            limits=httpx.Limits(max_connections=max_connections, max_keepalive_connections=max_connections),
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "EvalClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _request(self, method: str, path: str, **kwargs: Any) -> httpx.Response:
        try:
            response = self._http.request(method, path, **kwargs)
        except httpx.TransportError as exc:
            raise DelegateUnreachable(f"{self.base_url}: {exc}") from exc
        if response.status_code >= 400:
            try:
                body = response.json()
                code, detail = body.get("error", "error"), body.get("detail", response.text)
            except ValueError:
                code, detail = "error", response.text
            raise ApiError(code, detail, response.status_code)
        return response

    def _json(self, method: str, path: str, **kwargs: Any) -> Any:
        return self._request(method, path, **kwargs).json()

    # -- systems and backends -------------------------------------------------

    def systems(self) -> list[dict]:
        return self._json("GET", "/v1/systems")

    def backends(self) -> list[dict]:
        return self._json("GET", "/v1/backends")

    def find_system(self, name: str, version: str) -> dict | None:
        for entry in self.systems():
            if entry.get("name") == name and entry.get("version") == version:
                return entry
        return None

    # -- experiment lifecycle -------------------------------------------------

    def create_experiment(self, name: str, version: str, backend: str | None = None) -> dict:
        body: dict[str, Any] = {"system_name": name, "system_version": version}
        if backend:
            body["backend"] = backend
        return self._json("POST", "/v1/experiments", json=body)

    def list_experiments(self, **filters: Any) -> dict:
        params = {k: v for k, v in filters.items() if v is not None}
        return self._json("GET", "/v1/experiments", params=params)

    def experiment(self, experiment_id: str) -> dict:
        return self._json("GET", f"/v1/experiments/{experiment_id}")

    def configure(self, experiment_id: str, syscfg_doc: dict) -> dict:
        return self._json("PUT", f"/v1/experiments/{experiment_id}/config", json=syscfg_doc)

    def upload_input(self, experiment_id: str, param: str, filename: str, data: bytes) -> dict:
        return self._json(
            "POST",
            f"/v1/experiments/{experiment_id}/inputs/{param}",
            content=data,
            headers={"X-Filename": filename, "Content-Type": "application/octet-stream"},
        )

    def build(self, experiment_id: str) -> dict:
        return self._json("POST", f"/v1/experiments/{experiment_id}/build")

    def run(self, experiment_id: str) -> dict:
        return self._json("POST", f"/v1/experiments/{experiment_id}/run")

    def state(self, experiment_id: str, known: str | None = None, wait_s: float | None = None) -> dict:
        params: dict[str, Any] = {}
        if known is not None:
            params["known"] = known
        if wait_s is not None:
            params["wait_s"] = wait_s
        return self._json("GET", f"/v1/experiments/{experiment_id}/state", params=params)

    def wait_while(self, experiment_id: str, transient: str, deadline_s: float = 3600.0) -> dict:
        """Block until the experiment leaves `transient`; returns the state doc."""
        deadline = time.monotonic() + deadline_s
        backoff = 0.1
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return self.state(experiment_id)
            slice_s = min(remaining, 10.0)
            t0 = time.monotonic()
            doc = self.state(experiment_id, known=transient, wait_s=slice_s)
            if doc["state"] != transient:
                return doc
            # a server without long-poll support answers instantly: back off
            if time.monotonic() - t0 < 0.05:
                time.sleep(min(backoff, remaining))
                backoff = min(backoff * 2, 5.0)

    def results(self, experiment_id: str) -> dict:
        return self._json("GET", f"/v1/experiments/{experiment_id}/results")

    def result_payload(self, experiment_id: str, key: str) -> bytes:
        return self._request("GET", f"/v1/experiments/{experiment_id}/results/{key}").content

    def log(self, experiment_id: str, action: str) -> str:
        return self._request("GET", f"/v1/experiments/{experiment_id}/log/{action}").text

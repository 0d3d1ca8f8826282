"""Reward scoring service: NDJSON over stdio plus an optional HTTP endpoint.

One request object per input line produces exactly one response line, in
input order; malformed items become inline error objects so a bad request
never poisons the batch.
"""

from __future__ import annotations

import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .rewards import RewardScorer


def response_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def serve_ndjson(scorer: RewardScorer, in_stream, out_stream) -> int:
    """Score newline-delimited JSON requests; returns the response count."""
    n = 0
    for line in in_stream:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
        except ValueError as exc:
            record = {"id": None, "error": f"malformed request: {exc}"}
        else:
            record = scorer.score_batch([request])[0]
        out_stream.write(response_line(record))
        out_stream.write("\n")
        n += 1
    out_stream.flush()
    return n


def make_http_server(scorer: RewardScorer, artifact_hashes: dict, host: str = "127.0.0.1", port: int = 8040):
    """HTTP server with POST /score (JSON array) and GET /healthz."""

    class Handler(BaseHTTPRequestHandler):
        def _send(self, status: int, payload: dict | list) -> None:
            body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self) -> None:
            if self.path == "/healthz":
                self._send(200, {"status": "ok", "artifacts": artifact_hashes})
            else:
                self._send(404, {"error": "unknown path"})

        def do_POST(self) -> None:
            if self.path != "/score":
                self._send(404, {"error": "unknown path"})
                return
            length = int(self.headers.get("Content-Length", "0"))
            try:
                requests = json.loads(self.rfile.read(length).decode("utf-8"))
                if not isinstance(requests, list):
                    raise ValueError("body must be a JSON array of requests")
            except ValueError as exc:
                self._send(400, {"error": str(exc)})
                return
            self._send(200, scorer.score_batch(requests))

        def log_message(self, format: str, *args) -> None:  # noqa: A002
            pass

    return ThreadingHTTPServer((host, port), Handler)

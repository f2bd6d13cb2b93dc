"""Toy model host for the logprob wire protocol.

Serves any in-process backend (normally a toy model) over HTTP so that
remote-client code paths and protocol contract tests have a live peer.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .backends import Backend, Context
from .errors import InvalidToken

DEFAULT_MAX_CONTEXT_CHARS = 100_000


def _make_handler(backend: Backend, max_context_chars: int):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, payload: dict):
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _error(self, status: int, detail: str):
            self._send(status, {"detail": detail})

        def do_GET(self):
            if self.path != "/v1/tokenizer":
                return self._error(422, f"unknown path {self.path}")
            tok = backend.tokenizer
            vocab = [tok.token_text(i) for i in range(tok.vocab_size)]
            self._send(200, {"vocab_size": tok.vocab_size, "vocab": vocab, "name": tok.id})

        def do_POST(self):
            try:
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
            except (ValueError, json.JSONDecodeError):
                return self._error(422, "request body is not valid JSON")
            if self.path == "/v1/next_logprobs":
                return self._next_logprobs(body)
            if self.path == "/v1/score_tokens":
                return self._score_tokens(body)
            return self._error(422, f"unknown path {self.path}")

        def _check_context(self, body) -> str | None:
            context = body.get("context")
            if not isinstance(context, str) or not context:
                self._error(422, "context must be a non-empty string")
                return None
            if len(context) > max_context_chars:
                self._error(413, f"context exceeds {max_context_chars} characters")
                return None
            return context

        def _next_logprobs(self, body: dict):
            context = self._check_context(body)
            if context is None:
                return
            top_k = body.get("top_k")
            if top_k is not None and (not isinstance(top_k, int) or top_k < 1):
                return self._error(422, "top_k must be a positive integer or null")
            dist = backend.next_logprobs(Context(context), top_k)
            entries = [
                {"token_id": i, "text": backend.tokenizer.token_text(i), "logprob": lp}
                for i, lp in dist.entries.items()
            ]
            self._send(200, {"entries": entries, "complete": dist.complete})

        def _score_tokens(self, body: dict):
            context = self._check_context(body)
            if context is None:
                return
            token_ids = body.get("token_ids")
            if not isinstance(token_ids, list) or not all(
                isinstance(t, int) for t in token_ids
            ):
                return self._error(422, "token_ids must be a list of integers")
            try:
                scores = backend.score_tokens(Context(context), token_ids)
            except InvalidToken as exc:
                return self._error(422, str(exc))
            entries = [
                {"token_id": t, "text": backend.tokenizer.token_text(t), "logprob": scores[t]}
                for t in token_ids
            ]
            self._send(200, {"entries": entries})

    return Handler


class ToyProtocolServer:
    """Threaded HTTP server wrapping one backend; port 0 picks a free port."""

    def __init__(
        self,
        backend: Backend,
        host: str = "127.0.0.1",
        port: int = 0,
        max_context_chars: int = DEFAULT_MAX_CONTEXT_CHARS,
    ):
        self._httpd = ThreadingHTTPServer(
            (host, port), _make_handler(backend, max_context_chars)
        )
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ToyProtocolServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

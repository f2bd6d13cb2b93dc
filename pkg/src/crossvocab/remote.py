"""HTTP client backend speaking the logprob wire protocol."""

from __future__ import annotations

import hashlib
import time
from typing import Sequence

import requests

from .backends import Backend, Context, NextTokenDistribution
from .errors import BackendUnavailable, ConfigError, ContextTooLong, InvalidToken
from .tokenizers import GreedyTokenizer, TokenId


class OpaqueTokenizer:
    """Placeholder for servers that do not expose their vocabulary.

    Scoring still works through the wire protocol, but any operation that
    needs token text or encoding (mapping, generation) fails loudly.
    """

    def __init__(self, name: str, vocab_size: int):
        self.id = name
        self.vocab_size = vocab_size
        self.eos_id = None

    def fingerprint(self) -> str:
        return hashlib.sha256(f"opaque:{self.id}:{self.vocab_size}".encode()).hexdigest()

    def _unavailable(self, op: str):
        raise ConfigError(
            f"backend tokenizer {self.id!r} does not expose its vocabulary; {op} impossible"
        )

    def encode(self, text: str):
        self._unavailable("encode")

    def decode(self, ids):
        self._unavailable("decode")

    def token_text(self, i: TokenId) -> str:
        self._unavailable("token_text")


class RemoteBackend(Backend):
    """Backend proxied over HTTP; tokenizer metadata is fetched once."""

    kind = "remote"

    def __init__(
        self,
        id: str,
        url: str,
        *,
        prompt_prefix: str = "",
        prompt_suffix: str = "",
        timeout_ms: int = 30_000,
        retries: int = 2,
        session: requests.Session | None = None,
    ):
        self.id = id  # needed by _request before super().__init__ runs
        self.url = url.rstrip("/")
        self.timeout = timeout_ms / 1000.0
        self.retries = retries
        self._session = session or requests.Session()
        info = self._request("GET", "/v1/tokenizer")
        if info.get("vocab") is not None:
            tokenizer = GreedyTokenizer(info["vocab"], name=info.get("name", id))
        else:
            tokenizer = OpaqueTokenizer(info.get("name", id), info["vocab_size"])
        super().__init__(id, tokenizer, prompt_prefix, prompt_suffix)

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._session.request(
                    method, self.url + path, json=body, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_exc = exc
                if attempt < self.retries:
                    time.sleep(min(0.1 * 2 ** attempt, 1.0))
                continue
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise BackendUnavailable(
                        f"backend {self.id}: malformed JSON response"
                    ) from exc
            if resp.status_code == 422:
                raise InvalidToken(f"backend {self.id}: {_detail(resp)}")
            if resp.status_code == 413:
                raise ContextTooLong(f"backend {self.id}: {_detail(resp)}")
            if resp.status_code == 503:
                retry_after = _retry_after(resp)
                if attempt < self.retries:
                    time.sleep(retry_after if retry_after is not None else 0.2)
                    continue
                raise BackendUnavailable(
                    f"backend {self.id} unavailable: {_detail(resp)}",
                    retry_after=retry_after,
                )
            raise BackendUnavailable(
                f"backend {self.id}: unexpected status {resp.status_code}"
            )
        raise BackendUnavailable(f"backend {self.id} unreachable: {last_exc}")

    def next_logprobs(self, ctx: Context, top_k: int | None = None) -> NextTokenDistribution:
        if not ctx.text:
            raise ValueError("context must be non-empty")
        if top_k is not None and top_k < 1:
            raise ValueError("top_k must be >= 1 when present")
        payload = self._request("POST", "/v1/next_logprobs", {
            "context": self._effective_text(ctx),
            "top_k": top_k,
        })
        try:
            entries = {int(e["token_id"]): float(e["logprob"]) for e in payload["entries"]}
            return NextTokenDistribution(entries=entries, complete=bool(payload["complete"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"backend {self.id}: malformed response") from exc

    def score_tokens(self, ctx: Context, tokens: Sequence[TokenId]) -> dict[TokenId, float]:
        if not tokens:
            return {}
        payload = self._request("POST", "/v1/score_tokens", {
            "context": self._effective_text(ctx),
            "token_ids": list(tokens),
        })
        try:
            return {int(e["token_id"]): float(e["logprob"]) for e in payload["entries"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"backend {self.id}: malformed response") from exc


def _detail(resp: requests.Response) -> str:
    try:
        return resp.json().get("detail", resp.text[:200])
    except ValueError:
        return resp.text[:200]


def _retry_after(resp: requests.Response) -> float | None:
    header = resp.headers.get("Retry-After")
    if header is not None:
        try:
            return float(header)
        except ValueError:
            return None
    try:
        value = resp.json().get("retry_after")
        return float(value) if value is not None else None
    except ValueError:
        return None

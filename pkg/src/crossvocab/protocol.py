"""Wire protocol contract: response schemas and golden conformance checks.

Any server claiming to speak the logprob protocol must pass
``run_contract_checks`` unchanged; the bundled toy server and external
adapters are held to the identical check list.

Endpoints:
    POST /v1/next_logprobs  {"context": str, "top_k": int|null}
    POST /v1/score_tokens   {"context": str, "token_ids": [int]}
    GET  /v1/tokenizer
Errors: 422 invalid token or bad request, 413 context too long,
503 unavailable.
"""

from __future__ import annotations

import json
import math
from importlib import resources

import jsonschema
import requests

_SCHEMAS: dict[str, dict] = {}


def response_schema(name: str) -> dict:
    """Load one of the shipped response schemas by endpoint name."""
    if name not in _SCHEMAS:
        ref = resources.files("crossvocab.schemas") / f"{name}_response.schema.json"
        _SCHEMAS[name] = json.loads(ref.read_text(encoding="utf-8"))
    return _SCHEMAS[name]


def validate_response(name: str, payload: dict) -> None:
    jsonschema.validate(payload, response_schema(name))


def run_contract_checks(
    base_url: str,
    *,
    top_k: int = 20,
    score_agreement_tol: float = 1e-4,
    long_context_chars: int = 2_000_000,
    probe_context: str = "The patient was admitted",
    timeout: float = 60.0,
    session: requests.Session | None = None,
) -> list[str]:
    """Run the golden protocol checks against a live server.

    Returns a list of human-readable failures; an empty list means the
    server conforms.  The same sequence runs against the toy server and
    any real-model adapter.
    """
    sess = session or requests.Session()
    base = base_url.rstrip("/")
    failures: list[str] = []

    def check(condition: bool, message: str) -> bool:
        if not condition:
            failures.append(message)
        return condition

    # Tokenizer metadata.
    resp = sess.get(f"{base}/v1/tokenizer", timeout=timeout)
    if not check(resp.status_code == 200, f"tokenizer endpoint returned {resp.status_code}"):
        return failures
    tok = resp.json()
    try:
        validate_response("tokenizer", tok)
    except jsonschema.ValidationError as exc:
        failures.append(f"tokenizer response schema: {exc.message}")
        return failures
    vocab_size = tok["vocab_size"]
    if tok["vocab"] is not None:
        check(len(tok["vocab"]) == vocab_size,
              f"vocab length {len(tok['vocab'])} != vocab_size {vocab_size}")

    def post(path: str, body: dict) -> requests.Response:
        return sess.post(f"{base}{path}", json=body, timeout=timeout)

    # Full distribution: complete, covers the vocabulary, sums to one.
    resp = post("/v1/next_logprobs", {"context": probe_context, "top_k": None})
    if check(resp.status_code == 200, f"full next_logprobs returned {resp.status_code}"):
        full = resp.json()
        try:
            validate_response("next_logprobs", full)
            check(full["complete"] is True, "top_k=null response must be complete")
            ids = [e["token_id"] for e in full["entries"]]
            check(len(ids) == vocab_size,
                  f"complete distribution has {len(ids)} entries, vocab is {vocab_size}")
            check(len(set(ids)) == len(ids), "duplicate token_ids in complete distribution")
            total = sum(math.exp(e["logprob"]) for e in full["entries"])
            check(abs(total - 1.0) <= 1e-4,
                  f"complete distribution sums to {total!r}, expected 1")
        except jsonschema.ValidationError as exc:
            failures.append(f"next_logprobs response schema: {exc.message}")
            full = None
    else:
        full = None

    # Top-k slice: exact count, descending order, no duplicates.
    resp = post("/v1/next_logprobs", {"context": probe_context, "top_k": top_k})
    top = None
    if check(resp.status_code == 200, f"top-k next_logprobs returned {resp.status_code}"):
        top = resp.json()
        try:
            validate_response("next_logprobs", top)
            entries = top["entries"]
            expected = min(top_k, vocab_size)
            check(len(entries) == expected,
                  f"top_k={top_k} returned {len(entries)} entries, expected {expected}")
            check(top["complete"] is False, "top-k response must not claim completeness")
            lps = [e["logprob"] for e in entries]
            check(all(x >= y for x, y in zip(lps, lps[1:])),
                  "top-k entries are not sorted by descending logprob")
            ids = [e["token_id"] for e in entries]
            check(len(set(ids)) == len(ids), "duplicate token_ids in top-k response")
        except jsonschema.ValidationError as exc:
            failures.append(f"next_logprobs response schema: {exc.message}")
            top = None

    # Determinism on repeated identical requests.
    if top is not None:
        again = post("/v1/next_logprobs", {"context": probe_context, "top_k": top_k}).json()
        same = [(e["token_id"], e["logprob"]) for e in top["entries"]]
        rep = [(e["token_id"], e["logprob"]) for e in again.get("entries", [])]
        check(
            len(same) == len(rep)
            and all(a[0] == b[0] and abs(a[1] - b[1]) <= 1e-6 for a, b in zip(same, rep)),
            "repeated identical requests disagree",
        )

    # score_tokens consistency with the distribution's top entry.
    if top is not None and top["entries"]:
        top1 = top["entries"][0]
        resp = post("/v1/score_tokens",
                    {"context": probe_context, "token_ids": [top1["token_id"]]})
        if check(resp.status_code == 200, f"score_tokens returned {resp.status_code}"):
            scored = resp.json()
            try:
                validate_response("score_tokens", scored)
                got = scored["entries"][0]["logprob"]
                check(abs(got - top1["logprob"]) <= score_agreement_tol,
                      f"score_tokens {got!r} vs next_logprobs {top1['logprob']!r} "
                      f"differ beyond {score_agreement_tol}")
            except (jsonschema.ValidationError, IndexError) as exc:
                failures.append(f"score_tokens response invalid: {exc}")

    # Empty scoring request yields an empty entry list.
    resp = post("/v1/score_tokens", {"context": probe_context, "token_ids": []})
    if check(resp.status_code == 200, f"empty score_tokens returned {resp.status_code}"):
        check(resp.json().get("entries") == [], "empty token_ids must yield empty entries")

    # Error codes: invalid token id, bad top_k, oversized context.
    resp = post("/v1/score_tokens", {"context": probe_context, "token_ids": [vocab_size]})
    check(resp.status_code == 422, f"out-of-range token id returned {resp.status_code}, want 422")
    resp = post("/v1/next_logprobs", {"context": probe_context, "top_k": 0})
    check(resp.status_code == 422, f"top_k=0 returned {resp.status_code}, want 422")
    resp = post("/v1/next_logprobs", {"context": "x" * long_context_chars, "top_k": 1})
    check(resp.status_code == 413, f"oversized context returned {resp.status_code}, want 413")

    return failures

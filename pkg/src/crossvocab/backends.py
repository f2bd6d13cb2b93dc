"""Next-token log-probability backends.

A backend is anything that, given a text context, reports log-probabilities
over its own vocabulary: deterministic toy models for tests and desk-scale
runs, or a remote model behind the wire protocol (see ``remote``).  Text is
the only representation that crosses backend boundaries; every backend
re-tokenizes the context with its own tokenizer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidToken, MalformedSpec
from .tokenizers import GreedyTokenizer, TokenId

# Probability floor for tokens a smoothed toy table does not list; keeps
# offset arithmetic finite.
EPSILON = 1e-10
LOGPROB_FLOOR = math.log(EPSILON)


@dataclass(frozen=True)
class Context:
    """Prompt plus all generated text so far, as one canonical string."""

    text: str

    def extended(self, more: str) -> "Context":
        return Context(self.text + more)


@dataclass
class NextTokenDistribution:
    """Log-probabilities over one backend's vocabulary.

    ``entries`` preserves ranking order for top-k results: highest logprob
    first, ties broken by ascending token id.  ``complete`` is True iff the
    entries cover the whole vocabulary.
    """

    entries: dict[TokenId, float]
    complete: bool

    def top(self, k: int) -> list[tuple[TokenId, float]]:
        ranked = sorted(self.entries.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:k]

    def argmax(self) -> TokenId:
        return self.top(1)[0][0]


class Backend:
    """Base query surface; subclasses fill in ``_full_logprobs``.

    ``prompt_prefix`` and ``prompt_suffix`` are applied to the context text
    inside the backend, keeping any chat formatting backend-local.
    """

    kind = "toy"

    def __init__(self, id: str, tokenizer, prompt_prefix: str = "", prompt_suffix: str = ""):
        self.id = id
        self.tokenizer = tokenizer
        self.prompt_prefix = prompt_prefix
        self.prompt_suffix = prompt_suffix

    def _effective_text(self, ctx: Context) -> str:
        return self.prompt_prefix + ctx.text + self.prompt_suffix

    def _full_logprobs(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def next_logprobs(self, ctx: Context, top_k: int | None = None) -> NextTokenDistribution:
        """Distribution over the next token; top-k slice when ``top_k`` given."""
        if not ctx.text:
            raise ValueError("context must be non-empty")
        if top_k is not None and top_k < 1:
            raise ValueError("top_k must be >= 1 when present")
        logprobs = self._full_logprobs(self._effective_text(ctx))
        if top_k is None:
            return NextTokenDistribution(
                entries={i: float(lp) for i, lp in enumerate(logprobs)},
                complete=True,
            )
        k = min(top_k, len(logprobs))
        # Sort by (-logprob, token_id): a deterministic total order.
        order = np.lexsort((np.arange(len(logprobs)), -logprobs))[:k]
        return NextTokenDistribution(
            entries={int(i): float(logprobs[i]) for i in order},
            complete=False,
        )

    def score_tokens(self, ctx: Context, tokens: Sequence[TokenId]) -> dict[TokenId, float]:
        """Logprobs of specific tokens, consistent with ``next_logprobs``."""
        if not tokens:
            return {}
        logprobs = self._full_logprobs(self._effective_text(ctx))
        out: dict[TokenId, float] = {}
        for t in tokens:
            if not 0 <= t < len(logprobs):
                raise InvalidToken(f"token id {t} out of range for backend {self.id}")
            out[t] = float(logprobs[t])
        return out


class TableBackend(Backend):
    """Explicit conditional table: rows keyed by context suffix.

    The row with the longest suffix matching the effective context wins; an
    empty suffix acts as the default row.  Listed tokens share the mass left
    after every unlisted token receives exactly EPSILON.
    """

    def __init__(self, id, tokenizer, rows, **kw):
        super().__init__(id, tokenizer, **kw)
        self._rows: list[tuple[str, np.ndarray]] = []
        for suffix, probs in rows:
            self._rows.append((suffix, self._compile_row(probs)))
        self._rows.sort(key=lambda r: -len(r[0]))
        if not any(suffix == "" for suffix, _ in self._rows):
            raise MalformedSpec("table spec needs a default row (empty suffix)")

    def _compile_row(self, probs: Mapping[str, float]) -> np.ndarray:
        size = self.tokenizer.vocab_size
        weights = np.zeros(size)
        for text, w in probs.items():
            ids = self.tokenizer.encode(text)
            if len(ids) != 1:
                raise MalformedSpec(f"table entry {text!r} is not a single token")
            if w <= 0:
                raise MalformedSpec(f"table weight for {text!r} must be positive")
            weights[ids[0]] += float(w)
        listed = weights > 0
        n_unlisted = int((~listed).sum())
        p = np.full(size, EPSILON)
        p[listed] = weights[listed] / weights.sum() * (1.0 - EPSILON * n_unlisted)
        return np.log(p)

    def _full_logprobs(self, text: str) -> np.ndarray:
        for suffix, row in self._rows:
            if text.endswith(suffix):
                return row
        raise AssertionError("default row guarantees a match")


class BigramBackend(Backend):
    """Seeded smoothed-bigram toy model.

    Integer co-occurrence counts are drawn once from a seeded RNG; the next
    token is conditioned on the last token of the leniently re-tokenized
    context (a dedicated start row serves empty token sequences).
    """

    def __init__(self, id, tokenizer, seed: int, smoothing: float = 1.0, **kw):
        super().__init__(id, tokenizer, **kw)
        if smoothing <= 0:
            raise MalformedSpec("smoothing must be positive")
        self.seed = seed
        self.smoothing = smoothing
        size = tokenizer.vocab_size
        rng = np.random.default_rng(seed)
        # Row vocab_size is the start state used when the context yields no tokens.
        self.counts = rng.integers(0, 10, size=(size + 1, size)).astype(np.float64)
        smoothed = self.counts + smoothing
        self._log_rows = np.log(smoothed / smoothed.sum(axis=1, keepdims=True))

    def _full_logprobs(self, text: str) -> np.ndarray:
        ids = self.tokenizer.encode_lenient(text)
        row = ids[-1] if ids else self.tokenizer.vocab_size
        return self._log_rows[row]


def next_logprobs(b, ctx: Context, top_k: int | None = None) -> NextTokenDistribution:
    return b.next_logprobs(ctx, top_k)


def score_tokens(b, ctx: Context, tokens: Sequence[TokenId]) -> dict[TokenId, float]:
    return b.score_tokens(ctx, tokens)


def make_toy_model(spec: Mapping | str | Path, *, id: str | None = None) -> Backend:
    """Build a deterministic toy backend from a spec mapping or JSON file.

    Spec shape: {"type": "table"|"bigram", "vocab": [...], "byte_fallback"?,
    "eos"?, "name"?, then per type either "rows": {suffix: {token: weight}}
    or "seed": int with optional "smoothing": float}.
    """
    if isinstance(spec, (str, Path)):
        path = Path(spec)
        try:
            spec = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedSpec(f"cannot read toy spec {path}: {exc}") from exc
    if not isinstance(spec, Mapping):
        raise MalformedSpec("toy spec must be a JSON object")
    kind = spec.get("type")
    if "vocab" not in spec:
        raise MalformedSpec("toy spec needs a 'vocab' list")
    tokenizer = GreedyTokenizer(
        spec["vocab"],
        name=spec.get("name", "toy"),
        byte_fallback=bool(spec.get("byte_fallback", False)),
        eos=spec.get("eos"),
    )
    backend_id = id or spec.get("name", "toy")
    prefix = spec.get("prompt_prefix", "")
    suffix = spec.get("prompt_suffix", "")
    if kind == "table":
        rows = spec.get("rows")
        if not isinstance(rows, Mapping) or not rows:
            raise MalformedSpec("table spec needs a non-empty 'rows' object")
        if "" not in rows:
            raise MalformedSpec("table spec needs a default row keyed by ''")
        return TableBackend(
            backend_id, tokenizer, list(rows.items()),
            prompt_prefix=prefix, prompt_suffix=suffix,
        )
    if kind == "bigram":
        if "seed" not in spec:
            raise MalformedSpec("bigram spec needs a 'seed'")
        return BigramBackend(
            backend_id, tokenizer, int(spec["seed"]),
            smoothing=float(spec.get("smoothing", 1.0)),
            prompt_prefix=prefix, prompt_suffix=suffix,
        )
    raise MalformedSpec(f"unknown toy model type {kind!r}")

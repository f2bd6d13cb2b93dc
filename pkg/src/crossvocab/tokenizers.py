"""Tokenizer surface and the cross-vocabulary token mapping.

One model family's tokens are projected into another's by decoding a token
to plain text and re-tokenizing that text with the destination tokenizer,
keeping the first token whose decoded form is not entirely whitespace.
Mapping always operates on decoded text, never on tokenizer-internal marker
glyphs.
"""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Sequence

from .errors import EncodeError, InvalidToken, MalformedSpec

TokenId = int


class GreedyTokenizer:
    """Deterministic greedy-longest-match tokenizer over an explicit vocabulary.

    At every position the longest vocabulary entry that prefixes the
    remaining text is consumed; among equal-length duplicates the lowest
    token id wins.  With ``byte_fallback`` enabled, characters no entry
    covers are encoded as raw UTF-8 byte tokens occupying the id range
    ``[len(vocab), len(vocab) + 256)``.
    """

    def __init__(
        self,
        vocab: Sequence[str],
        *,
        name: str = "toy",
        byte_fallback: bool = False,
        eos: str | None = None,
    ):
        if not vocab:
            raise MalformedSpec("vocabulary must not be empty")
        self.id = name
        self._vocab = list(vocab)
        self._byte_fallback = byte_fallback
        # Greedy match candidates bucketed by first character, longest first.
        self._buckets: dict[str, list[tuple[int, str]]] = {}
        for idx, entry in enumerate(self._vocab):
            if not isinstance(entry, str):
                raise MalformedSpec(f"vocab entry {idx} is not a string")
            if entry == "":
                continue  # decodable but never matched
            self._buckets.setdefault(entry[0], []).append((idx, entry))
        for bucket in self._buckets.values():
            bucket.sort(key=lambda item: (-len(item[1]), item[0]))
        self.eos_id: int | None = None
        if eos is not None:
            try:
                self.eos_id = self._vocab.index(eos)
            except ValueError:
                raise MalformedSpec(f"eos string {eos!r} not in vocabulary") from None
        self._fingerprint: str | None = None

    @property
    def vocab_size(self) -> int:
        return len(self._vocab) + (256 if self._byte_fallback else 0)

    @property
    def byte_fallback(self) -> bool:
        return self._byte_fallback

    def fingerprint(self) -> str:
        """Stable digest of vocabulary contents; equal iff behaviorally equal."""
        if self._fingerprint is None:
            payload = json.dumps(
                {"vocab": self._vocab, "byte_fallback": self._byte_fallback},
                ensure_ascii=False,
            )
            self._fingerprint = hashlib.sha256(payload.encode("utf-8")).hexdigest()
        return self._fingerprint

    def _match_at(self, text: str, pos: int) -> tuple[int, str] | None:
        for idx, entry in self._buckets.get(text[pos], ()):
            if text.startswith(entry, pos):
                return idx, entry
        return None

    def encode(self, text: str) -> list[TokenId]:
        """Tokenize ``text``; raises EncodeError if it is not expressible."""
        ids: list[TokenId] = []
        pos = 0
        while pos < len(text):
            match = self._match_at(text, pos)
            if match is not None:
                ids.append(match[0])
                pos += len(match[1])
            elif self._byte_fallback:
                for byte in text[pos].encode("utf-8"):
                    ids.append(len(self._vocab) + byte)
                pos += 1
            else:
                raise EncodeError(
                    f"character {text[pos]!r} at position {pos} is not expressible"
                )
        return ids

    def encode_lenient(self, text: str) -> list[TokenId]:
        """Like encode, but silently skips characters it cannot express."""
        ids: list[TokenId] = []
        pos = 0
        while pos < len(text):
            match = self._match_at(text, pos)
            if match is not None:
                ids.append(match[0])
                pos += len(match[1])
            elif self._byte_fallback:
                for byte in text[pos].encode("utf-8"):
                    ids.append(len(self._vocab) + byte)
                pos += 1
            else:
                pos += 1
        return ids

    def decode(self, ids: Sequence[TokenId]) -> str:
        buf = bytearray()
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise InvalidToken(f"token id {i} out of range [0, {self.vocab_size})")
            if i < len(self._vocab):
                buf.extend(self._vocab[i].encode("utf-8"))
            else:
                buf.append(i - len(self._vocab))
        return buf.decode("utf-8", errors="replace")

    def token_text(self, i: TokenId) -> str:
        return self.decode([i])

    def __repr__(self) -> str:
        return f"GreedyTokenizer(id={self.id!r}, vocab_size={self.vocab_size})"


def load_toy_tokenizer(path: str | Path, *, name: str | None = None) -> GreedyTokenizer:
    """Load a tokenizer definition file: {"vocab": [...], "byte_fallback": bool}."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedSpec(f"cannot read tokenizer spec {path}: {exc}") from exc
    if not isinstance(spec, dict) or "vocab" not in spec:
        raise MalformedSpec(f"tokenizer spec {path} must be an object with a 'vocab' list")
    return GreedyTokenizer(
        spec["vocab"],
        name=name or spec.get("name", path.stem),
        byte_fallback=bool(spec.get("byte_fallback", False)),
        eos=spec.get("eos"),
    )


class CrossVocabMap:
    """Decode-then-retokenize projection of src tokens into dst's vocabulary.

    The result for a token is a pure function of (src, dst, token): the first
    token of ``dst.encode(src.decode([i]))`` whose decoded form contains a
    non-whitespace character, or None when no such token exists.  Results are
    cached; population is thread-safe.
    """

    def __init__(self, src, dst):
        self.src = src
        self.dst = dst
        self._cache: dict[TokenId, TokenId | None] = {}
        self._lock = threading.Lock()

    def map(self, i: TokenId) -> TokenId | None:
        if not 0 <= i < self.src.vocab_size:
            raise InvalidToken(
                f"token id {i} out of range for source vocab of {self.src.vocab_size}"
            )
        with self._lock:
            if i in self._cache:
                return self._cache[i]
        result = self._compute(i)
        with self._lock:
            self._cache.setdefault(i, result)
        return result

    def _compute(self, i: TokenId) -> TokenId | None:
        text = self.src.decode([i])
        if text.strip() == "":
            return None
        try:
            dst_ids = self.dst.encode(text)
        except EncodeError:
            return None
        for j in dst_ids:
            if self.dst.decode([j]).strip() != "":
                return j
        return None


def build_map(src, dst) -> CrossVocabMap:
    """Create an empty-cache map from src's vocabulary into dst's."""
    return CrossVocabMap(src, dst)


def map_token(m: CrossVocabMap, i: TokenId) -> TokenId | None:
    """Project token ``i`` of ``m.src`` into ``m.dst``; None if unmappable."""
    return m.map(i)

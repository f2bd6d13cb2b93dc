"""Model loading and next-token scoring for one checkpoint.

Log-probabilities always come from a full softmax at full precision over
the model's final logits, whatever precision the weights are stored in.
One lock serializes forward passes, so concurrent callers simply queue.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer


@dataclass
class AdapterConfig:
    model: str                      # checkpoint path or hub identifier
    device: str = "cpu"
    max_context_tokens: int | None = None   # default: model maximum
    max_context_chars: int = 1_000_000      # cheap pre-tokenization guard
    host: str = "127.0.0.1"
    port: int = 8601
    quantization_note: str | None = None    # informational only


class ContextTooLongError(Exception):
    pass


class InvalidTokenError(Exception):
    pass


class ModelService:
    """One checkpoint, one tokenizer, serialized forward passes."""

    def __init__(self, config: AdapterConfig):
        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(config.model)
        self.model = AutoModelForCausalLM.from_pretrained(config.model)
        self.model.to(config.device)
        self.model.eval()
        # the scoring domain is the logits dimension, which can exceed the
        # tokenizer's vocabulary on checkpoints with padded embeddings
        probe = self.tokenizer.encode("a") or [0]
        with torch.no_grad():
            probe_logits = self.model(
                torch.tensor([probe], device=config.device)
            ).logits
        self.vocab_size = int(probe_logits.shape[-1])
        model_max = getattr(self.model.config, "max_position_embeddings", None)
        self.max_context_tokens = config.max_context_tokens or model_max or 2048
        self.name = str(config.model)
        # decoded text per token id; the protocol serves decoded strings so
        # clients can rebuild a text-level tokenizer for cross-vocab mapping
        self.vocab_texts = []
        for i in range(self.vocab_size):
            try:
                self.vocab_texts.append(self.tokenizer.decode([i]))
            except Exception:
                self.vocab_texts.append("")
        self._lock = threading.Lock()
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()
        self._cache_size = 64

    def next_token_logprobs(self, context: str) -> np.ndarray:
        """Full-vocabulary log-probabilities after the given context."""
        if not context:
            raise InvalidTokenError("context must be a non-empty string")
        if len(context) > self.config.max_context_chars:
            raise ContextTooLongError(
                f"context has {len(context)} characters, "
                f"limit {self.config.max_context_chars}"
            )
        with self._lock:
            cached = self._cache.get(context)
            if cached is not None:
                self._cache.move_to_end(context)
                return cached
            ids = self.tokenizer.encode(context)
            if len(ids) > self.max_context_tokens:
                raise ContextTooLongError(
                    f"context is {len(ids)} tokens, limit {self.max_context_tokens}"
                )
            with torch.no_grad():
                input_ids = torch.tensor([ids], device=self.config.device)
                logits = self.model(input_ids).logits[0, -1, :].float()
                logprobs = torch.log_softmax(logits, dim=-1).cpu().numpy()
            self._cache[context] = logprobs
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
            return logprobs

    def top_k(self, context: str, k: int) -> list[tuple[int, float]]:
        """Highest-logprob entries, ties broken by ascending token id."""
        logprobs = self.next_token_logprobs(context)
        k = min(k, self.vocab_size)
        order = np.lexsort((np.arange(len(logprobs)), -logprobs))[:k]
        return [(int(i), float(logprobs[i])) for i in order]

    def score(self, context: str, token_ids: list[int]) -> list[tuple[int, float]]:
        if not token_ids:
            return []
        for t in token_ids:
            if not 0 <= t < self.vocab_size:
                raise InvalidTokenError(
                    f"token id {t} out of range [0, {self.vocab_size})"
                )
        logprobs = self.next_token_logprobs(context)
        return [(t, float(logprobs[t])) for t in token_ids]

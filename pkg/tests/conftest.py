import random

import pytest

from crossvocab.backends import make_toy_model
from crossvocab.tokenizers import GreedyTokenizer

ALPHABET = list("abcdefgh")


@pytest.fixture
def shared_vocab_64():
    """64 distinct non-whitespace strings: single chars plus merges."""
    vocab = list("abcdefgh")
    for a in "abcdefgh":
        for b in "abcdefg":
            vocab.append(a + b)
            if len(vocab) == 64:
                return vocab
    return vocab


@pytest.fixture
def toy_triple(shared_vocab_64):
    """Three seeded bigram backends over one shared 64-token vocabulary."""
    def build(seed_base=100):
        return {
            name: make_toy_model({
                "type": "bigram", "vocab": shared_vocab_64,
                "seed": seed_base + i, "name": name,
            })
            for i, name in enumerate(["new", "clin", "base"])
        }
    return build


def random_contexts(n, seed, alphabet=ALPHABET, max_len=6):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        length = rng.randint(1, max_len)
        out.append("".join(rng.choice(alphabet) for _ in range(length)))
    return out


@pytest.fixture
def make_tokenizer():
    def build(vocab, **kw):
        return GreedyTokenizer(vocab, **kw)
    return build

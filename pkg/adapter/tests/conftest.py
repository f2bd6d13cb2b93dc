import socket
import threading
import time

import pytest
import requests
import torch
import uvicorn
from tokenizers import Tokenizer, decoders, models, pre_tokenizers, trainers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

from logprob_adapter.app import build_app
from logprob_adapter.service import AdapterConfig, ModelService

CORPUS = [
    "The patient was admitted for observation after the procedure.",
    "Monitor the surgical site for signs of infection and swelling.",
    "Continue antibiotics and schedule a follow-up appointment.",
    "Assess distal perfusion and document capillary refill.",
    "The graft site remained stable throughout recovery.",
]


def build_tiny_checkpoint(directory) -> str:
    """Materialize a tiny random causal LM + BPE tokenizer on disk.

    The hub is unreachable in this environment, so the checkpoint is built
    locally; loading and serving follow the exact same code path as any
    downloaded checkpoint directory.
    """
    tok = Tokenizer(models.BPE())
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    trainer = trainers.BpeTrainer(
        vocab_size=300,
        special_tokens=["<|endoftext|>"],
        initial_alphabet=pre_tokenizers.ByteLevel.alphabet(),
        show_progress=False,
    )
    tok.train_from_iterator(CORPUS, trainer)
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, eos_token="<|endoftext|>")
    fast.save_pretrained(directory)

    torch.manual_seed(1234)
    config = GPT2Config(
        vocab_size=tok.get_vocab_size(), n_positions=64,
        n_embd=16, n_layer=2, n_head=2,
        bos_token_id=0, eos_token_id=0,
    )
    GPT2LMHeadModel(config).save_pretrained(directory)
    return str(directory)


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory):
    return build_tiny_checkpoint(tmp_path_factory.mktemp("tiny-ckpt"))


@pytest.fixture(scope="session")
def service(checkpoint):
    return ModelService(AdapterConfig(
        model=checkpoint, device="cpu",
        max_context_tokens=64, max_context_chars=100_000,
    ))


@pytest.fixture(scope="session")
def adapter_url(service):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    server = uvicorn.Server(uvicorn.Config(
        build_app(service), host="127.0.0.1", port=port, log_level="warning",
    ))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{port}"
    deadline = time.time() + 30
    while time.time() < deadline:
        try:
            requests.get(f"{url}/v1/tokenizer", timeout=2)
            break
        except requests.RequestException:
            time.sleep(0.2)
    else:
        pytest.fail("adapter server never came up")
    yield url
    server.should_exit = True
    thread.join(timeout=10)

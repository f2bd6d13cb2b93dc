import math

import requests

from crossvocab.backends import Context
from crossvocab.ensemble import EnsembleConfig, generate
from crossvocab.protocol import run_contract_checks, validate_response
from crossvocab.remote import RemoteBackend


class TestGoldenContract:
    def test_same_checks_as_toy_server(self, adapter_url):
        failures = run_contract_checks(adapter_url, long_context_chars=200_000)
        assert failures == [], "\n".join(failures)


class TestEndpoints:
    def test_tokenizer_reports_true_vocab_size(self, adapter_url, service):
        payload = requests.get(f"{adapter_url}/v1/tokenizer", timeout=30).json()
        validate_response("tokenizer", payload)
        assert payload["vocab_size"] == service.vocab_size
        assert len(payload["vocab"]) == service.vocab_size
        assert payload["vocab"] == service.vocab_texts

    def test_top_20_exactly_descending(self, adapter_url):
        payload = requests.post(
            f"{adapter_url}/v1/next_logprobs",
            json={"context": "The patient", "top_k": 20}, timeout=30,
        ).json()
        validate_response("next_logprobs", payload)
        assert len(payload["entries"]) == 20
        lps = [e["logprob"] for e in payload["entries"]]
        assert all(x >= y for x, y in zip(lps, lps[1:]))
        assert payload["complete"] is False

    def test_score_agrees_with_top_entry_within_1e4(self, adapter_url):
        top = requests.post(
            f"{adapter_url}/v1/next_logprobs",
            json={"context": "Monitor the", "top_k": 1}, timeout=30,
        ).json()["entries"][0]
        scored = requests.post(
            f"{adapter_url}/v1/score_tokens",
            json={"context": "Monitor the", "token_ids": [top["token_id"]]},
            timeout=30,
        ).json()["entries"][0]
        assert abs(scored["logprob"] - top["logprob"]) <= 1e-4

    def test_full_distribution_normalized(self, adapter_url, service):
        payload = requests.post(
            f"{adapter_url}/v1/next_logprobs",
            json={"context": "Continue", "top_k": None}, timeout=30,
        ).json()
        assert payload["complete"] is True
        assert len(payload["entries"]) == service.vocab_size
        total = sum(math.exp(e["logprob"]) for e in payload["entries"])
        assert abs(total - 1.0) <= 1e-4

    def test_error_codes(self, adapter_url, service):
        resp = requests.post(
            f"{adapter_url}/v1/score_tokens",
            json={"context": "x", "token_ids": [service.vocab_size]}, timeout=30)
        assert resp.status_code == 422
        resp = requests.post(
            f"{adapter_url}/v1/next_logprobs",
            json={"context": "x", "top_k": 0}, timeout=30)
        assert resp.status_code == 422
        resp = requests.post(
            f"{adapter_url}/v1/next_logprobs",
            json={"context": "word " * 200, "top_k": 1}, timeout=30)
        assert resp.status_code == 413  # token budget exceeded
        resp = requests.post(
            f"{adapter_url}/v1/next_logprobs",
            json={"context": 5, "top_k": 1}, timeout=30)
        assert resp.status_code == 422

    def test_deterministic_repeat(self, adapter_url):
        def fetch():
            payload = requests.post(
                f"{adapter_url}/v1/next_logprobs",
                json={"context": "Assess distal", "top_k": 10}, timeout=30,
            ).json()
            return [(e["token_id"], e["logprob"]) for e in payload["entries"]]
        assert fetch() == fetch()


class TestEngineIntegration:
    def test_remote_backend_drives_adapter(self, adapter_url, service):
        backend = RemoteBackend("real", adapter_url, timeout_ms=60_000)
        assert backend.tokenizer.vocab_size == service.vocab_size
        dist = backend.next_logprobs(Context("The patient was"), 5)
        assert len(dist.entries) == 5

    def test_greedy_generation_through_the_wire(self, adapter_url):
        backend = RemoteBackend("real", adapter_url, timeout_ms=60_000)
        cfg = EnsembleConfig(method="single", k=5, max_tokens=4)
        first = generate("The patient was", cfg, {"model": backend})
        second = generate("The patient was", cfg, {"model": backend})
        assert first.text == second.text
        assert len(first.steps) == 4

    def test_identical_expert_reduction_on_real_model(self, adapter_url):
        # same checkpoint in all three roles: offsets vanish, choice is greedy
        new = RemoteBackend("new", adapter_url, timeout_ms=60_000)
        expert = RemoteBackend("expert", adapter_url, timeout_ms=60_000)
        cfg = EnsembleConfig(method="capt", k=5, alpha=1.0, max_tokens=3)
        result = generate("Schedule a", cfg,
                          {"new": new, "clin": expert, "base": expert})
        baseline = generate("Schedule a", EnsembleConfig(method="single", k=5,
                                                         max_tokens=3),
                            {"model": new})
        assert result.text == baseline.text
        for step in result.steps:
            for cand in step.candidates:
                assert cand.offset == 0.0

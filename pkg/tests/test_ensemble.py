import json
import math

import pytest

from crossvocab.backends import Context, make_toy_model
from crossvocab.constraint import JsonSchemaConstraint, TokenMask
from crossvocab.ensemble import (
    EnsembleConfig,
    capt_step,
    generate,
    proxy_tuning_step,
    single_step,
    unite_step,
)
from crossvocab.ensemble import _select
from crossvocab.errors import ConfigError, EmptyCandidateSet, VocabMismatch
from crossvocab.tokenizers import build_map
from crossvocab import trace as trace_io

from conftest import random_contexts

VOCAB8 = list("abcdefgh")


def table8(probs, name="t"):
    return make_toy_model({"type": "table", "vocab": VOCAB8,
                           "rows": {"": probs}, "name": name})


def bigram(vocab, seed, name):
    return make_toy_model({"type": "bigram", "vocab": vocab, "seed": seed,
                           "name": name})


@pytest.fixture
def hand_case():
    """Frozen example: leader prefers 'a', the expert pair doubles 'b'."""
    rest = 0.2 / 6
    new = table8({"a": 0.5, "b": 0.3, **{c: rest for c in "cdefgh"}}, "new")
    clin = table8({"a": 0.125, "b": 0.25, **{c: 0.625 / 6 for c in "cdefgh"}}, "clin")
    base = table8({c: 0.125 for c in VOCAB8}, "base")
    return new, clin, base


class TestCaptStep:
    def test_hand_case_flips_top_choice(self, hand_case):
        new, clin, base = hand_case
        vmap = build_map(new.tokenizer, clin.tokenizer)
        cfg = EnsembleConfig(method="capt", k=8, alpha=1.0, max_tokens=4)
        ctx = Context("a")
        rec = capt_step(ctx, new, clin, base, vmap, cfg)

        # independent evaluation of every candidate from the raw distributions
        lp_new = new.next_logprobs(ctx).entries
        lp_clin = clin.next_logprobs(ctx).entries
        lp_base = base.next_logprobs(ctx).entries
        totals = {i: lp_new[i] + (lp_clin[i] - lp_base[i]) for i in range(8)}
        expected = max(totals, key=lambda i: (totals[i], lp_new[i], -i))

        assert rec.chosen == expected == 1  # token 'b'
        assert rec.top_choice_changed is True
        b = rec.chosen_candidate()
        assert b.offset == pytest.approx(math.log(2), rel=1e-9)
        assert b.total == pytest.approx(math.log(0.3) + math.log(2), rel=1e-9)

    def test_alpha_zero_is_leader_greedy(self, toy_triple):
        backends = toy_triple(seed_base=10)
        vmap = build_map(backends["new"].tokenizer, backends["clin"].tokenizer)
        cfg = EnsembleConfig(method="capt", k=8, alpha=0.0, max_tokens=4)
        for ctx_text in random_contexts(30, seed=5):
            ctx = Context(ctx_text)
            rec = capt_step(ctx, backends["new"], backends["clin"],
                            backends["base"], vmap, cfg)
            assert rec.chosen == backends["new"].next_logprobs(ctx).argmax()
            assert not rec.top_choice_changed

    def test_identical_expert_pair_reduces_to_greedy(self, toy_triple):
        backends = toy_triple(seed_base=20)
        clin = backends["clin"]
        vmap = build_map(backends["new"].tokenizer, clin.tokenizer)
        cfg = EnsembleConfig(method="capt", k=8, alpha=1.0, max_tokens=4)
        for ctx_text in random_contexts(30, seed=6):
            ctx = Context(ctx_text)
            rec = capt_step(ctx, backends["new"], clin, clin, vmap, cfg)
            assert all(c.offset == 0.0 for c in rec.candidates)
            assert rec.chosen == backends["new"].next_logprobs(ctx).argmax()

    def test_defaults_k20_alpha1(self):
        cfg = EnsembleConfig()
        assert cfg.k == 20 and cfg.alpha == 1.0

    def test_linearity_in_alpha(self, toy_triple):
        backends = toy_triple(seed_base=30)
        vmap = build_map(backends["new"].tokenizer, backends["clin"].tokenizer)
        ctx = Context("abc")
        for alpha in (0.0, 0.5, 1.0, 2.0):
            cfg = EnsembleConfig(method="capt", k=16, alpha=alpha, max_tokens=4)
            rec = capt_step(ctx, backends["new"], backends["clin"],
                            backends["base"], vmap, cfg)
            for c in rec.candidates:
                assert abs(c.total - (c.logp_new + alpha * c.offset)) <= 1e-12

    def test_uniform_offset_shift_preserves_argmax(self, toy_triple):
        import dataclasses
        backends = toy_triple(seed_base=40)
        vmap = build_map(backends["new"].tokenizer, backends["clin"].tokenizer)
        cfg = EnsembleConfig(method="capt", k=16, alpha=1.0, max_tokens=4)
        for ctx_text in random_contexts(10, seed=8):
            rec = capt_step(Context(ctx_text), backends["new"], backends["clin"],
                            backends["base"], vmap, cfg)
            for shift in (-3.0, 0.7, 42.0):
                shifted = [
                    dataclasses.replace(c, offset=c.offset + shift,
                                        total=c.logp_new + (c.offset + shift))
                    for c in rec.candidates
                ]
                assert _select(shifted).token == rec.chosen

    def test_unmappable_candidates_get_zero_offset(self):
        new = make_toy_model({"type": "bigram", "vocab": ["x", "y", "a"],
                              "seed": 1, "name": "new"})
        old_vocab = ["a", "b", "c"]
        clin = bigram(old_vocab, 2, "clin")
        base = bigram(old_vocab, 3, "base")
        vmap = build_map(new.tokenizer, clin.tokenizer)
        cfg = EnsembleConfig(method="capt", k=3, alpha=1.0, max_tokens=4)
        rec = capt_step(Context("a"), new, clin, base, vmap, cfg)
        for c in rec.candidates:
            if c.text in ("x", "y"):
                assert c.mapped is None and c.offset == 0.0
                assert c.logp_clin is None and c.logp_base is None
            else:
                assert c.mapped is not None

    def test_candidate_containment(self, toy_triple):
        backends = toy_triple(seed_base=50)
        vmap = build_map(backends["new"].tokenizer, backends["clin"].tokenizer)
        cfg = EnsembleConfig(method="capt", k=5, alpha=1.0, max_tokens=4)
        for ctx_text in random_contexts(50, seed=9):
            ctx = Context(ctx_text)
            rec = capt_step(ctx, backends["new"], backends["clin"],
                            backends["base"], vmap, cfg)
            top_k = {i for i, _ in backends["new"].next_logprobs(ctx, 5).entries.items()}
            assert rec.chosen in top_k
            assert {c.token for c in rec.candidates} == top_k

    def test_mask_applies_before_top_k(self, toy_triple):
        backends = toy_triple(seed_base=60)
        vmap = build_map(backends["new"].tokenizer, backends["clin"].tokenizer)
        cfg = EnsembleConfig(method="capt", k=3, alpha=1.0, max_tokens=4)
        mask = TokenMask(frozenset(range(32, 64)))
        rec = capt_step(Context("ab"), backends["new"], backends["clin"],
                        backends["base"], vmap, cfg, mask)
        assert all(c.token >= 32 for c in rec.candidates)
        assert len(rec.candidates) == 3
        assert rec.constraint_applied

    def test_empty_mask_raises(self, toy_triple):
        backends = toy_triple(seed_base=60)
        vmap = build_map(backends["new"].tokenizer, backends["clin"].tokenizer)
        cfg = EnsembleConfig(method="capt", k=3, max_tokens=4)
        with pytest.raises(EmptyCandidateSet):
            capt_step(Context("ab"), backends["new"], backends["clin"],
                      backends["base"], vmap, cfg, TokenMask(frozenset()))

    def test_expert_pair_must_share_tokenizer(self):
        new = bigram(VOCAB8, 1, "new")
        clin = bigram(VOCAB8, 2, "clin")
        other = bigram(["a", "b"], 3, "other")
        vmap = build_map(new.tokenizer, clin.tokenizer)
        cfg = EnsembleConfig(method="capt", max_tokens=4)
        with pytest.raises(VocabMismatch):
            capt_step(Context("a"), new, clin, other, vmap, cfg)


class TestProxyTuningStep:
    def test_tuned_equals_base_reduces_to_greedy(self, toy_triple):
        backends = toy_triple(seed_base=70)
        large, base = backends["new"], backends["base"]
        for ctx_text in random_contexts(20, seed=11):
            ctx = Context(ctx_text)
            rec = proxy_tuning_step(ctx, large, base, base)
            assert rec.chosen == large.next_logprobs(ctx).argmax()

    def test_all_identical_reduces_to_greedy(self, toy_triple):
        m = toy_triple(seed_base=80)["new"]
        ctx = Context("abcd")
        assert proxy_tuning_step(ctx, m, m, m).chosen == m.next_logprobs(ctx).argmax()

    def test_matches_full_vocab_brute_force(self, toy_triple):
        backends = toy_triple(seed_base=90)
        large, tuned, base = backends["new"], backends["clin"], backends["base"]
        for ctx_text in random_contexts(25, seed=12):
            ctx = Context(ctx_text)
            rec = proxy_tuning_step(ctx, large, tuned, base)
            L = large.next_logprobs(ctx).entries
            T = tuned.next_logprobs(ctx).entries
            B = base.next_logprobs(ctx).entries
            scores = {i: L[i] + (T[i] - B[i]) for i in L}
            expected = max(scores, key=lambda i: (scores[i], L[i], -i))
            assert rec.chosen == expected

    def test_vocab_mismatch(self):
        a = bigram(VOCAB8, 1, "a")
        b = bigram(["a", "b"], 2, "b")
        with pytest.raises(VocabMismatch):
            proxy_tuning_step(Context("a"), a, a, b)

    def test_record_cap_and_chosen_first(self, toy_triple):
        backends = toy_triple(seed_base=95)
        rec = proxy_tuning_step(Context("ab"), backends["new"], backends["clin"],
                                backends["base"], record_top=7)
        assert len(rec.candidates) == 7
        assert rec.candidates[0].token == rec.chosen


class TestUniteStep:
    def test_same_handle_reduces_to_greedy(self, toy_triple):
        m = toy_triple(seed_base=100)["new"]
        identity = build_map(m.tokenizer, m.tokenizer)
        for ctx_text in random_contexts(30, seed=13):
            ctx = Context(ctx_text)
            rec = unite_step(ctx, m, m, identity, identity, k=6)
            assert rec.chosen == m.next_logprobs(ctx).argmax()
            assert not rec.top_choice_changed

    def test_disjoint_support_mean_of_probabilities(self):
        a = table8({"a": 0.5, "b": 0.5}, "a")
        b = table8({"c": 0.6, "d": 0.4}, "b")
        m_ab = build_map(a.tokenizer, b.tokenizer)
        m_ba = build_map(b.tokenizer, a.tokenizer)
        ctx = Context("e")
        rec = unite_step(ctx, a, b, m_ab, m_ba, k=2, record_top=4)
        p_a = {i: math.exp(lp) for i, lp in a.next_logprobs(ctx).entries.items()}
        p_b = {i: math.exp(lp) for i, lp in b.next_logprobs(ctx).entries.items()}
        union = {c.token for c in rec.candidates}
        assert union == {0, 1, 2, 3}
        raw = {i: 0.5 * (p_a[i] + p_b[i]) for i in union}
        z = sum(raw.values())
        for c in rec.candidates:
            assert math.exp(c.total) == pytest.approx(raw[c.token] / z, rel=1e-9)

    def test_k1_same_top_token(self):
        a = table8({"a": 0.9, "b": 0.1}, "a")
        b = table8({"a": 0.8, "c": 0.2}, "b")
        m_ab = build_map(a.tokenizer, b.tokenizer)
        m_ba = build_map(b.tokenizer, a.tokenizer)
        rec = unite_step(Context("e"), a, b, m_ab, m_ba, k=1)
        assert rec.chosen == 0

    def test_unmappable_members_score_zero_from_other_side(self):
        a = make_toy_model({"type": "table", "vocab": ["x", "y"],
                            "rows": {"": {"x": 0.7, "y": 0.3}}, "name": "a"})
        b = make_toy_model({"type": "table", "vocab": ["p", "q"],
                            "rows": {"": {"p": 0.6, "q": 0.4}}, "name": "b"})
        m_ab = build_map(a.tokenizer, b.tokenizer)
        m_ba = build_map(b.tokenizer, a.tokenizer)
        rec = unite_step(Context("x"), a, b, m_ab, m_ba, k=2)
        # nothing maps across, so the union is a's top-k scored by p_a/2
        assert {c.token for c in rec.candidates} == {0, 1}
        assert rec.chosen == 0
        for c in rec.candidates:
            assert c.logp_clin is None


class TestGenerate:
    def roles(self, seed_base, toy_triple):
        return toy_triple(seed_base=seed_base)

    def test_max_tokens_one(self, toy_triple):
        cfg = EnsembleConfig(method="capt", k=4, max_tokens=1)
        result = generate("ab", cfg, self.roles(110, toy_triple))
        assert len(result.steps) == 1
        assert result.finish_reason == "max_tokens"

    def test_stop_sequence_on_first_token(self, toy_triple):
        backends = self.roles(120, toy_triple)
        cfg = EnsembleConfig(method="capt", k=4, max_tokens=8)
        first = generate("ab", cfg, backends).steps[0]
        first_text = backends["new"].tokenizer.token_text(first.chosen)
        cfg2 = EnsembleConfig(method="capt", k=4, max_tokens=8,
                              stop_sequences=[first_text])
        result = generate("ab", cfg2, backends)
        assert result.finish_reason == "stop"
        assert len(result.steps) == 1

    def test_text_reproduces_from_steps(self, toy_triple):
        backends = self.roles(130, toy_triple)
        cfg = EnsembleConfig(method="capt", k=6, max_tokens=10)
        result = generate("abc", cfg, backends)
        rebuilt = "".join(backends["new"].tokenizer.token_text(s.chosen)
                          for s in result.steps)
        assert rebuilt == result.text

    def test_constrained_run_completes_schema(self):
        vocab = ["{", "}", '"', ":", ",", " ", "reason", "label", "ok", "bad",
                 "x", "y"]
        backends = {
            role: make_toy_model({"type": "bigram", "vocab": vocab,
                                  "seed": seed, "name": role})
            for role, seed in [("new", 1), ("clin", 2), ("base", 3)]
        }
        constraint = JsonSchemaConstraint(labels=("ok", "bad"), arity="single",
                                          reason_max_chars=20)
        cfg = EnsembleConfig(method="capt", k=6, max_tokens=200)
        result = generate("go:", cfg, backends, constraint)
        assert result.finish_reason == "constraint_complete"
        obj = json.loads(result.text)
        assert obj["label"] in ("ok", "bad")
        assert len(obj["reason"]) <= 20
        assert all(s.constraint_applied for s in result.steps)

    def test_constrained_single_and_unite(self):
        vocab = ["{", "}", '"', ":", ",", " ", "reason", "label", "ok", "bad"]
        model = make_toy_model({"type": "bigram", "vocab": vocab, "seed": 4,
                                "name": "m"})
        other = make_toy_model({"type": "bigram", "vocab": vocab, "seed": 5,
                                "name": "o"})
        constraint = JsonSchemaConstraint(labels=("ok", "bad"), arity="single",
                                          reason_max_chars=10)
        for method, roles in [("single", {"model": model}),
                              ("unite", {"a": model, "b": other}),
                              ("proxy_tuning", {"large": model, "tuned": other,
                                                "base": other})]:
            cfg = EnsembleConfig(method=method, k=8, max_tokens=200)
            result = generate("go:", cfg, roles, constraint)
            assert result.finish_reason == "constraint_complete", method
            assert json.loads(result.text)["label"] in ("ok", "bad")

    def test_missing_role_rejected(self, toy_triple):
        cfg = EnsembleConfig(method="capt", max_tokens=2)
        with pytest.raises(ConfigError):
            generate("ab", cfg, {"new": self.roles(140, toy_triple)["new"]})

    def test_empty_prompt_rejected(self, toy_triple):
        with pytest.raises(ValueError):
            generate("", EnsembleConfig(max_tokens=2), self.roles(150, toy_triple))

    def test_eos_stops_generation(self):
        vocab = list("abc") + ["<eos>"]
        spec = {"type": "table", "vocab": vocab, "eos": "<eos>",
                "rows": {"": {"<eos>": 0.9, "a": 0.1}}}
        model = make_toy_model(spec)
        result = generate("a", EnsembleConfig(method="single", max_tokens=5),
                          {"model": model})
        assert result.finish_reason == "stop"
        assert len(result.steps) == 1

    def test_deterministic_rerun_byte_identical(self, toy_triple, tmp_path):
        cfg = EnsembleConfig(method="capt", k=6, max_tokens=12)
        paths = []
        for run in range(2):
            result = generate("abcd", cfg, self.roles(160, toy_triple))
            path = tmp_path / f"run{run}.jsonl"
            trace_io.write_generation(result, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_trace_round_trip(self, toy_triple, tmp_path):
        cfg = EnsembleConfig(method="capt", k=6, max_tokens=6)
        result = generate("ab", cfg, self.roles(170, toy_triple))
        path = tmp_path / "t.jsonl"
        trace_io.write_generation(result, path)
        loaded = trace_io.read_generation(path)
        assert loaded == result


class TestSharedVocabEquivalence:
    def test_capt_equals_proxy_on_shared_tokenizer(self, toy_triple):
        backends = toy_triple(seed_base=200)
        new, clin, base = backends["new"], backends["clin"], backends["base"]
        vmap = build_map(new.tokenizer, clin.tokenizer)
        cfg = EnsembleConfig(method="capt", k=64, alpha=1.0, max_tokens=4)
        for ctx_text in random_contexts(100, seed=77):
            ctx = Context(ctx_text)
            capt = capt_step(ctx, new, clin, base, vmap, cfg)
            proxy = proxy_tuning_step(ctx, new, clin, base)
            assert capt.chosen == proxy.chosen


class TestSingleStep:
    def test_greedy(self, toy_triple):
        m = toy_triple(seed_base=210)["new"]
        ctx = Context("ab")
        rec = single_step(ctx, m)
        assert rec.chosen == m.next_logprobs(ctx).argmax()
        assert all(c.offset == 0.0 for c in rec.candidates)

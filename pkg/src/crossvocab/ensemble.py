"""Decoding loop: candidate re-ranking and the baseline ensembling steps.

The main method re-ranks the leader model's top-k next-token candidates by
adding a scaled contrastive offset, the log-probability difference between
a domain-tuned model and its untuned base, evaluated on each candidate
projected into the expert pair's vocabulary.  Tokens the expert vocabulary
cannot express keep the leader's judgment (offset 0).  Selection is argmax;
ties break toward higher leader log-probability, then lower token id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .backends import Backend, Context, LOGPROB_FLOOR
from .constraint import (
    ConstraintState,
    JsonSchemaConstraint,
    TokenMask,
    advance,
    allowed_tokens,
    fresh_state,
)
from .errors import ConfigError, EmptyCandidateSet, VocabMismatch
from .tokenizers import CrossVocabMap, TokenId, build_map

METHODS = ("capt", "proxy_tuning", "unite", "single")


@dataclass
class EnsembleConfig:
    method: str = "capt"
    k: int = 20
    alpha: float = 1.0
    max_tokens: int = 256
    stop_sequences: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")


@dataclass
class CandidateScore:
    """Score decomposition for one candidate token (leader vocabulary)."""

    token: TokenId
    text: str
    logp_new: float
    mapped: TokenId | None
    logp_clin: float | None
    logp_base: float | None
    offset: float
    total: float

    def to_dict(self) -> dict:
        return {
            "token": self.token,
            "text": self.text,
            "logp_new": self.logp_new,
            "mapped": self.mapped,
            "logp_clin": self.logp_clin,
            "logp_base": self.logp_base,
            "offset": self.offset,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateScore":
        return cls(**d)


@dataclass
class StepRecord:
    step_index: int
    candidates: list[CandidateScore]
    chosen: TokenId
    top_choice_changed: bool
    constraint_applied: bool

    def chosen_candidate(self) -> CandidateScore:
        for c in self.candidates:
            if c.token == self.chosen:
                return c
        raise ValueError(f"chosen token {self.chosen} missing from candidates")

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "candidates": [c.to_dict() for c in self.candidates],
            "chosen": self.chosen,
            "top_choice_changed": self.top_choice_changed,
            "constraint_applied": self.constraint_applied,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(
            step_index=d["step_index"],
            candidates=[CandidateScore.from_dict(c) for c in d["candidates"]],
            chosen=d["chosen"],
            top_choice_changed=d["top_choice_changed"],
            constraint_applied=d["constraint_applied"],
        )


@dataclass
class GenerationResult:
    text: str
    steps: list[StepRecord]
    finish_reason: str  # stop | max_tokens | constraint_complete
    method: str
    prompt: str


def _ranked(entries: Mapping[TokenId, float], mask: TokenMask | None) -> list[tuple[TokenId, float]]:
    items = [(i, lp) for i, lp in entries.items() if mask is None or i in mask]
    items.sort(key=lambda kv: (-kv[1], kv[0]))
    return items


def _select(candidates: Sequence[CandidateScore]) -> CandidateScore:
    return max(candidates, key=lambda c: (c.total, c.logp_new, -c.token))


def capt_step(
    ctx: Context,
    new: Backend,
    clin: Backend,
    base: Backend,
    vmap: CrossVocabMap,
    cfg: EnsembleConfig,
    mask: TokenMask | None = None,
    *,
    step_index: int = 0,
) -> StepRecord:
    """One re-ranking step over the leader's top-k candidates.

    The mask, when present, restricts the leader's distribution before
    top-k selection, so every candidate is already schema-legal.
    """
    if clin.tokenizer.fingerprint() != base.tokenizer.fingerprint():
        raise VocabMismatch("expert and base backends must share a tokenizer")
    if vmap.src.fingerprint() != new.tokenizer.fingerprint() or (
        vmap.dst.fingerprint() != clin.tokenizer.fingerprint()
    ):
        raise ValueError("map must go from the leader vocabulary to the expert pair's")

    if mask is None:
        dist = new.next_logprobs(ctx, cfg.k)
        ranked = list(dist.entries.items())
    else:
        dist = new.next_logprobs(ctx, None)
        ranked = _ranked(dist.entries, mask)[: cfg.k]
        if not ranked:
            raise EmptyCandidateSet("constraint mask eliminated every candidate")

    mapped: dict[TokenId, TokenId | None] = {i: vmap.map(i) for i, _ in ranked}
    wanted = sorted({m for m in mapped.values() if m is not None})
    clin_scores = clin.score_tokens(ctx, wanted)
    base_scores = base.score_tokens(ctx, wanted)

    candidates = []
    for i, lp_new in ranked:
        m = mapped[i]
        if m is None:
            lp_clin = lp_base = None
            offset = 0.0
        else:
            lp_clin = clin_scores[m]
            lp_base = base_scores[m]
            offset = lp_clin - lp_base
        candidates.append(CandidateScore(
            token=i,
            text=new.tokenizer.token_text(i),
            logp_new=lp_new,
            mapped=m,
            logp_clin=lp_clin,
            logp_base=lp_base,
            offset=offset,
            total=lp_new + cfg.alpha * offset,
        ))

    chosen = _select(candidates)
    return StepRecord(
        step_index=step_index,
        candidates=candidates,
        chosen=chosen.token,
        top_choice_changed=chosen.token != candidates[0].token,
        constraint_applied=mask is not None,
    )


def proxy_tuning_step(
    ctx: Context,
    large: Backend,
    tuned: Backend,
    base: Backend,
    mask: TokenMask | None = None,
    *,
    record_top: int = 20,
    step_index: int = 0,
) -> StepRecord:
    """Full-vocabulary tuned-minus-base shift applied to a large model.

    Requires one shared tokenizer across all three backends; the combined
    candidate set (the whole vocabulary) is filtered by the mask.
    """
    fps = {b.tokenizer.fingerprint() for b in (large, tuned, base)}
    if len(fps) != 1:
        raise VocabMismatch("proxy tuning requires one shared tokenizer")

    lp_large = large.next_logprobs(ctx, None).entries
    lp_tuned = tuned.next_logprobs(ctx, None).entries
    lp_base = base.next_logprobs(ctx, None).entries

    ids = [i for i in lp_large if mask is None or i in mask]
    if not ids:
        raise EmptyCandidateSet("constraint mask eliminated every candidate")

    candidates = []
    for i in ids:
        offset = lp_tuned[i] - lp_base[i]
        candidates.append(CandidateScore(
            token=i,
            text=large.tokenizer.token_text(i),
            logp_new=lp_large[i],
            mapped=i,
            logp_clin=lp_tuned[i],
            logp_base=lp_base[i],
            offset=offset,
            total=lp_large[i] + offset,
        ))

    chosen = _select(candidates)
    leader_top = min(ids, key=lambda i: (-lp_large[i], i))
    candidates.sort(key=lambda c: (-c.total, -c.logp_new, c.token))
    return StepRecord(
        step_index=step_index,
        candidates=candidates[:record_top],
        chosen=chosen.token,
        top_choice_changed=chosen.token != leader_top,
        constraint_applied=mask is not None,
    )


def unite_step(
    ctx: Context,
    a: Backend,
    b: Backend,
    map_ab: CrossVocabMap,
    map_ba: CrossVocabMap,
    k: int,
    mask: TokenMask | None = None,
    *,
    record_top: int | None = None,
    step_index: int = 0,
) -> StepRecord:
    """Top-k union baseline: mean of both models' probabilities per member.

    The union of a's top-k and b's top-k (projected into a's vocabulary) is
    filtered by the mask, scored as the average of the two probabilities
    (0 for a side whose vocabulary cannot express the member), renormalized
    over the union, and selected by argmax.
    """
    dist_a = a.next_logprobs(ctx, None)
    dist_b = b.next_logprobs(ctx, None)

    a_top = [i for i, _ in _ranked(dist_a.entries, None)[:k]]
    b_top = [j for j, _ in _ranked(dist_b.entries, None)[:k]]
    union = list(dict.fromkeys(
        a_top + [m for m in (map_ba.map(j) for j in b_top) if m is not None]
    ))
    if mask is not None:
        union = [i for i in union if i in mask]
    if not union:
        raise EmptyCandidateSet("constraint mask eliminated every union candidate")

    raw: dict[TokenId, float] = {}
    b_side: dict[TokenId, tuple[TokenId | None, float]] = {}
    for i in union:
        j = map_ab.map(i)
        p_b = math.exp(dist_b.entries[j]) if j is not None else 0.0
        b_side[i] = (j, p_b)
        raw[i] = 0.5 * (math.exp(dist_a.entries[i]) + p_b)
    z = sum(raw.values())

    candidates = []
    for i in union:
        j, p_b = b_side[i]
        lp_new = dist_a.entries[i]
        total = math.log(raw[i] / z) if raw[i] > 0 else LOGPROB_FLOOR
        candidates.append(CandidateScore(
            token=i,
            text=a.tokenizer.token_text(i),
            logp_new=lp_new,
            mapped=j,
            logp_clin=math.log(p_b) if p_b > 0 else None,
            logp_base=None,
            offset=total - lp_new,
            total=total,
        ))

    chosen = _select(candidates)
    leader_top = min(dist_a.entries, key=lambda i: (-dist_a.entries[i], i))
    candidates.sort(key=lambda c: (-c.total, -c.logp_new, c.token))
    return StepRecord(
        step_index=step_index,
        candidates=candidates[: (record_top or k)],
        chosen=chosen.token,
        top_choice_changed=chosen.token != leader_top,
        constraint_applied=mask is not None,
    )


def single_step(
    ctx: Context,
    model: Backend,
    mask: TokenMask | None = None,
    *,
    record_top: int = 20,
    step_index: int = 0,
) -> StepRecord:
    """Greedy argmax of one model's (masked) distribution."""
    if mask is None:
        ranked = list(model.next_logprobs(ctx, record_top).entries.items())
    else:
        dist = model.next_logprobs(ctx, None)
        ranked = _ranked(dist.entries, mask)[:record_top]
        if not ranked:
            raise EmptyCandidateSet("constraint mask eliminated every candidate")
    candidates = [
        CandidateScore(
            token=i, text=model.tokenizer.token_text(i), logp_new=lp,
            mapped=None, logp_clin=None, logp_base=None, offset=0.0, total=lp,
        )
        for i, lp in ranked
    ]
    return StepRecord(
        step_index=step_index,
        candidates=candidates,
        chosen=candidates[0].token,
        top_choice_changed=False,
        constraint_applied=mask is not None,
    )


_ROLES = {
    "capt": ("new", "clin", "base"),
    "proxy_tuning": ("large", "tuned", "base"),
    "unite": ("a", "b"),
    "single": ("model",),
}


def roles_for(method: str) -> tuple[str, ...]:
    return _ROLES[method]


def generate(
    prompt: str,
    cfg: EnsembleConfig,
    backends: Mapping[str, Backend],
    constraint: JsonSchemaConstraint | None = None,
) -> GenerationResult:
    """Run the decoding loop until a stop condition.

    ``backends`` maps role names to handles; required roles depend on the
    method (capt: new/clin/base, proxy_tuning: large/tuned/base, unite: a/b,
    single: model).  With a constraint, stop sequences and end-of-sequence
    are ignored; the run ends at object completion or the token budget.
    """
    if not prompt:
        raise ValueError("prompt must be non-empty")
    missing = [r for r in roles_for(cfg.method) if r not in backends]
    if missing:
        raise ConfigError(f"method {cfg.method} needs backend roles {missing}")

    if cfg.method == "capt":
        leader = backends["new"]
        vmap = build_map(leader.tokenizer, backends["clin"].tokenizer)
    elif cfg.method == "proxy_tuning":
        leader = backends["large"]
    elif cfg.method == "unite":
        leader = backends["a"]
        map_ab = build_map(leader.tokenizer, backends["b"].tokenizer)
        map_ba = build_map(backends["b"].tokenizer, leader.tokenizer)
    else:
        leader = backends["model"]

    state: ConstraintState | None = fresh_state(constraint) if constraint else None
    ctx = Context(prompt)
    steps: list[StepRecord] = []
    produced = ""
    finish_reason = "max_tokens"

    for step_index in range(cfg.max_tokens):
        mask = allowed_tokens(state, constraint, leader.tokenizer) if state else None
        if cfg.method == "capt":
            rec = capt_step(ctx, leader, backends["clin"], backends["base"], vmap,
                            cfg, mask, step_index=step_index)
        elif cfg.method == "proxy_tuning":
            rec = proxy_tuning_step(ctx, leader, backends["tuned"], backends["base"],
                                    mask, record_top=cfg.k, step_index=step_index)
        elif cfg.method == "unite":
            rec = unite_step(ctx, leader, backends["b"], map_ab, map_ba, cfg.k,
                             mask, step_index=step_index)
        else:
            rec = single_step(ctx, leader, mask, record_top=cfg.k,
                              step_index=step_index)
        steps.append(rec)
        token_text = leader.tokenizer.token_text(rec.chosen)
        produced += token_text
        ctx = ctx.extended(token_text)

        if state is not None:
            state = advance(state, constraint, leader.tokenizer, rec.chosen)
            if state.done:
                finish_reason = "constraint_complete"
                break
            continue
        if leader.tokenizer.eos_id is not None and rec.chosen == leader.tokenizer.eos_id:
            finish_reason = "stop"
            break
        if any(s and s in produced for s in cfg.stop_sequences):
            finish_reason = "stop"
            break

    return GenerationResult(
        text=produced,
        steps=steps,
        finish_reason=finish_reason,
        method=cfg.method,
        prompt=prompt,
    )

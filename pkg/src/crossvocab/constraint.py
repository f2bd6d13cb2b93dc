"""Prefix-constrained generation toward a fixed-shape JSON object.

The target language is an object with a bounded free-text "reason" string
followed by a "label" field drawn from a fixed set, either a single string
or a non-empty duplicate-free array.  A character-level automaton tracks
the set of legal continuations; a token is allowed at a step iff appending
its decoded text keeps the output a prefix of at least one valid object.

Structural rules: field order is fixed ("reason" then "label"); a single
optional space may separate structural elements; reason strings accept any
JSON-escapable character except raw control characters, with each escape
counting as one character toward the length bound (lone-surrogate \\u
escapes are rejected so every accepted string is strict JSON).
"""

from __future__ import annotations

import json
import string
import weakref
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, IllegalAdvance, InvalidToken, Uncompletable
from .tokenizers import TokenId

PHASE_PRE_OBJECT = "pre_object"
PHASE_IN_REASON = "in_reason"
PHASE_BETWEEN = "between"
PHASE_IN_LABEL = "in_label"
PHASE_POST_OBJECT = "post_object"
PHASE_DONE = "done"

_SIMPLE_ESCAPES = '"\\/bfnrt'
_HEX = set(string.hexdigits)

# Constraint application point per ensembling method: the leader model's
# distribution is masked before top-k selection when the leader alone picks
# the emitted token; combination methods mask the combined candidate set.
MASK_LEADER_BEFORE_TOPK = "mask_leader_before_topk"
MASK_UNION_CANDIDATES = "mask_union_candidates"


@dataclass(frozen=True)
class JsonSchemaConstraint:
    """Schema: {"reason": <string of at most reason_max_chars>, "label": ...}."""

    labels: tuple[str, ...]
    arity: str = "single"
    reason_max_chars: int = 600

    def __post_init__(self):
        if not self.labels:
            raise ConfigError("label set must be non-empty")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("labels must be unique")
        if self.arity not in ("single", "array"):
            raise ConfigError(f"arity must be 'single' or 'array', got {self.arity!r}")
        if self.reason_max_chars < 0:
            raise ConfigError("reason_max_chars must be >= 0")
        for label in self.labels:
            if not label:
                raise ConfigError("labels must be non-empty strings")
            if any(ord(ch) < 0x20 for ch in label) or '"' in label or "\\" in label:
                raise ConfigError(f"label {label!r} contains characters unsafe in JSON")


def load_constraint(path: str | Path) -> JsonSchemaConstraint:
    """Load a constraint spec: {"labels": [...], "arity": ..., "reason_max_chars": ...}."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read constraint spec {path}: {exc}") from exc
    if not isinstance(spec, dict) or "labels" not in spec:
        raise ConfigError(f"constraint spec {path} must be an object with 'labels'")
    return JsonSchemaConstraint(
        labels=tuple(spec["labels"]),
        arity=spec.get("arity", "single"),
        reason_max_chars=int(spec.get("reason_max_chars", 600)),
    )


@dataclass(frozen=True)
class ConstraintState:
    """Immutable snapshot of automaton progress; advancing returns a new one."""

    node: int
    phase: str
    reason_len: int = 0
    esc: str = ""
    label_prefix: str = ""
    used: frozenset[int] = frozenset()

    @property
    def done(self) -> bool:
        return self.phase == PHASE_DONE

    @property
    def chars_consumed(self) -> int:
        return self.reason_len

    def label_progress(self, c: JsonSchemaConstraint) -> set[tuple[int, int]]:
        active = _active_labels(c, self.used if c.arity == "array" else frozenset())
        return {
            (i, len(self.label_prefix))
            for i in active
            if c.labels[i].startswith(self.label_prefix)
        }


@dataclass(frozen=True)
class TokenMask:
    """Allowed token ids over one vocabulary; non-empty for live states."""

    allowed: frozenset[TokenId]

    def __contains__(self, token: TokenId) -> bool:
        return token in self.allowed

    def __len__(self) -> int:
        return len(self.allowed)


class _Node:
    __slots__ = ("kind", "edges", "exit", "comma_guard", "phase")

    def __init__(self, kind="structural", edges=None, exit=None, comma_guard=False,
                 phase=PHASE_BETWEEN):
        self.kind = kind  # "structural" | "reason" | "label"
        self.edges = edges or {}
        self.exit = exit  # region exit node
        self.comma_guard = comma_guard
        self.phase = phase


class _Machine:
    """Compiled automaton for one constraint. Node 0 is always the done node."""

    def __init__(self, constraint: JsonSchemaConstraint):
        self.constraint = constraint
        self.nodes: list[_Node] = []
        self._mask_cache: dict[tuple, frozenset[int]] = {}
        self._build()

    def _add(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _lit(self, ch: str, nxt: int, phase: str) -> int:
        return self._add(_Node(edges={ch: nxt}, phase=phase))

    def _lits(self, text: str, nxt: int, phase: str) -> int:
        for ch in reversed(text):
            nxt = self._lit(ch, nxt, phase)
        return nxt

    def _opt_space(self, nxt: int, phase: str) -> int:
        target = self.nodes[nxt]
        edges = dict(target.edges)
        edges[" "] = nxt
        return self._add(_Node(edges=edges, comma_guard=target.comma_guard, phase=phase))

    def _build(self):
        c = self.constraint
        done = self._add(_Node(phase=PHASE_DONE))
        assert done == 0

        self.label_node = self._add(_Node(kind="label", phase=PHASE_IN_LABEL))
        if c.arity == "single":
            # LABEL -> '"' consumed by region -> [sp] '}'
            self.nodes[self.label_node].exit = self._opt_space(
                self._lit("}", done, PHASE_POST_OBJECT), PHASE_POST_OBJECT
            )
            label_open = self._lit('"', self.label_node, PHASE_BETWEEN)
        else:
            # array: '[' [sp] '"' LABEL '"' ([sp] ',' [sp] '"' LABEL '"')* [sp] ']' [sp] '}'
            after_rbracket = self._opt_space(
                self._lit("}", done, PHASE_POST_OBJECT), PHASE_POST_OBJECT
            )
            next_elem = self._opt_space(
                self._lit('"', self.label_node, PHASE_BETWEEN), PHASE_BETWEEN
            )
            after_elem = self._add(_Node(
                edges={",": next_elem, "]": after_rbracket},
                comma_guard=True, phase=PHASE_BETWEEN,
            ))
            self.nodes[self.label_node].exit = self._opt_space(after_elem, PHASE_BETWEEN)
            label_open = self._lit(
                "[", self._opt_space(self._lit('"', self.label_node, PHASE_BETWEEN),
                                     PHASE_BETWEEN),
                PHASE_BETWEEN,
            )

        between = self._opt_space(label_open, PHASE_BETWEEN)
        between = self._lit(":", between, PHASE_BETWEEN)
        between = self._opt_space(between, PHASE_BETWEEN)
        between = self._lits('"label"', between, PHASE_BETWEEN)
        between = self._opt_space(between, PHASE_BETWEEN)
        between = self._lit(",", between, PHASE_BETWEEN)
        between = self._opt_space(between, PHASE_BETWEEN)

        self.reason_node = self._add(_Node(kind="reason", exit=between, phase=PHASE_IN_REASON))
        pre = self._lit('"', self.reason_node, PHASE_PRE_OBJECT)
        pre = self._opt_space(pre, PHASE_PRE_OBJECT)
        pre = self._lit(":", pre, PHASE_PRE_OBJECT)
        pre = self._opt_space(pre, PHASE_PRE_OBJECT)
        pre = self._lits('"reason"', pre, PHASE_PRE_OBJECT)
        pre = self._opt_space(pre, PHASE_PRE_OBJECT)
        self.start = self._lit("{", pre, PHASE_PRE_OBJECT)

    def initial_state(self) -> ConstraintState:
        return ConstraintState(node=self.start, phase=PHASE_PRE_OBJECT)


def _active_labels(c: JsonSchemaConstraint, used: frozenset[int]) -> list[int]:
    return [i for i in range(len(c.labels)) if i not in used]


def _step_char(m: _Machine, s: ConstraintState, ch: str) -> ConstraintState | None:
    c = m.constraint
    node = m.nodes[s.node]

    if node.kind == "reason":
        if s.esc:
            return _step_escape(s, ch)
        if ch == '"':
            exit_node = m.nodes[node.exit]
            return ConstraintState(node=node.exit, phase=exit_node.phase,
                                   used=s.used)
        room = s.reason_len < c.reason_max_chars
        if ch == "\\":
            if not room:
                return None
            return ConstraintState(node=s.node, phase=s.phase, reason_len=s.reason_len,
                                   esc="\\", used=s.used)
        if ord(ch) >= 0x20 and ch not in ('"', "\\"):
            if not room:
                return None
            return ConstraintState(node=s.node, phase=s.phase,
                                   reason_len=s.reason_len + 1, used=s.used)
        return None

    if node.kind == "label":
        active = _active_labels(c, s.used if c.arity == "array" else frozenset())
        if ch == '"':
            for i in active:
                if c.labels[i] == s.label_prefix:
                    exit_node = m.nodes[node.exit]
                    used = s.used | {i} if c.arity == "array" else s.used
                    return ConstraintState(node=node.exit, phase=exit_node.phase, used=used)
            return None
        prefix = s.label_prefix + ch
        if any(c.labels[i].startswith(prefix) for i in active):
            return ConstraintState(node=s.node, phase=s.phase, label_prefix=prefix,
                                   used=s.used)
        return None

    target = node.edges.get(ch)
    if target is None:
        return None
    if ch == "," and node.comma_guard and len(s.used) >= len(c.labels):
        return None
    return ConstraintState(node=target, phase=m.nodes[target].phase,
                           reason_len=s.reason_len if m.nodes[target].kind == "reason" else 0,
                           used=s.used)


def _step_escape(s: ConstraintState, ch: str) -> ConstraintState | None:
    # room for the escape's one character was reserved when it started
    if s.esc == "\\":
        if ch in _SIMPLE_ESCAPES:
            return ConstraintState(node=s.node, phase=s.phase,
                                   reason_len=s.reason_len + 1, used=s.used)
        if ch == "u":
            return ConstraintState(node=s.node, phase=s.phase, reason_len=s.reason_len,
                                   esc="\\u", used=s.used)
        return None
    # inside \uXXXX
    if ch not in _HEX:
        return None
    # Lock out the surrogate range up front so no reachable state is dead.
    if len(s.esc) == 3 and s.esc[2] in "dD" and ch in "89abcdefABCDEF":
        return None
    esc = s.esc + ch
    if len(esc) == 6:
        return ConstraintState(node=s.node, phase=s.phase,
                               reason_len=s.reason_len + 1, used=s.used)
    return ConstraintState(node=s.node, phase=s.phase, reason_len=s.reason_len,
                           esc=esc, used=s.used)


def _simulate(m: _Machine, s: ConstraintState, text: str) -> ConstraintState | None:
    if text == "":
        return None
    for ch in text:
        if s.phase == PHASE_DONE:
            return None
        s = _step_char(m, s, ch)
        if s is None:
            return None
    return s


_machines: dict[JsonSchemaConstraint, _Machine] = {}
_token_texts: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _compile(c: JsonSchemaConstraint) -> _Machine:
    machine = _machines.get(c)
    if machine is None:
        machine = _Machine(c)
        _machines[c] = machine
    return machine


def _texts_for(tok) -> list[str]:
    texts = _token_texts.get(tok)
    if texts is None:
        texts = [tok.token_text(i) for i in range(tok.vocab_size)]
        _token_texts[tok] = texts
    return texts


def fresh_state(c: JsonSchemaConstraint) -> ConstraintState:
    return _compile(c).initial_state()


def _mask_key(m: _Machine, s: ConstraintState, max_token_len: int) -> tuple:
    # States deep inside the reason region behave identically until the
    # length bound comes within one token's reach; collapse them for caching.
    if m.nodes[s.node].kind == "reason":
        remaining = m.constraint.reason_max_chars - s.reason_len
        reason_key = min(remaining, max_token_len)
    else:
        reason_key = None
    return (s.node, reason_key, s.esc, s.label_prefix, s.used)


def allowed_tokens(s: ConstraintState, c: JsonSchemaConstraint, tok) -> TokenMask:
    """Mask of tokens whose decoded text legally extends the current output."""
    if s.done:
        raise ValueError("constraint state is already done")
    m = _compile(c)
    texts = _texts_for(tok)
    key = (tok.fingerprint(),) + _mask_key(m, s, max(len(t) for t in texts))
    cached = m._mask_cache.get(key)
    if cached is None:
        cached = frozenset(
            i for i, text in enumerate(texts) if _simulate(m, s, text) is not None
        )
        m._mask_cache[key] = cached
    if not cached:
        raise Uncompletable(
            "no vocabulary token can extend the constrained output; "
            "the vocabulary cannot express the schema"
        )
    return TokenMask(cached)


def advance(s: ConstraintState, c: JsonSchemaConstraint, tok, chosen: TokenId) -> ConstraintState:
    """Consume one chosen token; raises IllegalAdvance if it is not allowed."""
    if not 0 <= chosen < tok.vocab_size:
        raise InvalidToken(f"token id {chosen} out of range")
    if s.done:
        raise IllegalAdvance("cannot advance a completed constraint")
    m = _compile(c)
    result = _simulate(m, s, tok.token_text(chosen))
    if result is None:
        raise IllegalAdvance(
            f"token {tok.token_text(chosen)!r} is not a legal continuation"
        )
    return result


def apply_point(cfg) -> str:
    """Where the constraint mask applies for a given ensembling method."""
    if cfg.method in ("capt", "single"):
        return MASK_LEADER_BEFORE_TOPK
    if cfg.method in ("proxy_tuning", "unite"):
        return MASK_UNION_CANDIDATES
    raise ValueError(f"unknown method {cfg.method!r}")

"""Token-level attribution over step traces.

Aggregates the contrastive offsets of generated tokens into semantic
categories and renders annotated output in which each token span carries
its offset and whether the re-ranking flipped the leader's top choice.
"""

from __future__ import annotations

import html
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .ensemble import GenerationResult, StepRecord
from .errors import ConfigError, MethodMismatch


@dataclass(frozen=True)
class TokenCategoryMap:
    """Category name -> token strings; a token belongs to at most one category."""

    categories: dict[str, frozenset[str]]

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name, tokens in self.categories.items():
            for t in tokens:
                if t in seen:
                    raise ConfigError(
                        f"token {t!r} appears in both {seen[t]!r} and {name!r}"
                    )
                seen[t] = name
        object.__setattr__(self, "_by_token", seen)

    def category_of(self, token: str) -> str | None:
        return self._by_token.get(token)


def load_category_map(path: str | Path) -> TokenCategoryMap:
    """Load {"categories": {name: [tokens...]}} from JSON."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read category map {path}: {exc}") from exc
    if not isinstance(spec, dict) or "categories" not in spec:
        raise ConfigError(f"category map {path} must be an object with 'categories'")
    return TokenCategoryMap(
        {name: frozenset(tokens) for name, tokens in spec["categories"].items()}
    )


@dataclass
class CategoryStats:
    mean_offset: float
    token_count: int
    occurrence_count: int


@dataclass
class OffsetReport:
    per_category: dict[str, CategoryStats]
    uncategorized_count: int

    def to_dict(self) -> dict:
        return {
            "per_category": {
                name: {
                    "mean_offset": s.mean_offset,
                    "token_count": s.token_count,
                    "occurrence_count": s.occurrence_count,
                }
                for name, s in sorted(self.per_category.items())
            },
            "uncategorized_count": self.uncategorized_count,
        }


def aggregate_by_category(
    traces: Iterable[StepRecord],
    category_map: TokenCategoryMap,
    min_freq: int = 6,
    top_frac: float = 0.25,
) -> OffsetReport:
    """Mean offset of generated tokens per category.

    Considers chosen tokens only.  Token identity is the decoded text with
    surrounding whitespace stripped (tokens that strip to nothing are
    ignored).  Token strings are ranked by generation frequency; the top
    ``top_frac`` fraction is kept (ceiling, ties resolved by frequency then
    lexicographic order), then strings generated fewer than ``min_freq``
    times are dropped.  Means are over token occurrences, each generated
    instance counting once.
    """
    if not 0 < top_frac <= 1:
        raise ValueError("top_frac must be in (0, 1]")
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")

    occurrences: list[tuple[str, float]] = []
    for step in traces:
        chosen = step.chosen_candidate()
        key = chosen.text.strip()
        if key:
            occurrences.append((key, chosen.offset))

    freq: dict[str, int] = {}
    for key, _ in occurrences:
        freq[key] = freq.get(key, 0) + 1

    ranked = sorted(freq, key=lambda t: (-freq[t], t))
    kept = set(ranked[: math.ceil(top_frac * len(ranked))])
    kept = {t for t in kept if freq[t] >= min_freq}

    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    members: dict[str, set[str]] = {}
    uncategorized: set[str] = set()
    for key, offset in occurrences:
        if key not in kept:
            continue
        category = category_map.category_of(key)
        if category is None:
            uncategorized.add(key)
            continue
        sums[category] = sums.get(category, 0.0) + offset
        counts[category] = counts.get(category, 0) + 1
        members.setdefault(category, set()).add(key)

    per_category = {
        name: CategoryStats(
            mean_offset=sums[name] / counts[name],
            token_count=len(members[name]),
            occurrence_count=counts[name],
        )
        for name in sums
    }
    return OffsetReport(per_category=per_category, uncategorized_count=len(uncategorized))


@dataclass
class TokenSpan:
    text: str
    offset: float
    top_choice_changed: bool
    displaced: str | None  # leader's original top choice, when changed

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "offset": self.offset,
            "top_choice_changed": self.top_choice_changed,
            "displaced": self.displaced,
        }


@dataclass
class AnnotatedText:
    prompt: str
    spans: list[TokenSpan]

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "spans": [s.to_dict() for s in self.spans]}


def annotate_output(result: GenerationResult) -> AnnotatedText:
    """Per-token offset and top-choice-change annotation for a re-ranked run."""
    if result.method != "capt":
        raise MethodMismatch(
            f"annotation requires a capt result, got method {result.method!r}"
        )
    spans = []
    for step in result.steps:
        chosen = step.chosen_candidate()
        displaced = None
        if step.top_choice_changed:
            leader_top = max(step.candidates, key=lambda c: (c.logp_new, -c.token))
            displaced = leader_top.text
        spans.append(TokenSpan(
            text=chosen.text,
            offset=chosen.offset,
            top_choice_changed=step.top_choice_changed,
            displaced=displaced,
        ))
    return AnnotatedText(prompt=result.prompt, spans=spans)


def render_html(annotated: AnnotatedText, path: str | Path) -> None:
    """Write a static HTML rendering: color encodes offset sign and size,
    bold marks a flipped top choice with the displaced token struck out."""
    scale = max((abs(s.offset) for s in annotated.spans), default=0.0) or 1.0
    parts = []
    for span in annotated.spans:
        alpha = min(abs(span.offset) / scale, 1.0) * 0.75
        color = f"rgba(230,140,30,{alpha:.3f})" if span.offset > 0 else (
            f"rgba(70,130,220,{alpha:.3f})" if span.offset < 0 else "transparent"
        )
        title = f"offset={span.offset:+.4f}"
        text = html.escape(span.text).replace("\n", "<br/>")
        weight = ""
        if span.top_choice_changed:
            weight = "font-weight:bold;"
            if span.displaced is not None:
                title += f" (displaced {span.displaced!r})"
                text = (f'<s style="color:#999">{html.escape(span.displaced)}</s>'
                        + text)
        parts.append(
            f'<span title="{html.escape(title)}" '
            f'style="background-color:{color};{weight}">{text}</span>'
        )
    doc = (
        "<!DOCTYPE html><html><head><meta charset='utf-8'>"
        "<style>body{font-family:monospace;max-width:60em;margin:2em auto;"
        "line-height:1.7;white-space:pre-wrap}</style></head><body>"
        "<p><b>Prompt:</b> " + html.escape(annotated.prompt) + "</p><hr/>"
        "<p>" + "".join(parts) + "</p>"
        "<hr/><p style='color:#666'>orange = expert pair raised the token, "
        "blue = lowered; bold = top choice changed, with the displaced "
        "token struck out.</p>"
        "</body></html>"
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(doc, encoding="utf-8")

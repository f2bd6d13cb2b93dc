"""Classification task runner and metrics.

Datasets are JSONL records {"id", "text", "gold"}; predictions come from
constrained generations whose JSON output carries the label field.  Metrics
are macro-F1 (unweighted mean of per-class F1) and exact-match accuracy;
multi-label predictions are scored per label with set semantics.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .backends import Backend
from .constraint import JsonSchemaConstraint
from .ensemble import EnsembleConfig, GenerationResult, generate
from .errors import ConfigError, CrossvocabError, LengthMismatch
from . import trace as trace_io

# Malformed or failed outputs score as this always-wrong sentinel label.
INVALID_LABEL = "__invalid__"


@dataclass
class TaskSpec:
    name: str
    prompt_template: str
    constraint: JsonSchemaConstraint
    sample_limit: int | None = None

    def __post_init__(self):
        # literal slot count: templates may contain JSON braces of their own
        if self.prompt_template.count("{text}") != 1:
            raise ConfigError(
                "prompt_template must contain exactly one {text} slot"
            )

    def render(self, text: str) -> str:
        # Literal replacement: templates may themselves contain JSON braces.
        return self.prompt_template.replace("{text}", text)


@dataclass
class ExampleRecord:
    id: str
    text: str
    gold: str | frozenset[str]


def load_dataset(path: str | Path) -> list[ExampleRecord]:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                gold = obj["gold"]
                records.append(ExampleRecord(
                    id=str(obj["id"]),
                    text=obj["text"],
                    gold=frozenset(gold) if isinstance(gold, list) else gold,
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad dataset record: {exc}") from exc
    return records


def dataset_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    macro_f1: float
    accuracy: float
    per_class: dict[str, ClassMetrics]

    def to_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "per_class": {
                label: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for label, m in sorted(self.per_class.items())
            },
        }


def _as_set(value) -> frozenset[str]:
    if isinstance(value, str):
        return frozenset({value})
    return frozenset(value)


def macro_f1(preds: Sequence, golds: Sequence, labels: Sequence[str]) -> MetricsReport:
    """Per-class precision/recall/F1 with the 0-for-empty-denominator rule.

    The macro average is over classes with any gold or predicted support;
    classes absent on both sides do not dilute it.  Accuracy is exact match
    (set equality for multi-label inputs).
    """
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    if not labels:
        raise ValueError("labels must be non-empty")

    pred_sets = [_as_set(p) for p in preds]
    gold_sets = [_as_set(g) for g in golds]

    per_class: dict[str, ClassMetrics] = {}
    macro_terms = []
    for label in labels:
        tp = sum(1 for p, g in zip(pred_sets, gold_sets) if label in p and label in g)
        fp = sum(1 for p, g in zip(pred_sets, gold_sets) if label in p and label not in g)
        fn = sum(1 for p, g in zip(pred_sets, gold_sets) if label not in p and label in g)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[label] = ClassMetrics(precision, recall, f1, support=tp + fn)
        if tp + fp + fn:
            macro_terms.append(f1)

    accuracy = (
        sum(1 for p, g in zip(pred_sets, gold_sets) if p == g) / len(preds)
        if preds else 0.0
    )
    return MetricsReport(
        macro_f1=sum(macro_terms) / len(macro_terms) if macro_terms else 0.0,
        accuracy=accuracy,
        per_class=per_class,
    )


def extract_prediction(result_text: str, constraint: JsonSchemaConstraint):
    """Pull the label(s) out of a generated JSON object; sentinel on failure."""
    try:
        obj = json.loads(result_text)
        label = obj["label"]
        if constraint.arity == "array":
            if not isinstance(label, list) or not label:
                raise ValueError("label must be a non-empty array")
            return frozenset(label)
        if not isinstance(label, str):
            raise ValueError("label must be a string")
        return label
    except (ValueError, KeyError, TypeError):
        if constraint.arity == "array":
            return frozenset({INVALID_LABEL})
        return INVALID_LABEL


def select_samples(
    data: Sequence[ExampleRecord], limit: int | None, seed: int
) -> list[ExampleRecord]:
    """Seeded random subset, original order preserved."""
    if limit is None or limit >= len(data):
        return list(data)
    rng = random.Random(seed)
    indices = sorted(rng.sample(range(len(data)), limit))
    return [data[i] for i in indices]


def run_task(
    task: TaskSpec,
    cfg: EnsembleConfig,
    backends: Mapping[str, Backend],
    data: Sequence[ExampleRecord],
    *,
    seed: int = 0,
    out_dir: str | Path | None = None,
    manifest_extra: Mapping | None = None,
) -> tuple[MetricsReport, list[GenerationResult]]:
    """Constrained generation over every example, then metrics.

    Per-example generation errors are recorded and scored as the sentinel
    wrong label; they never abort the run.  When ``out_dir`` is given, all
    traces, the metrics report, and a run manifest are persisted there.
    """
    if not data:
        raise ValueError("dataset must be non-empty")
    label_set = set(task.constraint.labels)
    for ex in data:
        golds_of = {ex.gold} if isinstance(ex.gold, str) else set(ex.gold)
        if not golds_of <= label_set:
            raise ConfigError(
                f"example {ex.id}: gold {sorted(golds_of - label_set)} "
                f"not in the constraint's label set"
            )
    samples = select_samples(data, task.sample_limit, seed)

    results: list[GenerationResult] = []
    preds = []
    golds = []
    errors: list[dict] = []
    for ex in samples:
        golds.append(ex.gold)
        try:
            result = generate(task.render(ex.text), cfg, backends, task.constraint)
        except CrossvocabError as exc:
            errors.append({"id": ex.id, "error": f"{type(exc).__name__}: {exc}"})
            preds.append(
                frozenset({INVALID_LABEL}) if task.constraint.arity == "array"
                else INVALID_LABEL
            )
            results.append(GenerationResult(
                text="", steps=[], finish_reason="error",
                method=cfg.method, prompt=task.render(ex.text),
            ))
            continue
        results.append(result)
        preds.append(extract_prediction(result.text, task.constraint))

    report = macro_f1(preds, golds, list(task.constraint.labels))

    if out_dir is not None:
        out_dir = Path(out_dir)
        traces_dir = out_dir / "traces"
        traces_dir.mkdir(parents=True, exist_ok=True)
        for ex, result in zip(samples, results):
            trace_io.write_generation(result, traces_dir / f"{ex.id}.jsonl")
        (out_dir / "metrics.json").write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        manifest = {
            "task": task.name,
            "method": cfg.method,
            "k": cfg.k,
            "alpha": cfg.alpha,
            "max_tokens": cfg.max_tokens,
            "seed": seed,
            "sample_ids": [ex.id for ex in samples],
            "backend_ids": {role: b.id for role, b in backends.items()},
            "errors": errors,
        }
        if manifest_extra:
            manifest.update(manifest_extra)
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return report, results

"""Step-trace persistence.

A trace file is JSONL: one header line carrying the schema version and the
run-level fields (method, prompt, final text, finish reason), then one
StepRecord per line with field names matching the in-memory types.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

from .ensemble import GenerationResult, StepRecord

SCHEMA = "crossvocab.trace.v1"


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False)


def write_generation(result: GenerationResult, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(_dumps({
            "schema": SCHEMA,
            "method": result.method,
            "prompt": result.prompt,
            "text": result.text,
            "finish_reason": result.finish_reason,
        }) + "\n")
        for step in result.steps:
            fh.write(_dumps(step.to_dict()) + "\n")


def read_generation(path: str | Path) -> GenerationResult:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != SCHEMA:
            raise ValueError(f"{path} is not a {SCHEMA} trace file")
        steps = [StepRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
    return GenerationResult(
        text=header["text"],
        steps=steps,
        finish_reason=header["finish_reason"],
        method=header["method"],
        prompt=header["prompt"],
    )


def read_traces_dir(directory: str | Path) -> Iterator[GenerationResult]:
    """Yield every trace in a directory, sorted by filename."""
    for path in sorted(Path(directory).glob("*.jsonl")):
        yield read_generation(path)

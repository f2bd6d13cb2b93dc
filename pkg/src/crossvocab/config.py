"""Declarative run configuration.

One JSON file describes the backends, the ensembling settings, and the
optional task and analysis sections.  Unknown keys are rejected and every
referenced file must exist at load time, so a config that loads is a config
that can run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .backends import Backend, make_toy_model
from .constraint import JsonSchemaConstraint, load_constraint
from .ensemble import EnsembleConfig, roles_for
from .errors import ConfigError
from .harness import TaskSpec

CONFIG_VERSION = 1

_TOP_KEYS = {"version", "output_dir", "backends", "ensemble", "constraint_path",
             "task", "analysis"}
_BACKEND_KEYS = {"id", "kind", "url", "toy_spec_path", "prompt_prefix",
                 "prompt_suffix", "timeout_ms", "retries"}
_ENSEMBLE_KEYS = {"method", "k", "alpha", "max_tokens", "stop_sequences", "roles"}
_TASK_KEYS = {"name", "prompt_template", "constraint_path", "dataset_path",
              "sample_limit", "seed"}
_ANALYSIS_KEYS = {"category_map_path", "min_freq", "top_frac"}


def _check_keys(obj: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _existing_path(base: Path, value: str, where: str) -> Path:
    path = (base / value).resolve() if not Path(value).is_absolute() else Path(value)
    if not path.exists():
        raise ConfigError(f"{where} references missing file: {path}")
    return path


@dataclass
class RunConfig:
    path: Path
    base_dir: Path
    output_dir: Path
    backends_spec: dict
    ensemble: EnsembleConfig
    roles: dict[str, str]
    constraint_path: Path | None
    task: dict | None
    analysis: dict

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        _check_keys(raw, _TOP_KEYS, str(path))
        if raw.get("version") != CONFIG_VERSION:
            raise ConfigError(
                f"config {path}: version must be {CONFIG_VERSION}, got {raw.get('version')!r}"
            )
        base = path.parent

        backends_raw = raw.get("backends")
        if not isinstance(backends_raw, dict) or not backends_raw:
            raise ConfigError(f"config {path}: 'backends' must be a non-empty object")
        backends_spec = {}
        for name, spec in backends_raw.items():
            _check_keys(spec, _BACKEND_KEYS, f"backends.{name}")
            kind = spec.get("kind")
            if kind == "toy":
                spec_path = spec.get("toy_spec_path")
                if not spec_path:
                    raise ConfigError(f"backends.{name}: toy backend needs toy_spec_path")
                resolved = _existing_path(base, spec_path, f"backends.{name}.toy_spec_path")
                backends_spec[name] = {**spec, "toy_spec_path": str(resolved)}
            elif kind == "remote":
                if not spec.get("url"):
                    raise ConfigError(f"backends.{name}: remote backend needs url")
                backends_spec[name] = dict(spec)
            else:
                raise ConfigError(f"backends.{name}: kind must be 'toy' or 'remote'")

        ensemble_raw = dict(raw.get("ensemble") or {})
        _check_keys(ensemble_raw, _ENSEMBLE_KEYS, "ensemble")
        roles = ensemble_raw.pop("roles", None)
        if not isinstance(roles, dict) or not roles:
            raise ConfigError("ensemble.roles must map role names to backend names")
        ensemble = EnsembleConfig(**ensemble_raw)
        for role in roles_for(ensemble.method):
            if role not in roles:
                raise ConfigError(f"ensemble.roles is missing role {role!r} "
                                  f"required by method {ensemble.method}")
            if roles[role] not in backends_spec:
                raise ConfigError(f"ensemble.roles.{role} references unknown backend "
                                  f"{roles[role]!r}")

        constraint_path = None
        if raw.get("constraint_path"):
            constraint_path = _existing_path(base, raw["constraint_path"], "constraint_path")

        task = None
        if raw.get("task") is not None:
            task = dict(raw["task"])
            _check_keys(task, _TASK_KEYS, "task")
            for key in ("prompt_template", "constraint_path", "dataset_path"):
                if key not in task:
                    raise ConfigError(f"task section is missing {key!r}")
            task["constraint_path"] = str(
                _existing_path(base, task["constraint_path"], "task.constraint_path")
            )
            task["dataset_path"] = str(
                _existing_path(base, task["dataset_path"], "task.dataset_path")
            )

        analysis = dict(raw.get("analysis") or {})
        _check_keys(analysis, _ANALYSIS_KEYS, "analysis")
        if analysis.get("category_map_path"):
            analysis["category_map_path"] = str(
                _existing_path(base, analysis["category_map_path"],
                               "analysis.category_map_path")
            )

        out = raw.get("output_dir", "runs")
        output_dir = (base / out) if not Path(out).is_absolute() else Path(out)
        return cls(
            path=path, base_dir=base, output_dir=output_dir,
            backends_spec=backends_spec, ensemble=ensemble, roles=roles,
            constraint_path=constraint_path, task=task, analysis=analysis,
        )

    def build_backends(self) -> dict[str, Backend]:
        """Instantiate every named backend once."""
        from .remote import RemoteBackend  # deferred: requests only when needed

        built: dict[str, Backend] = {}
        for name, spec in self.backends_spec.items():
            if spec["kind"] == "toy":
                backend = make_toy_model(spec["toy_spec_path"], id=spec.get("id", name))
                backend.prompt_prefix = spec.get("prompt_prefix", backend.prompt_prefix)
                backend.prompt_suffix = spec.get("prompt_suffix", backend.prompt_suffix)
            else:
                backend = RemoteBackend(
                    spec.get("id", name),
                    spec["url"],
                    prompt_prefix=spec.get("prompt_prefix", ""),
                    prompt_suffix=spec.get("prompt_suffix", ""),
                    timeout_ms=spec.get("timeout_ms", 30_000),
                    retries=spec.get("retries", 2),
                )
            built[name] = backend
        return built

    def role_backends(self, built: dict[str, Backend] | None = None) -> dict[str, Backend]:
        """Role name -> backend handle; aliased roles share one handle."""
        built = built if built is not None else self.build_backends()
        return {role: built[name] for role, name in self.roles.items()}

    def generation_constraint(self) -> JsonSchemaConstraint | None:
        if self.constraint_path is None:
            return None
        return load_constraint(self.constraint_path)

    def task_spec(self) -> TaskSpec:
        if self.task is None:
            raise ConfigError(f"config {self.path} has no task section")
        return TaskSpec(
            name=self.task.get("name", "task"),
            prompt_template=self.task["prompt_template"],
            constraint=load_constraint(self.task["constraint_path"]),
            sample_limit=self.task.get("sample_limit"),
        )

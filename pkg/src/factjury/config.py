"""Configuration: factjury.toml parsing, env overrides, provider wiring.

Precedence for any setting is command-line flag, then environment
variable, then the config file, then the built-in default. Secrets never
live in the file; http providers name the env var holding their key.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import InvariantViolation
from .jury import JudgePanel
from .provider import HttpBackend, PriceTable, ProviderRouter, ReplayBackend

ENV_CONFIG = "FACTJURY_CONFIG"
ENV_MODEL = "FACTJURY_MODEL"
ENV_PANEL = "FACTJURY_PANEL"
ENV_MAX_WORKERS = "FACTJURY_MAX_WORKERS"

_PROVIDER_KINDS = ("http", "replay")


@dataclass(frozen=True)
class ProviderSpec:
    name: str
    kind: str
    models: tuple[str, ...]
    base_url: str = ""
    api_key_env: str = ""
    fixture: str = ""

    def validate(self) -> None:
        if self.kind not in _PROVIDER_KINDS:
            raise InvariantViolation(
                f"provider {self.name}: unknown kind {self.kind!r}; "
                f"expected one of {_PROVIDER_KINDS}")
        if not self.models:
            raise InvariantViolation(f"provider {self.name} lists no models")
        if self.kind == "http" and not self.base_url:
            raise InvariantViolation(f"http provider {self.name} needs base_url")
        if self.kind == "replay" and not self.fixture:
            raise InvariantViolation(f"replay provider {self.name} needs a fixture path")


@dataclass(frozen=True)
class WorkflowSettings:
    generation_model: str = ""
    assistant_model: str = ""
    summarizer_model: str = ""
    include_allied_health: bool = True
    context_budget_chars: int = 400_000
    max_output_tokens: int = 1600


@dataclass(frozen=True)
class PathSettings:
    corpus: str = "corpus"
    benchmark: str = "benchmark"
    runs: str = "runs"
    metaeval: str = "metaeval"
    report: str = "report"


@dataclass(frozen=True)
class AppConfig:
    providers: tuple[ProviderSpec, ...] = ()
    prices: Mapping[str, Mapping] = field(default_factory=dict)
    panels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    workflow: WorkflowSettings = WorkflowSettings()
    paths: PathSettings = PathSettings()
    max_workers: int = 4

    def panel(self, name: str) -> JudgePanel:
        if name not in self.panels:
            raise InvariantViolation(
                f"panel {name!r} is not defined; configured panels: "
                f"{sorted(self.panels) or 'none'}")
        panel = JudgePanel(panel_id=name, judges=tuple(self.panels[name]))
        panel.validate()
        return panel

    def price_table(self) -> PriceTable | None:
        if not self.prices:
            return None
        return PriceTable.from_mapping(self.prices)

    def registered_models(self) -> set[str]:
        return {m for spec in self.providers for m in spec.models}


def _section(doc: Mapping, key: str, path: Path) -> Mapping:
    value = doc.get(key, {})
    if not isinstance(value, Mapping):
        raise InvariantViolation(f"{path}: [{key}] must be a table")
    return value


def load_config(path: Path | str) -> AppConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise InvariantViolation(f"cannot read config: {exc}", file=str(path)) from None

    providers = []
    for name, body in _section(doc, "provider", path).items():
        if not isinstance(body, Mapping):
            raise InvariantViolation(f"{path}: [provider.{name}] must be a table")
        spec = ProviderSpec(
            name=name,
            kind=str(body.get("kind", "http")),
            models=tuple(body.get("models", ())),
            base_url=str(body.get("base_url", "")),
            api_key_env=str(body.get("api_key_env", "")),
            fixture=str(body.get("fixture", "")),
        )
        spec.validate()
        providers.append(spec)

    panels = {}
    for name, judges in _section(doc, "panels", path).items():
        if not isinstance(judges, list) or not all(isinstance(j, str) for j in judges):
            raise InvariantViolation(f"{path}: panel {name!r} must be a list of judges")
        panels[name] = tuple(judges)

    workflow_doc = _section(doc, "workflow", path)
    workflow = WorkflowSettings(
        generation_model=str(workflow_doc.get("generation_model", "")),
        assistant_model=str(workflow_doc.get("assistant_model", "")),
        summarizer_model=str(workflow_doc.get("summarizer_model", "")),
        include_allied_health=bool(workflow_doc.get("include_allied_health", True)),
        context_budget_chars=int(workflow_doc.get("context_budget_chars", 400_000)),
        max_output_tokens=int(workflow_doc.get("max_output_tokens", 1600)),
    )

    paths_doc = _section(doc, "paths", path)
    paths = PathSettings(**{k: str(paths_doc[k]) for k in
                            ("corpus", "benchmark", "runs", "metaeval", "report")
                            if k in paths_doc})

    config = AppConfig(
        providers=tuple(providers),
        prices=dict(_section(doc, "prices", path)),
        panels=panels,
        workflow=workflow,
        paths=paths,
        max_workers=int(doc.get("max_workers", 4)),
    )
    config.price_table()  # fail early on malformed prices
    return config


def resolve_setting(flag, env_name: str, config_value, default=None):
    """flag > env > config file > default; empty strings do not count."""
    if flag not in (None, ""):
        return flag
    env = os.environ.get(env_name, "")
    if env:
        return env
    if config_value not in (None, ""):
        return config_value
    return default


def build_router(config: AppConfig, base_dir: Path | str = ".") -> ProviderRouter:
    """Instantiate backends and bind every configured model to one."""
    base_dir = Path(base_dir)
    router = ProviderRouter(max_in_flight=config.max_workers)
    for spec in config.providers:
        spec.validate()
        if spec.kind == "replay":
            fixture = Path(spec.fixture)
            if not fixture.is_absolute():
                fixture = base_dir / fixture
            backend = ReplayBackend.from_file(fixture)
            # distinct replay providers must not collide in the router
            backend.provider_id = f"replay:{spec.name}"
        else:
            backend = HttpBackend(
                provider_id=spec.name,
                base_url=spec.base_url,
                api_key=os.environ.get(spec.api_key_env, "") if spec.api_key_env else "",
            )
        router.register(backend, spec.models)
    return router


__all__ = [
    "ProviderSpec", "WorkflowSettings", "PathSettings", "AppConfig",
    "load_config", "resolve_setting", "build_router",
    "ENV_CONFIG", "ENV_MODEL", "ENV_PANEL", "ENV_MAX_WORKERS",
]

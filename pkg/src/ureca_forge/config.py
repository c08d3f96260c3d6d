"""Run configuration: flat ``section.key = value`` files over built-in defaults.

Precedence is command-line flag > config file > default. The config file is
located by ``--config`` or, failing that, the ``URECA_FORGE_CONFIG``
environment variable.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .clients import RetryPolicy
from .encoder import SplitConfig
from .errors import ConfigError
from .grouping import SimilarityParams
from .pipeline import PipelineConfig
from .render import RenderParams
from .tree import TreeParams

ENV_VAR = "URECA_FORGE_CONFIG"


@dataclass(frozen=True)
class ServiceConfig:
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.2
    max_tokens: int = 512
    timeout: float = 60.0


@dataclass(frozen=True)
class ConcurrencyConfig:
    mllm: int = 4
    embed: int = 8
    image: int = 1

    def __post_init__(self):
        for name in ("mllm", "embed", "image"):
            if getattr(self, name) < 1:
                raise ConfigError(f"concurrency.{name} must be >= 1")


@dataclass(frozen=True)
class RunSection:
    workdir: str = "ureca_runs"
    seed: int = 0
    verify: bool = False
    fixed_timestamp: int | None = None
    prompts_dir: str | None = None
    save_renders: bool = False


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    mllm: ServiceConfig = field(default_factory=lambda: ServiceConfig("http://127.0.0.1:8700", "internvl2.5-38b"))
    embed: ServiceConfig = field(default_factory=lambda: ServiceConfig("http://127.0.0.1:8700", "dinov2-vitl14"))
    # empty judge endpoint -> reuse the MLLM endpoint
    judge: ServiceConfig = field(default_factory=lambda: ServiceConfig("", "gpt-4o-mini-2024-07-18", temperature=0.0))
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    tree: TreeParams = field(default_factory=TreeParams)
    split: SplitConfig = field(default_factory=SplitConfig)
    similarity: SimilarityParams = field(default_factory=SimilarityParams)
    render: RenderParams = field(default_factory=RenderParams)
    concurrency: ConcurrencyConfig = field(default_factory=ConcurrencyConfig)

    @property
    def workdir(self) -> Path:
        return Path(self.run.workdir)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            tree=self.tree,
            render=self.render,
            similarity=self.similarity,
            mllm_concurrency=self.concurrency.mllm,
            embed_concurrency=self.concurrency.embed,
            verify=self.run.verify,
            fixed_timestamp=self.run.fixed_timestamp,
            save_renders=self.run.save_renders,
        )

    def get(self, key: str):
        section, name = _split_key(key)
        return getattr(getattr(self, section), name)

    def flat(self) -> dict[str, object]:
        return {k: self.get(k) for k in known_keys()}


def _split_key(key: str) -> tuple[str, str]:
    section, _, name = key.partition(".")
    if section not in _section_types() or name not in {f.name for f in dataclasses.fields(_section_types()[section])}:
        raise ConfigError(f"unknown config key {key!r}")
    return section, name


def _section_types() -> dict[str, type]:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(RunConfig)}


def known_keys() -> list[str]:
    return [f"{s}.{f.name}" for s, t in _section_types().items() for f in dataclasses.fields(t)]


def _convert(raw, hint, key: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {hint.__name__}") from None
    return text


def apply(cfg: RunConfig, settings: dict[str, object]) -> RunConfig:
    """Return ``cfg`` with dotted-key settings applied (validated by each section)."""
    sections = _section_types()
    updates: dict[str, dict] = {}
    for key, raw in settings.items():
        section, name = _split_key(key)
        hint = typing.get_type_hints(sections[section])[name]
        updates.setdefault(section, {})[name] = _convert(raw, hint, key)
    changed = {}
    for section, vals in updates.items():
        try:
            changed[section] = dataclasses.replace(getattr(cfg, section), **vals)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
    return dataclasses.replace(cfg, **changed)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        try:
            _split_key(key)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
        out[key] = value.strip()
    return out


def config_path(explicit: str | None) -> Path | None:
    if explicit:
        return Path(explicit)
    env = os.environ.get(ENV_VAR)
    return Path(env) if env else None


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        cfg = apply(cfg, parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    if overrides:
        cfg = apply(cfg, overrides)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.flat().items():
        if value is None:
            value = ""
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

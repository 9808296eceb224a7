"""YAML experiment configs: strict parsing with every default materialised."""

from __future__ import annotations

from pathlib import Path

import yaml
from pydantic import ValidationError

from hcfmtl.federation import ExperimentConfig


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds ``(key_path, message)`` pairs."""

    def __init__(self, message: str, errors: list[tuple[str, str]] | None = None):
        super().__init__(message)
        self.errors = errors or []


def _format_validation(exc: ValidationError) -> list[tuple[str, str]]:
    out = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        out.append((path, msg.removeprefix("Value error, ")))
    return out


def config_from_dict(data: object, source: str = "<config>") -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping, got {type(data).__name__}")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        errors = _format_validation(exc)
        lines = "\n".join(f"  {path}: {msg}" for path, msg in errors)
        raise ConfigError(f"{source}: invalid config\n{lines}", errors) from None


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from None
    return config_from_dict(data, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    """Materialised YAML; ``parse_config`` of this text returns an equal config."""
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False, allow_unicode=True)


def with_overrides(cfg: ExperimentConfig, seed: int | None = None, mode: str | None = None) -> ExperimentConfig:
    """Command-line overrides beat file values; the result is re-validated."""
    data = cfg.model_dump(mode="json")
    if seed is not None:
        data["seed"] = seed
    if mode is not None:
        data["mode"] = mode
    return config_from_dict(data, "<overrides>")

"""Experiment configuration for the command-line entry point: one versioned
JSON document covering every tunable, with dotted-path overrides from flags
and fail-closed validation that reports every violated constraint at once.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .evalsuite import DEFAULT_FRACTIONS, FinetuneSpec, ProbeSpec
from .trainer import PretrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists every violation."""


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    finetune: FinetuneSpec = field(default_factory=FinetuneSpec)
    clip_len: int = 4
    eval_k_clips: int = 7
    eval_spatial_views: int = 3
    semi_fractions: tuple[float, ...] = DEFAULT_FRACTIONS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @property
    def seed(self) -> int:
        return self.pretrain.seed


def _set_by_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config path {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def _coerce(value: str, like) -> object:
    """Parse a flag string into the type currently held at the target key."""
    if isinstance(like, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, (list, tuple)):
        return json.loads(value)
    return value


def _get_by_path(doc: dict, dotted: str):
    node = doc
    for key in dotted.split("."):
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config path {dotted!r}")
        node = node[key]
    return node


def build_config(
    json_path: str | Path | None = None,
    overrides: dict[str, str] | None = None,
    seed: int | None = None,
    objective: str | None = None,
) -> ExperimentConfig:
    """Resolve defaults <- JSON document <- dotted-path flag overrides."""
    doc = ExperimentConfig().to_dict()
    if json_path is not None:
        path = Path(json_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if loaded.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(
                f"config version {loaded.get('version')} unsupported "
                f"(expected {CONFIG_VERSION})"
            )
        _merge(doc, loaded)
    if seed is not None:
        doc["pretrain"]["seed"] = int(seed)
    if objective is not None:
        doc["pretrain"]["objective"] = objective
    for dotted, raw in (overrides or {}).items():
        current = _get_by_path(doc, dotted)
        _set_by_path(doc, dotted, _coerce(raw, current))
    return config_from_dict(doc)


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where)
        else:
            base[key] = value


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Construct the config, collecting every violated constraint."""
    errors: list[str] = []
    parts: dict = {}

    def attempt(name: str, builder):
        try:
            parts[name] = builder()
        except (ValueError, TypeError, KeyError) as exc:
            errors.append(f"{name}: {exc}")

    attempt("pretrain", lambda: PretrainConfig.from_dict(doc["pretrain"]))
    attempt(
        "probe",
        lambda: ProbeSpec(
            **{**doc["probe"], "crop_scale": tuple(doc["probe"]["crop_scale"])}
        ),
    )
    attempt(
        "finetune",
        lambda: FinetuneSpec(
            **{
                **doc["finetune"],
                "betas": tuple(doc["finetune"]["betas"]),
                "crop_scale": tuple(doc["finetune"]["crop_scale"]),
            }
        ),
    )
    if int(doc.get("clip_len", 1)) < 1:
        errors.append("clip_len: must be >= 1")
    if int(doc.get("eval_k_clips", 1)) < 1:
        errors.append("eval_k_clips: must be >= 1")
    if int(doc.get("eval_spatial_views", 1)) not in (1, 3):
        errors.append("eval_spatial_views: must be 1 or 3")
    for f in doc.get("semi_fractions", ()):
        if not 0.0 < float(f) <= 1.0:
            errors.append(f"semi_fractions: fraction {f} outside (0, 1]")

    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return ExperimentConfig(
        version=CONFIG_VERSION,
        pretrain=parts["pretrain"],
        probe=parts["probe"],
        finetune=parts["finetune"],
        clip_len=int(doc["clip_len"]),
        eval_k_clips=int(doc["eval_k_clips"]),
        eval_spatial_views=int(doc["eval_spatial_views"]),
        semi_fractions=tuple(float(f) for f in doc["semi_fractions"]),
    )

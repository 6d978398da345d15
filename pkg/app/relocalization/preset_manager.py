#!/usr/bin/env python3
"""
Preset Manager for the relocalizer

Builds a RunConfig from layered YAML configuration. Later layers win and
mappings merge recursively:

1. app/config/presets/base.yaml
2. app/config/presets/<preset>.yaml
3. an optional user file (--config)
4. command-line overrides
"""

import copy
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import yaml
from pydantic import ValidationError

from app.core.config import config
from app.core.logging import logger
from app.relocalization.models.config_models import RunConfig

BASE_PRESET = "base"


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; values in ``override`` win, lists are replaced whole."""
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class PresetManager:
    """Loads preset files and merges them into a validated RunConfig."""

    def __init__(self, presets_dir: Path = config.PRESETS_DIR):
        self.presets_dir = Path(presets_dir)
        if not self.presets_dir.is_dir():
            raise FileNotFoundError(f"Presets directory not found: {self.presets_dir}")

    def available(self) -> List[str]:
        return sorted(p.stem for p in self.presets_dir.glob("*.yaml") if p.stem != BASE_PRESET)

    def _load_yaml(self, path: Path) -> Dict[str, Any]:
        """Load one YAML layer; an empty file is an empty layer."""
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")

        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}

        if not isinstance(data, dict):
            raise ValueError(f"Config file {path} must hold a mapping, got {type(data).__name__}")
        logger.debug(f"Loaded config layer {path}")
        return data

    def get_preset(self, name: str) -> Dict[str, Any]:
        """Raw mapping of a named preset (without the base layer)."""
        path = self.presets_dir / f"{name}.yaml"
        if not path.exists():
            raise KeyError(f"Preset '{name}' not found, available: {', '.join(self.available())}")
        return self._load_yaml(path)

    def layers(
        self,
        preset: Optional[str] = None,
        user_file: Optional[Path] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> Dict[str, Any]:
        merged = self._load_yaml(self.presets_dir / f"{BASE_PRESET}.yaml")
        if preset:
            merged = deep_merge(merged, self.get_preset(preset))
        if user_file is not None:
            merged = deep_merge(merged, self._load_yaml(Path(user_file)))
        if overrides:
            merged = deep_merge(merged, overrides)
        return merged

    def build(
        self,
        preset: Optional[str] = None,
        user_file: Optional[Path] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> RunConfig:
        """Merge every layer and validate.

        Args:
            preset: Named preset layered over base.yaml
            user_file: Optional YAML file layered over the preset
            overrides: Nested mapping from command-line flags, applied last

        Returns:
            Validated RunConfig
        """
        merged = self.layers(preset, user_file, overrides)
        try:
            run_config = RunConfig(**merged)
        except ValidationError as e:
            raise ValueError(f"Invalid run configuration: {e}") from e
        logger.info(f"Run configuration: preset={preset or BASE_PRESET}" + (f", file={user_file}" if user_file else ""))
        return run_config

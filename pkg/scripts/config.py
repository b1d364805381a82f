#!/usr/bin/env python3
"""
Run Configuration and Presets

Named sampling presets, the optional YAML settings file and the resolved
per-run configuration used by the CLI.

Settings file (default ~/.vtts/config.yaml, or $VTTS_CONFIG):

    endpoint:
      base_url: http://localhost:8000/v1
      model: qwen2.5-vl-7b
      token_env: VTTS_API_TOKEN
      max_in_flight: 8
    media:
      decoder: "ffmpeg ... {input} ... {output}"
    itp:
      iterations: 3
      on_malformed: reuse_previous_plan
    rewards:
      lambda_clue: 1.0
      lambda_ans: 1.0
      lambda_fmt: 1.0
    presets:
      train:
        max_frames: 512
"""

import argparse
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from itp_engine import ItpConfig
from media import MediaCommands
from model_gateway import ModelEndpoint
from rewards import RewardWeights
from sampling import SamplingConfig

logger = logging.getLogger("vtts.config")

# Frame ranges differ between the three published setting tables; pixel
# bounds, fps and key ratio are shared.
PRESETS: Dict[str, SamplingConfig] = {
    "main-text": SamplingConfig(min_frames=64, max_frames=2048),
    "train": SamplingConfig(min_frames=4, max_frames=768),
    "appendix-eval": SamplingConfig(min_frames=4, max_frames=2048),
}

PRESET_ALIASES = {"eval": "appendix-eval"}

PRESET_NOTES = {
    "main-text": "implementation details: frames 64-2048",
    "train": "RL training settings: frames 4-768",
    "appendix-eval": "evaluation settings: frames 4-2048",
}

DEFAULT_PRESET = "main-text"

_ITP_KEYS = {
    "iterations", "on_malformed", "record_raw", "stop_on_repeat", "crop_margin", "caption_frames", "carry_answer_forward",
}


def canonical_preset(name: str) -> str:
    """Resolve aliases; ValueError for unknown names."""
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        known = ", ".join(sorted([*PRESETS, *PRESET_ALIASES]))
        raise ValueError(f"Unknown preset '{name}' (known: {known})")
    return name


def _known(cls, data: Dict[str, Any], section: str, allowed=None) -> Dict[str, Any]:
    names = allowed or {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        logger.warning("Ignoring unknown keys in '%s' section: %s", section, ", ".join(unknown))
    return {k: v for k, v in data.items() if k in names}


@dataclass
class VttsSettings:
    """Contents of the settings file, with defaults for anything absent."""
    endpoint: Dict[str, Any] = field(default_factory=dict)
    media: MediaCommands = field(default_factory=MediaCommands)
    itp: Dict[str, Any] = field(default_factory=dict)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    presets: Dict[str, SamplingConfig] = field(default_factory=lambda: dict(PRESETS))

    def sampling_for(self, preset: str) -> SamplingConfig:
        return self.presets[canonical_preset(preset)]

    def to_dict(self) -> dict:
        return {
            "endpoint": dict(self.endpoint),
            "media": dataclasses.asdict(self.media),
            "itp": dict(self.itp),
            "rewards": dataclasses.asdict(self.rewards),
            "presets": {name: dataclasses.asdict(cfg) for name, cfg in self.presets.items()},
        }


class ConfigLoader:
    """Load settings from YAML; a missing or broken file means defaults."""

    DEFAULT_CONFIG_PATH = Path.home() / ".vtts" / "config.yaml"

    def __init__(self, config_path: Optional[Path] = None):
        env_path = os.environ.get("VTTS_CONFIG")
        self.config_path = Path(config_path or env_path or self.DEFAULT_CONFIG_PATH)
        self._settings: Optional[VttsSettings] = None

    def load(self) -> VttsSettings:
        if self._settings is not None:
            return self._settings

        if not self.config_path.exists():
            self._settings = VttsSettings()
            return self._settings

        try:
            with open(self.config_path) as f:
                data = yaml.safe_load(f) or {}
            self._settings = self._parse_config(data)
        except Exception as e:
            logger.warning("Failed to load config %s: %s. Using defaults.", self.config_path, e)
            self._settings = VttsSettings()

        return self._settings

    def _parse_config(self, data: dict) -> VttsSettings:
        if not isinstance(data, dict):
            raise ValueError("top level must be a mapping")

        endpoint = _known(ModelEndpoint, data.get("endpoint") or {}, "endpoint")
        media = MediaCommands(**_known(MediaCommands, data.get("media") or {}, "media"))
        itp = _known(ItpConfig, data.get("itp") or {}, "itp", allowed=_ITP_KEYS)
        ItpConfig(**itp)  # validate early
        rewards = RewardWeights(**_known(RewardWeights, data.get("rewards") or {}, "rewards"))

        presets = dict(PRESETS)
        for name, overrides in (data.get("presets") or {}).items():
            canonical = canonical_preset(name)
            presets[canonical] = dataclasses.replace(
                presets[canonical], **_known(SamplingConfig, overrides or {}, f"presets.{name}"))

        return VttsSettings(endpoint=endpoint, media=media, itp=itp, rewards=rewards, presets=presets)

    def save(self, settings: VttsSettings, path: Optional[Path] = None) -> None:
        save_path = Path(path or self.config_path)
        save_path.parent.mkdir(parents=True, exist_ok=True)
        with open(save_path, "w") as f:
            yaml.safe_dump(settings.to_dict(), f, default_flow_style=False, sort_keys=False)
        self._settings = settings


@dataclass(frozen=True)
class RunConfig:
    """Everything one evaluation run needs, resolved from settings and flags."""
    preset: str
    endpoint: Optional[ModelEndpoint]
    itp: ItpConfig
    dataset: Path
    out_dir: Path
    concurrency: int = 1
    resume: bool = False

    def __post_init__(self):
        object.__setattr__(self, "preset", canonical_preset(self.preset))
        if self.concurrency < 1:
            raise ValueError(f"concurrency must be >= 1, got {self.concurrency}")

    def check_paths(self) -> None:
        """FileNotFoundError unless the input dataset exists."""
        if not Path(self.dataset).is_file():
            raise FileNotFoundError(f"Dataset not found: {self.dataset}")


def build_run_config(
    settings: VttsSettings,
    preset: str,
    dataset: Path,
    out_dir: Path,
    overrides: Optional[Dict[str, Any]] = None,
    concurrency: Optional[int] = None,
    resume: bool = False,
) -> RunConfig:
    """
    Merge settings, preset and command-line overrides.

    overrides keys (None values are ignored): base_url, model, iterations,
    key_ratio, fps, min_frames, max_frames.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    sampling = settings.sampling_for(preset)
    sampling_overrides = {k: overrides[k] for k in ("key_ratio", "fps", "min_frames", "max_frames") if k in overrides}
    if sampling_overrides:
        sampling = dataclasses.replace(sampling, **sampling_overrides)

    itp_fields = dict(settings.itp)
    if "iterations" in overrides:
        itp_fields["iterations"] = overrides["iterations"]
    itp = ItpConfig(sampling=sampling, **itp_fields)

    endpoint_fields = dict(settings.endpoint)
    for key in ("base_url", "model"):
        if key in overrides:
            endpoint_fields[key] = overrides[key]
    endpoint = None
    if endpoint_fields.get("base_url"):
        endpoint_fields.setdefault("model", "default")
        endpoint = ModelEndpoint(**endpoint_fields)

    if concurrency is None:
        concurrency = endpoint.max_in_flight if endpoint else 1

    return RunConfig(
        preset=preset,
        endpoint=endpoint,
        itp=itp,
        dataset=Path(dataset),
        out_dir=Path(out_dir),
        concurrency=concurrency,
        resume=resume,
    )


def preset_table() -> Tuple[dict, ...]:
    """One row per preset, for display."""
    rows = []
    for name, cfg in PRESETS.items():
        aliases = [a for a, target in PRESET_ALIASES.items() if target == name]
        rows.append({
            "name": name,
            "aliases": aliases,
            "note": PRESET_NOTES[name],
            **dataclasses.asdict(cfg),
        })
    return tuple(rows)


def main():
    """CLI for inspecting settings."""
    parser = argparse.ArgumentParser(description="Show VTTS settings")
    parser.add_argument("--config", type=str, help="Path to config file")
    parser.add_argument("--reset", action="store_true", help="Write defaults to the config file")
    args = parser.parse_args()

    loader = ConfigLoader(Path(args.config) if args.config else None)
    if args.reset:
        loader.save(VttsSettings())
        print(f"Configuration reset to defaults: {loader.config_path}")
        return

    print(yaml.safe_dump(loader.load().to_dict(), default_flow_style=False, sort_keys=False))


if __name__ == "__main__":
    main()

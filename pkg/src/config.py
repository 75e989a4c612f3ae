"""Application config & constants, plus config-file precedence resolution"""
import dataclasses
import enum
import json
from typing import Any, Dict, Optional

from utils.errors import ConfigError

# App metadata
APP_NAME = "rotkp"
APP_TITLE = "Two-keypoint oriented detector core"
APP_VERSION = "1.0.0"

# Encoder defaults (d, μ, vertex shrink, truncation floor)
DOWN_RATIO = 4
MU = 0.125
VERTEX_SHRINK = 0.9
VALUE_FLOOR = 1e-4
GAUSSIAN_SIGMA_RULE = 6.0

# Decoder defaults (top-k peaks, confidence, matching radius)
TOP_K = 200
SCORE_THRESHOLD = 0.25
MATCH_RADIUS_FACTOR = 0.25
MIN_MATCH_RADIUS = 2.0
NMS_IOU = 0.5

# Preprocessing defaults
LETTERBOX_TARGET = (800, 800)
TILE_SIZE = 1024
TILE_GAP = 200

# Largest image side inferred from annotation extents alone
MAX_INFERRED_IMAGE_SIDE = 32768

# Evaluation defaults
EVAL_IOU_THRESHOLD = 0.5

# Sections accepted in a --config file
CONFIG_SECTIONS = ("encoder", "decoder", "evaluation", "synth")


def load_config_file(path: Optional[str]) -> Dict[str, Dict]:
    """Load a JSON config file; missing path → empty config"""
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc

    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")

    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")

    for section, values in data.items():
        if not isinstance(values, dict):
            raise ConfigError(f"config section '{section}' must be an object")
    return data


def _coerce(field: dataclasses.Field, value: Any) -> Any:
    """Convert JSON/CLI values into the field's declared type where it matters"""
    default = field.default
    if isinstance(default, enum.Enum):
        try:
            return type(default)(value)
        except ValueError as exc:
            choices = ", ".join(member.value for member in type(default))
            raise ConfigError(f"{field.name}: '{value}' not one of {choices}") from exc
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int) and not isinstance(value, bool):
        return int(value)
    if isinstance(default, float) and value is not None:
        return float(value)
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def resolve_section(defaults, file_section: Optional[Dict] = None, overrides: Optional[Dict] = None):
    """
    Resolve one config dataclass with precedence defaults < config file < flags.

    Flag overrides equal to None are treated as "not given".
    """
    fields = {f.name: f for f in dataclasses.fields(defaults)}
    merged: Dict[str, Any] = {}

    for source in (file_section or {}, overrides or {}):
        for key, value in source.items():
            if key not in fields:
                raise ConfigError(f"unknown option '{key}' for {type(defaults).__name__}")
            if value is None:
                continue
            merged[key] = _coerce(fields[key], value)

    # dataclass __post_init__ validates the result
    return dataclasses.replace(defaults, **merged)


def config_to_dict(config) -> Dict[str, Any]:
    """JSON-friendly echo of a config dataclass"""
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, enum.Enum):
            value = value.value
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out

"""
Configuration loading: app.yaml profiles, environment overrides and config files.

Uses IESR_PROFILE to pick a profile section of app.yaml:
- 'synthetic' (default) -> profile_synthetic
- 'real_world'          -> profile_real_world

Individual settings can be overridden via environment variables:
- IESR_THREADS (render.num_threads), IESR_SEED (seed), IESR_WORKSPACE (viewer workspace)

Precedence, lowest first: model defaults, app.yaml profile, environment,
config file, command-line flags (with `--set KEY=VALUE` applied last).
"""
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Type, TypeVar

import yaml
from pydantic import BaseModel, ValidationError

from splat_models import ExperimentSpec, TrainConfig
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

PROFILE_ENV = "IESR_PROFILE"
DEFAULT_PROFILE = "synthetic"


def load_app_yaml(path: Optional[Path] = None) -> Dict:
    """Load and parse app.yaml; an absent file yields an empty mapping."""
    possible_paths = [Path(path)] if path else [
        Path("app.yaml"),
        Path(__file__).parent.parent / "app.yaml",
        Path(os.getcwd()) / "app.yaml",
    ]
    for yaml_path in possible_paths:
        if yaml_path.exists():
            try:
                with open(yaml_path, "r", encoding="utf-8") as f:
                    return yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError(f"Failed to parse app.yaml at {yaml_path}: {e}") from e
    logger.debug(f"app.yaml not found in {[str(p) for p in possible_paths]}; using model defaults")
    return {}


def get_profile_name() -> str:
    return os.getenv(PROFILE_ENV, DEFAULT_PROFILE).lower()


def get_profile(app_config: Optional[Dict] = None) -> Dict[str, Any]:
    """The TrainConfig overrides of the active profile."""
    config = load_app_yaml() if app_config is None else app_config
    name = get_profile_name()
    key = f"profile_{name}"
    if not config:
        return {}
    if key not in config:
        available = ", ".join(k[len("profile_"):] for k in config if k.startswith("profile_"))
        raise ConfigurationError(f"Profile '{name}' not found in app.yaml. Available profiles: {available}")
    section = config[key] or {}
    if not isinstance(section, dict):
        raise ConfigurationError(f"app.yaml section '{key}' must be a mapping")
    return section


def env_overrides() -> Dict[str, Any]:
    """TrainConfig overrides taken from IESR_* environment variables."""
    overrides: Dict[str, Any] = {}
    threads = os.getenv("IESR_THREADS")
    if threads:
        overrides["render.num_threads"] = _parse_value(threads)
    seed = os.getenv("IESR_SEED")
    if seed:
        overrides["seed"] = _parse_value(seed)
    return overrides


def get_workspace_dir() -> Path:
    return Path(os.getenv("IESR_WORKSPACE") or os.getenv("WORKSPACE_DIR") or os.getcwd())


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def parse_config_file(path: Path) -> Dict[str, Any]:
    """
    Read a `--config` file: YAML for .yaml/.yml, otherwise flat `key = value`
    lines (values parsed as YAML scalars/lists, `#` starts a comment).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e}") from e
    if path.suffix.lower() in (".yaml", ".yml"):
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"{path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        return data
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{path}:{lineno}: empty key")
        values[key] = _parse_value(value)
    return values


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    """
    `--set KEY=VALUE` pairs as a flat override layer. Values are parsed like
    config-file values; key validity is left to merge_layers.
    """
    values: Dict[str, Any] = {}
    for item in items:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"Expected KEY=VALUE, got '{item}'")
        values[key] = _parse_value(value.strip())
    return values


def _field_paths(model_cls: Type[BaseModel], prefix: str = "") -> Dict[str, str]:
    """Map every field name (bare and dotted) of a nested model to its dotted path."""
    paths: Dict[str, str] = {}
    for name, info in model_cls.model_fields.items():
        dotted = f"{prefix}{name}"
        paths[dotted] = dotted
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            for key, value in _field_paths(annotation, f"{dotted}.").items():
                paths.setdefault(key, value)
                bare = key.rsplit(".", 1)[-1]
                paths.setdefault(bare, value)
    return paths


def _flatten(data: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _set_dotted(target: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = target
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def merge_layers(model_cls: Type[M], layers: Iterable[Dict[str, Any]]) -> M:
    """
    Build `model_cls` from override layers applied lowest-precedence first.

    Keys may be nested mappings, dotted paths or bare field names of a nested
    model (e.g. `threshold` for `loss.threshold`).
    """
    paths = _field_paths(model_cls)
    data: Dict[str, Any] = {}
    for layer in layers:
        for key, value in _flatten(layer or {}).items():
            key = key.replace("-", "_")
            if key not in paths:
                raise ConfigurationError(f"Unknown configuration key '{key}'")
            _set_dotted(data, paths[key], value)
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e


def resolve_train_config(config_file: Optional[Path] = None, flags: Optional[Dict[str, Any]] = None,
                         app_config: Optional[Dict] = None) -> TrainConfig:
    """TrainConfig with every configuration layer applied."""
    layers = [get_profile(app_config), env_overrides()]
    if config_file:
        layers.append(parse_config_file(config_file))
    layers.append(flags or {})
    config = merge_layers(TrainConfig, layers)
    logger.info(f"Training configuration resolved (profile={get_profile_name()}, "
                f"threshold={config.loss.threshold}, iterations={config.iterations})")
    return config


def resolve_experiment_spec(config_file: Optional[Path] = None, flags: Optional[Dict[str, Any]] = None,
                            app_config: Optional[Dict] = None) -> ExperimentSpec:
    """ExperimentSpec; profile and environment layers land under `train`."""
    layers = [get_profile(app_config), env_overrides()]
    scoped = [{f"train.{k}": v for k, v in _flatten(layer).items()} for layer in layers]
    seed = os.getenv("IESR_SEED")
    if seed:
        scoped.append({"seed": _parse_value(seed)})
    if config_file:
        scoped.append(parse_config_file(config_file))
    scoped.append(flags or {})
    return merge_layers(ExperimentSpec, scoped)

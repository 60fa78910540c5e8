"""
Configuration loader for experiment YAML files.
"""

from pathlib import Path
from typing import Any, Dict, Optional, Tuple
import logging
import os
import re

import yaml
from dotenv import load_dotenv

from ..core.errors import ConfigurationError
from ..core.model import ModelConfig
from ..core.trainer import AdamConfig, TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = ("model", "training", "data", "logging")
_ENV_PATTERN = re.compile(r'\$\{([^}:]+)(?::([^}]*))?\}')


class ConfigLoader:
    """
    Handles loading and validation of experiment configuration files.

    Features:
    - YAML configuration file loading
    - Environment variable substitution (``.env`` files included)
    - Validation against the model and training configuration types
    - Default value handling
    """

    @staticmethod
    def load_environment(env_file: Optional[str] = None) -> bool:
        """Load variables from a ``.env`` file without overriding the process environment."""
        return load_dotenv(dotenv_path=env_file, override=False)

    @staticmethod
    def load_experiment_config(config_path: str) -> Dict[str, Any]:
        """
        Load an experiment configuration.

        Args:
            config_path: Path to the YAML file

        Returns:
            Configuration dictionary with every section present

        Raises:
            ConfigurationError: If the file is missing, malformed or invalid
        """
        config_path = Path(config_path)
        if not config_path.exists():
            raise ConfigurationError([f"Configuration file not found: {config_path}"], source=str(config_path))

        try:
            with open(config_path, 'r', encoding='utf-8') as file:
                config = yaml.safe_load(file)
        except yaml.YAMLError as e:
            raise ConfigurationError([f"Invalid YAML: {e}"], source=str(config_path))

        if not config:
            raise ConfigurationError(["Empty configuration file"], source=str(config_path))
        if not isinstance(config, dict):
            raise ConfigurationError(["Top level must be a mapping"], source=str(config_path))

        ConfigLoader.load_environment()
        config = ConfigLoader._substitute_env_vars(config)
        errors = ConfigLoader._validate_experiment_config(config)
        if errors:
            raise ConfigurationError(errors, source=str(config_path))

        config = ConfigLoader.deep_merge(ConfigLoader.get_default_config(), config)
        logger.debug(f"Loaded experiment configuration from {config_path}")
        return config

    @staticmethod
    def save_config(config: Dict[str, Any], config_path: str):
        config_path = Path(config_path)
        config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(config_path, 'w', encoding='utf-8') as file:
            yaml.safe_dump(config, file, default_flow_style=False, indent=2, sort_keys=False)
        logger.debug(f"Saved configuration to {config_path}")

    @staticmethod
    def _substitute_env_vars(config: Any) -> Any:
        """
        Recursively substitute environment variables in configuration.

        Supports ${VAR_NAME} and ${VAR_NAME:default_value} syntax.
        """
        if isinstance(config, dict):
            return {key: ConfigLoader._substitute_env_vars(value) for key, value in config.items()}
        elif isinstance(config, list):
            return [ConfigLoader._substitute_env_vars(item) for item in config]
        elif isinstance(config, str):
            return ConfigLoader._substitute_env_var_string(config)
        else:
            return config

    @staticmethod
    def _substitute_env_var_string(value: str) -> Any:
        """
        Substitute environment variables in a string.

        A value that is exactly one placeholder is re-read as YAML, so
        ``${ITERS:5000}`` yields the integer 5000.
        """
        def replacer(match):
            default_value = match.group(2) if match.group(2) is not None else ""
            return os.getenv(match.group(1), default_value)

        substituted = _ENV_PATTERN.sub(replacer, value)
        if substituted != value and _ENV_PATTERN.fullmatch(value):
            try:
                return yaml.safe_load(substituted) if substituted else substituted
            except yaml.YAMLError:
                return substituted
        return substituted

    @staticmethod
    def _validate_experiment_config(config: Dict[str, Any]) -> list:
        errors = []
        unknown = [key for key in config if key not in SECTIONS]
        if unknown:
            errors.append(f"Unknown section(s): {', '.join(unknown)}")
        for section in SECTIONS:
            if section in config and not isinstance(config[section], dict):
                errors.append(f"Section '{section}' must be a mapping")
        if errors:
            return errors

        model_fields = set(ModelConfig.__dataclass_fields__)
        train_fields = set(TrainConfig.__dataclass_fields__)
        for key in config.get("model", {}):
            if key not in model_fields:
                errors.append(f"Unknown model field: {key}")
        for key in config.get("training", {}):
            if key not in train_fields:
                errors.append(f"Unknown training field: {key}")
        adam = config.get("training", {}).get("adam", {})
        if not isinstance(adam, dict):
            errors.append("training.adam must be a mapping")
        else:
            errors.extend(f"Unknown adam field: {key}" for key in adam if key not in AdamConfig.__dataclass_fields__)
        return errors

    @staticmethod
    def get_default_config() -> Dict[str, Any]:
        return {
            "model": ModelConfig().to_dict(),
            "training": TrainConfig().to_dict(),
            "data": {"test_fraction": 0.1, "target": None},
            "logging": {
                "level": "INFO",
                "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            },
        }

    @staticmethod
    def deep_merge(base: dict, update: dict) -> dict:
        result = base.copy()
        for key, value in update.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = ConfigLoader.deep_merge(result[key], value)
            else:
                result[key] = value
        return result

    @staticmethod
    def to_configs(config: Dict[str, Any]) -> Tuple[ModelConfig, TrainConfig]:
        """Typed, validated configuration objects from a loaded dictionary."""
        model_config = ModelConfig.from_dict(config.get("model", {}))
        train_config = TrainConfig.from_dict(config.get("training", {}))
        errors = model_config.validate() + train_config.validate()
        if errors:
            raise ConfigurationError(errors)
        return model_config, train_config

    @staticmethod
    def validate_config_file(config_path: str) -> Tuple[bool, list]:
        """
        Validate a configuration file.

        Returns:
            Tuple of (is_valid, list_of_errors)
        """
        try:
            config = ConfigLoader.load_experiment_config(config_path)
            ConfigLoader.to_configs(config)
        except ConfigurationError as e:
            return False, e.errors
        except (TypeError, ValueError) as e:
            return False, [f"Error validating configuration: {e}"]
        return True, []

    @staticmethod
    def list_config_files(directory: str, pattern: str = "*.yaml") -> list:
        directory_path = Path(directory)
        if not directory_path.exists():
            return []
        return sorted(directory_path.glob(pattern))

    @staticmethod
    def get_config_info(config_path: str) -> Dict[str, Any]:
        """Basic information about a configuration file (for listings)."""
        is_valid, errors = ConfigLoader.validate_config_file(config_path)
        if not is_valid:
            return {"path": str(config_path), "valid": False, "errors": errors}
        model_config, train_config = ConfigLoader.to_configs(ConfigLoader.load_experiment_config(config_path))
        return {
            "path": str(config_path),
            "valid": True,
            "model_tag": model_config.tag,
            "flow": model_config.flow,
            "m_inducing": model_config.m_inducing,
            "iterations": train_config.iterations,
        }

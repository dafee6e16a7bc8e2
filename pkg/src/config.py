"""
Configuration management for the ehvm toolchain.
"""

import os
import yaml
from typing import Dict, Any, Optional
from dotenv import load_dotenv

from .errors import ConfigError

# Load environment variables
load_dotenv()


def _env_bool(name: str) -> Optional[bool]:
    value = os.getenv(name)
    if value is None:
        return None
    return value.strip().lower() in ('1', 'true', 'yes', 'on')


def _env_int(name: str) -> Optional[int]:
    value = os.getenv(name)
    if value is None or not value.strip():
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {value!r}")


def _pick(*values):
    """Return the first value that is not None."""
    for value in values:
        if value is not None:
            return value
    return None


class Config:
    """Configuration class for the ehvm toolchain."""

    def __init__(self, config_dict: Dict[str, Any]):
        machine = config_dict.get('machine', {})
        explorer = config_dict.get('explorer', {})
        trace = config_dict.get('trace', {})
        tests = config_dict.get('tests', {})

        self.max_steps = _pick(_env_int('EHVM_MAX_STEPS'), machine.get('max_steps'))
        self.check_leaks = _pick(_env_bool('EHVM_CHECK_LEAKS'), machine.get('check_leaks'))

        self.max_executions = _pick(_env_int('EHVM_MAX_EXEC'), explorer.get('max_executions'))
        self.fault_injection = _pick(_env_bool('EHVM_FAULT_INJECTION'), explorer.get('fault_injection'))
        self.reverse = bool(explorer.get('reverse'))

        self.trace = _pick(_env_bool('EHVM_TRACE'), trace.get('enabled'))

        # Seed for randomised property tests
        self.seed = _pick(_env_int('EHVM_SEED'), tests.get('seed'))

    def machine_options(self) -> Dict[str, Any]:
        """Keyword arguments for Machine construction."""
        return {
            'max_steps': self.max_steps,
            'check_leaks': bool(self.check_leaks),
            'fault_injection': bool(self.fault_injection),
        }


DEFAULT_CONFIG = {
    'machine': {
        'max_steps': 100000,
        'check_leaks': False,
    },
    'explorer': {
        'max_executions': 10000,
        'fault_injection': False,
        'reverse': False,
    },
    'trace': {
        'enabled': False,
    },
    'tests': {
        'seed': 1234,
    },
}


def load_config(config_file: str = 'ehvm.yaml') -> Config:
    """Load configuration from YAML file and environment variables."""

    # Default configuration
    merged = {section: dict(values) for section, values in DEFAULT_CONFIG.items()}

    # Load from file if it exists
    if config_file and os.path.exists(config_file):
        try:
            with open(config_file, 'r', encoding='utf-8') as f:
                file_config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {config_file}: {e}")
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot read {config_file}: {e}")
        if not isinstance(file_config, dict):
            raise ConfigError(f"{config_file} must contain a mapping")
        # Merge with defaults
        for key, value in file_config.items():
            if key in merged and isinstance(value, dict):
                merged[key].update(value)
            else:
                merged[key] = value

    return Config(merged)

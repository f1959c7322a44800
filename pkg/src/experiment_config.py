"""
Experiment Config - Builds an OptConfig from defaults, a key = value file and
command-line overrides (in increasing order of precedence).
"""

import logging
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from config.settings import (
    CASES, DEFAULTS, DESCENT_METHODS, MIN_N_R, MIN_N_THETA, RECOVERY_METHODS,
)
from src.errors import ConfigError
from src.models import OptConfig
from src.utils import parse_bool

logger = logging.getLogger(__name__)


def _convert(key: str, raw: Any) -> Any:
    """Convert a raw value to the type of the key's default."""
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value '{text}' for {key} "
                          f"(expected {type(default).__name__})")
    return text


def read_config_file(path) -> Dict[str, Any]:
    """
    Parse a flat key = value file with # comments.

    Raises:
        FileNotFoundError: if the file does not exist
        ConfigError: on an unknown key or a malformed line, naming the line
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    values = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            text = line.split('#', 1)[0].strip()
            if not text:
                continue
            if '=' not in text:
                raise ConfigError(f"{path}:{line_number}: expected 'key = value', found '{text}'")
            key, value = (part.strip() for part in text.split('=', 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{line_number}: unknown key '{key}'")
            values[key] = _convert(key, value)
    return values


def _check(condition: bool, key: str, value: Any, bound: str):
    if not condition:
        raise ConfigError(f"{key} = {value!r} out of range: must be {bound}")


def validate_config(config: OptConfig) -> OptConfig:
    """
    Raises:
        ConfigError: naming the offending value and its bound
    """
    case = config.case
    if case.startswith("file:"):
        mesh_path = Path(case[len("file:"):])
        _check(mesh_path.exists(), 'case', case, "an existing mesh file")
    else:
        _check(case in CASES, 'case', case, f"one of {CASES} or file:<path>")
    _check(config.alpha > 0, 'alpha', config.alpha, "> 0")
    _check(config.n_theta >= MIN_N_THETA, 'n_theta', config.n_theta, f">= {MIN_N_THETA}")
    _check(config.n_r >= MIN_N_R, 'n_r', config.n_r, f">= {MIN_N_R}")
    _check(config.max_iters >= 0, 'max_iters', config.max_iters, ">= 0")
    _check(config.grad_tol >= 0, 'grad_tol', config.grad_tol, ">= 0")
    _check(config.step_cap > 0, 'step_cap', config.step_cap, "> 0")
    _check(0 < config.armijo_c < 1, 'armijo_c', config.armijo_c, "in (0, 1)")
    _check(config.descent in DESCENT_METHODS, 'descent', config.descent,
           f"one of {DESCENT_METHODS}")
    _check(config.recovery in RECOVERY_METHODS, 'recovery', config.recovery,
           f"one of {RECOVERY_METHODS}")
    _check(config.fd_step > 0, 'fd_step', config.fd_step, "> 0")
    _check(bool(str(config.output_dir).strip()), 'output_dir', config.output_dir, "non-empty")
    return config


def parse_config(path: Optional[str] = None,
                 overrides: Optional[Dict[str, Any]] = None) -> OptConfig:
    """
    Build a validated OptConfig.

    Args:
        path: Optional config file
        overrides: Command-line values; None entries are ignored

    Returns:
        OptConfig with precedence override > file > default
    """
    values = dict(DEFAULTS)
    if path is not None:
        values.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key '{key}'")
        values[key] = _convert(key, value)

    known = {f.name for f in fields(OptConfig)}
    config = OptConfig.from_dict({k: v for k, v in values.items() if k in known})
    logger.debug("Resolved config: %s", config.to_dict())
    return validate_config(config)


def parse_sweep(text: str) -> List[float]:
    """
    Parse 'alpha=1,0.1,0.01' into a list of alpha values.

    Raises:
        ConfigError: if the key is not alpha or a value is not a positive number
    """
    if '=' not in text:
        raise ConfigError(f"sweep must look like alpha=LIST, got '{text}'")
    key, _, listing = text.partition('=')
    if key.strip() != 'alpha':
        raise ConfigError(f"unknown sweep key '{key.strip()}' (only alpha is supported)")
    values = []
    for item in listing.split(','):
        try:
            value = float(item)
        except ValueError:
            raise ConfigError(f"invalid alpha '{item.strip()}' in sweep")
        _check(value > 0, 'alpha', value, "> 0")
        values.append(value)
    if not values:
        raise ConfigError("empty alpha sweep")
    return values

#config.py
"""
Run configuration

Environment variables (read after load_dotenv()):
    DEEPFUSE_LOG_LEVEL  logging level name, default INFO
    DEEPFUSE_CONFIG     key=value file used when --config is not given
    DEEPFUSE_THREADS    BLAS/OpenMP thread cap, default 1

Command options resolve as flag > config file > default, and every resolved
value is logged with where it came from. This module must not import numpy:
the thread caps only apply if they are set before numpy loads.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from dotenv import dotenv_values

from utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

# option name -> (type, default) per command; None defaults mean "required" or "derived"
COMMAND_OPTIONS: Dict[str, Dict[str, Tuple[type, Any]]] = {
    "synth": {
        "input": (str, None),
        "ev_low": (float, -2.0),
        "ev_high": (float, 2.0),
        "gamma": (float, 2.2),
        "out_dir": (str, "pairs"),
        "tag": (str, None),
        "manifest": (str, None),
    },
    "train": {
        "data": (str, None),
        "preset": (str, "desk"),
        "loss": (str, "mefssim"),
        "seed": (int, 0),
        "out": (str, "deepfuse.dfck"),
        "merge": (str, "add"),
        "kernels": (str, None),
        "channels": (str, None),
        "patch_size": (int, None),
        "patches": (int, None),
        "epochs": (int, None),
        "lr": (float, None),
        "batch_size": (int, 8),
        "checkpoint_every": (int, 1),
        "checkpoint_dir": (str, None),
        "resume": (str, None),
        "log": (str, None),
    },
    "fuse": {
        "ckpt": (str, None),
        "under": (str, None),
        "over": (str, None),
        "out": (str, None),
        "merge": (str, None),
        "report": (str, None),
    },
    "score": {
        "under": (str, None),
        "over": (str, None),
        "fused": (str, None),
        "score_map": (str, None),
        "window": (int, 8),
        "stride": (int, 1),
        "scales": (int, 3),
    },
    "compare": {
        "data": (str, None),
        "ckpt": (str, None),
        "csv": (str, "compare.csv"),
        "jobs": (int, 1),
    },
}

KNOWN_KEYS = frozenset(name for options in COMMAND_OPTIONS.values() for name in options)


def log_level() -> int:
    name = os.getenv("DEEPFUSE_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def thread_count() -> int:
    raw = os.getenv("DEEPFUSE_THREADS", "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigurationError(f"DEEPFUSE_THREADS must be an integer, got {raw!r}")
    if count < 1:
        raise ConfigurationError(f"DEEPFUSE_THREADS must be >= 1, got {count}")
    return count


def pin_threads() -> int:
    """Cap BLAS/OpenMP threads unless the caller already set them"""
    count = thread_count()
    for name in THREAD_VARIABLES:
        os.environ.setdefault(name, str(count))
    return count


def default_config_path() -> Optional[str]:
    return os.getenv("DEEPFUSE_CONFIG") or None


def read_config_file(path: Optional[str]) -> Dict[str, str]:
    """
    Parse a key=value run configuration

    Raises:
        ConfigurationError: Missing file or keys no command knows
    """
    if not path:
        return {}
    if not os.path.isfile(path):
        raise ConfigurationError(f"Config file {path} does not exist")
    values = {k: v for k, v in dotenv_values(path).items() if v is not None}
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ConfigurationError(f"Unknown keys in {path}: {', '.join(unknown)}")
    logger.info(f"Read {len(values)} settings from {path}")
    return values


def _coerce(name: str, raw: str, kind: type) -> Any:
    try:
        return kind(raw.strip())
    except ValueError:
        raise ConfigurationError(f"Config value {name}={raw!r} is not a valid {kind.__name__}")


@dataclass
class RunConfig:
    command: str
    values: Dict[str, Any] = field(default_factory=dict)
    sources: Dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Any:
        return self.values[name]

    def require(self, name: str) -> Any:
        value = self.values.get(name)
        if value is None:
            raise ConfigurationError(f"'{self.command}' needs --{name.replace('_', '-')} (or '{name}' in the config file)")
        return value


def resolve(command: str, flags: Dict[str, Any], file_values: Dict[str, str]) -> RunConfig:
    """
    Merge command-line flags, config-file values and defaults

    Args:
        command: Command name in COMMAND_OPTIONS
        flags: Flag values; None means "not given"
        file_values: Output of read_config_file

    Returns:
        RunConfig with one value and one source per option
    """
    if command not in COMMAND_OPTIONS:
        raise ConfigurationError(f"Unknown command '{command}'")
    run = RunConfig(command)
    for name, (kind, default) in COMMAND_OPTIONS[command].items():
        if flags.get(name) is not None:
            value, source = flags[name], "flag"
        elif file_values.get(name, "") != "":
            value, source = _coerce(name, file_values[name], kind), "config"
        else:
            value, source = default, "default"
        run.values[name] = value
        run.sources[name] = source
        logger.info(f"{command}.{name} = {value!r} ({source})")
    return run

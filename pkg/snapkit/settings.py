"""Benchmark settings: defaults, config files and the output directory."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

from . import config
from .errors import ConfigError

logger = logging.getLogger(__name__)

MODES = ("tick", "full-speed", "virtual", "kv")

# Algorithm ids accepted per mode
MODE_ALGORITHMS = {
    "tick": ("ns", "cou", "fork", "zz", "pp", "hg", "pb", "calc", "vhg", "vpb"),
    "full-speed": ("ns", "cou", "fork", "zz", "pp", "hg", "pb"),
    "virtual": ("calc", "vhg", "vpb"),
    "kv": ("hg", "pb", "fork"),
}

# Default settings (desk scale)
DEFAULTS = {
    "algo": "hg",
    "mode": "tick",
    "data_mb": 64.0,
    "page_size": config.PAGE_SIZE,
    "uf": 16_000,  # updates per tick
    "tick_ms": float(config.TICK_MS),
    "interval_s": config.CHECKPOINT_INTERVAL_S,
    "checkpoints": config.CHECKPOINT_COUNT,
    "alpha": config.ZIPF_ALPHA,
    "seed": 42,
    "threads": 4,  # virtual mode only
    "transactions": 20_000,  # virtual mode only
    "update_prop": 0.1,  # kv mode only
    "records": 100_000,  # kv mode only
    "operations": 200_000,  # kv mode only
    "save_s": 1.0,  # kv dump interval
    "duration_s": 15.0,  # full-speed mode
    "out": config.DEFAULT_OUTPUT_DIR,
    "verify": True,
    "null_sink": False,
    "trace_window": "",  # "A:B" tick window for trace.csv
}

_POSITIVE = ("data_mb", "page_size", "tick_ms", "interval_s", "checkpoints", "alpha", "threads", "transactions", "records", "duration_s", "save_s")


@dataclass
class BenchConfig:
    algo: str = DEFAULTS["algo"]
    mode: str = DEFAULTS["mode"]
    data_mb: float = DEFAULTS["data_mb"]
    page_size: int = DEFAULTS["page_size"]
    uf: int = DEFAULTS["uf"]
    tick_ms: float = DEFAULTS["tick_ms"]
    interval_s: float = DEFAULTS["interval_s"]
    checkpoints: int = DEFAULTS["checkpoints"]
    alpha: float = DEFAULTS["alpha"]
    seed: int = DEFAULTS["seed"]
    threads: int = DEFAULTS["threads"]
    transactions: int = DEFAULTS["transactions"]
    update_prop: float = DEFAULTS["update_prop"]
    records: int = DEFAULTS["records"]
    operations: int = DEFAULTS["operations"]
    save_s: float = DEFAULTS["save_s"]
    duration_s: float = DEFAULTS["duration_s"]
    out: str = DEFAULTS["out"]
    verify: bool = DEFAULTS["verify"]
    null_sink: bool = DEFAULTS["null_sink"]
    trace_window: str = DEFAULTS["trace_window"]

    def validate(self) -> "BenchConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.algo not in MODE_ALGORITHMS[self.mode]:
            raise ConfigError(
                f"algorithm {self.algo!r} is not valid for mode {self.mode!r} "
                f"(valid: {', '.join(MODE_ALGORITHMS[self.mode])})"
            )
        for name in _POSITIVE:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.uf < 0 or self.operations < 0:
            raise ConfigError("uf and operations must not be negative")
        if not 1 <= self.threads <= config.MAX_CLIENT_THREADS:
            raise ConfigError(f"threads must be in [1, {config.MAX_CLIENT_THREADS}], got {self.threads}")
        if not 0.0 <= self.update_prop <= 1.0:
            raise ConfigError(f"update_prop must be in [0, 1], got {self.update_prop}")
        if self.page_size % config.ITEM_SIZE:
            raise ConfigError(f"page_size must be a multiple of {config.ITEM_SIZE}")
        return self

    @property
    def tick_length(self) -> float:
        return self.tick_ms / 1000.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def merged(self, **overrides: Any) -> "BenchConfig":
        """Copy with ``overrides`` applied (None values ignored)."""
        return replace(self, **{k: coerce(k, v) for k, v in overrides.items() if v is not None})


def coerce(key: str, value: Any) -> Any:
    """Convert a raw (string) value to the type of the setting's default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown setting {key!r}")
    default = DEFAULTS[key]
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value.replace("_", ""))
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def _normalize(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def load_config_file(path: Union[str, Path]) -> dict[str, Any]:
    """Read ``key=value`` lines or a JSON object; unknown keys are errors."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"could not read config {path}: {e}") from e
    values: dict[str, Any] = {}
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        items = raw.items()
    else:
        items = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            items.append((key, value.strip()))
    for key, value in items:
        key = _normalize(key)
        values[key] = coerce(key, value)
    logger.info("loaded %d settings from %s", len(values), path)
    return values


def build_config(file_path: Optional[Union[str, Path]] = None, **flags: Any) -> BenchConfig:
    """Defaults, then the config file, then flags (flags win)."""
    cfg = BenchConfig()
    if file_path:
        cfg = cfg.merged(**load_config_file(file_path))
    return cfg.merged(**flags).validate()


def output_root(cfg: BenchConfig) -> Path:
    """``SNAPKIT_OUT`` wins over ``--out``."""
    return Path(os.environ.get(config.OUTPUT_ENV) or cfg.out)


def make_run_dir(cfg: BenchConfig, label: Optional[str] = None) -> Path:
    """Create ``<root>/<algo>-<timestamp>`` and echo the config into it."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = output_root(cfg) / f"{label or cfg.algo}-{stamp}"
    run_dir = base
    n = 1
    while run_dir.exists():
        run_dir = base.with_name(f"{base.name}-{n}")
        n += 1
    try:
        run_dir.mkdir(parents=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    except OSError as e:
        raise OSError(f"could not create run directory {run_dir}: {e}") from e
    return run_dir


def config_fields() -> list[str]:
    return [f.name for f in fields(BenchConfig)]

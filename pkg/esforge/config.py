"""
Configuration management for esforge.

Experiment configs are UTF-8 text files of `key = value` lines:

    # ES on countdown from a parity base
    run.seed = 3
    finetune.method = es
    es.sigma = 0.001        # trailing comments are allowed

Keys are `<section>.<field>` for the sections of ExperimentConfig, plus
`budget.samples`, which sets both es.population_size and grpo.group_size
unless those are given explicitly. ES and GRPO seeds follow run.seed.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ValidationError

from esforge.errors import ConfigurationError
from esforge.file_utils import AtomicFileWriter
from esforge.models import ExperimentConfig

logger = logging.getLogger(__name__)

BUDGET_KEY = "budget.samples"
DERIVED_KEYS = frozenset({"es.run_seed", "grpo.run_seed"})


def known_keys() -> List[str]:
    """Every settable dotted key, in section order."""
    keys = []
    for section, info in ExperimentConfig.model_fields.items():
        model = info.annotation
        for name in model.model_fields:
            key = f"{section}.{name}"
            if key not in DERIVED_KEYS:
                keys.append(key)
    return keys + [BUDGET_KEY]


def parse_lines(text: str) -> Tuple[Dict[str, str], Dict[str, int]]:
    """
    Parse key = value text.

    Returns:
        (values by key, line number by key)

    Raises:
        ConfigurationError: Malformed line, unknown or duplicate key (with line number)
    """
    allowed = set(known_keys())
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"expected 'key = value', got {raw.strip()!r}", number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in DERIVED_KEYS:
            raise ConfigurationError(f"{key} is derived from run.seed and cannot be set", number)
        if key not in allowed:
            raise ConfigurationError(f"unknown key {key!r}", number)
        if key in values:
            raise ConfigurationError(
                f"duplicate key {key!r} (first set on line {lines[key]})", number
            )
        if value == "":
            raise ConfigurationError(f"missing value for {key!r}", number)
        values[key] = value
        lines[key] = number
    return values, lines


def _nest(values: Dict[str, str]) -> Dict[str, Dict[str, str]]:
    nested: Dict[str, Dict[str, str]] = {}
    for key, value in values.items():
        section, field = key.split(".", 1)
        nested.setdefault(section, {})[field] = value
    return nested


def build_config(
    values: Dict[str, str], lines: Optional[Dict[str, int]] = None
) -> ExperimentConfig:
    """
    Validate parsed values into an ExperimentConfig, logging every default used.

    Raises:
        ConfigurationError: Invalid value, with the offending line number when known
    """
    lines = dict(lines or {})
    values = dict(values)
    budget = values.pop(BUDGET_KEY, None)
    if budget is not None:
        for key in ("es.population_size", "grpo.group_size"):
            if key not in values:
                values[key] = budget
                if BUDGET_KEY in lines:
                    lines[key] = lines[BUDGET_KEY]

    try:
        config = ExperimentConfig.model_validate(_nest(values))
    except ValidationError as e:
        error = e.errors()[0]
        key = ".".join(str(part) for part in error["loc"][:2])
        raise ConfigurationError(f"{key}: {error['msg']}", lines.get(key)) from None

    for key in known_keys():
        if key == BUDGET_KEY or key in values:
            continue
        section, field = key.split(".", 1)
        default = _value(getattr(getattr(config, section), field))
        logger.info(f"[config] {key} not set, using default {default}")
    return config


def _value(value: Any) -> str:
    return str(getattr(value, "value", value))


def resolved_text(config: ExperimentConfig) -> str:
    """Every key with its effective value, in the config file format."""
    lines = [f"# resolved configuration (run.seed={config.run.seed})"]
    for section in ExperimentConfig.model_fields:
        model: BaseModel = getattr(config, section)
        for field in type(model).model_fields:
            value = getattr(model, field)
            if f"{section}.{field}" in DERIVED_KEYS or value is None or value == "":
                continue
            lines.append(f"{section}.{field} = {_value(value)}")
    return "\n".join(lines) + "\n"


class ConfigManager:
    """
    Loads an experiment configuration file.

    Usage:
        config = ConfigManager(Path("es.cfg")).config
    """

    def __init__(self, config_file: Optional[Path] = None, text: Optional[str] = None):
        """
        Initialize configuration manager.

        Args:
            config_file: Path to a key = value file
            text: Config text used instead of a file (all defaults when both are None)

        Raises:
            ConfigurationError: Missing file or invalid contents
        """
        self.config_file = Path(config_file) if config_file else None
        if text is None and self.config_file is not None:
            text = AtomicFileWriter.read_text(self.config_file)
            if text is None:
                raise ConfigurationError(f"config file not found: {self.config_file}")
        self.values, self.lines = parse_lines(text or "")
        self.config = build_config(self.values, self.lines)

    def is_set(self, key: str) -> bool:
        """Whether the file set `key` explicitly."""
        return key in self.values

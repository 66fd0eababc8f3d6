"""Experiment configuration: dataclass, INI-style file format, validation.

The on-disk format is `key = value` pairs grouped in bracketed sections
with `#` comments. Design-parameter bounds (privacy parameter 0.5-5,
sensitivity 0.01-1, equity exponent 2-5, client count 2-25, resource
fraction 0.01-1, token budget >= 10) are validated on load: violations
warn by default and raise under strict mode. The tuning weights alpha/beta
and the per-round cost only ever warn, since the shipped defaults
deliberately sit outside their nominal ranges (see README).
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass
class ExperimentConfig:
    # [run]
    mode: str = "opus"  # opus | vanilla
    seed: int = 0
    total_rounds: int = 1500
    warmup_rounds: int = 300
    eval_subset: int = 512

    # [data]
    dataset: str = "synthetic_image"  # mnist | synthetic | synthetic_image
    mnist_dir: str = "data/mnist"
    train_subsample: int = 0  # 0 = keep everything
    batch_size: int = 128
    n_clients: int = 5
    partition_scheme: str = "contiguous"
    explicit_columns: tuple[tuple[int, ...], ...] | None = None
    synth_samples: int = 4000
    synth_features: int = 40
    synth_classes: int = 4
    synth_informative: tuple[int, ...] | None = None
    image_train: int = 12000
    image_test: int = 4000
    image_label_noise: float = 0.03
    image_pixel_noise: float = 0.25

    # [model]
    client_hidden: int = 128
    embedding_dim: int = 16
    head_hidden: tuple[int, ...] = ()
    client_lr: float = 0.05
    server_lr: float = 0.05

    # [privacy]
    epsilon_init: float = 1.0
    epsilon_lower: float = 0.5
    epsilon_upper: float = 5.0
    delta: float = 0.01
    sensitivity: float = 0.1
    epsilon_step: float = 0.05

    # [economics]
    alpha: float = 1.0
    beta: float = 10.0
    equity_exponent: float = 2.0
    resource_fraction: tuple[float, ...] = (1.0,)
    cost_per_round: tuple[float, ...] = (1.0,)
    token_budget: float = 100000.0
    budget_scope: str = "total"  # total | per_round

    # [attack]
    attack_enabled: bool = False
    attacker: int = 0
    poison_fraction: float = 0.0
    target_class: int = 0
    trigger_width: int = 3
    trigger_columns: tuple[int, ...] | None = None

    def per_client(self, values: tuple[float, ...]) -> list[float]:
        """Broadcast a scalar tuple or validate a per-client tuple."""
        if len(values) == 1:
            return [values[0]] * self.n_clients
        if len(values) != self.n_clients:
            raise ConfigError(
                f"per-client list has {len(values)} entries for {self.n_clients} clients"
            )
        return list(values)

    def validate(self, strict: bool = False, warn: bool = True) -> None:
        """Check hard invariants and the design-parameter bounds."""
        if self.mode not in ("opus", "vanilla"):
            raise ConfigError(f"mode must be opus or vanilla, got {self.mode!r}")
        if self.budget_scope not in ("total", "per_round"):
            raise ConfigError(f"budget_scope must be total or per_round, got {self.budget_scope!r}")
        if self.dataset not in ("mnist", "synthetic", "synthetic_image"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.partition_scheme not in ("contiguous", "strided", "explicit"):
            raise ConfigError(f"unknown partition scheme {self.partition_scheme!r}")
        if self.n_clients < 2:
            raise ConfigError("n_clients must be >= 2")
        if self.warmup_rounds >= self.total_rounds:
            raise ConfigError("warmup_rounds must be < total_rounds")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.epsilon_lower <= self.epsilon_upper:
            raise ConfigError("need 0 < epsilon_lower <= epsilon_upper")
        if not self.epsilon_lower <= self.epsilon_init <= self.epsilon_upper:
            raise ConfigError(
                f"epsilon_init = {self.epsilon_init} outside "
                f"[{self.epsilon_lower}, {self.epsilon_upper}]"
            )
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must be in (0, 1)")
        self.per_client(self.resource_fraction)
        self.per_client(self.cost_per_round)
        if self.attack_enabled and not 0.0 <= self.poison_fraction <= 1.0:
            raise ConfigError("poison_fraction must be in [0, 1]")
        if self.attack_enabled and not 0 <= self.attacker < self.n_clients:
            raise ConfigError("attacker must be a valid client id")

        def bound(name: str, value: float, lo: float, hi: float | None, hard: bool) -> None:
            bad = value < lo or (hi is not None and value > hi)
            if not bad:
                return
            msg = f"{name} = {value:g} violates bound [{lo:g}, {hi if hi is not None else 'inf'}]"
            if strict and hard:
                raise ConfigError(msg)
            if warn:
                log.warning("%s", msg)

        bound("epsilon_init", self.epsilon_init, 0.5, 5.0, hard=True)
        bound("epsilon_lower", self.epsilon_lower, 0.5, 5.0, hard=True)
        bound("epsilon_upper", self.epsilon_upper, 0.5, 5.0, hard=True)
        bound("sensitivity", self.sensitivity, 0.01, 1.0, hard=True)
        bound("equity_exponent", self.equity_exponent, 2.0, 5.0, hard=True)
        bound("n_clients", self.n_clients, 2, 25, hard=True)
        bound("token_budget", self.token_budget, 10.0, None, hard=True)
        for c in self.per_client(self.resource_fraction):
            bound("resource_fraction", c, 0.01, 1.0, hard=True)
        # warn-only: defaults intentionally sit outside the nominal ranges
        bound("alpha", self.alpha, 0.1, 1.0, hard=False)
        bound("beta", self.beta, 0.1, 1.0, hard=False)
        for b in self.per_client(self.cost_per_round):
            bound("cost_per_round", b, 50.0, None, hard=False)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

_SECTIONS: dict[str, tuple[str, ...]] = {
    "run": ("mode", "seed", "total_rounds", "warmup_rounds", "eval_subset"),
    "data": (
        "dataset", "mnist_dir", "train_subsample", "batch_size", "n_clients",
        "partition_scheme", "explicit_columns", "synth_samples", "synth_features",
        "synth_classes", "synth_informative", "image_train", "image_test",
        "image_label_noise", "image_pixel_noise",
    ),
    "model": ("client_hidden", "embedding_dim", "head_hidden", "client_lr", "server_lr"),
    "privacy": (
        "epsilon_init", "epsilon_lower", "epsilon_upper", "delta",
        "sensitivity", "epsilon_step",
    ),
    "economics": (
        "alpha", "beta", "equity_exponent", "resource_fraction",
        "cost_per_round", "token_budget", "budget_scope",
    ),
    "attack": (
        "attack_enabled", "attacker", "poison_fraction", "target_class",
        "trigger_width", "trigger_columns",
    ),
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


def _parse_value(field_name: str, text: str):
    text = text.strip()
    kind = _FIELD_TYPES[field_name]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        if kind == "bool":
            if text.lower() in ("true", "yes", "1"):
                return True
            if text.lower() in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if field_name in ("head_hidden",):
            return _parse_int_tuple(text)
        if field_name in ("synth_informative", "trigger_columns"):
            return _parse_int_tuple(text) if text else None
        if field_name in ("resource_fraction", "cost_per_round"):
            return tuple(float(v) for v in text.split(",") if v.strip() != "")
        if field_name == "explicit_columns":
            if not text:
                return None
            return tuple(_parse_int_tuple(group) for group in text.split(";"))
    except ValueError as exc:
        raise ConfigError(f"bad value for {field_name}: {exc}") from exc
    raise ConfigError(f"no parser for field {field_name}")


def _format_value(field_name: str, value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if field_name == "explicit_columns":
        return ";".join(",".join(str(c) for c in group) for group in value)
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(path: str | Path, strict: bool = False) -> ExperimentConfig:
    """Load and validate a configuration file.

    Raises:
        ConfigError: unknown section or key, duplicate key, type mismatch,
            or (under strict mode) a design-parameter bound violation.
    """
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",), strict=True
    )
    try:
        loaded = parser.read(path, encoding="utf-8")
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} at line {exc.lineno}") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section {exc.section!r} at line {exc.lineno}") from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    if not loaded:
        raise ConfigError(f"config file not found: {path}")

    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, text in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _parse_value(key, text)
    config = ExperimentConfig(**values)
    config.validate(strict=strict)
    return config


def serialize(config: ExperimentConfig) -> str:
    """Render a config back to the file format (parse_config round-trips it)."""
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(key, getattr(config, key))}")
        lines.append("")
    return "\n".join(lines)


def write_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(config), encoding="utf-8")

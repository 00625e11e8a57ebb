"""Scenario configuration: ``key = value`` files with ``#`` comments.

Several assignments may share a line (``n=4  f=1  seed=42``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields, replace
from enum import Enum
from fractions import Fraction
from typing import FrozenSet, Optional


class ConfigInvalid(ValueError):
    pass


class ParseError(ConfigInvalid):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConstraintViolation(ConfigInvalid):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ByzantineMode(Enum):
    NONE = "none"
    SILENT = "silent"
    EQUIVOCATE = "equivocate"
    REVERSE_REFS = "reverse_refs"
    MAX_DELAY = "max_delay"


class TargetPolicy(Enum):
    ROUND_ROBIN = "round_robin"
    RANDOM = "random"


@dataclass(frozen=True)
class ScenarioConfig:
    n: int
    f: int
    seed: int
    byzantine_nodes: FrozenSet[int] = frozenset()
    byzantine_mode: ByzantineMode = ByzantineMode.NONE
    arrival_rate: Fraction = Fraction(1)
    duration_ticks: int = 1000
    min_delay: int = 1
    max_delay: int = 20
    retry_bound: int = 3
    timeout_ticks: int = 2000
    target_policy: TargetPolicy = TargetPolicy.ROUND_ROBIN
    # consensus messages a node can process per tick; 0 means unlimited
    node_capacity: int = 32

    def __post_init__(self):
        validate(self)

    @property
    def honest(self) -> FrozenSet[int]:
        return frozenset(range(self.n)) - self.byzantine_nodes

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)

    def items(self):
        """(key, text) pairs in declaration order, the inverse of ``parse_text``."""
        for fl in fields(self):
            yield fl.name, _render(getattr(self, fl.name))

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())


def _render(value) -> str:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, frozenset):
        return ",".join(str(v) for v in sorted(value))
    return str(value)


def validate(cfg: ScenarioConfig) -> None:
    if cfg.f < 1:
        raise ConstraintViolation("f", "must be at least 1")
    if cfg.n != 3 * cfg.f + 1:
        raise ConstraintViolation("n", f"must equal 3f+1 = {3 * cfg.f + 1}")
    if len(cfg.byzantine_nodes) > cfg.f:
        raise ConstraintViolation("byzantine_nodes", f"at most f={cfg.f} nodes may be Byzantine")
    if any(not 0 <= b < cfg.n for b in cfg.byzantine_nodes):
        raise ConstraintViolation("byzantine_nodes", "node id out of range")
    if cfg.byzantine_nodes and cfg.byzantine_mode is ByzantineMode.NONE:
        raise ConstraintViolation("byzantine_mode", "Byzantine nodes need a mode")
    if not 0 <= cfg.min_delay <= cfg.max_delay:
        raise ConstraintViolation("max_delay", "need max_delay >= min_delay >= 0")
    if cfg.max_delay < 1:
        raise ConstraintViolation("max_delay", "must be at least 1 tick")
    if cfg.arrival_rate < 0:
        raise ConstraintViolation("arrival_rate", "must be non-negative")
    for name in ("duration_ticks", "retry_bound", "node_capacity", "seed"):
        if getattr(cfg, name) < 0:
            raise ConstraintViolation(name, "must be non-negative")
    if cfg.timeout_ticks < cfg.retry_bound + 2:
        raise ConstraintViolation("timeout_ticks", "too small for the retry schedule")


def _int(text: str) -> int:
    return int(text, 0)


def _nodes(text: str) -> FrozenSet[int]:
    text = text.strip()
    if text in ("", "none", "-"):
        return frozenset()
    return frozenset(int(t) for t in text.split(","))


_PARSERS = {
    "n": _int,
    "f": _int,
    "seed": _int,
    "byzantine_nodes": _nodes,
    "byzantine_mode": ByzantineMode,
    "arrival_rate": Fraction,
    "duration_ticks": _int,
    "min_delay": _int,
    "max_delay": _int,
    "retry_bound": _int,
    "timeout_ticks": _int,
    "target_policy": TargetPolicy,
    "node_capacity": _int,
}
REQUIRED = ("n", "f", "seed")

_ASSIGN = re.compile(r"\s*=\s*")
_COMMA = re.compile(r"\s*,\s*")


def parse_text(text: str, overrides: Optional[dict] = None) -> ScenarioConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        line = _COMMA.sub(",", _ASSIGN.sub("=", line))
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep or not key:
                raise ParseError(lineno, f"expected key = value, got {token!r}")
            if key not in _PARSERS:
                raise ParseError(lineno, f"unknown key {key!r}")
            if key in values:
                raise ParseError(lineno, f"duplicate key {key!r}")
            try:
                values[key] = _PARSERS[key](value)
            except (ValueError, ZeroDivisionError):
                raise ParseError(lineno, f"bad value for {key}: {value!r}") from None
    values.update(overrides or {})
    for key in REQUIRED:
        if key not in values:
            raise ConstraintViolation(key, "required")
    return ScenarioConfig(**values)


def parse_config(path, overrides: Optional[dict] = None) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_text(fh.read(), overrides)

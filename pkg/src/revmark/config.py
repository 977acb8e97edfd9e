"""Experiment configuration: one JSON file, flag overrides, derived sub-seeds.

Every random draw in a run traces back to ``master_seed`` through
``derive_seed(master_seed, component, ...)``, so two runs from the same config
produce byte-identical reports (ledger timestamps aside).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from .model import TrainHyper
from .scheme import SchemeParams
from .triggers import ALL_SCHEMES
from .attack import LEARNED_KINDS


class ConfigError(ValueError):
    """A config field failed validation; the message names the field."""


@dataclass
class ExperimentConfig:
    code_bits: int = 256
    n_triggers: int = 64
    n_classes: int = 10
    image_dims: tuple[int, int] = (16, 16)
    two_class_labels: bool = False
    scheme: str = "reverse"
    n_per_class: int = 400
    model: dict = field(default_factory=dict)
    filter_kinds: tuple[str, ...] = LEARNED_KINDS
    filter_kind: str = "mlp"
    q_values: tuple[int, ...] = (500,)
    tau: float = 0.5
    trials: int = 10000
    master_seed: int = 42
    outdir: str = "out"

    def scheme_params(self) -> SchemeParams:
        try:
            return SchemeParams(
                code_bits=self.code_bits, n_triggers=self.n_triggers,
                n_classes=self.n_classes, image_dims=tuple(self.image_dims),
                two_class_labels=self.two_class_labels,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_hyper(self, seed: int) -> TrainHyper:
        try:
            return TrainHyper(seed=seed, **self.model)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def validate(self) -> None:
        self.scheme_params()
        if self.scheme not in ALL_SCHEMES:
            raise ConfigError(f"scheme: expected one of {ALL_SCHEMES}, got {self.scheme!r}")
        for kind in self.filter_kinds:
            if kind not in LEARNED_KINDS:
                raise ConfigError(f"filter_kinds: unknown kind {kind!r}")
        if self.filter_kind not in LEARNED_KINDS:
            raise ConfigError(f"filter_kind: unknown kind {self.filter_kind!r}")
        if not self.q_values or any(q < 1 for q in self.q_values):
            raise ConfigError("q_values: need at least one positive Q")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau: must lie in (0, 1], got {self.tau}")
        if self.trials < 1:
            raise ConfigError("trials: must be >= 1")
        if self.n_per_class < 2:
            raise ConfigError("n_per_class: must be >= 2")

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["image_dims"] = list(self.image_dims)
        obj["filter_kinds"] = list(self.filter_kinds)
        obj["q_values"] = list(self.q_values)
        return obj


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read the config file (optional) and apply ``key=value`` overrides.

    Override keys use dots for nesting (``model.lr=0.01``); values parse as
    JSON where possible, else stay strings.
    """
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not a section")
        node[parts[-1]] = value

    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for tup_field in ("image_dims", "filter_kinds", "q_values"):
        if tup_field in data:
            data[tup_field] = tuple(data[tup_field])
    try:
        cfg = ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def parse_override(text: str):
    """Parse an override value: JSON literal if it parses, bare string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text

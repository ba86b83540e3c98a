"""Experiment configuration: TOML file with nested blocks, every key optional.

Example::

    rounds = 30
    participation = 1.0
    seeds = [0, 1, 2]

    [data]
    num_classes = 4
    noise_std = 0.5
    modalities = [["vision", 8], ["text", 6]]

    [data.modality_profile]
    "vision+text" = 0.6
    "vision" = 0.2
    "text" = 0.2

    [hyper]
    lambda_consistency = 0.5

    [trust]
    mode = "fedmmx"

    [attack]
    kind = "label_flip"
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

from .adversary import AttackSpec
from .data import SpecError, SyntheticSpec
from .nam import Hyperparams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TRUST_MODES = ("fedmmx", "uniform", "off")


@dataclass(frozen=True)
class TrustConfig:
    mode: str = "fedmmx"
    alpha: float = 1 / 3  # explanation consistency weight
    beta: float = 1 / 3   # calibration weight
    gamma: float = 1 / 3  # history weight
    decay: float = 0.9    # EMA factor for the history component
    floor: float = 0.01
    neutral_ec: float = 0.5
    initial_history: float = 0.5

    @property
    def weighted(self) -> bool:
        return self.mode == "fedmmx"

    def validate(self) -> None:
        if self.mode not in TRUST_MODES:
            raise SpecError("trust.mode", f"must be one of {', '.join(TRUST_MODES)}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise SpecError(f"trust.{name}", "must be nonnegative")
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-9:
            raise SpecError("trust.alpha", "alpha + beta + gamma must equal 1")
        if not 0.0 <= self.decay < 1.0:
            raise SpecError("trust.decay", "must lie in [0, 1)")
        if not 0.0 <= self.floor < 1.0:
            raise SpecError("trust.floor", "must lie in [0, 1)")
        for name in ("neutral_ec", "initial_history"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SpecError(f"trust.{name}", "must lie in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    trust: TrustConfig = field(default_factory=TrustConfig)
    attack: Optional[AttackSpec] = None
    rounds: int = 30
    participation: float = 1.0
    seeds: Tuple[int, ...] = (0,)
    out_dir: str = "runs"
    val_fraction: float = 0.2
    mask_fraction: float = 0.2
    mask_value: float = 0.0
    ece_bins: int = 10

    def validate(self) -> "ExperimentConfig":
        for prefix, block in (("data.", self.data), ("hyper.", self.hyper)):
            try:
                block.validate()
            except SpecError as exc:
                raise SpecError(prefix + exc.field, str(exc).split(": ", 1)[-1]) from None
        self.trust.validate()
        if self.attack is not None:
            self.attack.validate()
        if self.rounds < 0:
            raise SpecError("rounds", "must be nonnegative")
        if not 0.0 < self.participation <= 1.0:
            raise SpecError("participation", "must lie in (0, 1]")
        if not self.seeds:
            raise SpecError("seeds", "at least one seed is required")
        for s in self.seeds:
            if not 0 <= s < 2**64:
                raise SpecError("seeds", "seeds must be 64-bit unsigned integers")
        if not 0.0 <= self.val_fraction < 1.0:
            raise SpecError("val_fraction", "must lie in [0, 1)")
        if not 0.0 < self.mask_fraction <= 1.0:
            raise SpecError("mask_fraction", "must lie in (0, 1]")
        if self.ece_bins < 1:
            raise SpecError("ece_bins", "must be >= 1")
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, data=dataclasses.replace(self.data, seed=seed))

    def clean(self) -> "ExperimentConfig":
        return dataclasses.replace(self, attack=None)


def _build(cls, block: dict, prefix: str, converters=None):
    if not isinstance(block, dict):
        raise SpecError(prefix.rstrip("."), "expected a table")
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in block.items():
        if key not in known:
            raise SpecError(prefix + key, "unknown key")
        conv = (converters or {}).get(key)
        try:
            kwargs[key] = conv(value) if conv else value
        except (TypeError, ValueError, AttributeError) as exc:
            raise SpecError(prefix + key, f"malformed value ({exc})") from None
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise SpecError(prefix.rstrip(".") or "config", str(exc)) from None


def _profile(value) -> tuple:
    if isinstance(value, dict):
        items = value.items()
    else:
        items = value
    out = []
    for subset, frac in items:
        if isinstance(subset, str):
            subset = tuple(s for s in subset.split("+") if s)
        out.append((tuple(subset), float(frac)))
    return tuple(out)


_DATA_CONVERTERS = {
    "modalities": lambda v: tuple((str(m), int(d)) for m, d in v),
    "modality_profile": _profile,
}


def _typed(obj, prefix):
    # TOML integers are fine for floats; reject strings and bools where numbers are expected
    for f in fields(obj):
        value = getattr(obj, f.name)
        ref = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(ref, bool) or ref is None:
            continue
        if isinstance(ref, (int, float)) and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise SpecError(prefix + f.name, f"expected a number, got {value!r}")
        if isinstance(ref, str) and not isinstance(value, str):
            raise SpecError(prefix + f.name, f"expected a string, got {value!r}")
    return obj


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    kwargs = {}
    if "data" in doc:
        kwargs["data"] = _typed(_build(SyntheticSpec, doc.pop("data"), "data.", _DATA_CONVERTERS), "data.")
    if "hyper" in doc:
        kwargs["hyper"] = _typed(_build(Hyperparams, doc.pop("hyper"), "hyper."), "hyper.")
    if "trust" in doc:
        kwargs["trust"] = _typed(_build(TrustConfig, doc.pop("trust"), "trust."), "trust.")
    if "attack" in doc:
        block = doc.pop("attack")
        if isinstance(block, dict) and block.get("enabled", True) is False:
            kwargs["attack"] = None
        else:
            block = {k: v for k, v in block.items() if k != "enabled"} if isinstance(block, dict) else block
            kwargs["attack"] = _typed(_build(AttackSpec, block, "attack."), "attack.")
    if "seeds" in doc:
        seeds = doc.pop("seeds")
        if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise SpecError("seeds", "expected a list of integers")
        kwargs["seeds"] = tuple(seeds)
    rest = _build(ExperimentConfig, doc, "")
    cfg = dataclasses.replace(rest, **kwargs)
    return _typed(cfg, "").validate()


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise SpecError("config", f"not valid TOML ({exc})") from None
    return config_from_dict(doc)


def parse_seeds(text: str) -> Tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise SpecError("seeds", f"cannot parse {text!r}") from None
    if not seeds:
        raise SpecError("seeds", "empty seed list")
    return seeds

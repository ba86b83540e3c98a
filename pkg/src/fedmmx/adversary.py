"""Client misbehaviour: label flipping, update sign flipping and Gaussian noise."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import FrozenSet

import numpy as np

from .data import ModalDataset, SpecError

ATTACK_KINDS = ("label_flip", "sign_flip", "gauss_noise")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "label_flip"
    intensity: float = 1.0
    adversarial_fraction: float = 0.2
    seed_offset: int = 0

    def validate(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise SpecError("attack.kind", f"must be one of {', '.join(ATTACK_KINDS)}")
        if not 0.0 <= self.intensity <= 1.0:
            raise SpecError("attack.intensity", "must lie in [0, 1]")
        if not 0.0 <= self.adversarial_fraction <= 1.0:
            raise SpecError("attack.adversarial_fraction", "must lie in [0, 1]")

    @property
    def poisons_data(self) -> bool:
        return self.kind == "label_flip"

    @property
    def poisons_update(self) -> bool:
        return self.kind in ("sign_flip", "gauss_noise")


def select_adversaries(K: int, fraction: float, rng: np.random.Generator) -> FrozenSet[int]:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    count = math.floor(fraction * K + 1e-9)
    return frozenset(int(i) for i in rng.choice(K, size=count, replace=False))


def flip_labels(labels, intensity: float, C: int, rng: np.random.Generator) -> np.ndarray:
    """Replace each label with probability ``intensity`` by a different uniformly drawn class."""
    if C < 2:
        raise ValueError("label flipping needs at least two classes")
    if not 0.0 <= intensity <= 1.0:
        raise ValueError("intensity must lie in [0, 1]")
    y = np.asarray(labels, dtype=np.int64)
    flip = rng.random(y.shape) < intensity
    shift = 1 + rng.integers(0, C - 1, size=y.shape)
    return np.where(flip, (y + shift) % C, y)


def corrupt_labels(dataset: ModalDataset, intensity: float, C: int, rng: np.random.Generator) -> ModalDataset:
    return dataset.with_labels(flip_labels(dataset.labels, intensity, C, rng))


def corrupt_update(update, spec: AttackSpec, global_params, rng: np.random.Generator):
    """Return a copy of ``update`` with its transmitted segments poisoned.

    sign_flip negates the transmitted delta (update minus the round's global
    parameters) coordinate-wise with probability ``intensity``; at intensity 1
    every coordinate is reflected about the global model. gauss_noise adds
    ``intensity * N(0, 1)`` noise.
    """
    if spec.kind == "sign_flip":
        segments = {}
        for m, seg in update.segments.items():
            ref = global_params.segment(m)
            flip = rng.random(seg.shape) < spec.intensity
            segments[m] = np.where(flip, ref - (seg - ref), seg)
    elif spec.kind == "gauss_noise":
        segments = {m: seg + spec.intensity * rng.standard_normal(seg.shape)
                    for m, seg in update.segments.items()}
    elif spec.kind == "label_flip":
        return update
    else:
        raise ValueError(f"unknown attack kind {spec.kind!r}")
    return replace(update, segments=segments)

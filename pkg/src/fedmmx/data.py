"""Seeded synthetic multi-modal data and federated partitioning.

Each class owns one Gaussian prototype per modality; a sample of class ``c``
in modality ``m`` is that prototype plus isotropic noise. Labels are spread
over clients with a per-class Dirichlet split and every client only keeps the
modalities it was assigned.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DATASET_FORMAT = "fedmmx-dataset"
DATASET_VERSION = 1

Subset = Tuple[str, ...]


class SpecError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    modalities: Tuple[Tuple[str, int], ...] = (("vision", 8), ("text", 6))
    noise_std: float = 0.5
    num_clients: int = 10
    dirichlet_alpha: float = 0.5
    samples_per_client: int = 200
    modality_profile: Tuple[Tuple[Subset, float], ...] = (
        (("vision", "text"), 0.6),
        (("vision",), 0.2),
        (("text",), 0.2),
    )
    seed: int = 0
    test_size: int = 1000
    prototype_scale: float = 1.0

    @property
    def modality_ids(self) -> Tuple[str, ...]:
        return tuple(m for m, _ in self.modalities)

    @property
    def dims(self) -> Dict[str, int]:
        return dict(self.modalities)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise SpecError("num_classes", "must be >= 2")
        if not self.modalities:
            raise SpecError("modalities", "at least one modality is required")
        ids = self.modality_ids
        if len(set(ids)) != len(ids):
            raise SpecError("modalities", "duplicate modality id")
        for m, d in self.modalities:
            if int(d) < 1:
                raise SpecError("modalities", f"feature dim of {m!r} must be >= 1")
        if not self.noise_std >= 0:
            raise SpecError("noise_std", "must be nonnegative")
        if self.num_clients < 1:
            raise SpecError("num_clients", "must be >= 1")
        if not self.dirichlet_alpha > 0:
            raise SpecError("dirichlet_alpha", "must be positive")
        if self.samples_per_client < 1:
            raise SpecError("samples_per_client", "must be positive")
        if self.test_size < 1:
            raise SpecError("test_size", "must be positive")
        if not 0 <= self.seed < 2**64:
            raise SpecError("seed", "must be a 64-bit unsigned integer")
        _check_profile(self.modality_profile, ids)


def _check_profile(profile, modality_ids) -> None:
    if not profile:
        raise SpecError("modality_profile", "empty profile")
    total = 0.0
    for subset, frac in profile:
        unknown = set(subset) - set(modality_ids)
        if unknown:
            raise SpecError("modality_profile", f"unknown modalities {sorted(unknown)}")
        if frac < 0:
            raise SpecError("modality_profile", "fractions must be nonnegative")
        total += frac
    if abs(total - 1.0) > 1e-9:
        raise SpecError("modality_profile", f"fractions sum to {total}, expected 1")
    if all(len(s) == 0 or f == 0 for s, f in profile):
        raise SpecError("modality_profile", "every subset with positive weight is empty")


@dataclass
class ModalDataset:
    """Column-oriented samples: ``features[m]`` has shape ``(n, d_m)``."""

    features: Dict[str, np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for m, x in self.features.items():
            if x.ndim != 2 or x.shape[0] != len(self.labels):
                raise ValueError(f"modality {m!r}: expected ({len(self.labels)}, d) features, got {x.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def modalities(self) -> Tuple[str, ...]:
        return tuple(self.features)

    def subset(self, idx) -> "ModalDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ModalDataset({m: x[idx] for m, x in self.features.items()}, self.labels[idx])

    def restrict(self, modalities: Sequence[str]) -> "ModalDataset":
        return ModalDataset({m: self.features[m] for m in modalities}, self.labels)

    def with_labels(self, labels) -> "ModalDataset":
        return ModalDataset(dict(self.features), np.asarray(labels, dtype=np.int64))


@dataclass
class ClientData:
    client_id: int
    modalities: Subset
    data: ModalDataset

    @property
    def n(self) -> int:
        return len(self.data)


@dataclass
class FederatedSplit:
    spec: SyntheticSpec
    clients: List[ClientData]
    test: ModalDataset
    prototypes: Dict[str, np.ndarray]
    repairs: List[str] = field(default_factory=list)

    @property
    def total_train(self) -> int:
        return sum(c.n for c in self.clients)


def data_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0]))


def dirichlet_partition(labels, K: int, alpha: float, rng: np.random.Generator) -> List[np.ndarray]:
    """Split sample indices over ``K`` clients with Dirichlet(alpha) class shares.

    Clients left empty take one sample from the currently largest client.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if K < 1:
        raise ValueError("K must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if len(labels) < K:
        raise ValueError(f"cannot partition {len(labels)} samples over {K} clients")
    if K == 1:
        return [np.arange(len(labels), dtype=np.int64)]

    parts: List[List[int]] = [[] for _ in range(K)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(K, alpha))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].extend(chunk.tolist())

    for k in range(K):
        if not parts[k]:
            donor = max(range(K), key=lambda j: len(parts[j]))
            parts[k].append(parts[donor].pop())
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def _largest_remainder(fractions: Sequence[float], K: int) -> List[int]:
    raw = [f * K for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    short = K - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _assign_with_repairs(K, profile, rng, modality_ids):
    if not any(len(s) and f > 0 for s, f in profile):
        raise ValueError("modality profile has no nonempty subset with positive weight")
    order = {m: i for i, m in enumerate(modality_ids)}
    subsets = [tuple(sorted(s, key=order.__getitem__)) for s, _ in profile]
    counts = _largest_remainder([f for _, f in profile], K)
    pool: List[Subset] = []
    for s, n in zip(subsets, counts):
        pool.extend([s] * n)
    pool = [pool[i] for i in rng.permutation(K)]

    # empty subsets give a client nothing to train on
    fallback = max((s for s, f in zip(subsets, [f for _, f in profile]) if s and f > 0), key=len)
    pool = [s if s else fallback for s in pool]

    repairs = []
    missing = [m for m in modality_ids if not any(m in s for s in pool)]
    if missing:
        hosts = rng.permutation(K)
        for i, m in enumerate(missing):
            k = int(hosts[i % K])
            pool[k] = tuple(sorted(set(pool[k]) | {m}, key=order.__getitem__))
            repairs.append(f"modality {m!r} absent from every client; added to client {k}")
    for note in repairs:
        logger.warning(note)
    return pool, repairs


def assign_modalities(K: int, profile, rng: np.random.Generator,
                      modality_ids: Optional[Sequence[str]] = None) -> List[Subset]:
    """Give each client a modality subset in the proportions of ``profile``.

    ``profile`` is a sequence of ``(subset, fraction)`` pairs. Counts use the
    largest-remainder rule; a modality no client received is added to one
    randomly chosen client.
    """
    if modality_ids is None:
        seen: List[str] = []
        for s, _ in profile:
            seen.extend(m for m in s if m not in seen)
        modality_ids = seen
    return _assign_with_repairs(K, profile, rng, tuple(modality_ids))[0]


def _sample_features(prototypes, labels, noise_std, rng):
    feats = {}
    for m, protos in prototypes.items():
        x = protos[labels]
        if noise_std > 0:
            x = x + noise_std * rng.standard_normal(x.shape)
        feats[m] = x
    return feats


def generate_dataset(spec: SyntheticSpec) -> FederatedSplit:
    spec.validate()
    rng = data_rng(spec.seed)
    C, K = spec.num_classes, spec.num_clients
    prototypes = {
        m: spec.prototype_scale * rng.standard_normal((C, d)) for m, d in spec.modalities
    }
    total = K * spec.samples_per_client
    labels = rng.integers(0, C, size=total)
    parts = dirichlet_partition(labels, K, spec.dirichlet_alpha, rng)
    msets, repairs = _assign_with_repairs(K, spec.modality_profile, rng, spec.modality_ids)
    train_feats = _sample_features(prototypes, labels, spec.noise_std, rng)
    pool = ModalDataset(train_feats, labels)

    clients = []
    for k, (idx, ms) in enumerate(zip(parts, msets)):
        clients.append(ClientData(k, ms, pool.subset(idx).restrict(ms)))

    test_labels = np.arange(spec.test_size, dtype=np.int64) % C
    test = ModalDataset(_sample_features(prototypes, test_labels, spec.noise_std, rng), test_labels)
    return FederatedSplit(spec, clients, test, prototypes, repairs)


def nearest_prototype_accuracy(split: FederatedSplit) -> float:
    """Accuracy of the nearest-prototype rule on the test set (all modalities concatenated)."""
    ids = split.spec.modality_ids
    x = np.concatenate([split.test.features[m] for m in ids], axis=1)
    protos = np.concatenate([split.prototypes[m] for m in ids], axis=1)
    d2 = ((x[:, None, :] - protos[None]) ** 2).sum(-1)
    return float(np.mean(d2.argmin(1) == split.test.labels))


# -- export / import --------------------------------------------------------

def spec_to_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d["modalities"] = [[m, int(dim)] for m, dim in spec.modalities]
    d["modality_profile"] = [[list(s), f] for s, f in spec.modality_profile]
    return d


def spec_from_dict(d: dict) -> SyntheticSpec:
    d = dict(d)
    d["modalities"] = tuple((str(m), int(dim)) for m, dim in d["modalities"])
    d["modality_profile"] = tuple((tuple(s), float(f)) for s, f in d["modality_profile"])
    return SyntheticSpec(**d)


def _dataset_to_json(ds: ModalDataset) -> list:
    return [
        {"features": {m: ds.features[m][i].tolist() for m in ds.modalities}, "label": int(ds.labels[i])}
        for i in range(len(ds))
    ]


def _dataset_from_json(rows: list, modalities: Sequence[str], dims: Dict[str, int]) -> ModalDataset:
    feats = {
        m: np.array([r["features"][m] for r in rows], dtype=np.float64).reshape(len(rows), dims[m])
        for m in modalities
    }
    return ModalDataset(feats, np.array([r["label"] for r in rows], dtype=np.int64))


def split_to_dict(split: FederatedSplit) -> dict:
    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "spec": spec_to_dict(split.spec),
        "repairs": list(split.repairs),
        "prototypes": {m: p.tolist() for m, p in split.prototypes.items()},
        "clients": [
            {"id": c.client_id, "modalities": list(c.modalities), "samples": _dataset_to_json(c.data)}
            for c in split.clients
        ],
        "test": _dataset_to_json(split.test),
    }


def split_from_dict(doc: dict) -> FederatedSplit:
    if doc.get("format") != DATASET_FORMAT:
        raise ValueError(f"not a {DATASET_FORMAT} document")
    if doc.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {doc.get('version')!r}")
    spec = spec_from_dict(doc["spec"])
    dims = spec.dims
    clients = [
        ClientData(c["id"], tuple(c["modalities"]), _dataset_from_json(c["samples"], c["modalities"], dims))
        for c in doc["clients"]
    ]
    test = _dataset_from_json(doc["test"], spec.modality_ids, dims)
    protos = {m: np.array(p, dtype=np.float64).reshape(spec.num_classes, dims[m])
              for m, p in doc["prototypes"].items()}
    return FederatedSplit(spec, clients, test, protos, list(doc.get("repairs", [])))


def save_split(split: FederatedSplit, path) -> None:
    Path(path).write_text(json.dumps(split_to_dict(split), separators=(",", ":")) + "\n", encoding="utf-8")


def load_split(path) -> FederatedSplit:
    return split_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

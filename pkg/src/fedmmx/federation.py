"""Federated protocol: local training, trust calibration, per-modality aggregation.

Randomness is drawn from independent streams keyed by
``(master_seed, stream_tag, client_id, round)`` so results do not depend on
the order in which clients are executed.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics, nam
from .adversary import AttackSpec, corrupt_labels, corrupt_update, select_adversaries
from .config import ExperimentConfig, TrustConfig
from .data import FederatedSplit, ModalDataset, generate_dataset
from .metrics import MetricReport
from .nam import Hyperparams, Layout, LossBreakdown, NamParams

logger = logging.getLogger(__name__)

# stream tags
_INIT, _PARTICIPANTS, _ADVERSARIES, _LABELS, _UPDATES, _TRAIN, _VAL_SPLIT = range(1, 8)


def stream(seed: int, tag: int, *ids: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, *ids]))


@dataclass
class ClientState:
    client_id: int
    modalities: Tuple[str, ...]
    train: ModalDataset
    val: ModalDataset
    history: float = 0.5
    adversarial: bool = False

    @property
    def n(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    segments: Dict[str, np.ndarray]
    n: int
    loss: LossBreakdown
    val_accuracy: float
    val_ec: Optional[float]
    val_ece: float


@dataclass(frozen=True)
class TrustReport:
    client_ids: Tuple[int, ...]
    ec_component: np.ndarray
    calib_component: np.ndarray
    hist_component: np.ndarray
    raw: np.ndarray
    trust: np.ndarray

    def of(self, client_id: int) -> float:
        return float(self.trust[self.client_ids.index(client_id)])


@dataclass
class RoundLog:
    round: int
    participants: Tuple[int, ...]
    trust: TrustReport
    metrics: MetricReport
    adversaries: FrozenSet[int] = frozenset()
    duration: float = 0.0

    def mean_trust(self, adversarial: bool) -> Optional[float]:
        vals = [t for k, t in zip(self.trust.client_ids, self.trust.trust)
                if (k in self.adversaries) == adversarial]
        return float(np.mean(vals)) if vals else None

    def to_json(self) -> str:
        """One NDJSON line; wall-clock duration is left out to keep logs reproducible."""
        t = self.trust
        doc = {
            "round": self.round,
            "participants": list(self.participants),
            "clients": [
                {
                    "id": k,
                    "adversarial": k in self.adversaries,
                    "ec": float(t.ec_component[i]),
                    "calib": float(t.calib_component[i]),
                    "hist": float(t.hist_component[i]),
                    "trust": float(t.trust[i]),
                }
                for i, k in enumerate(t.client_ids)
            ],
            "global": {
                "accuracy": self.metrics.accuracy,
                "ec": self.metrics.ec,
                "fs": self.metrics.fs,
                "ece": self.metrics.ece,
            },
        }
        return json.dumps(doc, separators=(",", ":"))


# -- trust ------------------------------------------------------------------

def apply_floor(trust: np.ndarray, floor: float) -> np.ndarray:
    """Raise weights below ``floor`` to it and rescale the rest so the total stays 1."""
    t = np.asarray(trust, dtype=np.float64).copy()
    K = len(t)
    if floor <= 0 or K == 0:
        return t
    if K * floor >= 1.0:
        return np.full(K, 1.0 / K)
    fixed = np.zeros(K, dtype=bool)
    while True:
        low = (t < floor) & ~fixed
        if not low.any():
            return t
        fixed |= low
        t[fixed] = floor
        free = ~fixed
        t[free] *= (1.0 - floor * fixed.sum()) / t[free].sum()


def compute_trust(updates: Sequence[ClientUpdate], histories: Dict[int, float],
                  cfg: TrustConfig = TrustConfig()) -> TrustReport:
    if not updates:
        raise ValueError("trust needs at least one client update")
    ids = tuple(u.client_id for u in updates)
    ec = np.array([cfg.neutral_ec if u.val_ec is None else (1.0 + u.val_ec) / 2.0 for u in updates])
    calib = np.array([1.0 - u.val_ece for u in updates])
    hist = np.array([histories[k] for k in ids], dtype=np.float64)
    n = np.array([u.n for u in updates], dtype=np.float64)

    if cfg.weighted:
        raw = cfg.alpha * ec + cfg.beta * calib + cfg.gamma * hist
    else:
        raw = np.ones(len(updates))
    mass = n * raw
    if mass.sum() <= 0:
        trust = np.full(len(updates), 1.0 / len(updates))
    else:
        trust = mass / mass.sum()
    if cfg.weighted:
        trust = apply_floor(trust, cfg.floor)
    return TrustReport(ids, ec, calib, hist, raw, trust)


def update_history(hist: float, round_accuracy: float, decay: float) -> float:
    if not 0.0 <= hist <= 1.0 or not 0.0 <= round_accuracy <= 1.0:
        raise ValueError("history and accuracy must lie in [0, 1]")
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    return decay * hist + (1.0 - decay) * round_accuracy


# -- aggregation --------------------------------------------------------------

def aggregate(global_params: NamParams, updates: Sequence[ClientUpdate], trust: TrustReport) -> NamParams:
    """Per-modality trust-weighted average over the clients that hold the modality."""
    layout = global_params.layout
    weight = dict(zip(trust.client_ids, trust.trust))
    ordered = sorted(updates, key=lambda u: u.client_id)
    out = global_params.copy()
    for m in layout.modality_ids:
        sl = layout.segment(m)
        holders = [u for u in ordered if m in u.segments]
        for u in holders:
            if u.segments[m].shape != (sl.stop - sl.start,):
                raise ValueError(f"client {u.client_id}: segment {m!r} does not match the layout")
        total = sum(weight[u.client_id] for u in holders)
        if not holders or total <= 0:
            continue
        acc = np.zeros(sl.stop - sl.start)
        for u in holders:
            acc += (weight[u.client_id] / total) * u.segments[m]
        out.flat[sl] = acc
    return out


def sample_participants(K: int, fraction: float, rng: np.random.Generator) -> List[int]:
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    count = max(1, math.ceil(fraction * K - 1e-9))
    if count >= K:
        return list(range(K))
    return sorted(int(i) for i in rng.choice(K, size=count, replace=False))


# -- clients ------------------------------------------------------------------

def split_validation(data: ModalDataset, fraction: float, rng: np.random.Generator):
    n = len(data)
    n_val = int(math.floor(fraction * n)) if n > 1 else 0
    if fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    perm = rng.permutation(n)
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


def build_clients(split: FederatedSplit, config: ExperimentConfig, seed: int,
                  adversaries: FrozenSet[int] = frozenset()) -> List[ClientState]:
    attack = config.attack
    clients = []
    for c in split.clients:
        data = c.data
        bad = c.client_id in adversaries
        if bad and attack is not None and attack.poisons_data:
            rng = stream(seed, _LABELS, c.client_id, attack.seed_offset)
            data = corrupt_labels(data, attack.intensity, split.spec.num_classes, rng)
        train, val = split_validation(data, config.val_fraction, stream(seed, _VAL_SPLIT, c.client_id))
        clients.append(ClientState(c.client_id, c.modalities, train, val,
                                   config.trust.initial_history, bad))
    return clients


def local_train(client: ClientState, global_params: NamParams, hyper: Hyperparams,
                rng: np.random.Generator, ece_bins: int = 10) -> ClientUpdate:
    """Mini-batch SGD from the global parameters on the client's own modalities.

    Each epoch visits the training split in the order of one
    ``rng.permutation``; batches are consecutive slices of ``batch_size``.
    """
    if client.n == 0:
        raise ValueError(f"client {client.client_id} has no training samples")
    layout = global_params.layout
    for m in client.modalities:
        if m not in layout.modality_ids or client.train.features[m].shape[1] != layout.dim(m):
            raise ValueError(f"client {client.client_id}: modality {m!r} does not match the model layout")
    mods = client.modalities
    params = global_params.copy()
    for _ in range(hyper.local_epochs):
        order = rng.permutation(client.n)
        for start in range(0, client.n, hyper.batch_size):
            batch = client.train.subset(order[start: start + hyper.batch_size])
            _, grads = nam.loss_and_grad(params, batch, mods, hyper)
            params = nam.sgd_step(params, grads, hyper.lr)

    evaluation = client.val if len(client.val) else client.train
    probs = nam.predict_proba(params, evaluation.features, mods)
    correct = probs.argmax(axis=1) == evaluation.labels
    val_ec = metrics.dataset_ec(params, evaluation, mods)[0] if len(mods) > 1 else None
    return ClientUpdate(
        client_id=client.client_id,
        segments={m: params.segment(m).copy() for m in mods},
        n=client.n,
        loss=nam.loss(params, client.train, mods, hyper),
        val_accuracy=float(correct.mean()),
        val_ec=val_ec,
        val_ece=metrics.ece(probs.max(axis=1), correct, ece_bins),
    )


# -- rounds -------------------------------------------------------------------

def run_round(global_params: NamParams, clients: Sequence[ClientState], config: ExperimentConfig,
              seed: int, round_index: int, test: ModalDataset,
              executor: Optional[Executor] = None) -> Tuple[NamParams, RoundLog]:
    """One server round: sample, train locally, poison, weigh, aggregate, evaluate."""
    if not clients:
        raise ValueError("a round needs at least one client")
    t0 = time.perf_counter()
    by_id = {c.client_id: c for c in clients}
    ids = sorted(by_id)
    chosen = sample_participants(len(ids), config.participation, stream(seed, _PARTICIPANTS, round_index))
    participants = [ids[i] for i in chosen]

    def train(k):
        return local_train(by_id[k], global_params, config.hyper, stream(seed, _TRAIN, k, round_index),
                           config.ece_bins)

    if executor is None:
        updates = [train(k) for k in participants]
    else:
        updates = list(executor.map(train, participants))

    attack = config.attack
    if attack is not None and attack.poisons_update:
        updates = [
            corrupt_update(u, attack, global_params, stream(seed, _UPDATES, u.client_id, round_index,
                                                            attack.seed_offset))
            if by_id[u.client_id].adversarial else u
            for u in updates
        ]

    trust = compute_trust(updates, {k: by_id[k].history for k in participants}, config.trust)
    new_params = aggregate(global_params, updates, trust)
    for u in updates:
        c = by_id[u.client_id]
        c.history = update_history(c.history, u.val_accuracy, config.trust.decay)

    report = metrics.evaluate(new_params, test, config.mask_fraction, config.ece_bins)
    adversaries = frozenset(c.client_id for c in clients if c.adversarial)
    log = RoundLog(round_index, tuple(participants), trust, report, adversaries, time.perf_counter() - t0)
    logger.debug("round %d: acc=%.4f ec=%s", round_index, report.accuracy, report.ec)
    return new_params, log


@dataclass
class SimulationResult:
    seed: int
    logs: List[RoundLog]
    params: NamParams
    initial_params: NamParams
    adversaries: FrozenSet[int]
    split: FederatedSplit = field(repr=False)

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.logs[-1].metrics.accuracy if self.logs else None


def model_layout(config: ExperimentConfig) -> Layout:
    return Layout(config.data.modalities, config.hyper.hidden, config.data.num_classes)


def setup(config: ExperimentConfig, seed: int):
    """Data, clients, adversary set and initial global parameters for one seed."""
    cfg = config.with_seed(seed)
    split = generate_dataset(cfg.data)
    adversaries = frozenset()
    if cfg.attack is not None:
        adversaries = select_adversaries(cfg.data.num_clients, cfg.attack.adversarial_fraction,
                                         stream(seed, _ADVERSARIES, cfg.attack.seed_offset))
    clients = build_clients(split, cfg, seed, adversaries)
    params = nam.init_params(model_layout(cfg), stream(seed, _INIT))
    return split, clients, adversaries, params


def run_simulation(config: ExperimentConfig, seed: Optional[int] = None, workers: int = 1) -> SimulationResult:
    """Run ``config.rounds`` rounds for one master seed (default: the first configured seed)."""
    config.validate()
    seed = config.seeds[0] if seed is None else seed
    split, clients, adversaries, params = setup(config, seed)
    initial = params.copy()
    logs = []
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for r in range(1, config.rounds + 1):
            try:
                params, log = run_round(params, clients, config, seed, r, split.test, executor)
            except Exception as exc:
                raise RuntimeError(f"seed {seed}, round {r}: {exc}") from exc
            logs.append(log)
    finally:
        if executor is not None:
            executor.shutdown()
    return SimulationResult(seed, logs, params, initial, adversaries, split)

"""Evaluation metrics: accuracy, explanation consistency, faithfulness, ECE, entropy."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nam
from .data import ModalDataset

NORM_EPS = 1e-12


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    ec: Optional[float]  # None when no sample shows two modalities
    fs: float
    ece: float
    mean_entropy: float
    n_samples: int
    n_ec: int
    n_ec_skipped: int

    @property
    def ec_percent(self) -> Optional[float]:
        """EC mapped from [-1, 1] to a [0, 100] scale."""
        return None if self.ec is None else 50.0 * (1.0 + self.ec)


def explanation_consistency(e_a, e_b) -> float:
    a = np.asarray(e_a, dtype=np.float64)
    b = np.asarray(e_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError(f"explanation vectors must be 1-d of equal length, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    out = np.zeros(len(a))
    out[ok] = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return np.clip(out, -1.0, 1.0)


def sample_ec(params, dataset: ModalDataset, modalities: Optional[Sequence[str]] = None) -> np.ndarray:
    """Per-sample mean pairwise cosine between class-aggregate explanations."""
    mods = tuple(modalities if modalities is not None else dataset.modalities)
    if len(mods) < 2:
        return np.zeros(0)
    expl = nam.attribution(params, dataset.features, mods).explanation
    pairs = list(itertools.combinations(mods, 2))
    total = np.zeros(len(dataset))
    for a, b in pairs:
        total += _rowwise_cosine(expl[a], expl[b])
    return total / len(pairs)


def dataset_ec(params, dataset: ModalDataset, modalities: Optional[Sequence[str]] = None):
    """Mean explanation consistency, or ``(None, skipped)`` if no sample qualifies.

    Returns ``(ec, n_used, n_skipped)``. All samples in a dataset share the
    same modality set, so either every sample is eligible or none is.
    """
    mods = tuple(modalities if modalities is not None else dataset.modalities)
    if len(mods) < 2 or len(dataset) == 0:
        return None, 0, len(dataset)
    scores = sample_ec(params, dataset, mods)
    return float(scores.mean()), len(scores), 0


def faithfulness_score(p0, p1) -> float:
    """Relative drop of the predicted-class probability, clamped to [0, 1]."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    score = 1.0 - p1 / np.maximum(p0, NORM_EPS)
    out = np.clip(score, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def mask_top_features(params, dataset: ModalDataset, mods, cls: np.ndarray, mask_fraction: float,
                      mask_value: float = 0.0):
    """Copy of the features with the top-|attribution| features per modality replaced."""
    contrib = nam.attribution(params, dataset.features, mods).contrib
    rows = np.arange(len(dataset))
    masked = {}
    for m in mods:
        x = dataset.features[m].copy()
        d = x.shape[1]
        k = math.ceil(mask_fraction * d - 1e-12)
        score = np.abs(contrib[m][rows, :, cls])  # (n, d)
        top = np.argsort(-score, axis=1, kind="stable")[:, :k]
        x[rows[:, None], top] = mask_value
        masked[m] = x
    return masked


def sample_faithfulness(params, dataset: ModalDataset, mask_fraction: float = 0.2,
                        modalities: Optional[Sequence[str]] = None, mask_value: float = 0.0) -> np.ndarray:
    if not 0 < mask_fraction <= 1:
        raise ValueError("mask_fraction must lie in (0, 1]")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    mods = tuple(modalities if modalities is not None else dataset.modalities)
    probs = nam.predict_proba(params, dataset.features, mods)
    cls = probs.argmax(axis=1)
    rows = np.arange(len(dataset))
    p0 = probs[rows, cls]
    masked = mask_top_features(params, dataset, mods, cls, mask_fraction, mask_value)
    p1 = nam.predict_proba(params, masked, mods)[rows, cls]
    return np.atleast_1d(faithfulness_score(p0, p1))


def faithfulness(params, dataset: ModalDataset, mask_fraction: float = 0.2,
                 modalities: Optional[Sequence[str]] = None, mask_value: float = 0.0) -> float:
    return float(sample_faithfulness(params, dataset, mask_fraction, modalities, mask_value).mean())


def ece(confidences, correct, num_bins: int = 10) -> float:
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    if conf.shape != hit.shape or conf.ndim != 1:
        raise ValueError("confidences and correct must be 1-d of equal length")
    if conf.size == 0:
        raise ValueError("need at least one prediction")
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    # bins [0, 1/B), [1/B, 2/B), ..., [(B-1)/B, 1]
    bins = np.minimum((conf * num_bins).astype(np.int64), num_bins - 1)
    N = conf.size
    total = 0.0
    for b in range(num_bins):
        sel = bins == b
        nb = int(sel.sum())
        if nb:
            total += nb / N * abs(hit[sel].mean() - conf[sel].mean())
    return float(total)


def predictive_entropy(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("not a probability distribution")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def accuracy(params, dataset: ModalDataset, modalities: Optional[Sequence[str]] = None) -> float:
    mods = tuple(modalities if modalities is not None else dataset.modalities)
    probs = nam.predict_proba(params, dataset.features, mods)
    return float(np.mean(probs.argmax(axis=1) == dataset.labels))


def evaluate(params, dataset: ModalDataset, mask_fraction: float = 0.2, num_bins: int = 10,
             modalities: Optional[Sequence[str]] = None) -> MetricReport:
    mods = tuple(modalities if modalities is not None else dataset.modalities)
    probs = nam.predict_proba(params, dataset.features, mods)
    pred = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    correct = pred == dataset.labels
    logp = np.log(np.where(probs > 0, probs, 1.0))
    entropy = float((-(probs * logp).sum(axis=1)).mean())
    ec_value, n_ec, skipped = dataset_ec(params, dataset, mods)
    return MetricReport(
        accuracy=float(correct.mean()),
        ec=ec_value,
        fs=faithfulness(params, dataset, mask_fraction, mods),
        ece=ece(conf, correct, num_bins),
        mean_entropy=entropy,
        n_samples=len(dataset),
        n_ec=n_ec,
        n_ec_skipped=skipped,
    )

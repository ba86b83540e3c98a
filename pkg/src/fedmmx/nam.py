"""Multi-modal Neural Additive Model with late fusion.

Every input feature owns a tiny 1 -> H -> C ReLU perceptron (its shape
function). A modality's logits are its bias plus the sum of its shape
functions; the fused prediction is the mean of the available modalities'
logits. Gradients are hand-derived, there is no autodiff engine.

Flat parameter layout (modality-major, then feature-major)::

    for each modality m (in layout order):
        for each feature j < d_m:
            w_in[j]   (H)       input weights
            b_hid[j]  (H)       hidden biases
            w_out[j]  (H * C)   output weights, row-major (hidden, class)
        bias_m    (C)

so each modality occupies one contiguous segment of the vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .data import ModalDataset


@dataclass(frozen=True)
class Layout:
    modalities: Tuple[Tuple[str, int], ...]
    hidden: int
    num_classes: int

    def __post_init__(self):
        if self.hidden < 1 or self.num_classes < 2:
            raise ValueError("hidden must be >= 1 and num_classes >= 2")
        offsets, pos = {}, 0
        for m, d in self.modalities:
            size = d * self.block + self.num_classes
            offsets[m] = (pos, pos + size)
            pos += size
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "size", pos)

    @property
    def block(self) -> int:
        """Parameters per shape function."""
        return 2 * self.hidden + self.hidden * self.num_classes

    @property
    def modality_ids(self) -> Tuple[str, ...]:
        return tuple(m for m, _ in self.modalities)

    def dim(self, m: str) -> int:
        return dict(self.modalities)[m]

    def segment(self, m: str) -> slice:
        try:
            lo, hi = self._offsets[m]
        except KeyError:
            raise KeyError(f"unknown modality {m!r}") from None
        return slice(lo, hi)

    def to_dict(self) -> dict:
        return {
            "modalities": [[m, d] for m, d in self.modalities],
            "hidden": self.hidden,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        return cls(tuple((str(m), int(k)) for m, k in d["modalities"]), int(d["hidden"]), int(d["num_classes"]))


@dataclass
class ModalityView:
    w_in: np.ndarray   # (d, H)
    b_hid: np.ndarray  # (d, H)
    w_out: np.ndarray  # (d, H, C)
    bias: np.ndarray   # (C,)


class NamParams:
    """Parameters stored as one flat float64 vector; per-modality views share memory."""

    def __init__(self, layout: Layout, flat: Optional[np.ndarray] = None):
        self.layout = layout
        if flat is None:
            flat = np.zeros(layout.size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (layout.size,):
            raise ValueError(f"expected {layout.size} parameters, got {flat.shape}")
        self.flat = flat

    def copy(self) -> "NamParams":
        return NamParams(self.layout, self.flat.copy())

    def segment(self, m: str) -> np.ndarray:
        return self.flat[self.layout.segment(m)]

    def modality(self, m: str) -> ModalityView:
        L = self.layout
        H, C, d = L.hidden, L.num_classes, L.dim(m)
        seg = self.segment(m)
        blocks = seg[: d * L.block].reshape(d, L.block)
        return ModalityView(
            w_in=blocks[:, :H],
            b_hid=blocks[:, H: 2 * H],
            w_out=blocks[:, 2 * H:].reshape(d, H, C),
            bias=seg[d * L.block:],
        )

    def __eq__(self, other):
        return (isinstance(other, NamParams) and self.layout == other.layout
                and np.array_equal(self.flat, other.flat))

    def __repr__(self):
        return f"NamParams({self.layout.modality_ids}, H={self.layout.hidden}, C={self.layout.num_classes})"


@dataclass(frozen=True)
class Hyperparams:
    lambda_consistency: float = 0.5
    lambda_interp: float = 0.1
    temperature: float = 2.0
    lr: float = 0.1
    local_epochs: int = 2
    batch_size: int = 32
    hidden: int = 8

    def validate(self) -> None:
        from .data import SpecError

        if not self.lambda_consistency >= 0:
            raise SpecError("lambda_consistency", "must be nonnegative")
        if not self.lambda_interp >= 0:
            raise SpecError("lambda_interp", "must be nonnegative")
        if not self.temperature > 0:
            raise SpecError("temperature", "must be positive")
        if not self.lr > 0:
            raise SpecError("lr", "must be positive")
        if self.local_epochs < 1:
            raise SpecError("local_epochs", "must be a positive integer")
        if self.batch_size < 1:
            raise SpecError("batch_size", "must be a positive integer")
        if self.hidden < 1:
            raise SpecError("hidden", "must be a positive integer")


@dataclass(frozen=True)
class LossBreakdown:
    pred: float
    modal: float
    intp: float
    lambda_consistency: float
    lambda_interp: float

    @property
    def total(self) -> float:
        return self.pred + self.lambda_consistency * self.modal + self.lambda_interp * self.intp


@dataclass
class Attribution:
    """``contrib[m]`` is (n, d_m, C); ``explanation[m]`` sums it over features."""

    contrib: Dict[str, np.ndarray]
    explanation: Dict[str, np.ndarray]


def init_params(layout: Layout, rng: np.random.Generator) -> NamParams:
    """Uniform(-0.5, 0.5) / sqrt(fan_in) weights, zero biases."""
    p = NamParams(layout)
    for m in layout.modality_ids:
        v = p.modality(m)
        v.w_in[...] = rng.uniform(-0.5, 0.5, v.w_in.shape)
        v.w_out[...] = rng.uniform(-0.5, 0.5, v.w_out.shape) / np.sqrt(layout.hidden)
    return p


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _batch_inputs(params: NamParams, features, available) -> Tuple[Dict[str, np.ndarray], bool]:
    available = tuple(available)
    if not available:
        raise ValueError("at least one modality must be available")
    single = None
    xs = {}
    for m in available:
        if m not in params.layout.modality_ids:
            raise KeyError(f"unknown modality {m!r}")
        if m not in features:
            raise KeyError(f"sample has no features for modality {m!r}")
        x = np.asarray(features[m], dtype=np.float64)
        is_single = x.ndim == 1
        if single is None:
            single = is_single
        elif single != is_single:
            raise ValueError("mixed single-sample and batched inputs")
        if is_single:
            x = x[None]
        d = params.layout.dim(m)
        if x.ndim != 2 or x.shape[1] != d:
            raise ValueError(f"modality {m!r}: expected {d} features, got shape {x.shape[1:]}")
        xs[m] = x
    return xs, bool(single)


def _modality_pass(v: ModalityView, x: np.ndarray):
    pre = x[:, :, None] * v.w_in[None] + v.b_hid[None]
    h = np.maximum(pre, 0.0)
    contrib = np.einsum("ndh,dhc->ndc", h, v.w_out)
    z = v.bias + contrib.sum(axis=1)
    return pre, h, contrib, z


def forward(params: NamParams, features, available: Sequence[str]):
    """Return ``(per_modality_logits, fused_logits)``.

    ``features`` maps modality id to a (n, d_m) batch or a single (d_m,) vector.
    """
    xs, single = _batch_inputs(params, features, available)
    logits = {m: _modality_pass(params.modality(m), x)[3] for m, x in xs.items()}
    fused = np.mean([logits[m] for m in xs], axis=0)
    if single:
        return {m: z[0] for m, z in logits.items()}, fused[0]
    return logits, fused


def predict_proba(params: NamParams, features, available: Sequence[str]) -> np.ndarray:
    return softmax(forward(params, features, available)[1])


def attribution(params: NamParams, features, available: Sequence[str]) -> Attribution:
    xs, single = _batch_inputs(params, features, available)
    contrib = {m: _modality_pass(params.modality(m), x)[2] for m, x in xs.items()}
    expl = {m: a.sum(axis=1) for m, a in contrib.items()}
    if single:
        contrib = {m: a[0] for m, a in contrib.items()}
        expl = {m: e[0] for m, e in expl.items()}
    return Attribution(contrib, expl)


def _check_batch(batch: ModalDataset, C: int) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")
    y = batch.labels
    if y.min() < 0 or y.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")


def loss_and_grad(params: NamParams, batch: ModalDataset, available: Sequence[str],
                  hyper: Hyperparams, need_grad: bool = True):
    """Three-term objective and its exact gradient.

    pred  : mean cross-entropy of the fused prediction
    modal : tau^2 * KL(softmax(fused/tau) || softmax(z_m/tau)), averaged over
            modalities and samples; 0 with a single modality
    intp  : mean squared shape-function output
    """
    L = params.layout
    C = L.num_classes
    _check_batch(batch, C)
    xs, _ = _batch_inputs(params, batch.features, available)
    mods = tuple(xs)
    M, N = len(mods), len(batch)
    lam1, lam2, tau = hyper.lambda_consistency, hyper.lambda_interp, hyper.temperature

    views = {m: params.modality(m) for m in mods}
    cache = {m: _modality_pass(views[m], xs[m]) for m in mods}
    z = {m: cache[m][3] for m in mods}
    fused = np.mean([z[m] for m in mods], axis=0)

    y = batch.labels
    logp = log_softmax(fused)
    pred = float(-logp[np.arange(N), y].mean())

    dfused = np.exp(logp)
    dfused[np.arange(N), y] -= 1.0
    dfused /= N
    dz = {m: np.zeros((N, C)) for m in mods}

    modal = 0.0
    if M > 1:
        lp = log_softmax(fused / tau)
        p = np.exp(lp)
        du = np.zeros((N, C))
        kl_sum = np.zeros(N)
        for m in mods:
            lq = log_softmax(z[m] / tau)
            r = lp - lq
            kl = (p * r).sum(axis=1)
            kl_sum += kl
            coef = lam1 * tau * tau / (M * N)
            dz[m] += coef / tau * (np.exp(lq) - p)
            du += coef * p * (r - kl[:, None])
        modal = float(tau * tau * kl_sum.mean() / M)
        dfused += du / tau

    intp = 0.0
    for m in mods:
        a = cache[m][2]
        intp += float((a * a).sum(axis=0).sum()) / (N * M * a.shape[1] * C)

    loss = LossBreakdown(pred, max(modal, 0.0), intp, lam1, lam2)
    if not need_grad:
        return loss, None

    grads = NamParams(L)
    for m in mods:
        pre, h, a, _ = cache[m]
        dz[m] += dfused / M
        dA = dz[m][:, None, :] + lam2 * 2.0 * a / (N * M * a.shape[1] * C)
        v, g = views[m], grads.modality(m)
        g.w_out[...] = np.einsum("ndh,ndc->dhc", h, dA)
        dpre = np.einsum("ndc,dhc->ndh", dA, v.w_out) * (pre > 0)
        g.w_in[...] = (dpre * xs[m][:, :, None]).sum(axis=0)
        g.b_hid[...] = dpre.sum(axis=0)
        g.bias[...] = dz[m].sum(axis=0)
    return loss, grads


def loss(params: NamParams, batch: ModalDataset, available: Sequence[str], hyper: Hyperparams) -> LossBreakdown:
    return loss_and_grad(params, batch, available, hyper, need_grad=False)[0]


def sgd_step(params: NamParams, grads: NamParams, lr: float) -> NamParams:
    if params.layout != grads.layout:
        raise ValueError("gradient layout does not match parameters")
    out = NamParams(params.layout, params.flat - lr * grads.flat)
    if not np.all(np.isfinite(out.flat)):
        raise FloatingPointError("non-finite parameters after SGD step")
    return out


def flatten(params: NamParams) -> np.ndarray:
    return params.flat.copy()


def unflatten(vector, layout: Layout) -> NamParams:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (layout.size,):
        raise ValueError(f"expected a vector of length {layout.size}, got {vector.shape}")
    return NamParams(layout, vector.copy())


# -- snapshots --------------------------------------------------------------
# One JSON header line, then the flat vector as little-endian float64.

def params_to_bytes(params: NamParams) -> bytes:
    header = json.dumps({"format": "fedmmx-params", "version": 1, "layout": params.layout.to_dict()},
                        separators=(",", ":"))
    return header.encode("utf-8") + b"\n" + params.flat.astype("<f8").tobytes()


def params_from_bytes(blob: bytes) -> NamParams:
    head, _, body = blob.partition(b"\n")
    meta = json.loads(head)
    if meta.get("format") != "fedmmx-params":
        raise ValueError("not a fedmmx parameter snapshot")
    layout = Layout.from_dict(meta["layout"])
    return unflatten(np.frombuffer(body, dtype="<f8"), layout)


def save_params(params: NamParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> NamParams:
    return params_from_bytes(Path(path).read_bytes())

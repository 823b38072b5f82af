"""Losses, Adam, type-stratified sampling and the training loops."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .dataset import DataError, TripletArrays, TripletType, TYPED
from .nn import TRAIN, HeadSpec, Parameters, embed, head_backward, head_forward, init_params, \
    update_running_stats

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    def __init__(self, iteration: int, what: str):
        self.iteration = iteration
        super().__init__(f"non-finite {what} at iteration {iteration}")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    iterations: int = 50_000
    batch_per_type: int = 30
    margin_one_class: float = 0.1
    margin_two_class: float = 0.2
    margin_three_class: float = 0.2
    seed: int = 0
    eval_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if min(self.margin_one_class, self.margin_two_class, self.margin_three_class) < 0:
            raise ValueError("margins must be >= 0")
        if self.batch_per_type < 1:
            raise ValueError("batch_per_type must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    @property
    def margins(self) -> dict[TripletType, float]:
        return {TripletType.ONE_CLASS: self.margin_one_class,
                TripletType.TWO_CLASS: self.margin_two_class,
                TripletType.THREE_CLASS: self.margin_three_class}

    @property
    def batch_size(self) -> int:
        return self.batch_per_type * len(TYPED)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def margin_for_type(config: TrainConfig, ttype: TripletType) -> float:
    if ttype not in config.margins:
        raise DataError(f"no training margin for triplet type {ttype.value}")
    return config.margins[ttype]


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def triplet_loss(e1, e2, e3, odd: int, margin: float):
    """Symmetric triplet hinge loss for one triplet.

    ``odd`` (1, 2 or 3) names the face outside the most similar pair (a, b);
    with c the odd face the loss is
    ``max(0, |a-b|^2 - |a-c|^2 + margin) + max(0, |a-b|^2 - |b-c|^2 + margin)``.

    Returns:
        ``(loss, (g1, g2, g3))`` with gradients in the caller's slot order.
    """
    if odd not in (1, 2, 3):
        raise ValueError(f"odd-one-out label must be 1, 2 or 3, got {odd}")
    es = [np.asarray(e, dtype=np.float64) for e in (e1, e2, e3)]
    a, b = [i for i in range(3) if i != odd - 1]
    c = odd - 1
    loss, ga, gb, gc = kernels.triplet_loss_batch(es[a][None], es[b][None], es[c][None],
                                                  np.array([float(margin)]))
    grads = [None, None, None]
    grads[a], grads[b], grads[c] = ga[0], gb[0], gc[0]
    return float(loss[0]), tuple(grads)


def softmax_ce_loss(logits, classes):
    """Mean softmax cross-entropy over rows; returns ``(loss, dlogits)``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    classes = np.atleast_1d(np.asarray(classes))
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -float(np.mean(logp[np.arange(n), classes]))
    grad = np.exp(logp)
    grad[np.arange(n), classes] -= 1.0
    return loss, grad / n


def multi_binary_ce_loss(logits, flags):
    """Sigmoid cross-entropy averaged over every (row, output) entry."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_2d(np.asarray(flags, dtype=np.float64))
    # log(1 + exp(-|z|)) + max(z, 0) - y z
    per = np.logaddexp(0.0, -np.abs(z)) + np.maximum(z, 0.0) - y * z
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(per.mean()), (sig - y) / z.size


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def like(cls, params: Parameters) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: Parameters, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
        if g.shape != params.weights[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape for {k}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        p = np.ascontiguousarray(params.weights[k], dtype=np.float64)
        kernels.adam_update(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                            state.m[k].reshape(-1), state.v[k].reshape(-1),
                            lr, beta1, beta2, eps, c1, c2)
        params.weights[k] = p


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def stratified_batch(pools: dict[TripletType, np.ndarray], batch_per_type: int,
                     rng: np.random.Generator, types=TYPED) -> np.ndarray:
    """``batch_per_type`` draws with replacement from each type's pool, concatenated in type order."""
    out = []
    for t in types:
        pool = pools.get(t)
        if pool is None or len(pool) == 0:
            raise DataError(f"empty triplet pool for type {t.value}")
        out.append(pool[rng.integers(0, len(pool), batch_per_type)])
    return np.concatenate(out)


def label_triplet_sampler(classes, n: int, rng: np.random.Generator):
    """Label-based triplets: two faces share a class, the third differs.

    Draws are uniform over unordered valid triplets; slots are then shuffled.

    Returns:
        ``(index, odd)``: an (n, 3) face-index array and the odd slot (1-3).
    """
    classes = np.asarray(classes)
    values, inverse = np.unique(classes, return_inverse=True)
    members = [np.flatnonzero(inverse == c) for c in range(len(values))]
    sizes = np.array([len(m) for m in members], dtype=np.float64)
    total = sizes.sum()
    weight = sizes * (sizes - 1) / 2 * (total - sizes)
    if len(values) < 2 or weight.sum() == 0:
        raise DataError("label-based triplets need >= 2 classes and a class with >= 2 faces")
    pair_cls = rng.choice(len(values), size=n, p=weight / weight.sum())
    index = np.empty((n, 3), dtype=np.int64)
    for r, c in enumerate(pair_cls):
        pair = members[c][rng.choice(len(members[c]), 2, replace=False)]
        # odd face uniform over faces outside class c
        j = rng.integers(0, int(total - sizes[c]))
        odd_face = np.flatnonzero(inverse != c)[j]
        index[r] = [pair[0], pair[1], odd_face]
    perm = np.argsort(rng.random((n, 3)), axis=1)
    index = np.take_along_axis(index, perm, axis=1)
    odd = np.argmax(perm == 2, axis=1) + 1
    return index, odd


# --------------------------------------------------------------------------
# triplet-loss training
# --------------------------------------------------------------------------

@dataclass
class CurvePoint:
    iteration: int
    mean_loss: float
    heldout_accuracy: float | None


@dataclass
class TrainReport:
    spec: HeadSpec
    config: TrainConfig
    params: Parameters
    curve: list[CurvePoint] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float | None:
        return self.curve[-1].heldout_accuracy if self.curve else None


def batch_loss_and_grads(spec: HeadSpec, params: Parameters, feats: np.ndarray, ordered: np.ndarray,
                         margins: np.ndarray, rng: np.random.Generator):
    """Mean triplet loss of one batch plus parameter gradients.

    ``ordered`` rows are (pair a, pair b, odd c) indices into ``feats``. All
    3n images go through one train-mode forward pass.
    """
    n = ordered.shape[0]
    x = feats[ordered.T.ravel()]
    emb, trace = head_forward(spec, params, x, TRAIN, rng)
    ea, eb, ec = emb[:n], emb[n:2 * n], emb[2 * n:]
    loss, ga, gb, gc = kernels.triplet_loss_batch(ea, eb, ec, margins)
    upstream = np.concatenate([ga, gb, gc]) / n
    grads = head_backward(spec, params, trace, upstream)
    return float(loss.mean()), grads, trace


def train_embedding(data: TripletArrays, heldout: TripletArrays | None, spec: HeadSpec,
                    config: TrainConfig, progress: Callable[[str], None] | None = None,
                    params: Parameters | None = None) -> TrainReport:
    """Train the head with the symmetric triplet loss.

    Each iteration draws ``batch_per_type`` triplets per type (with
    replacement), adds the type's margin, and takes one Adam step on the mean
    batch loss. Every ``eval_every`` iterations (and at the end) the held-out
    triplet prediction accuracy is recorded in infer mode.
    """
    from .metrics import triplet_prediction_accuracy

    if data.dim != spec.in_dim:
        raise DataError(f"feature dim {data.dim} != head in_dim {spec.in_dim}")
    params = init_params(spec, config.seed) if params is None else params
    report = TrainReport(spec, config, params)
    if config.iterations == 0:
        return report
    ordered = data.ordered()
    pools = data.type_pools()
    margin_of = np.array([margin_for_type(config, t) if t in TYPED else np.nan for t in data.types])
    state = AdamState.like(params)
    rng = np.random.default_rng([config.seed, 0x7124])
    running = []
    for it in range(1, config.iterations + 1):
        sel = stratified_batch(pools, config.batch_per_type, rng)
        loss, grads, trace = batch_loss_and_grads(spec, params, data.features, ordered[sel],
                                                  margin_of[sel], rng)
        if not math.isfinite(loss):
            raise TrainingDiverged(it, "loss")
        try:
            adam_step(params, grads, state, config.lr, config.beta1, config.beta2, config.adam_eps)
        except FloatingPointError:
            raise TrainingDiverged(it, "gradient") from None
        update_running_stats(params, trace)
        running.append(loss)
        if it % config.eval_every == 0 or it == config.iterations:
            acc = None
            if heldout is not None and len(heldout):
                acc, _ = triplet_prediction_accuracy(embed(spec, params, heldout.features), heldout)
            point = CurvePoint(it, float(np.mean(running)), acc)
            report.curve.append(point)
            running = []
            line = f"iter={it} loss={point.mean_loss:.6f}" + \
                   (f" heldout_acc={acc:.4f}" if acc is not None else "")
            log.info(line)
            if progress is not None:
                progress(line)
    return report


# --------------------------------------------------------------------------
# classifier baselines (softmax / per-output binary heads)
# --------------------------------------------------------------------------

def train_classifier(features: np.ndarray, targets: np.ndarray, spec: HeadSpec, config: TrainConfig,
                     loss: str = "softmax", batch_size: int = 128) -> TrainReport:
    """Train the same head with its embedding layer used as raw logits.

    ``spec.normalize`` must be False and ``spec.emb_dim`` equal to the number
    of classes (softmax) or binary outputs. ``targets`` holds class indices
    or a 0/1 flag matrix accordingly.
    """
    if spec.normalize:
        raise ValueError("classifier heads need spec.normalize=False")
    loss_fn = {"softmax": softmax_ce_loss, "binary": multi_binary_ce_loss}[loss]
    params = init_params(spec, config.seed)
    report = TrainReport(spec, config, params)
    state = AdamState.like(params)
    rng = np.random.default_rng([config.seed, 0xC1A5])
    running = []
    for it in range(1, config.iterations + 1):
        sel = rng.integers(0, len(features), batch_size)
        logits, trace = head_forward(spec, params, features[sel], TRAIN, rng)
        value, grad = loss_fn(logits, targets[sel])
        if not math.isfinite(value):
            raise TrainingDiverged(it, "loss")
        adam_step(params, head_backward(spec, params, trace, grad), state, config.lr,
                  config.beta1, config.beta2, config.adam_eps)
        update_running_stats(params, trace)
        running.append(value)
        if it % config.eval_every == 0 or it == config.iterations:
            report.curve.append(CurvePoint(it, float(np.mean(running)), None))
            running = []
    return report

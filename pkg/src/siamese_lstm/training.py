"""Pair mining and the mini-batch RMSProp training loop."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError, TrainingDivergedError
from .evaluation import evaluate_model, pairwise_distances
from .model import DISSIMILAR, SIMILAR, PairExample, batch_loss_and_grads
from .numerics import SeededRng

log = logging.getLogger(__name__)

RMSPROP_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    lr_decay_per_epoch: float
    hidden_dim: int = None
    margin: float = 0.5
    batch_size: int = 100
    rmsprop_decay: float = 0.95
    clip: float = 5.0
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("margin", self.margin > 0),
            ("batch_size", self.batch_size >= 1),
            ("rmsprop_decay", 0 < self.rmsprop_decay < 1),
            ("clip", self.clip > 0),
            ("lr", self.lr > 0),
            ("lr_decay_per_epoch", self.lr_decay_per_epoch > 0),
            ("max_epochs", self.max_epochs >= 1),
            ("patience", self.patience >= 0),
            ("hidden_dim", self.hidden_dim is None or self.hidden_dim >= 1),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {key}: {getattr(self, key)!r}")

    def to_json(self):
        return asdict(self)


@dataclass
class PairSet:
    """Mined training pairs; ``p``/``q`` index into the source feature set."""

    p: np.ndarray
    q: np.ndarray
    labels: np.ndarray
    skipped_identities: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def positives(self):
        return int((self.labels == SIMILAR).sum())

    def examples(self, fs):
        return [PairExample(fs.data[a], fs.data[b], int(y), k)
                for k, (a, b, y) in enumerate(zip(self.p, self.q, self.labels))]


def mine_pairs(fs, seed=0):
    """All cross-camera positives plus twice as many hard negatives per image.

    An image with ``k`` positive partners gets the ``2k`` wrong-identity
    images nearest to it in concatenated raw feature space as negatives.
    The returned order is a seeded shuffle.
    """
    identities = fs.identities
    if len(set(identities.tolist())) < 2:
        raise DataError("mining needs at least two identities")
    flat = fs.data.reshape(len(fs), -1)
    dist = pairwise_distances(flat, flat)
    same_id = identities[:, None] == identities[None, :]
    cross_cam = fs.cameras[:, None] != fs.cameras[None, :]
    positive = same_id & cross_cam

    pairs_p, pairs_q, labels = [], [], []
    for a, b in zip(*np.nonzero(np.triu(positive, k=1))):
        pairs_p.append(a)
        pairs_q.append(b)
        labels.append(SIMILAR)
    for a in range(len(fs)):
        k = int(positive[a].sum())
        if k == 0:
            continue
        candidates = np.flatnonzero(~same_id[a])
        nearest = candidates[np.argsort(dist[a, candidates], kind="stable")[:2 * k]]
        for b in nearest:
            pairs_p.append(a)
            pairs_q.append(b)
            labels.append(DISSIMILAR)

    skipped = sum(1 for p in set(identities.tolist()) if not positive[identities == p].any())
    if skipped:
        log.warning("%d identities have no cross-camera positive pair and were skipped", skipped)
    order = SeededRng(seed).permutation(len(labels))
    return PairSet(np.asarray(pairs_p, dtype=int)[order], np.asarray(pairs_q, dtype=int)[order],
                   np.asarray(labels, dtype=int)[order], skipped)


def clip_gradients(grads, clip):
    if not clip > 0:
        raise ValueError(f"clip must be positive, got {clip}")
    return [np.clip(g, -clip, clip) for g in grads]


@dataclass
class RmspropState:
    cache: list
    decay: float = 0.95
    eps: float = RMSPROP_EPS

    @classmethod
    def zeros_like(cls, params, decay=0.95, eps=RMSPROP_EPS):
        return cls([np.zeros_like(p) for p in params], decay, eps)


def rmsprop_step(params, grads, state, lr):
    """One RMSProp update; returns new parameter arrays and a new state."""
    if len(params) != len(grads) or len(params) != len(state.cache):
        raise ShapeError(f"{len(params)} params, {len(grads)} grads, {len(state.cache)} cache entries")
    new_params, new_cache = [], []
    for p, g, c in zip(params, grads, state.cache):
        if p.shape != g.shape or p.shape != c.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, cache {c.shape}")
        c = state.decay * c + (1.0 - state.decay) * g * g
        new_cache.append(c)
        new_params.append(p - lr * g / (np.sqrt(c) + state.eps))
    return new_params, RmspropState(new_cache, state.decay, state.eps)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    val_rank1: float
    lr: float

    def to_json(self):
        val = None if math.isnan(self.val_rank1) else self.val_rank1
        return {"epoch": self.epoch, "mean_loss": self.mean_loss, "val_rank1": val, "lr": self.lr}


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)
    best_epoch: int = 0

    def log_lines(self):
        return "".join(json.dumps(e.to_json()) + "\n" for e in self.log)


def train(model, fs, pairs, config, val=None):
    """Train ``model`` on mined ``pairs`` drawn from feature set ``fs``.

    ``val`` is an optional ``(queries, gallery)`` tuple of feature sets used
    for early stopping on rank-1; without it every epoch is kept and the
    last one returned. Each batch update uses the summed loss over its pairs.
    """
    if len(pairs) == 0:
        raise DataError("no training pairs")
    rng = SeededRng(config.seed)
    params = model.parameters()
    state = RmspropState.zeros_like(params, config.rmsprop_decay)
    lr = config.lr
    result = TrainResult(model)
    best = -math.inf
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(pairs))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads = batch_loss_and_grads(model, fs.data[pairs.p[idx]], fs.data[pairs.q[idx]],
                                               pairs.labels[idx], config.margin)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(epoch, b, loss)
            params, state = rmsprop_step(params, clip_gradients(grads, config.clip), state, lr)
            model = model.with_parameters(params)
            losses.append(loss / len(idx))

        val_rank1 = evaluate_model(model, *val).rank1 if val is not None else float("nan")
        entry = EpochLog(epoch, float(np.mean(losses)), float(val_rank1), lr)
        result.log.append(entry)
        log.info("epoch %d mean_loss=%.6f val_rank1=%.4f lr=%.3g", epoch, entry.mean_loss, entry.val_rank1, lr)

        if val is None:
            result.model, result.best_epoch = model, epoch
        elif val_rank1 > best:
            best, since_best = val_rank1, 0
            result.model, result.best_epoch = model, epoch
        else:
            since_best += 1
        lr *= config.lr_decay_per_epoch
        if val is not None and since_best >= config.patience:
            break
    return result

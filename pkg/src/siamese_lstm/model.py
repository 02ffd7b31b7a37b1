"""Weight-shared siamese encoder, contrastive loss, and the no-LSTM baseline.

Both model classes expose the same small surface used by training and
evaluation:

``forward(batch)``
    ``batch`` is ``(B, R, d)``; returns embeddings ``(B, k)`` and a cache.
``backward(cache, d_s)``
    parameter gradients (list, same order as ``parameters()``) for upstream
    gradient ``d_s`` of shape ``(B, k)``, summed over the batch.
``parameters()`` / ``with_parameters(arrays)``
    flat list view of the trainable arrays and its inverse.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import MagicMismatchError, ShapeError, TruncatedFileError
from .lstm import LstmParams, sequence_backward, sequence_forward
from .numerics import DTYPE, init_bound, sigmoid, uniform_init

SIAMESE_MAGIC = b"SSIAM001"
BASELINE_MAGIC = b"SBASE001"

SIMILAR = 0
DISSIMILAR = 1

# Below this distance the repulsive hinge has no direction; its gradient is zero.
_HINGE_EPS = 1e-12


@dataclass(frozen=True)
class PairExample:
    p: np.ndarray
    q: np.ndarray
    label: int
    pair_index: int = 0

    def __post_init__(self):
        if self.label not in (SIMILAR, DISSIMILAR):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if np.shape(self.p) != np.shape(self.q):
            raise ShapeError(f"pair sequences differ in shape: {np.shape(self.p)} vs {np.shape(self.q)}")


def _as_batch(seqs, rows, dim):
    x = np.asarray(seqs, dtype=DTYPE)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (rows, dim):
        raise ShapeError(f"expected sequences of shape (R={rows}, d={dim}), got {x.shape}")
    return x


class SiameseParams:
    """Shared LSTM followed by the linear map s = W_M^T [h_1; ...; h_R]."""

    kind = "lstm"

    def __init__(self, lstm, w_m, rows):
        w_m = np.asarray(w_m, dtype=DTYPE)
        side = rows * lstm.hidden_dim
        if w_m.shape != (side, side):
            raise ShapeError(f"w_m must be {(side, side)} for R={rows}, n={lstm.hidden_dim}; got {w_m.shape}")
        self.lstm = lstm
        self.w_m = w_m
        self.rows = int(rows)

    @classmethod
    def init(cls, rng, rows, input_dim, hidden_dim):
        lstm = LstmParams.init(rng, input_dim, hidden_dim)
        side = rows * hidden_dim
        w_m = uniform_init(rng, side, side, init_bound(input_dim, hidden_dim))
        return cls(lstm, w_m, rows)

    @classmethod
    def zeros(cls, rows, input_dim, hidden_dim):
        side = rows * hidden_dim
        return cls(LstmParams.zeros(input_dim, hidden_dim), np.zeros((side, side)), rows)

    @property
    def input_dim(self):
        return self.lstm.input_dim

    @property
    def hidden_dim(self):
        return self.lstm.hidden_dim

    @property
    def embedding_dim(self):
        return self.rows * self.hidden_dim

    def parameters(self):
        return [self.lstm.w, self.lstm.bias, self.w_m]

    def with_parameters(self, arrays):
        w, bias, w_m = arrays
        return SiameseParams(LstmParams.create(w, bias, self.input_dim, self.hidden_dim), w_m, self.rows)

    def forward(self, batch):
        x = _as_batch(batch, self.rows, self.input_dim)
        trace = sequence_forward(self.lstm, np.swapaxes(x, 0, 1))
        hcat = np.swapaxes(trace.h, 0, 1).reshape(x.shape[0], -1)
        return hcat @ self.w_m, (trace, hcat)

    def backward(self, cache, d_s):
        trace, hcat = cache
        d_w_m = hcat.T @ d_s
        d_hcat = d_s @ self.w_m.T
        d_h = np.swapaxes(d_hcat.reshape(hcat.shape[0], self.rows, self.hidden_dim), 0, 1)
        grads = sequence_backward(self.lstm, trace, d_h)
        return [grads.d_w, grads.d_bias, d_w_m]

    def to_bytes(self):
        return (SIAMESE_MAGIC + self.lstm.to_bytes() + struct.pack("<I", self.rows)
                + self.w_m.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, buf):
        if buf[:8] != SIAMESE_MAGIC:
            raise MagicMismatchError(f"expected {SIAMESE_MAGIC!r}, found {bytes(buf[:8])!r}")
        lstm, off = LstmParams.from_bytes(buf, 8)
        if len(buf) < off + 4:
            raise TruncatedFileError("model file truncated before R")
        (rows,) = struct.unpack_from("<I", buf, off)
        off += 4
        side = rows * lstm.hidden_dim
        if len(buf) != off + 8 * side * side:
            raise TruncatedFileError(f"w_m needs {8 * side * side} bytes, have {len(buf) - off}")
        w_m = np.frombuffer(buf, dtype="<f8", offset=off).astype(DTYPE).reshape(side, side)
        return cls(lstm, w_m, rows)


ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "sigmoid": (sigmoid, lambda y: y * (1.0 - y)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0).astype(DTYPE)),
}


class BaselineParams:
    """Stacked s = f(W^T x) layers over the concatenated raw rows."""

    kind = "baseline"

    def __init__(self, layers, rows, input_dim, activation="tanh"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        if not 1 <= len(layers) <= 3:
            raise ValueError(f"baseline supports 1 to 3 layers, got {len(layers)}")
        layers = [np.asarray(w, dtype=DTYPE) for w in layers]
        width = rows * input_dim
        for k, w in enumerate(layers):
            if w.ndim != 2 or w.shape[0] != width:
                raise ShapeError(f"layer {k} has shape {w.shape}, expected {width} input rows")
            width = w.shape[1]
        self.layers = layers
        self.rows = int(rows)
        self.input_dim = int(input_dim)
        self.activation = activation

    @classmethod
    def init(cls, rng, rows, input_dim, num_layers=1, widths=None, activation="tanh"):
        """Hidden and output widths default to the input width R*d."""
        width = rows * input_dim
        widths = list(widths) if widths is not None else [width] * num_layers
        layers = []
        for out in widths:
            layers.append(uniform_init(rng, width, out, init_bound(width, out)))
            width = out
        return cls(layers, rows, input_dim, activation)

    @property
    def embedding_dim(self):
        return self.layers[-1].shape[1]

    def parameters(self):
        return list(self.layers)

    def with_parameters(self, arrays):
        return BaselineParams(arrays, self.rows, self.input_dim, self.activation)

    def forward(self, batch):
        x = _as_batch(batch, self.rows, self.input_dim)
        f = ACTIVATIONS[self.activation][0]
        acts = [x.reshape(x.shape[0], -1)]
        for w in self.layers:
            acts.append(f(acts[-1] @ w))
        return acts[-1], acts

    def backward(self, cache, d_s):
        fprime = ACTIVATIONS[self.activation][1]
        grads = [None] * len(self.layers)
        delta = d_s
        for k in reversed(range(len(self.layers))):
            dz = delta * fprime(cache[k + 1])
            grads[k] = cache[k].T @ dz
            delta = dz @ self.layers[k].T
        return grads

    def to_bytes(self):
        name = self.activation.encode()
        out = [BASELINE_MAGIC, struct.pack("<IIIB", self.rows, self.input_dim, len(self.layers), len(name)), name]
        for w in self.layers:
            out.append(struct.pack("<II", *w.shape))
            out.append(w.astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf):
        if buf[:8] != BASELINE_MAGIC:
            raise MagicMismatchError(f"expected {BASELINE_MAGIC!r}, found {bytes(buf[:8])!r}")
        try:
            rows, dim, count, name_len = struct.unpack_from("<IIIB", buf, 8)
            off = 8 + 13
            activation = bytes(buf[off:off + name_len]).decode()
            off += name_len
            layers = []
            for _ in range(count):
                r, c = struct.unpack_from("<II", buf, off)
                off += 8
                if len(buf) < off + 8 * r * c:
                    raise TruncatedFileError("baseline layer truncated")
                layers.append(np.frombuffer(buf, dtype="<f8", count=r * c, offset=off).astype(DTYPE).reshape(r, c))
                off += 8 * r * c
        except struct.error as exc:
            raise TruncatedFileError(f"baseline file truncated: {exc}") from None
        return cls(layers, rows, dim, activation)


def load_model(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] == BASELINE_MAGIC:
        return BaselineParams.from_bytes(buf)
    return SiameseParams.from_bytes(buf)


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())


def embed(model, seq):
    """Embedding of a single (R, d) sequence."""
    s, _ = model.forward(seq)
    return s[0]


def embed_many(model, seqs, chunk=256):
    seqs = np.asarray(seqs, dtype=DTYPE)
    if len(seqs) == 0:
        return np.zeros((0, model.embedding_dim))
    return np.concatenate([model.forward(seqs[k:k + chunk])[0] for k in range(0, len(seqs), chunk)])


def baseline_forward(params, seq):
    return embed(params, seq)


def distance(s_p, s_q):
    s_p = np.asarray(s_p, dtype=DTYPE)
    s_q = np.asarray(s_q, dtype=DTYPE)
    if s_p.shape != s_q.shape:
        raise ShapeError(f"embedding lengths differ: {s_p.shape} vs {s_q.shape}")
    return float(np.sqrt(np.sum((s_p - s_q) ** 2)))


def contrastive_loss(d_s, y, margin):
    if d_s < 0:
        raise ValueError(f"distance must be non-negative, got {d_s}")
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    return (1 - y) * 0.5 * d_s * d_s + y * 0.5 * max(0.0, margin - d_s) ** 2


def contrastive_batch(s_p, s_q, labels, margin):
    """Summed loss over a batch of embedding pairs and its gradient w.r.t. s_p.

    The gradient w.r.t. s_q is the negation of the returned one.
    """
    y = np.asarray(labels, dtype=DTYPE)
    diff = s_p - s_q
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    gap = np.maximum(0.0, margin - dist)
    losses = (1 - y) * 0.5 * dist * dist + y * 0.5 * gap * gap
    safe = np.where(dist < _HINGE_EPS, 1.0, dist)
    push = np.where((dist < _HINGE_EPS) | (gap == 0.0), 0.0, -gap / safe)
    coef = (1 - y) + y * push
    return losses.sum(), coef[:, None] * diff


def batch_loss_and_grads(model, p, q, labels, margin):
    """Summed contrastive loss over a batch of pairs and shared-weight gradients.

    Both branches are run as one stacked batch; since the weights are shared,
    the backward pass sums the two branches' contributions.
    """
    p = np.asarray(p, dtype=DTYPE)
    q = np.asarray(q, dtype=DTYPE)
    B = len(p)
    s, cache = model.forward(np.concatenate([p, q]))
    loss, d_sp = contrastive_batch(s[:B], s[B:], labels, margin)
    grads = model.backward(cache, np.concatenate([d_sp, -d_sp]))
    return loss, grads


def pair_loss(model, pair, margin):
    return contrastive_loss(distance(embed(model, pair.p), embed(model, pair.q)), pair.label, margin)


def pair_backward(model, pair, margin):
    """Loss and parameter gradients for one pair, in ``model.parameters()`` order."""
    return batch_loss_and_grads(model, [pair.p], [pair.q], [pair.label], margin)

"""Single-layer LSTM without peepholes, with exact backpropagation through time.

Gate rows of ``w`` are stacked as (input, forget, output, candidate), each
block ``n`` rows tall. The columns of ``w`` act on ``[x; h_prev]``.

Sequences are arrays of shape ``(R, d)``; a leading step axis followed by a
batch axis, ``(R, B, d)``, is also accepted everywhere and is what the
training loop uses.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MagicMismatchError, ShapeError, TruncatedFileError
from .numerics import DTYPE, init_bound, sigmoid, uniform_init

MAGIC = b"SLSTM001"


@dataclass(frozen=True)
class LstmParams:
    w: np.ndarray
    bias: np.ndarray
    input_dim: int
    hidden_dim: int

    def __post_init__(self):
        d, n = self.input_dim, self.hidden_dim
        if self.w.shape != (4 * n, d + n):
            raise ShapeError(f"w must be {(4 * n, d + n)}, got {self.w.shape}")
        if self.bias.shape != (4 * n,):
            raise ShapeError(f"bias must be ({4 * n},), got {self.bias.shape}")

    @classmethod
    def create(cls, w, bias, input_dim, hidden_dim):
        return cls(np.asarray(w, dtype=DTYPE), np.asarray(bias, dtype=DTYPE),
                   int(input_dim), int(hidden_dim))

    @classmethod
    def zeros(cls, input_dim, hidden_dim):
        n = hidden_dim
        return cls.create(np.zeros((4 * n, input_dim + n)), np.zeros(4 * n), input_dim, n)

    @classmethod
    def init(cls, rng, input_dim, hidden_dim):
        """Uniform weights in [-a, a] with a = sqrt(1/(d+n)); zero biases."""
        n = hidden_dim
        bound = init_bound(input_dim, hidden_dim)
        return cls.create(uniform_init(rng, 4 * n, input_dim + n, bound),
                          np.zeros(4 * n), input_dim, n)

    def to_bytes(self):
        return (MAGIC + struct.pack("<II", self.input_dim, self.hidden_dim)
                + self.w.astype("<f8").tobytes() + self.bias.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, buf, offset=0):
        """Parse a blob starting at ``offset``; returns (params, end offset)."""
        if buf[offset:offset + 8] != MAGIC:
            raise MagicMismatchError(f"expected {MAGIC!r}, found {bytes(buf[offset:offset + 8])!r}")
        offset += 8
        if len(buf) < offset + 8:
            raise TruncatedFileError("LSTM header truncated")
        d, n = struct.unpack_from("<II", buf, offset)
        offset += 8
        count = 4 * n * (d + n) + 4 * n
        end = offset + 8 * count
        if len(buf) < end:
            raise TruncatedFileError(f"LSTM payload needs {8 * count} bytes, have {len(buf) - offset}")
        flat = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(DTYPE)
        w = flat[:4 * n * (d + n)].reshape(4 * n, d + n)
        return cls.create(w, flat[4 * n * (d + n):], d, n), end


@dataclass(frozen=True)
class LstmStepState:
    h: np.ndarray
    c: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray


@dataclass
class LstmTrace:
    """Everything the backward pass needs, stored per step.

    ``xh`` holds the concatenated ``[x_r; h_{r-1}]`` inputs, ``gates`` the
    activated (i, f, o, g) blocks.
    """

    inputs: np.ndarray
    xh: np.ndarray
    gates: np.ndarray
    c: np.ndarray
    h: np.ndarray
    c0: np.ndarray
    hidden_dim: int = field(default=0)

    def __len__(self):
        return self.h.shape[0]

    def gate(self, name):
        n = self.hidden_dim
        k = "ifog".index(name)
        return self.gates[..., k * n:(k + 1) * n]

    @property
    def steps(self):
        return [
            LstmStepState(h=self.h[r], c=self.c[r], i=self.gate("i")[r], f=self.gate("f")[r],
                          o=self.gate("o")[r], g=self.gate("g")[r])
            for r in range(len(self))
        ]


@dataclass(frozen=True)
class LstmGradients:
    d_w: np.ndarray
    d_bias: np.ndarray
    d_inputs: np.ndarray


def _activate(z, n):
    out = np.empty_like(z)
    out[..., :3 * n] = sigmoid(z[..., :3 * n])
    out[..., 3 * n:] = np.tanh(z[..., 3 * n:])
    return out


def _check_step(params, x, h_prev, c_prev):
    d, n = params.input_dim, params.hidden_dim
    if x.shape[-1] != d:
        raise ShapeError(f"input has dimension {x.shape[-1]}, params expect d={d}")
    if h_prev.shape[-1] != n or c_prev.shape[-1] != n:
        raise ShapeError(f"state dimensions {h_prev.shape}, {c_prev.shape} do not match n={n}")


def cell_forward(params, x, h_prev, c_prev):
    x = np.asarray(x, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    c_prev = np.asarray(c_prev, dtype=DTYPE)
    _check_step(params, x, h_prev, c_prev)
    n = params.hidden_dim
    xh = np.concatenate([x, h_prev], axis=-1)
    a = _activate(xh @ params.w.T + params.bias, n)
    i, f, o, g = a[..., :n], a[..., n:2 * n], a[..., 2 * n:3 * n], a[..., 3 * n:]
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return LstmStepState(h=h, c=c, i=i, f=f, o=o, g=g)


def sequence_forward(params, seq, h0=None, c0=None):
    seq = np.asarray(seq, dtype=DTYPE)
    if seq.ndim < 2 or seq.shape[0] == 0:
        raise ShapeError(f"sequence must have at least one row, got shape {seq.shape}")
    d, n = params.input_dim, params.hidden_dim
    if seq.shape[-1] != d:
        raise ShapeError(f"sequence rows have dimension {seq.shape[-1]}, params expect d={d}")
    R = seq.shape[0]
    batch = seq.shape[1:-1]
    h_prev = np.zeros(batch + (n,)) if h0 is None else np.broadcast_to(np.asarray(h0, dtype=DTYPE), batch + (n,))
    c_prev = np.zeros(batch + (n,)) if c0 is None else np.broadcast_to(np.asarray(c0, dtype=DTYPE), batch + (n,))
    c_init = np.array(c_prev)

    xh = np.empty((R,) + batch + (d + n,))
    gates = np.empty((R,) + batch + (4 * n,))
    cs = np.empty((R,) + batch + (n,))
    hs = np.empty((R,) + batch + (n,))
    for r in range(R):
        xh[r, ..., :d] = seq[r]
        xh[r, ..., d:] = h_prev
        a = _activate(xh[r] @ params.w.T + params.bias, n)
        gates[r] = a
        c = a[..., n:2 * n] * c_prev + a[..., :n] * a[..., 3 * n:]
        h = a[..., 2 * n:3 * n] * np.tanh(c)
        cs[r] = c
        hs[r] = h
        h_prev, c_prev = h, c
    return LstmTrace(inputs=seq, xh=xh, gates=gates, c=cs, h=hs, c0=c_init, hidden_dim=n)


def sequence_backward(params, trace, d_h):
    """Gradients of a scalar loss given its derivative w.r.t. every h_r.

    Batched traces have their parameter gradients summed over the batch.
    """
    d_h = np.asarray(d_h, dtype=DTYPE)
    if d_h.shape != trace.h.shape:
        raise ShapeError(f"upstream gradient shape {d_h.shape} does not match trace {trace.h.shape}")
    d, n = params.input_dim, params.hidden_dim
    R = len(trace)
    batch = trace.h.shape[1:-1]

    d_w = np.zeros_like(params.w)
    d_bias = np.zeros_like(params.bias)
    d_inputs = np.empty(trace.inputs.shape)
    dh_next = np.zeros(batch + (n,))
    dc_next = np.zeros(batch + (n,))
    w_h = params.w[:, d:]
    w_x = params.w[:, :d]
    for r in reversed(range(R)):
        a = trace.gates[r]
        i, f, o, g = a[..., :n], a[..., n:2 * n], a[..., 2 * n:3 * n], a[..., 3 * n:]
        c_prev = trace.c[r - 1] if r > 0 else trace.c0
        tc = np.tanh(trace.c[r])
        dh = d_h[r] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ], axis=-1)
        flat_dz = dz.reshape(-1, 4 * n)
        d_w += flat_dz.T @ trace.xh[r].reshape(-1, d + n)
        d_bias += flat_dz.sum(axis=0)
        d_inputs[r] = dz @ w_x
        dh_next = dz @ w_h
        dc_next = dc * f
    return LstmGradients(d_w=d_w, d_bias=d_bias, d_inputs=d_inputs)

"""Per-step gate activations of the LSTM branch, as CSV and graymap heat maps."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .lstm import sequence_forward
from .numerics import DTYPE

GATES = ("i", "f", "o", "g")


@dataclass(frozen=True)
class GateTrace:
    image_id: str
    norms: dict
    vectors: dict
    hidden: np.ndarray

    @property
    def steps(self):
        return len(self.hidden)

    @property
    def hidden_dim(self):
        return self.hidden.shape[1]


def trace_gates(model, seq, image_id=""):
    """Run the encoder's LSTM on one (R, d) sequence and keep every gate."""
    seq = np.asarray(seq, dtype=DTYPE)
    if seq.shape != (model.rows, model.input_dim):
        raise ShapeError(f"sequence shape {seq.shape} does not match model (R={model.rows}, d={model.input_dim})")
    trace = sequence_forward(model.lstm, seq)
    vectors = {name: np.array(trace.gate(name)) for name in GATES}
    norms = {name: np.linalg.norm(v, axis=1) for name, v in vectors.items()}
    return GateTrace(str(image_id), norms, vectors, trace.h)


def write_csv(trace, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["step"] + [f"{g}_norm" for g in GATES])
        for r in range(trace.steps):
            out.writerow([r + 1] + [repr(float(trace.norms[g][r])) for g in GATES])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {g: np.array([float(row[f"{g}_norm"]) for row in rows]) for g in GATES}


def heatmap_pixels(trace, gate, width=8):
    """Gray levels, one pixel row per step: 0 is black, sqrt(n) is white."""
    if gate not in GATES:
        raise ValueError(f"unknown gate {gate!r}; choose from {GATES}")
    scaled = trace.norms[gate] / np.sqrt(trace.hidden_dim)
    levels = np.clip(np.rint(255.0 * scaled), 0, 255).astype(np.uint8)
    return np.repeat(levels[:, None], width, axis=1)


def export_heatmap(trace, gate, path, width=8, csv_path=None):
    """Write ``path`` as a binary PGM plus the per-step norms as CSV.

    The CSV goes next to the image (same stem) unless ``csv_path`` is given.
    """
    path = Path(path)
    pixels = heatmap_pixels(trace, gate, width)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + pixels.tobytes())
    csv_path = write_csv(trace, csv_path or path.with_suffix(".csv"))
    return path, csv_path


def read_pgm(path):
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)

"""Row-feature sets on disk, identity-disjoint splits, and a synthetic generator.

On-disk layout: a JSON manifest listing the feature channels and the items,
plus one binary file per channel::

    b"SFEAT001" | count, R, d (uint32 LE) | count*R*d float32 LE

Items are stored item-major, rows within an item in order, matching the
manifest's item order.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DataError, DuplicateIdError, InconsistentShapeError,
                     MagicMismatchError, MissingFileError, TruncatedFileError)
from .numerics import DTYPE, SeededRng

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"SFEAT001"
_HEADER = struct.Struct("<III")


@dataclass(frozen=True)
class FeatureSet:
    """One feature channel for a list of images.

    ``data`` has shape ``(count, R, d)``; row ``k`` of ``data`` is the
    RowSequence of image ``ids[k]``.
    """

    name: str
    ids: tuple
    identities: np.ndarray
    cameras: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise InconsistentShapeError(f"feature data must be (count, R, d), got {self.data.shape}")
        count = self.data.shape[0]
        if not (len(self.ids) == len(self.identities) == len(self.cameras) == count):
            raise InconsistentShapeError(
                f"{self.name}: {len(self.ids)} ids, {len(self.identities)} identities, "
                f"{len(self.cameras)} cameras for {count} sequences")
        if self.data.shape[1] < 1:
            raise InconsistentShapeError(f"{self.name}: sequences need at least one row")
        if len(set(self.ids)) != len(self.ids):
            seen, dup = set(), None
            for i in self.ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise DuplicateIdError(f"{self.name}: duplicate image id {dup!r}")

    @classmethod
    def build(cls, name, ids, identities, cameras, data):
        return cls(name, tuple(str(i) for i in ids), np.asarray(identities), np.asarray(cameras),
                   np.asarray(data, dtype=DTYPE))

    @property
    def R(self):
        return self.data.shape[1]

    @property
    def d(self):
        return self.data.shape[2]

    def __len__(self):
        return len(self.ids)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=int)
        return FeatureSet(self.name, tuple(self.ids[i] for i in idx), self.identities[idx],
                          self.cameras[idx], self.data[idx])

    def with_data(self, data):
        return FeatureSet(self.name, self.ids, self.identities, self.cameras, np.asarray(data, dtype=DTYPE))

    def index_of(self, image_id):
        return self.ids.index(image_id)


def _json_scalar(v):
    return v.item() if isinstance(v, np.generic) else v


def save_dataset(manifest_path, feature_sets):
    """Write feature sets that share one item list, plus the manifest."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    first = feature_sets[0]
    entries = []
    for fs in feature_sets:
        if fs.ids != first.ids:
            raise DataError(f"feature set {fs.name!r} lists different items than {first.name!r}")
        fname = f"{fs.name}.feat"
        with open(manifest_path.parent / fname, "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(_HEADER.pack(len(fs), fs.R, fs.d))
            fh.write(np.ascontiguousarray(fs.data, dtype="<f4").tobytes())
        entries.append({"name": fs.name, "R": fs.R, "d": fs.d, "file": fname})
    items = [{"id": i, "identity": _json_scalar(p), "camera": _json_scalar(c)}
             for i, p, c in zip(first.ids, first.identities, first.cameras)]
    manifest = {"feature_sets": entries, "items": items}
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest_path


def read_manifest(manifest_path):
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        manifest["feature_sets"], manifest["items"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from None
    return manifest


def load_feature_set(manifest_path, feature_name):
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    entries = {e["name"]: e for e in manifest["feature_sets"]}
    if feature_name not in entries:
        raise DataError(f"feature set {feature_name!r} not in manifest; available: {sorted(entries)}")
    entry = entries[feature_name]
    path = manifest_path.parent / entry["file"]
    if not path.is_file():
        raise MissingFileError(f"feature file missing: {path}")
    buf = path.read_bytes()
    if buf[:8] != FEATURE_MAGIC:
        raise MagicMismatchError(f"{path}: expected magic {FEATURE_MAGIC!r}, found {buf[:8]!r}")
    if len(buf) < 8 + _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    count, R, d = _HEADER.unpack_from(buf, 8)
    if (R, d) != (entry["R"], entry["d"]):
        raise InconsistentShapeError(f"{path}: header has R={R}, d={d}; manifest says R={entry['R']}, d={entry['d']}")
    items = manifest["items"]
    if count != len(items):
        raise InconsistentShapeError(f"{path}: file holds {count} items, manifest lists {len(items)}")
    expected = 8 + _HEADER.size + 4 * count * R * d
    if len(buf) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(buf)}")
    if len(buf) > expected:
        raise InconsistentShapeError(f"{path}: {len(buf) - expected} trailing bytes")
    data = np.frombuffer(buf, dtype="<f4", offset=8 + _HEADER.size).astype(DTYPE).reshape(count, R, d)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite feature values")
    return FeatureSet.build(feature_name, [it["id"] for it in items], [it["identity"] for it in items],
                            [it["camera"] for it in items], data)


@dataclass(frozen=True)
class SplitSpec:
    train_identities: tuple
    val_identities: tuple
    test_identities: tuple
    train_items: np.ndarray
    val_query: np.ndarray
    val_gallery: np.ndarray
    test_query: np.ndarray
    test_gallery: np.ndarray
    seed: int = 0


def _sorted_unique(values):
    return sorted(set(_json_scalar(v) for v in values), key=lambda v: (str(type(v)), v))


def _query_gallery(fs, identities):
    """Query = an identity's images from its lowest camera; gallery = the rest."""
    wanted = set(identities)
    first_cam = {}
    for p, c in zip(fs.identities, fs.cameras):
        p, c = _json_scalar(p), _json_scalar(c)
        if p in wanted and (p not in first_cam or c < first_cam[p]):
            first_cam[p] = c
    query, gallery = [], []
    order = sorted(range(len(fs)), key=lambda k: fs.ids[k])
    for k in order:
        p = _json_scalar(fs.identities[k])
        if p not in wanted:
            continue
        (query if _json_scalar(fs.cameras[k]) == first_cam[p] else gallery).append(k)
    return np.array(query, dtype=int), np.array(gallery, dtype=int)


def make_split(fs, ratio=0.5, seed=0, val_fraction=0.1):
    """Randomly partition identities into train / validation / test.

    ``ratio`` is the fraction of identities used for training (validation
    identities are carved out of that share). Depends only on the set of
    identity labels and ``seed``, never on item order.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    ids = _sorted_unique(fs.identities)
    n_train = int(round(ratio * len(ids)))
    n_val = int(round(val_fraction * n_train))
    if val_fraction > 0:
        n_val = max(n_val, 1)
    if n_train - n_val < 2 or len(ids) - n_train < 1:
        raise DataError(f"{len(ids)} identities are too few for ratio={ratio}, val_fraction={val_fraction}")
    perm = SeededRng(seed).permutation(len(ids))
    shuffled = [ids[k] for k in perm]
    train_pool = sorted(shuffled[:n_train], key=lambda v: (str(type(v)), v))
    test = tuple(sorted(shuffled[n_train:], key=lambda v: (str(type(v)), v)))
    val = tuple(train_pool[k] for k in sorted(SeededRng(seed + 1).permutation(n_train)[:n_val]))
    train = tuple(p for p in train_pool if p not in set(val))
    train_set = set(train)
    train_items = np.array([k for k in sorted(range(len(fs)), key=lambda k: fs.ids[k])
                            if _json_scalar(fs.identities[k]) in train_set], dtype=int)
    vq, vg = _query_gallery(fs, val)
    tq, tg = _query_gallery(fs, test)
    return SplitSpec(train, val, test, train_items, vq, vg, tq, tg, seed)


@dataclass(frozen=True)
class Standardizer:
    """Per-position (row, dimension) z-scoring fitted on training items."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, fs):
        mean = fs.data.mean(axis=0)
        std = fs.data.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean, std)

    def apply(self, fs):
        return fs.with_data((fs.data - self.mean) / self.std)


@dataclass(frozen=True)
class SyntheticSpec:
    identities: int = 100
    cameras: int = 2
    images_per_camera: int = 2
    rows: int = 16
    dim: int = 32
    noise: float = 0.1
    seed: int = 0
    name: str = "synthetic"
    clutter: float = 6.0
    switch: float = 0.5
    marker: float = 3.0
    camera_shift: float = 1.0


def generate_synthetic(spec=None, **overrides):
    """Seeded synthetic re-identification data with row-to-row context.

    Every (identity, camera) view draws a hidden state ``s`` in {+1, -1}
    (``-1`` with probability ``switch``). Row 0 carries ``s * marker``, a
    fixed direction of norm ``marker * sqrt(d)``. In every later row the
    identity's pattern occupies the first half of the dimensions when
    ``s = +1`` and the second half when ``s = -1``; the other half holds
    per-image clutter drawn from ``N(0, (clutter * noise)^2)``. A later row
    is therefore only readable once the state in row 0 is known. On top
    come a per-camera offset (``N(0, camera_shift^2)``, shared by all
    identities) and i.i.d. ``N(0, noise^2)`` noise.

    With ``noise = 0`` all images of one identity in one camera coincide.
    Needs ``dim >= 2``.
    """
    spec = spec or SyntheticSpec()
    if overrides:
        spec = SyntheticSpec(**{**spec.__dict__, **overrides})
    if min(spec.identities, spec.cameras, spec.images_per_camera, spec.rows, spec.dim) < 1:
        raise DataError(f"synthetic spec counts must all be >= 1: {spec}")
    if spec.dim < 2:
        raise DataError("synthetic features need dim >= 2")
    if spec.noise < 0 or spec.clutter < 0:
        raise DataError("noise and clutter must be non-negative")
    rng = SeededRng(spec.seed)
    R, d = spec.rows, spec.dim
    half = d // 2
    patterns = rng.normal(1.0, (spec.identities, R, half))
    offsets = rng.normal(spec.camera_shift, (spec.cameras, R, d))
    marker = rng.normal(1.0, d)
    marker *= spec.marker * np.sqrt(d) / np.linalg.norm(marker)
    states = np.where(rng.uniform(0.0, 1.0, (spec.identities, spec.cameras)) < spec.switch, -1.0, 1.0)
    ids, persons, cams, data = [], [], [], []
    for p in range(spec.identities):
        for c in range(spec.cameras):
            s = states[p, c]
            lo, hi = (slice(0, half), slice(half, d)) if s > 0 else (slice(d - half, d), slice(0, d - half))
            for k in range(spec.images_per_camera):
                x = np.zeros((R, d))
                x[0] = s * marker
                x[1:, lo] = patterns[p, 1:]
                x[1:, hi] = rng.normal(spec.clutter * spec.noise, (R - 1, hi.stop - hi.start))
                x += offsets[c] + rng.normal(spec.noise, (R, d))
                ids.append(f"{p:04d}_c{c}_{k}")
                persons.append(p)
                cams.append(c)
                data.append(x)
    # Quantize to what the float32 file format can hold so save/load is exact.
    data = np.asarray(data).astype(np.float32).astype(DTYPE)
    return FeatureSet.build(spec.name, ids, persons, cams, data)

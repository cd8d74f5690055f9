"""Synthetic labeled datasets and the correctly-classified pre-filter.

Two generators:

* ``gen_blobs`` — C Gaussian clusters in R^D with unit-separated means
  (QR-orthonormalized random directions scaled to pairwise distance 1);
  ``spread`` sets the expected noise norm per sample.
* ``gen_minimages`` — image-shaped data in [0,1] where each class is a fixed
  base pattern (2-3 class-specific low-frequency cosines plus one localized
  blob) plus per-sample Gaussian pixel noise. Class signal is deliberately
  low-frequency so frequency-ordered search bases have something to find.

Dataset files are a self-describing container: 8-byte magic ``GFCSDAT\\0``,
uint32 little-endian header length, UTF-8 JSON header (shape, class count,
count, generator metadata), then inputs as little-endian float32 and labels
as little-endian int32.

Argmax ties are broken toward the lowest class index everywhere in this
package; ``filter_correct`` follows that rule.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySelectionError, InvalidInputError, ParseError, UnsupportedVersionError
from .numerics import RandomStream

DATA_MAGIC = b"GFCSDAT\0"
DATA_FORMAT_VERSION = 1


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (n, D) float64
    labels: np.ndarray  # (n,) int64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise InvalidInputError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def shape(self) -> tuple:
        return tuple(self.meta["shape"])

    @property
    def class_count(self) -> int:
        return int(self.meta["class_count"])

    def subset(self, indices) -> "LabeledDataset":
        meta = dict(self.meta)
        meta["subset_of"] = meta.get("count", len(self))
        meta["count"] = int(len(indices))
        return LabeledDataset(self.inputs[indices], self.labels[indices], meta)


def gen_blobs(seed, dim, classes, n_per_class, spread) -> LabeledDataset:
    """Gaussian clusters with unit-separated means; deterministic in seed."""
    if dim < 2 or classes < 2:
        raise InvalidInputError("need dim >= 2 and classes >= 2")
    if classes > dim:
        raise InvalidInputError(
            f"blob means are orthonormalized, so classes ({classes}) must "
            f"not exceed dim ({dim})")
    stream = RandomStream(seed)
    raw = stream.standard_normal((dim, classes))
    q, _ = np.linalg.qr(raw)
    means = q.T / np.sqrt(2.0)  # pairwise distance exactly 1
    n = classes * n_per_class
    inputs = np.empty((n, dim))
    labels = np.empty(n, dtype=np.int64)
    for k in range(classes):
        noise = stream.standard_normal((n_per_class, dim)) * (spread / np.sqrt(dim))
        inputs[k * n_per_class:(k + 1) * n_per_class] = means[k] + noise
        labels[k * n_per_class:(k + 1) * n_per_class] = k
    meta = {
        "generator": "blobs",
        "seed": int(seed),
        "shape": (dim,),
        "class_count": classes,
        "n_per_class": n_per_class,
        "spread": float(spread),
        "count": n,
    }
    return LabeledDataset(inputs, labels, meta)


def _class_pattern(stream: RandomStream, h, w, channels, amplitude):
    """One class's base image: low-frequency cosines plus a localized blob."""
    i = np.arange(h)[:, None, None]
    j = np.arange(w)[None, :, None]
    pattern = np.full((h, w, channels), 0.5)
    n_waves = int(stream.integers(2, 4))
    for _ in range(n_waves):
        u = int(stream.integers(0, 4))
        v = int(stream.integers(0, 4))
        if u == 0 and v == 0:
            u = 1
        phase_i = stream.uniform(0, np.pi)
        phase_j = stream.uniform(0, np.pi)
        amp = stream.uniform(0.5, 1.0, size=channels) * amplitude
        wave = (np.cos((2 * i + 1) * u * np.pi / (2 * h) + phase_i)
                * np.cos((2 * j + 1) * v * np.pi / (2 * w) + phase_j))
        pattern += wave * amp[None, None, :]
    ci = stream.uniform(0.2, 0.8) * h
    cj = stream.uniform(0.2, 0.8) * w
    radius = stream.uniform(0.12, 0.22) * min(h, w)
    blob_amp = stream.uniform(-1.5, 1.5, size=channels) * amplitude
    blob = np.exp(-(((i - ci) ** 2) + ((j - cj) ** 2)) / (2 * radius ** 2))
    pattern += blob * blob_amp[None, None, :]
    return pattern


def gen_minimages(seed, height, width, channels, classes, n_per_class,
                  noise=0.06, amplitude=0.09) -> LabeledDataset:
    """Image-like classes built from low-frequency structure; values in [0,1]."""
    if height < 8 or width < 8:
        raise InvalidInputError("need height, width >= 8")
    if classes < 2 or channels < 1:
        raise InvalidInputError("need classes >= 2 and channels >= 1")
    stream = RandomStream(seed)
    patterns = [_class_pattern(stream, height, width, channels, amplitude)
                for _ in range(classes)]
    dim = height * width * channels
    n = classes * n_per_class
    inputs = np.empty((n, dim))
    labels = np.empty(n, dtype=np.int64)
    for k in range(classes):
        base = patterns[k].reshape(-1)
        pix = stream.standard_normal((n_per_class, dim)) * noise
        inputs[k * n_per_class:(k + 1) * n_per_class] = np.clip(base + pix, 0.0, 1.0)
        labels[k * n_per_class:(k + 1) * n_per_class] = k
    meta = {
        "generator": "minimages",
        "seed": int(seed),
        "shape": (height, width, channels),
        "class_count": classes,
        "n_per_class": n_per_class,
        "noise": float(noise),
        "amplitude": float(amplitude),
        "count": n,
    }
    return LabeledDataset(inputs, labels, meta)


GENERATORS = {"blobs": gen_blobs, "minimages": gen_minimages}


def filter_correct(model, data: LabeledDataset):
    """Keep items the model classifies correctly; also return their scores.

    Returns (filtered dataset, (n_kept, C) score array) so downstream attacks
    can start from cached scores without spending a query. Raises
    EmptySelectionError when nothing survives.
    """
    scores = model.forward_batch(data.inputs)
    preds = np.argmax(scores, axis=1)
    keep = np.flatnonzero(preds == data.labels)
    if keep.size == 0:
        raise EmptySelectionError("model classifies no dataset item correctly")
    return data.subset(keep), scores[keep]


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def save_dataset(data: LabeledDataset, path) -> None:
    meta = dict(data.meta)
    meta["shape"] = list(data.shape)
    header = {
        "format_version": DATA_FORMAT_VERSION,
        "count": len(data),
        **meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(data.inputs, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(data.labels, dtype="<i4").tobytes())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(DATA_MAGIC) + 4:
        raise ParseError("file too short for dataset container", len(raw))
    if raw[: len(DATA_MAGIC)] != DATA_MAGIC:
        raise ParseError("bad magic; not a dataset file", 0)
    (hlen,) = struct.unpack_from("<I", raw, len(DATA_MAGIC))
    hstart = len(DATA_MAGIC) + 4
    hend = hstart + hlen
    if hend > len(raw):
        raise ParseError("truncated header", len(raw))
    try:
        header = json.loads(raw[hstart:hend].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"header is not valid JSON: {exc}", hstart) from exc
    if header.get("format_version") != DATA_FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"dataset format version {header.get('format_version')}; "
            f"this build reads {DATA_FORMAT_VERSION}")
    count = int(header["count"])
    dim = int(np.prod(header["shape"]))
    in_bytes = count * dim * 4
    lab_bytes = count * 4
    if hend + in_bytes + lab_bytes != len(raw):
        raise ParseError(
            f"payload size mismatch: expected {in_bytes + lab_bytes} bytes",
            hend)
    inputs = np.frombuffer(raw, dtype="<f4", count=count * dim,
                           offset=hend).reshape(count, dim).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<i4", count=count,
                           offset=hend + in_bytes).astype(np.int64)
    meta = {k: v for k, v in header.items() if k != "format_version"}
    meta["shape"] = tuple(meta["shape"])
    return LabeledDataset(inputs, labels, meta)

"""Differentiable classifiers with explicit reverse-mode input gradients.

The layer set is deliberately small: affine, strided convolution, ReLU,
average pooling, flatten. That is enough to build architecturally distinct
victim/surrogate pairs without pulling in an autodiff framework, and every
layer has a hand-written exact backward pass (ReLU uses subgradient 0 at 0,
so gradients are deterministic).

Data layout: batches are (N, H, W, C) for grid inputs and (N, D) for flat
ones; single inputs are flat vectors of length D that are reshaped
internally. Weights are float64. Weight matrices are initialized from the
model's RandomStream as U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at
zero.

Model files are a self-describing container: 8-byte magic ``GFCSMDL\\0``,
uint32 little-endian header length, a UTF-8 JSON header (format version,
architecture spec, shapes, seed, weight shapes, training report), then the
raw little-endian float64 weight blocks in layer order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import (
    InvalidInputError,
    ParseError,
    TrainingFailureError,
    UnsupportedVersionError,
)
from .numerics import RandomStream, bilinear_resize, bilinear_resize_adjoint

MODEL_MAGIC = b"GFCSMDL\0"
MODEL_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class _Affine:
    def __init__(self, w, b):
        self.w = w  # (in, out)
        self.b = b  # (out,)

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        return x @ self.w + self.b

    def input_grad(self, x, gout):
        return gout @ self.w.T

    def param_grads(self, x, gout):
        return [x.T @ gout, gout.sum(axis=0)]


class _ReLU:
    params = []

    def forward(self, x):
        return np.maximum(x, 0.0)

    def input_grad(self, x, gout):
        return gout * (x > 0.0)

    def param_grads(self, x, gout):
        return []


class _Flatten:
    params = []

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def input_grad(self, x, gout):
        return gout.reshape(x.shape)

    def param_grads(self, x, gout):
        return []


class _AvgPool:
    def __init__(self, size):
        self.size = size

    params = []

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.size
        return x.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def input_grad(self, x, gout):
        k = self.size
        g = np.repeat(np.repeat(gout, k, axis=1), k, axis=2)
        return g / (k * k)

    def param_grads(self, x, gout):
        return []


class _Conv:
    def __init__(self, w, b, stride, padding):
        self.w = w  # (kh, kw, cin, cout)
        self.b = b  # (cout,)
        self.stride = stride
        self.padding = padding

    @property
    def params(self):
        return [self.w, self.b]

    def _cols(self, x):
        kh, kw, cin, _ = self.w.shape
        s, p = self.stride, self.padding
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        n, hp, wp, _ = x.shape
        ho = (hp - kh) // s + 1
        wo = (wp - kw) // s + 1
        cols = np.empty((n, ho, wo, kh, kw, cin), dtype=np.float64)
        for a in range(kh):
            for b in range(kw):
                cols[:, :, :, a, b, :] = x[:, a:a + s * ho:s, b:b + s * wo:s, :]
        return cols, (n, hp, wp, cin, ho, wo)

    def forward(self, x):
        kh, kw, cin, cout = self.w.shape
        cols, (n, _, _, _, ho, wo) = self._cols(x)
        flat = cols.reshape(n * ho * wo, kh * kw * cin)
        out = flat @ self.w.reshape(kh * kw * cin, cout) + self.b
        return out.reshape(n, ho, wo, cout)

    def input_grad(self, x, gout):
        kh, kw, cin, cout = self.w.shape
        s, p = self.stride, self.padding
        n, ho, wo, _ = gout.shape
        gcols = gout.reshape(n * ho * wo, cout) @ self.w.reshape(kh * kw * cin, cout).T
        gcols = gcols.reshape(n, ho, wo, kh, kw, cin)
        hp = x.shape[1] + 2 * p
        wp = x.shape[2] + 2 * p
        gx = np.zeros((n, hp, wp, cin), dtype=np.float64)
        for a in range(kh):
            for b in range(kw):
                gx[:, a:a + s * ho:s, b:b + s * wo:s, :] += gcols[:, :, :, a, b, :]
        if p:
            gx = gx[:, p:-p, p:-p, :]
        return gx

    def param_grads(self, x, gout):
        kh, kw, cin, cout = self.w.shape
        cols, (n, _, _, _, ho, wo) = self._cols(x)
        flat = cols.reshape(n * ho * wo, kh * kw * cin)
        gw = flat.T @ gout.reshape(n * ho * wo, cout)
        return [gw.reshape(kh, kw, cin, cout), gout.sum(axis=(0, 1, 2))]


# ---------------------------------------------------------------------------
# architecture spec -> layers
# ---------------------------------------------------------------------------

def _build_layers(arch, input_shape, class_count, stream: RandomStream):
    """Instantiate layers from a spec list, inferring shapes as we go."""
    shape = tuple(input_shape)
    layers = []
    for entry in arch:
        kind = entry.get("kind")
        if kind == "affine":
            if len(shape) != 1:
                raise InvalidInputError(
                    f"affine layer needs a flat input, have shape {shape} "
                    "(insert a flatten layer)")
            out = int(entry["out"])
            fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            w = stream.uniform(-bound, bound, size=(fan_in, out))
            layers.append(_Affine(w, np.zeros(out)))
            shape = (out,)
        elif kind == "relu":
            layers.append(_ReLU())
        elif kind == "flatten":
            if len(shape) != 3:
                raise InvalidInputError(f"flatten needs a grid input, have {shape}")
            layers.append(_Flatten())
            shape = (int(np.prod(shape)),)
        elif kind == "avgpool":
            if len(shape) != 3:
                raise InvalidInputError(f"avgpool needs a grid input, have {shape}")
            k = int(entry["size"])
            h, w, c = shape
            if h % k or w % k:
                raise InvalidInputError(
                    f"avgpool size {k} does not divide grid {shape}")
            layers.append(_AvgPool(k))
            shape = (h // k, w // k, c)
        elif kind == "conv":
            if len(shape) != 3:
                raise InvalidInputError(f"conv needs a grid input, have {shape}")
            h, w, cin = shape
            kh = int(entry["kernel"])
            stride = int(entry.get("stride", 1))
            pad = int(entry.get("padding", 0))
            cout = int(entry["out_channels"])
            ho = (h + 2 * pad - kh) // stride + 1
            wo = (w + 2 * pad - kh) // stride + 1
            if ho < 1 or wo < 1:
                raise InvalidInputError(
                    f"conv kernel {kh} stride {stride} does not fit grid {shape}")
            fan_in = kh * kh * cin
            bound = 1.0 / np.sqrt(fan_in)
            wgt = stream.uniform(-bound, bound, size=(kh, kh, cin, cout))
            layers.append(_Conv(wgt, np.zeros(cout), stride, pad))
            shape = (ho, wo, cout)
        else:
            raise InvalidInputError(f"unknown layer kind {kind!r}")
    if shape != (class_count,):
        raise InvalidInputError(
            f"architecture produces output shape {shape}, expected ({class_count},)")
    return layers


class ScoreModel:
    """A classifier exposing logits and exact input gradients of w^T f(x).

    Immutable after construction/training; safe for concurrent read-only use.
    """

    def __init__(self, arch, input_shape, class_count, seed, layers,
                 train_report=None):
        self.arch = arch
        self.input_shape = tuple(int(s) for s in input_shape)
        self.class_count = int(class_count)
        self.seed = int(seed)
        self.layers = layers
        self.train_report = train_report

    @classmethod
    def initialize(cls, arch, input_shape, class_count, seed):
        stream = RandomStream(seed)
        layers = _build_layers(arch, input_shape, class_count, stream)
        return cls(arch, input_shape, class_count, seed, layers)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def _to_batch(self, xb):
        xb = np.asarray(xb, dtype=np.float64)
        if xb.ndim != 2 or xb.shape[1] != self.input_dim:
            raise InvalidInputError(
                f"expected batch of shape (N, {self.input_dim}), got {xb.shape}")
        if len(self.input_shape) == 3:
            return xb.reshape((xb.shape[0],) + self.input_shape)
        return xb

    def forward_batch(self, xb) -> np.ndarray:
        """Logits for a (N, D) batch; returns (N, C)."""
        h = self._to_batch(xb)
        for layer in self.layers:
            h = layer.forward(h)
        return h

    def forward_scores(self, x) -> np.ndarray:
        """Logits for a single flat input of length D."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise InvalidInputError(
                f"expected input of shape ({self.input_dim},), got {x.shape}")
        return self.forward_batch(x[None, :])[0]

    def _forward_cached(self, xb):
        acts = [self._to_batch(xb)]
        for layer in self.layers:
            acts.append(layer.forward(acts[-1]))
        return acts

    def weighted_input_gradient(self, x, w) -> np.ndarray:
        """Gradient of w . f(x) with respect to x, as a flat D-vector."""
        x = np.asarray(x, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise InvalidInputError(
                f"expected input of shape ({self.input_dim},), got {x.shape}")
        if w.shape != (self.class_count,):
            raise InvalidInputError(
                f"expected weights of shape ({self.class_count},), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidInputError("non-finite class weights")
        acts = self._forward_cached(x[None, :])
        g = w[None, :].copy()
        for layer, inp in zip(reversed(self.layers), reversed(acts[:-1])):
            g = layer.input_grad(inp, g)
        return g.reshape(self.input_dim)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainSpec:
    """SGD-with-momentum hyperparameters. The seed drives init and shuffling."""

    def __init__(self, learning_rate=0.1, momentum=0.9, epochs=20,
                 batch_size=32, seed=0, holdout=0.0):
        if learning_rate <= 0 or momentum < 0 or epochs < 0 or batch_size <= 0:
            raise InvalidInputError("TrainSpec values must be positive")
        if not (0.0 <= holdout < 1.0):
            raise InvalidInputError("holdout fraction must be in [0, 1)")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.holdout = float(holdout)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def accuracy(model, inputs, labels) -> float:
    """Fraction of argmax predictions equal to labels (ties -> lowest index)."""
    preds = np.argmax(model.forward_batch(inputs), axis=1)
    return float(np.mean(preds == np.asarray(labels)))


def train_classifier(data, arch, spec: TrainSpec, test_data=None) -> ScoreModel:
    """Train a fresh model on a LabeledDataset with seeded SGD + momentum.

    Deterministic given the spec seed. If ``test_data`` is given it is used
    for the reported test accuracy; otherwise ``spec.holdout`` (if nonzero)
    carves a deterministic holdout split off the end of a seeded shuffle.
    The report lands on the returned model as ``train_report``.
    """
    inputs = np.asarray(data.inputs, dtype=np.float64)
    labels = np.asarray(data.labels, dtype=np.int64)
    n = inputs.shape[0]
    if n == 0:
        raise InvalidInputError("empty dataset")
    class_count = int(data.class_count)
    if labels.min() < 0 or labels.max() >= class_count:
        raise InvalidInputError("labels out of range")

    stream = RandomStream(spec.seed)
    model = ScoreModel.initialize(arch, data.shape, class_count, spec.seed)

    test_inputs = test_labels = None
    if test_data is not None:
        test_inputs = np.asarray(test_data.inputs, dtype=np.float64)
        test_labels = np.asarray(test_data.labels, dtype=np.int64)
    elif spec.holdout > 0.0:
        perm = stream.permutation(n)
        n_hold = max(1, int(round(n * spec.holdout)))
        hold, keep = perm[:n_hold], perm[n_hold:]
        test_inputs, test_labels = inputs[hold], labels[hold]
        inputs, labels = inputs[keep], labels[keep]
        n = inputs.shape[0]

    velocity = [np.zeros_like(p) for layer in model.layers for p in layer.params]
    final_loss = float("nan")
    for _ in range(spec.epochs):
        perm = stream.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            xb, yb = inputs[idx], labels[idx]
            acts = model._forward_cached(xb)
            logits = acts[-1]
            probs = _softmax(logits)
            batch = len(idx)
            nll = -np.log(np.maximum(probs[np.arange(batch), yb], 1e-300))
            loss = float(nll.mean())
            if not np.isfinite(loss):
                raise TrainingFailureError(f"training diverged (loss={loss})")
            epoch_loss += loss * batch
            g = probs
            g[np.arange(batch), yb] -= 1.0
            g /= batch
            vi = 0
            updates = []
            for layer, inp in zip(reversed(model.layers), reversed(acts[:-1])):
                pgrads = layer.param_grads(inp, g)
                updates.append((layer, pgrads))
                g = layer.input_grad(inp, g)
            # velocity list is in forward layer order; walk it accordingly
            updates.reverse()
            for layer, pgrads in updates:
                for p, pg in zip(layer.params, pgrads):
                    velocity[vi] = spec.momentum * velocity[vi] - spec.learning_rate * pg
                    p += velocity[vi]
                    vi += 1
        final_loss = epoch_loss / n
    report = {
        "final_loss": final_loss,
        "train_accuracy": accuracy(model, inputs, labels),
        "test_accuracy": (accuracy(model, test_inputs, test_labels)
                          if test_inputs is not None else None),
        "epochs": spec.epochs,
    }
    model.train_report = report
    return model


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_model(model: ScoreModel, path) -> None:
    weights = [p for layer in model.layers for p in layer.params]
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "seed": model.seed,
        "weight_shapes": [list(w.shape) for w in weights],
        "train_report": model.train_report,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for w in weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_model(path) -> ScoreModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MODEL_MAGIC) + 4:
        raise ParseError("file too short for model container", len(raw))
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ParseError("bad magic; not a model file", 0)
    (hlen,) = struct.unpack_from("<I", raw, len(MODEL_MAGIC))
    hstart = len(MODEL_MAGIC) + 4
    hend = hstart + hlen
    if hend > len(raw):
        raise ParseError("truncated header", len(raw))
    try:
        header = json.loads(raw[hstart:hend].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"header is not valid JSON: {exc}", hstart) from exc
    version = header.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"model format version {version}; this build reads {MODEL_FORMAT_VERSION}")
    model = ScoreModel.initialize(
        header["arch"], header["input_shape"], header["class_count"], header["seed"])
    weights = [p for layer in model.layers for p in layer.params]
    shapes = [tuple(s) for s in header["weight_shapes"]]
    if shapes != [w.shape for w in weights]:
        raise ParseError("weight shapes do not match architecture", hstart)
    offset = hend
    for w in weights:
        nbytes = w.size * 8
        if offset + nbytes > len(raw):
            raise ParseError("truncated weight block", offset)
        w[...] = np.frombuffer(raw, dtype="<f8", count=w.size,
                               offset=offset).reshape(w.shape)
        offset += nbytes
    if offset != len(raw):
        raise ParseError("trailing bytes after weight blocks", offset)
    model.train_report = header.get("train_report")
    return model


# ---------------------------------------------------------------------------
# cross-resolution adapter
# ---------------------------------------------------------------------------

class DomainAdaptedModel:
    """Wraps a grid-input model behind a bilinear-resample front end.

    Forward resamples the victim-shaped input to the wrapped model's native
    resolution; the input gradient is pulled back through the exact adjoint
    of that resampling, so finite differences through the composite match.
    """

    def __init__(self, inner, input_shape):
        self.inner = inner
        self.input_shape = tuple(int(s) for s in input_shape)
        self.class_count = inner.class_count

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def _resize_in(self, x):
        h, w, c = self.inner.input_shape
        grid = x.reshape(self.input_shape)
        return bilinear_resize(grid, h, w).reshape(-1)

    def forward_scores(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise InvalidInputError(
                f"expected input of shape ({self.input_dim},), got {x.shape}")
        return self.inner.forward_scores(self._resize_in(x))

    def forward_batch(self, xb) -> np.ndarray:
        xb = np.asarray(xb, dtype=np.float64)
        return np.stack([self.forward_scores(row) for row in xb])

    def weighted_input_gradient(self, x, w) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise InvalidInputError(
                f"expected input of shape ({self.input_dim},), got {x.shape}")
        g_inner = self.inner.weighted_input_gradient(self._resize_in(x), w)
        grid = g_inner.reshape(self.inner.input_shape)
        hv, wv, _ = self.input_shape
        return bilinear_resize_adjoint(grid, hv, wv).reshape(-1)


def adapt_domain(surrogate, victim_input_shape):
    """Return a model accepting victim-shaped inputs backed by ``surrogate``.

    Identity (the surrogate itself) when shapes already match.
    """
    victim_input_shape = tuple(int(s) for s in victim_input_shape)
    if surrogate.input_shape == victim_input_shape:
        return surrogate
    if len(surrogate.input_shape) != 3 or len(victim_input_shape) != 3:
        raise InvalidInputError("domain adaptation needs grid-shaped models")
    if surrogate.input_shape[2] != victim_input_shape[2]:
        raise InvalidInputError(
            f"channel mismatch: surrogate {surrogate.input_shape} vs "
            f"victim {victim_input_shape}")
    return DomainAdaptedModel(surrogate, victim_input_shape)

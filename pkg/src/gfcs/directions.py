"""Unit-norm candidate direction generators.

Three families feed the attack engines:

* surrogate loss gradients — the normalized gradient of the adversarial loss
  on a surrogate, with the class ranking taken from the victim's scores;
* output-diversified sampling — the normalized gradient of a uniformly
  random weighted sum of a surrogate's class scores, i.e. a random element
  of the row space of its local Jacobian (the margin-loss gradient is the
  special case w = e_target - e_top);
* fixed ordered bases — pixel one-hots, low-frequency 2-D DCT grids, the
  left singular vectors of a stack of surrogate gradients, or the principal
  components of the input data.

Every emitted direction has unit l2 norm. Near-zero gradients raise
DegenerateDirectionError (threshold 1e-12) instead of returning junk, so
engines can resample or skip a surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CursorExhaustedError, DegenerateDirectionError, InvalidInputError
from .numerics import RandomStream, dct2_basis, thin_svd

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class ClassRanking:
    """Top class and runner-up (or fixed target) under the victim's scores."""
    c_s: int
    c_t: int

    def __post_init__(self):
        if self.c_s == self.c_t:
            raise InvalidInputError("ranking needs two distinct classes")


def rank_classes(victim_scores, target=None) -> ClassRanking:
    """Rank classes from a victim score vector.

    Untargeted (``target is None``): c_s is the argmax, c_t the runner-up.
    Targeted: c_t is the target, c_s the argmax among the other classes.
    Ties break toward the lowest index.
    """
    s = np.asarray(victim_scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise InvalidInputError("need at least two class scores")
    if target is None:
        c_s = int(np.argmax(s))
        masked = s.copy()
        masked[c_s] = -np.inf
        c_t = int(np.argmax(masked))
        return ClassRanking(c_s, c_t)
    t = int(target)
    if not (0 <= t < s.size):
        raise InvalidInputError(f"target {t} out of range for {s.size} classes")
    masked = s.copy()
    masked[t] = -np.inf
    c_s = int(np.argmax(masked))
    return ClassRanking(c_s, t)


def margin_loss(scores, ranking: ClassRanking) -> float:
    """scores[c_t] - scores[c_s]; positive iff the target class outscores the top."""
    s = np.asarray(scores, dtype=np.float64)
    return float(s[ranking.c_t] - s[ranking.c_s])


def targeted_log_loss(scores, target: int) -> float:
    """Log of the target-class softmax probability, max-subtracted for stability."""
    s = np.asarray(scores, dtype=np.float64)
    m = s.max()
    return float(s[target] - m - np.log(np.exp(s - m).sum()))


def _normalize(g: np.ndarray) -> np.ndarray:
    norm = np.sqrt(g @ g)
    if norm < DEGENERATE_NORM:
        raise DegenerateDirectionError(f"gradient norm {norm:.3e} below threshold")
    return g / norm


def weighted_gradient_direction(model, x, w) -> np.ndarray:
    """Unit-normalized gradient of w . f(x); shared core of the samplers below."""
    return _normalize(model.weighted_input_gradient(x, np.asarray(w, dtype=np.float64)))


def ods_direction(model, x, stream: RandomStream) -> np.ndarray:
    """Sample w ~ U(-1,1)^C and return the normalized gradient of w . f(x)."""
    w = stream.uniform(-1.0, 1.0, size=model.class_count)
    return weighted_gradient_direction(model, x, w)


def surrogate_loss_gradient(model, x, ranking: ClassRanking, loss="margin") -> np.ndarray:
    """Normalized surrogate gradient of the configured adversarial loss.

    margin: single backward pass with w = e_{c_t} - e_{c_s}.
    targeted-log: analytic gradient of log softmax_t through the logits,
    i.e. w = e_t - softmax(f(x)) — one forward plus one backward on the
    surrogate, no victim queries.
    """
    c = model.class_count
    if loss == "margin":
        w = np.zeros(c)
        w[ranking.c_t] = 1.0
        w[ranking.c_s] = -1.0
    elif loss == "targeted-log":
        logits = model.forward_scores(x)
        z = logits - logits.max()
        p = np.exp(z)
        p /= p.sum()
        w = -p
        w[ranking.c_t] += 1.0
    else:
        raise InvalidInputError(f"unknown loss {loss!r}")
    return weighted_gradient_direction(model, x, w)


# ---------------------------------------------------------------------------
# direction sources
# ---------------------------------------------------------------------------

class FixedBasisSource:
    """Ordered unit directions emitted without replacement. Single-owner."""

    def __init__(self, vectors, kind: str):
        self.kind = kind
        self._vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
        for v in self._vectors:
            norm = np.sqrt(v @ v)
            if abs(norm - 1.0) > 1e-9:
                raise InvalidInputError(f"basis vector has norm {norm}, expected 1")
        self.cursor = 0

    @property
    def size(self) -> int:
        return len(self._vectors)

    @property
    def remaining(self) -> int:
        return len(self._vectors) - self.cursor

    def next_direction(self, x=None) -> np.ndarray:
        if self.cursor >= len(self._vectors):
            raise CursorExhaustedError(
                f"{self.kind} basis exhausted after {self.size} directions")
        v = self._vectors[self.cursor]
        self.cursor += 1
        return v


class OdsSource:
    """Fresh output-diversified sample at the current iterate on every draw."""

    kind = "ods"

    def __init__(self, models, stream: RandomStream):
        if not models:
            raise InvalidInputError("need at least one surrogate")
        self.models = list(models)
        self.stream = stream

    def next_direction(self, x) -> np.ndarray:
        model = self.stream.pick(self.models)
        return ods_direction(model, x, self.stream)


def pixel_basis(dim: int, stream: RandomStream) -> FixedBasisSource:
    """The D one-hot directions in a seeded random order."""
    order = stream.permutation(dim)
    eye = np.eye(dim)
    return FixedBasisSource([eye[i] for i in order], kind="pixel")


def dct_basis_source(h, w, channels, freq_count, stream: RandomStream | None = None,
                     order: str = "low-frequency-first") -> FixedBasisSource:
    """Low-frequency 2-D DCT directions, frequency-ordered or shuffled."""
    grids = dct2_basis(h, w, channels, freq_count)
    vectors = [g.reshape(-1) for g in grids]
    if order == "random":
        if stream is None:
            raise InvalidInputError("random order needs a RandomStream")
        vectors = [vectors[i] for i in stream.permutation(len(vectors))]
    elif order != "low-frequency-first":
        raise InvalidInputError(f"unknown order {order!r}")
    return FixedBasisSource(vectors, kind="dct")


def pca_gradient_basis(surrogate, sample_inputs, k: int,
                       stream: RandomStream) -> FixedBasisSource:
    """Top-k left singular vectors of a matrix of surrogate attack gradients.

    For each sample, a class other than the surrogate's prediction is drawn
    uniformly and the normalized gradient of that class score is taken as a
    column (a basic targeted fast-gradient direction). The SVD orders the
    resulting directions by how much of the stack they explain.
    """
    samples = np.asarray(sample_inputs, dtype=np.float64)
    if samples.ndim != 2:
        raise InvalidInputError("sample_inputs must be (n, D)")
    n = samples.shape[0]
    if not (1 <= k <= n):
        raise InvalidInputError(f"need 1 <= k <= {n} samples, got k={k}")
    c = surrogate.class_count
    cols = []
    for x in samples:
        pred = int(np.argmax(surrogate.forward_scores(x)))
        pick = int(stream.integers(0, c - 1))
        target = pick if pick < pred else pick + 1
        w = np.zeros(c)
        w[target] = 1.0
        try:
            cols.append(weighted_gradient_direction(surrogate, x, w))
        except DegenerateDirectionError:
            continue
    if not cols:
        raise DegenerateDirectionError("all sample gradients were degenerate")
    matrix = np.stack(cols, axis=1)
    u, s, _ = thin_svd(matrix)
    keep = min(k, u.shape[1])
    return FixedBasisSource([u[:, i] for i in range(keep)], kind="pca-gradients")


def image_pca_basis(data, k: int) -> FixedBasisSource:
    """Top-k principal components of the dataset inputs as directions."""
    inputs = np.asarray(data.inputs, dtype=np.float64)
    n, dim = inputs.shape
    if not (1 <= k <= min(n, dim)):
        raise InvalidInputError(f"need 1 <= k <= min(n={n}, D={dim})")
    centered = (inputs - inputs.mean(axis=0)).T  # (D, n)
    if n <= dim:
        u, _, _ = thin_svd(centered)
        comps = u
    else:
        # more samples than dimensions: SVD the transpose and read V
        _, _, v = thin_svd(centered.T)
        comps = v
    return FixedBasisSource([comps[:, i] for i in range(k)], kind="pca-images")

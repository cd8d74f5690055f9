"""Shared numerical primitives.

Conventions used throughout the package:

* A *vector* is a 1-D float64 ndarray with finite entries.
* A *grid* is an (H, W, C) float64 ndarray. Grids flatten to vectors in
  C-order (row-major): flat index = (i * W + j) * C + c. ``grid_to_vector`` /
  ``vector_to_grid`` round-trip exactly.
* Bilinear resampling uses the align-corners-false convention with edge
  clamping (the dominant convention in image pipelines); the adjoint is the
  exact transpose of that linear map.
* ``RandomStream`` wraps numpy's Philox 4x64 counter-based bit generator, so
  equal seeds give bit-equal streams across platforms and numpy versions.
  Child streams are derived with splitmix64 so they do not depend on draw
  order.

Everything here is pure and double precision.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, NumericalFailureError

_U64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# vectors and grids
# ---------------------------------------------------------------------------

def as_vector(values) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidInputError(f"expected 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("vector contains NaN or Inf")
    return v


def as_grid(values, shape=None) -> np.ndarray:
    """Coerce to a finite (H, W, C) float64 grid."""
    g = np.asarray(values, dtype=np.float64)
    if shape is not None:
        g = g.reshape(shape)
    if g.ndim != 3:
        raise InvalidInputError(f"expected (H, W, C) grid, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise InvalidInputError("grid contains NaN or Inf")
    return g


def grid_to_vector(g: np.ndarray) -> np.ndarray:
    """Flatten (H, W, C) -> (H*W*C,) in C-order."""
    return np.ascontiguousarray(g, dtype=np.float64).reshape(-1)


def vector_to_grid(v: np.ndarray, shape) -> np.ndarray:
    """Inverse of :func:`grid_to_vector` for the given (H, W, C) shape."""
    h, w, c = shape
    v = np.asarray(v, dtype=np.float64)
    if v.size != h * w * c:
        raise InvalidInputError(f"vector of size {v.size} does not fill grid {shape}")
    return v.reshape(h, w, c)


def l2_norm(v) -> float:
    """Euclidean norm; rejects non-finite input."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("non-finite input to l2_norm")
    return float(np.sqrt(np.sum(v * v)))


def project_to_ball(x: np.ndarray, center: np.ndarray, nu: float) -> np.ndarray:
    """Project ``x`` onto the closed l2 ball of radius ``nu`` around ``center``.

    Returns ``x`` itself (not a copy) when it is already inside the ball.
    """
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if x.shape != center.shape:
        raise InvalidInputError(f"shape mismatch: {x.shape} vs {center.shape}")
    if not nu > 0:
        raise InvalidInputError(f"nu must be positive, got {nu}")
    d = x - center
    dist = np.sqrt(np.sum(d * d))
    if dist <= nu:
        return x
    return center + d * (nu / dist)


# ---------------------------------------------------------------------------
# bilinear resampling and its adjoint
# ---------------------------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) matrix of 1-D bilinear weights.

    Align-corners-false: output sample d reads source coordinate
    (d + 0.5) * n_in / n_out - 0.5, clamped to [0, n_in - 1]. Rows sum to 1,
    so constants are preserved.
    """
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(g: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Resample an (H, W, C) grid to (h_out, w_out, C)."""
    g = as_grid(g)
    if h_out < 1 or w_out < 1:
        raise InvalidInputError("output sizes must be >= 1")
    h, w, _ = g.shape
    rh = _interp_matrix(h, h_out)
    rw = _interp_matrix(w, w_out)
    out = np.einsum("oi,ijc->ojc", rh, g)
    return np.einsum("pj,ojc->opc", rw, out)


def bilinear_resize_adjoint(g: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Exact transpose of :func:`bilinear_resize`.

    ``g`` has the *resized* shape; the result has shape (h_out, w_out, C)
    where (h_out, w_out) is the original grid size, so that
    <resize(x), y> == <x, adjoint(y)> for all x, y.
    """
    g = as_grid(g)
    if h_out < 1 or w_out < 1:
        raise InvalidInputError("output sizes must be >= 1")
    h, w, _ = g.shape
    rh = _interp_matrix(h_out, h)  # forward map was (h,) -> from h_out
    rw = _interp_matrix(w_out, w)
    out = np.einsum("oi,ojc->ijc", rh, g)
    return np.einsum("pj,ipc->ijc", rw, out)


# ---------------------------------------------------------------------------
# DCT basis
# ---------------------------------------------------------------------------

def dct2_basis(h: int, w: int, channels: int, freq_count: int) -> list[np.ndarray]:
    """Lowest-frequency 2-D type-II DCT basis grids, one per channel.

    Returns freq_count**2 * channels unit-norm (h, w, channels) grids, each
    supported on a single channel. Ordered by increasing frequency sum u+v,
    ties by u, then by channel, so the per-channel DC components come first.
    """
    if not (1 <= freq_count <= min(h, w)):
        raise InvalidInputError(
            f"freq_count must be in [1, {min(h, w)}], got {freq_count}")
    i = np.arange(h, dtype=np.float64)
    j = np.arange(w, dtype=np.float64)
    basis = []
    pairs = sorted(
        ((u, v) for u in range(freq_count) for v in range(freq_count)),
        key=lambda uv: (uv[0] + uv[1], uv[0]),
    )
    for u, v in pairs:
        row = np.cos((2 * i + 1) * u * np.pi / (2 * h))
        col = np.cos((2 * j + 1) * v * np.pi / (2 * w))
        tile = np.outer(row, col)
        tile = tile / np.sqrt(np.sum(tile * tile))
        for c in range(channels):
            g = np.zeros((h, w, channels), dtype=np.float64)
            g[:, :, c] = tile
            basis.append(g)
    return basis


# ---------------------------------------------------------------------------
# thin SVD (one-sided Jacobi)
# ---------------------------------------------------------------------------

def thin_svd(m: np.ndarray, max_sweeps: int = 100, tol: float = 1e-12):
    """Thin SVD of a (D, k) matrix with k <= D via one-sided Jacobi.

    Returns (U, s, V) with U (D, k) orthonormal columns, s nonincreasing
    nonnegative, V (k, k) orthogonal, and m = U @ diag(s) @ V.T.

    Jacobi rotations are applied to column pairs until every normalized
    off-diagonal Gram entry is below ``tol`` or ``max_sweeps`` is hit, in
    which case a NumericalFailureError carrying the residual is raised.
    Columns with zero singular value get an orthonormal completion so U is
    always a full orthonormal frame.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError(f"expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix contains NaN or Inf")
    d, k = a.shape
    if k > d:
        raise InvalidInputError(f"thin_svd needs k <= D, got {a.shape}")

    v = np.eye(k)
    converged = False
    residual = 0.0
    for _ in range(max_sweeps):
        residual = 0.0
        rotated = False
        for p in range(k - 1):
            for q in range(p + 1, k):
                app = a[:, p] @ a[:, p]
                aqq = a[:, q] @ a[:, q]
                apq = a[:, p] @ a[:, q]
                denom = np.sqrt(app * aqq)
                if denom == 0.0:
                    continue
                rel = abs(apq) / denom
                residual = max(residual, rel)
                if rel <= tol:
                    continue
                rotated = True
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ap = a[:, p].copy()
                a[:, p] = c * ap - s * a[:, q]
                a[:, q] = s * ap + c * a[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            converged = True
            break
    if not converged:
        raise NumericalFailureError(
            f"one-sided Jacobi SVD did not converge in {max_sweeps} sweeps", residual)

    sing = np.sqrt(np.sum(a * a, axis=0))
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    a = a[:, order]
    v = v[:, order]

    scale = sing[0] if sing.size and sing[0] > 0 else 1.0
    u = np.zeros((d, k), dtype=np.float64)
    filled = []
    for idx in range(k):
        if sing[idx] > scale * 1e-300:
            u[:, idx] = a[:, idx] / sing[idx]
            filled.append(idx)
    # complete zero-singular-value columns to an orthonormal frame
    for idx in range(k):
        if sing[idx] > scale * 1e-300:
            continue
        for e in range(d):
            cand = np.zeros(d)
            cand[e] = 1.0
            cand -= u[:, filled] @ (u[:, filled].T @ cand) if filled else 0.0
            norm = np.sqrt(cand @ cand)
            if norm > 0.5:
                u[:, idx] = cand / norm
                filled.append(idx)
                break
    return u, sing, v


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Order-independent 64-bit child seed for stream ``index``."""
    return _splitmix64((master_seed & _U64) ^ _splitmix64(index & _U64))


class RandomStream:
    """Seeded random source pinned to numpy's Philox counter-based generator.

    A stream is single-owner: do not share one instance across concurrent
    tasks; derive children with :meth:`child` instead.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed & _U64))

    def child(self, index: int) -> "RandomStream":
        return RandomStream(derive_seed(self.seed, index))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def pick(self, items: list):
        """Uniform draw from a nonempty sequence."""
        return items[int(self._gen.integers(0, len(items)))]

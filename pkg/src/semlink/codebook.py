"""Trainable vector-quantization codebook with noise-guided differentiable surrogates.

The codebook is a K x N matrix of codewords shared by transmitter and receiver.
Only the index of the nearest codeword is ever transmitted; the surrogate
outputs exist to keep training differentiable and to drive the EMA update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

SURROGATES = ("andvq", "nsvq", "ste")


@dataclass
class Codebook:
    """Codeword matrix plus the EMA statistics that drive its updates.

    entries[k] always equals ema_sum[k] / (ema_count[k] + eps) after an
    EMA update, so the statistics are the ground truth and the entries a
    cached quotient.
    """

    entries: np.ndarray    # (K, N)
    ema_count: np.ndarray  # (K,)
    ema_sum: np.ndarray    # (K, N)
    decay: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        self.entries = np.atleast_2d(np.asarray(self.entries, dtype=float))
        self.ema_count = np.asarray(self.ema_count, dtype=float)
        self.ema_sum = np.atleast_2d(np.asarray(self.ema_sum, dtype=float))
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")
        if self.entries.shape != self.ema_sum.shape:
            raise ValueError("entries and ema_sum shapes differ")
        if self.ema_count.shape != (self.entries.shape[0],):
            raise ValueError("ema_count length must equal K")
        if np.any(self.ema_count < 0):
            raise ValueError("ema_count must be nonnegative")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class QuantizerConfig:
    """Knobs of the quantization surrogate."""

    k_neighbors: int = 5
    surrogate: str = "andvq"
    rng_seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be positive")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"unknown surrogate {self.surrogate!r}")


@dataclass
class LatentBatch:
    """A batch of latent vectors and, once quantized, their codeword indices.

    grid_shape records the patch-grid layout (rows, cols) the vectors were
    taken from, so an image can be reassembled from the batch alone.
    """

    vectors: np.ndarray                    # (M, N)
    assigned_index: np.ndarray | None = None  # (M,) ints in [0, K)
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        if self.assigned_index is not None:
            self.assigned_index = np.asarray(self.assigned_index, dtype=np.int64)
            if self.assigned_index.shape != (self.vectors.shape[0],):
                raise ValueError("assigned_index length must match vector count")


@dataclass
class QuantizeResult:
    """Output of one surrogate quantization step.

    grad_z_diag/grad_c_diag are the diagonal (elementwise) Jacobian factors
    of the surrogate with respect to the input and the codeword; they sum
    to one elementwise except in the degenerate zero-offset case.
    """

    z_q: np.ndarray
    index: int
    d_avg: np.ndarray
    sigma_q: float
    grad_z_diag: np.ndarray
    grad_c_diag: np.ndarray


def new_codebook(entries: np.ndarray, decay: float = 0.9, eps: float = 1e-5) -> Codebook:
    """Wrap raw codewords in a Codebook with consistent initial EMA statistics."""
    entries = np.atleast_2d(np.asarray(entries, dtype=float))
    count = np.ones(entries.shape[0])
    total = entries * (count + eps)[:, None]
    return Codebook(entries.copy(), count, total, decay, eps)


def init_from_batch(vectors: np.ndarray, k: int, rng: np.random.Generator,
                    decay: float = 0.9, eps: float = 1e-5) -> Codebook:
    """Seed a K-entry codebook with rows drawn uniformly from a training batch."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    m = vectors.shape[0]
    if m == 0:
        raise ValueError("empty training batch")
    replace = m < k
    rows = rng.choice(m, size=k, replace=replace)
    return new_codebook(vectors[rows], decay=decay, eps=eps)


def nearest_quantize(z: np.ndarray, cb: Codebook) -> tuple[int, np.ndarray]:
    """Hard nearest-neighbor lookup; ties break toward the smaller index."""
    if cb.size == 0:
        raise ValueError("empty codebook")
    z = np.asarray(z, dtype=float)
    d = np.linalg.norm(cb.entries - z[None, :], axis=1)
    idx = int(np.argmin(d))
    return idx, cb.entries[idx].copy()


def knn_set(z: np.ndarray, cb: Codebook, k_c: int) -> np.ndarray:
    """Indices of the k_c nearest codewords, sorted by distance then index."""
    if k_c > cb.size:
        raise ValueError(f"k_c={k_c} exceeds codebook size {cb.size}")
    if k_c < 1:
        raise ValueError("k_c must be positive")
    z = np.asarray(z, dtype=float)
    d = np.linalg.norm(cb.entries - z[None, :], axis=1)
    order = np.argsort(d, kind="stable")  # stable sort keeps smaller index first on ties
    return order[:k_c]


def avg_offset(z: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Mean offset of z from its nearest codewords: mean_k (z - c_k)."""
    neighbors = np.atleast_2d(np.asarray(neighbors, dtype=float))
    if neighbors.shape[0] == 0:
        raise ValueError("need at least one neighbor")
    return (np.asarray(z, dtype=float)[None, :] - neighbors).mean(axis=0)


def adaptive_sigma(z: np.ndarray, neighbors: np.ndarray) -> float:
    """Noise scale: arithmetic mean of the distances to the nearest codewords."""
    neighbors = np.atleast_2d(np.asarray(neighbors, dtype=float))
    if neighbors.shape[0] == 0:
        raise ValueError("need at least one neighbor")
    return float(np.linalg.norm(np.asarray(z, dtype=float)[None, :] - neighbors, axis=1).mean())


def andvq_gradients(d_avg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise surrogate Jacobian factors (1 - u*u, u*u) for u = d_avg/|d_avg|.

    Zero offset returns a pair of zero vectors by convention.
    """
    d_avg = np.asarray(d_avg, dtype=float)
    mag = np.linalg.norm(d_avg)
    if mag == 0.0:
        zeros = np.zeros_like(d_avg)
        return zeros, zeros.copy()
    u = d_avg / mag
    grad_c = u * u
    return 1.0 - grad_c, grad_c


def andvq_forward(z: np.ndarray, cb: Codebook, cfg: QuantizerConfig,
                  rng: np.random.Generator) -> QuantizeResult:
    """Noise-guided differentiable quantization of a single latent vector.

    The surrogate steps from z by the mean-offset magnitude |d_avg| along the
    gradient-stopped unit direction of (centroid pull + exploration noise),
    i.e. toward the local codeword mass; the noise scale adapts to local
    codebook density. The returned index is always the hard nearest
    neighbor, which is what gets transmitted.
    """
    z = np.asarray(z, dtype=float)
    index, _ = nearest_quantize(z, cb)
    neighbors = cb.entries[knn_set(z, cb, cfg.k_neighbors)]
    d_avg = avg_offset(z, neighbors)
    sigma = adaptive_sigma(z, neighbors)
    mag = np.linalg.norm(d_avg)
    zeros = np.zeros_like(z)
    if mag == 0.0:
        return QuantizeResult(z.copy(), index, d_avg, sigma, zeros, zeros.copy())
    v_d = -d_avg + rng.normal(0.0, sigma, size=z.shape)
    norm_vd = np.linalg.norm(v_d)
    if norm_vd == 0.0:  # retry the noise draw once, then give up gracefully
        v_d = -d_avg + rng.normal(0.0, sigma, size=z.shape)
        norm_vd = np.linalg.norm(v_d)
        if norm_vd == 0.0:
            return QuantizeResult(z.copy(), index, d_avg, sigma, zeros, zeros.copy())
    z_q = z + mag * (v_d / norm_vd)
    grad_z, grad_c = andvq_gradients(d_avg)
    return QuantizeResult(z_q, index, d_avg, sigma, grad_z, grad_c)


def baseline_forward(z: np.ndarray, cb: Codebook, surrogate: str,
                     rng: np.random.Generator | None = None) -> QuantizeResult:
    """STE (copy-through) and NSVQ (isotropic noise substitution) surrogates."""
    z = np.asarray(z, dtype=float)
    index, codeword = nearest_quantize(z, cb)
    offset = z - codeword
    err = float(np.linalg.norm(offset))
    ones = np.ones_like(z)
    zeros = np.zeros_like(z)
    if surrogate == "ste":
        return QuantizeResult(codeword, index, offset, err, ones, zeros)
    if surrogate == "nsvq":
        if rng is None:
            raise ValueError("nsvq needs an rng")
        if err == 0.0:
            return QuantizeResult(z.copy(), index, offset, err, ones, zeros)
        w = rng.normal(0.0, 1.0, size=z.shape)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return QuantizeResult(z.copy(), index, offset, err, ones, zeros)
        u_w = w / norm_w
        z_q = z + err * u_w
        grad_c = -u_w * offset / err
        return QuantizeResult(z_q, index, offset, err, 1.0 - grad_c, grad_c)
    raise ValueError(f"unknown baseline surrogate {surrogate!r}")


def ema_update(cb: Codebook, batch_assignments: np.ndarray,
               batch_surrogates: np.ndarray) -> Codebook:
    """One epoch of exponential-moving-average codebook refresh.

    Decays the usage counts and accumulated surrogate sums, then rewrites
    every entry as the regularized quotient sum / (count + eps). Entries
    with no assignments keep their decayed statistics.
    """
    assignments = np.asarray(batch_assignments, dtype=np.int64)
    surrogates = np.atleast_2d(np.asarray(batch_surrogates, dtype=float))
    if assignments.shape[0] != surrogates.shape[0]:
        raise ValueError("assignments and surrogates must pair up")
    k, n = cb.entries.shape
    if assignments.size and (assignments.min() < 0 or assignments.max() >= k):
        raise ValueError("assignment index out of range")
    psi = np.bincount(assignments, minlength=k).astype(float)
    sums = np.zeros((k, n))
    for j in range(n):
        sums[:, j] = np.bincount(assignments, weights=surrogates[:, j], minlength=k)
    count = cb.decay * cb.ema_count + (1.0 - cb.decay) * psi
    total = cb.decay * cb.ema_sum + (1.0 - cb.decay) * sums
    entries = total / (count + cb.eps)[:, None]
    return Codebook(entries, count, total, cb.decay, cb.eps)


def cur(cb: Codebook, assignments: np.ndarray) -> float:
    """Codebook utilization ratio: distinct indices used over capacity."""
    assignments = np.asarray(assignments)
    if assignments.size == 0:
        return 0.0
    return float(np.unique(assignments).size) / cb.size


def assign(vectors: np.ndarray, cb: Codebook) -> np.ndarray:
    """Batched hard nearest-neighbor assignment."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    if cb.size == 0:
        raise ValueError("empty codebook")
    return np.argmin(cdist(vectors, cb.entries), axis=1)


def quantize_batch(vectors: np.ndarray, cb: Codebook, cfg: QuantizerConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized surrogate pass over a batch: (hard indices, surrogate outputs).

    Matches the per-vector operations in distribution; batched noise draws
    are ordered differently from looping the scalar API.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    if cb.size == 0:
        raise ValueError("empty codebook")
    d = cdist(vectors, cb.entries)
    indices = np.argmin(d, axis=1)
    if cfg.surrogate == "ste":
        return indices, cb.entries[indices].copy()
    if cfg.surrogate == "nsvq":
        err = d[np.arange(len(vectors)), indices]
        w = rng.normal(0.0, 1.0, size=vectors.shape)
        norm_w = np.linalg.norm(w, axis=1)
        safe = np.where(norm_w > 0, norm_w, 1.0)
        z_q = vectors + (err / safe)[:, None] * w
        return indices, np.where((err > 0)[:, None] & (norm_w > 0)[:, None], z_q, vectors)
    # andvq
    order = np.argsort(d, axis=1, kind="stable")[:, :cfg.k_neighbors]
    neighbors = cb.entries[order]                       # (M, K_c, N)
    d_avg = vectors[:, None, :] - neighbors
    sigma = np.linalg.norm(d_avg, axis=2).mean(axis=1)  # (M,)
    d_avg = d_avg.mean(axis=1)                          # (M, N)
    mag = np.linalg.norm(d_avg, axis=1)
    v_d = -d_avg + sigma[:, None] * rng.normal(0.0, 1.0, size=vectors.shape)
    norm_vd = np.linalg.norm(v_d, axis=1)
    ok = (mag > 0) & (norm_vd > 0)
    step = np.zeros_like(vectors)
    step[ok] = (mag[ok] / norm_vd[ok])[:, None] * v_d[ok]
    return indices, vectors + step


def save_codebook(cb: Codebook, path) -> None:
    """Write entries plus EMA statistics as little-endian float32 ("SQC1")."""
    k, n = cb.entries.shape
    with open(path, "wb") as f:
        f.write(b"SQC1")
        f.write(struct.pack("<II", k, n))
        f.write(cb.entries.astype("<f4").tobytes())
        f.write(cb.ema_count.astype("<f4").tobytes())
        f.write(cb.ema_sum.astype("<f4").tobytes())


def load_codebook(path, decay: float = 0.9, eps: float = 1e-5) -> Codebook:
    """Inverse of save_codebook; decay and eps are not stored in the file."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"SQC1":
            raise ValueError(f"bad codebook magic {magic!r}")
        k, n = struct.unpack("<II", f.read(8))
        entries = np.frombuffer(f.read(4 * k * n), dtype="<f4").reshape(k, n)
        count = np.frombuffer(f.read(4 * k), dtype="<f4")
        total = np.frombuffer(f.read(4 * k * n), dtype="<f4").reshape(k, n)
    return Codebook(entries.astype(float), count.astype(float), total.astype(float),
                    decay, eps)

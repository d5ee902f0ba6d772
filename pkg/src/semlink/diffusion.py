"""Conditional-diffusion refinement of rough channel estimates.

The forward process drifts the true channel vector toward the rough estimate
while injecting SNR-scaled noise; reverse sampling walks back from the rough
estimate using a pluggable predictor of the clean vector. Complex channel
vectors travel through this module as stacked real/imaginary parts.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone noise-mixing sequence eta_t with increments alpha_t.

    eta_0 is defined as 0, so alpha_1 = eta_1 and the final reverse step is
    deterministic.
    """

    eta: np.ndarray
    alpha: np.ndarray
    kappa0: float = 1.0
    rho0: float = 0.5

    @property
    def steps(self) -> int:
        return self.eta.size

    def eta_at(self, t: int) -> float:
        """eta indexed from t = 0 (returns 0) through t = T."""
        if t < 0 or t > self.steps:
            raise ValueError(f"step {t} outside [0, {self.steps}]")
        return 0.0 if t == 0 else float(self.eta[t - 1])


def build_schedule(steps: int, eta1: float = 1e-4, eta_t: float = 0.999,
                   rho0: float = 0.5, kappa0: float = 1.0) -> NoiseSchedule:
    """Warped geometric schedule hitting both endpoints exactly.

    sqrt(eta) follows a geometric progression between sqrt(eta1) and
    sqrt(eta_T), warped by the exponent profile beta_t = ((t-1)/(T-1))^rho0
    * (T-1); rho0 < 1 front-loads small steps.
    """
    if steps < 2:
        raise ValueError("need at least two steps")
    if not 0.0 < eta1 < eta_t <= 1.0:
        raise ValueError("require 0 < eta1 < eta_T <= 1")
    if rho0 <= 0 or kappa0 <= 0:
        raise ValueError("rho0 and kappa0 must be positive")
    t = np.arange(1, steps + 1, dtype=float)
    beta = ((t - 1.0) / (steps - 1.0)) ** rho0 * (steps - 1.0)
    log_ratio = 0.5 * (np.log(eta_t) - np.log(eta1)) / (steps - 1.0)
    eta = np.exp(np.log(eta1) + 2.0 * log_ratio * beta)
    eta[0] = eta1
    eta[-1] = eta_t
    if np.any(np.diff(eta) <= 0):
        raise ValueError("schedule is not strictly increasing")
    alpha = np.diff(eta, prepend=0.0)
    return NoiseSchedule(eta, alpha, kappa0=kappa0, rho0=rho0)


def kappa_for_snr(kappa0: float, snr_db: float) -> float:
    """Noise adjustment kappa0 * exp(-snr_db / 10); high SNR means less noise."""
    if kappa0 <= 0:
        raise ValueError("kappa0 must be positive")
    return float(kappa0 * np.exp(-snr_db / 10.0))


def forward_step(h_prev: np.ndarray, delta: np.ndarray, t: int,
                 sched: NoiseSchedule, kappa: float,
                 rng: np.random.Generator) -> np.ndarray:
    """One forward transition: drift alpha_t * delta plus kappa sqrt(alpha_t) noise."""
    a = sched.alpha[t - 1]
    return h_prev + a * delta + kappa * np.sqrt(a) * rng.standard_normal(np.shape(h_prev))


def forward_marginal(h0: np.ndarray, h_rough: np.ndarray, t: int,
                     sched: NoiseSchedule, kappa: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Closed-form state after t forward steps: h0 + eta_t (h_rough - h0) + noise."""
    eta = sched.eta_at(t)
    noise = kappa * np.sqrt(eta) * rng.standard_normal(np.shape(h0))
    return h0 + eta * (np.asarray(h_rough) - np.asarray(h0)) + noise


def posterior_step(h_t: np.ndarray, h0_pred: np.ndarray, t: int,
                   sched: NoiseSchedule, kappa: float,
                   rng: np.random.Generator, t_prev: int | None = None) -> np.ndarray:
    """Sample the reverse transition toward step t_prev (default t - 1).

    The mean is the convex combination (eta_prev/eta_t) h_t +
    (1 - eta_prev/eta_t) h0_pred; at eta_prev = 0 the variance vanishes and
    the prediction is returned exactly.
    """
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t <= sched.steps:
        raise ValueError(f"invalid step pair ({t} -> {t_prev})")
    eta_t = sched.eta_at(t)
    eta_p = sched.eta_at(t_prev)
    alpha_eff = eta_t - eta_p
    mean = (eta_p / eta_t) * np.asarray(h_t) + (alpha_eff / eta_t) * np.asarray(h0_pred)
    if eta_p == 0.0:
        return mean
    std = kappa * np.sqrt((eta_p / eta_t) * alpha_eff)
    return mean + std * rng.standard_normal(np.shape(mean))


@dataclass
class Embedding:
    """Sinusoidal step/SNR features and their gated fusion."""

    time_emb: np.ndarray
    snr_emb: np.ndarray
    fused: np.ndarray
    gate_time: np.ndarray
    gate_snr: np.ndarray


def _sinusoid(value: float, dim: int) -> np.ndarray:
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    out = np.empty(dim)
    out[0::2] = np.cos(value * freqs)
    out[1::2] = np.sin(value * freqs)
    return out


def snr_norm(snr_db: float, eps: float, vmax_db: float) -> float:
    """Log-compressed SNR in [0, 1]; exactly 0 at 0 dB and 1 at vmax."""
    num = np.log10(snr_db + eps) - np.log10(eps)
    den = np.log10(vmax_db + eps) - np.log10(eps)
    return float(num / den)


def embed(t: int, snr_db: float, d_time: int = 64, d_snr: int = 64,
          eps_norm: float = 1e-3, vmax_db: float = 20.0,
          gate: float = 0.5) -> Embedding:
    """Interleaved cos/sin embeddings of the step index and normalized SNR,
    fused with fixed elementwise gate weights.

    SNR values outside [0, vmax] are clamped with a warning.
    """
    if t < 1:
        raise ValueError("step index starts at 1")
    if d_time % 2 or d_snr % 2 or d_time < 2 or d_snr < 2:
        raise ValueError("embedding dims must be even and >= 2")
    if snr_db > vmax_db or snr_db < 0.0:
        warnings.warn(f"snr {snr_db} dB outside [0, {vmax_db}]; clamping",
                      stacklevel=2)
        snr_db = float(np.clip(snr_db, 0.0, vmax_db))
    time_emb = _sinusoid(float(t), d_time)
    snr_emb = _sinusoid(snr_norm(snr_db, eps_norm, vmax_db), d_snr)
    d = max(d_time, d_snr)
    pad_t = np.pad(time_emb, (0, d - d_time))
    pad_s = np.pad(snr_emb, (0, d - d_snr))
    w_t = np.full(d, gate)
    w_s = np.full(d, gate)
    fused = w_t * pad_t + w_s * pad_s
    return Embedding(time_emb, snr_emb, fused, w_t, w_s)


@dataclass(frozen=True)
class EmbeddingSpec:
    d_time: int = 64
    d_snr: int = 64
    eps_norm: float = 1e-3
    vmax_db: float = 20.0

    @property
    def fused_dim(self) -> int:
        return max(self.d_time, self.d_snr)

    def fused(self, t: int, snr_db: float) -> np.ndarray:
        return embed(t, snr_db, self.d_time, self.d_snr,
                     self.eps_norm, self.vmax_db).fused


class Denoiser:
    """Predicts the clean channel vector from the current diffusion state."""

    kind = "base"

    def predict(self, h_t: np.ndarray, h_rough: np.ndarray, t: int,
                snr_db: float) -> np.ndarray:
        raise NotImplementedError


class OracleDenoiser(Denoiser):
    """Returns the ground truth it was given; the refinement upper bound."""

    kind = "oracle"

    def __init__(self, h0: np.ndarray):
        self.h0 = np.asarray(h0, dtype=float)

    def predict(self, h_t, h_rough, t, snr_db):
        return self.h0


class IdentityDenoiser(Denoiser):
    """Returns the rough estimate unchanged; refinement becomes a no-op."""

    kind = "identity"

    def predict(self, h_t, h_rough, t, snr_db):
        return np.asarray(h_rough, dtype=float)


class PerStepLinearDenoiser(Denoiser):
    """One affine map per step from [h_t | h_rough | fused embedding] to h0."""

    kind = "per_step_linear"

    def __init__(self, maps: dict[int, np.ndarray], dim: int, emb: EmbeddingSpec):
        self.maps = {int(t): np.asarray(m, dtype=float) for t, m in maps.items()}
        self.dim = dim
        self.emb = emb
        feat = 2 * dim + emb.fused_dim
        for t, m in self.maps.items():
            if m.shape != (feat + 1, dim):
                raise ValueError(f"map for step {t} has shape {m.shape}, "
                                 f"expected {(feat + 1, dim)}")

    @property
    def steps(self) -> int:
        return max(self.maps)

    def features(self, h_t: np.ndarray, h_rough: np.ndarray, t: int,
                 snr_db: float) -> np.ndarray:
        h_t = np.atleast_2d(h_t)
        h_rough = np.atleast_2d(h_rough)
        emb = self.emb.fused(t, snr_db)
        block = np.broadcast_to(emb, (h_t.shape[0], emb.size))
        ones = np.ones((h_t.shape[0], 1))
        return np.concatenate([h_t, h_rough, block, ones], axis=1)

    def predict(self, h_t, h_rough, t, snr_db):
        squeeze = np.ndim(h_t) == 1
        x = self.features(h_t, h_rough, t, snr_db)
        out = x @ self.maps[t]
        return out[0] if squeeze else out


def train_linear_denoiser(h0: np.ndarray, h_rough: np.ndarray, snr_db: np.ndarray,
                          sched: NoiseSchedule, rng: np.random.Generator,
                          emb: EmbeddingSpec | None = None,
                          ridge: float = 1e-6) -> PerStepLinearDenoiser:
    """Fit per-step affine clean-vector predictors by weighted ridge regression.

    For each step t, training samples are drawn from the forward marginal and
    weighted by alpha_t / (2 kappa^2 eta_t eta_{t-1}) (eta_0 substituted by
    eta_1 at t = 1). Solved in whichever of the primal/dual normal-equation
    forms is smaller.
    """
    if emb is None:
        emb = EmbeddingSpec()
    h0 = np.atleast_2d(np.asarray(h0, dtype=float))
    h_rough = np.atleast_2d(np.asarray(h_rough, dtype=float))
    snr_db = np.asarray(snr_db, dtype=float).reshape(-1)
    n, dim = h0.shape
    if n == 0:
        raise ValueError("empty training set")
    if h_rough.shape != h0.shape or snr_db.size != n:
        raise ValueError("dataset arrays must align")

    kappa = np.array([kappa_for_snr(sched.kappa0, v) for v in snr_db])
    emb_rows = np.stack([emb.fused(1, v) for v in snr_db])  # step part replaced per t
    maps: dict[int, np.ndarray] = {}
    delta = h_rough - h0
    for t in range(1, sched.steps + 1):
        eta_t = sched.eta_at(t)
        eta_prev = sched.eta_at(t - 1) if t > 1 else sched.eta_at(1)
        h_t = (h0 + eta_t * delta
               + (kappa * np.sqrt(eta_t))[:, None] * rng.standard_normal((n, dim)))
        for i, v in enumerate(snr_db):
            emb_rows[i] = emb.fused(t, v)
        x = np.concatenate([h_t, h_rough, emb_rows, np.ones((n, 1))], axis=1)
        w = sched.alpha[t - 1] / (2.0 * kappa ** 2 * eta_t * eta_prev)
        sw = np.sqrt(w)[:, None]
        xw = x * sw
        yw = h0 * sw
        feat = x.shape[1]
        if n < feat:  # dual (kernel) form of the ridge solution
            gram = xw @ xw.T
            gram[np.diag_indices_from(gram)] += ridge
            coef = _solve_spd(gram, yw)
            theta = xw.T @ coef
        else:
            gram = xw.T @ xw
            gram[np.diag_indices_from(gram)] += ridge
            theta = _solve_spd(gram, xw.T @ yw)
        maps[t] = theta
    return PerStepLinearDenoiser(maps, dim, emb)


def _solve_spd(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        warnings.warn("rank-deficient design; falling back to least squares",
                      stacklevel=2)
        return np.linalg.lstsq(gram, rhs, rcond=None)[0]


def step_sequence(total: int, steps: int) -> list[int]:
    """Evenly spaced reverse-step indices from T down to 1, inclusive."""
    if not 1 <= steps <= total:
        raise ValueError("steps must lie in [1, T]")
    ts = np.unique(np.rint(np.linspace(total, 1, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def reverse_sample(h_rough: np.ndarray, snr_db: float, sched: NoiseSchedule,
                   denoiser: Denoiser, steps: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Run the reverse chain from the rough estimate back to a clean prediction.

    Initializes at N(h_rough, kappa^2 eta_T I) and follows an evenly strided
    subsequence of steps ending at t = 1, whose final transition returns the
    denoiser prediction deterministically. Accepts a single vector or a
    batch of rows sharing one SNR.
    """
    kappa = kappa_for_snr(sched.kappa0, snr_db)
    ts = step_sequence(sched.steps, steps)
    h_rough = np.asarray(h_rough, dtype=float)
    h = h_rough + kappa * np.sqrt(sched.eta_at(sched.steps)) * rng.standard_normal(h_rough.shape)
    for i, t in enumerate(ts):
        h0_pred = denoiser.predict(h, h_rough, t, snr_db)
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        h = posterior_step(h, h0_pred, t, sched, kappa, rng, t_prev=t_prev)
    return h


def complex_to_real(h: np.ndarray) -> np.ndarray:
    """Stack real parts then imaginary parts along the last axis."""
    h = np.asarray(h, dtype=complex)
    return np.concatenate([h.real, h.imag], axis=-1)


def real_to_complex(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    half = v.shape[-1] // 2
    return v[..., :half] + 1j * v[..., half:]


def save_denoiser(denoiser: PerStepLinearDenoiser, path) -> None:
    """Serialize the per-step affine maps ("CDMD"), ordered by step."""
    feat_rows = 2 * denoiser.dim + denoiser.emb.fused_dim + 1
    with open(path, "wb") as f:
        f.write(b"CDMD")
        f.write(struct.pack("<III", denoiser.steps, feat_rows - 1, denoiser.dim))
        f.write(struct.pack("<IIdd", denoiser.emb.d_time, denoiser.emb.d_snr,
                            denoiser.emb.eps_norm, denoiser.emb.vmax_db))
        for t in range(1, denoiser.steps + 1):
            f.write(denoiser.maps[t].astype("<f4").tobytes())


def load_denoiser(path) -> PerStepLinearDenoiser:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"CDMD":
            raise ValueError(f"bad denoiser magic {magic!r}")
        steps, feature_dim, out_dim = struct.unpack("<III", f.read(12))
        d_time, d_snr, eps_norm, vmax_db = struct.unpack("<IIdd", f.read(24))
        emb = EmbeddingSpec(d_time, d_snr, float(eps_norm), float(vmax_db))
        maps = {}
        per_map = (feature_dim + 1) * out_dim
        for t in range(1, steps + 1):
            flat = np.frombuffer(f.read(4 * per_map), dtype="<f4")
            maps[t] = flat.reshape(feature_dim + 1, out_dim).astype(float)
    return PerStepLinearDenoiser(maps, out_dim, emb)

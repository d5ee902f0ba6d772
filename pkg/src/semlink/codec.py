"""Closed-form two-level patch codec and image quality metrics.

A fine and a coarse stage each project centered pixel patches onto a
principal-component basis; decoding back-projects both stages and fuses the
reconstructions by averaging. The latent vectors are what the quantizer
codebooks see.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import fftconvolve

from .codebook import LatentBatch

PSNR_CAP_DB = 99.0

# standard multi-scale structural-similarity weights and stabilizers
MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
_C1 = (0.01 * 255) ** 2
_C2 = (0.03 * 255) ** 2


@dataclass
class CodecConfig:
    """Patch/latent geometry plus the fitted projection state.

    The projection bases have orthonormal rows; decode_w/decode_b, when set
    by a refit, replace the transposed-basis back-projection with a learned
    affine map. Bases are None until fit_codec runs.
    """

    fine_patch: int = 8
    latent_dim_fine: int = 12
    latent_dim_coarse: int = 24
    coarse_patch: int | None = None
    mean_fine: np.ndarray | None = None
    basis_fine: np.ndarray | None = None
    mean_coarse: np.ndarray | None = None
    basis_coarse: np.ndarray | None = None
    explained_fine: np.ndarray | None = None
    explained_coarse: np.ndarray | None = None
    decode_w_fine: np.ndarray | None = None
    decode_b_fine: np.ndarray | None = None
    decode_w_coarse: np.ndarray | None = None
    decode_b_coarse: np.ndarray | None = None

    def __post_init__(self):
        if self.coarse_patch is None:
            self.coarse_patch = 2 * self.fine_patch
        if self.fine_patch < 1 or self.coarse_patch < self.fine_patch:
            raise ValueError("bad patch sizes")

    @property
    def fitted(self) -> bool:
        return self.basis_fine is not None


def _as_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError("image must be HxW or HxWxO")
    return img


def extract_patches(img: np.ndarray, patch: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Non-overlapping patches in raster order, flattened to rows."""
    img = _as_image(img)
    h, w, o = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    tiles = (img.reshape(gh, patch, gw, patch, o)
             .transpose(0, 2, 1, 3, 4)
             .reshape(gh * gw, patch * patch * o))
    return tiles.astype(float), (gh, gw)


def assemble_patches(rows: np.ndarray, grid_shape: tuple[int, int],
                     patch: int, channels: int) -> np.ndarray:
    gh, gw = grid_shape
    return (rows.reshape(gh, gw, patch, patch, channels)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * patch, gw * patch, channels))


def fit_codec(images, cfg: CodecConfig) -> CodecConfig:
    """Fit per-stage principal-component bases on centered training patches."""
    out = replace(cfg)
    for stage in ("fine", "coarse"):
        patch = cfg.fine_patch if stage == "fine" else cfg.coarse_patch
        dim = cfg.latent_dim_fine if stage == "fine" else cfg.latent_dim_coarse
        rows = np.concatenate([extract_patches(img, patch)[0] for img in images])
        if rows.shape[0] < dim:
            raise ValueError(
                f"{stage} stage needs at least {dim} patches, got {rows.shape[0]}")
        if dim > rows.shape[1]:
            raise ValueError(f"{stage} latent dim exceeds patch pixel count")
        mean = rows.mean(axis=0)
        _, svals, vt = np.linalg.svd(rows - mean, full_matrices=False)
        basis = vt[:dim]
        explained = (svals[:dim] ** 2) / max(rows.shape[0] - 1, 1)
        if stage == "fine":
            out.mean_fine, out.basis_fine, out.explained_fine = mean, basis, explained
        else:
            out.mean_coarse, out.basis_coarse, out.explained_coarse = mean, basis, explained
    return out


def encode(img: np.ndarray, codec: CodecConfig) -> tuple[LatentBatch, LatentBatch]:
    """Project image patches to per-stage latent rows in raster order."""
    if not codec.fitted:
        raise ValueError("codec is not fitted")
    out = []
    for patch, mean, basis in ((codec.fine_patch, codec.mean_fine, codec.basis_fine),
                               (codec.coarse_patch, codec.mean_coarse, codec.basis_coarse)):
        rows, grid = extract_patches(img, patch)
        out.append(LatentBatch((rows - mean) @ basis.T, grid_shape=grid))
    return out[0], out[1]


def _nearest_upsample(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == shape:
        return img
    ry = np.clip((np.arange(shape[0]) * h) // shape[0], 0, h - 1)
    rx = np.clip((np.arange(shape[1]) * w) // shape[1], 0, w - 1)
    return img[np.ix_(ry, rx)]


def decode(fine: LatentBatch, coarse: LatentBatch, codec: CodecConfig) -> np.ndarray:
    """Back-project both stages, fuse by averaging, clamp and round to uint8."""
    if not codec.fitted:
        raise ValueError("codec is not fitted")
    stages = []
    specs = (
        (fine, codec.fine_patch, codec.mean_fine, codec.basis_fine,
         codec.decode_w_fine, codec.decode_b_fine),
        (coarse, codec.coarse_patch, codec.mean_coarse, codec.basis_coarse,
         codec.decode_w_coarse, codec.decode_b_coarse),
    )
    for batch, patch, mean, basis, w, b in specs:
        if batch.grid_shape is None:
            raise ValueError("latent batch lacks grid metadata")
        gh, gw = batch.grid_shape
        if batch.vectors.shape[0] != gh * gw:
            raise ValueError("latent count does not match the patch grid")
        channels = mean.size // (patch * patch)
        if w is not None:
            rows = batch.vectors @ w + b
        else:
            rows = batch.vectors @ basis + mean
        stages.append(assemble_patches(rows, (gh, gw), patch, channels))
    target = stages[0].shape[:2]
    fused = (stages[0] + _nearest_upsample(stages[1], target)) / 2.0
    out = np.rint(np.clip(fused, 0.0, 255.0)).astype(np.uint8)
    return out[:, :, 0] if out.shape[2] == 1 else out


def refit_decoder(fine_latents: np.ndarray, coarse_latents: np.ndarray,
                  target_images, codec: CodecConfig,
                  ridge: float = 1e-6) -> CodecConfig:
    """Ridge-refit the per-stage back-projections against target pixels.

    Latent inputs are the (possibly channel-corrupted) vectors the decoder
    actually receives; the encoder bases and codebooks are untouched.
    """
    if not codec.fitted:
        raise ValueError("codec is not fitted")
    out = replace(codec)
    for stage, latents in (("fine", fine_latents), ("coarse", coarse_latents)):
        patch = codec.fine_patch if stage == "fine" else codec.coarse_patch
        z = np.concatenate([np.atleast_2d(b.vectors if isinstance(b, LatentBatch) else b)
                            for b in latents])
        x = np.concatenate([extract_patches(img, patch)[0] for img in target_images])
        if z.shape[0] != x.shape[0]:
            raise ValueError(f"{stage} stage: {z.shape[0]} latents vs {x.shape[0]} patches")
        aug = np.concatenate([z, np.ones((z.shape[0], 1))], axis=1)
        gram = aug.T @ aug
        gram[np.diag_indices_from(gram)] += ridge
        try:
            theta = np.linalg.solve(gram, aug.T @ x)
        except np.linalg.LinAlgError:
            import warnings
            warnings.warn("rank-deficient refit; using least squares", stacklevel=2)
            theta = np.linalg.lstsq(gram, aug.T @ x, rcond=None)[0]
        if stage == "fine":
            out.decode_w_fine, out.decode_b_fine = theta[:-1], theta[-1]
        else:
            out.decode_w_coarse, out.decode_b_coarse = theta[:-1], theta[-1]
    return out


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio against a 255 peak, capped at 99 dB."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("shapes differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(255.0 ** 2 / mse), PSNR_CAP_DB))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_terms(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean luminance and contrast/structure terms over an 11x11 window."""
    win = _gaussian_window()
    mu_a = fftconvolve(a, win, mode="valid")
    mu_b = fftconvolve(b, win, mode="valid")
    var_a = fftconvolve(a * a, win, mode="valid") - mu_a ** 2
    var_b = fftconvolve(b * b, win, mode="valid") - mu_b ** 2
    cov = fftconvolve(a * b, win, mode="valid") - mu_a * mu_b
    lum = (2 * mu_a * mu_b + _C1) / (mu_a ** 2 + mu_b ** 2 + _C1)
    cs = (2 * cov + _C2) / (var_a + var_b + _C2)
    return float(lum.mean()), float(cs.mean())


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    x = img[:h, :w]
    return (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2]) / 4.0


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale structural similarity in [0, 1].

    Uses the standard five scale weights when min(H, W) >= 176; smaller
    images reduce the scale count (weights renormalized) so the 11x11 window
    still fits at the coarsest scale. Color inputs average the per-channel
    scores.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("shapes differ")
    if a.ndim == 3:
        return float(np.mean([ms_ssim(a[:, :, c], b[:, :, c])
                              for c in range(a.shape[2])]))
    levels = min(5, int(np.floor(np.log2(min(a.shape) / 11))) + 1)
    if levels < 1:
        raise ValueError("image too small for an 11x11 window")
    weights = MSSSIM_WEIGHTS[:levels] / MSSSIM_WEIGHTS[:levels].sum()
    score = 1.0
    for lvl in range(levels):
        lum, cs = _ssim_terms(a, b)
        term = lum if lvl == levels - 1 else cs
        score *= max(term, 0.0) ** weights[lvl]
        if lvl < levels - 1:
            a, b = _halve(a), _halve(b)
    return float(np.clip(score, 0.0, 1.0))


def bcr(bits_sent: int, image_shape: tuple[int, ...]) -> float:
    """Transmitted bits over the raw 8-bit pixel budget of the image."""
    if len(image_shape) == 2:
        h, w = image_shape
        o = 1
    else:
        h, w, o = image_shape
    if h <= 0 or w <= 0 or o <= 0:
        raise ValueError("image dimensions must be positive")
    return bits_sent / (h * w * o * 8.0)


def write_image(path, img: np.ndarray) -> None:
    """Write a grayscale PGM (P5) or color PPM (P6), binary, maxval 255."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("image must be uint8")
    with open(path, "wb") as f:
        if img.ndim == 2:
            f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
            f.write(img.tobytes())
        elif img.ndim == 3 and img.shape[2] == 3:
            f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
            f.write(img.tobytes())
        else:
            raise ValueError("expected HxW or HxWx3")


def _read_token(f) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ValueError("truncated image header")
        if c.isspace():
            if tok:
                return tok
            continue
        if c == b"#":
            while f.read(1) not in (b"\n", b""):
                pass
            continue
        tok += c


def read_image(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported image magic {magic!r}")
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise ValueError("only maxval 255 is supported")
        channels = 1 if magic == b"P5" else 3
        data = f.read(h * w * channels)
        if len(data) != h * w * channels:
            raise ValueError("truncated pixel data")
    img = np.frombuffer(data, dtype=np.uint8)
    return img.reshape(h, w) if channels == 1 else img.reshape(h, w, 3)


def save_latents(path, vectors: np.ndarray) -> None:
    """Dump latent rows as little-endian float32 behind a (count, dim) header."""
    vectors = np.atleast_2d(np.asarray(vectors))
    with open(path, "wb") as f:
        f.write(struct.pack("<II", vectors.shape[0], vectors.shape[1]))
        f.write(vectors.astype("<f4").tobytes())


def load_latents(path) -> np.ndarray:
    with open(path, "rb") as f:
        count, dim = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * count * dim), dtype="<f4")
    return data.reshape(count, dim).astype(float)

"""Experiment orchestration: staged training, end-to-end link trials, and
deterministic metric sweeps with CSV reporting.

Every random decision derives from (master_seed, stream tags), so a config
plus seed fixes every output byte.
"""

from __future__ import annotations

import configparser
import csv
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import chanest, codec as codec_mod, codebook as cb_mod, diffusion, ofdm
from .chanest import interpolate_grid, ls_estimate, nmse, observe_pilots, rough_csi_vector
from .codebook import Codebook, LatentBatch, QuantizerConfig, assign, cur, ema_update, init_from_batch, quantize_batch
from .codec import CodecConfig, bcr, decode, encode, fit_codec, ms_ssim, psnr, refit_decoder
from .diffusion import (EmbeddingSpec, NoiseSchedule, PerStepLinearDenoiser,
                        build_schedule, complex_to_real, real_to_complex,
                        reverse_sample, train_linear_denoiser)
from .ofdm import (BitStream, OfdmConfig, apply_channel, bits_to_indices,
                   build_grid, data_capacity, indices_to_bits, ofdm_demodulate,
                   ofdm_modulate, pilot_positions, qam4_demodulate,
                   qam4_modulate, sample_epa_channel, zf_equalize)

CSI_MODES = ("perfect", "ls", "refined")
_MODE_CODE = {m: i for i, m in enumerate(CSI_MODES)}
_SURROGATE_CODE = {s: i for i, s in enumerate(cb_mod.SURROGATES)}

CSV_COLUMNS = ("snr_db", "csi_mode", "surrogate", "bcr", "nmse", "ber", "cur",
               "psnr_db", "ms_ssim", "trials")


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 20
    eta1: float = 1e-4
    eta_t: float = 0.999
    rho0: float = 0.5
    kappa0: float = 1.0
    inference_steps: int = 5
    d_time: int = 64
    d_snr: int = 64
    eps_norm: float = 1e-3
    vmax_db: float = 20.0
    ridge: float = 1e-6

    def build(self) -> NoiseSchedule:
        return build_schedule(self.steps, self.eta1, self.eta_t, self.rho0,
                              self.kappa0)

    def embedding(self) -> EmbeddingSpec:
        return EmbeddingSpec(self.d_time, self.d_snr, self.eps_norm, self.vmax_db)


@dataclass(frozen=True)
class CorpusConfig:
    n_images: int = 24
    height: int = 64
    width: int = 64
    channels: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    ofdm: OfdmConfig = OfdmConfig()
    quantizer: QuantizerConfig = QuantizerConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    corpus: CorpusConfig = CorpusConfig()
    fine_patch: int = 8
    latent_dim_fine: int = 12
    latent_dim_coarse: int = 24
    codebook_size: int = 128
    epochs: int = 30
    snr_grid_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    train_snr_grid_db: tuple[float, ...] = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0)
    channel_draws_per_snr: int = 120
    refit_images: int = 12
    trials_per_point: int = 8
    master_seed: int = 1
    csi_mode: str = "refined"

    def __post_init__(self):
        if not self.snr_grid_db:
            raise ValueError("snr grid must be nonempty")
        if self.trials_per_point < 1:
            raise ValueError("need at least one trial per point")
        if self.csi_mode not in CSI_MODES:
            raise ValueError(f"unknown csi mode {self.csi_mode!r}")
        if self.codebook_size < 2:
            raise ValueError("codebook size must be at least 2")

    def codec_template(self) -> CodecConfig:
        return CodecConfig(fine_patch=self.fine_patch,
                           latent_dim_fine=self.latent_dim_fine,
                           latent_dim_coarse=self.latent_dim_coarse)


def table1_config(**overrides) -> ExperimentConfig:
    """The full-size OFDM grid: 1024 subcarriers x 14 symbols, CP 256."""
    return replace(ExperimentConfig(), **overrides)


def desk_config(**overrides) -> ExperimentConfig:
    """Reduced grid (256 subcarriers, CP 64) for fast end-to-end experiments."""
    base = ExperimentConfig(ofdm=OfdmConfig(n_subcarriers=256, cp_len=64))
    return replace(base, **overrides)


def _rng(config: ExperimentConfig, *tags: int) -> np.random.Generator:
    return np.random.default_rng([config.master_seed & 0xFFFFFFFF, *tags])


# --- config file round trip -------------------------------------------------

_SECTIONS = {
    "ofdm": OfdmConfig,
    "quantizer": QuantizerConfig,
    "schedule": ScheduleConfig,
    "corpus": CorpusConfig,
}
_TOP_FIELDS = ("fine_patch", "latent_dim_fine", "latent_dim_coarse",
               "codebook_size", "epochs", "snr_grid_db", "train_snr_grid_db",
               "channel_draws_per_snr", "refit_images", "trials_per_point",
               "master_seed", "csi_mode")


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, kind):
    if kind is float:
        return float(text)
    if kind is int:
        return int(text)
    if kind is str:
        return text
    raise TypeError(f"unsupported field type {kind}")


def save_config(config: ExperimentConfig, path) -> None:
    """Write the experiment as flat key=value text with section headers."""
    parser = configparser.ConfigParser()
    parser["experiment"] = {name: _fmt(getattr(config, name)) for name in _TOP_FIELDS}
    for section, _ in _SECTIONS.items():
        sub = getattr(config, section)
        parser[section] = {f.name: _fmt(getattr(sub, f.name)) for f in fields(sub)}
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f, space_around_delimiters=False)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as f:
        parser.read_file(f)
    kwargs = {}
    exp = parser["experiment"]
    for name in _TOP_FIELDS:
        if name in ("snr_grid_db", "train_snr_grid_db"):
            kwargs[name] = tuple(float(v) for v in exp[name].split(",") if v)
        elif name == "csi_mode":
            kwargs[name] = exp[name]
        else:
            kwargs[name] = int(exp[name])
    for section, cls in _SECTIONS.items():
        sec = parser[section]
        sub_kwargs = {f.name: _parse(sec[f.name], f.type if isinstance(f.type, type)
                                     else {"int": int, "float": float, "str": str}[f.type])
                      for f in fields(cls)}
        kwargs[section] = cls(**sub_kwargs)
    return ExperimentConfig(**kwargs)


# --- synthetic corpus ---------------------------------------------------------

def gen_images(corpus: CorpusConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Smooth random-field images: compressible, deterministic from the rng."""
    out = []
    for _ in range(corpus.n_images):
        low = rng.normal(size=(corpus.height // 8 + 2, corpus.width // 8 + 2,
                               corpus.channels))
        img = np.kron(low, np.ones((8, 8, 1)))[:corpus.height, :corpus.width]
        # soften the block edges
        img = (img + np.roll(img, 4, axis=0) + np.roll(img, 4, axis=1)) / 3.0
        img -= img.min()
        img = 255.0 * img / max(img.max(), 1e-9)
        img = np.rint(img).astype(np.uint8)
        out.append(img[:, :, 0] if corpus.channels == 1 else img)
    return out


# --- stage 1: codec + codebooks ----------------------------------------------

@dataclass
class Stage1Result:
    codec: CodecConfig
    cb_fine: Codebook
    cb_coarse: Codebook
    mse_history: np.ndarray   # (epochs, 2): fine, coarse
    cur_history: np.ndarray   # (epochs, 2)
    final_mse: np.ndarray     # (2,)
    surrogate: str = "andvq"


def _train_codebook(latents: np.ndarray, config: ExperimentConfig,
                    stage_tag: int) -> tuple[Codebook, np.ndarray, np.ndarray, float]:
    qcfg = config.quantizer
    cb = init_from_batch(latents, config.codebook_size,
                         _rng(config, 11, stage_tag),
                         decay=0.9, eps=1e-5)
    rng = np.random.default_rng([config.master_seed & 0xFFFFFFFF, 12, stage_tag,
                                 qcfg.rng_seed & 0xFFFFFFFF])
    mses, curs = [], []
    for _ in range(config.epochs):
        idx_tx, z_q = quantize_batch(latents, cb, qcfg, rng)
        mses.append(float(np.mean(np.sum((latents - cb.entries[idx_tx]) ** 2, axis=1))))
        curs.append(cur(cb, idx_tx))
        # the surrogate output lands in its own nearest cell
        cb = ema_update(cb, assign(z_q, cb), z_q)
    final_idx = assign(latents, cb)
    final = float(np.mean(np.sum((latents - cb.entries[final_idx]) ** 2, axis=1)))
    return cb, np.array(mses), np.array(curs), final


def stage1_train(config: ExperimentConfig,
                 images: list[np.ndarray] | None = None) -> Stage1Result:
    """Fit the patch codec, then train both stage codebooks on clean latents."""
    if images is None:
        images = gen_images(config.corpus, _rng(config, 10))
    fitted = fit_codec(images, config.codec_template())
    fine = np.concatenate([encode(img, fitted)[0].vectors for img in images])
    coarse = np.concatenate([encode(img, fitted)[1].vectors for img in images])
    cb_f, mse_f, cur_f, fin_f = _train_codebook(fine, config, 0)
    cb_c, mse_c, cur_c, fin_c = _train_codebook(coarse, config, 1)
    return Stage1Result(fitted, cb_f, cb_c,
                        np.stack([mse_f, mse_c], axis=1),
                        np.stack([cur_f, cur_c], axis=1),
                        np.array([fin_f, fin_c]),
                        surrogate=config.quantizer.surrogate)


# --- stage 2: channel dataset + denoiser --------------------------------------

@dataclass
class ChannelPairSet:
    h_true: np.ndarray   # (n, N_f) complex
    h_rough: np.ndarray  # (n, N_f) complex
    snr_db: np.ndarray   # (n,)


def _ls_rough_vector(rx_grid, cfg: OfdmConfig) -> np.ndarray:
    obs = observe_pilots(rx_grid, cfg)
    grid = interpolate_grid(ls_estimate(obs), pilot_positions(cfg), cfg)
    return rough_csi_vector(grid)


def gen_channel_pairs(config: ExperimentConfig,
                      snr_grid: tuple[float, ...] | None = None,
                      draws_per_snr: int | None = None) -> ChannelPairSet:
    """Simulate pilot transmissions and collect (true, rough) channel pairs."""
    cfg = config.ofdm
    snr_grid = config.train_snr_grid_db if snr_grid is None else snr_grid
    draws = config.channel_draws_per_snr if draws_per_snr is None else draws_per_snr
    cap = data_capacity(cfg)
    truths, roughs, snrs = [], [], []
    for i, snr in enumerate(snr_grid):
        for d in range(draws):
            rng = _rng(config, 20, i, d)
            ch = sample_epa_channel(cfg, rng)
            bits = rng.integers(0, 2, size=2 * cap)
            syms, _ = qam4_modulate(bits)
            grid = build_grid(syms, cfg)
            rx = ofdm_demodulate(
                apply_channel(ofdm_modulate(grid, cfg), ch, snr, rng), cfg)
            truths.append(ch.freq_response)
            roughs.append(_ls_rough_vector(rx, cfg))
            snrs.append(snr)
    return ChannelPairSet(np.stack(truths), np.stack(roughs), np.array(snrs))


@dataclass
class Stage2Report:
    heldout_loss_per_t: np.ndarray
    nmse_ls: dict[float, float]
    nmse_refined: dict[float, float]


def stage2_train(config: ExperimentConfig,
                 dataset: ChannelPairSet | None = None
                 ) -> tuple[PerStepLinearDenoiser, Stage2Report]:
    """Fit the per-step linear refinement model and score it on held-out draws."""
    if dataset is None:
        dataset = gen_channel_pairs(config)
    n = dataset.h_true.shape[0]
    holdout = np.arange(n) % 8 == 7
    sched = config.schedule.build()
    emb = config.schedule.embedding()
    den = train_linear_denoiser(
        complex_to_real(dataset.h_true[~holdout]),
        complex_to_real(dataset.h_rough[~holdout]),
        dataset.snr_db[~holdout], sched, _rng(config, 21),
        emb=emb, ridge=config.schedule.ridge)

    ho_true = dataset.h_true[holdout]
    ho_rough = dataset.h_rough[holdout]
    ho_snr = dataset.snr_db[holdout]
    loss = np.zeros(sched.steps)
    rng = _rng(config, 22)
    v_true = complex_to_real(ho_true)
    v_rough = complex_to_real(ho_rough)
    kappa = np.array([diffusion.kappa_for_snr(sched.kappa0, v) for v in ho_snr])
    for t in range(1, sched.steps + 1):
        eta = sched.eta_at(t)
        eta_prev = sched.eta_at(t - 1) if t > 1 else eta
        h_t = (v_true + eta * (v_rough - v_true)
               + (kappa * np.sqrt(eta))[:, None] * rng.standard_normal(v_true.shape))
        w = sched.alpha[t - 1] / (2 * kappa ** 2 * eta * eta_prev)
        for snr in np.unique(ho_snr):
            sel = ho_snr == snr
            pred = den.predict(h_t[sel], v_rough[sel], t, float(snr))
            loss[t - 1] += float((w[sel] * np.sum((pred - v_true[sel]) ** 2, axis=1)).sum())
    loss /= max(holdout.sum(), 1)

    nmse_ls, nmse_ref = {}, {}
    for snr in dict.fromkeys(config.train_snr_grid_db):
        sel = ho_snr == snr
        if not sel.any():
            continue
        refined = real_to_complex(reverse_sample(
            complex_to_real(ho_rough[sel]), float(snr), sched, den,
            config.schedule.inference_steps, _rng(config, 23, int(snr * 1000))))
        nmse_ls[snr] = float(np.mean([nmse(ho_rough[sel][i], ho_true[sel][i])
                                      for i in range(sel.sum())]))
        nmse_ref[snr] = float(np.mean([nmse(refined[i], ho_true[sel][i])
                                       for i in range(sel.sum())]))
    return den, Stage2Report(loss, nmse_ls, nmse_ref)


# --- link trials ---------------------------------------------------------------

@dataclass
class TrialResult:
    nmse: float
    ber: float
    bit_errors: int
    bits_total: int
    psnr_db: float
    ms_ssim: float
    cur: float
    bcr: float
    bits_sent: int
    recon: np.ndarray
    rx_fine: np.ndarray
    rx_coarse: np.ndarray
    used_fine: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    used_coarse: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _estimate_csi(rx_grid, ch, mode: str, snr_db: float,
                  config: ExperimentConfig,
                  denoiser: PerStepLinearDenoiser | None,
                  rng: np.random.Generator) -> np.ndarray:
    cfg = config.ofdm
    if mode == "perfect":
        return ch.freq_response
    rough_grid = interpolate_grid(ls_estimate(observe_pilots(rx_grid, cfg)),
                                  pilot_positions(cfg), cfg)
    if mode == "ls":
        return rough_grid.H
    if denoiser is None:
        raise ValueError("refined CSI needs a trained denoiser")
    sched = config.schedule.build()
    snr_emb = float(np.clip(snr_db, 0.0, config.schedule.vmax_db))
    vec = reverse_sample(complex_to_real(rough_csi_vector(rough_grid)), snr_emb,
                         sched, denoiser, config.schedule.inference_steps, rng)
    return real_to_complex(vec)


def simulate_image_link(img: np.ndarray, s1: Stage1Result,
                        config: ExperimentConfig, csi_mode: str, snr_db: float,
                        rng: np.random.Generator,
                        denoiser: PerStepLinearDenoiser | None = None,
                        decode_codec: CodecConfig | None = None) -> TrialResult:
    """Transmit one image through the full digital link and score it."""
    cfg = config.ofdm
    k = config.codebook_size
    fine, coarse = encode(img, s1.codec)
    idx_f = assign(fine.vectors, s1.cb_fine)
    idx_c = assign(coarse.vectors, s1.cb_coarse)
    bs_f = indices_to_bits(idx_f, k)
    bs_c = indices_to_bits(idx_c, k)
    bits = np.concatenate([bs_f.bits, bs_c.bits])
    syms, pad = qam4_modulate(bits)

    cap = data_capacity(cfg)
    rx_syms, nmse_vals = [], []
    for start in range(0, syms.size, cap):
        chunk = syms[start:start + cap]
        ch = sample_epa_channel(cfg, rng)
        # keep the block fully loaded so the sample-power SNR definition does
        # not depend on payload size; filler cells sit after the payload in
        # fill order and are discarded at the receiver
        filler_bits = rng.integers(0, 2, size=2 * (cap - chunk.size))
        filler, _ = qam4_modulate(filler_bits)
        grid = build_grid(np.concatenate([chunk, filler]), cfg)
        rx = ofdm_demodulate(
            apply_channel(ofdm_modulate(grid, cfg), ch, snr_db, rng), cfg)
        rx.n_data = chunk.size
        csi = _estimate_csi(rx, ch, csi_mode, snr_db, config, denoiser, rng)
        truth = np.broadcast_to(ch.freq_response[:, None],
                                (cfg.n_subcarriers, cfg.n_symbols))
        est = csi[:, None] if csi.ndim == 1 else csi
        nmse_vals.append(nmse(np.broadcast_to(est, truth.shape), truth))
        rx_syms.append(zf_equalize(rx, csi))

    got_bits = qam4_demodulate(np.concatenate(rx_syms), n_bits=bits.size)
    errors = int((got_bits != bits).sum())

    w = bs_f.bits_per_index
    rx_f = bits_to_indices(BitStream(got_bits[: idx_f.size * w], w), k)
    rx_c = bits_to_indices(BitStream(got_bits[idx_f.size * w:], w), k)
    fine_rx = LatentBatch(s1.cb_fine.entries[rx_f], rx_f, grid_shape=fine.grid_shape)
    coarse_rx = LatentBatch(s1.cb_coarse.entries[rx_c], rx_c, grid_shape=coarse.grid_shape)
    recon = decode(fine_rx, coarse_rx, decode_codec or s1.codec)

    used = np.unique(rx_f).size + np.unique(rx_c).size
    return TrialResult(
        nmse=float(np.mean(nmse_vals)),
        ber=errors / bits.size,
        bit_errors=errors,
        bits_total=bits.size,
        psnr_db=psnr(img, recon),
        ms_ssim=ms_ssim(img, recon),
        cur=used / (s1.cb_fine.size + s1.cb_coarse.size),
        bcr=bcr(bits.size, img.shape),
        bits_sent=int(bits.size),
        recon=recon,
        rx_fine=fine_rx.vectors,
        rx_coarse=coarse_rx.vectors,
        used_fine=np.unique(rx_f),
        used_coarse=np.unique(rx_c),
    )


# --- stage 3: decoder refit ----------------------------------------------------

def stage3_refit(config: ExperimentConfig, s1: Stage1Result,
                 denoiser: PerStepLinearDenoiser | None,
                 images: list[np.ndarray] | None = None) -> CodecConfig:
    """Refit the decoder on latents received through the simulated link."""
    if images is None:
        images = gen_images(config.corpus, _rng(config, 10))
    images = images[: config.refit_images]
    fine_all, coarse_all, targets = [], [], []
    for i, snr in enumerate(config.train_snr_grid_db):
        for j, img in enumerate(images):
            rng = _rng(config, 30, i, j)
            trial = simulate_image_link(img, s1, config, config.csi_mode, snr,
                                        rng, denoiser=denoiser)
            fine_all.append(trial.rx_fine)
            coarse_all.append(trial.rx_coarse)
            targets.append(img)
    return refit_decoder(fine_all, coarse_all, targets, s1.codec,
                         ridge=config.schedule.ridge)


# --- sweeps ---------------------------------------------------------------------

@dataclass
class SweepRow:
    snr_db: float
    csi_mode: str
    surrogate: str
    bcr: float
    nmse: float
    ber: float
    cur: float
    psnr_db: float
    ms_ssim: float
    trials: int
    bit_errors: int = 0
    bits_total: int = 0
    psnr_values: tuple[float, ...] = ()


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([
                f"{r.snr_db:.10g}", r.csi_mode, r.surrogate, f"{r.bcr:.10g}",
                f"{r.nmse:.10g}", f"{r.ber:.10g}", f"{r.cur:.10g}",
                f"{r.psnr_db:.10g}", f"{r.ms_ssim:.10g}", str(r.trials),
            ])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def run_sweep(config: ExperimentConfig, trained: dict[str, Stage1Result],
              denoiser: PerStepLinearDenoiser | None = None,
              refits: dict[str, CodecConfig] | None = None,
              csi_modes: tuple[str, ...] | None = None,
              images: list[np.ndarray] | None = None) -> SweepResult:
    """Average link metrics per (surrogate, CSI mode, SNR) over seeded trials."""
    if images is None:
        images = gen_images(config.corpus, _rng(config, 10))
    csi_modes = (config.csi_mode,) if csi_modes is None else csi_modes
    rows = []
    for surrogate, s1 in trained.items():
        dec = (refits or {}).get(surrogate)
        for mode in csi_modes:
            for i, snr in enumerate(config.snr_grid_db):
                trials = []
                for t in range(config.trials_per_point):
                    rng = _rng(config, 40, _SURROGATE_CODE[surrogate],
                               _MODE_CODE[mode], i, t)
                    img = images[t % len(images)]
                    trials.append(simulate_image_link(
                        img, s1, config, mode, snr, rng,
                        denoiser=denoiser, decode_codec=dec))
                errors = sum(tr.bit_errors for tr in trials)
                total = sum(tr.bits_total for tr in trials)
                used = (np.unique(np.concatenate([tr.used_fine for tr in trials])).size
                        + np.unique(np.concatenate([tr.used_coarse for tr in trials])).size)
                rows.append(SweepRow(
                    snr_db=snr, csi_mode=mode, surrogate=surrogate,
                    bcr=float(np.mean([tr.bcr for tr in trials])),
                    nmse=float(np.mean([tr.nmse for tr in trials])),
                    ber=errors / total,
                    cur=used / (s1.cb_fine.size + s1.cb_coarse.size),
                    psnr_db=float(np.mean([tr.psnr_db for tr in trials])),
                    ms_ssim=float(np.mean([tr.ms_ssim for tr in trials])),
                    trials=len(trials),
                    bit_errors=errors,
                    bits_total=total,
                    psnr_values=tuple(tr.psnr_db for tr in trials),
                ))
    return SweepResult(rows)


def csi_ordering_run(config: ExperimentConfig, denoiser: PerStepLinearDenoiser,
                     n_draws: int = 500,
                     snr_grid: tuple[float, ...] | None = None) -> dict:
    """Paired comparison of the three CSI modes on shared received signals.

    Each draw transmits one fully loaded block; all estimators see the same
    channel and noise, so per-SNR averages compare like with like. Returns
    {mode: {"nmse": per-snr list, "ber": per-snr list}}.
    """
    cfg = config.ofdm
    cap = data_capacity(cfg)
    sched = config.schedule.build()
    snr_grid = config.snr_grid_db if snr_grid is None else snr_grid
    out = {m: {"nmse": [], "ber": []} for m in CSI_MODES}
    for i, snr in enumerate(snr_grid):
        rx_grids, truths, roughs, tx_bits = [], [], [], []
        for d in range(n_draws):
            rng = _rng(config, 50, i, d)
            ch = sample_epa_channel(cfg, rng)
            bits = rng.integers(0, 2, size=2 * cap).astype(np.uint8)
            syms, _ = qam4_modulate(bits)
            grid = build_grid(syms, cfg)
            rx = ofdm_demodulate(
                apply_channel(ofdm_modulate(grid, cfg), ch, snr, rng), cfg)
            rx.n_data = cap
            rx_grids.append(rx)
            truths.append(ch.freq_response)
            roughs.append(rough_csi_vector(interpolate_grid(
                ls_estimate(observe_pilots(rx, cfg)), pilot_positions(cfg), cfg)))
            tx_bits.append(bits)
        snr_emb = float(np.clip(snr, 0.0, config.schedule.vmax_db))
        refined = real_to_complex(reverse_sample(
            complex_to_real(np.stack(roughs)), snr_emb, sched, denoiser,
            config.schedule.inference_steps, _rng(config, 51, i)))
        for mode in CSI_MODES:
            nmse_sum = 0.0
            errors = total = 0
            for d in range(n_draws):
                if mode == "perfect":
                    est = truths[d]
                elif mode == "ls":
                    est = interpolate_grid(
                        ls_estimate(observe_pilots(rx_grids[d], cfg)),
                        pilot_positions(cfg), cfg).H
                else:
                    est = refined[d]
                truth_grid = np.broadcast_to(truths[d][:, None],
                                             (cfg.n_subcarriers, cfg.n_symbols))
                est_grid = est[:, None] if est.ndim == 1 else est
                nmse_sum += nmse(np.broadcast_to(est_grid, truth_grid.shape), truth_grid)
                got = qam4_demodulate(zf_equalize(rx_grids[d], est), 2 * cap)
                errors += int((got != tx_bits[d]).sum())
                total += 2 * cap
            out[mode]["nmse"].append(nmse_sum / n_draws)
            out[mode]["ber"].append(errors / total)
    return out


# --- artifact persistence --------------------------------------------------------

def save_codec_npz(path, codec: CodecConfig, surrogate: str = "andvq") -> None:
    arrays = {}
    for name in ("mean_fine", "basis_fine", "mean_coarse", "basis_coarse",
                 "explained_fine", "explained_coarse", "decode_w_fine",
                 "decode_b_fine", "decode_w_coarse", "decode_b_coarse"):
        val = getattr(codec, name)
        if val is not None:
            arrays[name] = val
    np.savez(path,
             geometry=np.array([codec.fine_patch, codec.coarse_patch,
                                codec.latent_dim_fine, codec.latent_dim_coarse]),
             surrogate=np.array(surrogate),
             **arrays)


def load_codec_npz(path) -> tuple[CodecConfig, str]:
    data = np.load(path, allow_pickle=False)
    fine_patch, coarse_patch, dim_f, dim_c = data["geometry"].tolist()
    codec = CodecConfig(fine_patch=int(fine_patch), coarse_patch=int(coarse_patch),
                        latent_dim_fine=int(dim_f), latent_dim_coarse=int(dim_c))
    for name in ("mean_fine", "basis_fine", "mean_coarse", "basis_coarse",
                 "explained_fine", "explained_coarse", "decode_w_fine",
                 "decode_b_fine", "decode_w_coarse", "decode_b_coarse"):
        if name in data:
            setattr(codec, name, data[name])
    return codec, str(data["surrogate"])


def save_stage1(out_dir, s1: Stage1Result) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cb_mod.save_codebook(s1.cb_fine, out / "codebook_fine.sqc")
    cb_mod.save_codebook(s1.cb_coarse, out / "codebook_coarse.sqc")
    save_codec_npz(out / "codec.npz", s1.codec, s1.surrogate)
    with open(out / "training_history.csv", "w", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "mse_fine", "mse_coarse", "cur_fine", "cur_coarse"])
        for e in range(s1.mse_history.shape[0]):
            writer.writerow([e, f"{s1.mse_history[e, 0]:.10g}",
                             f"{s1.mse_history[e, 1]:.10g}",
                             f"{s1.cur_history[e, 0]:.10g}",
                             f"{s1.cur_history[e, 1]:.10g}"])


def load_stage1(out_dir) -> Stage1Result:
    out = Path(out_dir)
    codec, surrogate = load_codec_npz(out / "codec.npz")
    cb_f = cb_mod.load_codebook(out / "codebook_fine.sqc")
    cb_c = cb_mod.load_codebook(out / "codebook_coarse.sqc")
    empty = np.zeros((0, 2))
    return Stage1Result(codec, cb_f, cb_c, empty, empty, np.zeros(2), surrogate)

"""Command-line front end for the staged training pipeline and sweeps."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from .codebook import QuantizerConfig
from .diffusion import load_denoiser, save_denoiser
from .ofdm import load_csi_pairs, save_csi_pairs, sample_epa_channel, ChannelRealization
from .runner import (ChannelPairSet, ExperimentConfig, desk_config,
                     gen_channel_pairs, gen_images, load_config, load_stage1,
                     run_sweep, save_codec_npz, save_config, save_stage1,
                     simulate_image_link, stage1_train, stage2_train,
                     stage3_refit, _rng)


def _load_experiment(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        config = replace(config, master_seed=args.seed)
    if getattr(args, "csi", None):
        config = replace(config, csi_mode=args.csi)
    if getattr(args, "surrogate", None):
        config = replace(config, quantizer=replace(config.quantizer,
                                                   surrogate=args.surrogate))
    if getattr(args, "snr", None):
        grid = tuple(float(v) for v in args.snr.split(","))
        config = replace(config, snr_grid_db=grid)
    return config


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_images(config: ExperimentConfig, images_dir: str | None):
    if images_dir is None:
        return gen_images(config.corpus, _rng(config, 10))
    paths = sorted(Path(images_dir).glob("*.p[gp]m"))
    if not paths:
        raise SystemExit(f"no PGM/PPM images found in {images_dir}")
    return [codec_mod.read_image(p) for p in paths]


def cmd_train_codebook(args) -> None:
    config = _load_experiment(args)
    out = _out_dir(args)
    images = _load_images(config, args.images)
    s1 = stage1_train(config, images)
    save_stage1(out, s1)
    save_config(config, out / "config.ini")
    print(f"trained {config.quantizer.surrogate} codebooks "
          f"(K={config.codebook_size}) over {config.epochs} epochs")
    print(f"final quantization mse: fine {s1.final_mse[0]:.6g}, "
          f"coarse {s1.final_mse[1]:.6g}")
    print(f"final utilization: fine {s1.cur_history[-1, 0]:.3f}, "
          f"coarse {s1.cur_history[-1, 1]:.3f}")
    print(f"artifacts written to {out}")


def cmd_gen_channel_data(args) -> None:
    config = _load_experiment(args)
    out = _out_dir(args)
    snr_grid = (tuple(float(v) for v in args.snr.split(","))
                if args.snr else config.train_snr_grid_db)
    pairs = gen_channel_pairs(config, snr_grid=snr_grid)
    truths = [ChannelRealization(np.zeros(0, dtype=complex), np.zeros(0, dtype=int),
                                 h, np.zeros(0)) for h in pairs.h_true]
    save_csi_pairs(out / "channel_pairs.chd", truths, list(pairs.h_rough),
                   config.ofdm.n_subcarriers)
    np.save(out / "channel_pairs_snr.npy", pairs.snr_db)
    print(f"wrote {pairs.h_true.shape[0]} (true, rough) channel pairs "
          f"at SNRs {sorted(set(pairs.snr_db.tolist()))} to {out}")


def cmd_train_denoiser(args) -> None:
    config = _load_experiment(args)
    out = _out_dir(args)
    pair_path = out / "channel_pairs.chd"
    if pair_path.exists():
        _, h_true, h_rough = load_csi_pairs(pair_path)
        snr = np.load(out / "channel_pairs_snr.npy")
        dataset = ChannelPairSet(h_true, h_rough, snr)
    else:
        dataset = None
    den, report = stage2_train(config, dataset)
    save_denoiser(den, out / "denoiser.cdmd")
    with open(out / "denoiser_report.csv", "w", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["snr_db", "nmse_ls", "nmse_refined"])
        for snr_db in sorted(report.nmse_ls):
            writer.writerow([f"{snr_db:.10g}", f"{report.nmse_ls[snr_db]:.10g}",
                             f"{report.nmse_refined[snr_db]:.10g}"])
    print("held-out NMSE (rough -> refined):")
    for snr_db in sorted(report.nmse_ls):
        print(f"  {snr_db:5.1f} dB: {report.nmse_ls[snr_db]:.4e} -> "
              f"{report.nmse_refined[snr_db]:.4e}")
    print(f"denoiser written to {out / 'denoiser.cdmd'}")


def cmd_refit_decoder(args) -> None:
    config = _load_experiment(args)
    out = _out_dir(args)
    s1 = load_stage1(out)
    den_path = out / "denoiser.cdmd"
    denoiser = load_denoiser(den_path) if den_path.exists() else None
    if config.csi_mode == "refined" and denoiser is None:
        raise SystemExit("refined CSI requested but no denoiser.cdmd in --out; "
                         "run train-denoiser first")
    refit = stage3_refit(config, s1, denoiser,
                         images=_load_images(config, args.images))
    save_codec_npz(out / "codec.npz", refit, s1.surrogate)
    print(f"decoder refit under {config.csi_mode} CSI at SNRs "
          f"{list(config.train_snr_grid_db)}; codec.npz updated")


def cmd_sweep(args) -> None:
    config = _load_experiment(args)
    out = _out_dir(args)
    s1 = load_stage1(out)
    if args.surrogate and args.surrogate != s1.surrogate:
        print(f"warning: artifacts were trained with {s1.surrogate!r}, "
              f"sweeping them as {args.surrogate!r}", file=sys.stderr)
        s1.surrogate = args.surrogate
    den_path = out / "denoiser.cdmd"
    denoiser = load_denoiser(den_path) if den_path.exists() else None
    if config.csi_mode == "refined" and denoiser is None:
        raise SystemExit("refined CSI requested but no denoiser.cdmd in --out")
    result = run_sweep(config, {s1.surrogate: s1}, denoiser,
                       csi_modes=(config.csi_mode,),
                       images=_load_images(config, args.images))
    text = result.to_csv(out / "sweep.csv")
    print(text, end="")
    print(f"sweep written to {out / 'sweep.csv'}", file=sys.stderr)


def cmd_eval_image(args) -> None:
    config = _load_experiment(args)
    out = _out_dir(args)
    s1 = load_stage1(out)
    den_path = out / "denoiser.cdmd"
    denoiser = load_denoiser(den_path) if den_path.exists() else None
    if config.csi_mode == "refined" and denoiser is None:
        raise SystemExit("refined CSI requested but no denoiser.cdmd in --out")
    if args.image:
        img = codec_mod.read_image(args.image)
    else:
        img = gen_images(config.corpus, _rng(config, 10))[0]
    snr = config.snr_grid_db[len(config.snr_grid_db) // 2]
    trial = simulate_image_link(img, s1, config, config.csi_mode, snr,
                                _rng(config, 60), denoiser=denoiser)
    suffix = ".ppm" if trial.recon.ndim == 3 else ".pgm"
    recon_path = out / f"reconstructed{suffix}"
    codec_mod.write_image(recon_path, trial.recon)
    print(f"csi={config.csi_mode} snr={snr:g} dB")
    print(f"psnr={trial.psnr_db:.2f} dB ms_ssim={trial.ms_ssim:.4f} "
          f"ber={trial.ber:.4e} nmse={trial.nmse:.4e} bcr={trial.bcr:.5f}")
    print(f"reconstruction written to {recon_path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semlink",
        description="Vector-quantized digital semantic link simulator over OFDM")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, images=False, image_pos=False):
        p.add_argument("--config", help="experiment config file (key=value sections)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", default="artifacts", help="artifact directory")
        p.add_argument("--csi", choices=("perfect", "ls", "refined"),
                       help="channel-knowledge mode override")
        p.add_argument("--surrogate", choices=("andvq", "nsvq", "ste"),
                       help="quantization surrogate override")
        p.add_argument("--snr", help="comma-separated SNR grid override (dB)")
        if images:
            p.add_argument("--images", help="directory of PGM/PPM training images")
        if image_pos:
            p.add_argument("image", nargs="?", help="PGM/PPM image to transmit")

    common(sub.add_parser("train-codebook",
                          help="fit the patch codec and train both codebooks"),
           images=True)
    common(sub.add_parser("gen-channel-data",
                          help="simulate pilots and store (true, rough) pairs"))
    common(sub.add_parser("train-denoiser",
                          help="fit the per-step refinement model"))
    common(sub.add_parser("refit-decoder",
                          help="refit the decoder over the simulated link"),
           images=True)
    common(sub.add_parser("sweep", help="run the metric sweep and write CSV"),
           images=True)
    common(sub.add_parser("eval-image",
                          help="transmit one image and report quality"),
           image_pos=True)
    return parser


_COMMANDS = {
    "train-codebook": cmd_train_codebook,
    "gen-channel-data": cmd_gen_channel_data,
    "train-denoiser": cmd_train_denoiser,
    "refit-decoder": cmd_refit_decoder,
    "sweep": cmd_sweep,
    "eval-image": cmd_eval_image,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _COMMANDS[args.command](args)
    return 0


if __name__ == "__main__":
    sys.exit(main())

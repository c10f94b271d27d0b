"""Command line entry point: ``sparsedti <command> [--flags]``.

Exit codes: 0 success, 2 usage or validation failure, 3 runtime or
numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import dti, phantom, svd
from .errors import ConfigurationError, FormatError, TrainingDiverged, ValidationError
from .model import load_model, save_model
from .train import (ADAPTIVE, TrainConfig, baseline_qdl, compare_regularizer, evaluate, train,
                    write_history)
from .volume import (METRIC_CHANNELS, TensorField, Volume3D, load_gradient_table, load_volume,
                     save_gradient_table, save_volume, six_direction_table)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

log = logging.getLogger("sparsedti")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# PGM output


def write_pgm(path, image, lo=None, hi=None):
    """8-bit binary PGM of a 2D array (rows = second axis), linearly mapped
    from ``[lo, hi]`` to 0..255. Writes ``<path>.txt`` with the range."""
    img = np.asarray(image, dtype=np.float64).T
    lo = float(img.min()) if lo is None else float(lo)
    hi = float(img.max()) if hi is None else float(hi)
    if hi > lo:
        scaled = np.clip(np.rint((img - lo) / (hi - lo) * 255.0), 0, 255)
    else:
        scaled = np.zeros_like(img)
    rows, cols = scaled.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(scaled.astype(np.uint8).tobytes())
    with open(f"{path}.txt", "w") as f:
        f.write(f"min {lo!r}\nmax {hi!r}\n")


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


# ---------------------------------------------------------------------------
# commands


def _gtab(args):
    return load_gradient_table(args.bvals, args.bvecs)


def cmd_gradients(args):
    save_gradient_table(six_direction_table(args.bvalue), args.bvals, args.bvecs)


def cmd_phantom(args):
    cfg = phantom.load_phantom_config(args.config) if args.config else phantom.PhantomConfig()
    if args.seed is not None:
        cfg = phantom.PhantomConfig(**{**cfg.__dict__, "seed": args.seed})
    field = phantom.generate_phantom(cfg)
    save_volume(field.to_volume(cfg.voxel_size), args.out, extra={"phantom_seed": cfg.seed})
    log.info("phantom %s written to %s", cfg.dims, args.out)


def cmd_simulate(args):
    gtab = _gtab(args)
    if not gtab.is_six_direction_protocol():
        raise ValidationError(
            f"simulation expects the 7-channel protocol (one b=0 + six b=1000), got {len(gtab)} entries")
    vol = load_volume(args.phantom)
    field = TensorField.from_volume(vol)
    noise = phantom.NoiseConfig(args.sigma, args.seed)
    dwi = phantom.simulate_dwi(field, gtab, noise, vol.voxel_size)
    extra = {"bvals": gtab.bvals.tolist(), "bvecs": gtab.bvecs.tolist(),
             "sigma": args.sigma, "noise_seed": args.seed}
    save_volume(dwi, args.out, extra=extra)


def cmd_fit(args):
    gtab = _gtab(args)
    dwi = load_volume(args.dwi)
    if dwi.dims[3] != len(gtab):
        raise ValidationError(f"DWI has {dwi.dims[3]} channels but gradient table has {len(gtab)} entries")
    field = dti.fit_tensor_ols(dwi, gtab)
    invalid = int(np.sum(~field.valid))
    save_volume(field.to_volume(dwi.voxel_size), args.out, extra={"invalid_voxels": invalid})
    if invalid:
        log.info("%d voxels flagged invalid (non-positive signal)", invalid)


def cmd_metrics(args):
    vol = load_volume(args.tensor)
    field = TensorField.from_volume(vol)
    save_volume(dti.compute_metrics(field, vol.voxel_size), args.out)


def _parse_ks(text):
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--ks must be comma-separated integers, got {text!r}") from None
    if not ks:
        raise UsageError("--ks is empty")
    return ks


def _fa_slice(vol, z):
    if not 0 <= z < vol.dims[2]:
        raise ValidationError(f"slice {z} out of range 0..{vol.dims[2] - 1}")
    data = vol.channel("FA") if "FA" in vol.channel_names else vol.data[..., 0]
    return data[:, :, z]


def cmd_svd_sweep(args):
    clean = _fa_slice(load_volume(args.clean), args.slice)
    noisy = _fa_slice(load_volume(args.noisy), args.slice)
    ks = _parse_ks(args.ks)
    rows = svd.rank_sweep(clean, noisy, ks)
    svd.write_sweep_csv(rows, args.out)
    if args.pgm_dir:
        os.makedirs(args.pgm_dir, exist_ok=True)
        f = svd.svd(noisy)
        write_pgm(os.path.join(args.pgm_dir, "clean.pgm"), clean)
        write_pgm(os.path.join(args.pgm_dir, "noisy.pgm"), noisy)
        for k in ks:
            recon = svd.truncate(f, k)
            write_pgm(os.path.join(args.pgm_dir, f"recon_k{k}.pgm"), recon)
            write_pgm(os.path.join(args.pgm_dir, f"error_k{k}.pgm"), np.abs(clean - recon))


def _split(text):
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--split must be three comma-separated fractions, got {text!r}") from None
    return parts


def cmd_dataset(args):
    field = TensorField.from_volume(load_volume(args.phantom))
    ds = phantom.make_dataset(field, six_direction_table(), phantom.NoiseConfig(args.sigma, args.seed),
                              _split(args.split))
    phantom.save_dataset(ds, args.out)


def _lambda(text):
    if text == ADAPTIVE:
        return ADAPTIVE
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"--lambda must be a number or 'adaptive', got {text!r}") from None


def cmd_train(args):
    ds = phantom.load_dataset(args.dataset)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, patch=args.patch,
                      stride=args.stride, lam=_lambda(args.lam), seed=args.seed,
                      max_train_patches=args.max_patches)
    try:
        result = baseline_qdl(ds, cfg) if args.baseline == "qdl" else train(ds, cfg)
    except TrainingDiverged as exc:
        with open(f"{args.out}.diverged.json", "w") as f:
            json.dump(exc.state, f, indent=2, sort_keys=True)
        raise
    save_model(result.model, args.out)
    result.write_history(f"{args.out}.history.csv")


def _load_model(stem):
    if not os.path.exists(f"{stem}.model.json"):
        raise ValidationError(f"no checkpoint at {stem}.model.json")
    return load_model(stem)


def cmd_eval(args):
    ds = phantom.load_dataset(args.dataset)
    model = _load_model(args.model)
    evaluate(model, ds, args.split).write_csv(args.out)


def cmd_residuals(args):
    ds = phantom.load_dataset(args.dataset)
    model = _load_model(args.model)
    res = evaluate(model, ds, args.split)
    resid = np.abs(res.reference - res.prediction)
    mid = resid.shape[2] // 2
    for c, name in enumerate(METRIC_CHANNELS):
        save_volume(Volume3D(resid[..., c], channel_names=(f"abs_residual_{name}",)),
                    f"{args.out}.residual_{name}", extra={"split": args.split, "slices": list(res.slices)})
        write_pgm(f"{args.out}.residual_{name}.pgm", resid[:, :, mid, c])


def cmd_compare(args):
    seeds = [int(s) for s in args.seeds.split(",")]
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, patch=args.patch)
    cmp = compare_regularizer(seeds, cfg, sigma=args.sigma)
    cmp.write_csv(args.out)
    if args.history_dir:
        os.makedirs(args.history_dir, exist_ok=True)
        for (seed, mode), hist in sorted(cmp.histories.items()):
            write_history(hist, os.path.join(args.history_dir, f"seed{seed}_{mode}.history.csv"))
    print(f"mean val PSNR: lambda0 {cmp.mean_fixed:.4f} dB, adaptive {cmp.mean_adaptive:.4f} dB, "
          f"improvement {cmp.mean_improvement:+.4f} dB")


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="sparsedti", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gradients", help="write the default 7-entry bvals/bvecs pair")
    s.add_argument("--bvals", required=True)
    s.add_argument("--bvecs", required=True)
    s.add_argument("--bvalue", type=float, default=1000.0)
    s.set_defaults(func=cmd_gradients)

    s = sub.add_parser("phantom", help="generate a synthetic tensor phantom")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("simulate", help="simulate 7-channel DWI with Rician noise")
    s.add_argument("--phantom", required=True)
    s.add_argument("--bvals", required=True)
    s.add_argument("--bvecs", required=True)
    s.add_argument("--sigma", type=float, default=0.04)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="OLS tensor fit of a DWI volume")
    s.add_argument("--dwi", required=True)
    s.add_argument("--bvals", required=True)
    s.add_argument("--bvecs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("metrics", help="FA/MD/AD maps of a tensor volume")
    s.add_argument("--tensor", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("svd-sweep", help="PSNR/SSIM of rank-k reconstructions of a noisy FA slice")
    s.add_argument("--clean", required=True)
    s.add_argument("--noisy", required=True)
    s.add_argument("--slice", type=int, required=True)
    s.add_argument("--ks", default="5,20,40,140")
    s.add_argument("--out", required=True)
    s.add_argument("--pgm-dir")
    s.set_defaults(func=cmd_svd_sweep)

    s = sub.add_parser("dataset", help="assemble a noisy training set from a phantom")
    s.add_argument("--phantom", required=True)
    s.add_argument("--sigma", type=float, default=0.04)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="0.7,0.15,0.15")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", help="train the patch estimator")
    s.add_argument("--dataset", required=True)
    s.add_argument("--lambda", dest="lam", default=ADAPTIVE)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--patch", type=int, default=32)
    s.add_argument("--stride", type=int)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--max-patches", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--baseline", choices=["qdl"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "per-channel MSE/PSNR/SSIM CSV"),
                              ("residuals", cmd_residuals, "|GT - Pred| volumes and mid-slice PGMs")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--dataset", required=True)
        s.add_argument("--model", required=True)
        s.add_argument("--split", default="test", choices=phantom.SPLITS)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("compare", help="lambda 0 vs adaptive lambda over several seeds")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--sigma", type=float, default=0.04)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--patch", type=int, default=32)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--history-dir")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ValidationError, FormatError, ConfigurationError, FileNotFoundError) as exc:
        print(f"sparsedti {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"sparsedti {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

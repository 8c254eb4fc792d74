"""Command-line entry point.

Subcommands cover the full workflow: phantom data generation, fold
construction, training, prediction, self-training, ensembling, evaluation,
gradient verification, and a small benchmark.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed files), 3 numeric failure (NaN or diverging values).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import unet
from .data import (
    PhantomSpec,
    generate_phantom,
    read_manifest,
    size_balanced_folds,
    write_manifest,
    LabelMask,
)
from .metrics import MetricsReport
from .mscsa import MSCSAConfig
from .nifti import NiftiError, nifti_read, nifti_write
from .ops3d import ConfigError
from .tensor import DimensionError, NumericError, Tensor
from .training import LossConfig, TrainConfig, ensemble_predict, self_train, train
from .unet import CheckpointError, ModelConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_LOSS_NAMES = {"dice_ce": "dice_ce", "dtk10": "dice_topk"}
_BACKBONES = {"plain": "plain", "res": "residual"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _ints(text):
    parts = [int(p) for p in text.split(",")]
    return tuple(parts * 3 if len(parts) == 1 else parts)


def _read_config(path):
    """Flat key=value file; '#' starts a comment line."""
    kv = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"bad config line: {line!r}")
            kv[key.strip()] = value.strip()
    return kv


def _build_configs(args):
    """Merge config-file values and CLI flags into run and model configs.

    CLI flags win over the file; the file wins over defaults.
    """
    kv = _read_config(args.config) if getattr(args, "config", None) else {}

    def pick(flag, key, default, cast):
        if flag is not None:
            return flag
        if key in kv:
            return cast(kv[key])
        return default

    loss_name = pick(args.loss, "loss", "dice_ce", str)
    loss_cfg = LossConfig(
        kind=_LOSS_NAMES.get(loss_name, loss_name),
        topk_fraction=float(kv.get("topk_fraction", 0.10)),
    )
    run_cfg = TrainConfig(
        epochs=pick(args.epochs, "epochs", 10, int),
        batch_size=int(kv.get("batch_size", 2)),
        lr0=float(kv.get("lr0", 0.01)),
        momentum=float(kv.get("momentum", 0.99)),
        seed=pick(args.seed, "seed", 0, int),
        patch=pick(args.patch, "patch", (32, 32, 32), _ints),
        k_folds=int(kv.get("k_folds", 5)),
        foreground_bias=float(kv.get("foreground_bias", 1.0 / 3.0)),
        val_interval=pick(getattr(args, "val_interval", None), "val_interval", 1, int),
        loss=loss_cfg,
    )

    channels = _ints(kv.get("channels", "16,32,64,128"))
    mscsa_flag = pick(args.mscsa, "mscsa", "off", str)
    if mscsa_flag not in ("on", "off"):
        raise ConfigError("--mscsa must be 'on' or 'off'")
    mcfg = None
    if mscsa_flag == "on":
        default_target = max(len(channels) - 3, 0)
        mcfg = MSCSAConfig(
            target_stage=int(kv.get("mscsa.target_stage", default_target)),
            heads=int(kv.get("mscsa.heads", 4)),
            c_k=None if kv.get("mscsa.c_k", "auto") == "auto" else int(kv["mscsa.c_k"]),
            c_v=None if kv.get("mscsa.c_v", "auto") == "auto" else int(kv["mscsa.c_v"]),
            dwconv_kernel=int(kv.get("mscsa.dwconv_kernel", 3)),
        )
    backbone = pick(args.backbone, "backbone", "plain", str)
    model_cfg = ModelConfig(
        channels=channels,
        backbone=_BACKBONES.get(backbone, backbone),
        mscsa=mcfg,
    )
    return run_cfg, model_cfg


def _load_model(model_dir):
    cfg_path = os.path.join(model_dir, "model.cfg")
    ckpt_path = os.path.join(model_dir, "best.ckpt")
    with open(cfg_path) as f:
        cfg = ModelConfig.from_text(f.read())
    params = unet.load_checkpoint(ckpt_path)
    return params, cfg


def _load_models(spec):
    return [_load_model(d) for d in spec.split(",") if d]


# -- subcommand bodies ------------------------------------------------------


def cmd_phantom(args):
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i in range(args.count):
        spec = PhantomSpec(
            extents=args.extents,
            lesion_count=tuple(int(v) for v in args.lesions.split(",")),
            radius=tuple(float(v) for v in args.radius.split(",")),
            contrast=args.contrast,
            noise_scale=args.noise,
            seed=args.seed + i,
        )
        vol, mask = generate_phantom(spec)
        cid = f"case_{i:03d}"
        vp = os.path.join(args.out, f"{cid}.nii")
        mp = os.path.join(args.out, f"{cid}_mask.nii")
        nifti_write(vol, vp)
        nifti_write(mask, mp)
        rows.append(
            {
                "id": cid,
                "volume_path": vp,
                "mask_path": mp,
                "lesion_volume": mask.lesion_volume,
            }
        )
    manifest = os.path.join(args.out, "manifest.csv")
    write_manifest(manifest, rows)
    print(f"wrote {len(rows)} cases and {manifest}")
    return EXIT_OK


def cmd_folds(args):
    rows = read_manifest(args.manifest)
    folds = size_balanced_folds([(r["id"], r["lesion_volume"]) for r in rows], args.k)
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "fold"])
        for fi, ids in enumerate(folds):
            for cid in ids:
                writer.writerow([cid, fi])
    print(f"wrote {args.out} ({args.k} folds over {len(rows)} cases)")
    return EXIT_OK


def cmd_train(args):
    run_cfg, model_cfg = _build_configs(args)
    best, _log = train(run_cfg, model_cfg, args.manifest, args.fold, args.out)
    print(f"best val dice {best:.4f} (fold {args.fold}, out {args.out})")
    return EXIT_OK


def cmd_predict(args):
    params, cfg = _load_model(args.model)
    os.makedirs(args.out, exist_ok=True)
    for row in read_manifest(args.manifest):
        vol = nifti_read(row["volume_path"])
        probs = unet.predict(
            vol.voxels.astype(np.float32), params, cfg, args.patch, args.overlap
        )
        pred = LabelMask(probs.argmax(axis=0).astype(np.uint8))
        nifti_write(pred, os.path.join(args.out, f"{row['id']}_pred.nii"))
    print(f"predictions written to {args.out}")
    return EXIT_OK


def cmd_ensemble(args):
    models = _load_models(args.models)
    os.makedirs(args.out, exist_ok=True)
    for row in read_manifest(args.manifest):
        vol = nifti_read(row["volume_path"])
        probs = ensemble_predict(
            models, vol.voxels.astype(np.float32), args.patch, args.overlap
        )
        pred = LabelMask((probs[1] >= 0.5).astype(np.uint8))
        nifti_write(pred, os.path.join(args.out, f"{row['id']}_pred.nii"))
    print(f"ensemble predictions ({len(models)} models) written to {args.out}")
    return EXIT_OK


def cmd_selftrain(args):
    run_cfg, model_cfg = _build_configs(args)
    models = _load_models(args.models)
    best, _log = self_train(
        models,
        args.labeled,
        args.unlabeled,
        run_cfg,
        model_cfg,
        args.fold,
        args.out,
        threshold=args.threshold,
    )
    print(f"best val dice {best:.4f} after self-training (out {args.out})")
    return EXIT_OK


def cmd_eval(args):
    report = MetricsReport()
    for row in read_manifest(args.manifest):
        pred_path = os.path.join(args.pred_dir, f"{row['id']}_pred.nii")
        pred = nifti_read(pred_path, as_mask=True)
        gt = nifti_read(row["mask_path"], as_mask=True)
        report.add_case(row["id"], row["lesion_volume"], pred.voxels, gt.voxels)
    report.write_csvs(args.out)
    for name, agg in report.summary().items():
        print(
            f"{name}: n={agg['n']} mean_dice={agg['mean_dice']:.4f} "
            f"pooled_f1={agg['pooled_f1']:.4f}"
        )
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradchecks import run_suite

    try:
        worst = run_suite(rtol=args.rtol, verbose=True)
    except AssertionError as exc:
        print(f"gradient verification failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"max relative error {worst:.3e} (tolerance {args.rtol:.0e})")
    return EXIT_OK


def cmd_bench(args):
    from .training import combined_loss

    patch = args.patch
    for name, mcfg in (
        ("plain", ModelConfig(channels=args.channels)),
        (
            "mscsa",
            ModelConfig(
                channels=args.channels,
                mscsa=MSCSAConfig(target_stage=max(len(args.channels) - 2, 0)),
            ),
        ),
    ):
        params = unet.init_params(mcfg, 0)
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1) + patch).astype(np.float32))
        target = np.zeros((1,) + patch)
        t0 = time.time()
        logits = unet.forward(x, params, mcfg, mode="train")
        fwd = time.time() - t0
        t0 = time.time()
        combined_loss(logits, target, LossConfig()).backward()
        bwd = time.time() - t0
        print(f"{name:<6} patch {patch}  forward {fwd:.2f}s  backward {bwd:.2f}s")
    return EXIT_OK


# -- argument wiring --------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--config", help="key=value run/model config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fold", type=int, default=-1, help="-1 trains on all cases")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patch", type=_ints, default=None)
    p.add_argument("--val-interval", dest="val_interval", type=int, default=None)
    p.add_argument("--mscsa", choices=("on", "off"), default=None)
    p.add_argument("--backbone", choices=("plain", "res"), default=None)
    p.add_argument("--loss", choices=("dice_ce", "dtk10"), default=None)


def build_parser():
    parser = _Parser(prog="mscsa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic lesion volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extents", type=_ints, default=(32, 32, 32))
    p.add_argument("--lesions", default="1,3", help="min,max lesion count")
    p.add_argument("--radius", default="2,5", help="min,max ellipsoid radius")
    p.add_argument("--contrast", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("folds", help="write size-balanced cross-validation folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_folds)

    p = sub.add_parser("train", help="train one model on one fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="sliding-window segmentation")
    p.add_argument("--model", required=True, help="training output directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=_ints, default=(32, 32, 32))
    p.add_argument("--overlap", type=float, default=0.5)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("ensemble", help="average softmax maps of several models")
    p.add_argument("--models", required=True, help="comma-separated model dirs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=_ints, default=(32, 32, 32))
    p.add_argument("--overlap", type=float, default=0.5)
    p.set_defaults(fn=cmd_ensemble)

    p = sub.add_parser("selftrain", help="pseudo-label unlabeled cases, retrain")
    p.add_argument("--models", required=True, help="comma-separated model dirs")
    p.add_argument("--labeled", required=True, help="labeled manifest")
    p.add_argument("--unlabeled", required=True, help="unlabeled manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_selftrain)

    p = sub.add_parser("eval", help="Dice and lesion-wise F1 over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", dest="pred_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--rtol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="time one forward/backward pass")
    p.add_argument("--patch", type=_ints, default=(32, 32, 32))
    p.add_argument("--channels", type=_ints, default=(16, 32, 64, 128))
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NiftiError, CheckpointError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

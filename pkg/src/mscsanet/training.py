"""Losses, Nesterov SGD with a polynomial schedule, and training schemes.

Schemes: default (Dice+CE), dtk10 (Dice + top-fraction CE), resunet
(residual backbone), selftrain (one round of pseudo-labeling), ensemble
(softmax averaging at prediction time).
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import unet
from .data import (
    LabelMask,
    read_manifest,
    sample_patch,
    augment,
    size_balanced_folds,
    write_manifest,
)
from .metrics import dice_score
from .nifti import nifti_read, nifti_write
from .tensor import DimensionError, Tensor, split


@dataclass
class LossConfig:
    kind: str = "dice_ce"  # dice_ce | dice_topk
    topk_fraction: float = 0.10
    dice_eps: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ValueError("topk_fraction must be in (0, 1]")
        if self.kind not in ("dice_ce", "dice_topk"):
            raise ValueError(f"unknown loss kind {self.kind!r}")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2
    lr0: float = 0.01
    momentum: float = 0.99
    poly_exponent: float = 0.9
    seed: int = 0
    patch: tuple = (32, 32, 32)
    k_folds: int = 5
    foreground_bias: float = 1.0 / 3.0
    val_interval: int = 1
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("initial learning rate must be positive")

    def lr_at(self, epoch):
        return self.lr0 * (1.0 - epoch / self.epochs) ** self.poly_exponent


# -- losses ----------------------------------------------------------------


def dice_loss(logits, target, eps=1e-5):
    """Soft Dice on the foreground-channel softmax, batch-aggregated jointly."""
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise DimensionError(
            f"logits {logits.shape} incompatible with target {target.shape}"
        )
    probs = logits.softmax(axis=1)
    fg = split(probs, [1] * logits.shape[1], axis=1)[1]
    t = Tensor(target.astype(logits.dtype.name)[:, None])
    inter = (fg * t).sum()
    return 1.0 - (inter * 2.0 + eps) / (fg.sum() + t.sum() + eps)


def _per_voxel_ce(logits, target):
    lsm = logits.log_softmax(axis=1)
    parts = split(lsm, [1] * logits.shape[1], axis=1)
    t = Tensor(target.astype(logits.dtype.name)[:, None])
    return -(parts[1] * t + parts[0] * (1.0 - t))


def ce_loss(logits, target):
    return _per_voxel_ce(logits, target).mean()


def topk_ce_loss(logits, target, fraction):
    """Mean of the largest ceil(fraction * count) per-voxel CE values.

    fraction == 1.0 takes the plain mean with the same reduction order as
    `ce_loss`, so the two are bitwise identical in that case.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    ce = _per_voxel_ce(logits, target)
    if fraction == 1.0:
        return ce.mean()
    k = math.ceil(fraction * ce.size)
    idx = np.argpartition(-ce.data.reshape(-1), k - 1)[:k]
    return ce.take_flat(np.sort(idx)).mean()


def combined_loss(logits, target, loss_cfg):
    d = dice_loss(logits, target, eps=loss_cfg.dice_eps)
    if loss_cfg.kind == "dice_ce":
        return d + ce_loss(logits, target)
    return d + topk_ce_loss(logits, target, loss_cfg.topk_fraction)


# -- optimizer -------------------------------------------------------------


def sgd_step(params, state, lr, momentum=0.99, nesterov=True):
    """In-place Nesterov momentum update on every tensor with a gradient."""
    for key in sorted(params):
        p = params[key]
        if not p.requires_grad:
            continue
        if p.grad is None:
            if key in state:
                state[key] *= momentum
            continue
        g = p.grad
        if momentum != 0.0:
            v = state.get(key)
            if v is None:
                v = np.zeros_like(p.data)
                state[key] = v
            v *= momentum
            v += g
            g = g + momentum * v if nesterov else v
        p.data = p.data - lr * g


# -- data plumbing ---------------------------------------------------------


def load_cases(manifest_rows):
    cases = []
    for row in manifest_rows:
        vol = nifti_read(row["volume_path"])
        mask = nifti_read(row["mask_path"], as_mask=True)
        cases.append(
            {
                "id": row["id"],
                "volume": vol.voxels.astype(np.float32),
                "mask": mask.voxels,
                "lesion_volume": row["lesion_volume"],
            }
        )
    return cases


def _zscore(patch):
    std = patch.std()
    return (patch - patch.mean()) / (std if std > 1e-8 else 1.0)


def split_fold(rows, fold, k):
    """(train_rows, val_rows); fold -1 trains and validates on everything."""
    if fold == -1:
        return list(rows), list(rows)
    folds = size_balanced_folds([(r["id"], r["lesion_volume"]) for r in rows], k)
    if not 0 <= fold < k:
        raise ValueError(f"fold {fold} out of range for k={k}")
    val_ids = set(folds[fold])
    train = [r for r in rows if r["id"] not in val_ids]
    val = [r for r in rows if r["id"] in val_ids]
    return train, val


# -- training loop ---------------------------------------------------------


def train(run_cfg, model_cfg, manifest_path, fold, out_dir):
    """Train one model on one fold; writes log.csv, model.cfg, best.ckpt.

    Returns (best_val_dice, log_rows).
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = read_manifest(manifest_path)
    train_rows, val_rows = split_fold(rows, fold, run_cfg.k_folds)
    if not train_rows:
        raise ValueError("training fold is empty")
    train_cases = load_cases(train_rows)
    val_cases = load_cases(val_rows)

    params = unet.init_params(model_cfg, run_cfg.seed)
    state = {}
    rng = np.random.default_rng(run_cfg.seed)
    log_rows = []
    best = (-1.0, None)  # (val_dice, epoch)
    ckpt_path = os.path.join(out_dir, "best.ckpt")
    with open(os.path.join(out_dir, "model.cfg"), "w") as f:
        f.write(model_cfg.to_text())

    n = len(train_cases)
    batches_per_epoch = math.ceil(n / run_cfg.batch_size)
    for epoch in range(run_cfg.epochs):
        lr = run_cfg.lr_at(epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(batches_per_epoch):
            idxs = order[b * run_cfg.batch_size : (b + 1) * run_cfg.batch_size]
            vols, masks = [], []
            for i in idxs:
                case = train_cases[i]
                pv, pm = sample_patch(
                    case["volume"],
                    case["mask"],
                    run_cfg.patch,
                    rng,
                    run_cfg.foreground_bias,
                )
                pv, pm = augment(pv, pm, rng)
                vols.append(_zscore(pv.astype(np.float32)))
                masks.append(pm)
            x = Tensor(np.stack(vols)[:, None])
            target = np.stack(masks)
            logits = unet.forward(x, params, model_cfg, mode="train")
            loss = combined_loss(logits, target, run_cfg.loss)
            loss.backward()
            sgd_step(params, state, lr, run_cfg.momentum)
            for p in params.values():
                p.zero_grad()
            epoch_loss += loss.item()
        epoch_loss /= batches_per_epoch

        val_dice = ""
        is_last = epoch == run_cfg.epochs - 1
        if is_last or epoch % run_cfg.val_interval == 0:
            val_dice = evaluate_mean_dice(val_cases, params, model_cfg, run_cfg.patch)
            if val_dice > best[0]:
                best = (val_dice, epoch)
                unet.save_checkpoint(ckpt_path, params)
        log_rows.append(
            {"epoch": epoch, "lr": lr, "train_loss": epoch_loss, "val_dice": val_dice}
        )

    with open(os.path.join(out_dir, "log.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "lr", "train_loss", "val_dice"])
        writer.writeheader()
        writer.writerows(log_rows)
    return best[0], log_rows


def evaluate_mean_dice(cases, params, model_cfg, patch, overlap=0.5):
    dices = []
    for case in cases:
        probs = unet.predict(case["volume"], params, model_cfg, patch, overlap)
        pred = probs.argmax(axis=0).astype(np.uint8)
        dices.append(dice_score(pred, case["mask"]))
    return float(np.mean(dices)) if dices else float("nan")


# -- self-training and ensembling -----------------------------------------


def ensemble_predict(models, volume, patch, overlap=0.5):
    """Mean softmax map over (params, model_cfg) pairs; classes must agree."""
    if not models:
        raise ValueError("need at least one model")
    classes = {cfg.num_classes for _, cfg in models}
    if len(classes) != 1:
        raise ValueError(f"models disagree on class count: {sorted(classes)}")
    acc = None
    for params, cfg in models:
        probs = unet.predict(volume, params, cfg, patch, overlap)
        acc = probs if acc is None else acc + probs
    return acc / len(models)


def self_train(models, labeled_manifest, unlabeled_manifest, run_cfg, model_cfg,
               fold, out_dir, threshold=0.5):
    """One round of pseudo-labeling, then a fresh training run on the union."""
    if not models:
        raise ValueError("need at least one base model for pseudo-labeling")
    os.makedirs(out_dir, exist_ok=True)
    labeled = read_manifest(labeled_manifest)
    unlabeled = read_manifest(unlabeled_manifest)
    pseudo_dir = os.path.join(out_dir, "pseudo")
    os.makedirs(pseudo_dir, exist_ok=True)
    merged = list(labeled)
    for row in unlabeled:
        vol = nifti_read(row["volume_path"])
        probs = ensemble_predict(models, vol.voxels.astype(np.float32), run_cfg.patch)
        mask = LabelMask((probs[1] >= threshold).astype(np.uint8))
        mask_path = os.path.join(pseudo_dir, f"{row['id']}_pseudo.nii")
        nifti_write(mask, mask_path)
        merged.append(
            {
                "id": row["id"],
                "volume_path": row["volume_path"],
                "mask_path": mask_path,
                "lesion_volume": mask.lesion_volume,
            }
        )
    merged_manifest = os.path.join(out_dir, "merged_manifest.csv")
    write_manifest(merged_manifest, merged)
    return train(run_cfg, model_cfg, merged_manifest, fold, out_dir)

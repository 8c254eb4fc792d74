import csv

import numpy as np
import pytest

from mscsanet import unet
from mscsanet.tensor import Tensor
from mscsanet.training import (
    LossConfig,
    TrainConfig,
    ce_loss,
    combined_loss,
    dice_loss,
    ensemble_predict,
    evaluate_mean_dice,
    load_cases,
    self_train,
    sgd_step,
    split_fold,
    topk_ce_loss,
    train,
)
from mscsanet.unet import ModelConfig

TINY = ModelConfig(channels=(2, 4, 8))
RUN = TrainConfig(epochs=2, batch_size=2, seed=1, patch=(8, 8, 8), k_folds=2)


def _logits_target(seed=0, n=1, e=4):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((n, 2, e, e, e)), requires_grad=True)
    target = (rng.random((n, e, e, e)) > 0.5).astype(np.float64)
    return logits, target


def test_dice_loss_perfect_prediction_near_zero():
    target = np.zeros((1, 4, 4, 4))
    target[0, :2] = 1.0
    logits_np = np.zeros((1, 2, 4, 4, 4))
    logits_np[0, 1] = 40.0 * target[0] - 20.0
    logits_np[0, 0] = -logits_np[0, 1]
    loss = dice_loss(Tensor(logits_np), target).item()
    assert loss < 1e-4


def test_dice_loss_worst_case_near_one():
    target = np.ones((1, 4, 4, 4))
    logits_np = np.zeros((1, 2, 4, 4, 4))
    logits_np[0, 0] = 20.0  # confident background everywhere
    loss = dice_loss(Tensor(logits_np), target).item()
    assert loss > 0.99


def test_ce_loss_matches_manual():
    logits, target = _logits_target(1)
    lsm = logits.data - np.log(
        np.exp(logits.data).sum(axis=1, keepdims=True)
    )
    want = -(
        lsm[:, 1] * target + lsm[:, 0] * (1 - target)
    ).mean()
    assert ce_loss(logits, target).item() == pytest.approx(want, rel=1e-9)


def test_topk_fraction_one_is_bitwise_plain_ce():
    logits, target = _logits_target(2)
    a = topk_ce_loss(logits, target, 1.0).item()
    b = ce_loss(logits, target).item()
    assert a == b  # bitwise, not approximately


def test_topk_selects_hardest_voxels():
    logits, target = _logits_target(3)
    full = ce_loss(logits, target).item()
    hard = topk_ce_loss(logits, target, 0.1).item()
    assert hard > full


def test_topk_monotone_in_fraction():
    logits, target = _logits_target(4)
    vals = [topk_ce_loss(logits, target, f).item() for f in (0.05, 0.25, 0.5, 1.0)]
    assert vals == sorted(vals, reverse=True)


def test_combined_loss_dispatch():
    logits, target = _logits_target(5)
    d = dice_loss(logits, target).item()
    assert combined_loss(logits, target, LossConfig()).item() == pytest.approx(
        d + ce_loss(logits, target).item()
    )
    cfg = LossConfig(kind="dice_topk", topk_fraction=0.2)
    assert combined_loss(logits, target, cfg).item() == pytest.approx(
        d + topk_ce_loss(logits, target, 0.2).item()
    )


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(topk_fraction=0.0)
    with pytest.raises(ValueError):
        LossConfig(kind="nope")


def test_poly_lr_schedule():
    cfg = TrainConfig(epochs=10, lr0=0.01)
    assert cfg.lr_at(0) == 0.01
    assert cfg.lr_at(5) == pytest.approx(0.01 * 0.5**0.9)
    assert cfg.lr_at(9) < cfg.lr_at(1)


def test_sgd_step_matches_reference_nesterov():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    g1 = np.array([0.1, -0.2])
    p.grad = g1.copy()
    state = {}
    sgd_step({"w": p}, state, lr=0.5, momentum=0.9)
    # v = g; update = g + mu*v
    np.testing.assert_allclose(p.data, np.array([1.0, 2.0]) - 0.5 * (g1 + 0.9 * g1))
    p.grad = g1.copy()
    sgd_step({"w": p}, state, lr=0.5, momentum=0.9)
    v2 = 0.9 * g1 + g1
    np.testing.assert_allclose(state["w"], v2)


def test_sgd_step_without_gradient_decays_velocity_only():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = {"w": np.array([0.4])}
    sgd_step({"w": p}, state, lr=0.5, momentum=0.5)
    np.testing.assert_allclose(p.data, [1.0])  # untouched
    np.testing.assert_allclose(state["w"], [0.2])


def test_split_fold_partition(tiny_dataset):
    from mscsanet.data import read_manifest

    rows = read_manifest(tiny_dataset)
    train_rows, val_rows = split_fold(rows, 0, 2)
    assert len(train_rows) + len(val_rows) == len(rows)
    assert not {r["id"] for r in train_rows} & {r["id"] for r in val_rows}
    all_t, all_v = split_fold(rows, -1, 2)
    assert len(all_t) == len(all_v) == len(rows)


def test_train_writes_artifacts_and_is_deterministic(tiny_dataset, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        best, log = train(RUN, TINY, tiny_dataset, 0, out)
        assert (out / "best.ckpt").exists()
        assert (out / "model.cfg").exists()
        with open(out / "log.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == RUN.epochs
        assert set(rows[0]) == {"epoch", "lr", "train_loss", "val_dice"}
        outs.append((best, log, (out / "best.ckpt").read_bytes()))
    assert outs[0][0] == outs[1][0]
    assert outs[0][1] == outs[1][1]
    assert outs[0][2] == outs[1][2]  # checkpoints bit-identical


def test_train_loss_decreases_on_average(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=6, batch_size=2, seed=1, patch=(8, 8, 8), k_folds=2)
    _, log = train(cfg, TINY, tiny_dataset, -1, tmp_path / "run")
    losses = [r["train_loss"] for r in log]
    assert np.mean(losses[-2:]) < np.mean(losses[:2])


def test_evaluate_mean_dice_bounds(tiny_dataset):
    from mscsanet.data import read_manifest

    cases = load_cases(read_manifest(tiny_dataset))
    params = unet.init_params(TINY, 0)
    d = evaluate_mean_dice(cases, params, TINY, (8, 8, 8))
    assert 0.0 <= d <= 1.0


def test_ensemble_of_identical_models_equals_single(tiny_dataset):
    from mscsanet.data import read_manifest

    cases = load_cases(read_manifest(tiny_dataset))
    params = unet.init_params(TINY, 0)
    vol = cases[0]["volume"]
    single = unet.predict(vol, params, TINY, (8, 8, 8), 0.5)
    triple = ensemble_predict([(params, TINY)] * 3, vol, (8, 8, 8), 0.5)
    np.testing.assert_allclose(triple, single, atol=1e-7)


def test_ensemble_rejects_class_mismatch():
    p1 = unet.init_params(TINY, 0)
    cfg3 = ModelConfig(channels=(2, 4, 8), num_classes=3)
    p2 = unet.init_params(cfg3, 0)
    with pytest.raises(ValueError):
        ensemble_predict(
            [(p1, TINY), (p2, cfg3)], np.zeros((8, 8, 8), np.float32), (8, 8, 8)
        )


def test_self_train_empty_unlabeled_reproduces_plain(tiny_dataset, tmp_path):
    from mscsanet.data import MANIFEST_FIELDS

    empty = tmp_path / "empty.csv"
    with open(empty, "w") as f:
        f.write(",".join(MANIFEST_FIELDS) + "\n")

    best_plain, log_plain = train(RUN, TINY, tiny_dataset, 0, tmp_path / "plain")
    params = unet.load_checkpoint(tmp_path / "plain" / "best.ckpt")
    best_st, log_st = self_train(
        [(params, TINY)], tiny_dataset, empty, RUN, TINY, 0, tmp_path / "st"
    )
    assert best_st == best_plain
    assert log_st == log_plain
    assert (tmp_path / "plain" / "best.ckpt").read_bytes() == (
        tmp_path / "st" / "best.ckpt"
    ).read_bytes()


def test_self_train_writes_pseudo_labels(tiny_dataset, tmp_path):
    from mscsanet.data import read_manifest

    rows = read_manifest(tiny_dataset)
    labeled = tmp_path / "labeled.csv"
    unlabeled = tmp_path / "unlabeled.csv"
    from mscsanet.data import write_manifest

    write_manifest(labeled, rows[:3])
    write_manifest(unlabeled, rows[3:])
    params = unet.init_params(TINY, 0)
    cfg = TrainConfig(epochs=1, batch_size=2, seed=1, patch=(8, 8, 8), k_folds=2)
    self_train([(params, TINY)], labeled, unlabeled, cfg, TINY, -1, tmp_path / "st")
    pseudo = list((tmp_path / "st" / "pseudo").glob("*.nii"))
    assert len(pseudo) == len(rows) - 3
    merged = read_manifest(tmp_path / "st" / "merged_manifest.csv")
    assert len(merged) == len(rows)

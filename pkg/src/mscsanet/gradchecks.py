"""Finite-difference verification suite for every differentiable operation.

All checks run in float64 on small random inputs and compare analytic
gradients against central differences at 1e-4 relative tolerance. Shared by
the CLI `gradcheck` subcommand and the acceptance tests.
"""

from __future__ import annotations

import numpy as np

from . import ops3d as F
from . import mscsa as att
from .tensor import Tensor, concat, gradcheck, split
from .training import dice_loss, topk_ce_loss


def _t(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def op_checks(rng):
    """(name, fn, input shapes) for every differentiable primitive."""
    w_soft = Tensor(rng.standard_normal((3, 5)))
    w_lsm = Tensor(rng.standard_normal((2, 3, 4)))
    w_act = Tensor(rng.standard_normal((4, 4)))
    w_bn = Tensor(rng.standard_normal((2, 3, 2, 2, 2)))

    def bn_loss(x, g, b):
        rm, rv = np.zeros(3), np.ones(3)
        return (F.batch_norm(x, g, b, rm, rv, mode="train") * w_bn).sum()

    return [
        ("add_mul", lambda a, b: ((a + b) * a).sum(), [(3, 4), (3, 4)]),
        ("div_pow", lambda a, b: (a / (b * b + 1.0) + a**3).sum(), [(2, 3), (2, 3)]),
        ("exp_log_sqrt", lambda a: ((a * a + 1.0).sqrt().log().exp()).sum(), [(3, 3)]),
        ("sum_mean", lambda a: (a.sum(axis=1) * a.mean(axis=1)).sum(), [(3, 4)]),
        ("reshape_transpose", lambda a: (a.reshape(4, 6).transpose((1, 0)) ** 2).sum(), [(2, 3, 4)]),
        ("leaky_relu", lambda a: (a.leaky_relu(0.01) * w_act).sum(), [(4, 4)]),
        ("silu", lambda a: (a.silu() * w_act).sum(), [(4, 4)]),
        ("softmax", lambda a: (a.softmax(axis=-1) * w_soft).sum(), [(3, 5)]),
        ("log_softmax", lambda a: (a.log_softmax(axis=1) * w_lsm).sum(), [(2, 3, 4)]),
        ("matmul_batched", lambda a, b: ((a @ b) ** 2).sum(), [(2, 3, 4), (2, 4, 2)]),
        ("take_flat", lambda a: (a.take_flat(np.array([0, 3, 3, 7])) ** 2).sum(), [(2, 4)]),
        (
            "concat_split",
            lambda a, b: sum(
                ((s * s).sum() for s in split(concat([a, b], 1), [2, 3], 1)),
                Tensor(0.0),
            ),
            [(2, 2), (2, 3)],
        ),
        (
            "conv3d",
            lambda x, w, b: ((F.conv3d(x, w, b, stride=(1, 2, 1), padding=1)) ** 2).sum(),
            [(2, 4, 4, 5, 4), (3, 4, 3, 3, 3), (3,)],
        ),
        (
            "conv3d_grouped",
            lambda x, w: ((F.conv3d(x, w, padding=1, groups=2)) ** 2).sum(),
            [(1, 4, 3, 3, 3), (6, 2, 3, 3, 3)],
        ),
        (
            "conv3d_depthwise",
            lambda x, w, b: ((F.conv3d(x, w, b, padding=1, groups=3)) ** 2).sum(),
            [(1, 3, 3, 3, 3), (3, 1, 3, 3, 3), (3,)],
        ),
        (
            "pointwise",
            lambda x, w, b: ((F.pointwise(x, w, b)) ** 2).sum(),
            [(1, 3, 2, 2, 2), (4, 3), (4,)],
        ),
        (
            "resize_trilinear_up",
            lambda x: ((F.resize_trilinear(x, (5, 4, 6))) ** 2).sum(),
            [(1, 2, 3, 3, 3)],
        ),
        (
            "resize_trilinear_down",
            lambda x: ((F.resize_trilinear(x, (2, 2, 2))) ** 2).sum(),
            [(1, 2, 5, 4, 3)],
        ),
        ("downsample_avg", lambda x: ((F.downsample_avg(x, 2)) ** 2).sum(), [(1, 2, 4, 4, 4)]),
        ("batch_norm", bn_loss, [(2, 3, 2, 2, 2), (3,), (3,)]),
    ]


def loss_checks(rng):
    target = (rng.random((1, 4, 4, 4)) > 0.5).astype(np.float64)
    return [
        ("dice_loss", lambda lg: dice_loss(lg, target), [(1, 2, 4, 4, 4)]),
        (
            "topk_ce_loss",
            lambda lg: topk_ce_loss(lg, target, 0.25),
            [(1, 2, 4, 4, 4)],
        ),
        (
            "dice_topk_combined",
            lambda lg: dice_loss(lg, target) + topk_ce_loss(lg, target, 0.10),
            [(1, 2, 4, 4, 4)],
        ),
    ]


def mscsa_block_check(rng):
    """Gradcheck of the full attention block: 2 stages, 8 channels, 4^3."""
    stage_channels = [3, 5]
    cfg = att.MSCSAConfig(target_stage=1, heads=2, c_k=4, c_v=4).resolved(stage_channels)
    params = att.init_mscsa_params(stage_channels, cfg, rng, dtype=np.float64)
    w_out = Tensor(rng.standard_normal((1, 8, 4, 4, 4)))
    trainable = [k for k in sorted(params) if params[k].requires_grad]

    def loss(x, *param_values):
        return (
            att.mscsa_block(x, stage_channels, params, cfg, mode="train") * w_out
        ).sum()

    x = _t(rng, (1, 8, 4, 4, 4))
    inputs = [x] + [params[k] for k in trainable]

    def fn(*tensors):
        return loss(*tensors)

    return gradcheck(fn, inputs)


def run_suite(rtol=1e-4, verbose=True):
    """Run every check; returns the max relative error observed."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for name, fn, shapes in op_checks(rng) + loss_checks(rng):
        inputs = [_t(rng, s) for s in shapes]
        err = gradcheck(fn, inputs, rtol=rtol)
        worst = max(worst, err)
        if verbose:
            print(f"  gradcheck {name:<22} max rel err {err:.3e}")
    err = mscsa_block_check(rng)
    worst = max(worst, err)
    if verbose:
        print(f"  gradcheck {'mscsa_block':<22} max rel err {err:.3e}")
    return worst

"""Multi-stage cross-scale attention over U-Net encoder features.

Encoder stage maps are resized to a single target resolution, concatenated
along channels, run through a four-sublayer attention block, and converted
back into per-stage multiplicative/additive modulation of the original skip
features. A stage feature set is represented as an ordered list of 5D
tensors sharing the batch extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops3d import ConfigError, batch_norm, conv3d, downsample_avg, pointwise, resize_trilinear
from .tensor import DimensionError, Tensor, concat, split

MSP_STRIDES = (1, 2, 3)


@dataclass
class MSCSAConfig:
    """Attention hyperparameters; `None` dims are resolved from the channel sum."""

    target_stage: int
    heads: int = 4
    c_k: int | None = None
    c_v: int | None = None
    dwconv_kernel: int = 3

    def resolved(self, stage_channels):
        c_total = sum(stage_channels)
        c_k = self.c_k if self.c_k is not None else (c_total // self.heads) * self.heads
        c_v = self.c_v if self.c_v is not None else (c_total // self.heads) * self.heads
        if c_k % self.heads or c_v % self.heads:
            raise ConfigError("attention dims must be divisible by head count")
        if not 0 <= self.target_stage < len(stage_channels):
            raise ConfigError(
                f"target_stage {self.target_stage} out of range for {len(stage_channels)} stages"
            )
        if self.dwconv_kernel % 2 == 0:
            raise ConfigError("dwconv kernel must be odd for same-padding")
        return MSCSAConfig(self.target_stage, self.heads, c_k, c_v, self.dwconv_kernel)


def msp_scales(h, w, d):
    """Branch extents for the three key/value scales: n_s = (n-1)//s + 1."""
    return [tuple((n - 1) // s + 1 for n in (h, w, d)) for s in MSP_STRIDES]


def validate_stages(stages):
    if len(stages) < 2:
        raise DimensionError("need at least two encoder stages")
    n = stages[0].shape[0]
    for t in stages:
        if t.ndim != 5 or t.shape[0] != n:
            raise DimensionError("stages must be 5D with a shared batch extent")


def resize_to(x, target):
    """Resize spatial extents: exact average pooling down, trilinear up."""
    cur = x.shape[2:]
    target = tuple(target)
    if cur == target:
        return x
    if all(c % t == 0 and c >= t for c, t in zip(cur, target)):
        return downsample_avg(x, tuple(c // t for c, t in zip(cur, target)))
    return resize_trilinear(x, target)


def assemble_multistage(stages, cfg):
    """Resize every stage to the target stage's resolution and concat channels."""
    validate_stages(stages)
    target = stages[cfg.target_stage].shape[2:]
    return concat([resize_to(s, target) for s in stages], axis=1)


# -- parameter initialization ----------------------------------------------


def _kaiming(rng, shape, fan_in, dtype):
    return Tensor(
        (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype),
        requires_grad=True,
    )


def _zeros(shape, dtype, requires_grad=True):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _add_norm(params, prefix, c, dtype):
    params[prefix + ".gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
    params[prefix + ".beta"] = _zeros(c, dtype)
    params[prefix + ".running_mean"] = _zeros(c, dtype, requires_grad=False)
    params[prefix + ".running_var"] = Tensor(
        np.ones(c, dtype=dtype), requires_grad=False
    )


def _add_csa(params, prefix, c_total, cfg, rng, dtype):
    k = cfg.dwconv_kernel
    params[prefix + ".q.weight"] = _kaiming(rng, (cfg.c_k, c_total, 1, 1, 1), c_total, dtype)
    params[prefix + ".q.bias"] = _zeros(cfg.c_k, dtype)
    for i, _ in enumerate(MSP_STRIDES, start=1):
        params[f"{prefix}.k{i}.weight"] = _kaiming(rng, (cfg.c_k, c_total, 1, 1, 1), c_total, dtype)
        params[f"{prefix}.k{i}.bias"] = _zeros(cfg.c_k, dtype)
        params[f"{prefix}.v{i}.weight"] = _kaiming(rng, (cfg.c_v, c_total, 1, 1, 1), c_total, dtype)
        params[f"{prefix}.v{i}.bias"] = _zeros(cfg.c_v, dtype)
    params[prefix + ".rpe.weight"] = _kaiming(rng, (cfg.c_v, 1, k, k, k), k**3, dtype)
    params[prefix + ".rpe.bias"] = _zeros(cfg.c_v, dtype)
    params[prefix + ".out.weight"] = _kaiming(rng, (c_total, cfg.c_v), cfg.c_v, dtype)
    params[prefix + ".out.bias"] = _zeros(c_total, dtype)


def _add_ffn(params, prefix, c, rng, dtype, expand=3):
    params[prefix + ".fc1.weight"] = _kaiming(rng, (expand * c, c), c, dtype)
    params[prefix + ".fc1.bias"] = _zeros(expand * c, dtype)
    params[prefix + ".fc2.weight"] = _kaiming(rng, (c, expand * c), expand * c, dtype)
    params[prefix + ".fc2.bias"] = _zeros(c, dtype)


def init_mscsa_params(stage_channels, cfg, rng, dtype=np.float32, prefix="mscsa"):
    """All learnable tensors for assemble -> block -> inject, keyed by path.

    Injection projections are zero-initialized so the whole module is an
    exact identity on the skip features at initialization.
    """
    cfg = cfg.resolved(stage_channels)
    c_total = sum(stage_channels)
    params = {}
    for i in range(4):
        _add_norm(params, f"{prefix}.sub{i}.norm", c_total, dtype)
    _add_csa(params, f"{prefix}.sub0", c_total, cfg, rng, dtype)
    for s, c in enumerate(stage_channels):
        _add_ffn(params, f"{prefix}.sub1.stage{s}", c, rng, dtype)
    _add_csa(params, f"{prefix}.sub2", c_total, cfg, rng, dtype)
    _add_ffn(params, f"{prefix}.sub3", c_total, rng, dtype)
    _add_norm(params, f"{prefix}.out_norm", c_total, dtype)
    for s, c in enumerate(stage_channels):
        for name in ("gamma", "beta"):
            params[f"{prefix}.inject.stage{s}.{name}.weight"] = _zeros((c, c), dtype)
            params[f"{prefix}.inject.stage{s}.{name}.bias"] = _zeros(c, dtype)
    return params


# -- forward pieces --------------------------------------------------------


def _to_tokens(x, heads):
    """[N,c,h,w,d] -> [N*heads, L, c/heads] with head-major channel split."""
    n, c = x.shape[:2]
    length = int(np.prod(x.shape[2:]))
    ch = c // heads
    t = x.reshape(n, heads, ch, length).transpose((0, 1, 3, 2))
    return t.reshape(n * heads, length, ch)


def _from_tokens(t, heads, spatial):
    nh, length, ch = t.shape
    n = nh // heads
    x = t.reshape(n, heads, length, ch).transpose((0, 1, 3, 2))
    return x.reshape(n, heads * ch, *spatial)


def msp_project(x, params, prefix, cfg):
    """Produce Q plus multi-scale K/V token tensors.

    Returns (Q, K, V, v1_vol) where v1_vol keeps the original-scale value
    maps in volume layout for positional encoding.
    """
    q = conv3d(x, params[prefix + ".q.weight"], params[prefix + ".q.bias"])
    ks, vs = [], []
    v1_vol = None
    for i, stride in enumerate(MSP_STRIDES, start=1):
        ki = conv3d(x, params[f"{prefix}.k{i}.weight"], params[f"{prefix}.k{i}.bias"], stride=stride)
        vi = conv3d(x, params[f"{prefix}.v{i}.weight"], params[f"{prefix}.v{i}.bias"], stride=stride)
        if i == 1:
            v1_vol = vi
        ks.append(_to_tokens(ki, cfg.heads))
        vs.append(_to_tokens(vi, cfg.heads))
    return (
        _to_tokens(q, cfg.heads),
        concat(ks, axis=1),
        concat(vs, axis=1),
        v1_vol,
    )


def cross_scale_attention(q, k, v, cfg):
    """Scaled dot-product attention of original-scale queries over all scales."""
    scale = 1.0 / np.sqrt(cfg.c_k // cfg.heads)
    attn = (q @ k.swap_last() * scale).softmax(axis=-1)
    return attn @ v


def rpe(attn_vol, v1_vol, weight, bias, activation=Tensor.silu):
    """Add depthwise-conv positional encoding of the original-scale values."""
    c_v = v1_vol.shape[1]
    k = weight.shape[2]
    act = activation(v1_vol) if activation is not None else v1_vol
    return attn_vol + conv3d(act, weight, bias, padding=k // 2, groups=c_v)


def csa_forward(x, params, prefix, cfg):
    q, k, v, v1_vol = msp_project(x, params, prefix, cfg)
    out = cross_scale_attention(q, k, v, cfg)
    out_vol = _from_tokens(out, cfg.heads, x.shape[2:])
    out_vol = rpe(out_vol, v1_vol, params[prefix + ".rpe.weight"], params[prefix + ".rpe.bias"])
    return pointwise(out_vol, params[prefix + ".out.weight"], params[prefix + ".out.bias"])


def ffn_forward(x, params, prefix):
    h = pointwise(x, params[prefix + ".fc1.weight"], params[prefix + ".fc1.bias"])
    return pointwise(h.silu(), params[prefix + ".fc2.weight"], params[prefix + ".fc2.bias"])


def intra_ffn(x, stage_channels, params, prefix):
    """Independent per-stage FFN on each stage's channel segment."""
    if sum(stage_channels) != x.shape[1]:
        raise DimensionError(
            f"stage channels {stage_channels} do not sum to {x.shape[1]}"
        )
    segs = split(x, list(stage_channels), axis=1)
    outs = [
        ffn_forward(seg, params, f"{prefix}.stage{s}") for s, seg in enumerate(segs)
    ]
    return concat(outs, axis=1)


def _norm(x, params, prefix, mode):
    return batch_norm(
        x,
        params[prefix + ".gamma"],
        params[prefix + ".beta"],
        params[prefix + ".running_mean"].data,
        params[prefix + ".running_var"].data,
        mode=mode,
    )


def mscsa_block(x, stage_channels, params, cfg, mode="train", prefix="mscsa"):
    """CSA -> Intra-FFN -> CSA -> FFN, pre-norm residual, then output norm."""
    sublayers = (
        lambda h: csa_forward(h, params, f"{prefix}.sub0", cfg),
        lambda h: intra_ffn(h, stage_channels, params, f"{prefix}.sub1"),
        lambda h: csa_forward(h, params, f"{prefix}.sub2", cfg),
        lambda h: ffn_forward(h, params, f"{prefix}.sub3"),
    )
    for i, sub in enumerate(sublayers):
        x = x + sub(_norm(x, params, f"{prefix}.sub{i}.norm", mode))
    return _norm(x, params, f"{prefix}.out_norm", mode)


def inject(stages, block_out, stage_channels, params, prefix="mscsa"):
    """Split the block output per stage, revert resolutions, and fuse.

    Each reverted segment is projected to per-stage modulation maps (gamma,
    beta); the fused skip is x * (1 + gamma) + beta.
    """
    segs = split(block_out, list(stage_channels), axis=1)
    fused = []
    for s, (xs, seg) in enumerate(zip(stages, segs)):
        seg = resize_to(seg, xs.shape[2:])
        gamma = pointwise(
            seg,
            params[f"{prefix}.inject.stage{s}.gamma.weight"],
            params[f"{prefix}.inject.stage{s}.gamma.bias"],
        )
        beta = pointwise(
            seg,
            params[f"{prefix}.inject.stage{s}.beta.weight"],
            params[f"{prefix}.inject.stage{s}.beta.bias"],
        )
        fused.append(xs * (gamma + 1.0) + beta)
    return fused


def mscsa_forward(stages, params, cfg, mode="train", prefix="mscsa"):
    """Full pipeline: assemble -> attention block -> injection fusion."""
    stage_channels = [s.shape[1] for s in stages]
    cfg = cfg.resolved(stage_channels)
    assembled = assemble_multistage(stages, cfg)
    refined = mscsa_block(assembled, stage_channels, params, cfg, mode, prefix)
    return inject(stages, refined, stage_channels, params, prefix)

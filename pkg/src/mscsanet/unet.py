"""Compact 3D U-Net (plain and residual) with optional attention skip fusion.

Parameters live in a flat dict keyed by layer path. Backbone parameters are
drawn from one RNG stream and attention parameters from a second, so the
backbone weights for a given seed are identical with and without the
attention module enabled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import mscsa as att
from .mscsa import MSCSAConfig, _kaiming, _zeros
from .ops3d import ConfigError, batch_norm, conv3d, pointwise, resize_trilinear
from .tensor import Tensor, concat, no_grad

CHECKPOINT_MAGIC = b"MSCSAv1"

# full-scale 6-stage encoder schedule; the attention block over all six
# stage maps then spans 1120 concatenated channels
DEFAULT_CHANNELS_6 = (32, 64, 128, 256, 320, 320)


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128)
    backbone: str = "plain"  # plain | residual
    in_channels: int = 1
    num_classes: int = 2
    mscsa: MSCSAConfig | None = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2 or any(c <= 0 for c in self.channels):
            raise ConfigError("need >= 2 stages of positive channel counts")
        if self.backbone not in ("plain", "residual"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")

    @property
    def num_stages(self):
        return len(self.channels)

    def check_input(self, shape):
        div = 2 ** (self.num_stages - 1)
        if any(n % div for n in shape):
            raise ConfigError(
                f"input extents {tuple(shape)} must be divisible by {div}"
            )

    def to_text(self):
        lines = [
            f"channels={','.join(map(str, self.channels))}",
            f"backbone={self.backbone}",
            f"in_channels={self.in_channels}",
            f"num_classes={self.num_classes}",
            f"mscsa={'on' if self.mscsa else 'off'}",
        ]
        if self.mscsa:
            m = self.mscsa
            lines += [
                f"mscsa.target_stage={m.target_stage}",
                f"mscsa.heads={m.heads}",
                f"mscsa.c_k={'auto' if m.c_k is None else m.c_k}",
                f"mscsa.c_v={'auto' if m.c_v is None else m.c_v}",
                f"mscsa.dwconv_kernel={m.dwconv_kernel}",
            ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text):
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        channels = tuple(int(c) for c in kv["channels"].split(","))
        mcfg = None
        if kv.get("mscsa", "off") == "on":
            def dim(name):
                v = kv.get(name, "auto")
                return None if v == "auto" else int(v)

            mcfg = MSCSAConfig(
                target_stage=int(kv.get("mscsa.target_stage", len(channels) - 3)),
                heads=int(kv.get("mscsa.heads", 4)),
                c_k=dim("mscsa.c_k"),
                c_v=dim("mscsa.c_v"),
                dwconv_kernel=int(kv.get("mscsa.dwconv_kernel", 3)),
            )
        return ModelConfig(
            channels=channels,
            backbone=kv.get("backbone", "plain"),
            in_channels=int(kv.get("in_channels", 1)),
            num_classes=int(kv.get("num_classes", 2)),
            mscsa=mcfg,
        )


def default_mscsa_config(num_stages):
    """Target stage defaults to S-3 (clipped), one-eighth resolution for S=6."""
    return MSCSAConfig(target_stage=max(num_stages - 3, 0))


# -- parameters ------------------------------------------------------------


def _add_conv_unit(params, prefix, cin, cout, rng, dtype, k=3):
    params[prefix + ".conv.weight"] = _kaiming(
        rng, (cout, cin, k, k, k), cin * k**3, dtype
    )
    params[prefix + ".conv.bias"] = _zeros(cout, dtype)
    att._add_norm(params, prefix + ".norm", cout, dtype)


def init_params(cfg, seed, dtype=np.float32):
    """Initialize all learnable tensors and norm buffers for a model."""
    rng = np.random.default_rng(seed)
    params = {}
    chans = cfg.channels
    cin = cfg.in_channels
    for s, c in enumerate(chans):
        _add_conv_unit(params, f"enc{s}.unit0", cin, c, rng, dtype)
        _add_conv_unit(params, f"enc{s}.unit1", c, c, rng, dtype)
        cin = c
    for s in range(cfg.num_stages - 2, -1, -1):
        cat = chans[s + 1] + chans[s]
        _add_conv_unit(params, f"dec{s}.unit0", cat, chans[s], rng, dtype)
        _add_conv_unit(params, f"dec{s}.unit1", chans[s], chans[s], rng, dtype)
    params["head.weight"] = _kaiming(rng, (cfg.num_classes, chans[0]), chans[0], dtype)
    params["head.bias"] = _zeros(cfg.num_classes, dtype)
    if cfg.mscsa is not None:
        mrng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D736373]))
        params.update(
            att.init_mscsa_params(list(chans), cfg.mscsa, mrng, dtype=dtype)
        )
    return params


def param_count(params):
    return sum(p.size for p in params.values() if p.requires_grad)


# -- forward ---------------------------------------------------------------


def _conv_unit(x, params, prefix, mode, stride=1):
    y = conv3d(
        x,
        params[prefix + ".conv.weight"],
        params[prefix + ".conv.bias"],
        stride=stride,
        padding=1,
    )
    y = batch_norm(
        y,
        params[prefix + ".norm.gamma"],
        params[prefix + ".norm.beta"],
        params[prefix + ".norm.running_mean"].data,
        params[prefix + ".norm.running_var"].data,
        mode=mode,
    )
    return y.leaky_relu(0.01)


def encoder_forward(x, params, cfg, mode="train"):
    """Stage features at halving resolutions; returns one tensor per stage."""
    cfg.check_input(x.shape[2:])
    stages = []
    h = x
    for s in range(cfg.num_stages):
        u1 = _conv_unit(h, params, f"enc{s}.unit0", mode, stride=1 if s == 0 else 2)
        u2 = _conv_unit(u1, params, f"enc{s}.unit1", mode)
        h = u1 + u2 if cfg.backbone == "residual" else u2
        stages.append(h)
    return stages


def forward(x, params, cfg, mode="train"):
    """Logits over classes at the input resolution."""
    stages = encoder_forward(x, params, cfg, mode)
    if cfg.mscsa is not None:
        stages = att.mscsa_forward(stages, params, cfg.mscsa, mode=mode)
    h = stages[-1]
    for s in range(cfg.num_stages - 2, -1, -1):
        h = resize_trilinear(h, stages[s].shape[2:])
        h = concat([stages[s], h], axis=1)
        h = _conv_unit(h, params, f"dec{s}.unit0", mode)
        h = _conv_unit(h, params, f"dec{s}.unit1", mode)
    return pointwise(h, params["head.weight"], params["head.bias"])


# -- sliding-window inference ---------------------------------------------


def _gaussian_map(patch, dtype):
    grids = []
    for n in patch:
        sigma = max(n / 8.0, 1.0)
        c = (n - 1) / 2.0
        grids.append(np.exp(-((np.arange(n) - c) ** 2) / (2 * sigma**2)))
    g = grids[0][:, None, None] * grids[1][None, :, None] * grids[2][None, None, :]
    g = np.maximum(g, g.max() * 1e-3)
    return g.astype(dtype)


def _tile_starts(extent, patch, step):
    if extent <= patch:
        return [0]
    starts = list(range(0, extent - patch + 1, step))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def predict(volume, params, cfg, patch, overlap=0.5, normalize=True):
    """Gaussian-blended sliding-window class probabilities for a 3D volume.

    `volume` is a [H,W,D] numpy array; returns [num_classes,H,W,D] float32.
    Volumes smaller than the patch are zero-padded and cropped back.
    """
    patch = tuple(int(p) for p in patch)
    vol = np.asarray(volume, dtype=np.float32)
    orig = vol.shape
    pad = [(0, max(0, p - n)) for n, p in zip(orig, patch)]
    if any(p[1] for p in pad):
        vol = np.pad(vol, pad)
    shape = vol.shape
    steps = [max(1, int(round(p * (1 - overlap)))) for p in patch]
    weight = _gaussian_map(patch, np.float32)
    acc = np.zeros((cfg.num_classes,) + shape, dtype=np.float32)
    wsum = np.zeros(shape, dtype=np.float32)
    with no_grad():
        for sx in _tile_starts(shape[0], patch[0], steps[0]):
            for sy in _tile_starts(shape[1], patch[1], steps[1]):
                for sz in _tile_starts(shape[2], patch[2], steps[2]):
                    sl = (
                        slice(sx, sx + patch[0]),
                        slice(sy, sy + patch[1]),
                        slice(sz, sz + patch[2]),
                    )
                    tile = vol[sl]
                    if normalize:
                        std = tile.std()
                        tile = (tile - tile.mean()) / (std if std > 1e-8 else 1.0)
                    x = Tensor(tile[None, None])
                    logits = forward(x, params, cfg, mode="eval")
                    probs = logits.softmax(axis=1).data[0]
                    acc[(slice(None),) + sl] += probs * weight
                    wsum[sl] += weight
    probs = acc / wsum
    return probs[:, : orig[0], : orig[1], : orig[2]]


# -- checkpoint I/O --------------------------------------------------------


def save_checkpoint(path, params):
    """Flat binary format: magic, then (path, rank, extents, float32 LE data)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for key in sorted(params):
            t = params[key]
            name = key.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(t.data.astype("<f4").tobytes())


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, dtype=np.float32):
    """Read a checkpoint into a fresh path-keyed tensor dict."""
    params = {}
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path}")
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            key = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"truncated tensor data for {key}")
            data = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(dtype)
            trainable = not (
                key.endswith(".running_mean") or key.endswith(".running_var")
            )
            params[key] = Tensor(data.copy(), requires_grad=trainable)
    return params

"""Synthetic lesion phantoms, fold construction, patch sampling, manifests.

Phantom generation uses a self-contained xorshift64* generator so output is
bit-identical for a given seed on every platform, independent of numpy's
stream implementation.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class XorShift64Star:
    """xorshift64* PRNG: x ^= x>>12; x ^= x<<25; x ^= x>>27; out = x * M.

    Doubles are drawn from the top 53 bits of the output word.
    """

    MULT = 2685821657736338717
    MASK = (1 << 64) - 1

    def __init__(self, seed):
        self.state = (int(seed) & self.MASK) or 0x9E3779B97F4A7C15

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x = (x ^ (x << 25)) & self.MASK
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & self.MASK

    def uniform(self, low=0.0, high=1.0):
        u = self.next_u64() >> 11
        return low + (high - low) * (u / float(1 << 53))

    def randint(self, low, high):
        """Uniform integer in [low, high] inclusive."""
        span = high - low + 1
        return low + self.next_u64() % span

    def uniforms(self, n, low=0.0, high=1.0):
        return np.array([self.uniform(low, high) for _ in range(n)])


@dataclass
class Volume:
    voxels: np.ndarray  # [H,W,D] float
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))


@dataclass
class LabelMask:
    voxels: np.ndarray  # [H,W,D] in {0,1}
    lesion_volume: int = -1

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        uniq = np.unique(vox)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ValueError("mask voxels must be binary")
        self.voxels = vox.astype(np.uint8)
        count = int(self.voxels.sum())
        if self.lesion_volume < 0:
            self.lesion_volume = count
        elif self.lesion_volume != count:
            raise ValueError(
                f"cached lesion_volume {self.lesion_volume} != recount {count}"
            )


@dataclass
class PhantomSpec:
    extents: tuple = (32, 32, 32)
    lesion_count: tuple = (1, 3)  # inclusive range
    radius: tuple = (2.0, 5.0)  # per-axis ellipsoid radii, voxels
    contrast: float = 0.6  # lesion hypointensity depth
    noise_scale: float = 0.1  # smooth background modulation amplitude
    seed: int = 0

    def __post_init__(self):
        if self.radius[0] < 1:
            raise ValueError("lesion radii must be >= 1 voxel")
        if self.lesion_count[0] < 0:
            raise ValueError("lesion count must be >= 0")


def _smooth_background(rng, extents, scale):
    """Low-frequency noise: coarse uniform grid, trilinear upsampled."""
    coarse = tuple(max(2, n // 8) for n in extents)
    grid = np.array(
        [rng.uniform(-1.0, 1.0) for _ in range(int(np.prod(coarse)))]
    ).reshape(coarse)
    out = grid
    for axis, n in enumerate(extents):
        idx = np.linspace(0, out.shape[axis] - 1, n)
        i0 = np.floor(idx).astype(int)
        i1 = np.minimum(i0 + 1, out.shape[axis] - 1)
        f = (idx - i0).reshape([-1 if a == axis else 1 for a in range(3)])
        out = out.take(i0, axis=axis) * (1 - f) + out.take(i1, axis=axis) * f
    return 1.0 + scale * out


def _stamp_ellipsoid(mask, center, radii):
    lo = [max(0, int(np.floor(c - r))) for c, r in zip(center, radii)]
    hi = [
        min(n - 1, int(np.ceil(c + r)))
        for n, c, r in zip(mask.shape, center, radii)
    ]
    xs = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    dist = sum(
        ((ax - c) / r) ** 2
        for ax, c, r in zip(np.ix_(*xs), center, radii)
    )
    region = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    mask[region] |= (dist <= 1.0).astype(np.uint8)


def generate_phantom(spec):
    """Deterministic synthetic volume with ellipsoidal hypointense lesions."""
    rng = XorShift64Star(spec.seed)
    extents = tuple(int(n) for n in spec.extents)
    vol = _smooth_background(rng, extents, spec.noise_scale)
    mask = np.zeros(extents, dtype=np.uint8)
    count = rng.randint(*spec.lesion_count)
    for _ in range(count):
        placed = False
        for _attempt in range(50):
            radii = [rng.uniform(spec.radius[0], spec.radius[1]) for _ in range(3)]
            if all(2 * r + 2 <= n for r, n in zip(radii, extents)):
                center = [
                    rng.uniform(r + 1, n - r - 2) for r, n in zip(radii, extents)
                ]
                _stamp_ellipsoid(mask, center, radii)
                placed = True
                break
        if not placed:
            log.warning("lesion does not fit in %s after 50 tries; skipped", extents)
    vol = vol - spec.contrast * mask
    return Volume(vol.astype(np.float32)), LabelMask(mask)


def size_balanced_folds(cases, k):
    """Deal cases into k folds by descending lesion volume, round-robin.

    `cases` is a list of (id, lesion_volume). Returns a list of k lists of ids.
    """
    if k <= 0:
        raise ValueError("fold count must be positive")
    if k > len(cases):
        raise ValueError(f"cannot build {k} folds from {len(cases)} cases")
    ranked = sorted(cases, key=lambda c: (-c[1], c[0]))
    folds = [[] for _ in range(k)]
    for i, (cid, _vol) in enumerate(ranked):
        folds[i % k].append(cid)
    return folds


def sample_patch(volume, mask, patch, rng, foreground_bias=1.0 / 3.0):
    """Extract an aligned (volume, mask) patch, optionally lesion-centered.

    With probability `foreground_bias` the patch is centered on a uniformly
    chosen lesion voxel; otherwise the center is uniform over the volume.
    Out-of-range regions are zero-padded.
    """
    vox = volume.voxels if isinstance(volume, Volume) else np.asarray(volume)
    mvox = mask.voxels if isinstance(mask, LabelMask) else np.asarray(mask)
    patch = tuple(int(p) for p in patch)
    shape = vox.shape
    lesion_idx = np.argwhere(mvox > 0)
    if len(lesion_idx) > 0 and rng.random() < foreground_bias:
        center = lesion_idx[rng.integers(0, len(lesion_idx))]
    else:
        center = [rng.integers(0, n) for n in shape]
    out_v = np.zeros(patch, dtype=vox.dtype)
    out_m = np.zeros(patch, dtype=mvox.dtype)
    src, dst = [], []
    for c, p, n in zip(center, patch, shape):
        start = int(c) - p // 2
        s0, s1 = max(0, start), min(n, start + p)
        if s0 >= s1:
            s0 = s1 = max(0, min(n, s0))
        src.append(slice(s0, s1))
        dst.append(slice(s0 - start, s1 - start))
    src, dst = tuple(src), tuple(dst)
    out_v[dst] = vox[src]
    out_m[dst] = mvox[src]
    return out_v, out_m


def augment(patch_volume, patch_mask, rng):
    """Independent axis flips (p=0.5 each), applied to both arrays alike."""
    v, m = patch_volume, patch_mask
    for axis in range(3):
        if rng.random() < 0.5:
            v = np.flip(v, axis=axis)
            m = np.flip(m, axis=axis)
    return np.ascontiguousarray(v), np.ascontiguousarray(m)


# -- dataset manifest ------------------------------------------------------

MANIFEST_FIELDS = ["id", "volume_path", "mask_path", "lesion_volume"]


def write_manifest(path, rows):
    """rows: list of dicts with MANIFEST_FIELDS keys."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in MANIFEST_FIELDS})


def read_manifest(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        row["lesion_volume"] = int(row["lesion_volume"])
    return rows

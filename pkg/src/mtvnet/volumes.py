"""Volume ingestion, degradation, masking, and nested patch sampling.

Volumes are channels-first float32 arrays (C, H, W, D) with intensities
normalized to [0, 1].  The on-disk format is a single file: an ASCII header
(first line ``MTVVOL1``, terminated by ``end``) followed by raw
little-endian float32 voxels in C order.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

VOLUME_MAGIC = "MTVVOL1"
VOLUME_SUFFIX = ".mtvvol"

# Background in skull-stripped / phantom volumes is exactly zero; anything
# above this counts as foreground.
FOREGROUND_EPS = 1e-6


class VolumeError(ValueError):
    pass


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@dataclass
class Volume:
    """A normalized intensity grid plus voxel-spacing metadata."""

    data: np.ndarray                      # (C, H, W, D) float32 in [0, 1]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    name: str = "volume"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise VolumeError(f"expected (C, H, W, D) data, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise VolumeError(f"volume '{self.name}' contains non-finite values")
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise VolumeError(
                f"volume '{self.name}' not normalized to [0, 1]: range [{lo}, {hi}]")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def normalize_intensities(data: np.ndarray) -> np.ndarray:
    """Per-volume min-max normalization to [0, 1] (constant input maps to 0)."""
    data = np.asarray(data, dtype=np.float32)
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


@dataclass
class NestedPatch:
    """Concentric LR context crops (coarsest first) plus the HR center target."""

    lr_contexts: list[np.ndarray]         # each (C, e_L, e_L, e_L)
    hr_target: np.ndarray                 # (C, s*e_fin, s*e_fin, s*e_fin)
    center: tuple[int, int, int]          # voxel coordinate in the LR volume


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror out-of-range indices without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def trilinear_upsample(data: np.ndarray, s: int) -> np.ndarray:
    """Cell-centered s-fold trilinear upsampling of a (C, H, W, D) array.

    Output voxel h samples the input at (h + 0.5)/s - 0.5 per axis; the
    stencil reflects at the boundary, matching the reflect-padded crops
    used during tiled inference so that crop-then-upsample equals
    upsample-then-crop away from nothing (exactly, given a 1-voxel halo).
    """
    if s == 1:
        return np.asarray(data, dtype=np.float32).copy()
    out = np.asarray(data, dtype=np.float32)
    for axis in range(1, 4):
        n = out.shape[axis]
        x = (np.arange(n * s, dtype=np.float64) + 0.5) / s - 0.5
        i0 = np.floor(x).astype(np.int64)
        t = (x - i0).astype(np.float32)
        lo = np.take(out, _reflect_index(i0, n), axis=axis)
        hi = np.take(out, _reflect_index(i0 + 1, n), axis=axis)
        shape = [1, 1, 1, 1]
        shape[axis] = n * s
        t = t.reshape(shape)
        out = (1.0 - t) * lo + t * hi
    return out.astype(np.float32)


def block_mean_downsample(data: np.ndarray, s: int) -> np.ndarray:
    """Cell-centered downsampling: each LR voxel is the mean of its s^3 HR cell."""
    c, h, w, d = data.shape
    if h % s or w % s or d % s:
        raise VolumeError(f"spatial dims {(h, w, d)} not divisible by scale {s}")
    view = data.reshape(c, h // s, s, w // s, s, d // s, s)
    return view.mean(axis=(2, 4, 6), dtype=np.float64).astype(np.float32)


def degrade(hr: Volume, s: int, blur: bool = True) -> Volume:
    """Produce the LR counterpart of an HR volume.

    Optional isotropic Gaussian blur (sigma = s/2 voxels, truncated at 4
    sigma) followed by cell-centered block-mean downsampling.  Deterministic.
    """
    if s == 1 and not blur:
        return Volume(hr.data.copy(), hr.spacing, hr.name)
    data = hr.data
    if blur:
        data = np.stack([
            ndimage.gaussian_filter(data[ch].astype(np.float64), sigma=s / 2.0,
                                    truncate=4.0, mode="reflect")
            for ch in range(data.shape[0])
        ]).astype(np.float32)
    lr = block_mean_downsample(data, s) if s > 1 else data
    lr = np.clip(lr, 0.0, 1.0)
    spacing = tuple(sp * s for sp in hr.spacing)
    return Volume(lr, spacing, hr.name)


def foreground_mask(v: Volume, eps: float = FOREGROUND_EPS) -> np.ndarray:
    """Boolean (H, W, D) mask: max-over-channels intensity above `eps`."""
    return v.data.max(axis=0) > eps


# ---------------------------------------------------------------------------
# Cropping and patch sampling
# ---------------------------------------------------------------------------

def crop_centered(data: np.ndarray, center: tuple[int, int, int], extent: int,
                  pad: bool = False) -> np.ndarray:
    """Extract the (C, extent^3) cube [center - extent/2, center + extent/2).

    With `pad`, out-of-range voxels are filled by reflection; otherwise the
    crop must lie inside the array.
    """
    if extent % 2:
        raise VolumeError(f"context extent must be even, got {extent}")
    half = extent // 2
    starts = [c - half for c in center]
    dims = data.shape[1:]
    inside = all(0 <= st and st + extent <= n for st, n in zip(starts, dims))
    if inside:
        sl = tuple(slice(st, st + extent) for st in starts)
        return data[(slice(None),) + sl].copy()
    if not pad:
        raise VolumeError(
            f"crop {extent}^3 at center {center} exceeds volume {dims} (padding disabled)")
    idx = [_reflect_index(np.arange(st, st + extent), n) for st, n in zip(starts, dims)]
    return data[np.ix_(np.arange(data.shape[0]), *idx)].copy()


def sample_nested(lr: Volume, hr: Volume, cfg, rng: np.random.Generator,
                  pad: bool = False) -> NestedPatch:
    """Draw one training patch: concentric LR contexts plus the HR target.

    Centers are sampled uniformly over positions where the constraining
    context (outermost, or innermost when padding is enabled) fits in the
    LR volume.
    """
    extents = [lv.context_extent for lv in cfg.levels]
    s = cfg.scale
    constraint = extents[-1] if pad else extents[0]
    half = constraint // 2
    dims = lr.shape
    los = [half] * 3
    his = [n - half for n in dims]
    if any(lo >= hi for lo, hi in zip(los, his)):
        raise VolumeError(
            f"LR volume {dims} too small for context {constraint}^3 "
            f"{'(even with padding)' if pad else '(padding disabled)'}")
    center = tuple(int(rng.integers(lo, hi)) for lo, hi in zip(los, his))
    contexts = [crop_centered(lr.data, center, e, pad=pad) for e in extents]
    e_fin = extents[-1]
    hr_center = tuple(s * c for c in center)
    hr_target = crop_centered(hr.data, hr_center, s * e_fin, pad=False)
    return NestedPatch(lr_contexts=contexts, hr_target=hr_target, center=center)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def _ellipsoid_field(edge: int, center, semi_axes) -> np.ndarray:
    coords = [np.arange(edge, dtype=np.float64) + 0.5 for _ in range(3)]
    zz, yy, xx = np.meshgrid(*coords, indexing="ij")
    q = (((zz - center[0]) / semi_axes[0]) ** 2
         + ((yy - center[1]) / semi_axes[1]) ** 2
         + ((xx - center[2]) / semi_axes[2]) ** 2)
    return q


def ellipsoid_phantom(edge: int, rng: np.random.Generator) -> np.ndarray:
    """Brain-like phantom: one large ellipsoid with two nested inclusions."""
    vol = np.zeros((edge,) * 3, dtype=np.float32)
    jitter = rng.uniform(-0.02 * edge, 0.02 * edge, size=3)
    center = np.full(3, edge / 2.0) + jitter
    semi = rng.uniform(0.30 * edge, 0.40 * edge, size=3)
    vol[_ellipsoid_field(edge, center, semi) <= 1.0] = 0.7
    for value in (0.9, 0.4):
        sub_semi = semi * rng.uniform(0.25, 0.45)
        offset = rng.uniform(-0.25, 0.25, size=3) * semi
        vol[_ellipsoid_field(edge, center + offset, sub_semi) <= 1.0] = value
    return vol


def bandlimited_texture(edge: int, rng: np.random.Generator,
                        cutoff: float = 0.25) -> np.ndarray:
    """Noise texture with all spectral energy below `cutoff` x Nyquist."""
    noise = rng.standard_normal((edge,) * 3)
    spec = np.fft.rfftn(noise)
    freqs = [np.fft.fftfreq(edge), np.fft.fftfreq(edge), np.fft.rfftfreq(edge)]
    fz, fy, fx = np.meshgrid(*freqs, indexing="ij")
    radius = np.sqrt(fz ** 2 + fy ** 2 + fx ** 2)
    spec[radius > cutoff * 0.5] = 0.0         # 0.5 cycles/voxel is Nyquist
    field = np.fft.irfftn(spec, s=(edge,) * 3, axes=(0, 1, 2))
    return normalize_intensities(field)


def trabecular_pattern(edge: int, rng: np.random.Generator) -> np.ndarray:
    """Gyroid-like strut network with a smooth large-scale envelope."""
    cells = rng.uniform(3.0, 6.0)
    k = 2.0 * np.pi * cells / edge
    phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    ax = np.arange(edge, dtype=np.float64)
    zz, yy, xx = np.meshgrid(ax, ax, ax, indexing="ij")
    t = (np.sin(k * xx + phase[0]) * np.cos(k * yy + phase[1])
         + np.sin(k * yy + phase[1]) * np.cos(k * zz + phase[2])
         + np.sin(k * zz + phase[2]) * np.cos(k * xx + phase[0]))
    width = rng.uniform(0.35, 0.55)
    struts = np.exp(-(t / width) ** 2)
    k_env = 2.0 * np.pi * rng.uniform(0.8, 1.5) / edge
    envelope = 0.7 + 0.3 * np.sin(k_env * xx + rng.uniform(0, 2 * np.pi)) \
        * np.sin(k_env * yy + rng.uniform(0, 2 * np.pi))
    return normalize_intensities(struts * envelope)


GENERATORS = {
    "ellipsoid": ellipsoid_phantom,
    "bandlimited": bandlimited_texture,
    "trabecular": trabecular_pattern,
}


def make_synthetic_corpus(generator: str, count: int, edge: int, seed: int,
                          **params) -> list[Volume]:
    """Generate `count` deterministic HR phantom volumes.

    Each volume gets an independent rng stream derived from (seed, index),
    so regeneration with the same arguments is bit-identical.
    """
    if generator not in GENERATORS:
        raise VolumeError(
            f"unknown generator '{generator}' (known: {', '.join(sorted(GENERATORS))})")
    fn = GENERATORS[generator]
    volumes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        data = fn(edge, rng, **params)
        volumes.append(Volume(data[None], name=f"{generator}_{edge}_{seed}_{i:03d}"))
    return volumes


# ---------------------------------------------------------------------------
# Volume store
# ---------------------------------------------------------------------------

def volume_to_bytes(vol: Volume) -> bytes:
    c, h, w, d = vol.data.shape
    header = "\n".join([
        VOLUME_MAGIC,
        f"name {vol.name}",
        f"channels {c}",
        f"dims {h} {w} {d}",
        f"spacing {vol.spacing[0]!r} {vol.spacing[1]!r} {vol.spacing[2]!r}",
        "dtype float32-le",
        "end",
    ]) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(vol.data, dtype="<f4").tobytes()


def write_volume(vol: Volume, path) -> None:
    atomic_write_bytes(path, volume_to_bytes(vol))


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        payload = fh.read()
    try:
        header_end = payload.index(b"\nend\n") + 5
    except ValueError:
        raise VolumeError(f"{path}: missing header terminator") from None
    lines = payload[:header_end].decode("ascii").splitlines()
    if not lines or lines[0] != VOLUME_MAGIC:
        raise VolumeError(f"{path}: not a {VOLUME_MAGIC} file")
    fields: dict[str, str] = {}
    for line in lines[1:-1]:
        key, _, value = line.partition(" ")
        fields[key] = value
    name = fields.get("name", "volume")
    channels = int(fields["channels"])
    dims = tuple(int(x) for x in fields["dims"].split())
    spacing = tuple(float(x) for x in fields["spacing"].split())
    if fields.get("dtype") != "float32-le":
        raise VolumeError(f"{path}: unsupported dtype '{fields.get('dtype')}'")
    count = channels * dims[0] * dims[1] * dims[2]
    raw = np.frombuffer(payload, dtype="<f4", offset=header_end, count=count)
    data = raw.reshape((channels,) + dims).copy()
    return Volume(data, spacing, name)


def list_store(directory) -> list[str]:
    """Sorted volume file paths under a store directory."""
    if not os.path.isdir(directory):
        return []
    return sorted(
        os.path.join(directory, f) for f in os.listdir(directory)
        if f.endswith(VOLUME_SUFFIX))

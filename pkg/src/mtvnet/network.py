"""Full network assembly: per-level tokenization and deep feature extraction
with cross-level fusion, then token upsampling, long skip, and pixel-shuffle
reconstruction.  Also the versioned checkpoint format for parameter maps.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig, upsample_stages
from .dchat import LEAKY_SLOPE, DchatGroup
from .tokenizer import (CatInit, GeometryError, PatchEmbed,
                        ShallowFeatureExtractor, crop_center)
from .volumes import atomic_write_bytes

CKPT_MAGIC = "MTVCKPT1"


def pixel_shuffle_3d(x: torch.Tensor, s: int) -> torch.Tensor:
    """Rearrange (B, C*s^3, H, W, D) into (B, C, sH, sW, sD).

    out[c, s*h + a, s*w + b, s*d + e] = in[c*s^3 + a*s^2 + b*s + e, h, w, d]
    """
    b, cs3, h, w, d = x.shape
    if cs3 % s ** 3:
        raise GeometryError(f"channels {cs3} not divisible by s^3 = {s ** 3}")
    c = cs3 // s ** 3
    x = x.view(b, c, s, s, s, h, w, d)
    x = x.permute(0, 1, 5, 2, 6, 3, 7, 4)
    return x.reshape(b, c, h * s, w * s, d * s)


def pixel_unshuffle_3d(x: torch.Tensor, s: int) -> torch.Tensor:
    """Exact inverse of :func:`pixel_shuffle_3d`."""
    b, c, hs, ws, ds = x.shape
    if hs % s or ws % s or ds % s:
        raise GeometryError(f"spatial dims {(hs, ws, ds)} not divisible by {s}")
    h, w, d = hs // s, ws // s, ds // s
    x = x.view(b, c, h, s, w, s, d, s)
    x = x.permute(0, 1, 3, 5, 7, 2, 4, 6)
    return x.reshape(b, c * s ** 3, h, w, d)


def icnr_init_(conv: nn.Conv3d, s: int) -> None:
    """Replicate base filters across each pixel-shuffle sibling group so the
    freshly initialized conv + shuffle acts as nearest-neighbor upsampling
    (no checkerboard pattern)."""
    c_out = conv.weight.shape[0]
    if c_out % s ** 3:
        raise GeometryError(f"output channels {c_out} not divisible by s^3 = {s ** 3}")
    base = c_out // s ** 3
    with torch.no_grad():
        conv.weight.copy_(conv.weight[:base].repeat_interleave(s ** 3, dim=0))
        if conv.bias is not None:
            conv.bias.copy_(conv.bias[:base].repeat_interleave(s ** 3, dim=0))


class LevelModule(nn.Module):
    """SFE -> patch embed -> CAT init -> DCHAT group for one network level."""

    def __init__(self, cfg: ModelConfig, level_index: int, has_cross: bool,
                 cosine: bool = False):
        super().__init__()
        lv = cfg.levels[level_index]
        c = cfg.embed_channels
        self.context_extent = lv.context_extent
        self.sfe = ShallowFeatureExtractor(cfg.in_channels, c)
        self.patch_embed = PatchEmbed(c, lv.patch_size)
        if cfg.use_cat:
            self.cat_init = CatInit(c, cfg.cat_stride, cfg.cat_grid_edge(level_index))
        self.group = DchatGroup(
            c, cfg.skip_channels, cfg.heads, cfg.window_size, cfg.cat_size,
            lv.token_edge, cfg.mlp_ratio, lv.num_dchat_blocks,
            lv.svhat_layers_per_block, use_cat=cfg.use_cat,
            use_shift=cfg.use_cyclic_shift, has_cross=has_cross, cosine=cosine)
        self.use_cat = cfg.use_cat

    def forward(self, crop, prev_sfe=None, prev_ites=None, prev_cats=None):
        f = self.sfe(crop)
        if prev_sfe is not None:
            f = f + crop_center(prev_sfe, self.context_extent)
        tokens = self.patch_embed(f)
        cats = self.cat_init(tokens) if self.use_cat else None
        ites, cats = self.group(tokens, cats, prev_ites, prev_cats)
        return f, ites, cats


class MtvnetModel(nn.Module):
    """Multi-context volumetric SR network.

    `forward` consumes one LR context crop per active level (coarsest
    first, concentric) and returns the super-resolved center region at
    scale x s.  With use_multicontext off only the finest level exists and
    is consumed.
    """

    def __init__(self, cfg: ModelConfig, cosine: bool = False):
        super().__init__()
        self.cfg = cfg
        self.scale = cfg.scale
        first_active = 0 if cfg.use_multicontext else len(cfg.levels) - 1
        self.active_level_indices = list(range(first_active, len(cfg.levels)))
        self.levels = nn.ModuleList([
            LevelModule(cfg, idx, has_cross=cfg.use_multicontext and k > 0,
                        cosine=cosine)
            for k, idx in enumerate(self.active_level_indices)
        ])
        c = cfg.embed_channels
        fin = cfg.finest
        self.token_deconv = nn.ConvTranspose3d(c, c, fin.patch_size,
                                               stride=fin.patch_size)
        self.prerecon1 = nn.Conv3d(c, c, 3, padding=1)
        self.act = nn.LeakyReLU(LEAKY_SLOPE, inplace=False)
        self.prerecon2 = nn.Conv3d(c, c, 3, padding=1)
        half = c // 2
        self.halve = nn.Conv3d(c, half, 1)
        self.up_stages = nn.ModuleList()
        self.stage_factors = upsample_stages(cfg.scale)
        for r in self.stage_factors:
            conv = nn.Conv3d(half, half * r ** 3, 3, padding=1)
            icnr_init_(conv, r)
            self.up_stages.append(conv)
        self.final = nn.Conv3d(half, cfg.in_channels, 1)

    @property
    def context_extents(self) -> list[int]:
        """LR input cube edges expected by forward, coarsest first."""
        return [self.cfg.levels[i].context_extent for i in self.active_level_indices]

    def forward(self, contexts: list[torch.Tensor]) -> torch.Tensor:
        extents = self.context_extents
        if len(contexts) == len(self.cfg.levels) and len(extents) < len(contexts):
            contexts = contexts[-len(extents):]
        if len(contexts) != len(extents):
            raise GeometryError(
                f"expected {len(extents)} context crops, got {len(contexts)}")
        for crop, e in zip(contexts, extents):
            if crop.shape[2:] != (e, e, e):
                raise GeometryError(
                    f"context crop {tuple(crop.shape[2:])} does not match extent {e}")

        prev_sfe = prev_ites = prev_cats = None
        f = ites = None
        for level, crop in zip(self.levels, contexts):
            f, ites, cats = level(crop, prev_sfe, prev_ites, prev_cats)
            prev_sfe, prev_ites, prev_cats = f, ites, cats

        x = self.token_deconv(ites)
        x = self.prerecon2(self.act(self.prerecon1(x)))
        x = x + f                      # long skip from the (fused) finest SFE
        x = self.halve(x)
        for conv, r in zip(self.up_stages, self.stage_factors):
            x = pixel_shuffle_3d(conv(x), r)
        return self.final(x)


# ---------------------------------------------------------------------------
# Analytic parameter count (architecture drift guard)
# ---------------------------------------------------------------------------

def _mlp_params(dim: int, hidden: int) -> int:
    return dim * hidden + hidden + hidden * dim + dim


def _attention_params(dim: int) -> int:
    # qkv + output projection
    return 3 * dim * dim + 3 * dim + dim * dim + dim


def _cross_params(dim: int) -> int:
    # prev MLP + q + kv + proj + LN
    return (_mlp_params(dim, dim) + dim * dim + dim
            + 2 * dim * dim + 2 * dim + dim * dim + dim + 2 * dim)


def analytic_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`MtvnetModel` (cosine off)."""
    c = cfg.embed_channels
    hid = int(c * cfg.mlp_ratio)
    m = cfg.window_size
    rel = (2 * m - 1) ** 3 * cfg.heads
    streams = 2 if cfg.use_cat else 1

    def layer_params(has_cross: bool) -> int:
        n = 0
        if has_cross:
            n += _cross_params(c) * streams
        if cfg.use_cat:
            # pre-norm CAT attention: two LNs, MSA, MLP, two gamma vectors
            n += 2 * (2 * c) + _attention_params(c) + _mlp_params(c, hid) + 2 * c
        n += _attention_params(c) + rel      # joint windowed attention
        n += 2 * (2 * c) + _mlp_params(c, hid)
        return n

    first_active = 0 if cfg.use_multicontext else len(cfg.levels) - 1
    total = 0
    for k, idx in enumerate(range(first_active, len(cfg.levels))):
        lv = cfg.levels[idx]
        has_cross = cfg.use_multicontext and k > 0
        total += c * cfg.in_channels * 27 + c + c * c * 27 + c          # SFE
        total += c * c * lv.patch_size ** 3 + c                         # patch embed
        if cfg.use_cat:
            r = cfg.cat_stride
            total += c * c * r ** 3 + c + c * cfg.cat_grid_edge(idx) ** 3
        t_layers = lv.svhat_layers_per_block
        per_block = (layer_params(has_cross)
                     + (t_layers - 1) * layer_params(False)
                     + streams * t_layers * (cfg.skip_channels * c + cfg.skip_channels)
                     + streams * (c * (c + t_layers * cfg.skip_channels) + c))
        total += lv.num_dchat_blocks * per_block

    fin = cfg.finest
    half = c // 2
    total += c * c * fin.patch_size ** 3 + c                            # token deconv
    total += 2 * (c * c * 27 + c)                                       # pre-reconstruction
    total += half * c + half                                            # channel halving
    for r in upsample_stages(cfg.scale):
        total += (half * r ** 3) * half * 27 + half * r ** 3
    total += cfg.in_channels * half + cfg.in_channels                   # output projection
    return total


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def params_to_bytes(state: dict[str, torch.Tensor]) -> bytes:
    lines = [CKPT_MAGIC, f"count {len(state)}"]
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {dtype} for '{name}'")
        shape = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {dtype} {arr.ndim} {shape}".rstrip())
        blobs.append(np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes())
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs)


def save_params(model: nn.Module, path) -> None:
    """Write the named parameter/buffer map with a shape manifest."""
    atomic_write_bytes(path, params_to_bytes(model.state_dict()))


def load_params(path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        payload = fh.read()
    try:
        header_end = payload.index(b"\nend\n") + 5
    except ValueError:
        raise ValueError(f"{path}: missing checkpoint header terminator") from None
    lines = payload[:header_end].decode("ascii").splitlines()
    if lines[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a {CKPT_MAGIC} file")
    count = int(lines[1].split()[1])
    state: dict[str, torch.Tensor] = {}
    offset = header_end
    for line in lines[2:2 + count]:
        parts = line.split()
        name, dtype, ndim = parts[0], parts[1], int(parts[2])
        shape = tuple(int(x) for x in parts[3:3 + ndim])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(payload, dtype=_DTYPES[dtype], offset=offset, count=n)
        offset += arr.nbytes
        state[name] = torch.from_numpy(arr.reshape(shape).copy())
    return state

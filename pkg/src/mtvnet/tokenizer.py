"""Shallow features, patch/carrier tokenization, window geometry, shift masks.

Layout conventions (fixed so golden tests are bit-exact):
  * volumes and token grids are channels-first: (B, C, H, W, D)
  * window order is lexicographic over window coordinates (H, W, D)
  * token order within a window is lexicographic with depth fastest
"""

from __future__ import annotations

import torch
import torch.nn as nn


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Window partitioning and cyclic shifting
# ---------------------------------------------------------------------------

def window_partition(x: torch.Tensor, edge: int) -> torch.Tensor:
    """(B, C, G, G, G) -> (B, nW, edge^3, C) with lexicographic ordering."""
    b, c, gh, gw, gd = x.shape
    for g in (gh, gw, gd):
        if g % edge:
            raise GeometryError(f"grid edge {g} not divisible by window edge {edge}")
    nh, nw, nd = gh // edge, gw // edge, gd // edge
    x = x.view(b, c, nh, edge, nw, edge, nd, edge)
    x = x.permute(0, 2, 4, 6, 3, 5, 7, 1)
    return x.reshape(b, nh * nw * nd, edge ** 3, c)


def window_reverse(windows: torch.Tensor, edge: int, grid_edge: int) -> torch.Tensor:
    """Inverse of :func:`window_partition` for cubic grids."""
    b, n_windows, n_tokens, c = windows.shape
    per_edge = grid_edge // edge
    if per_edge ** 3 != n_windows or edge ** 3 != n_tokens:
        raise GeometryError(
            f"window tensor {tuple(windows.shape)} inconsistent with grid edge "
            f"{grid_edge}, window edge {edge}")
    x = windows.view(b, per_edge, per_edge, per_edge, edge, edge, edge, c)
    x = x.permute(0, 7, 1, 4, 2, 5, 3, 6)
    return x.reshape(b, c, grid_edge, grid_edge, grid_edge)


def cyclic_shift(x: torch.Tensor, shift: int) -> torch.Tensor:
    """Roll so that source voxel (shift, shift, shift) lands at the origin."""
    return torch.roll(x, shifts=(-shift, -shift, -shift), dims=(2, 3, 4))


def cyclic_unshift(x: torch.Tensor, shift: int) -> torch.Tensor:
    return torch.roll(x, shifts=(shift, shift, shift), dims=(2, 3, 4))


# ---------------------------------------------------------------------------
# Shift masks
# ---------------------------------------------------------------------------

def _axis_region(windows_per_edge: int, edge: int, cut: int, device=None) -> torch.Tensor:
    """(windows_per_edge, edge) region label per axis.

    Interior windows hold a single contiguous region (label 0).  The last
    window along the axis wraps after cyclic shifting: in-window coords
    below `cut` carry non-wrapped content (label 1), the rest wrapped
    content (label 2).
    """
    labels = torch.zeros(windows_per_edge, edge, dtype=torch.int64, device=device)
    j = torch.arange(edge, device=device)
    labels[-1] = torch.where(j < cut, 1, 2)
    return labels


def _grid_region_ids(grid_edge: int, window_edge: int, shift: int, device=None) -> torch.Tensor:
    """(nW, window_edge^3) encoded region-id triples, window/token order as
    in :func:`window_partition`."""
    per_edge = grid_edge // window_edge
    axis = _axis_region(per_edge, window_edge, window_edge - shift, device=device)
    # encode the (h, w, d) label triple in base 3
    wh, ww, wd = torch.meshgrid(torch.arange(per_edge, device=device),
                                torch.arange(per_edge, device=device),
                                torch.arange(per_edge, device=device), indexing="ij")
    th, tw, td = torch.meshgrid(torch.arange(window_edge, device=device),
                                torch.arange(window_edge, device=device),
                                torch.arange(window_edge, device=device), indexing="ij")
    ids = (axis[wh.reshape(-1, 1), th.reshape(1, -1)] * 9
           + axis[ww.reshape(-1, 1), tw.reshape(1, -1)] * 3
           + axis[wd.reshape(-1, 1), td.reshape(1, -1)])
    return ids


def build_shift_masks(grid_edge: int, window_size: int, cat_size: int,
                      shifted: bool, include_cats: bool = True,
                      device=None) -> torch.Tensor:
    """Per-window pair-admissibility over the joint ITE+CAT sequence.

    Returns a bool tensor (n_windows, N, N) with N = M^3 + c^3 (or M^3
    without CATs).  A pair is admissible iff both tokens carry the same
    region-id triple; unshifted geometry admits everything.  ITE regions
    live on the token grid (shift M//2), CAT regions on the carrier grid
    (shift c//2); co-shifting keeps the two cuts spatially aligned.
    """
    if grid_edge % window_size:
        raise GeometryError(f"grid edge {grid_edge} not divisible by M={window_size}")
    n_windows = (grid_edge // window_size) ** 3
    n = window_size ** 3 + (cat_size ** 3 if include_cats else 0)
    if not shifted:
        return torch.ones(n_windows, n, n, dtype=torch.bool, device=device)
    ids = _grid_region_ids(grid_edge, window_size, window_size // 2, device=device)
    if include_cats:
        stride = window_size // cat_size
        cat_grid_edge = grid_edge // stride
        cat_ids = _grid_region_ids(cat_grid_edge, cat_size, cat_size // 2, device=device)
        ids = torch.cat([ids, cat_ids], dim=1)
    return ids[:, :, None] == ids[:, None, :]


def masks_to_text(masks: torch.Tensor) -> str:
    """Render a mask set as 0/1 text matrices (one block per window), for
    golden-file comparisons."""
    lines = []
    for w in range(masks.shape[0]):
        lines.append(f"window {w}")
        for row in masks[w]:
            lines.append("".join("1" if bool(v) else "0" for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Feature extraction and token embedding
# ---------------------------------------------------------------------------

def crop_center(x: torch.Tensor, extent: int) -> torch.Tensor:
    """Central extent^3 crop of a (B, C, E, E, E) tensor."""
    b, c, eh, ew, ed = x.shape
    if extent > min(eh, ew, ed):
        raise GeometryError(f"crop extent {extent} exceeds input {(eh, ew, ed)}")
    if extent % 2 or eh % 2:
        raise GeometryError("crop and input extents must be even")
    lo = [(e - extent) // 2 for e in (eh, ew, ed)]
    return x[:, :, lo[0]:lo[0] + extent, lo[1]:lo[1] + extent, lo[2]:lo[2] + extent]


class ShallowFeatureExtractor(nn.Module):
    """Two unit-stride 3x3x3 convolutions expanding C_in to C_emb."""

    def __init__(self, in_channels: int, embed_channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, embed_channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2, inplace=False)
        self.conv2 = nn.Conv3d(embed_channels, embed_channels, 3, padding=1)

    def forward(self, x):
        return self.conv2(self.act(self.conv1(x)))


class PatchEmbed(nn.Module):
    """p^3 strided convolution turning features into image token embeddings."""

    def __init__(self, embed_channels: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv3d(embed_channels, embed_channels, patch_size,
                              stride=patch_size)

    def forward(self, f):
        if any(sz % self.patch_size for sz in f.shape[2:]):
            raise GeometryError(
                f"feature dims {tuple(f.shape[2:])} not divisible by patch size "
                f"{self.patch_size}")
        return self.proj(f)


class CatInit(nn.Module):
    """Carrier-token initialization: strided conv summary plus a learned
    absolute position embedding on the carrier grid."""

    def __init__(self, embed_channels: int, stride: int, grid_edge: int):
        super().__init__()
        self.stride = stride
        self.proj = nn.Conv3d(embed_channels, embed_channels, stride, stride=stride)
        self.pos_embed = nn.Parameter(torch.empty(1, embed_channels, grid_edge,
                                                  grid_edge, grid_edge))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, tokens):
        if any(sz % self.stride for sz in tokens.shape[2:]):
            raise GeometryError(
                f"token dims {tuple(tokens.shape[2:])} not divisible by CAT stride "
                f"{self.stride}")
        return self.proj(tokens) + self.pos_embed

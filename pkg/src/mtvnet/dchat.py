"""DCHAT blocks: densely connected SVHAT layers with dual-stream compressed
skips and pointwise gating, wrapped into residual groups."""

from __future__ import annotations

import torch
import torch.nn as nn

from .svhat import SvhatLayer
from .tokenizer import GeometryError

MAX_BLOCKS = 3
LEAKY_SLOPE = 0.2


class DchatBlock(nn.Module):
    """T SVHAT layers; each layer's output is compressed to C_skip per stream
    and collected; a 1x1x1 gate maps [input, skip_1, ..., skip_T] back to
    C_emb; the block input is added as a local residual.

    ITE and CAT streams use structurally identical but independent skip and
    gate parameters.  Shifted attention alternates with layer parity (even
    layers unshifted).  Cross-level fusion happens only in layer 0.
    """

    def __init__(self, dim: int, skip_dim: int, heads: int, window_size: int,
                 cat_size: int, grid_edge: int, mlp_ratio: float, n_layers: int,
                 use_cat: bool, use_shift: bool, has_cross: bool,
                 cosine: bool = False):
        super().__init__()
        self.use_cat = use_cat
        self.layers = nn.ModuleList([
            SvhatLayer(dim, heads, window_size, cat_size, grid_edge, mlp_ratio,
                       use_cat=use_cat, shifted=use_shift and (t % 2 == 1),
                       has_cross=has_cross and t == 0, cosine=cosine)
            for t in range(n_layers)
        ])
        self.act = nn.LeakyReLU(LEAKY_SLOPE, inplace=False)
        self.ite_skips = nn.ModuleList(
            [nn.Conv3d(dim, skip_dim, 1) for _ in range(n_layers)])
        self.ite_gate = nn.Conv3d(dim + n_layers * skip_dim, dim, 1)
        if use_cat:
            self.cat_skips = nn.ModuleList(
                [nn.Conv3d(dim, skip_dim, 1) for _ in range(n_layers)])
            self.cat_gate = nn.Conv3d(dim + n_layers * skip_dim, dim, 1)

    def forward(self, ites, cats, prev_ites=None, prev_cats=None):
        dense_i = [ites]
        dense_c = [cats] if self.use_cat else None
        x_i, x_c = ites, cats
        for t, layer in enumerate(self.layers):
            if t == 0:
                x_i, x_c = layer(x_i, x_c, prev_ites, prev_cats)
            else:
                x_i, x_c = layer(x_i, x_c)
            dense_i.append(self.act(self.ite_skips[t](x_i)))
            if self.use_cat:
                dense_c.append(self.act(self.cat_skips[t](x_c)))
        out_i = self.ite_gate(torch.cat(dense_i, dim=1)) + ites
        out_c = None
        if self.use_cat:
            out_c = self.cat_gate(torch.cat(dense_c, dim=1)) + cats
        return out_i, out_c


class DchatGroup(nn.Module):
    """Sequential DCHAT blocks with a group-level residual per stream.

    Each block already adds its own input back (local residual), so the
    chain telescopes: group output = input + sum of block deltas.  Blocks
    that contribute nothing leave the group an exact identity.
    """

    def __init__(self, dim: int, skip_dim: int, heads: int, window_size: int,
                 cat_size: int, grid_edge: int, mlp_ratio: float, n_blocks: int,
                 n_layers: int, use_cat: bool, use_shift: bool, has_cross: bool,
                 cosine: bool = False):
        super().__init__()
        if not 1 <= n_blocks <= MAX_BLOCKS:
            raise GeometryError(f"n_blocks must be in 1..{MAX_BLOCKS}, got {n_blocks}")
        self.use_cat = use_cat
        self.blocks = nn.ModuleList([
            DchatBlock(dim, skip_dim, heads, window_size, cat_size, grid_edge,
                       mlp_ratio, n_layers, use_cat=use_cat, use_shift=use_shift,
                       has_cross=has_cross, cosine=cosine)
            for _ in range(n_blocks)
        ])

    def forward(self, ites, cats, prev_ites=None, prev_cats=None):
        x_i, x_c = ites, cats
        for block in self.blocks:
            x_i, x_c = block(x_i, x_c, prev_ites, prev_cats)
        return x_i, x_c

"""SVHAT layer: carrier-token full attention, joint shifted-window attention
over the concatenated ITE+CAT sequence, and cross-level token fusion.

All attention cores are scaled dot-product softmax(QK^T / sqrt(d_head))V with
an optional cosine-similarity variant (learnable per-head temperature).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import (GeometryError, build_shift_masks, cyclic_shift,
                        cyclic_unshift, window_partition, window_reverse)

LN_EPS = 1e-5
GAMMA_INIT = 1e-2
# Full CAT attention is quadratic in the flattened CAT count.
DEFAULT_CAT_CAP = 32768


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # (..., N, C) -> (..., heads, N, C // heads)
    *lead, n, c = x.shape
    x = x.view(*lead, n, heads, c // heads)
    return x.transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    # (..., heads, N, d) -> (..., N, heads * d)
    x = x.transpose(-3, -2)
    *lead, n, h, d = x.shape
    return x.reshape(*lead, n, h * d)


def _attention(q, k, v, *, logit_scale=None, bias=None, mask=None):
    """Multi-head attention core over (..., heads, N, d) tensors.

    `logit_scale` switches to cosine attention; `bias` is added to the
    logits; `mask` (broadcastable bool) marks admissible pairs, inadmissible
    logits are -inf so their weights are exactly zero.
    """
    if logit_scale is None:
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    else:
        qn = F.normalize(q, dim=-1)
        kn = F.normalize(k, dim=-1)
        scale = torch.clamp(logit_scale, max=math.log(100.0)).exp()
        attn = (qn @ kn.transpose(-2, -1)) * scale[..., None, None]
    if bias is not None:
        attn = attn + bias
    if mask is not None:
        attn = attn.masked_fill(~mask, float("-inf"))
    attn = attn.softmax(dim=-1)
    return attn @ v


class RelativePositionBias3d(nn.Module):
    """Learned bias over relative (h, w, d) offsets inside an M^3 window."""

    def __init__(self, window_size: int, heads: int):
        super().__init__()
        m = window_size
        self.table = nn.Parameter(torch.empty((2 * m - 1) ** 3, heads))
        nn.init.trunc_normal_(self.table, std=0.02)
        coords = torch.stack(torch.meshgrid(
            torch.arange(m), torch.arange(m), torch.arange(m),
            indexing="ij")).flatten(1)                       # (3, M^3)
        rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
        index = (rel[0] * (2 * m - 1) + rel[1]) * (2 * m - 1) + rel[2]
        self.register_buffer("index", index, persistent=False)

    def forward(self) -> torch.Tensor:
        # (heads, M^3, M^3)
        return self.table[self.index.reshape(-1)].view(
            *self.index.shape, -1).permute(2, 0, 1)


class SelfAttention(nn.Module):
    """Plain multi-head self-attention over (B, N, C) sequences."""

    def __init__(self, dim: int, heads: int, cosine: bool = False):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.logit_scale = (nn.Parameter(torch.full((heads,), math.log(10.0)))
                            if cosine else None)

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        out = _attention(_split_heads(q, self.heads), _split_heads(k, self.heads),
                         _split_heads(v, self.heads), logit_scale=self.logit_scale)
        return self.proj(_merge_heads(out))


class CatAttention(nn.Module):
    """Pre-normalized residual full attention across all carrier tokens,
    with learnable per-channel residual scales."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float,
                 cosine: bool = False, cat_cap: int = DEFAULT_CAT_CAP):
        super().__init__()
        self.cat_cap = cat_cap
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = SelfAttention(dim, heads, cosine=cosine)
        self.gamma1 = nn.Parameter(torch.full((dim,), GAMMA_INIT))
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.gamma2 = nn.Parameter(torch.full((dim,), GAMMA_INIT))

    def forward(self, cats):
        # cats: (B, N, C), N = all CATs of the level
        if cats.shape[1] > self.cat_cap:
            raise GeometryError(
                f"{cats.shape[1]} CATs exceed the full-attention cap {self.cat_cap}")
        cats = cats + self.gamma1 * self.attn(self.norm1(cats))
        cats = cats + self.gamma2 * self.mlp(self.norm2(cats))
        return cats


class JointWindowAttention(nn.Module):
    """Multi-head attention over per-window [ITE, CAT] sequences.

    Relative position bias applies to ITE-ITE pairs only; the mask marks
    admissible pairs across the whole joint sequence.
    """

    def __init__(self, dim: int, heads: int, window_size: int, cat_size: int,
                 use_cat: bool, cosine: bool = False):
        super().__init__()
        self.heads = heads
        self.n_ites = window_size ** 3
        self.n_cats = cat_size ** 3 if use_cat else 0
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = RelativePositionBias3d(window_size, heads)
        self.logit_scale = (nn.Parameter(torch.full((heads,), math.log(10.0)))
                            if cosine else None)

    def forward(self, seq: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        # seq: (B, nW, N, C), mask: (nW, N, N) bool or None
        b, n_windows, n, c = seq.shape
        if n != self.n_ites + self.n_cats:
            raise GeometryError(
                f"joint sequence length {n} != {self.n_ites} ITEs + {self.n_cats} CATs")
        q, k, v = self.qkv(seq).chunk(3, dim=-1)
        bias = seq.new_zeros(self.heads, n, n)
        bias[:, :self.n_ites, :self.n_ites] = self.rel_bias()
        if mask is not None:
            if mask.shape != (n_windows, n, n):
                raise GeometryError(
                    f"mask shape {tuple(mask.shape)} does not match "
                    f"{(n_windows, n, n)}")
            mask = mask[None, :, None, :, :]
        out = _attention(_split_heads(q, self.heads), _split_heads(k, self.heads),
                         _split_heads(v, self.heads), logit_scale=self.logit_scale,
                         bias=bias, mask=mask)
        return self.proj(_merge_heads(out))


class CrossAttention(nn.Module):
    """LN(MCA(cur, MLP(prev))): queries from the current level, keys/values
    from the MLP-projected previous level."""

    def __init__(self, dim: int, heads: int, cosine: bool = False):
        super().__init__()
        self.heads = heads
        self.prev_mlp = Mlp(dim, dim)
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.logit_scale = (nn.Parameter(torch.full((heads,), math.log(10.0)))
                            if cosine else None)

    def forward(self, cur, prev):
        # cur: (..., Nq, C), prev: (..., Nk, C); leading dims must match
        prev = self.prev_mlp(prev)
        q = _split_heads(self.q(cur), self.heads)
        k, v = self.kv(prev).chunk(2, dim=-1)
        out = _attention(q, _split_heads(k, self.heads), _split_heads(v, self.heads),
                         logit_scale=self.logit_scale)
        return self.norm(self.proj(_merge_heads(out)))


def fuse_cross(bar_ites, bar_cats, cross_ites, cross_cats):
    """Residual fusion of cross-attended terms into both token streams."""
    if cross_ites is not None and cross_ites.shape != bar_ites.shape:
        raise GeometryError(
            f"cross ITE shape {tuple(cross_ites.shape)} != {tuple(bar_ites.shape)}")
    ites = bar_ites if cross_ites is None else bar_ites + cross_ites
    if bar_cats is None:
        return ites, None
    if cross_cats is not None and cross_cats.shape != bar_cats.shape:
        raise GeometryError(
            f"cross CAT shape {tuple(cross_cats.shape)} != {tuple(bar_cats.shape)}")
    cats = bar_cats if cross_cats is None else bar_cats + cross_cats
    return ites, cats


def _grid_to_seq(x: torch.Tensor) -> torch.Tensor:
    # (B, C, G, G, G) -> (B, G^3, C)
    return x.flatten(2).transpose(1, 2)


def _seq_to_grid(x: torch.Tensor, edge: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.transpose(1, 2).reshape(b, c, edge, edge, edge)


class SvhatLayer(nn.Module):
    """One transformer layer over an (ITE grid, CAT grid) pair.

    Order: optional cross-level fusion (first layer of a block only), then
    full CAT attention, then post-normalized joint windowed attention on the
    concatenated per-window sequence.  Shifted layers cyclic-shift both
    grids before partitioning and mask non-adjacent pairs.
    """

    def __init__(self, dim: int, heads: int, window_size: int, cat_size: int,
                 grid_edge: int, mlp_ratio: float, use_cat: bool,
                 shifted: bool, has_cross: bool, cosine: bool = False):
        super().__init__()
        if grid_edge % window_size:
            raise GeometryError(
                f"token grid edge {grid_edge} not divisible by window size {window_size}")
        self.window_size = window_size
        self.cat_size = cat_size
        self.grid_edge = grid_edge
        self.cat_stride = window_size // cat_size
        self.use_cat = use_cat
        self.shifted = shifted
        self.has_cross = has_cross

        if has_cross:
            self.cross_ites = CrossAttention(dim, heads, cosine=cosine)
            if use_cat:
                self.cross_cats = CrossAttention(dim, heads, cosine=cosine)
        if use_cat:
            self.cat_attn = CatAttention(dim, heads, mlp_ratio, cosine=cosine)
        self.joint_attn = JointWindowAttention(dim, heads, window_size, cat_size,
                                               use_cat=use_cat, cosine=cosine)
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        mask = (build_shift_masks(grid_edge, window_size, cat_size,
                                  shifted=True, include_cats=use_cat)
                if shifted else None)
        self.register_buffer("attn_mask", mask, persistent=False)

    def forward(self, ites: torch.Tensor, cats: torch.Tensor | None,
                prev_ites: torch.Tensor | None = None,
                prev_cats: torch.Tensor | None = None):
        if self.has_cross:
            if prev_ites is None or (self.use_cat and prev_cats is None):
                raise GeometryError("cross-level tokens required but not given")
            ites, cats = self._cross_fuse(ites, cats, prev_ites, prev_cats)
        elif prev_ites is not None or prev_cats is not None:
            raise GeometryError("cross-level tokens given to a non-cross layer")

        if self.use_cat:
            cats = _seq_to_grid(self.cat_attn(_grid_to_seq(cats)), cats.shape[2])

        return self._joint(ites, cats)

    def _cross_fuse(self, ites, cats, prev_ites, prev_cats):
        if prev_ites.shape[2:] != ites.shape[2:]:
            raise GeometryError(
                f"cross-level window correspondence needs equal token grids, got "
                f"{tuple(prev_ites.shape[2:])} vs {tuple(ites.shape[2:])}")
        m = self.window_size
        cur_w = window_partition(ites, m)
        prev_w = window_partition(prev_ites, m)
        cross_i = self.cross_ites(cur_w, prev_w)
        cross_i = window_reverse(cross_i, m, self.grid_edge)
        cross_c = None
        if self.use_cat:
            cross_c = self.cross_cats(_grid_to_seq(cats), _grid_to_seq(prev_cats))
            cross_c = _seq_to_grid(cross_c, cats.shape[2])
        return fuse_cross(ites, cats, cross_i, cross_c)

    def _joint(self, ites, cats):
        m, c_edge = self.window_size, self.cat_size
        if self.shifted:
            ites = cyclic_shift(ites, m // 2)
            if cats is not None:
                cats = cyclic_shift(cats, c_edge // 2)
        ite_w = window_partition(ites, m)
        parts = [ite_w]
        if cats is not None:
            parts.append(window_partition(cats, c_edge))
        seq = torch.cat(parts, dim=2)

        seq = seq + self.norm1(self.joint_attn(seq, self.attn_mask))
        seq = seq + self.norm2(self.mlp(seq))

        n_ites = m ** 3
        ites = window_reverse(seq[:, :, :n_ites], m, self.grid_edge)
        if cats is not None:
            cat_grid_edge = self.grid_edge // self.cat_stride
            cats = window_reverse(seq[:, :, n_ites:], c_edge, cat_grid_edge)
        if self.shifted:
            ites = cyclic_unshift(ites, m // 2)
            if cats is not None:
                cats = cyclic_unshift(cats, c_edge // 2)
        return ites, cats

"""Deformable similarity attention.

A feature map is cut into a g x g grid of patches. Patch descriptors
(patch means) are compared at every pyramid level, the per-level
similarity matrices are multiplied together, and every patch picks its
most similar other patch. The matched map is aligned with a deformable
convolution and fused back into the input through cross-attention and an
MLP.

Patch indices are row-major over the grid: patch ``i`` covers grid row
``i // g`` and column ``i % g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import ShapeError
from .layers import Conv2d, Mlp, MlpParams, bilinear_resize, softmax_lastdim
from .neuron import is_relaxed

TAPS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


@dataclass
class PatchMatch:
    indices: torch.Tensor  # (B, N) long
    one_hot: torch.Tensor  # (B, N, N) selection weights, row i picks a source patch


def patch_descriptors(x: torch.Tensor, g: int, cosine: bool = False) -> torch.Tensor:
    """(B, C, H, W) -> (B, g*g, C) patch means."""
    b, c, h, w = x.shape
    if h % g or w % g:
        raise ShapeError(f"{h}x{w} map does not split into a {g}x{g} grid")
    e = x.reshape(b, c, g, h // g, g, w // g).mean(dim=(3, 5))
    e = e.reshape(b, c, g * g).transpose(1, 2)
    if cosine:
        e = F.normalize(e, dim=-1)
    return e


def _mask_diag(s: torch.Tensor, value: float) -> torch.Tensor:
    n = s.shape[-1]
    eye = torch.eye(n, dtype=torch.bool, device=s.device)
    return s.masked_fill(eye, value)


def level_similarity(x: torch.Tensor, g: int, cosine: bool = False) -> torch.Tensor:
    """Row-normalised patch similarity with the diagonal masked out."""
    e = patch_descriptors(x, g, cosine)
    s = e @ e.transpose(1, 2)
    return softmax_lastdim(_mask_diag(s, float("-inf")))


def pyramid_similarity(
    x: torch.Tensor,
    levels: tuple[float, ...] = (1.0, 0.5),
    g: int = 4,
    cosine: bool = False,
) -> torch.Tensor:
    """Fuse per-level similarity matrices by matrix product; rows sum to one."""
    if g * g < 2:
        raise ValueError("patch grid needs at least two patches")
    fused = None
    for scale in levels:
        xl = x if scale == 1.0 else bilinear_resize(x, scale)
        if min(xl.shape[-2:]) < g:
            raise ShapeError(f"grid {g} exceeds the {tuple(xl.shape[-2:])} map at scale {scale}")
        s = level_similarity(xl, g, cosine)
        fused = s if fused is None else fused @ s
    if len(levels) > 1:
        # the eps floor keeps a row well defined when both levels peak on the diagonal
        fused = _mask_diag(fused + torch.finfo(fused.dtype).eps, 0.0)
        fused = fused / fused.sum(dim=-1, keepdim=True)
    return fused


def gumbel_select(
    s: torch.Tensor,
    temperature: float = 1.0,
    training: bool = False,
    generator: torch.Generator | None = None,
    noise: bool = True,
) -> PatchMatch:
    """Pick, for every row, one column other than the diagonal.

    Training draws Gumbel noise and returns a straight-through one-hot (hard
    forward, soft backward); eval returns the plain argmax. Under
    ``neuron.relaxed()`` the soft, noise-free weights are returned as is.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    tiny = torch.finfo(s.dtype).tiny
    logits = _mask_diag(torch.log(s.clamp_min(tiny)), float("-inf"))
    if not s.is_meta and torch.isinf(logits).all(dim=-1).any():
        raise ValueError("similarity row has no admissible entry")
    if is_relaxed():
        y = softmax_lastdim(logits / temperature)
        return PatchMatch(y.argmax(-1), y)
    if not training:
        idx = logits.argmax(-1)
        return PatchMatch(idx, F.one_hot(idx, s.shape[-1]).to(s.dtype))
    if noise:
        u = torch.rand(logits.shape, generator=generator, dtype=s.dtype, device=s.device)
        logits = logits - torch.log(-torch.log(u.clamp_min(tiny)))
    y = softmax_lastdim(logits / temperature)
    idx = y.argmax(-1)
    hard = F.one_hot(idx, s.shape[-1]).to(s.dtype)
    return PatchMatch(idx, hard - y.detach() + y)


def to_patches(x: torch.Tensor, g: int) -> torch.Tensor:
    b, c, h, w = x.shape
    ph, pw = h // g, w // g
    return x.reshape(b, c, g, ph, g, pw).permute(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * ph * pw)


def from_patches(p: torch.Tensor, g: int, shape: torch.Size) -> torch.Tensor:
    b, c, h, w = shape
    ph, pw = h // g, w // g
    return p.reshape(b, g, g, c, ph, pw).permute(0, 3, 1, 4, 2, 5).reshape(b, c, h, w)


def assemble_matched(x: torch.Tensor, one_hot: torch.Tensor, g: int) -> torch.Tensor:
    """Slot i of the result holds the patch that row i of ``one_hot`` selects."""
    return from_patches(one_hot @ to_patches(x, g), g, x.shape)


def bilinear_sample(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, H, W) at pixel coordinates (B, K, H', W'); zero outside the map.

    Returns (B, C, K, H', W').
    """
    b, c, h, w = x.shape
    k = py.shape[1]
    y0 = torch.floor(py.detach())
    x0 = torch.floor(px.detach())
    wy1 = py - y0
    wx1 = px - x0
    flat = x.reshape(b, c, h * w)
    out = 0
    for yy, wy in ((y0, 1 - wy1), (y0 + 1, wy1)):
        for xx, wx in ((x0, 1 - wx1), (x0 + 1, wx1)):
            valid = (yy >= 0) & (yy <= h - 1) & (xx >= 0) & (xx <= w - 1)
            idx = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)).long()
            vals = torch.gather(flat, 2, idx.reshape(b, 1, -1).expand(b, c, -1))
            out = out + vals.reshape(b, c, k, *py.shape[2:]) * (wy * wx * valid).unsqueeze(1)
    return out


def deform_conv(
    x: torch.Tensor,
    offsets: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """3x3 deformable convolution, stride 1, zero outside the map.

    ``offsets`` is (B, 18, H, W) holding (dy, dx) per tap in row-major tap
    order. ``weight`` is (C_out, C_in, 3, 3) or depthwise (C, 1, 3, 3).
    """
    b, c, h, w = x.shape
    if offsets.shape != (b, 2 * len(TAPS), h, w):
        raise ShapeError(f"offsets {tuple(offsets.shape)} do not match map {tuple(x.shape)}")
    gy = torch.arange(h, dtype=x.dtype, device=x.device).view(1, 1, h, 1)
    gx = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, 1, w)
    ky = torch.tensor([t[0] for t in TAPS], dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
    kx = torch.tensor([t[1] for t in TAPS], dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
    py = gy + ky + offsets[:, 0::2]
    px = gx + kx + offsets[:, 1::2]
    cols = bilinear_sample(x, py, px)  # (B, C, 9, H, W)
    if weight.shape[1] == 1 and weight.shape[0] == c and c > 1:
        out = torch.einsum("bckhw,ck->bchw", cols, weight.reshape(c, 9))
    else:
        out = torch.einsum("bckhw,ock->bohw", cols, weight.reshape(weight.shape[0], c, 9))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class DeformAlign(nn.Module):
    """Offsets predicted from (F, matched F) steer a 3x3 deformable conv over the matched map."""

    def __init__(self, channels: int, depthwise: bool = True, over: str = "matched"):
        super().__init__()
        if over not in ("matched", "input"):
            raise ValueError(f"unknown dconv source {over!r}")
        self.over = over
        self.offset = Conv2d(2 * channels, 2 * len(TAPS), 3)
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)
        ref = nn.Conv2d(channels, channels, 3, groups=channels if depthwise else 1)
        self.weight = nn.Parameter(ref.weight.detach().clone())
        self.bias = nn.Parameter(ref.bias.detach().clone())

    def forward(self, matched: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        offsets = self.offset(torch.cat([x, matched], dim=1))
        src = matched if self.over == "matched" else x
        return deform_conv(src, offsets, self.weight, self.bias)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the token axis."""
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    return softmax_lastdim(logits) @ v


def to_windows(x: torch.Tensor, win: int) -> tuple[torch.Tensor, torch.Tensor, tuple]:
    """(B, C, H, W) -> tokens (B*nW, L, C) and a validity mask for padded tokens."""
    b, c, h, w = x.shape
    if h <= win and w <= win:
        tokens = x.flatten(2).transpose(1, 2)
        return tokens, torch.ones(tokens.shape[:2], dtype=torch.bool, device=x.device), (b, c, h, w, 1, 1, h, w)
    hp, wp = -(-h // win) * win, -(-w // win) * win
    xp = F.pad(x, (0, wp - w, 0, hp - h))
    valid = F.pad(torch.ones(1, 1, h, w, device=x.device), (0, wp - w, 0, hp - h)).bool()
    nh, nw = hp // win, wp // win

    def split(t):
        bb, cc = t.shape[:2]
        t = t.reshape(bb, cc, nh, win, nw, win).permute(0, 2, 4, 3, 5, 1)
        return t.reshape(bb * nh * nw, win * win, cc)

    mask = split(valid.to(x.dtype)).squeeze(-1).bool().repeat(b, 1)
    return split(xp), mask, (b, c, h, w, nh, nw, win, win)


def from_windows(tokens: torch.Tensor, meta: tuple) -> torch.Tensor:
    b, c, h, w, nh, nw, wh, ww = meta
    c = tokens.shape[-1]
    t = tokens.reshape(b, nh, nw, wh, ww, c).permute(0, 5, 1, 3, 2, 4)
    return t.reshape(b, c, nh * wh, nw * ww)[:, :, :h, :w]


class CrossAttentionFuse(nn.Module):
    """Queries from the aligned map, keys/values from the matched map, MLP on the residual sum."""

    def __init__(self, channels: int, embed_dim: int, mlp_hidden: int, window: int = 16):
        super().__init__()
        self.window = window
        self.q = nn.Linear(channels, embed_dim)
        self.k = nn.Linear(channels, embed_dim)
        self.v = nn.Linear(channels, embed_dim)
        self.proj = nn.Linear(embed_dim, channels)
        self.mlp = Mlp(MlpParams(channels, mlp_hidden, channels))

    def forward(self, x: torch.Tensor, aligned: torch.Tensor, matched: torch.Tensor) -> torch.Tensor:
        if not (x.shape == aligned.shape == matched.shape):
            raise ShapeError("cross-attention inputs must share one shape")
        tq, mask, meta = to_windows(aligned, self.window)
        tk, _, _ = to_windows(matched, self.window)
        tx, _, _ = to_windows(x, self.window)
        v_bar = self.proj(attention(self.q(tq), self.k(tk), self.v(tk), mask))
        return from_windows(self.mlp(tx + v_bar), meta)


class DSA(nn.Module):
    def __init__(
        self,
        channels: int,
        embed_dim: int,
        mlp_hidden: int,
        grid: int = 4,
        levels: tuple[float, ...] = (1.0, 0.5),
        temperature: float = 1.0,
        cosine: bool = False,
        use_dconv: bool = True,
        dconv_depthwise: bool = True,
        dconv_over: str = "matched",
        window: int = 16,
    ):
        super().__init__()
        self.grid = grid
        self.levels = tuple(levels)
        self.temperature = temperature
        self.cosine = cosine
        self.align = DeformAlign(channels, dconv_depthwise, dconv_over) if use_dconv else None
        self.fuse = CrossAttentionFuse(channels, embed_dim, mlp_hidden, window)
        self.generator: torch.Generator | None = None
        self.last_indices: torch.Tensor | None = None
        self.last_similarity: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        m = self.grid * int(round(1 / min(self.levels)))
        hp, wp = max(-(-h // m) * m, m), max(-(-w // m) * m, m)
        xp = F.pad(x, (0, wp - w, 0, hp - h), mode="replicate") if (hp, wp) != (h, w) else x
        s = pyramid_similarity(xp, self.levels, self.grid, self.cosine)
        match = gumbel_select(s, self.temperature, self.training, self.generator)
        self.last_indices = match.indices.detach()
        self.last_similarity = s.detach()
        matched = assemble_matched(xp, match.one_hot, self.grid)
        aligned = self.align(matched, xp) if self.align is not None else matched
        out = self.fuse(xp, aligned, matched)
        return out[:, :, :h, :w]

"""Shared differentiable layers: rearrangement, resizing, gating, MLP."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import ShapeError, conv2d


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """(B, C*r*r, H, W) -> (B, C, rH, rW) with out[b,c,rh+i,rw+j] = x[b, c*r*r + i*r + j, h, w]."""
    b, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    x = x.reshape(b, c // (r * r), r, r, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(b, c // (r * r), h * r, w * r)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: {h}x{w} not divisible by {r}")
    x = x.reshape(b, c, h // r, r, w // r, r)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h // r, w // r)


def bilinear_resize(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Half-pixel-centred bilinear resampling (align_corners=False)."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = x.shape[-2:]
    oh, ow = int(round(h * scale)), int(round(w * scale))
    if oh < 1 or ow < 1:
        raise ShapeError(f"resize of {h}x{w} by {scale} is degenerate")
    if (oh, ow) == (h, w):
        return x
    return F.interpolate(x, size=(oh, ow), mode="bilinear", align_corners=False)


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    z = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def global_avg_pool(x: torch.Tensor, dims: tuple[int, ...], keepdim: bool = False) -> torch.Tensor:
    if not dims or any(x.shape[d] == 0 for d in dims):
        raise ShapeError("empty reduction axis")
    return x.mean(dim=dims, keepdim=keepdim)


@dataclass(frozen=True)
class MlpParams:
    in_dim: int
    hidden_dim: int
    out_dim: int

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ValueError("hidden_dim must be positive")


class Mlp(nn.Module):
    """Two linear layers with GELU in between, applied on the last axis."""

    def __init__(self, p: MlpParams):
        super().__init__()
        self.fc1 = nn.Linear(p.in_dim, p.hidden_dim)
        self.fc2 = nn.Linear(p.hidden_dim, p.out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def mlp(x: torch.Tensor, w1, b1, w2, b2) -> torch.Tensor:
    return F.linear(F.gelu(F.linear(x, w1, b1)), w2, b2)


class Conv2d(nn.Conv2d):
    """``nn.Conv2d`` with "same" reflect padding that survives tiny maps."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, bias: bool = True, groups: int = 1,
                 padding_mode: str = "reflect"):
        super().__init__(in_ch, out_ch, kernel_size, padding=0, bias=bias, groups=groups)
        self.pad_mode = padding_mode

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, pad=self.kernel_size[0] // 2,
                      padding_mode=self.pad_mode, groups=self.groups)


def per_step(fn, x: torch.Tensor) -> torch.Tensor:
    """Apply a 4-D map to every time step of a (T, B, C, H, W) sequence."""
    t, b = x.shape[:2]
    y = fn(x.reshape(t * b, *x.shape[2:]))
    return y.reshape(t, b, *y.shape[1:])

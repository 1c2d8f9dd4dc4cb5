"""Spiking blocks: SCB, HDA, the separable attention baselines, FB, SAB and SAG.

All blocks take and return (T, B, C, H, W) sequences except the fusion
block, which collapses time and returns (B, C, H, W).
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .layers import Conv2d, per_step
from .neuron import LIF, LifParams, TdBN


class SCB(nn.Module):
    """LIF -> 3x3 conv -> tdBN, or conv -> tdBN -> LIF with ``order="conv_first"``."""

    def __init__(self, channels: int, lif: LifParams | None = None, alpha: float = 1.0, order: str = "lif_first"):
        super().__init__()
        if order not in ("lif_first", "conv_first"):
            raise ValueError(f"unknown SCB order {order!r}")
        lif = lif or LifParams()
        self.order = order
        self.lif = LIF(lif)
        self.conv = Conv2d(channels, channels, 3)
        self.bn = TdBN(channels, alpha, lif.v_threshold)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.order == "lif_first":
            return self.bn(per_step(self.conv, self.lif(x)))
        return self.lif(self.bn(per_step(self.conv, x)))


class HDA(nn.Module):
    """Joint temporal-channel gate from a bottleneck over the flattened T*C descriptor.

    The descriptor of each sample is the spatial mean of ``u`` per (t, c).
    A model built for T steps also runs with fewer: the descriptor is padded
    by repeating its last step (inputs are replicated over time) and only the
    first gates are used.
    """

    def __init__(self, time_steps: int, channels: int, reduction: int = 4):
        super().__init__()
        n = time_steps * channels
        if n // reduction < 1:
            raise ValueError("T*C/reduction must be at least 1")
        self.time_steps = time_steps
        self.channels = channels
        self.fc1 = nn.Linear(n, n // reduction)
        self.fc2 = nn.Linear(n // reduction, n)

    def gate(self, u: torch.Tensor) -> torch.Tensor:
        t, b, c = u.shape[:3]
        if t > self.time_steps:
            raise ValueError(f"HDA built for {self.time_steps} steps, got {t}")
        d = u.mean(dim=(3, 4))  # (T, B, C)
        if t < self.time_steps:
            d = torch.cat([d, d[-1:].expand(self.time_steps - t, b, c)])
        z = d.permute(1, 0, 2).reshape(b, -1)
        g = torch.sigmoid(self.fc2(F.gelu(self.fc1(z))))
        return g.reshape(b, self.time_steps, c).permute(1, 0, 2)[:t]

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        return u * self.gate(u)[..., None, None]


class TemporalAttention(nn.Module):
    """Per-step scalar gate: mean over (C, H, W), 1-D conv across time, sigmoid."""

    def __init__(self, kernel: int = 3):
        super().__init__()
        self.conv = nn.Conv1d(1, 1, kernel, padding=kernel // 2)

    def logits(self, y: torch.Tensor) -> torch.Tensor:
        d = y.mean(dim=(2, 3, 4))  # (T, B)
        return self.conv(d.t().unsqueeze(1)).squeeze(1).t()

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return y * torch.sigmoid(self.logits(y))[:, :, None, None, None]


class ChannelAttention(nn.Module):
    """Squeeze-excitation over channels with descriptors pooled over (T, H, W)."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        d = y.mean(dim=(0, 3, 4))  # (B, C)
        g = torch.sigmoid(self.fc2(F.relu(self.fc1(d))))
        return y * g[None, :, :, None, None]


class SeparableTCA(nn.Module):
    """Temporal attention followed by channel attention (the separable baseline)."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.ta = TemporalAttention()
        self.ca = ChannelAttention(channels, reduction)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.ca(self.ta(y))


class SpatialAttention(nn.Module):
    """Per-step spatial gate from the channel-mean map through a 7x7 conv."""

    def __init__(self, kernel: int = 7):
        super().__init__()
        self.conv = Conv2d(1, 1, kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.sigmoid(self.conv(x.mean(dim=1, keepdim=True)))


class FusionBlock(nn.Module):
    """Attention-weighted collapse of a spike sequence into one continuous map.

    Y1 = sigmoid(TA(y)) * y, Y2 = sigmoid(SA(y)) * (1 - Y1); the output is the
    time mean of Y1 + Y2. TA gives one scalar per step, SA one H x W map
    computed from the channel-and-time mean.
    """

    def __init__(self, ta_kernel: int = 3, sa_kernel: int = 7):
        super().__init__()
        self.ta = TemporalAttention(ta_kernel)
        self.sa = Conv2d(1, 1, sa_kernel)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.shape[0] < 1:
            raise ValueError("empty time axis")
        y1 = torch.sigmoid(self.ta.logits(y))[:, :, None, None, None] * y
        sa = self.sa(y.mean(dim=(0, 2)).unsqueeze(1))  # (B, 1, H, W)
        y2 = torch.sigmoid(sa).unsqueeze(0) * (1 - y1)
        return (y1 + y2).mean(dim=0)


class SAB(nn.Module):
    """x + spatial(tc(SCB(SCB(x)) + tdBN(conv(x)))), spatial applied per step."""

    def __init__(self, channels: int, tc: nn.Module | None, spatial: nn.Module | None,
                 lif: LifParams | None = None, alpha: float = 1.0, scb_order: str = "lif_first"):
        super().__init__()
        lif = lif or LifParams()
        self.scb1 = SCB(channels, lif, alpha, scb_order)
        self.scb2 = SCB(channels, lif, alpha, scb_order)
        self.conv = Conv2d(channels, channels, 3)
        self.bn = TdBN(channels, alpha, lif.v_threshold)
        self.tc = tc if tc is not None else nn.Identity()
        self.spatial = spatial if spatial is not None else nn.Identity()

    def branches(self, x: torch.Tensor) -> torch.Tensor:
        return self.scb2(self.scb1(x)) + self.bn(per_step(self.conv, x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.tc(self.branches(x))
        return x + per_step(self.spatial, z)


class SAG(nn.Module):
    """x + SCB(SAB_n(...SAB_1(x)))."""

    def __init__(self, sabs: list[SAB], channels: int, lif: LifParams | None = None, alpha: float = 1.0,
                 scb_order: str = "lif_first"):
        super().__init__()
        self.sabs = nn.ModuleList(sabs)
        self.scb = SCB(channels, lif, alpha, scb_order)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x
        for sab in self.sabs:
            y = sab(y)
        return x + self.scb(y)

"""End-to-end network, configuration presets, and complexity accounting."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.utils.flop_counter import FlopCounterMode

from .autodiff import ShapeError
from .blocks import SAB, SAG, HDA, FusionBlock, SeparableTCA, SpatialAttention
from .dsa import DSA
from .layers import Conv2d, pixel_shuffle
from .neuron import LIF, LifParams

# (channels, cross-attention embed dim, MLP hidden width)
WIDTHS = {"s": (40, 24, 72), "m": (56, 24, 72), "full": (64, 32, 100)}


@dataclass
class ModelConfig:
    variant: str = "full"
    channels: int = 64
    ca_embed: int = 32
    mlp_hidden: int = 100
    num_sag: int = 4
    num_sab: int = 2
    time_steps: int = 4
    scale: int = 4
    # "hda", "separable" (TA + CA) or "none"
    temporal_channel: str = "hda"
    # "dsa", "sa" or "none"
    spatial: str = "dsa"
    hda_reduction: int = 32
    ca_reduction: int = 4
    scb_order: str = "lif_first"
    dsa_grid: int = 4
    pyramid_levels: tuple[float, ...] = (1.0, 0.5)
    use_dconv: bool = True
    dconv_depthwise: bool = True
    dconv_over: str = "matched"
    similarity: str = "dot"
    gumbel_tau: float = 1.0
    attn_window: int = 16
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_width: float = 2.0
    tdbn_alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.pyramid_levels = tuple(float(s) for s in self.pyramid_levels)
        if min(self.num_sag, self.num_sab, self.time_steps) < 1:
            raise ValueError("num_sag, num_sab and time_steps must be at least 1")
        if self.temporal_channel not in ("hda", "separable", "none"):
            raise ValueError(f"unknown temporal-channel attention {self.temporal_channel!r}")
        if self.spatial not in ("dsa", "sa", "none"):
            raise ValueError(f"unknown spatial attention {self.spatial!r}")
        if self.similarity not in ("dot", "cosine"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        preset = WIDTHS.get(self.variant)
        if preset is not None and (self.channels, self.ca_embed, self.mlp_hidden) != preset:
            raise ValueError(f"variant {self.variant!r} fixes widths to {preset}")

    @property
    def lif(self) -> LifParams:
        return LifParams(self.tau, self.v_threshold, self.v_reset, self.surrogate_width)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def preset(name: str, **overrides) -> ModelConfig:
    """Named configurations: s, m, full and the four ablation variants."""
    name = name.lower()
    if name in WIDTHS:
        c, d, h = WIDTHS[name]
        base = dict(variant=name, channels=c, ca_embed=d, mlp_hidden=h)
    elif name == "spikesr":
        base = dict(variant="full")
    elif name == "variant_b":
        base = dict(variant="variant_b", temporal_channel="separable")
    elif name == "variant_a":
        base = dict(variant="variant_a", spatial="sa", num_sag=10, num_sab=5, channels=128)
    elif name == "baseline":
        base = dict(variant="baseline", temporal_channel="separable", spatial="sa",
                    num_sag=8, num_sab=4, channels=256)
    else:
        raise ValueError(f"unknown variant {name!r}")
    base.update(overrides)
    if base.get("variant") in WIDTHS and any(k in overrides for k in ("channels", "ca_embed", "mlp_hidden")):
        base["variant"] = "custom"
    return ModelConfig(**base)


build_config = preset


class SpikeSR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.head = Conv2d(3, c, 3)
        self.groups = nn.ModuleList(
            SAG([self._sab() for _ in range(cfg.num_sab)], c, cfg.lif, cfg.tdbn_alpha, cfg.scb_order)
            for _ in range(cfg.num_sag)
        )
        self.fusion = FusionBlock()
        self.up = Conv2d(c, 3 * cfg.scale ** 2, 3)
        self.tail = Conv2d(3, 3, 3)
        self.noise = torch.Generator().manual_seed(cfg.seed)
        for m in self.modules():
            if isinstance(m, DSA):
                m.generator = self.noise

    def _sab(self) -> SAB:
        cfg = self.cfg
        c = cfg.channels
        if cfg.temporal_channel == "hda":
            tc = HDA(cfg.time_steps, c, cfg.hda_reduction)
        elif cfg.temporal_channel == "separable":
            tc = SeparableTCA(c, cfg.ca_reduction)
        else:
            tc = None
        if cfg.spatial == "dsa":
            sp = DSA(c, cfg.ca_embed, cfg.mlp_hidden, cfg.dsa_grid, cfg.pyramid_levels, cfg.gumbel_tau,
                     cfg.similarity == "cosine", cfg.use_dconv, cfg.dconv_depthwise, cfg.dconv_over,
                     cfg.attn_window)
        elif cfg.spatial == "sa":
            sp = SpatialAttention()
        else:
            sp = None
        return SAB(c, tc, sp, cfg.lif, cfg.tdbn_alpha, cfg.scb_order)

    def features(self, lr: torch.Tensor, time_steps: int | None = None) -> torch.Tensor:
        """Shallow conv, replication over T and the SAG stack: (T, B, C, h, w)."""
        if lr.dim() != 4 or lr.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, h, w) RGB input, got {tuple(lr.shape)}")
        if self.cfg.spatial == "dsa" and min(lr.shape[-2:]) < 2 * self.cfg.dsa_grid:
            raise ShapeError(f"input {tuple(lr.shape[-2:])} smaller than twice the patch grid")
        t = time_steps or self.cfg.time_steps
        x = self.head(lr).unsqueeze(0).repeat(t, 1, 1, 1, 1)
        for g in self.groups:
            x = g(x)
        return x

    def reconstruct(self, fused: torch.Tensor) -> torch.Tensor:
        return self.tail(pixel_shuffle(self.up(fused), self.cfg.scale))

    def forward(self, lr: torch.Tensor, time_steps: int | None = None) -> torch.Tensor:
        sr = self.reconstruct(self.fusion(self.features(lr, time_steps)))
        if not self.training:
            sr = sr.clamp(0, 1)
        return sr

    def lif_layers(self) -> list[tuple[str, LIF]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, LIF)]


def build_model(cfg: ModelConfig) -> SpikeSR:
    """Seeded construction: the same config always yields the same parameters."""
    torch.manual_seed(cfg.seed)
    return SpikeSR(cfg)


def build_variant(name: str, **overrides) -> SpikeSR:
    return build_model(preset(name, **overrides))


@dataclass
class ComplexityReport:
    """Parameter and compute counts.

    ``macs`` counts multiply-accumulates of convolutions, linear layers and
    attention matmuls with spiking layers treated as dense; ``flops`` is
    2 * macs. Lightweight-SR comparison tables usually label the MAC count
    "FLOPs", so compare against ``macs``.
    """

    param_count: int
    macs: int = 0
    hw: tuple[int, int] = (0, 0)
    time_steps: int = 0
    per_module: dict = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return 2 * self.macs


def _meta_model(cfg: ModelConfig) -> SpikeSR:
    with torch.device("meta"):
        return SpikeSR(cfg)


def count_params(cfg: ModelConfig | nn.Module) -> ComplexityReport:
    model = cfg if isinstance(cfg, nn.Module) else _meta_model(cfg)
    return ComplexityReport(sum(p.numel() for p in model.parameters() if p.requires_grad))


def count_flops(cfg: ModelConfig, hw: tuple[int, int] = (160, 160), time_steps: int = 1) -> ComplexityReport:
    """Dense MAC count of one forward pass at ``hw`` LR pixels and ``time_steps`` steps."""
    model = _meta_model(cfg).eval()
    x = torch.zeros(1, 3, *hw, device="meta")
    with FlopCounterMode(display=False) as counter:
        model(x, time_steps)
    flops = counter.get_total_flops()
    per = {}
    for name, table in counter.get_flop_counts().items():
        if name.count(".") <= 1:
            per[name] = int(sum(table.values())) // 2
    report = count_params(model)
    report.macs = int(flops) // 2
    report.hw = tuple(hw)
    report.time_steps = time_steps
    report.per_module = per
    return report

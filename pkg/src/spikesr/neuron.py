"""Leaky integrate-and-fire dynamics and threshold-dependent batch norm."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .autodiff import NonFiniteError, ShapeError, is_strict

_RELAXED = False


@contextlib.contextmanager
def relaxed(on: bool = True):
    """Replace the spike step by its smooth surrogate primitive.

    Inside this context the forward pass is differentiable everywhere and its
    exact derivative equals the surrogate used in normal training, which is
    what finite-difference checks compare against. Patch selection in the
    similarity attention also switches to its noise-free soft form.
    """
    global _RELAXED
    prev = _RELAXED
    _RELAXED = on
    try:
        yield
    finally:
        _RELAXED = prev


def is_relaxed() -> bool:
    return _RELAXED


@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_width: float = 2.0

    def __post_init__(self):
        if not self.tau > 1:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if not self.v_threshold > self.v_reset:
            raise ValueError("v_threshold must exceed v_reset")


@dataclass
class LifState:
    v: torch.Tensor

    @classmethod
    def rest(cls, like: torch.Tensor, p: LifParams) -> "LifState":
        return cls(torch.full_like(like, p.v_reset))


def surrogate_grad(x: torch.Tensor, width: float) -> torch.Tensor:
    """Arctan surrogate derivative at distance ``x`` above threshold."""
    return width / (2 * (1 + (math.pi / 2 * width * x) ** 2))


def soft_spike(x: torch.Tensor, width: float) -> torch.Tensor:
    """Smooth primitive whose derivative is ``surrogate_grad``."""
    return 0.5 + torch.atan(math.pi / 2 * width * x) / math.pi


class ArctanSpike(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, width):
        ctx.save_for_backward(x)
        ctx.width = width
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        return grad_out * surrogate_grad(x, ctx.width), None


def spike_fn(x: torch.Tensor, width: float) -> torch.Tensor:
    if _RELAXED:
        return soft_spike(x, width)
    return ArctanSpike.apply(x, width)


def lif_step(x_t: torch.Tensor, state: LifState, p: LifParams) -> tuple[torch.Tensor, LifState]:
    """One time step of the decay-input LIF neuron with hard reset."""
    v = state.v
    if v.shape != x_t.shape:
        raise ShapeError(f"membrane {tuple(v.shape)} does not match input {tuple(x_t.shape)}")
    h = v + (x_t - (v - p.v_reset)) / p.tau
    if is_strict() and not torch.isfinite(h).all():
        raise NonFiniteError("non-finite membrane potential")
    s = spike_fn(h - p.v_threshold, p.surrogate_width)
    v_new = h * (1 - s) + p.v_reset * s
    return s, LifState(v_new)


class LIF(nn.Module):
    """Runs ``lif_step`` over the leading time axis of a (T, ...) sequence.

    The firing rate of the last forward pass is kept in ``last_rate`` so a
    whole network can be probed for spike statistics.
    """

    def __init__(self, params: LifParams | None = None):
        super().__init__()
        self.params = params or LifParams()
        self.last_rate: float | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        state = LifState.rest(x[0], self.params)
        out = []
        for t in range(x.shape[0]):
            s, state = lif_step(x[t], state, self.params)
            out.append(s)
        spikes = torch.stack(out)
        if not spikes.is_meta:
            self.last_rate = float(spikes.detach().mean()) if spikes.numel() else 0.0
        return spikes


def tdbn(
    x: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    running_mean: torch.Tensor | None = None,
    running_var: torch.Tensor | None = None,
    training: bool = True,
    alpha: float = 1.0,
    v_threshold: float = 1.0,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> torch.Tensor:
    """Batch-normalise a (T, B, C, H, W) sequence per channel, scaled by alpha * V_th."""
    if x.dim() != 5:
        raise ShapeError(f"tdbn expects (T,B,C,H,W), got {tuple(x.shape)}")
    dims = (0, 1, 3, 4)
    if training:
        n = x.numel() // x.shape[2]
        if n < 2:
            raise ValueError("tdbn needs at least two values per channel in training mode")
        mean = x.mean(dims)
        var = x.var(dims, unbiased=False)
        if running_mean is not None:
            with torch.no_grad():
                running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
                running_var.mul_(1 - momentum).add_(momentum * var.detach() * n / (n - 1))
    else:
        mean, var = running_mean, running_var
    shape = (1, 1, -1, 1, 1)
    xhat = (x - mean.view(shape)) / torch.sqrt(var.view(shape) + eps)
    return alpha * v_threshold * xhat * gamma.view(shape) + beta.view(shape)


class TdBN(nn.Module):
    def __init__(self, channels: int, alpha: float = 1.0, v_threshold: float = 1.0, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.alpha = alpha
        self.v_threshold = v_threshold
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return tdbn(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            alpha=self.alpha,
            v_threshold=self.v_threshold,
            eps=self.eps,
        )


def spike_rate_probe(image: np.ndarray, p: LifParams | None = None, T: int = 4, scale: float = 1.0) -> np.ndarray:
    """Per-pixel firing rate when each pixel drives a neuron with constant current.

    ``scale`` multiplies the [0, 1] intensity before injection.
    """
    p = p or LifParams()
    if T < 1:
        raise ValueError("T must be at least 1")
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    x = torch.from_numpy(img * scale)
    state = LifState.rest(x, p)
    count = torch.zeros_like(x)
    with torch.no_grad():
        for _ in range(T):
            s, state = lif_step(x, state, p)
            count += s
    return (count / T).numpy()

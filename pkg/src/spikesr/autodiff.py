"""Dense tensors with reverse-mode differentiation.

Tensors are ``torch.Tensor`` objects laid out as (T, B, C, H, W) for spike
sequences and NCHW for per-step maps. This module pins down the small
surface the rest of the package relies on: shape-checked primitive
application, scalar-rooted backward, reflect-padded convolution, a strict
mode that rejects non-finite values, and a central finite-difference
oracle used by the gradient tests.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

_STRICT = False


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_strict(on: bool) -> None:
    global _STRICT
    _STRICT = bool(on)


def is_strict() -> bool:
    return _STRICT


@contextlib.contextmanager
def strict(on: bool = True):
    prev = _STRICT
    set_strict(on)
    try:
        yield
    finally:
        set_strict(prev)


def check_finite(*tensors: Tensor, where: str = "tensor") -> None:
    """Raise NonFiniteError if strict mode is on and any tensor has NaN/Inf."""
    if not _STRICT:
        return
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NonFiniteError(f"non-finite values in {where}")


def set_deterministic(float64: bool = True) -> None:
    """Bit-reproducible settings: 64-bit default dtype, deterministic kernels."""
    torch.set_default_dtype(torch.float64 if float64 else torch.float32)
    torch.use_deterministic_algorithms(True)


_ELEMENTWISE: dict[str, Callable[..., Tensor]] = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
    "maximum": torch.maximum,
}
_UNARY: dict[str, Callable[[Tensor], Tensor]] = {
    "neg": torch.neg,
    "exp": torch.exp,
    "log": torch.log,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "relu": torch.relu,
    "square": torch.square,
    "sqrt": torch.sqrt,
    "sum": torch.sum,
    "mean": torch.mean,
}


def apply(op: str, *inputs: Tensor) -> Tensor:
    """Apply a named primitive after checking operand shapes."""
    check_finite(*inputs, where=f"input of {op}")
    if op in _UNARY:
        if len(inputs) != 1:
            raise TypeError(f"{op} takes one operand, got {len(inputs)}")
        out = _UNARY[op](inputs[0])
    elif op in _ELEMENTWISE:
        a, b = inputs
        try:
            torch.broadcast_shapes(a.shape, b.shape)
        except RuntimeError:
            raise ShapeError(f"{op}: cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}") from None
        out = _ELEMENTWISE[op](a, b)
    elif op == "matmul":
        a, b = inputs
        if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
            raise ShapeError(f"matmul: inner extents differ for {tuple(a.shape)} and {tuple(b.shape)}")
        out = torch.matmul(a, b)
    else:
        raise KeyError(f"unknown primitive {op!r}")
    check_finite(out, where=f"output of {op}")
    return out


def backward(root: Tensor) -> None:
    if root.numel() != 1 or root.dim() != 0:
        raise ValueError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    root.backward()


def pad2d(x: Tensor, pad: int, mode: str = "reflect") -> Tensor:
    """Pad H and W by ``pad``; reflect falls back to replicate on maps too small to mirror."""
    if pad == 0:
        return x
    if mode == "reflect" and min(x.shape[-2:]) <= pad:
        mode = "replicate"
    if mode == "zeros":
        return F.pad(x, (pad, pad, pad, pad))
    return F.pad(x, (pad, pad, pad, pad), mode=mode)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int | None = None,
    padding_mode: str = "reflect",
    groups: int = 1,
) -> Tensor:
    """Cross-correlation of an NCHW map; ``pad`` defaults to half the kernel."""
    kh, kw = weight.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {kh}x{kw}")
    if x.shape[1] != weight.shape[1] * groups:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels, kernel {tuple(weight.shape)} expects {weight.shape[1] * groups}"
        )
    if pad is None:
        pad = kh // 2
    check_finite(x, where="conv2d input")
    return F.conv2d(pad2d(x, pad, padding_mode), weight, bias, stride=stride, groups=groups)


def numerical_grad(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-5,
    index: Sequence[int] | None = None,
) -> Tensor:
    """Central finite difference of scalar ``f()`` with respect to ``x``.

    ``x`` is perturbed in place and restored. With ``index`` only those flat
    entries are probed; the others stay zero.
    """
    g = torch.zeros_like(x)
    flat = x.data.view(-1)
    gflat = g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()) if index is None else index:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: Tensor, b: Tensor) -> float:
    """Norm-wise relative error, guarded for near-zero references."""
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-12)
    return num / den


def gradient_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and finite-difference gradients.

    ``max_entries`` caps the probed coordinates per input (chosen at random)
    so whole-network checks stay affordable.
    """
    for x in inputs:
        x.grad = None
    out = f()
    backward(out)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for x in inputs:
        analytic = x.grad.detach().clone().view(-1)
        n = x.numel()
        if max_entries is not None and n > max_entries:
            index = torch.randperm(n, generator=gen)[:max_entries].tolist()
        else:
            index = list(range(n))
        numeric = numerical_grad(f, x, h, index).view(-1)
        worst = max(worst, relative_error(analytic[index], numeric[index]))
    return worst

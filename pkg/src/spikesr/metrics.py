"""Fidelity metrics on the Y channel and spike statistics."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .data import rgb_to_y
from .neuron import LIF

PSNR_CAP = 100.0


def _plane(img: np.ndarray, crop: int) -> np.ndarray:
    y = rgb_to_y(np.asarray(img, dtype=np.float64))
    if crop:
        y = y[crop:-crop, crop:-crop]
    return y


def psnr(a: np.ndarray, b: np.ndarray, crop: int = 0) -> float:
    """10 log10(1 / MSE) on the Y plane, capped at 100 dB."""
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    ya, yb = _plane(a, crop), _plane(b, crop)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a: np.ndarray, b: np.ndarray, crop: int = 0, size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid window positions."""
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    x, y = _plane(a, crop), _plane(b, crop)
    if min(x.shape) < size:
        raise ValueError(f"image {x.shape} smaller than the {size}x{size} window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = gaussian_window(size, sigma)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx ** 2
    syy = _filter_valid(y * y, g) - my ** 2
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx ** 2 + my ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def spike_stats(model: torch.nn.Module) -> dict[str, float]:
    """Firing rate of every LIF layer during the model's last forward pass."""
    return {name: m.last_rate for name, m in model.named_modules()
            if isinstance(m, LIF) and m.last_rate is not None}


@dataclass
class MetricReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)
    spike_rate: dict[str, float] = field(default_factory=dict)

    def add(self, path: str, p: float, s: float) -> None:
        self.rows.append((path, p, s))

    @property
    def psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "psnr", "ssim"])
            for p, ps, ss in self.rows:
                w.writerow([p, f"{ps:.4f}", f"{ss:.6f}"])
            w.writerow(["mean", f"{self.psnr:.4f}", f"{self.ssim:.6f}"])

"""Image I/O, bicubic degradation, Y conversion, patch sampling and manifests.

Images are float64 numpy arrays in [0, 1], shaped (H, W) or (H, W, 3).
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)


class ImageTooSmall(ValueError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {img.shape}")
    if min(img.shape[:2]) < 1:
        raise ValueError("image has an empty dimension")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return img


def load_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def save_png(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax ** 2, ax ** 3
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_weights(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """(n_out, n_in) cubic resampling matrix with mirrored borders.

    When shrinking, the kernel is stretched by the inverse scale so it acts
    as an anti-aliasing filter.
    """
    scale = n_out / n_in
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        taps = np.arange(int(np.floor(center - support)), int(np.ceil(center + support)) + 1)
        k = cubic((center - taps) * kscale, a) * kscale
        k = k / k.sum()
        idx = np.where(taps < 0, -taps - 1, taps)
        idx = np.where(idx >= n_in, 2 * n_in - idx - 1, idx)
        np.add.at(w[i], np.clip(idx, 0, n_in - 1), k)
    return w


def bicubic_resize(img: np.ndarray, scale: float | None = None, size: tuple[int, int] | None = None,
                   a: float = -0.5) -> np.ndarray:
    """Separable cubic resize to ``size`` (H, W) or by ``scale``; output clipped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError("give a positive scale or an explicit size")
        size = (int(round(h * scale)), int(round(w * scale)))
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"resize of {h}x{w} to {oh}x{ow} is degenerate")
    wy = resize_weights(h, oh, a)
    wx = resize_weights(w, ow, a)
    out = np.tensordot(wy, img, axes=(1, 0))
    out = np.moveaxis(np.tensordot(wx, out, axes=(1, 1)), 0, 1)
    return np.clip(out, 0.0, 1.0)


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma with studio-range offset: (65.481 R + 128.553 G + 24.966 B + 16) / 255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


def degrade(hr: np.ndarray, scale: int = 4) -> np.ndarray:
    """Bicubic LR counterpart of an HR image whose sides are multiples of ``scale``."""
    h, w = hr.shape[:2]
    if h % scale or w % scale:
        raise ValueError(f"{h}x{w} is not a multiple of {scale}; modcrop first")
    return bicubic_resize(hr, size=(h // scale, w // scale))


def sample_patch_pair(
    hr: np.ndarray,
    lr: np.ndarray | None = None,
    lr_patch: int = 64,
    scale: int = 4,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Aligned random crop: LR patch at (y, x) and HR patch at (scale*y, scale*x)."""
    rng = rng or np.random.default_rng()
    hp = lr_patch * scale
    if hr.shape[0] < hp or hr.shape[1] < hp:
        raise ImageTooSmall(f"HR image {hr.shape[:2]} smaller than {hp}x{hp}")
    if lr is None:
        hr = modcrop(hr, scale)
        lr = degrade(hr, scale)
    h, w = lr.shape[:2]
    y = int(rng.integers(0, h - lr_patch + 1))
    x = int(rng.integers(0, w - lr_patch + 1))
    lr_crop = lr[y : y + lr_patch, x : x + lr_patch]
    hr_crop = hr[y * scale : (y + lr_patch) * scale, x * scale : (x + lr_patch) * scale]
    return lr_crop, hr_crop, (y, x)


def dihedral(img: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Rotate by k * 90 degrees (counter-clockwise), then optionally mirror horizontally."""
    out = np.rot90(img, k % 4, axes=(0, 1))
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(lr: np.ndarray, hr: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    return dihedral(lr, k, flip), dihedral(hr, k, flip)


def worker_count() -> int:
    try:
        cap = int(os.environ.get("SPIKESR_THREADS", ""))
    except ValueError:
        cap = 0
    n = os.cpu_count() or 1
    return max(1, min(cap, n) if cap > 0 else n)


@dataclass
class DatasetManifest:
    """Plain-text list of HR images relative to ``root``.

    File layout: ``#``-prefixed header lines ``# split=train`` and
    ``# scale=4``, then one relative path per line.
    """

    root: Path
    entries: list[str] = field(default_factory=list)
    split: str = "train"
    scale: int = 4

    def __post_init__(self):
        self.root = Path(self.root)
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")

    @classmethod
    def read(cls, path: str | os.PathLike, root: str | os.PathLike | None = None) -> "DatasetManifest":
        path = Path(path)
        header: dict[str, str] = {}
        entries = []
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line.lstrip("#").strip().partition("=")
                if value:
                    header[key.strip()] = value.strip()
                continue
            entries.append(line)
        m = cls(Path(root) if root is not None else path.parent, entries,
                header.get("split", "train"), int(header.get("scale", 4)))
        if not m.entries:
            raise ValueError(f"manifest {path} lists no images")
        return m

    def write(self, path: str | os.PathLike) -> None:
        lines = [f"# split={self.split}", f"# scale={self.scale}", *self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def scan(cls, root: str | os.PathLike, split: str = "train", scale: int = 4) -> "DatasetManifest":
        root = Path(root)
        entries = sorted(str(p.relative_to(root)) for p in root.rglob("*.png"))
        if not entries:
            raise ValueError(f"no PNG files under {root}")
        return cls(root, entries, split, scale)

    def paths(self) -> list[Path]:
        return [self.root / e for e in self.entries]

    def load_pairs(self, min_hr: int = 0) -> list[tuple[Path, np.ndarray, np.ndarray]]:
        """Decode every entry (thread pool), returning (path, HR, LR) triples.

        Unreadable files and images smaller than ``min_hr`` are logged and skipped.
        """

        def load(p: Path):
            try:
                hr = modcrop(load_png(p), self.scale)
            except (OSError, ValueError) as exc:
                log.warning("skipping %s: %s", p, exc)
                return None
            if min(hr.shape[:2]) < max(min_hr, self.scale):
                log.warning("skipping %s: %s smaller than %d", p, hr.shape[:2], min_hr)
                return None
            return p, hr, degrade(hr, self.scale)

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            out = [r for r in pool.map(load, self.paths()) if r is not None]
        if not out:
            raise ValueError("no usable images in manifest")
        return out


def to_tensor(img: np.ndarray):
    """(H, W, 3) array -> (1, 3, H, W) tensor in the default dtype."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(torch.get_default_dtype())[None]


def to_image(t) -> np.ndarray:
    return t.detach().cpu().double().numpy()[0].transpose(1, 2, 0)

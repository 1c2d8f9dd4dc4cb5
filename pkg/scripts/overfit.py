"""Overfit the toy network on four sample images and compare with bicubic.

Prints per-image PSNR of the network and of bicubic upsampling on the
training images themselves, plus the loss EMA trend.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np
import torch
import skimage.data as sd

from spikesr.data import bicubic_resize, degrade
from spikesr.metrics import psnr
from spikesr.model import preset
from spikesr.train import TrainConfig, evaluate, train

SOURCES = ("astronaut", "chelsea", "coffee", "rocket")


def toy_pairs(hr_side: int = 96):
    pairs = []
    for name in SOURCES:
        img = getattr(sd, name)()[:hr_side, :hr_side] / 255.0
        pairs.append((name, img, degrade(img, 4)))
    return pairs


def toy_config(**kw):
    return preset("full", variant="custom", channels=16, num_sag=2, num_sab=1, time_steps=2, **kw)


def ema(xs, k: int = 100):
    a, out, acc = 2 / (k + 1), [], xs[0]
    for x in xs:
        acc = a * x + (1 - a) * acc
        out.append(acc)
    return out


def run(steps: int = 2000, lr: float = 5e-3, lr_patch: int = 0, seed: int = 0) -> dict:
    torch.set_num_threads(1)
    # plain single precision, whatever default the caller (e.g. the test suite) has set
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float32)
    try:
        return _run(steps, lr, lr_patch, seed)
    finally:
        torch.set_default_dtype(prev)


def _run(steps: int, lr: float, lr_patch: int, seed: int) -> dict:
    pairs = toy_pairs()
    # whole images, no augmentation: the target is the training set itself
    tcfg = TrainConfig(batch_size=4, lr=lr, lr_patch=lr_patch, max_steps=steps, seed=seed, log_every=0,
                       augment=False)
    t0 = time.time()
    model, res = train(tcfg, toy_config(seed=seed), pairs)
    elapsed = time.time() - t0
    net = evaluate(model, pairs, crop=4).psnr
    bic = float(np.mean([psnr(bicubic_resize(lr_img, 4), hr, 4) for _, hr, lr_img in pairs]))
    trend = ema(res.losses)
    return {"steps": steps, "seconds": elapsed, "net_psnr": net, "bicubic_psnr": bic,
            "gain_db": net - bic, "ema_100": trend[min(99, len(trend) - 1)],
            "ema_1000": trend[min(999, len(trend) - 1)], "final_loss": res.losses[-1]}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--lr-patch", type=int, default=0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(json.dumps(run(args.steps, args.lr, args.lr_patch, args.seed), indent=2))


if __name__ == "__main__":
    main()

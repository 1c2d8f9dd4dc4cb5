"""Adam, the BPTT training loop, and evaluation over image pairs."""
from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .autodiff import NonFiniteError
from .data import augment, sample_patch_pair, to_image, to_tensor
from .metrics import MetricReport, psnr, ssim, spike_stats
from .model import ModelConfig, SpikeSR, build_model

log = logging.getLogger(__name__)


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimState) -> OptimState:
    """Bias-corrected Adam, applied in place to ``params``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    # checkpoint every N steps; 0 writes only the final one
    ckpt_every: int = 0
    loss: str = "l1"
    clip_norm: float = 0.0
    # LR crop side; 0 trains on whole images (all the same size)
    lr_patch: int = 64
    augment: bool = True
    val_every: int = 0
    max_steps: int = 0
    log_every: int = 50
    prefetch: int = 2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TrainResult:
    losses: list[float]
    val_psnr: list[tuple[int, float]]
    step: int
    checkpoints: list[Path]


Pair = tuple[object, np.ndarray, np.ndarray]


def steps_per_epoch(n_images: int, batch: int) -> int:
    return math.ceil(n_images / batch)


def make_batch(pairs: list[Pair], tcfg: TrainConfig, scale: int, step: int) -> tuple[torch.Tensor, torch.Tensor]:
    """The batch for a global step is a pure function of (seed, step).

    Each epoch walks a seeded permutation of the images, so a resumed run
    sees exactly the batches an uninterrupted one would.
    """
    per = steps_per_epoch(len(pairs), tcfg.batch_size)
    epoch, k = divmod(step, per)
    order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(pairs))
    idx = order[k * tcfg.batch_size : (k + 1) * tcfg.batch_size]
    rng = np.random.default_rng([tcfg.seed, 1, step])
    lrs, hrs = [], []
    for i in idx:
        _, hr, lr = pairs[i]
        if tcfg.lr_patch:
            lr, hr, _ = sample_patch_pair(hr, lr, tcfg.lr_patch, scale, rng)
        if tcfg.augment:
            lr, hr = augment(lr, hr, rng)
        lrs.append(to_tensor(lr))
        hrs.append(to_tensor(hr))
    return torch.cat(lrs), torch.cat(hrs)


def _prefetch(fn, steps: range, depth: int):
    """Yield fn(step) for each step, computed ahead on a worker thread."""
    if depth <= 0:
        for s in steps:
            yield fn(s)
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def work():
        for s in steps:
            if stop.is_set():
                return
            try:
                item = (s, fn(s), None)
            except Exception as exc:  # surfaced on the training thread
                item = (s, None, exc)
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if item[2] is not None:
                return

    th = threading.Thread(target=work, daemon=True)
    th.start()
    try:
        for _ in steps:
            _, out, exc = q.get()
            if exc is not None:
                raise exc
            yield out
    finally:
        stop.set()
        th.join()


def loss_fn(sr: torch.Tensor, hr: torch.Tensor, kind: str) -> torch.Tensor:
    d = sr - hr
    return d.abs().mean() if kind == "l1" else (d * d).mean()


def _precision() -> str:
    return "f64" if torch.get_default_dtype() == torch.float64 else "f32"


def _save(path: Path, model: SpikeSR, state: OptimState, tcfg: TrainConfig, step: int, per: int) -> None:
    extra = {f"optim.m.{k}": v for k, v in state.m.items()}
    extra.update({f"optim.v.{k}": v for k, v in state.v.items()})
    meta = {"epoch": step // per, "step": step, "seed": tcfg.seed, "train": asdict(tcfg)}
    checkpoint.save(path, model, meta, extra, precision=_precision())


def _restore(path: Path, model: SpikeSR, state: OptimState) -> int:
    ckpt = checkpoint.read(path)
    if ModelConfig.from_json(ckpt.config) != model.cfg:
        raise ValueError(f"checkpoint {path} was written for a different model config")
    dtype = torch.get_default_dtype()
    model.load_state_dict({k[6:]: v.to(dtype) if v.is_floating_point() else v
                           for k, v in ckpt.tensors.items() if k.startswith("model.")})
    for k, v in ckpt.tensors.items():
        if k.startswith("optim.m."):
            state.m[k[8:]] = v.to(dtype)
        elif k.startswith("optim.v."):
            state.v[k[8:]] = v.to(dtype)
    state.step = int(ckpt.meta["step"])
    return state.step


@torch.no_grad()
def evaluate(model: SpikeSR, pairs: list[Pair], crop: int | None = None) -> MetricReport:
    """PSNR/SSIM on the Y channel; ``crop`` defaults to the scale factor."""
    crop = model.cfg.scale if crop is None else crop
    was_training = model.training
    model.eval()
    report = MetricReport()
    try:
        for path, hr, lr in pairs:
            sr = to_image(model(to_tensor(lr)))
            hr3 = hr if hr.ndim == 3 else np.repeat(hr[..., None], 3, axis=2)
            report.add(str(path), psnr(sr, hr3, crop), ssim(sr, hr3, crop))
            report.spike_rate = spike_stats(model)
    finally:
        model.train(was_training)
    return report


def train(
    tcfg: TrainConfig,
    mcfg: ModelConfig,
    pairs: list[Pair],
    out: str | Path | None = None,
    val_pairs: list[Pair] | None = None,
    resume: str | Path | None = None,
    model: SpikeSR | None = None,
) -> tuple[SpikeSR, TrainResult]:
    """Run Adam on the L1 (or L2) loss, unrolling all T steps per sample."""
    if not pairs:
        raise ValueError("training needs at least one image")
    out = Path(out) if out is not None else None
    model = model or build_model(mcfg)
    model.train()
    params = dict(model.named_parameters())
    state = OptimState(lr=tcfg.lr)
    per = steps_per_epoch(len(pairs), tcfg.batch_size)
    total = tcfg.max_steps or tcfg.epochs * per
    start = _restore(Path(resume), model, state) if resume else 0
    result = TrainResult([], [], start, [])

    def ckpt(step: int) -> None:
        if out is None:
            return
        path = out / f"ckpt_{step:07d}.spsr"
        _save(path, model, state, tcfg, step, per)
        _save(out / "last.spsr", model, state, tcfg, step, per)
        result.checkpoints.append(path)

    batches = _prefetch(lambda s: make_batch(pairs, tcfg, mcfg.scale, s), range(start, total), tcfg.prefetch)
    for step, (lr, hr) in zip(range(start, total), batches):
        model.noise.manual_seed(mcfg.seed * 1_000_003 + step)
        loss = loss_fn(model(lr), hr, tcfg.loss)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"loss became {loss.item()} at step {step}")
        model.zero_grad(set_to_none=True)
        loss.backward()
        if tcfg.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.clip_norm)
        adam_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, state)
        result.losses.append(loss.item())
        result.step = step + 1
        if tcfg.log_every and (step + 1) % tcfg.log_every == 0:
            log.info("step %d/%d loss %.5f", step + 1, total, loss.item())
        if val_pairs and tcfg.val_every and (step + 1) % tcfg.val_every == 0:
            p = evaluate(model, val_pairs).psnr
            result.val_psnr.append((step + 1, p))
            log.info("step %d val psnr %.3f dB", step + 1, p)
        if tcfg.ckpt_every and (step + 1) % tcfg.ckpt_every == 0 and step + 1 < total:
            ckpt(step + 1)
    if result.step > start or not result.checkpoints:
        ckpt(result.step)
    return model, result

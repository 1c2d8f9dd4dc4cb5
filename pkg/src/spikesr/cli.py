"""Command-line entry point: train, eval, sr, count, inspect."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .autodiff import set_deterministic
from .data import DatasetManifest, bicubic_resize, degrade, load_png, modcrop, rgb_to_y, save_png, to_image, to_tensor
from .dsa import DSA
from .metrics import spike_stats
from .model import ModelConfig, build_model, count_flops, preset
from .neuron import LifParams, spike_rate_probe
from .train import TrainConfig, evaluate, train

log = logging.getLogger("spikesr")

VARIANTS = ("s", "m", "full", "spikesr", "baseline", "variant_a", "variant_b")
_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
# keys the train command understands besides ModelConfig/TrainConfig fields
_RUN_KEYS = {"data_root": str, "out": str, "resume": str, "val_manifest": str, "float64": bool}


class UsageError(Exception):
    pass


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.replace(",", " ").split())
    return type(like)(value)


def read_config(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; dashes and underscores are interchangeable."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_train(settings: dict[str, str]) -> tuple[ModelConfig, TrainConfig, dict]:
    """Split merged string settings into model config, train config and run options."""
    settings = dict(settings)
    variant = settings.pop("variant", "full")
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    model_kw, train_kw, run = {}, {}, {}
    defaults_m = ModelConfig()
    defaults_t = TrainConfig()
    for key, value in settings.items():
        if key == "seed":
            model_kw["seed"] = train_kw["seed"] = int(value)
        elif key in _TRAIN_FIELDS:
            train_kw[key] = _coerce(value, getattr(defaults_t, key))
        elif key in _MODEL_FIELDS and key != "variant":
            model_kw[key] = _coerce(value, getattr(defaults_m, key))
        elif key in _RUN_KEYS:
            run[key] = _coerce(value, False) if _RUN_KEYS[key] is bool else value
        else:
            raise UsageError(f"unknown setting {key!r}")
    return preset(variant, **model_kw), TrainConfig(**train_kw), run


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _load(ckpt: str):
    model, _ = checkpoint.load_model(ckpt)
    return model.eval()


def _rgb(img: np.ndarray) -> np.ndarray:
    return img if img.ndim == 3 else np.repeat(img[..., None], 3, axis=2)


def cmd_train(args) -> int:
    settings = read_config(args.config) if args.config else {}
    for key in ("variant", "seed", "data_root", "out", "resume", "val_manifest", "epochs", "batch_size",
                "lr", "lr_patch", "max_steps", "ckpt_every", "val_every", "loss", "clip_norm", "time_steps"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = str(value)
    if args.clip:
        settings["clip_norm"] = "5.0"
    if args.float64:
        settings["float64"] = "true"
    mcfg, tcfg, run = resolve_train(settings)
    if "data_root" not in run:
        raise UsageError("train needs --data-root (flag or config file)")
    if run.get("float64"):
        set_deterministic(True)
    root = Path(run["data_root"])
    manifest_file = root / "manifest.txt"
    if manifest_file.exists():
        manifest = DatasetManifest.read(manifest_file, root)
    else:
        manifest = DatasetManifest.scan(root, "train", mcfg.scale)
    pairs = manifest.load_pairs(min_hr=tcfg.lr_patch * mcfg.scale)
    val = None
    if run.get("val_manifest"):
        val = DatasetManifest.read(run["val_manifest"]).load_pairs()
    out = Path(run.get("out", "runs/spikesr"))
    _, result = train(tcfg, mcfg, pairs, out, val, run.get("resume"))
    np.savetxt(out / "loss.txt", np.asarray(result.losses), fmt="%.8f")
    print(f"trained {result.step} steps; final loss {result.losses[-1]:.5f}; checkpoint {out / 'last.spsr'}")
    return 0


def cmd_eval(args) -> int:
    model = _load(args.ckpt)
    manifest = DatasetManifest.read(args.manifest, args.data_root)
    pairs = manifest.load_pairs()
    report = evaluate(model, pairs, args.crop)
    if args.csv:
        report.write_csv(args.csv)
    print(f"{len(report.rows)} images  PSNR {report.psnr:.3f} dB  SSIM {report.ssim:.4f}")
    return 0


@torch.no_grad()
def cmd_sr(args) -> int:
    model = _load(args.ckpt)
    img = _rgb(load_png(args.inp))
    sr = to_image(model(to_tensor(img), args.time_steps))
    save_png(args.out, sr)
    print(f"wrote {args.out} ({sr.shape[1]}x{sr.shape[0]})")
    return 0


def cmd_count(args) -> int:
    cfg = preset(args.variant)
    rep = count_flops(cfg, args.hw, args.time_steps)
    h, w = args.hw
    print(f"variant      {args.variant}")
    print(f"params       {rep.param_count:,} ({rep.param_count / 1e3:.1f}K)")
    print(f"macs         {rep.macs / 1e9:.2f}G at {h}x{w}, T={args.time_steps} (the 'FLOPs' of SR tables)")
    print(f"flops        {rep.flops / 1e9:.2f}G (2 per MAC)")
    return 0


def _probe_plane(img: np.ndarray) -> np.ndarray:
    return rgb_to_y(img) if img.ndim == 3 else img


def cmd_inspect_spikes(args) -> int:
    clean = load_png(args.inp)
    if args.degraded:
        bad = load_png(args.degraded)
    else:
        clean = modcrop(clean, 4)
        bad = bicubic_resize(degrade(clean, 4), size=clean.shape[:2])
    p = LifParams(tau=args.tau, v_threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in (("clean", clean), ("degraded", bad)):
        rate = spike_rate_probe(_probe_plane(img), p, args.time_steps, args.scale)
        save_png(out / f"{name}_rate.png", rate)
        print(f"{name:9s} mean rate {rate.mean():.4f}  firing fraction {(rate > 0).mean():.4f}")
    if args.ckpt:
        model = _load(args.ckpt)
        with torch.no_grad():
            model(to_tensor(_rgb(bad)))
        for layer, r in spike_stats(model).items():
            print(f"  {layer:40s} {r:.4f}")
    return 0


@torch.no_grad()
def cmd_inspect_match(args) -> int:
    if args.ckpt:
        model = _load(args.ckpt)
    else:
        model = build_model(preset(args.variant, seed=args.seed)).eval()
    img = _rgb(load_png(args.inp))
    model(to_tensor(img))
    dsa = next((m for m in model.modules() if isinstance(m, DSA)), None)
    if dsa is None or dsa.last_indices is None:
        raise RuntimeError("model has no deformable similarity attention to inspect")
    g = dsa.grid
    n = g * g
    idx = dsa.last_indices[0].reshape(g, g).double().numpy() / max(n - 1, 1)
    sim = dsa.last_similarity[0].double().numpy()
    sim = (sim - sim.min()) / max(sim.max() - sim.min(), 1e-12)
    cell = max(1, args.cell)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "match_grid.png", np.kron(idx, np.ones((cell, cell))))
    save_png(out / "similarity.png", np.kron(sim, np.ones((cell // 2 or 1, cell // 2 or 1))))
    for r in range(g):
        print(" ".join(f"{int(v):3d}" for v in dsa.last_indices[0].reshape(g, g)[r]))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spikesr", description="Spiking super-resolution toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--data-root")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--resume")
    t.add_argument("--val-manifest")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-patch", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--ckpt-every", type=int)
    t.add_argument("--val-every", type=int)
    t.add_argument("--time-steps", type=int)
    t.add_argument("--loss", choices=("l1", "l2"))
    t.add_argument("--clip", action="store_true", help="clip the global gradient norm at 5.0")
    t.add_argument("--clip-norm", type=float)
    t.add_argument("--float64", action="store_true", help="64-bit deterministic mode")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM over a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--data-root")
    e.add_argument("--csv")
    e.add_argument("--crop", type=int, help="border crop (default: the scale)")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sr", help="super-resolve one PNG")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--time-steps", type=int)
    s.set_defaults(fn=cmd_sr)

    c = sub.add_parser("count", help="parameter and compute counts")
    c.add_argument("--variant", choices=VARIANTS, default="full")
    c.add_argument("--hw", type=_parse_hw, default=(160, 160))
    c.add_argument("--time-steps", type=int, default=1)
    c.set_defaults(fn=cmd_count)

    i = sub.add_parser("inspect", help="diagnostics")
    isub = i.add_subparsers(dest="what", required=True, parser_class=_Parser)
    sp = isub.add_parser("spikes", help="LIF rate maps of a clean/degraded pair")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--degraded", help="degraded image (default: bicubic x4 down and up)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--time-steps", type=int, default=4)
    sp.add_argument("--scale", type=float, default=2.0, help="intensity-to-current gain")
    sp.add_argument("--tau", type=float, default=2.0)
    sp.add_argument("--threshold", type=float, default=1.0)
    sp.add_argument("--ckpt", help="also report per-layer rates of a trained network")
    sp.set_defaults(fn=cmd_inspect_spikes)
    mt = isub.add_parser("match", help="patch match grid and similarity heatmap")
    mt.add_argument("--in", dest="inp", required=True)
    mt.add_argument("--out", required=True)
    mt.add_argument("--ckpt")
    mt.add_argument("--variant", choices=VARIANTS, default="full")
    mt.add_argument("--seed", type=int, default=0)
    mt.add_argument("--cell", type=int, default=32)
    mt.set_defaults(fn=cmd_inspect_match)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as exc:
        print(f"spikesr: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"spikesr: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"spikesr: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

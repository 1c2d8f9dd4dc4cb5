"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Criteria backed by the module suites re-run those tests by node id in a
subprocess, so each line reflects exactly the checks it names.
"""
from __future__ import annotations

import importlib.util
import re
import subprocess
import sys
import time
from pathlib import Path

import pytest

from spikesr.cli import main
from spikesr.data import save_png
from spikesr.model import count_flops, count_params, preset

ROOT = Path(__file__).resolve().parents[1]


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def within(value: float, target: float, tol: float) -> bool:
    return abs(value - target) <= tol * target


def run_nodes(nodes: list[str]) -> tuple[bool, str]:
    t0 = time.time()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *nodes],
                          cwd=ROOT, capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()
    return proc.returncode == 0, f"{tail} ({time.time() - t0:.1f}s)"


def test_criterion_1_complexity(capsys):
    full = count_params(preset("full")).param_count
    macs = count_flops(preset("full"), (160, 160), 1).macs
    s = count_params(preset("s")).param_count
    m = count_params(preset("m")).param_count
    checks = {
        f"full params {full / 1e3:.1f}K vs 1042K": within(full, 1_042_000, 0.15),
        f"MACs {macs / 1e9:.2f}G vs 33.05G": within(macs, 33.05e9, 0.25),
        f"S {s / 1e3:.1f}K vs 472K": within(s, 472_000, 0.15),
        f"M {m / 1e3:.1f}K vs 763K": within(m, 763_000, 0.15),
    }
    ok = all(checks.values())
    report(capsys, 1, ok, "; ".join(f"{k} {'ok' if v else 'out of band'}" for k, v in checks.items()))
    assert ok


def test_criterion_2_ablation_params(capsys):
    targets = {"baseline": 1_120_000, "variant_a": 1_062_000, "variant_b": 1_009_000, "spikesr": 1_042_000}
    got = {k: count_params(preset(k)).param_count for k in targets}
    flags = {k: within(got[k], t, 0.15) for k, t in targets.items()}
    ok = all(flags.values())
    report(capsys, 2, ok, "; ".join(f"{k} {got[k] / 1e3:.1f}K vs {targets[k] / 1e3:.0f}K "
                                    f"{'ok' if flags[k] else 'out of band'}" for k in targets))
    assert ok


def test_criterion_3_gradient_suite(capsys):
    ok, detail = run_nodes([
        "tests/test_autodiff.py::test_unary_primitive_gradients",
        "tests/test_autodiff.py::test_binary_primitive_gradients",
        "tests/test_autodiff.py::test_conv_primitive_gradient",
        "tests/test_layers.py::test_softmax_gradient",
        "tests/test_layers.py::test_mlp_gradient",
        "tests/test_layers.py::test_bilinear_gradient",
        "tests/test_neuron.py::test_lif_relaxed_gradient",
        "tests/test_neuron.py::test_tdbn_gradient",
        "tests/test_blocks.py::test_scb_gradient",
        "tests/test_blocks.py::test_hda_gradient",
        "tests/test_blocks.py::test_sab_gradient",
        "tests/test_blocks.py::test_fusion_gradient",
        "tests/test_dsa.py::test_deform_offset_gradient",
        "tests/test_dsa.py::test_dsa_gradient",
        "tests/test_model.py::test_full_model_gradient",
    ])
    report(capsys, 3, ok, detail)
    assert ok


def test_criterion_4_lif_analytics(capsys):
    ok, detail = run_nodes([
        "tests/test_neuron.py::test_rest_stays_at_rest",
        "tests/test_neuron.py::test_constant_two_spikes_every_step",
        "tests/test_neuron.py::test_subthreshold_closed_form",
        "tests/test_neuron.py::test_hard_reset_exact",
        "tests/test_neuron.py::test_probe_cases",
    ])
    report(capsys, 4, ok, detail)
    assert ok


def test_criterion_5_dsa_oracles(capsys):
    ok, detail = run_nodes([
        "tests/test_dsa.py::test_eval_matching_is_brute_force_argmax",
        "tests/test_dsa.py::test_gumbel_monte_carlo_frequencies",
        "tests/test_dsa.py::test_zero_offset_deform_is_conv",
    ])
    report(capsys, 5, ok, detail)
    assert ok


def test_criterion_6_metric_oracles(capsys):
    ok, detail = run_nodes([
        "tests/test_metrics.py::test_psnr_closed_forms",
        "tests/test_metrics.py::test_psnr_matches_direct_sum",
        "tests/test_metrics.py::test_ssim_identity_exact",
        "tests/test_metrics.py::test_ssim_matches_skimage",
    ])
    report(capsys, 6, ok, detail)
    assert ok


def _overfit_module():
    spec = importlib.util.spec_from_file_location("overfit", ROOT / "scripts" / "overfit.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.mark.slow
def test_criterion_7_overfit(capsys):
    res = _overfit_module().run(steps=2000)
    gain_ok = res["gain_db"] >= 1.0
    time_ok = res["seconds"] <= 15 * 60
    trend_ok = res["ema_1000"] < res["ema_100"]
    ok = gain_ok and time_ok and trend_ok
    report(capsys, 7, ok, f"net {res['net_psnr']:.2f} dB vs bicubic {res['bicubic_psnr']:.2f} dB "
                          f"(gain {res['gain_db']:+.2f}), {res['seconds']:.0f}s, "
                          f"loss ema {res['ema_100']:.4f} -> {res['ema_1000']:.4f}")
    assert ok


def test_criterion_8_spike_diagnostic(tmp_path, capsys):
    import skimage.data as sd

    save_png(tmp_path / "clean.png", sd.astronaut()[:128, :128] / 255.0)
    out = tmp_path / "maps"
    code = main(["inspect", "spikes", "--in", str(tmp_path / "clean.png"), "--out", str(out)])
    text = capsys.readouterr().out
    rates = dict(re.findall(r"^(\w+)\s+mean rate ([0-9.]+)", text, re.M))
    maps_ok = all((out / f"{n}_rate.png").exists() for n in ("clean", "degraded"))
    ok = code == 0 and maps_ok and float(rates.get("degraded", 0)) > 0
    report(capsys, 8, ok, f"clean rate {rates.get('clean')}, degraded rate {rates.get('degraded')}, "
                          f"maps written {maps_ok}")
    assert ok


def test_criterion_9_reproducibility(capsys):
    ok, detail = run_nodes([
        "tests/test_train.py::test_identical_runs_write_identical_bytes",
        "tests/test_train.py::test_resume_is_bit_exact",
        "tests/test_checkpoint.py::test_roundtrip_bit_exact_f64",
        "tests/test_checkpoint.py::test_roundtrip_bit_exact_f32",
        "tests/test_model.py::test_deterministic_forward",
    ])
    report(capsys, 9, ok, detail)
    assert ok

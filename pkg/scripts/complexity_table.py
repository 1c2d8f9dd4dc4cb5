"""Parameter and MAC counts for every preset next to the target figures."""
from __future__ import annotations

import argparse

from spikesr.model import count_flops, preset

# target parameter counts (K) and, for the full model, "FLOPs" (G) at 160x160, T=1
TARGETS = {
    "s": (472, None),
    "m": (763, None),
    "full": (1042, 33.05),
    "baseline": (1120, None),
    "variant_a": (1062, None),
    "variant_b": (1009, None),
    "spikesr": (1042, None),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--hw", default="160x160")
    ap.add_argument("--time-steps", type=int, default=1)
    args = ap.parse_args()
    hw = tuple(int(v) for v in args.hw.split("x"))
    print(f"{'variant':10s} {'params':>10s} {'target K':>9s} {'ratio':>6s} {'MACs G':>8s} {'target G':>9s}")
    for name, (pk, pg) in TARGETS.items():
        rep = count_flops(preset(name), hw, args.time_steps)
        ratio = rep.param_count / 1e3 / pk
        macs = rep.macs / 1e9
        tg = f"{pg:9.2f}" if pg else f"{'-':>9s}"
        print(f"{name:10s} {rep.param_count:10,d} {pk:9d} {ratio:6.2f} {macs:8.2f} {tg}")


if __name__ == "__main__":
    main()

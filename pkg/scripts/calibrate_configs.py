#!/usr/bin/env python3
"""Reproduce the sizing decisions frozen into the shipped model configs.

Two questions are settled here:

1. The width-32 windowed-attention model: the published description (one
   block per encoder/decoder level, one middle block) is verified against the
   4.76M deployment parameter target.

2. The spatial-attention variant: width and block layout are not published,
   only the 4.51M / 172.2G ceilings.  This script searches even widths and
   small block layouts and ranks the candidates that satisfy both ceilings by
   parameter utilization; the shipped config is the top row.
"""

import dataclasses
import itertools

from deblurkit import models
from deblurkit.efficiency import count_macs, count_params
from deblurkit.reparam import convert_model

GATE_H, GATE_W = 1200, 1920
PARAM_CAP = 4.51e6
MACS_CAP = 172.2e9


def verify_nafreplocal() -> None:
    model = models.build_nafreplocal().eval()
    fused = convert_model(model)
    params, _ = count_params(fused)
    macs, _ = count_macs(fused, GATE_H, GATE_W)
    print("width-32 windowed-attention model (deployment form):")
    print(f"  params {params:,} ({params / 1e6:.4f}M, target 4.76M, "
          f"err {100 * (params - 4.76e6) / 4.76e6:+.2f}%)")
    print(f"  macs   {macs / 1e9:.2f}G (reported 198.25G)")
    print()


def search_sa_nafnet(top: int = 8) -> None:
    candidates = []
    widths = range(24, 33, 2)
    layouts = [
        ((1, 1, 1, 1), 1, (1, 1, 1, 1)),
        ((1, 1, 1, 2), 1, (1, 1, 1, 1)),
        ((1, 1, 1, 1), 1, (1, 1, 1, 2)),
        ((1, 1, 2, 2), 1, (1, 1, 1, 1)),
        ((1, 1, 1, 2), 1, (2, 1, 1, 1)),
        ((2, 1, 1, 1), 1, (1, 1, 1, 2)),
        ((1, 1, 1, 2), 2, (1, 1, 1, 1)),
    ]
    for width, (enc, mid, dec) in itertools.product(widths, layouts):
        cfg = dataclasses.replace(
            models.SA_NAFNET_CONFIG,
            width=width,
            enc_blocks=enc,
            middle_blocks=mid,
            dec_blocks=dec,
        )
        model = models.build_sa_nafnet(cfg)
        params, _ = count_params(model)
        macs, _ = count_macs(model, GATE_H, GATE_W)
        if params <= PARAM_CAP and macs <= MACS_CAP:
            candidates.append((params, macs, width, enc, mid, dec))
    candidates.sort(key=lambda row: -row[0])
    print(f"spatial-attention variant: candidates under {PARAM_CAP / 1e6}M / "
          f"{MACS_CAP / 1e9}G, best parameter utilization first:")
    for params, macs, width, enc, mid, dec in candidates[:top]:
        print(
            f"  width {width:>2} enc {enc} mid {mid} dec {dec}: "
            f"{params / 1e6:.3f}M, {macs / 1e9:.1f}G"
        )


if __name__ == "__main__":
    verify_nafreplocal()
    search_sa_nafnet()

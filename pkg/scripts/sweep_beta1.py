#!/usr/bin/env python3
"""Sensitivity sweep: decode history budget beta1 in {64, 128, 256, 512}
with the local window fixed at beta2=256, phase-separated policies only.

Usage: python scripts/sweep_beta1.py [output_dir]
"""

import sys
from dataclasses import replace
from pathlib import Path

from kvsim.cli import run_experiment
from kvsim.config import load_config

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "preset_4k_replay.cfg"


def main() -> int:
    cfg = load_config(CONFIG)
    cfg = replace(cfg, policies=["scope_slide", "scope_adaptive", "scope_discontinuous"])
    cfg.output_dir = sys.argv[1] if len(sys.argv) > 1 else "out/sweep_beta1"
    cells, csv_path, _ = run_experiment(cfg, axis="beta1", axis_values=[64, 128, 256, 512])
    for cell in cells:
        print(
            f"beta1={cell.axis_value:>4} {cell.policy:>22}: peak={cell.report.peak_entries}"
            f" ({cell.report.peak_ratio:.1%}), selection_ops={cell.report.selection_ops},"
            f" transfer={cell.report.transfer_entries}"
        )
    print(f"-> {csv_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

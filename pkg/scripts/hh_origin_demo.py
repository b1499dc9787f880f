#!/usr/bin/env python3
"""Heavy-hitter origin drift under a recency-biased closed loop.

Runs a dense full-cache reference (M=256, T=512, bias 0.05), classifies the
top-15% attention positions by origin at several checkpoints, then shows
how much of the prompt-side pool each policy still holds at the end.

Usage: python scripts/hh_origin_demo.py
"""

import sys

from kvsim.core import BudgetConfig
from kvsim.decoding import DecodingPolicy, PolicyKind
from kvsim.engine import ToyModel, decode_loop, run_prefill
from kvsim.metrics import hh_origin_distribution
from kvsim.oracle import full_cache_reference
from kvsim.prefill import PrefillPolicy, PrefillPolicyKind

M, T = 256, 512
CHECKPOINTS = [1, 100, 300, 500]


def main() -> int:
    model = ToyModel(seed=8, d_model=32, n_heads=2, n_layers=1, recency_bias=0.05)
    print(f"full-cache reference: M={M}, T={T}, recency_bias={model.recency_bias}")
    reference = full_cache_reference(model, M, T)
    report = hh_origin_distribution(reference.rows, M, CHECKPOINTS, fraction=0.15)
    for cp in report.checkpoints:
        print(
            f"  t={cp.t:>3}: heavy hitters {cp.prefill_fraction:.1%} prompt-origin,"
            f" {cp.decoding_fraction:.1%} decoding-origin"
        )

    budget = BudgetConfig(alpha1=128, alpha2=8, beta1=64, beta2=32, max_decode_steps=T)
    pipelines = {
        "unified_h2o": (
            PrefillPolicy(kind=PrefillPolicyKind.TOPK_LOCAL, alpha1=192, alpha2=40, score_mode="sum"),
            PolicyKind.UNIFIED_H2O,
        ),
        "scope_slide": (
            PrefillPolicy(kind=PrefillPolicyKind.TOPK_LOCAL, alpha1=128, alpha2=8),
            PolicyKind.SCOPE_SLIDE,
        ),
        "scope_adaptive": (
            PrefillPolicy(kind=PrefillPolicyKind.TOPK_LOCAL, alpha1=128, alpha2=8),
            PolicyKind.SCOPE_ADAPTIVE,
        ),
        "scope_discontinuous": (
            PrefillPolicy(kind=PrefillPolicyKind.TOPK_LOCAL, alpha1=128, alpha2=8),
            PolicyKind.SCOPE_DISCONTINUOUS,
        ),
    }
    print("prompt-side retention across decoding:")
    for name, (prefill_policy, kind) in pipelines.items():
        prefill = run_prefill(model, M, prefill_policy)
        record = decode_loop(model, prefill, DecodingPolicy(kind, budget), T)
        initial = record.layers[0].initial_prefill_size
        final = record.layers[0].steps[-1].prefill_size
        print(f"  {name:>22}: {initial} -> {final} prompt-origin entries")
    return 0


if __name__ == "__main__":
    sys.exit(main())

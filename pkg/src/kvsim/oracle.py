"""Brute-force references for validating the optimized implementations.

Everything here is deliberately literal: plain position lists, full sorts,
stepwise forward passes. None of it shares logic with the policy runners or
the engine's vectorized paths; duplication is the point.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoding import DecodingPolicy, PolicyKind, SelectorKind
from .engine import (
    LayerLog,
    ModelWeights,
    RunRecord,
    StepStats,
    ToyModel,
    decode_loop,
    prefill_result_from_positions,
)
from .selection import AttentionRow
from .traceio import Trace

DEFAULT_SIZE_GUARD = 4096


@dataclass
class ReferenceRun:
    """Dense full-cache run: every attention row kept, no eviction."""

    model: ToyModel
    prompt_len: int
    steps: int
    rows: list[np.ndarray]
    prompt_scores: np.ndarray
    outputs: np.ndarray
    record: RunRecord

    def to_trace(self) -> Trace:
        return Trace(
            M=self.prompt_len,
            T=self.steps,
            layers=self.model.n_layers,
            heads=self.model.n_heads,
            prefill_scores=self.prompt_scores,
            rows=self.rows,
        )


def full_cache_reference(
    model: ToyModel,
    m: int,
    t_steps: int,
    max_total: int = DEFAULT_SIZE_GUARD,
    allow_large: bool = False,
) -> ReferenceRun:
    """Run the toy model with no eviction, storing every full-prefix row
    densely. Re-derives the forward pass stepwise rather than reusing the
    engine, so the two can be cross-checked."""
    if m < 1 or t_steps < 0:
        raise ValueError("need m >= 1 and t_steps >= 0")
    if m + t_steps > max_total and not allow_large:
        raise ValueError(
            f"dense reference for {m + t_steps} positions exceeds the guard ({max_total}); "
            "pass allow_large=True to override"
        )
    weights = ModelWeights(model)
    heads, d = model.n_heads, model.d_model
    dh = d // heads
    bias = model.recency_bias
    keys = [[] for _ in range(model.n_layers)]
    values = [[] for _ in range(model.n_layers)]

    def attend_one(h: np.ndarray, layer: int) -> tuple[np.ndarray, np.ndarray]:
        k_mat = np.array(keys[layer])
        v_mat = np.array(values[layer])
        n = len(k_mat)
        offsets = np.arange(n) - (n - 1)
        row_acc = np.zeros(n)
        ctx = np.zeros(d)
        for head in range(heads):
            q = h[head * dh : (head + 1) * dh]
            k_h = k_mat[:, head * dh : (head + 1) * dh]
            logits = k_h @ q / math.sqrt(dh) + bias * offsets
            logits = logits - logits.max()
            w = np.exp(logits)
            w = w / w.sum()
            row_acc += w
            ctx[head * dh : (head + 1) * dh] = w @ v_mat[:, head * dh : (head + 1) * dh]
        return row_acc / heads, ctx

    def norm(x: np.ndarray) -> np.ndarray:
        r = math.sqrt(float(np.mean(x * x)))
        return x / r if r > 0 else x

    prompt_colsums = np.zeros(m)
    embeddings = weights.embeddings(m)
    hidden = None
    for i in range(m):
        h = embeddings[i]
        for layer in range(model.n_layers):
            keys[layer].append(h @ weights.w_k[layer])
            values[layer].append(h @ weights.w_v[layer])
            row, ctx = attend_one(h, layer)
            if layer == 0:
                layer_mean = row / model.n_layers
            else:
                layer_mean = layer_mean + row / model.n_layers
            h = norm(h + ctx)
        prompt_colsums[: i + 1] += layer_mean
        hidden = h

    rows: list[np.ndarray] = []
    outputs = np.zeros((t_steps, d))
    x = norm(hidden)
    for t in range(1, t_steps + 1):
        h = x
        for layer in range(model.n_layers):
            keys[layer].append(h @ weights.w_k[layer])
            values[layer].append(h @ weights.w_v[layer])
            row, ctx = attend_one(h, layer)
            if layer == 0:
                layer_mean = row / model.n_layers
            else:
                layer_mean = layer_mean + row / model.n_layers
            h = norm(h + ctx)
        rows.append(layer_mean)
        outputs[t - 1] = h
        x = h

    logs = []
    for layer in range(model.n_layers):
        log = LayerLog(layer=layer, initial_prefill_size=m)
        for t in range(1, t_steps + 1):
            log.steps.append(
                StepStats(
                    t=t, prefill_size=m, decoding_size=t, peak_entries=m + t,
                    ran_selection=False, evicted=0, transfer=1,
                )
            )
        logs.append(log)
    record = RunRecord(
        mode="closed_loop", prompt_len=m, num_steps=t_steps, num_layers=model.n_layers,
        layers=logs, final_pools=[], outputs=outputs,
    )
    return ReferenceRun(
        model=model, prompt_len=m, steps=t_steps, rows=rows,
        prompt_scores=prompt_colsums, outputs=outputs, record=record,
    )


def heavy_hitter_set(row, fraction: float) -> set[int]:
    """Positions of the top ceil(fraction * n) scores, earliest-wins ties.
    Accepts an AttentionRow or a dense array (positions 0..n-1)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if isinstance(row, AttentionRow):
        items = list(zip(row.positions.tolist(), row.scores.tolist()))
    else:
        items = list(enumerate(np.asarray(row, dtype=np.float64).tolist()))
    if not items:
        raise ValueError("heavy hitters of an empty row are undefined")
    k = math.ceil(fraction * len(items))
    ranked = sorted(items, key=lambda it: (-it[1], it[0]))
    return {pos for pos, _ in ranked[:k]}


# ----------------------------------------------------------------------
# naive policy re-simulation (test oracle)


def _naive_top_k(items: list[tuple[int, float]], k: int) -> set[int]:
    ranked = sorted(items, key=lambda it: (-it[1], it[0]))
    return {pos for pos, _ in ranked[: max(k, 0)]}


def naive_policy_simulator(
    policy: DecodingPolicy,
    trace: Trace,
    prefill_positions: Sequence[int],
    steps: int | None = None,
) -> list[tuple[frozenset[int], frozenset[int]]]:
    """Replay a decoding policy with the most literal data structures
    possible and return the retained (prompt, decoding) position sets after
    every step. Shares no code with the policy runners."""
    b = policy.budget
    m = trace.M
    steps = steps if steps is not None else min(b.max_decode_steps, trace.T)
    prefill = sorted(int(p) for p in prefill_positions)
    decoding: list[int] = []
    sums: dict[int, float] = {}
    recent: deque[dict[int, float]] = deque(maxlen=policy.observation_window)
    kind, selector = policy.kind, policy.selector

    if kind is PolicyKind.PYRAMID_INFER and policy.layer_budget is not None:
        unified_total = policy.layer_budget
    else:
        unified_total = b.total_budget
    unified_local = min(b.alpha2 + b.beta2, unified_total)
    unified_history = unified_total - unified_local

    if kind in (PolicyKind.UNIFIED_H2O, PolicyKind.PYRAMID_INFER) and (
        selector is SelectorKind.CUMULATIVE and policy.seed_prefill_scores
    ):
        for p in prefill:
            sums[p] = float(trace.prefill_scores[p])

    def candidate_scores(candidates: list[int]) -> list[tuple[int, float]]:
        if selector is SelectorKind.CUMULATIVE:
            return [(p, sums.get(p, 0.0)) for p in candidates]
        denom = len(recent)
        out = []
        for p in candidates:
            total = 0.0
            for row in recent:
                total += row.get(p, 0.0)
            out.append((p, total / denom if denom else 0.0))
        return out

    def drop(evicted: list[int]) -> None:
        for p in evicted:
            sums.pop(p, None)

    history: list[tuple[frozenset[int], frozenset[int]]] = []
    for t in range(1, steps + 1):
        decoding.append(m + t - 1)
        retained = prefill + decoding
        full = trace.row(t)
        sliced = [float(full[p]) for p in retained]
        total_mass = sum(sliced)
        if total_mass > 0:
            sliced = [v / total_mass for v in sliced]
        else:
            sliced = [1.0 / len(retained)] * len(retained)
        row_map = dict(zip(retained, sliced))

        if kind is not PolicyKind.PREFILL_ONLY:
            observed = row_map
            if kind in (PolicyKind.SCOPE_SLIDE, PolicyKind.SCOPE_ADAPTIVE, PolicyKind.SCOPE_DISCONTINUOUS):
                observed = {p: v for p, v in row_map.items() if p >= m}
            if kind is not PolicyKind.UNIFIED_STREAMING:
                if selector is SelectorKind.CUMULATIVE:
                    for p, v in observed.items():
                        sums[p] = sums.get(p, 0.0) + v
                else:
                    recent.append(observed)

        if kind in (PolicyKind.SCOPE_SLIDE, PolicyKind.SCOPE_ADAPTIVE, PolicyKind.SCOPE_DISCONTINUOUS):
            run_it = False
            history_k = 0
            if kind is PolicyKind.SCOPE_SLIDE:
                run_it = len(decoding) > b.beta1 + b.beta2
                history_k = b.beta1
            elif t > b.beta2:
                target = b.beta2 + b.beta1 * (t - b.beta2) // (b.max_decode_steps - b.beta2)
                if kind is PolicyKind.SCOPE_DISCONTINUOUS:
                    interval = (b.max_decode_steps - b.beta2) // b.beta1
                    if (t - b.beta2) % interval != 0:
                        target = None
                if target is not None and len(decoding) > target:
                    run_it = True
                    history_k = target - b.beta2
            if run_it:
                older = decoding[: len(decoding) - b.beta2] if b.beta2 else decoding
                tail = decoding[len(decoding) - b.beta2 :] if b.beta2 else []
                keep = _naive_top_k(candidate_scores(older), history_k) | set(tail)
                drop([p for p in decoding if p not in keep])
                decoding = [p for p in decoding if p in keep]
        elif kind in (PolicyKind.UNIFIED_H2O, PolicyKind.PYRAMID_INFER):
            if len(retained) > unified_total:
                combined = prefill + decoding
                tail = combined[len(combined) - unified_local :] if unified_local else []
                older = combined[: len(combined) - unified_local] if unified_local else combined
                keep = _naive_top_k(candidate_scores(older), unified_history) | set(tail)
                drop([p for p in combined if p not in keep])
                prefill = [p for p in prefill if p in keep]
                decoding = [p for p in decoding if p in keep]
        elif kind is PolicyKind.UNIFIED_STREAMING:
            if len(retained) > unified_total:
                combined = prefill + decoding
                head = unified_total // 2 + unified_total % 2
                tail = unified_total // 2
                keep = set(combined[:head]) | set(combined[len(combined) - tail :])
                prefill = [p for p in prefill if p in keep]
                decoding = [p for p in decoding if p in keep]

        history.append((frozenset(prefill), frozenset(decoding)))
    return history


def check_policy_equivalence(
    policy: DecodingPolicy,
    trace: Trace,
    prefill_positions: Sequence[int],
    steps: int | None = None,
) -> str | None:
    """Run the optimized trace-replay path and the naive simulator on the
    same inputs; return None when every per-step retained set matches, or a
    message describing the first divergence."""
    steps = steps if steps is not None else min(policy.budget.max_decode_steps, trace.T)
    prefill = prefill_result_from_positions(trace, prefill_positions)
    record = decode_loop(trace, prefill, policy, steps, capture_positions=True)
    naive = naive_policy_simulator(policy, trace, prefill_positions, steps)
    for t in range(1, steps + 1):
        got = record.positions_at(t)
        want = naive[t - 1]
        if got != want:
            return (
                f"{policy.kind.value}: step {t} diverges: "
                f"optimized prefill/decoding sizes {len(got[0])}/{len(got[1])}, "
                f"naive {len(want[0])}/{len(want[1])}"
            )
    return None

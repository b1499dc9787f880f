"""Decode-phase eviction policies.

The three phase-separated strategies (slide, adaptive, discontinuous) plus
the unified and append-only baselines, expressed as per-step state machines
over (pool, attention row, step counter).

Step indices are decoding-relative: t = 1 is the first generated token, so
a policy's trigger conditions read off t directly instead of absolute
sequence positions. The engine appends the new entry before calling the
policy, which means the decoding pool may exceed its budget by one entry
inside a step; budgets are enforced at step end.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from enum import Enum

from .core import BudgetConfig, CachePool, PhaseState, evict_decoding
from .selection import (
    AttentionRow,
    ScoreAccumulator,
    ScoreVector,
    observation_window_scores,
    top_k,
)


class PolicyKind(Enum):
    PREFILL_ONLY = "prefill_only"
    UNIFIED_H2O = "unified_h2o"
    UNIFIED_STREAMING = "unified_streaming"
    PYRAMID_INFER = "pyramid_infer"
    SCOPE_SLIDE = "scope_slide"
    SCOPE_ADAPTIVE = "scope_adaptive"
    SCOPE_DISCONTINUOUS = "scope_discontinuous"


SCOPE_KINDS = frozenset(
    {PolicyKind.SCOPE_SLIDE, PolicyKind.SCOPE_ADAPTIVE, PolicyKind.SCOPE_DISCONTINUOUS}
)
UNIFIED_KINDS = frozenset(
    {PolicyKind.UNIFIED_H2O, PolicyKind.UNIFIED_STREAMING, PolicyKind.PYRAMID_INFER}
)
_SCORED_UNIFIED = frozenset({PolicyKind.UNIFIED_H2O, PolicyKind.PYRAMID_INFER})


class SelectorKind(Enum):
    CUMULATIVE = "cumulative"
    WINDOW = "window"


@dataclass(frozen=True)
class DecodingPolicy:
    """Decode-phase policy choice plus its knobs.

    ``seed_prefill_scores`` controls whether unified cumulative selectors
    start from the prompt-phase attention mass of the retained entries.
    ``layer_budget`` overrides the total per-layer budget for the pyramid
    baseline; ``taper_ratio`` shapes its per-layer allocation.
    """

    kind: PolicyKind
    budget: BudgetConfig
    selector: SelectorKind = SelectorKind.CUMULATIVE
    observation_window: int = 8
    seed_prefill_scores: bool = True
    layer_budget: int | None = None
    taper_ratio: float = 0.5

    def for_layer(self, layer_budget: int) -> "DecodingPolicy":
        return replace(self, layer_budget=layer_budget)


@dataclass(frozen=True)
class StepDecision:
    """Audit record for one policy step. ``ran_selection`` marks that the
    policy executed its retention-update operation; ``kept_positions`` is
    the post-step retained set of the section it manages (decoding side
    for phase-separated kinds, the whole pool for unified kinds)."""

    ran_selection: bool
    kept_positions: frozenset[int] | None
    evicted_count: int


_APPEND_ONLY = StepDecision(ran_selection=False, kept_positions=None, evicted_count=0)


def adaptive_budget(t: int, max_steps: int, beta1: int, beta2: int) -> int:
    """Linearly growing essential-history budget: 0 through beta2, then
    beta1*(t-beta2) // (max_steps-beta2), reaching beta1 at t == max_steps."""
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    if max_steps <= beta2:
        raise ValueError(f"max_steps={max_steps} must exceed beta2={beta2}")
    if t <= beta2:
        return 0
    return beta1 * (t - beta2) // (max_steps - beta2)


def selection_interval(max_steps: int, beta1: int, beta2: int) -> int:
    """Steps between discontinuous selection executions:
    (max_steps - beta2) // beta1."""
    if beta1 == 0:
        raise ValueError("beta1=0 leaves no selection interval (pure sliding window)")
    if max_steps <= beta2:
        raise ValueError(f"max_steps={max_steps} must exceed beta2={beta2}")
    interval = (max_steps - beta2) // beta1
    if interval == 0:
        raise ValueError(
            f"beta1={beta1} exceeds max_steps-beta2={max_steps - beta2}; interval collapses to zero"
        )
    return interval


def discontinuous_due(t: int, max_steps: int, beta1: int, beta2: int) -> bool:
    """True iff a discontinuous-strategy selection is scheduled at step t."""
    if t <= beta2:
        return False
    return (t - beta2) % selection_interval(max_steps, beta1, beta2) == 0


class PolicyRunner:
    """Per-(sequence, layer) policy state machine.

    Call :meth:`step` once per decode step, after the new entry has been
    appended to the pool and the attention row over the retained entries
    (including the new one) has been computed.
    """

    def __init__(self, policy: DecodingPolicy, prompt_len: int) -> None:
        self.policy = policy
        self.prompt_len = prompt_len
        self._acc = ScoreAccumulator()
        self._recent_rows: deque[ScoreVector] = deque(maxlen=policy.observation_window)
        b = policy.budget
        if policy.kind is PolicyKind.PYRAMID_INFER and policy.layer_budget is not None:
            total = policy.layer_budget
        else:
            total = b.total_budget
        self._unified_local = min(b.alpha2 + b.beta2, total)
        self._unified_history = total - self._unified_local
        self._unified_total = total

    def seed_scores(self, prompt_scores: ScoreVector) -> None:
        """Give unified cumulative selectors the prompt-phase attention mass
        of the retained prompt entries. No-op for other configurations."""
        if (
            self.policy.kind in _SCORED_UNIFIED
            and self.policy.selector is SelectorKind.CUMULATIVE
            and self.policy.seed_prefill_scores
        ):
            self._acc.add_row(prompt_scores)

    def step(self, pool: CachePool, row: AttentionRow, state: PhaseState) -> tuple[CachePool, StepDecision]:
        t = state.step
        kind = self.policy.kind
        if kind is PolicyKind.PREFILL_ONLY:
            return pool, _APPEND_ONLY
        self._observe(row)
        if kind is PolicyKind.SCOPE_SLIDE:
            return self._step_slide(pool)
        if kind is PolicyKind.SCOPE_ADAPTIVE:
            return self._step_adaptive(pool, t)
        if kind is PolicyKind.SCOPE_DISCONTINUOUS:
            return self._step_discontinuous(pool, t)
        if kind is PolicyKind.UNIFIED_STREAMING:
            return self._step_streaming(pool)
        # unified_h2o and pyramid_infer share the scored unified update
        return self._step_unified_scored(pool)

    # ------------------------------------------------------------------
    # selector state

    def _observe(self, row: AttentionRow) -> None:
        if self.policy.kind in SCOPE_KINDS:
            row = row.restrict_from(self.prompt_len)
        if self.policy.kind is PolicyKind.UNIFIED_STREAMING:
            return
        if self.policy.selector is SelectorKind.CUMULATIVE:
            self._acc.add_row(row)
        else:
            self._recent_rows.append(row)

    def _selector_scores(self, candidates: list[int]) -> ScoreVector:
        if self.policy.selector is SelectorKind.CUMULATIVE:
            return self._acc.scores_for(candidates)
        window = observation_window_scores(
            list(self._recent_rows), self.policy.observation_window, aggregation="mean"
        )
        lookup = window.to_dict()
        return ScoreVector(
            candidates, [lookup.get(p, 0.0) for p in candidates], validate=False
        )

    # ------------------------------------------------------------------
    # phase-separated strategies

    def _evict_decoding_to(self, pool: CachePool, history_k: int, local: int) -> tuple[CachePool, StepDecision]:
        dec = [e.position for e in pool.decoding_entries]
        recent = dec[len(dec) - local :] if local else []
        older = dec[: len(dec) - local] if local else dec
        selected = top_k(self._selector_scores(older), history_k)
        keep = frozenset(selected) | frozenset(recent)
        evicted = [p for p in dec if p not in keep]
        new_pool = evict_decoding(pool, keep)
        if self.policy.selector is SelectorKind.CUMULATIVE:
            self._acc.drop(evicted)
        return new_pool, StepDecision(True, keep, len(evicted))

    def _step_slide(self, pool: CachePool) -> tuple[CachePool, StepDecision]:
        b = self.policy.budget
        if pool.decoding_size <= b.decoding_budget:
            return pool, _APPEND_ONLY
        return self._evict_decoding_to(pool, b.beta1, b.beta2)

    def _step_adaptive(self, pool: CachePool, t: int) -> tuple[CachePool, StepDecision]:
        b = self.policy.budget
        if t <= b.beta2:
            return pool, _APPEND_ONLY
        target = b.beta2 + adaptive_budget(t, b.max_decode_steps, b.beta1, b.beta2)
        if pool.decoding_size <= target:
            return pool, _APPEND_ONLY
        return self._evict_decoding_to(pool, target - b.beta2, b.beta2)

    def _step_discontinuous(self, pool: CachePool, t: int) -> tuple[CachePool, StepDecision]:
        b = self.policy.budget
        if not discontinuous_due(t, b.max_decode_steps, b.beta1, b.beta2):
            return pool, _APPEND_ONLY
        target = b.beta2 + adaptive_budget(t, b.max_decode_steps, b.beta1, b.beta2)
        if pool.decoding_size <= target:
            return pool, _APPEND_ONLY
        return self._evict_decoding_to(pool, target - b.beta2, b.beta2)

    # ------------------------------------------------------------------
    # unified baselines (may evict prompt-side entries)

    def _filter_unified(self, pool: CachePool, keep: frozenset[int]) -> tuple[CachePool, int]:
        before = pool.total_size
        new_pool = CachePool(
            tuple(e for e in pool.prefill_entries if e.position in keep),
            tuple(e for e in pool.decoding_entries if e.position in keep),
            _validate=False,
        )
        if self.policy.selector is SelectorKind.CUMULATIVE:
            evicted = [e.position for e in pool.all_entries() if e.position not in keep]
            self._acc.drop(evicted)
        return new_pool, before - len(keep)

    def _step_unified_scored(self, pool: CachePool) -> tuple[CachePool, StepDecision]:
        if pool.total_size <= self._unified_total:
            return pool, _APPEND_ONLY
        positions = pool.all_positions().tolist()
        local = self._unified_local
        recent = positions[len(positions) - local :] if local else []
        older = positions[: len(positions) - local] if local else positions
        selected = top_k(self._selector_scores(older), self._unified_history)
        keep = frozenset(selected) | frozenset(recent)
        new_pool, evicted = self._filter_unified(pool, keep)
        return new_pool, StepDecision(True, keep, evicted)

    def _step_streaming(self, pool: CachePool) -> tuple[CachePool, StepDecision]:
        total = self._unified_total
        if pool.total_size <= total:
            return pool, _APPEND_ONLY
        positions = pool.all_positions().tolist()
        head = total // 2 + total % 2
        tail = total // 2
        keep = frozenset(positions[:head]) | frozenset(positions[len(positions) - tail :])
        new_pool, evicted = self._filter_unified(pool, keep)
        return new_pool, StepDecision(True, keep, evicted)

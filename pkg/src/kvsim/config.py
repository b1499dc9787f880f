"""Experiment configuration: line-oriented ``key = value`` files.

Dotted keys group the prompt-phase, decode-phase, and metrics settings.
Comma-separated values make a list. Comments start with ``#``. Unknown or
ill-typed keys fail with a diagnostic naming the key.

Policy tokens map to whole pipelines. The phase-separated and append-only
tokens use the configured prompt compression; the unified baselines
compress the prompt with their own scheme at the full combined budget so
every pipeline works against the same total.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .core import BudgetConfig
from .decoding import DecodingPolicy, PolicyKind, SelectorKind
from .prefill import PrefillPolicy, PrefillPolicyKind


class ConfigError(Exception):
    """Invalid experiment configuration."""


POLICY_TOKENS = (
    "full",
    "prefill_only",
    "h2o",
    "streaming",
    "pyramid_infer",
    "scope_slide",
    "scope_adaptive",
    "scope_discontinuous",
)

_DECODING_KIND = {
    "full": PolicyKind.PREFILL_ONLY,
    "prefill_only": PolicyKind.PREFILL_ONLY,
    "h2o": PolicyKind.UNIFIED_H2O,
    "streaming": PolicyKind.UNIFIED_STREAMING,
    "pyramid_infer": PolicyKind.PYRAMID_INFER,
    "scope_slide": PolicyKind.SCOPE_SLIDE,
    "scope_adaptive": PolicyKind.SCOPE_ADAPTIVE,
    "scope_discontinuous": PolicyKind.SCOPE_DISCONTINUOUS,
}

_PREFILL_KINDS = {k.value: k for k in PrefillPolicyKind}
_SELECTORS = {s.value: s for s in SelectorKind}


@dataclass
class ExperimentConfig:
    mode: str = "closed_loop"
    seeds: list[int] = field(default_factory=lambda: [0])
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    recency_bias: float = 0.0
    M: int | None = None
    T: int | None = None
    policies: list[str] = field(default_factory=lambda: ["scope_slide"])
    prefill_policy: str = "topk_local"
    alpha1: int = 0
    alpha2: int = 8
    pooling_width: int = 7
    taper_ratio: float = 0.5
    score_mode: str = "window"
    observation_rows: int | None = None
    beta1: int = 0
    beta2: int = 0
    selector: str = "cumulative"
    seed_prefill_scores: bool = True
    observation_window: int = 8
    hh_fraction: float = 0.15
    checkpoints: list[int] = field(default_factory=list)
    bytes_per_scalar: int = 2
    output_dir: str = "out"
    trace_path: str | None = None
    trace_synthetic: bool = False
    timestamp: bool = True
    workers: int = 1

    def validate(self) -> None:
        if self.mode not in ("closed_loop", "trace_replay"):
            raise ConfigError(f"mode: expected closed_loop or trace_replay, got {self.mode!r}")
        if self.M is None or self.M < 1:
            raise ConfigError("M: a prompt length >= 1 is required")
        if self.T is None or self.T < 1:
            raise ConfigError("T: an output length >= 1 is required")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if not self.policies:
            raise ConfigError("policies: at least one policy is required")
        for token in self.policies:
            if token not in POLICY_TOKENS:
                raise ConfigError(f"policies: unknown policy {token!r} (known: {', '.join(POLICY_TOKENS)})")
        if self.prefill_policy not in _PREFILL_KINDS:
            raise ConfigError(f"prefill.policy: unknown policy {self.prefill_policy!r}")
        if self.selector not in _SELECTORS:
            raise ConfigError(f"decoding.selector: expected cumulative or window, got {self.selector!r}")
        if self.score_mode not in ("window", "sum"):
            raise ConfigError(f"prefill.score_mode: expected window or sum, got {self.score_mode!r}")
        if self.mode == "trace_replay" and not self.trace_synthetic and not self.trace_path:
            raise ConfigError("trace: trace_replay mode needs a trace path or trace.synthetic = true")
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 1:
            raise ConfigError("d_model / n_heads / n_layers: all must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model: {self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 < self.hh_fraction <= 1.0:
            raise ConfigError(f"metrics.hh_fraction: must be in (0, 1], got {self.hh_fraction}")
        for t in self.checkpoints:
            if not 1 <= t <= self.T:
                raise ConfigError(f"metrics.checkpoints: checkpoint {t} outside 1..{self.T}")
        if self.workers < 1:
            raise ConfigError(f"workers: must be >= 1, got {self.workers}")
        for name in ("alpha1", "alpha2", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be nonnegative")

    def budget(self) -> BudgetConfig:
        return BudgetConfig(
            alpha1=self.alpha1, alpha2=self.alpha2,
            beta1=self.beta1, beta2=self.beta2,
            max_decode_steps=self.T,
        )

    def base_prefill_policy(self) -> PrefillPolicy:
        return PrefillPolicy(
            kind=_PREFILL_KINDS[self.prefill_policy],
            alpha1=self.alpha1,
            alpha2=self.alpha2,
            pooling_width=self.pooling_width,
            taper_ratio=self.taper_ratio,
            score_mode=self.score_mode,
            observation_rows=self.observation_rows,
        )

    def pipeline(self, token: str) -> tuple[PrefillPolicy, DecodingPolicy]:
        """Resolve a policy token into its (prompt policy, decode policy)
        pair. Unified baselines fold the decode budget into their prompt
        compression so the totals match the phase-separated pipelines."""
        budget = self.budget()
        decoding = DecodingPolicy(
            kind=_DECODING_KIND[token],
            budget=budget,
            selector=_SELECTORS[self.selector],
            observation_window=self.observation_window,
            seed_prefill_scores=self.seed_prefill_scores,
            taper_ratio=self.taper_ratio,
        )
        prefill = self.base_prefill_policy()
        if token == "full":
            prefill = replace(prefill, kind=PrefillPolicyKind.FULL)
        elif token == "h2o":
            prefill = replace(
                prefill,
                kind=PrefillPolicyKind.TOPK_LOCAL,
                alpha1=self.alpha1 + self.beta1,
                alpha2=self.alpha2 + self.beta2,
                score_mode="sum",
            )
        elif token == "streaming":
            prefill = replace(
                prefill,
                kind=PrefillPolicyKind.STREAMING,
                alpha1=budget.total_budget - prefill.alpha2,
            )
        elif token == "pyramid_infer":
            prefill = replace(
                prefill,
                kind=PrefillPolicyKind.PYRAMID,
                alpha1=self.alpha1 + self.beta1,
                alpha2=self.alpha2 + self.beta2,
            )
        return prefill, decoding


_BOOL = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}

# key -> (attribute, parser)
_KEYMAP: dict[str, tuple[str, str]] = {
    "mode": ("mode", "str"),
    "seed": ("seeds", "int_list"),
    "seeds": ("seeds", "int_list"),
    "d_model": ("d_model", "int"),
    "n_heads": ("n_heads", "int"),
    "n_layers": ("n_layers", "int"),
    "recency_bias": ("recency_bias", "float"),
    "m": ("M", "int"),
    "t": ("T", "int"),
    "policies": ("policies", "str_list"),
    "decoding.policy": ("policies", "str_list"),
    "prefill.policy": ("prefill_policy", "str"),
    "prefill.alpha1": ("alpha1", "int"),
    "prefill.alpha2": ("alpha2", "int"),
    "prefill.pooling_width": ("pooling_width", "int"),
    "prefill.taper_ratio": ("taper_ratio", "float"),
    "prefill.score_mode": ("score_mode", "str"),
    "prefill.observation_rows": ("observation_rows", "int"),
    "decoding.beta1": ("beta1", "int"),
    "decoding.beta2": ("beta2", "int"),
    "decoding.selector": ("selector", "str"),
    "decoding.seed_prefill_scores": ("seed_prefill_scores", "bool"),
    "decoding.observation_window": ("observation_window", "int"),
    "decoding.taper_ratio": ("taper_ratio", "float"),
    "metrics.hh_fraction": ("hh_fraction", "float"),
    "metrics.checkpoints": ("checkpoints", "int_list"),
    "metrics.bytes_per_scalar": ("bytes_per_scalar", "int"),
    "output_dir": ("output_dir", "str"),
    "trace": ("trace_path", "str"),
    "trace.path": ("trace_path", "str"),
    "trace.synthetic": ("trace_synthetic", "bool"),
    "timestamp": ("timestamp", "bool"),
    "workers": ("workers", "int"),
}

# sweep axes the CLI can override per cell
SWEEP_AXES = {
    "alpha1": "alpha1",
    "alpha2": "alpha2",
    "beta1": "beta1",
    "beta2": "beta2",
    "t": "T",
    "m": "M",
    "hh_fraction": "hh_fraction",
}


def _parse_value(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return _BOOL[raw.lower()]
        if kind == "int_list":
            return [int(v.strip()) for v in raw.split(",") if v.strip()]
        if kind == "str_list":
            return [v.strip() for v in raw.split(",") if v.strip()]
        return raw
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{key}: cannot parse value {raw!r}") from exc


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {line_no}: expected 'key = value', got {raw_line!r}")
        key, _, raw = line.partition("=")
        key = key.strip().lower()
        raw = raw.strip().strip("[]")
        if key not in _KEYMAP:
            raise ConfigError(f"{source}: line {line_no}: unknown config key {key!r}")
        attr, kind = _KEYMAP[key]
        setattr(cfg, attr, _parse_value(key, kind, raw))
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config_text(text, source=str(path))
    cfg.validate()
    return cfg

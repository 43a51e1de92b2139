"""Shared configuration types, score distributions and the config-file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError

# Boundary strings the default trigger set is built from. Token ids are
# resolved offline against a vocabulary; see :func:`trigger_ids`.
BOUNDARY_STRINGS: tuple[str, ...] = (".", "?", "!", ";", "\n")

# The toy vocabulary reserves its first ids for the boundary strings, in
# the order above.
TOY_VOCAB_SPECIALS: dict[str, int] = {s: i for i, s in enumerate(BOUNDARY_STRINGS)}

MASS_TOL = 1e-9


@dataclass(frozen=True)
class SelectorConfig:
    alpha: float = 1.0
    gamma: float = 1.0
    beta: float = 1.0
    p_curve: float = 2.0
    eta: float = 0.5
    lambda_clip: float = 0.02
    alpha_soft: float = 0.5
    alpha_cross: float = 0.35
    temperature: float = 1.0
    nms_radius: int = 2
    epsilon: float = 1e-8
    k_budget: int = 2048
    # how query heads sharing a KV head are pooled into one logit row
    head_pooling: str = "mean"

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError("alpha must lie in (0, 1]", alpha=self.alpha)
        if not (0.0 <= self.lambda_clip <= 1.0):
            raise ConfigError("lambda_clip must lie in [0, 1]", lambda_clip=self.lambda_clip)
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0", temperature=self.temperature)
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0", epsilon=self.epsilon)
        for name in ("gamma", "beta", "eta", "alpha_soft", "alpha_cross"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a finite value >= 0", **{name: v})
        if not self.p_curve >= 1:
            raise ConfigError("p_curve must be >= 1", p_curve=self.p_curve)
        if self.nms_radius < 0:
            raise ConfigError("nms_radius must be >= 0", nms_radius=self.nms_radius)
        if self.k_budget < 0:
            raise ConfigError("k_budget must be >= 0", k_budget=self.k_budget)
        if self.head_pooling not in ("mean", "max"):
            raise ConfigError("head_pooling must be 'mean' or 'max'", head_pooling=self.head_pooling)


@dataclass(frozen=True)
class TriggerConfig:
    trigger_tokens: frozenset[int] = field(default_factory=frozenset)
    t_max: int = 64
    window_decode: int = 1
    window_prefill: int = 16

    def __post_init__(self) -> None:
        toks = frozenset(self.trigger_tokens)
        if any(not isinstance(t, (int, np.integer)) or isinstance(t, bool) for t in toks):
            raise ConfigError("trigger_tokens must be integer token ids")
        object.__setattr__(self, "trigger_tokens", frozenset(int(t) for t in toks))
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1", t_max=self.t_max)
        if self.window_decode < 1 or self.window_prefill < 1:
            raise ConfigError(
                "window widths must be >= 1",
                window_decode=self.window_decode,
                window_prefill=self.window_prefill,
            )


@dataclass(frozen=True)
class CacheLimits:
    n_sink: int = 4
    n_recent: int = 256
    k_budget: int = 2048

    def __post_init__(self) -> None:
        if self.n_sink < 0:
            raise ConfigError("n_sink must be >= 0", n_sink=self.n_sink)
        if self.n_recent < 1:
            raise ConfigError("n_recent must be >= 1", n_recent=self.n_recent)
        if self.k_budget < 0:
            raise ConfigError("k_budget must be >= 0", k_budget=self.k_budget)

    def check_context(self, max_positions: int) -> None:
        if self.n_sink + self.n_recent > max_positions:
            raise ConfigError(
                "n_sink + n_recent exceeds the maximum context length",
                n_sink=self.n_sink,
                n_recent=self.n_recent,
                max_positions=max_positions,
            )


@dataclass(frozen=True)
class ScoreDistribution:
    """Probability mass over an ordered list of absolute prefix positions (1-based)."""

    support: np.ndarray
    mass: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "support", np.asarray(self.support, dtype=np.int64))
        object.__setattr__(self, "mass", np.asarray(self.mass, dtype=np.float64))

    def __len__(self) -> int:
        return int(self.mass.shape[0])


def normalize(v: Iterable[float], support: Iterable[int] | None = None) -> ScoreDistribution:
    """l1-normalize a non-negative vector into a :class:`ScoreDistribution`.

    ``support`` defaults to positions ``1..len(v)``.
    """
    mass = np.asarray(list(v) if not isinstance(v, np.ndarray) else v, dtype=np.float64)
    if mass.ndim != 1 or mass.size == 0:
        raise ConfigError("normalize expects a non-empty 1-D vector")
    if np.any(mass < 0) or not np.all(np.isfinite(mass)):
        raise ConfigError("normalize expects finite non-negative entries")
    total = mass.sum()
    if total <= 0:
        raise ConfigError("normalize expects a non-zero vector")
    pos = np.arange(1, mass.size + 1) if support is None else np.asarray(list(support), dtype=np.int64)
    return ScoreDistribution(pos, mass / total)


def validate_distribution(d: ScoreDistribution, prefix_len: int | None = None) -> bool:
    support = np.asarray(d.support)
    mass = np.asarray(d.mass, dtype=np.float64)
    if support.ndim != 1 or mass.ndim != 1 or support.shape != mass.shape:
        return False
    if mass.size == 0:
        return False
    if not np.all(np.isfinite(mass)) or np.any(mass < 0):
        return False
    if abs(float(mass.sum()) - 1.0) > MASS_TOL:
        return False
    if support.size and (support[0] < 1 or np.any(np.diff(support) <= 0)):
        return False
    if prefix_len is not None and support.size and support[-1] > prefix_len:
        return False
    return True


def trigger_ids(vocab: Mapping[str, int], strings: Iterable[str] = BOUNDARY_STRINGS) -> frozenset[int]:
    """Resolve boundary strings to token ids, skipping strings the vocabulary lacks."""
    return frozenset(int(vocab[s]) for s in strings if s in vocab)


def default_config(
    vocab: Mapping[str, int] | None = None,
) -> tuple[SelectorConfig, TriggerConfig, CacheLimits]:
    vocab = TOY_VOCAB_SPECIALS if vocab is None else vocab
    sel = SelectorConfig()
    trig = TriggerConfig(trigger_tokens=trigger_ids(vocab))
    lim = CacheLimits(k_budget=sel.k_budget)
    return sel, trig, lim


# ---------------------------------------------------------------------------
# key=value config files
# ---------------------------------------------------------------------------

_SELECTOR_KEYS = {f.name for f in fields(SelectorConfig)}
_TRIGGER_KEYS = {f.name for f in fields(TriggerConfig)}
_LIMIT_KEYS = {f.name for f in fields(CacheLimits)}
CONFIG_KEYS = frozenset(_SELECTOR_KEYS | _TRIGGER_KEYS | _LIMIT_KEYS)


def parse_key_values(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError("expected key = value", source=source, line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError("duplicate key", source=source, line=lineno, key=key)
        out[key] = value.strip()
    return out


def _coerce(name: str, raw: str, default: object) -> object:
    try:
        if name == "trigger_tokens":
            return frozenset(int(t) for t in raw.replace(",", " ").split())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError("bad value", key=name, value=raw) from exc


def config_from_mapping(
    values: Mapping[str, str],
    base: tuple[SelectorConfig, TriggerConfig, CacheLimits] | None = None,
    extra_keys: Iterable[str] = (),
) -> tuple[SelectorConfig, TriggerConfig, CacheLimits]:
    """Apply string overrides to ``base`` (the defaults if omitted).

    Keys outside the config reference and ``extra_keys`` are a hard error.
    """
    allowed = CONFIG_KEYS | set(extra_keys)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError("unknown config keys", keys=unknown)
    sel, trig, lim = base if base is not None else default_config()
    groups = []
    for obj, keys in ((sel, _SELECTOR_KEYS), (trig, _TRIGGER_KEYS), (lim, _LIMIT_KEYS)):
        upd = {k: _coerce(k, values[k], getattr(obj, k)) for k in keys if k in values}
        groups.append(replace(obj, **upd) if upd else obj)
    return groups[0], groups[1], groups[2]


def load_config(text: str, source: str = "<string>") -> tuple[SelectorConfig, TriggerConfig, CacheLimits]:
    return config_from_mapping(parse_key_values(text, source))


def read_config_file(path: str | Path) -> tuple[SelectorConfig, TriggerConfig, CacheLimits]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=str(path)) from exc
    return load_config(text, source=str(path))


def _fmt(v: object) -> str:
    if isinstance(v, frozenset):
        return ",".join(str(t) for t in sorted(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(sel: SelectorConfig, trig: TriggerConfig, lim: CacheLimits) -> str:
    if sel.k_budget != lim.k_budget:
        raise ConfigError("selector and cache k_budget disagree", selector=sel.k_budget, cache=lim.k_budget)
    lines = ["# selector"]
    lines += [f"{f.name} = {_fmt(getattr(sel, f.name))}" for f in fields(SelectorConfig)]
    lines.append("# trigger policy")
    lines += [f"{f.name} = {_fmt(getattr(trig, f.name))}" for f in fields(TriggerConfig)]
    lines.append("# cache limits")
    lines += [f"{f.name} = {_fmt(getattr(lim, f.name))}" for f in fields(CacheLimits) if f.name != "k_budget"]
    return "\n".join(lines) + "\n"

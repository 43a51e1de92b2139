"""Measured quantities: flop model, support stability and run invariants."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..attention import KvStore, ModelSpec, ToyModel, build_toy_model, dense_attention_step, prefill
from ..core import CacheLimits, TriggerConfig
from ..errors import ConfigError
from ..scheduler import RequestResult, check_segment_freezing


def flop_model(L: int, support: int, slow_fraction: float) -> float:
    """Dense per-step attention reads over the amortized slow/fast mix.

    ``mixed = slow_fraction * L + (1 - slow_fraction) * support``.
    """
    if not 0 < support <= L:
        raise ConfigError("support must satisfy 0 < support <= L", support=support, L=L)
    if not 0 <= slow_fraction <= 1:
        raise ConfigError("slow_fraction must be in [0, 1]", slow_fraction=slow_fraction)
    return L / (slow_fraction * L + (1.0 - slow_fraction) * support)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 1.0


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def segment_prompt(
    rng: np.random.Generator,
    vocab_size: int,
    trigger_tokens,
    n_segments: int,
    seg_len: tuple[int, int] = (12, 32),
    topic_size: int = 6,
) -> list[int]:
    """Synthetic prompt of trigger-delimited sentences.

    Each sentence draws its tokens from its own small topic subset of the
    non-trigger vocabulary and ends with a trigger token.
    """
    trig = sorted(int(t) for t in trigger_tokens)
    words = np.setdiff1d(np.arange(vocab_size), trig)
    if not trig or words.size == 0:
        raise ConfigError("need both trigger and non-trigger tokens", vocab_size=vocab_size)
    out: list[int] = []
    for _ in range(n_segments):
        topic = rng.choice(words, size=min(topic_size, words.size), replace=False)
        n = int(rng.integers(seg_len[0], seg_len[1] + 1))
        out += rng.choice(topic, size=n).tolist()
        out.append(int(rng.choice(trig)))
    return out


@dataclass
class StabilityReport:
    within_mean: float
    crossing_mean: float
    within_pairs: int
    crossing_pairs: int
    k: int

    @property
    def direction_holds(self) -> bool:
        return self.within_mean >= self.crossing_mean

    def to_dict(self) -> dict:
        return asdict(self) | {"direction_holds": self.direction_holds}


def top_k_supports(model: ToyModel, tokens: Sequence[int], k: int) -> list[list[list[set]]]:
    """Top-k attended positions for every query position, per layer and KV head.

    Returns ``sets[layer][head][i]`` for query position ``i + 1`` (1-based keys).
    Ties go to the lower position.
    """
    store = KvStore.for_model(model.spec, capacity=len(tokens), query_window=1)
    probs: list[np.ndarray] = []
    prefill(model, store, tokens, probs=probs)
    out = []
    for p in probs:  # (H, n, L)
        H, n, _ = p.shape
        layer = []
        for h in range(H):
            rows = []
            for i in range(n):
                row = p[h, i, : i + 1]
                order = np.lexsort((np.arange(i + 1), -row))[:k]
                rows.append(set((order + 1).tolist()))
            layer.append(rows)
        out.append(layer)
    return out


def measure_support_stability(
    model: ToyModel,
    prompt: Sequence[int],
    k: int,
    trig: TriggerConfig,
    max_new: int = 0,
) -> StabilityReport:
    """Consecutive-step top-k Jaccard overlap, within vs across trigger-delimited segments.

    Every position of the prompt is treated as a (teacher-forced) decode step
    and ``max_new`` greedy tokens are appended. Step pairs ``(i, i+1)`` whose
    token ``i`` is a trigger cross a segment boundary. Pairs where either step
    sees at most ``k`` keys are skipped because their top-k is the whole prefix.
    """
    tokens = list(int(t) for t in prompt)
    if max_new:
        store = KvStore.for_model(model.spec, capacity=len(tokens) + max_new, query_window=1)
        out = prefill(model, store, tokens)
        for _ in range(max_new):
            tokens.append(int(np.argmax(out.logits_vocab)))
            out = dense_attention_step(model, store, tokens[-1])
    sets = top_k_supports(model, tokens, k)
    within, crossing = [], []
    for i in range(k, len(tokens) - 1):  # query positions i+1 and i+2 (1-based) both see > k keys
        crosses = tokens[i] in trig.trigger_tokens
        vals = [jaccard(head[i], head[i + 1]) for layer in sets for head in layer]
        (crossing if crosses else within).append(float(np.mean(vals)))
    return StabilityReport(
        within_mean=float(np.mean(within)) if within else float("nan"),
        crossing_mean=float(np.mean(crossing)) if crossing else float("nan"),
        within_pairs=len(within),
        crossing_pairs=len(crossing),
        k=k,
    )


def stability_sweep(
    seeds: Sequence[int],
    trig: TriggerConfig,
    k: int = 8,
    n_segments: int = 10,
    max_new: int = 32,
    vocab_size: int = 64,
) -> list[tuple[int, StabilityReport]]:
    """Support stability on one seeded toy model and segment prompt per seed."""
    spec = ModelSpec(vocab_size=vocab_size, max_positions=4096)
    out = []
    for seed in seeds:
        model = build_toy_model(spec, seed=seed)
        prompt = segment_prompt(np.random.default_rng(seed), vocab_size, trig.trigger_tokens, n_segments)
        out.append((seed, measure_support_stability(model, prompt, k, trig, max_new=max_new)))
    return out


def run_violations(result: RequestResult, limits: CacheLimits, trig: TriggerConfig) -> list[str]:
    """Invariant checks asserted on every harness run."""
    problems = []
    bad = check_segment_freezing(result.log)
    if bad:
        problems.append(f"selected sets changed inside a fast segment at steps {bad[:10]}")
    cap = limits.n_sink + limits.n_recent + limits.k_budget
    last_slow = None
    for rec in result.log:
        if rec.type == "fast" and rec.support_size > cap:
            problems.append(f"step {rec.t}: fast support {rec.support_size} exceeds {cap}")
        if rec.type == "slow":
            if last_slow is not None and rec.t - last_slow > trig.t_max:
                problems.append(f"step {rec.t}: gap since last slow step exceeds t_max")
            last_slow = rec.t
    if result.log and result.log[0].type != "slow":
        problems.append("first step is not slow")
    return problems

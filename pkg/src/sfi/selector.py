"""Closed-form selector: slow-step attention logits -> per-KV-head Top-K positions.

The pipeline runs in two stages for one layer:

(A) continuous importance per head
    evidence f from the windowed softmax rows (power-mean aggregation),
    prior r from cached key norms and normalized positions,
    reverse-KL fusion s = (1 - lam) f + lam r with lam chosen to minimize
    ||s||^2 subject to lam <= lambda_clip;
(B) discretization in log-score space
    z = log(s + eps), within-head Soft-NMS, cross-head exclusivity, Top-K.

All arithmetic here is float64.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .core import ScoreDistribution, SelectorConfig
from .errors import AlignmentError, EmptySupportError, NonFiniteError, SupportMismatchError


@dataclass(frozen=True)
class LogitWindow:
    """Masked attention logits recorded at a slow step.

    ``values`` has shape ``(H, W, |J|)``: one ``W x |J|`` block per KV head.
    A 2-D ``(W, |J|)`` array is accepted and treated as a single head.
    """

    allowed: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        allowed = np.asarray(self.allowed, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise AlignmentError("window values must be (H, W, |J|)", shape=values.shape)
        if values.shape[2] != allowed.shape[0]:
            raise AlignmentError(
                "window width along J does not match allowed set",
                columns=values.shape[2],
                allowed=allowed.shape[0],
            )
        object.__setattr__(self, "allowed", allowed)
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def n_heads(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class CacheStats:
    """Per-head key norms on J plus the normalized position of each j in J."""

    allowed: np.ndarray
    key_norms: np.ndarray  # (H, |J|)
    normalized_pos: np.ndarray  # (|J|,)

    @property
    def j_min(self) -> int:
        return int(self.allowed[0])

    @property
    def j_max(self) -> int:
        return int(self.allowed[-1])

    @classmethod
    def from_keys(cls, allowed: Sequence[int], key_norms: np.ndarray, eps: float = 1e-8) -> "CacheStats":
        allowed = np.asarray(allowed, dtype=np.int64)
        norms = np.asarray(key_norms, dtype=np.float64)
        if norms.ndim == 1:
            norms = norms[None]
        return cls(allowed, norms, normalized_positions(allowed, eps))


def normalized_positions(allowed: np.ndarray, eps: float) -> np.ndarray:
    allowed = np.asarray(allowed, dtype=np.float64)
    if allowed.size == 0:
        return allowed
    lo, hi = allowed[0], allowed[-1]
    return (allowed - lo) / (hi - lo + eps)


@dataclass(frozen=True)
class FusedScore:
    evidence: ScoreDistribution
    prior: ScoreDistribution
    lambda_star: float
    fused: ScoreDistribution


@dataclass(frozen=True)
class RefinedScores:
    base: np.ndarray  # (H, |J|)
    after_nms: np.ndarray
    after_cross: np.ndarray


class OpCounter(Counter):
    """Elementary-operation tally keyed by stage name (instrumentation only)."""

    def per_element(self, n_heads: int, n_allowed: int, exclude: Sequence[str] = ("topk",)) -> float:
        total = sum(v for k, v in self.items() if k not in exclude)
        return total / max(1, n_heads * n_allowed)


# ---------------------------------------------------------------------------
# stage A
# ---------------------------------------------------------------------------


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def evidence_matrix(values: np.ndarray, alpha: float) -> np.ndarray:
    """Evidence for every head of a ``(H, W, |J|)`` logit block -> ``(H, |J|)``."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] == 0:
        raise EmptySupportError("empty support")
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("window logits must be finite")
    p = _row_softmax(values)
    if p.shape[1] == 1:
        # the power map and its inverse cancel exactly for a single row
        return p[:, 0, :]
    mu = np.mean(p**alpha, axis=1)
    f = mu ** (1.0 / alpha)
    return f / f.sum(axis=-1, keepdims=True)


def evidence_from_window(w: LogitWindow, cfg: SelectorConfig, head: int = 0) -> ScoreDistribution:
    f = evidence_matrix(w.values[head : head + 1], cfg.alpha)[0]
    return ScoreDistribution(w.allowed, f)


def prior_matrix(key_norms: np.ndarray, u: np.ndarray, cfg: SelectorConfig) -> np.ndarray:
    """Cache-aware prior for each head, ``(H, |J|)``. Computed in log space."""
    eps = cfg.epsilon
    key_norms = np.asarray(key_norms, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if key_norms.shape[-1] != u.shape[0]:
        raise AlignmentError("key norms and positions disagree", norms=key_norms.shape, positions=u.shape)
    if u.size == 0:
        raise EmptySupportError("empty support")
    if not np.all(np.isfinite(key_norms)) or np.any(key_norms < 0):
        raise NonFiniteError("key norms must be finite and non-negative")
    log_kn = -cfg.gamma * np.log(key_norms + eps)
    log_pos = -cfg.beta * u**cfg.p_curve + cfg.eta * np.log1p(-u + eps)
    logr = log_kn + log_pos[None, :]
    logr -= logr.max(axis=-1, keepdims=True)
    r = np.exp(logr)
    return r / r.sum(axis=-1, keepdims=True)


def prior_from_stats(stats: CacheStats, cfg: SelectorConfig, head: int = 0) -> ScoreDistribution:
    if stats.key_norms.shape[-1] != stats.allowed.shape[0]:
        raise AlignmentError(
            "cache stats are not aligned with the allowed set",
            norms=stats.key_norms.shape[-1],
            allowed=stats.allowed.shape[0],
        )
    r = prior_matrix(stats.key_norms[head : head + 1], stats.normalized_pos, cfg)[0]
    return ScoreDistribution(stats.allowed, r)


def lambda_star(f: np.ndarray, r: np.ndarray, lambda_clip: float, eps: float) -> np.ndarray:
    """Closed-form minimizer of ||(1 - lam) f + lam r||^2 on [0, lambda_clip].

    Works row-wise on ``(..., |J|)`` arrays. A denominator ``||f - r||^2``
    below ``eps`` means f ~ r; lam* is then 0.
    """
    ff = np.einsum("...j,...j->...", f, f)
    fr = np.einsum("...j,...j->...", f, r)
    rr = np.einsum("...j,...j->...", r, r)
    den = ff - 2.0 * fr + rr
    num = ff - fr
    degenerate = np.abs(den) < eps
    ratio = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))
    return np.clip(ratio, 0.0, lambda_clip)


def fuse(f: ScoreDistribution, r: ScoreDistribution, cfg: SelectorConfig) -> FusedScore:
    if f.support.shape != r.support.shape or not np.array_equal(f.support, r.support):
        raise SupportMismatchError("evidence and prior live on different supports")
    lam = float(lambda_star(f.mass, r.mass, cfg.lambda_clip, cfg.epsilon))
    s = (1.0 - lam) * f.mass + lam * r.mass
    return FusedScore(f, r, lam, ScoreDistribution(f.support, s))


# ---------------------------------------------------------------------------
# stage B
# ---------------------------------------------------------------------------


def neighborhood_max(z: np.ndarray, radius: int) -> np.ndarray:
    """Max over the symmetric rank-order window of half-width ``radius``, truncated at the ends."""
    z = np.asarray(z, dtype=np.float64)
    if radius == 0 or z.shape[-1] == 0:
        return z.copy()
    pad = [(0, 0)] * (z.ndim - 1) + [(radius, radius)]
    padded = np.pad(z, pad, constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1, axis=-1)
    return windows.max(axis=-1)


def refine_soft_nms(z: np.ndarray, cfg: SelectorConfig) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = neighborhood_max(z, cfg.nms_radius)
    return z - cfg.alpha_soft * np.maximum(m - z, 0.0)


def refine_cross_head(z: np.ndarray, cfg: SelectorConfig) -> np.ndarray:
    """Soft per-position competition across heads on an ``(H, |J|)`` score field."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None]
    scaled = z / cfg.temperature
    top = scaled.max(axis=0, keepdims=True)
    log_resp = scaled - (top + np.log(np.exp(scaled - top).sum(axis=0, keepdims=True)))
    log_resp = np.maximum(log_resp, np.log(cfg.epsilon))
    return z + cfg.alpha_cross * log_resp


def select_top_k(scores: np.ndarray, k: int, positions: np.ndarray | None = None) -> np.ndarray:
    """Return the ``k`` best positions (ascending) of one head.

    Higher score wins; equal scores go to the lower absolute position.
    ``positions`` defaults to array indices ``0..n-1``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    pos = np.arange(n, dtype=np.int64) if positions is None else np.asarray(positions, dtype=np.int64)
    if k <= 0 or n == 0:
        return np.empty(0, dtype=np.int64)
    if k >= n:
        return np.sort(pos)
    order = np.lexsort((pos, -scores))
    return np.sort(pos[order[:k]])


def refine(z: np.ndarray, cfg: SelectorConfig) -> RefinedScores:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    after_nms = refine_soft_nms(z, cfg)
    after_cross = refine_cross_head(after_nms, cfg)
    return RefinedScores(z, after_nms, after_cross)


def _trace(out: IO[str] | None, stage: str, allowed: np.ndarray, rows: np.ndarray) -> None:
    if out is None:
        return
    for h, row in enumerate(np.atleast_2d(rows)):
        rec = {"stage": stage, "head": h, "support": allowed.tolist(), "scores": [float(x) for x in row]}
        out.write(json.dumps(rec) + "\n")


def run_selector(
    w: LogitWindow,
    stats: CacheStats,
    cfg: SelectorConfig,
    k: int | None = None,
    trace: IO[str] | None = None,
    counter: OpCounter | None = None,
) -> list[np.ndarray]:
    """Full selector pipeline for one layer; returns one ascending position array per KV head."""
    if not np.array_equal(w.allowed, stats.allowed):
        raise SupportMismatchError("logit window and cache stats use different allowed sets")
    if stats.key_norms.shape != (w.n_heads, w.allowed.shape[0]):
        raise AlignmentError(
            "key norms must be (H, |J|)",
            expected=(w.n_heads, w.allowed.shape[0]),
            got=stats.key_norms.shape,
        )
    k = cfg.k_budget if k is None else k
    H, W, n = w.values.shape
    if n == 0:
        raise EmptySupportError("empty support")
    allowed = w.allowed

    # (A) continuous importance
    f = evidence_matrix(w.values, cfg.alpha)
    r = prior_matrix(stats.key_norms, stats.normalized_pos, cfg)
    lam = lambda_star(f, r, cfg.lambda_clip, cfg.epsilon)
    s = (1.0 - lam)[:, None] * f + lam[:, None] * r
    z = np.log(s + cfg.epsilon)
    _trace(trace, "evidence", allowed, f)
    _trace(trace, "prior", allowed, r)
    _trace(trace, "fused", allowed, s)

    # (B) refinement and discretization
    ref = refine(z, cfg)
    _trace(trace, "z_base", allowed, ref.base)
    _trace(trace, "after_nms", allowed, ref.after_nms)
    _trace(trace, "after_cross", allowed, ref.after_cross)
    picks = [select_top_k(ref.after_cross[h], k, allowed) for h in range(H)]

    if counter is not None:
        counter["evidence"] += H * W * n
        counter["prior"] += H * n
        counter["fuse"] += 4 * H * n
        counter["z_base"] += H * n
        counter["soft_nms"] += H * n * (2 * cfg.nms_radius + 1)
        counter["cross_head"] += H * n
        counter["topk"] += H * n * max(1, int(np.ceil(np.log2(max(n, 2)))))
    return picks

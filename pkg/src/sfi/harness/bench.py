"""Single-layer sparse vs dense attention timing on this host."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..attention import KvStore, dense_attention, reorganize_compact, two_segment_attention
from ..errors import ConfigError

BENCH_COLUMNS = (
    "L", "retention", "support", "dense_mean_s", "dense_std_s", "dense_median_s",
    "sparse_mean_s", "sparse_std_s", "sparse_median_s", "speedup",
)


@dataclass
class BenchRow:
    L: int
    retention: float
    support: int
    dense_mean_s: float
    dense_std_s: float
    dense_median_s: float
    sparse_mean_s: float
    sparse_std_s: float
    sparse_median_s: float
    speedup: float  # dense median / sparse median


def _time(fn, repeats: int) -> list[float]:
    fn()  # warm-up, discarded
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def random_store(L: int, n_kv_heads: int, head_dim: int, rng) -> KvStore:
    store = KvStore(1, n_kv_heads, head_dim, capacity=L, query_window=1)
    k = rng.standard_normal((L, n_kv_heads, head_dim)).astype(np.float32)
    v = rng.standard_normal((L, n_kv_heads, head_dim)).astype(np.float32)
    store.append(0, k, v)
    return store


def sparse_layout(L: int, retention: float, n_sink: int, n_recent: int, n_kv_heads: int, rng):
    """Sink, recent start and per-head selected sets with ``round(retention * L)`` positions in total."""
    support = max(1, min(L, int(round(retention * L))))
    n_sink = min(n_sink, support)
    n_recent = min(n_recent, support - n_sink)
    recent_start = L - n_recent + 1
    pool = np.arange(n_sink + 1, recent_start)
    k = support - n_sink - n_recent
    selected = [np.sort(rng.choice(pool, size=k, replace=False)) for _ in range(n_kv_heads)]
    return np.arange(1, n_sink + 1), recent_start, selected, support


def bench_attention(
    lengths: Sequence[int],
    retentions: Sequence[float],
    repeats: int = 5,
    n_query_heads: int = 8,
    n_kv_heads: int = 2,
    head_dim: int = 64,
    n_sink: int = 4,
    n_recent: int = 256,
    seed: int = 0,
) -> list[BenchRow]:
    """Time one decode-step attention call, dense over all L vs two-segment over the support."""
    if repeats < 3:
        raise ConfigError("repeats must be >= 3", repeats=repeats)
    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        store = random_store(L, n_kv_heads, head_dim, rng)
        q = rng.standard_normal((n_query_heads, head_dim))
        keys, values = store.keys(0), store.values(0)
        dense_t = _time(lambda: dense_attention(q, keys, values), repeats)
        for rho in retentions:
            sink, recent_start, selected, support = sparse_layout(L, rho, n_sink, n_recent, n_kv_heads, rng)
            reorganize_compact(store, 0, selected, sink)
            sparse_t = _time(lambda: two_segment_attention(q, store, 0, recent_start), repeats)
            d_med, s_med = statistics.median(dense_t), statistics.median(sparse_t)
            rows.append(BenchRow(
                L, float(rho), support,
                statistics.fmean(dense_t), statistics.stdev(dense_t), d_med,
                statistics.fmean(sparse_t), statistics.stdev(sparse_t), s_med,
                d_med / s_med,
            ))
    return rows


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(asdict(r))
    return buf.getvalue()


def monotone_inversions(rows: Sequence[BenchRow], L: int, rel_tol: float = 0.0) -> int:
    """Count speedup increases as retention grows at fixed L.

    Args:
        rel_tol: increases up to this fraction of the previous speedup are
            treated as timing noise and not counted.
    """
    pts = sorted((r.retention, r.speedup) for r in rows if r.L == L)
    return sum(b[1] > a[1] * (1.0 + rel_tol) for a, b in zip(pts, pts[1:]))

"""Attention kernels and whole-model decode steps.

Layer-level kernels take a rotated query block ``(Hq, d)`` in float64 and read
float32 keys/values, accumulating in float64. Step-level functions run the
full model for one new token and return a :class:`StepOutput`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContextOverflowError, PositionError
from ..selector import LogitWindow
from .kvstore import KvStore
from .model import ToyModel


@dataclass
class StepOutput:
    logits_vocab: np.ndarray
    attn_logits: list[LogitWindow] | None  # one window per layer, slow steps only
    flop_count: int  # attention multiply-accumulates (scores + values)
    kv_reads: int  # KV entries read, summed over layers and KV heads


def _softmax_weighted(scores: np.ndarray, values: np.ndarray) -> np.ndarray:
    # scores (H, G, L), values (H, L, d) -> (H, G, d)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return (e @ values) / e.sum(axis=-1, keepdims=True)


def dense_attention(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Full attention of one query block over every stored position.

    ``q`` is ``(Hq, d)``; ``keys``/``values`` are ``(H, L, d)``.
    """
    H, L, d = keys.shape
    qg = q.reshape(H, -1, d)
    scores = (qg @ np.swapaxes(keys, 1, 2).astype(np.float64)) / np.sqrt(d)
    out = _softmax_weighted(scores, values.astype(np.float64))
    return out.reshape(-1, d)


def two_segment_attention(
    q: np.ndarray,
    store: KvStore,
    layer: int,
    recent_start: int,
) -> tuple[np.ndarray, int]:
    """Attention over the compact segment plus the in-place recent tail.

    Compact entries at or past ``recent_start`` are skipped so no position is
    counted twice. Returns ``(out (Hq, d), kv entries read)``.
    """
    segs = store.compact(layer)
    lc = store.layers[layer]
    H, d = store.n_kv_heads, store.head_dim
    if not 1 <= recent_start <= lc.length + 1:
        raise PositionError("recent tail outside stored range", recent_start=recent_start, length=lc.length)
    qg = q.reshape(H, -1, d)
    scale = 1.0 / np.sqrt(d)
    out = np.empty_like(qg)
    reads = 0
    for h in range(H):
        seg = segs[h]
        cut = int(np.searchsorted(seg.positions, recent_start))
        kc, vc = seg.keys[:cut], seg.values[:cut]
        kt = lc.keys[h, recent_start - 1 : lc.length]
        vt = lc.values[h, recent_start - 1 : lc.length]
        store.log_read(layer, "compact", h, 0, cut)
        store.log_read(layer, "tail", h, recent_start, lc.length + 1)
        sc = (kc @ qg[h].T) * scale  # (cut, G)
        st = (kt @ qg[h].T) * scale
        m = np.maximum(sc.max(axis=0, initial=-np.inf), st.max(axis=0, initial=-np.inf))
        ec = np.exp(sc - m)
        et = np.exp(st - m)
        num = ec.T @ vc + et.T @ vt
        out[h] = num / (ec.sum(axis=0) + et.sum(axis=0))[:, None]
        reads += cut + kt.shape[0]
    return out.reshape(-1, d), reads


def window_logits(
    store: KvStore,
    layer: int,
    allowed: np.ndarray,
    width: int,
    pooling: str = "mean",
) -> LogitWindow:
    """Masked logits of the last ``width`` remembered queries over ``allowed``.

    Query heads are pooled into their KV head. Rows whose query cannot see
    all of ``allowed`` (position <= max(allowed)) are dropped.
    """
    allowed = np.asarray(allowed, dtype=np.int64)
    H, d = store.n_kv_heads, store.head_dim
    rows = store.recent_queries(layer, width)
    if allowed.size:
        rows = [(p, q) for p, q in rows if p > allowed[-1]]
    if not rows:
        return LogitWindow(allowed, np.zeros((H, 0, allowed.size)))
    k = store.layers[layer].keys[:, allowed - 1].astype(np.float64)  # (H, J, d)
    qs = np.stack([q for _, q in rows]).reshape(len(rows), H, -1, d)  # (W, H, G, d)
    logits = np.einsum("hjd,whgd->hwgj", k, qs) / np.sqrt(d)
    pooled = logits.mean(axis=2) if pooling == "mean" else logits.max(axis=2)
    return LogitWindow(allowed, pooled)


def _check_room(model: ToyModel, store: KvStore, n: int) -> int:
    start = store.prefix_len
    if start + n > model.spec.max_positions:
        raise ContextOverflowError(
            "prefix would exceed the model's maximum positions",
            prefix_len=start + n,
            max_positions=model.spec.max_positions,
        )
    return start


def _windows(store, model, allowed, window, pooling):
    if allowed is None:
        return None
    return [window_logits(store, i, allowed, window, pooling) for i in range(model.spec.n_layers)]


def dense_attention_step(
    model: ToyModel,
    store: KvStore,
    token: int,
    allowed: np.ndarray | None = None,
    window: int = 1,
    pooling: str = "mean",
) -> StepOutput:
    """Decode one token with full causal attention.

    When ``allowed`` is given, the masked logits of the last ``window``
    queries over it are recorded per layer (slow-step evidence).
    """
    spec = model.spec
    pos = _check_room(model, store, 1) + 1
    x = model.embed(token)
    for i in range(spec.n_layers):
        q, k, v = model.qkv(i, x, pos)
        store.append(i, k.astype(store.dtype), v.astype(store.dtype))
        store.remember_query(i, pos, q)
        out = dense_attention(q, store.keys(i), store.values(i))
        x = model.finish_layer(i, x, out)
    reads = spec.n_layers * spec.n_kv_heads * pos
    return StepOutput(
        model.head(x),
        _windows(store, model, allowed, window, pooling),
        flop_count=2 * spec.n_layers * spec.n_query_heads * spec.head_dim * pos,
        kv_reads=reads,
    )


def sparse_attention_step(
    model: ToyModel,
    store: KvStore,
    token: int,
    recent_start: int,
) -> StepOutput:
    """Decode one token attending only to compact (sink + selected) and the recent tail.

    ``recent_start`` is the first position of the recent window for the
    prefix that includes this token.
    """
    spec = model.spec
    pos = _check_room(model, store, 1) + 1
    x = model.embed(token)
    reads = 0
    for i in range(spec.n_layers):
        q, k, v = model.qkv(i, x, pos)
        store.append(i, k.astype(store.dtype), v.astype(store.dtype))
        store.remember_query(i, pos, q)
        out, n = two_segment_attention(q, store, i, recent_start)
        reads += n
        x = model.finish_layer(i, x, out)
    return StepOutput(
        model.head(x),
        None,
        flop_count=2 * spec.group * spec.head_dim * reads,
        kv_reads=reads,
    )


def prefill(
    model: ToyModel,
    store: KvStore,
    tokens,
    allowed: np.ndarray | None = None,
    window: int = 16,
    pooling: str = "mean",
    all_logits: bool = False,
    probs: list | None = None,
) -> StepOutput:
    """Dense causal forward over ``tokens``.

    Args:
        all_logits: return vocab logits for every position ``(n, V)`` instead
            of only the last one.
        probs: if a list, receives one ``(H, n, L)`` array per layer of
            attention weights averaged over each KV head's query group.
    """
    spec = model.spec
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[0]
    L0 = _check_room(model, store, n)
    positions = np.arange(L0 + 1, L0 + n + 1)
    x = model.embed(tokens)
    H, G, d = spec.n_kv_heads, spec.group, spec.head_dim
    causal = positions[:, None] >= np.arange(1, L0 + n + 1)[None, :]  # (n, L)
    for i in range(spec.n_layers):
        q, k, v = model.qkv(i, x, positions)  # (n, heads, d)
        store.append(i, k.astype(store.dtype), v.astype(store.dtype))
        for p, qrow in zip(positions[-store.query_window :], q[-store.query_window :]):
            store.remember_query(i, int(p), qrow)
        K = store.keys(i).astype(np.float64)  # (H, L, d)
        V = store.values(i).astype(np.float64)
        qg = q.reshape(n, H, G, d).transpose(1, 2, 0, 3)  # (H, G, n, d)
        scores = (qg @ np.swapaxes(K, 1, 2)[:, None]) / np.sqrt(d)  # (H, G, n, L)
        scores = np.where(causal, scores, -np.inf)
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        w = e / e.sum(axis=-1, keepdims=True)
        if probs is not None:
            probs.append(w.mean(axis=1))
        out = w @ V[:, None]  # (H, G, n, d)
        out = out.transpose(2, 0, 1, 3).reshape(n, spec.n_query_heads, d)
        x = model.finish_layer(i, x, out)
    visible = int(causal.sum())
    return StepOutput(
        model.head(x if all_logits else x[-1]),
        _windows(store, model, allowed, window, pooling),
        flop_count=2 * spec.n_layers * spec.n_query_heads * d * visible,
        kv_reads=spec.n_layers * H * visible,
    )

"""Two-segment KV storage.

``paged``  append-only per-layer keys/values indexed by absolute position
           (keys already rotated, so gathered copies need no remapping).
``compact`` per-layer, per-KV-head contiguous copy of the sink + selected
           entries in ascending position order, rebuilt by
           :func:`reorganize_compact` after each selector refresh.
The recent tail is never copied; fast steps read it in place from ``paged``.

Positions are 1-based; position ``p`` lives in row ``p - 1``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import PositionError, StaleCompactError


@dataclass
class CompactSegment:
    positions: np.ndarray  # (n,) ascending int64
    keys: np.ndarray  # (n, d)
    values: np.ndarray  # (n, d)


@dataclass
class LayerCache:
    keys: np.ndarray  # (H, capacity, d)
    values: np.ndarray
    length: int = 0
    compact: list[CompactSegment] | None = None
    stale: bool = True
    queries: deque = field(default_factory=deque)  # (position, (Hq, d)) most recent last


class KvStore:
    def __init__(
        self,
        n_layers: int,
        n_kv_heads: int,
        head_dim: int,
        capacity: int = 256,
        dtype=np.float32,
        query_window: int = 16,
    ):
        self.n_layers = n_layers
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.dtype = np.dtype(dtype)
        self.query_window = query_window
        self.layers = [
            LayerCache(
                np.zeros((n_kv_heads, capacity, head_dim), self.dtype),
                np.zeros((n_kv_heads, capacity, head_dim), self.dtype),
                queries=deque(maxlen=query_window),
            )
            for _ in range(n_layers)
        ]
        # (layer, segment, head, start, stop) reads, recorded when set to a list
        self.access_log: list | None = None

    @classmethod
    def for_model(cls, spec, capacity: int = 256, query_window: int = 16) -> "KvStore":
        return cls(spec.n_layers, spec.n_kv_heads, spec.head_dim, capacity=capacity, query_window=query_window)

    # -- paged segment ---------------------------------------------------

    @property
    def prefix_len(self) -> int:
        return min(lc.length for lc in self.layers)

    def _grow(self, lc: LayerCache, need: int) -> None:
        cap = lc.keys.shape[1]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for attr in ("keys", "values"):
            old = getattr(lc, attr)
            arr = np.zeros((old.shape[0], new_cap, old.shape[2]), self.dtype)
            arr[:, : lc.length] = old[:, : lc.length]
            setattr(lc, attr, arr)

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> int:
        """Append ``(n, H, d)`` or ``(H, d)`` keys/values; returns the new length."""
        lc = self.layers[layer]
        k = np.asarray(k)
        v = np.asarray(v)
        if k.ndim == 2:
            k, v = k[None], v[None]
        n = k.shape[0]
        self._grow(lc, lc.length + n)
        lc.keys[:, lc.length : lc.length + n] = np.swapaxes(k, 0, 1)
        lc.values[:, lc.length : lc.length + n] = np.swapaxes(v, 0, 1)
        lc.length += n
        return lc.length

    def keys(self, layer: int) -> np.ndarray:
        lc = self.layers[layer]
        return lc.keys[:, : lc.length]

    def values(self, layer: int) -> np.ndarray:
        lc = self.layers[layer]
        return lc.values[:, : lc.length]

    def gather(self, layer: int, head: int, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lc = self.layers[layer]
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and (positions.min() < 1 or positions.max() > lc.length):
            raise PositionError("position out of range", layer=layer, length=lc.length,
                                lo=int(positions.min()), hi=int(positions.max()))
        rows = positions - 1
        return lc.keys[head, rows], lc.values[head, rows]

    def key_norms(self, layer: int, positions: np.ndarray) -> np.ndarray:
        """L2 norms of stored keys, ``(H, len(positions))``, in float64."""
        lc = self.layers[layer]
        rows = np.asarray(positions, dtype=np.int64) - 1
        k = lc.keys[:, rows].astype(np.float64)
        return np.sqrt(np.einsum("hnd,hnd->hn", k, k))

    def recent_tail(self, layer: int, recent_start: int) -> tuple[int, int]:
        """(start, length) descriptor of the in-place recent segment."""
        lc = self.layers[layer]
        return recent_start, lc.length - recent_start + 1

    # -- query history for slow-step windows -------------------------------

    def remember_query(self, layer: int, position: int, q: np.ndarray) -> None:
        self.layers[layer].queries.append((position, np.array(q, dtype=np.float64)))

    def recent_queries(self, layer: int, width: int) -> list[tuple[int, np.ndarray]]:
        qs = self.layers[layer].queries
        return list(qs)[-width:]

    # -- compact segment -------------------------------------------------

    def mark_stale(self, layer: int | None = None) -> None:
        for i in range(self.n_layers) if layer is None else (layer,):
            self.layers[i].stale = True

    def compact(self, layer: int) -> list[CompactSegment]:
        lc = self.layers[layer]
        if lc.stale or lc.compact is None:
            raise StaleCompactError("compact buffer has a reorganization pending", layer=layer)
        return lc.compact

    def log_read(self, *entry) -> None:
        if self.access_log is not None:
            self.access_log.append(entry)


def reorganize_compact(
    store: KvStore,
    layer: int,
    selected: Sequence[np.ndarray],
    sink: np.ndarray,
) -> list[CompactSegment]:
    """Rebuild one layer's compact buffer from ``sink`` plus per-head ``selected`` positions.

    Pure gather: entries are copied bit-for-bit from the paged segment.
    """
    sink = np.asarray(sink, dtype=np.int64)
    lc = store.layers[layer]
    if len(selected) != store.n_kv_heads:
        raise PositionError("one selected set per KV head is required",
                            heads=store.n_kv_heads, got=len(selected))
    segs = []
    for h, sel in enumerate(selected):
        pos = np.union1d(sink, np.asarray(sel, dtype=np.int64))
        if pos.size and (pos[0] < 1 or pos[-1] > lc.length):
            raise PositionError("compact buffer references an unwritten position",
                                layer=layer, head=h, length=lc.length, hi=int(pos[-1]))
        rows = pos - 1
        segs.append(CompactSegment(pos, np.ascontiguousarray(lc.keys[h, rows]),
                                   np.ascontiguousarray(lc.values[h, rows])))
    lc.compact = segs
    lc.stale = False
    return segs

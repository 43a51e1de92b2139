"""Per-request slow/fast decoding state machine.

A :class:`DecodeState` describes the *upcoming* step ``t``: ``prefix_len`` is
the context length that step attends over (its input token included) and
``per_layer`` holds the sparse state a fast step would use. States are
immutable; every transition returns a new one, which keeps the selected sets
of a fast segment literally unchanged between refreshes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Sequence

import numpy as np

from .attention import (
    KvStore,
    ToyModel,
    dense_attention_step,
    prefill,
    reorganize_compact,
    sparse_attention_step,
)
from .core import CacheLimits, SelectorConfig, TriggerConfig
from .errors import ConfigError, ContextOverflowError, SelectionContractError
from .selector import CacheStats, run_selector

SLOW, FAST = 1, 0


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.int64)
    arr.setflags(write=False)
    return arr


def sink_positions(limits: CacheLimits, prefix_len: int) -> np.ndarray:
    return np.arange(1, min(limits.n_sink, prefix_len) + 1, dtype=np.int64)


def recent_bounds(limits: CacheLimits, prefix_len: int) -> tuple[int, int]:
    """Inclusive ``(start, end)`` of the recent window; empty when start > end."""
    length = min(limits.n_recent, max(prefix_len - limits.n_sink, 0))
    return prefix_len - length + 1, prefix_len


@dataclass(frozen=True)
class SparseState:
    layer: int
    sink: np.ndarray
    recent_start: int
    recent_end: int
    selected: tuple[np.ndarray, ...]  # one ascending array per KV head

    @property
    def recent(self) -> np.ndarray:
        return np.arange(self.recent_start, self.recent_end + 1, dtype=np.int64)

    def support(self, head: int) -> np.ndarray:
        return np.union1d(np.union1d(self.sink, self.recent), self.selected[head])

    def support_size(self, head: int) -> int:
        return int(self.support(head).size)

    def slide(self, limits: CacheLimits, prefix_len: int) -> "SparseState":
        start, end = recent_bounds(limits, prefix_len)
        return replace(self, sink=_frozen(sink_positions(limits, prefix_len)), recent_start=start, recent_end=end)


@dataclass(frozen=True)
class DecodeState:
    t: int
    prefix_len: int
    g: int
    steps_since_slow: int
    last_token: int
    limits: CacheLimits
    per_layer: tuple[SparseState, ...]

    @classmethod
    def initial(cls, prompt: Sequence[int], limits: CacheLimits, n_layers: int, n_kv_heads: int) -> "DecodeState":
        L = len(prompt)
        start, end = recent_bounds(limits, L)
        empty = tuple(_frozen([]) for _ in range(n_kv_heads))
        layers = tuple(
            SparseState(i, _frozen(sink_positions(limits, L)), start, end, empty) for i in range(n_layers)
        )
        return cls(0, L, SLOW, 0, int(prompt[-1]), limits, layers)

    def selected_digest(self) -> str:
        h = hashlib.sha1()
        for st in self.per_layer:
            for sel in st.selected:
                h.update(np.ascontiguousarray(sel).tobytes())
                h.update(b"|")
        return h.hexdigest()


def compute_allowed(state: SparseState, prefix_len: int) -> np.ndarray:
    """Positions ``1..prefix_len`` that are neither sink nor recent, ascending."""
    mask = np.ones(prefix_len + 1, dtype=bool)
    mask[0] = False
    mask[state.sink[state.sink <= prefix_len]] = False
    lo, hi = state.recent_start, min(state.recent_end, prefix_len)
    if lo <= hi:
        mask[lo : hi + 1] = False
    return np.flatnonzero(mask).astype(np.int64)


def step_cause(state: DecodeState, trig: TriggerConfig) -> str | None:
    if state.t == 0:
        return "initial"
    if state.last_token in trig.trigger_tokens:
        return "trigger"
    if state.steps_since_slow >= trig.t_max:
        return "forced"
    return None


def next_step_type(state: DecodeState, trig: TriggerConfig) -> int:
    return SLOW if step_cause(state, trig) is not None else FAST


def advance(state: DecodeState, token: int) -> DecodeState:
    """Common end-of-step bookkeeping: the recent window slides by one."""
    L = state.prefix_len + 1
    return replace(
        state,
        t=state.t + 1,
        prefix_len=L,
        steps_since_slow=state.steps_since_slow + 1,
        last_token=int(token),
        per_layer=tuple(st.slide(state.limits, L) for st in state.per_layer),
    )


def fast_step_update(state: DecodeState, token: int) -> DecodeState:
    if state.g != FAST:
        raise ConfigError("fast_step_update called on a slow step", t=state.t)
    return advance(state, token)


def slow_step_update(state: DecodeState, selected: Sequence[Sequence[np.ndarray]]) -> DecodeState:
    """Replace every layer's selected sets wholesale and reset the refresh counter."""
    if len(selected) != len(state.per_layer):
        raise SelectionContractError("one selection per layer is required",
                                     layers=len(state.per_layer), got=len(selected))
    layers = []
    for st, sel in zip(state.per_layer, selected):
        mandatory = np.union1d(st.sink, st.recent)
        heads = []
        for h, s in enumerate(sel):
            s = _frozen(np.sort(np.asarray(s, dtype=np.int64)))
            clash = np.intersect1d(s, mandatory)
            if clash.size:
                raise SelectionContractError("selected positions overlap sink/recent",
                                             layer=st.layer, head=h, positions=clash[:8].tolist())
            if s.size and (s[0] < 1 or s[-1] > state.prefix_len):
                raise SelectionContractError("selected position outside the prefix",
                                             layer=st.layer, head=h)
            heads.append(s)
        layers.append(replace(st, selected=tuple(heads)))
    return replace(state, steps_since_slow=0, per_layer=tuple(layers))


@dataclass
class StepRecord:
    t: int
    type: str
    cause: str | None
    support_size: int
    allowed_size: int
    prefix_len: int
    token: int
    kv_reads: int
    selected_digest: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RequestResult:
    tokens: list[int]
    log: list[StepRecord]
    logits: list[np.ndarray] = field(default_factory=list)

    def write_log(self, out: IO[str], request: int | None = None) -> None:
        for rec in self.log:
            d = asdict(rec)
            if request is not None:
                d["request"] = request
            out.write(json.dumps(d, sort_keys=True) + "\n")


def _refresh(
    state: DecodeState,
    store: KvStore,
    windows,
    cfg: SelectorConfig,
    limits: CacheLimits,
    allowed: np.ndarray,
) -> DecodeState:
    n_heads = store.n_kv_heads
    selected = []
    for layer, st in enumerate(state.per_layer):
        w = windows[layer] if windows is not None else None
        if allowed.size == 0 or limits.k_budget == 0 or w is None or w.width == 0:
            selected.append([np.empty(0, np.int64)] * n_heads)
            continue
        stats = CacheStats.from_keys(allowed, store.key_norms(layer, allowed), cfg.epsilon)
        selected.append(run_selector(w, stats, cfg, k=limits.k_budget))
    state = slow_step_update(state, selected)
    # completion barrier: every layer's compact buffer is rebuilt before the next step
    for layer, st in enumerate(state.per_layer):
        store.mark_stale(layer)
        reorganize_compact(store, layer, st.selected, st.sink)
    return state


def run_request(
    prompt: Sequence[int],
    limits: CacheLimits,
    trig: TriggerConfig,
    cfg: SelectorConfig,
    model: ToyModel,
    max_new: int,
    store: KvStore | None = None,
    keep_logits: bool = False,
    states: list | None = None,
) -> RequestResult:
    """Greedy slow/fast decoding of one request.

    Step 0 is the dense prefill plus a selector refresh over the last
    ``window_prefill`` prompt queries. ``states``, when given, collects the
    :class:`DecodeState` seen at the start of every step.
    """
    if len(prompt) == 0:
        raise ConfigError("prompt must be non-empty")
    if max_new < 1:
        raise ConfigError("max_new must be >= 1", max_new=max_new)
    spec = model.spec
    limits.check_context(spec.max_positions)
    needed = len(prompt) + max_new - 1
    if needed > spec.max_positions:
        raise ContextOverflowError("request does not fit the context window",
                                   needed=needed, max_positions=spec.max_positions)
    if store is None:
        store = KvStore.for_model(
            spec, capacity=needed, query_window=max(trig.window_decode, trig.window_prefill)
        )

    state = DecodeState.initial(prompt, limits, spec.n_layers, spec.n_kv_heads)
    tokens: list[int] = []
    log: list[StepRecord] = []
    logits: list[np.ndarray] = []

    while len(tokens) < max_new:
        cause = step_cause(state, trig)
        state = replace(state, g=SLOW if cause else FAST)
        if states is not None:
            states.append(state)
        L = state.prefix_len
        st0 = state.per_layer[0]
        allowed = compute_allowed(st0, L)
        if state.g == SLOW:
            if state.t == 0:
                out = prefill(model, store, prompt, allowed, trig.window_prefill, cfg.head_pooling)
            else:
                out = dense_attention_step(model, store, state.last_token, allowed, trig.window_decode,
                                           cfg.head_pooling)
            support = L
            state = _refresh(state, store, out.attn_logits, cfg, limits, allowed)
        else:
            assert store.prefix_len + 1 == L, "store and decode state disagree on prefix length"
            out = sparse_attention_step(model, store, state.last_token, st0.recent_start)
            support = max(st.support_size(h) for st in state.per_layer for h in range(spec.n_kv_heads))
        token = int(np.argmax(out.logits_vocab))
        log.append(StepRecord(
            t=state.t,
            type="slow" if state.g == SLOW else "fast",
            cause=cause,
            support_size=int(support),
            allowed_size=int(allowed.size),
            prefix_len=L,
            token=token,
            kv_reads=int(out.kv_reads),
            selected_digest=state.selected_digest(),
        ))
        if keep_logits:
            logits.append(out.logits_vocab)
        tokens.append(token)
        state = advance(state, token)
    return RequestResult(tokens, log, logits)


def run_dense(
    prompt: Sequence[int],
    model: ToyModel,
    max_new: int,
    keep_logits: bool = False,
) -> RequestResult:
    """Full-KV greedy baseline: every step is dense."""
    spec = model.spec
    needed = len(prompt) + max_new - 1
    if needed > spec.max_positions:
        raise ContextOverflowError("request does not fit the context window",
                                   needed=needed, max_positions=spec.max_positions)
    store = KvStore.for_model(spec, capacity=needed, query_window=1)
    out = prefill(model, store, prompt)
    tokens, log, logits = [], [], []
    for t in range(max_new):
        if t:
            out = dense_attention_step(model, store, tokens[-1])
        tok = int(np.argmax(out.logits_vocab))
        L = store.prefix_len
        log.append(StepRecord(t, "slow", "initial" if t == 0 else None, L, 0, L, tok, int(out.kv_reads), ""))
        if keep_logits:
            logits.append(out.logits_vocab)
        tokens.append(tok)
    return RequestResult(tokens, log, logits)


def check_segment_freezing(log: Sequence[StepRecord]) -> list[int]:
    """Return the steps at which a fast step saw a different selection than its segment start."""
    bad = []
    current = None
    for rec in log:
        if rec.type == "slow":
            current = rec.selected_digest
        elif rec.selected_digest != current:
            bad.append(rec.t)
    return bad

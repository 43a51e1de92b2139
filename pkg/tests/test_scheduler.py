import io
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfi import oracle
from sfi.attention import ModelSpec, build_toy_model
from sfi.core import CacheLimits, SelectorConfig, TriggerConfig
from sfi.errors import ConfigError, ContextOverflowError, SelectionContractError
from sfi.scheduler import (
    FAST,
    SLOW,
    DecodeState,
    SparseState,
    advance,
    check_segment_freezing,
    compute_allowed,
    fast_step_update,
    next_step_type,
    recent_bounds,
    run_dense,
    run_request,
    slow_step_update,
    step_cause,
)

SPEC = ModelSpec(n_layers=2, n_query_heads=4, n_kv_heads=2, head_dim=16, vocab_size=24, max_positions=1024)
TRIG = TriggerConfig(trigger_tokens=frozenset({0, 1}), t_max=8)


@pytest.fixture(scope="module")
def model():
    return build_toy_model(SPEC, seed=21)


def _state(sink, recent_start, recent_end, selected=()):
    sel = tuple(np.asarray(s, dtype=np.int64) for s in selected) or (np.empty(0, np.int64),)
    return SparseState(0, np.asarray(sink, dtype=np.int64), recent_start, recent_end, sel)


def _decode_state(L=300, limits=CacheLimits(), **kw):
    st_ = DecodeState.initial(list(range(L)), limits, 1, 1)
    return replace(st_, **kw)


class TestComputeAllowed:
    def test_set_difference(self):
        assert compute_allowed(_state([1], 8, 10), 10).tolist() == [2, 3, 4, 5, 6, 7]

    def test_all_mandatory(self):
        limits = CacheLimits(n_sink=4, n_recent=8)
        st_ = DecodeState.initial(list(range(12)), limits, 1, 1)
        assert compute_allowed(st_.per_layer[0], 12).size == 0

    def test_no_exclusions(self):
        assert compute_allowed(_state([], 11, 10), 10).tolist() == list(range(1, 11))

    @settings(max_examples=200)
    @given(st.integers(1, 600), st.integers(0, 8), st.integers(1, 300))
    def test_partition(self, L, n_sink, n_recent):
        limits = CacheLimits(n_sink=n_sink, n_recent=n_recent)
        st_ = DecodeState.initial([0] * L, limits, 1, 1).per_layer[0]
        J = compute_allowed(st_, L)
        parts = np.concatenate([st_.sink, st_.recent, J])
        assert sorted(parts.tolist()) == list(range(1, L + 1))
        assert st_.recent.size == min(n_recent, max(L - n_sink, 0))


class TestStepType:
    def test_trigger(self):
        s = _decode_state(t=5, last_token=0, steps_since_slow=1)
        assert next_step_type(s, TRIG) == SLOW
        assert step_cause(s, TRIG) == "trigger"

    def test_no_trigger(self):
        s = _decode_state(t=5, last_token=7, steps_since_slow=3)
        assert next_step_type(s, replace(TRIG, t_max=64)) == FAST

    def test_forced_on_budget(self):
        trig = replace(TRIG, t_max=64)
        s = _decode_state(t=1, last_token=7, steps_since_slow=0)
        types = []
        for _ in range(64):
            s = advance(s, 7)
            types.append(next_step_type(s, trig))
        assert types[:-1] == [FAST] * 63
        assert types[-1] == SLOW
        assert step_cause(s, trig) == "forced"

    def test_initial(self):
        s = _decode_state(t=0)
        assert step_cause(s, TRIG) == "initial"

    def test_trigger_wins_over_budget(self):
        s = _decode_state(t=9, last_token=1, steps_since_slow=8)
        assert step_cause(s, TRIG) == "trigger"


class TestUpdates:
    def test_fast_step(self):
        limits = CacheLimits(n_sink=4, n_recent=256)
        s = replace(_decode_state(L=1000, limits=limits), t=3, g=FAST, steps_since_slow=2)
        s = slow_step_update(replace(s, g=SLOW), [[np.array([10, 20, 30])]])
        s = replace(s, g=FAST)
        nxt = fast_step_update(s, 5)
        before, after = s.per_layer[0], nxt.per_layer[0]
        assert after.selected[0] is before.selected[0]
        assert (before.recent_start, before.recent_end) == (745, 1000)
        assert (after.recent_start, after.recent_end) == (746, 1001)
        assert nxt.steps_since_slow == s.steps_since_slow + 1
        assert (nxt.t, nxt.prefix_len, nxt.last_token) == (s.t + 1, 1001, 5)

    def test_fast_step_requires_fast(self):
        with pytest.raises(ConfigError):
            fast_step_update(_decode_state(g=SLOW), 3)

    def test_refresh_is_recallable(self):
        s = _decode_state(L=400)
        s = slow_step_update(s, [[np.array([10, 11])]])
        s = slow_step_update(s, [[np.array([12])]])
        s = slow_step_update(s, [[np.array([10, 13])]])
        assert 10 in s.per_layer[0].support(0)
        assert 11 not in s.per_layer[0].support(0)

    def test_reset_counter(self):
        s = _decode_state(steps_since_slow=63)
        assert slow_step_update(s, [[np.array([20])]]).steps_since_slow == 0

    def test_empty_selection(self):
        limits = CacheLimits(n_sink=4, n_recent=16)
        s = _decode_state(L=100, limits=limits)
        s = slow_step_update(s, [[np.empty(0, np.int64)]])
        st_ = s.per_layer[0]
        assert st_.support(0).tolist() == [1, 2, 3, 4] + list(range(85, 101))

    def test_overlap_rejected(self):
        limits = CacheLimits(n_sink=4, n_recent=16)
        s = _decode_state(L=100, limits=limits)
        with pytest.raises(SelectionContractError):
            slow_step_update(s, [[np.array([2, 50])]])
        with pytest.raises(SelectionContractError):
            slow_step_update(s, [[np.array([50, 90])]])

    def test_outside_prefix_rejected(self):
        s = _decode_state(L=400)
        with pytest.raises(SelectionContractError):
            slow_step_update(s, [[np.array([0])]])

    def test_layer_count(self):
        with pytest.raises(SelectionContractError):
            slow_step_update(_decode_state(), [])

    def test_recent_bounds(self):
        limits = CacheLimits(n_sink=4, n_recent=256)
        assert recent_bounds(limits, 100) == (5, 100)
        assert recent_bounds(limits, 3) == (4, 3)  # empty


def _run(model, prompt, limits, trig=TRIG, max_new=40, **kw):
    cfg = SelectorConfig(k_budget=limits.k_budget)
    return run_request(prompt, limits, trig, cfg, model, max_new, **kw)


class TestRunRequest:
    def test_single_step_is_slow(self, model):
        res = _run(model, [5, 6, 7], CacheLimits(n_sink=1, n_recent=1, k_budget=1), max_new=1)
        assert [r.type for r in res.log] == ["slow"]
        assert res.log[0].cause == "initial"

    def test_slow_count(self, model):
        prompt = np.random.default_rng(1).integers(0, 24, size=80).tolist()
        res = _run(model, prompt, CacheLimits(n_sink=2, n_recent=8, k_budget=8), max_new=60)
        causes = [r.cause for r in res.log]
        n_trig = sum(tok in TRIG.trigger_tokens for tok in res.tokens[:-1])
        assert causes.count("initial") == 1
        assert causes.count("trigger") == n_trig
        assert sum(r.type == "slow" for r in res.log) == n_trig + causes.count("forced") + 1
        assert [r.type for r in res.log] == oracle.replay_step_types(res.tokens, TRIG.trigger_tokens, TRIG.t_max)

    def test_full_retention_matches_dense(self, model):
        prompt = np.random.default_rng(2).integers(0, 24, size=70).tolist()
        limits = CacheLimits(n_sink=4, n_recent=200, k_budget=200)
        sfi = _run(model, prompt, limits, max_new=50)
        dense = run_dense(prompt, model, 50)
        assert sfi.tokens == dense.tokens

    def test_full_budget_fast_steps_match_dense_logits(self, model):
        # small recent window but a budget that selects all of J at every refresh
        prompt = np.random.default_rng(3).integers(2, 24, size=60).tolist()
        limits = CacheLimits(n_sink=4, n_recent=8, k_budget=1000)
        trig = replace(TRIG, t_max=1)
        sfi = _run(model, prompt, limits, trig=trig, max_new=20, keep_logits=True)
        dense = run_dense(prompt, model, 20, keep_logits=True)
        assert sfi.tokens == dense.tokens
        for a, b in zip(sfi.logits, dense.logits):
            assert np.max(np.abs(a - b)) / np.max(np.abs(b)) <= 1e-6

    def test_invariants_along_the_way(self, model):
        rng = np.random.default_rng(4)
        prompt = rng.integers(0, 24, size=120).tolist()
        limits = CacheLimits(n_sink=3, n_recent=16, k_budget=12)
        states = []
        res = _run(model, prompt, limits, max_new=80, states=states)
        assert not check_segment_freezing(res.log)
        cap = limits.n_sink + limits.n_recent + limits.k_budget
        slow_t = [r.t for r in res.log if r.type == "slow"]
        assert max(np.diff(slow_t), default=0) <= TRIG.t_max
        for s, rec in zip(states, res.log):
            assert s.steps_since_slow <= TRIG.t_max
            L = s.prefix_len
            for st_ in s.per_layer:
                assert st_.recent.tolist() == list(range(L - min(16, L - 3) + 1, L + 1))
                for h in range(SPEC.n_kv_heads):
                    assert st_.selected[h].size <= limits.k_budget
                    if s.g == FAST:
                        assert st_.support_size(h) <= cap
            if rec.type == "fast":
                assert rec.support_size <= cap
        # selected sets are disjoint from the mandatory sets right after each refresh
        for s, nxt in zip(states, states[1:]):
            if s.g == SLOW:
                for st_prev, st_ in zip(s.per_layer, nxt.per_layer):
                    mandatory = np.union1d(st_prev.sink, st_prev.recent)
                    for sel in st_.selected:
                        assert np.intersect1d(sel, mandatory).size == 0

    def test_short_prefix_skips_selector(self, model):
        res = _run(model, [3, 4, 5, 6], CacheLimits(n_sink=4, n_recent=64, k_budget=8), max_new=10)
        assert all(r.allowed_size == 0 for r in res.log)

    def test_deterministic(self, model):
        prompt = np.random.default_rng(5).integers(0, 24, size=50).tolist()
        limits = CacheLimits(n_sink=2, n_recent=8, k_budget=8)
        a, b = _run(model, prompt, limits), _run(model, prompt, limits)
        assert a.tokens == b.tokens
        assert [r.to_json() for r in a.log] == [r.to_json() for r in b.log]

    def test_zero_budget(self, model):
        prompt = np.random.default_rng(6).integers(2, 24, size=50).tolist()
        res = _run(model, prompt, CacheLimits(n_sink=2, n_recent=8, k_budget=0), max_new=10)
        for r in res.log:
            if r.type == "fast":
                assert r.support_size == 2 + 8

    def test_overflow(self, model):
        with pytest.raises(ContextOverflowError):
            _run(model, [1] * 1000, CacheLimits(n_sink=1, n_recent=4, k_budget=4), max_new=30)

    def test_bad_inputs(self, model):
        with pytest.raises(ConfigError):
            _run(model, [], CacheLimits(n_sink=1, n_recent=4, k_budget=4))
        with pytest.raises(ConfigError):
            _run(model, [3], CacheLimits(n_sink=1, n_recent=4, k_budget=4), max_new=0)

    def test_log_format(self, model):
        res = _run(model, list(range(2, 22)), CacheLimits(n_sink=2, n_recent=4, k_budget=4), max_new=5)
        buf = io.StringIO()
        res.write_log(buf, request=3)
        recs = [json.loads(line) for line in buf.getvalue().splitlines()]
        assert len(recs) == 5
        assert {"t", "type", "cause", "support_size", "allowed_size", "request"} <= set(recs[0])
        assert recs[0]["type"] == "slow" and recs[0]["cause"] == "initial"

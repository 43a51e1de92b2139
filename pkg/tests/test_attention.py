import numpy as np
import pytest

from sfi import oracle
from sfi.attention import (
    KvStore,
    ModelSpec,
    build_toy_model,
    dense_attention,
    dense_attention_step,
    load_weights,
    prefill,
    reorganize_compact,
    save_weights,
    sparse_attention_step,
    two_segment_attention,
    window_logits,
)
from sfi.attention.model import _HEADER
from sfi.errors import ContextOverflowError, ModelSpecError, PositionError, StaleCompactError, WeightFileError

SPEC = ModelSpec(n_layers=2, n_query_heads=4, n_kv_heads=2, head_dim=16, vocab_size=32, max_positions=512)


@pytest.fixture(scope="module")
def model():
    return build_toy_model(SPEC, seed=11)


def _prompt(n, seed=0):
    return np.random.default_rng(seed).integers(0, SPEC.vocab_size, size=n).tolist()


def _filled_store(model, prompt):
    store = KvStore.for_model(model.spec, capacity=len(prompt) + 8)
    out = prefill(model, store, prompt)
    return store, out


class TestModelSpec:
    def test_group_mismatch(self):
        with pytest.raises(ModelSpecError):
            ModelSpec(n_query_heads=6, n_kv_heads=4)

    def test_odd_head_dim(self):
        with pytest.raises(ModelSpecError):
            ModelSpec(head_dim=15)

    def test_derived_sizes(self):
        assert SPEC.d_model == 64
        assert SPEC.group == 2
        assert SPEC.hidden == 128

    def test_seed_determinism(self):
        a, b = build_toy_model(SPEC, 5), build_toy_model(SPEC, 5)
        assert all(a.weights[n].tobytes() == b.weights[n].tobytes() for n in a.tensor_names())
        c = build_toy_model(SPEC, 6)
        assert a.weights["embed"].tobytes() != c.weights["embed"].tobytes()

    def test_embed_range(self, model):
        with pytest.raises(ModelSpecError):
            model.embed(SPEC.vocab_size)


class TestWeightFile:
    def test_round_trip(self, model, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(model, path)
        loaded = load_weights(path)
        assert loaded.spec == model.spec
        prompt = _prompt(20)
        a = prefill(model, KvStore.for_model(SPEC, 32), prompt).logits_vocab
        b = prefill(loaded, KvStore.for_model(SPEC, 32), prompt).logits_vocab
        np.testing.assert_array_equal(a, b)

    def test_header_size(self):
        assert _HEADER.size == 48

    def test_truncated(self, model, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:1000])
        with pytest.raises(WeightFileError) as info:
            load_weights(path)
        assert info.value.context["offset"] <= 1000
        path.write_bytes(data[:20])
        with pytest.raises(WeightFileError, match="header"):
            load_weights(path)

    def test_bad_magic(self, model, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(model, path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(WeightFileError) as info:
            load_weights(path)
        assert info.value.context["offset"] == 0

    def test_bad_version(self, model, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(model, path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(WeightFileError, match="version"):
            load_weights(path)

    def test_trailing_bytes(self, model, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(model, path)
        path.write_bytes(path.read_bytes() + b"\0\0\0\0")
        with pytest.raises(WeightFileError, match="trailing"):
            load_weights(path)

    def test_invalid_spec_in_header(self, model, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(model, path)
        data = bytearray(path.read_bytes())
        data[16:20] = (3).to_bytes(4, "little")  # n_kv_heads = 3 does not divide 4
        path.write_bytes(bytes(data))
        with pytest.raises(WeightFileError, match="invalid model spec"):
            load_weights(path)


class TestDenseStep:
    def test_empty_allowed(self, model):
        store, _ = _filled_store(model, _prompt(10))
        out = dense_attention_step(model, store, 3, allowed=np.empty(0, np.int64))
        assert out.logits_vocab.shape == (SPEC.vocab_size,)
        assert all(w.values.shape[-1] == 0 for w in out.attn_logits)

    def test_no_window_without_allowed(self, model):
        store, _ = _filled_store(model, _prompt(10))
        assert dense_attention_step(model, store, 3).attn_logits is None

    def test_single_key_returns_value(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(4, 16))
        k = rng.normal(size=(2, 1, 16)).astype(np.float32)
        v = rng.normal(size=(2, 1, 16)).astype(np.float32)
        out = dense_attention(q, k, v)
        np.testing.assert_allclose(out, np.repeat(v[:, 0], 2, axis=0), rtol=1e-12)

    def test_window_softmax_is_renormalized_dense_row(self):
        spec = ModelSpec(n_layers=1, n_query_heads=2, n_kv_heads=2, head_dim=16, vocab_size=32)
        m = build_toy_model(spec, seed=2)
        store = KvStore.for_model(spec, 64)
        prefill(m, store, _prompt(30))
        allowed = np.arange(3, 21)
        dense_attention_step(m, store, 5)
        w = window_logits(store, 0, allowed, width=1)
        pos, q = store.recent_queries(0, 1)[0]
        K = store.keys(0).astype(np.float64)
        for h in range(2):
            s = K[h] @ q[h] / 4.0
            p = np.exp(s - s.max())
            p /= p.sum()
            want = p[allowed - 1] / p[allowed - 1].sum()
            row = w.values[h, 0]
            got = np.exp(row - row.max())
            np.testing.assert_allclose(got / got.sum(), want, rtol=1e-12)

    def test_window_pooling(self, model):
        store, _ = _filled_store(model, _prompt(40))
        allowed = np.arange(5, 30)
        mean = window_logits(store, 0, allowed, 4, "mean")
        mx = window_logits(store, 0, allowed, 4, "max")
        assert mean.values.shape == (2, 4, allowed.size)
        assert np.all(mx.values >= mean.values - 1e-12)

    def test_window_drops_rows_that_cannot_see_j(self, model):
        store, _ = _filled_store(model, _prompt(40))
        w = window_logits(store, 0, np.arange(5, 38), 8)
        assert w.width == 3  # only query positions 38..40 see position 37

    def test_context_overflow(self):
        spec = ModelSpec(n_layers=1, vocab_size=32, max_positions=8)
        m = build_toy_model(spec, 0)
        store = KvStore.for_model(spec, 8)
        prefill(m, store, _prompt(8))
        with pytest.raises(ContextOverflowError):
            dense_attention_step(m, store, 1)


def _reorg_all(store, sink, selected):
    for layer in range(store.n_layers):
        reorganize_compact(store, layer, selected[layer], sink)


class TestSparseStep:
    def test_full_support_equals_dense(self, model):
        prompt = _prompt(60, seed=1)
        store_d, _ = _filled_store(model, prompt)
        dense = dense_attention_step(model, store_d, 7)
        store_s, _ = _filled_store(model, prompt)
        L = len(prompt) + 1
        sink = np.arange(1, 5)
        sel = [[np.arange(5, 41)] * 2] * 2
        _reorg_all(store_s, sink, sel)
        sparse = sparse_attention_step(model, store_s, 7, recent_start=41)
        assert sparse.kv_reads == dense.kv_reads == 2 * 2 * L
        rel = np.max(np.abs(sparse.logits_vocab - dense.logits_vocab)) / np.max(np.abs(dense.logits_vocab))
        assert rel <= 1e-6

    def test_matches_masked_reference(self, model):
        rng = np.random.default_rng(3)
        prompt = _prompt(80, seed=3)
        store, _ = _filled_store(model, prompt[:-1])
        sink = np.arange(1, 4)
        pool = np.arange(4, 60)
        sel = [[np.sort(rng.choice(pool, 12, replace=False)) for _ in range(2)] for _ in range(2)]
        _reorg_all(store, sink, sel)
        got = sparse_attention_step(model, store, prompt[-1], recent_start=60).logits_vocab
        mask = [[np.union1d(np.union1d(sink, s), np.arange(60, 81)) for s in layer] for layer in sel]
        want = oracle.masked_attention_reference(model, prompt, mask)["logits"]
        assert np.max(np.abs(got - want)) / np.max(np.abs(want)) <= 1e-6

    def test_stale_compact(self, model):
        store, _ = _filled_store(model, _prompt(20))
        with pytest.raises(StaleCompactError):
            sparse_attention_step(model, store, 1, recent_start=18)
        _reorg_all(store, np.arange(1, 3), [[np.array([5])] * 2] * 2)
        store.mark_stale(1)
        with pytest.raises(StaleCompactError):
            sparse_attention_step(model, store, 1, recent_start=18)

    def test_selected_in_recent_not_double_counted(self, model):
        prompt = _prompt(30, seed=4)
        store, _ = _filled_store(model, prompt)
        # position 28 is both selected and inside the recent window
        _reorg_all(store, np.arange(1, 3), [[np.array([10, 28])] * 2] * 2)
        out = sparse_attention_step(model, store, 2, recent_start=25)
        assert out.kv_reads == 2 * 2 * (2 + 1 + 7)

    def test_compact_reads_are_sequential(self, model):
        prompt = _prompt(50, seed=5)
        store, _ = _filled_store(model, prompt)
        rng = np.random.default_rng(5)
        sel = [[np.sort(rng.choice(np.arange(5, 40), 10, replace=False)) for _ in range(2)] for _ in range(2)]
        _reorg_all(store, np.arange(1, 5), sel)
        store.access_log = []
        sparse_attention_step(model, store, 2, recent_start=41)
        compact = [e for e in store.access_log if e[1] == "compact"]
        assert len(compact) == 4
        for layer, _, head, start, stop in compact:
            read = store.layers[layer].compact[head].positions[start:stop]
            assert np.all(np.diff(read) > 0)

    def test_flop_ratio_64x(self):
        spec = ModelSpec(n_layers=1, n_query_heads=4, n_kv_heads=2, head_dim=16, vocab_size=32, max_positions=16384)
        m = build_toy_model(spec, 0)
        rng = np.random.default_rng(0)
        L = 16384
        stores = []
        for _ in range(2):
            s = KvStore.for_model(spec, L)
            kv = rng.normal(size=(L - 1, 2, 16)).astype(np.float32)
            s.append(0, kv, kv)
            stores.append(s)
        dense = dense_attention_step(m, stores[0], 1)
        # support of 256: 4 sink + 124 selected + 128 recent
        sel = [np.arange(100, 224)] * 2
        reorganize_compact(stores[1], 0, sel, np.arange(1, 5))
        sparse = sparse_attention_step(m, stores[1], 1, recent_start=L - 127)
        assert sparse.kv_reads == 2 * 256
        assert dense.flop_count / sparse.flop_count == 64.0


class TestReorganize:
    def test_empty_selection_holds_sink(self, model):
        store, _ = _filled_store(model, _prompt(20))
        segs = reorganize_compact(store, 0, [np.empty(0, np.int64)] * 2, np.arange(1, 5))
        for h, seg in enumerate(segs):
            assert seg.positions.tolist() == [1, 2, 3, 4]
            np.testing.assert_array_equal(seg.keys, store.keys(0)[h, :4])

    def test_deterministic_and_bit_exact(self, model):
        store, _ = _filled_store(model, _prompt(40))
        sel = [np.array([7, 12, 30]), np.array([5, 6, 33])]
        a = reorganize_compact(store, 1, sel, np.arange(1, 3))
        a_bytes = [(s.keys.tobytes(), s.values.tobytes()) for s in a]
        b = reorganize_compact(store, 1, sel, np.arange(1, 3))
        assert a_bytes == [(s.keys.tobytes(), s.values.tobytes()) for s in b]
        for h, seg in enumerate(b):
            assert np.all(np.diff(seg.positions) > 0)
            for i, p in enumerate(seg.positions):
                k, v = store.gather(1, h, np.array([p]))
                assert seg.keys[i].tobytes() == k[0].tobytes()
                assert seg.values[i].tobytes() == v[0].tobytes()

    def test_unwritten_position(self, model):
        store, _ = _filled_store(model, _prompt(10))
        with pytest.raises(PositionError):
            reorganize_compact(store, 0, [np.array([11])] * 2, np.arange(1, 3))

    def test_head_count(self, model):
        store, _ = _filled_store(model, _prompt(10))
        with pytest.raises(PositionError):
            reorganize_compact(store, 0, [np.array([5])], np.arange(1, 3))


class TestKvStore:
    def test_growth(self):
        store = KvStore(1, 2, 4, capacity=2)
        for i in range(9):
            store.append(0, np.full((2, 4), i, np.float32), np.zeros((2, 4), np.float32))
        assert store.prefix_len == 9
        assert store.keys(0)[0, :, 0].tolist() == list(range(9))

    def test_recent_tail(self):
        store = KvStore(1, 1, 2, capacity=4)
        store.append(0, np.zeros((10, 1, 2)), np.zeros((10, 1, 2)))
        assert store.recent_tail(0, 7) == (7, 4)

    def test_gather_range(self):
        store = KvStore(1, 1, 2, capacity=4)
        store.append(0, np.zeros((3, 1, 2)), np.zeros((3, 1, 2)))
        with pytest.raises(PositionError):
            store.gather(0, 0, np.array([0]))
        with pytest.raises(PositionError):
            store.gather(0, 0, np.array([4]))

    def test_recent_tail_outside_range(self, model):
        store, _ = _filled_store(model, _prompt(10))
        _reorg_all(store, np.arange(1, 3), [[np.empty(0, np.int64)] * 2] * 2)
        q = np.zeros((4, 16))
        with pytest.raises(PositionError):
            two_segment_attention(q, store, 0, recent_start=12)

    def test_key_norms(self):
        store = KvStore(1, 2, 2, capacity=4)
        store.append(0, np.array([[[3, 4], [0, 1]], [[1, 0], [6, 8]]], np.float32), np.zeros((2, 2, 2)))
        np.testing.assert_allclose(store.key_norms(0, np.array([1, 2])), [[5, 1], [1, 10]])

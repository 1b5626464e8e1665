import numpy as np
import pytest

from dummy_forcing import (
    CachePolicy,
    ConfigError,
    FrameBlock,
    HeadAssignment,
    HeadClass,
    HeadKVCache,
    OrderingError,
    SessionConfig,
    attention,
    cache_stats,
    derive_policy,
    extension_window,
    uniform_budget_ratio,
)

RNG = np.random.default_rng(77)


def block(frame_id, hw=4, d=3):
    return FrameBlock(frame_id, RNG.random((hw, d)), RNG.random((hw, d)))


def config(**overrides):
    base = dict(
        num_layers=1,
        num_heads=4,
        head_dim=3,
        HW=4,
        window_len=4,
        ar_steps=10,
        dummy_count=0,
    )
    base.update(overrides)
    return SessionConfig(**base)


class TestDerivePolicy:
    def test_sink_class_keeps_only_the_sink(self):
        pol = derive_policy(HeadClass.SINK, config(window_len=9))
        assert pol.kind == "sink_only"
        assert pol.sink_frame == 0
        assert pol.warm_past_frames() == 1

    def test_dummy_packed_capacity_one(self):
        pol = derive_policy(HeadClass.DUMMY, config(packing_enabled=True))
        assert pol.kind == "dummy_packed"
        assert pol.warm_past_frames() == 1

    def test_dummy_without_packing_is_empty(self):
        pol = derive_policy(HeadClass.DUMMY, config(packing_enabled=False))
        assert pol.kind == "dummy_empty"
        assert pol.warm_past_frames() == 0

    def test_neighbor_with_extension_budget(self):
        pol = derive_policy(
            HeadClass.NEIGHBOR,
            config(window_len=4, context_extension=True),
            extended_window=6,
        )
        assert pol.kind == "neighbor_window"
        assert pol.extended_window == 6
        assert pol.warm_past_frames() == 6

    def test_merged_window_overrides_non_dummy_classes(self):
        cfg = config(window_len=9, merged_window=4)
        for cls in (HeadClass.SINK, HeadClass.NEIGHBOR):
            pol = derive_policy(cls, cfg)
            assert pol.kind == "baseline_window"
            assert pol.warm_past_frames() == 4
        assert derive_policy(HeadClass.DUMMY, cfg).kind == "dummy_packed"

    def test_extended_window_must_cover_plain_window(self):
        with pytest.raises(ConfigError):
            CachePolicy("neighbor_window", window_len=5, extended_window=2)


class TestAppendAndEvict:
    def test_dummy_empty_stays_empty(self):
        cache = HeadKVCache(CachePolicy("dummy_empty", 4))
        cache.append_and_evict(block(0)).append_and_evict(block(1))
        assert cache.frame_ids == []

    def test_neighbor_window_keeps_most_recent(self):
        cache = HeadKVCache(CachePolicy("neighbor_window", 3))
        for fid in (4, 5, 6):
            cache.append_and_evict(block(fid))
        assert cache.frame_ids == [5, 6]

    def test_baseline_window_slide_keeps_sink(self):
        # simulate the slide by hand: window 4 keeps sink 0 plus 3 recent
        cache = HeadKVCache(CachePolicy("baseline_window", 4, sink_frame=0))
        for fid in (0, 5, 6, 7):
            cache.append_and_evict(block(fid))
        assert cache.frame_ids == [0, 5, 6, 7]
        cache.append_and_evict(block(8))
        assert cache.frame_ids == [0, 6, 7, 8]

    def test_out_of_order_append_rejected(self):
        cache = HeadKVCache(CachePolicy("neighbor_window", 3))
        cache.append_and_evict(block(4))
        with pytest.raises(OrderingError):
            cache.append_and_evict(block(4))
        with pytest.raises(OrderingError):
            cache.append_and_evict(block(2))

    def test_dummy_packed_keeps_single_latest(self):
        cache = HeadKVCache(CachePolicy("dummy_packed", 4))
        for fid in range(5):
            cache.append_and_evict(block(fid))
        assert cache.frame_ids == [4]

    def test_sink_only_keeps_sink_forever(self):
        cache = HeadKVCache(CachePolicy("sink_only", 4, sink_frame=0))
        for fid in range(6):
            cache.append_and_evict(block(fid))
        assert cache.frame_ids == [0]

    @pytest.mark.parametrize(
        "policy",
        [
            CachePolicy("baseline_window", 4),
            CachePolicy("sink_only", 4),
            CachePolicy("neighbor_window", 4),
            CachePolicy("neighbor_window", 4, extended_window=6),
            CachePolicy("dummy_empty", 4),
            CachePolicy("dummy_packed", 4),
        ],
    )
    def test_capacity_never_exceeded_and_sink_stable(self, policy):
        cache = HeadKVCache(policy)
        cap = policy.warm_past_frames()
        for fid in range(15):
            cache.append_and_evict(block(fid))
            assert len(cache) <= cap
            assert cache.frame_ids == sorted(cache.frame_ids)
            if policy.keeps_sink and fid >= policy.sink_frame:
                assert policy.sink_frame in cache.frame_ids


class TestGatherContext:
    def test_sink_only_concatenation_arity(self):
        cache = HeadKVCache(CachePolicy("sink_only", 4))
        cache.append_and_evict(block(0))
        for fid in (1, 2):
            cache.append_and_evict(block(fid))
        keys, values, layout = cache.gather_context(block(3))
        assert keys.shape[0] == 8  # sink frame + current, HW=4 each
        assert [r.kind for r in layout.regions] == ["sink", "current"]

    def test_dummy_empty_context_is_current_only(self):
        cache = HeadKVCache(CachePolicy("dummy_empty", 4))
        cur = block(5)
        keys, values, layout = cache.gather_context(cur)
        np.testing.assert_array_equal(keys, cur.keys)
        np.testing.assert_array_equal(values, cur.values)
        assert [r.kind for r in layout.regions] == ["current"]

    def test_warm_baseline_frame_order(self):
        cache = HeadKVCache(CachePolicy("baseline_window", 4, sink_frame=0))
        for fid in (0, 1, 2, 3, 4, 5, 6):
            cache.append_and_evict(block(fid))
        cur = block(7)
        keys, _, layout = cache.gather_context(cur)
        # enumerate the expected frame order by hand: s, i-3, i-2, i-1, i
        assert cache.frame_ids == [0, 4, 5, 6]
        assert keys.shape[0] == 5 * 4
        assert [r.kind for r in layout.regions] == ["sink", "neighbor", "current"]

    def test_stale_current_rejected(self):
        cache = HeadKVCache(CachePolicy("neighbor_window", 3))
        cache.append_and_evict(block(4))
        with pytest.raises(OrderingError):
            cache.gather_context(block(4))

    def test_gather_plus_attention_matches_masked_full_context(self):
        # the equivalence the whole artifact rests on, at cache level
        full = [block(i) for i in range(6)]
        cur = block(6)
        cache = HeadKVCache(CachePolicy("sink_only", 4))
        for b in full:
            cache.append_and_evict(b)
        keys, values, _ = cache.gather_context(cur)
        q = RNG.random((4, 3))
        pruned = attention(q, keys, values)

        full_k = np.concatenate([b.keys for b in full] + [cur.keys])
        full_v = np.concatenate([b.values for b in full] + [cur.values])
        mask = np.zeros(full_k.shape[0], dtype=bool)
        mask[:4] = True  # sink frame
        mask[-4:] = True  # current frame
        oracle = attention(q, full_k, full_v, mask=mask)
        np.testing.assert_allclose(pruned.output, oracle.output, atol=1e-6)


class TestCacheStats:
    def test_paper_accounting_identity(self):
        # 360 heads, window 9; half dummy-packed (1 frame), half merged
        # non-dummy (4 frames: 1 sink + 3 recent) -> 2.5/9
        cfg = config(
            num_heads=360,
            window_len=9,
            dummy_count=180,
            packing_enabled=True,
            merged_window=4,
        )
        classes = tuple(
            [HeadClass.DUMMY] * 180
            + [HeadClass.SINK] * 90
            + [HeadClass.NEIGHBOR] * 90
        )
        stats = cache_stats(HeadAssignment(classes, 180), cfg)
        assert stats.reduction_ratio == pytest.approx(0.2778, abs=1e-4)
        assert stats.baseline_past_frames == 9

    def test_uniform_budget_identity(self):
        assert uniform_budget_ratio(1.5, 9) == pytest.approx(0.1667, abs=1e-4)

    def test_all_baseline_ratio_is_one(self):
        cfg = config(window_len=5, merged_window=5)
        classes = tuple([HeadClass.NEIGHBOR] * 4)
        stats = cache_stats(HeadAssignment(classes, 0), cfg)
        assert stats.reduction_ratio == 1.0

    def test_ratio_invariant_under_permutation(self):
        cfg = config(num_heads=8, window_len=5, dummy_count=3)
        classes = [HeadClass.DUMMY] * 3 + [HeadClass.SINK] * 2 + [HeadClass.NEIGHBOR] * 3
        ref = cache_stats(HeadAssignment(tuple(classes), 3), cfg).reduction_ratio
        rng = np.random.default_rng(3)
        for _ in range(10):
            rng.shuffle(classes)
            r = cache_stats(HeadAssignment(tuple(classes), 3), cfg).reduction_ratio
            assert r == ref

    def test_context_extension_grows_neighbor_window(self):
        cfg = config(
            num_heads=4, window_len=4, dummy_count=2, context_extension=True
        )
        classes = (HeadClass.DUMMY, HeadClass.DUMMY, HeadClass.SINK, HeadClass.NEIGHBOR)
        assignment = HeadAssignment(classes, 2)
        # budget: 4 heads x 4 frames = 16; dummies use 2, sink uses 1 -> 13 left
        assert extension_window(assignment, cfg) == 13
        stats = cache_stats(assignment, cfg)
        assert stats.per_head_past_frames == (1, 1, 1, 13)

    def test_extension_never_shrinks_below_plain_window(self):
        cfg = config(num_heads=4, window_len=4, dummy_count=0, context_extension=True)
        classes = (HeadClass.NEIGHBOR,) * 4
        assert extension_window(HeadAssignment(classes, 0), cfg) == 4

    def test_extension_with_no_neighbors_is_none(self):
        cfg = config(num_heads=2, window_len=4, dummy_count=1, context_extension=True)
        classes = (HeadClass.DUMMY, HeadClass.SINK)
        assert extension_window(HeadAssignment(classes, 1), cfg) is None

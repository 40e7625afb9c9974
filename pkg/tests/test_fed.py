"""Source-pool protocol tests: sharing, selection, blending, aggregation."""

import itertools

import numpy as np
import pytest

from mhfed import fed, model, nn
from mhfed.embedding import Embedding, embedding_distance
from mhfed.fed import PoolEmptyError, PoolEntry, SourcePool


def make_head(seed, w=5):
    return nn.init(model.head_dims(w), model.HEAD_ACTIVATIONS, seed)


def make_embedding(rng):
    return Embedding(e=rng.normal(size=4), sample_count=10)


def make_pool(rng, n_domains=3, heads_per_domain=2, round_=1):
    pool = SourcePool()
    pool.round = round_
    seed = itertools.count()
    for j in range(n_domains):
        for i in range(heads_per_domain):
            entry = PoolEntry(
                domain_id=f"d{j}", head_index=i,
                weights=make_head(next(seed)),
                embedding=make_embedding(rng), version=round_,
            )
            pool.entries[entry.key] = entry
    return pool


def snapshots_and_embeddings(rng, client):
    snaps = model.snapshot_heads(client)
    embeds = [make_embedding(rng) for _ in snaps]
    return snaps, embeds


class TestShare:
    def test_drop_rate_zero_always_publishes(self, rng):
        client = model.init_client("d0", 2, 5, 0.01, None, 0)
        pool = SourcePool()
        pool.round = 3
        snaps, embeds = snapshots_and_embeddings(rng, client)
        for _ in range(50):
            assert fed.share(pool, "d0", snaps, embeds, 0.0, rng)
        assert set(pool.entries) == {("d0", 0), ("d0", 1)}

    def test_drop_rate_one_never_publishes(self, rng):
        client = model.init_client("d0", 2, 5, 0.01, None, 0)
        pool = SourcePool()
        snaps, embeds = snapshots_and_embeddings(rng, client)
        for _ in range(50):
            assert not fed.share(pool, "d0", snaps, embeds, 1.0, rng)
        assert pool.entries == {}

    def test_drop_rate_half_frequency(self):
        """Monte Carlo share rate for dr=0.5 sits near one half."""
        rng = np.random.default_rng(7)
        client = model.init_client("d0", 1, 5, 0.01, None, 0)
        pool = SourcePool()
        snaps, embeds = snapshots_and_embeddings(rng, client)
        hits = sum(fed.share(pool, "d0", snaps, embeds, 0.5, rng) for _ in range(10_000))
        assert 0.48 <= hits / 10_000 <= 0.52

    def test_single_draw_per_call(self, rng):
        """All heads of a domain share the same fate: one coin per round."""
        client = model.init_client("d0", 4, 5, 0.01, None, 0)
        snaps, embeds = snapshots_and_embeddings(rng, client)
        for trial in range(200):
            pool = SourcePool()
            if fed.share(pool, "d0", snaps, embeds, 0.5, np.random.default_rng(trial)):
                assert len(pool.entries) == 4
            else:
                assert len(pool.entries) == 0

    def test_replacement_is_atomic_and_stamped(self, rng):
        client = model.init_client("d0", 2, 5, 0.01, None, 1)
        pool = SourcePool()
        pool.round = 1
        snaps, embeds = snapshots_and_embeddings(rng, client)
        fed.share(pool, "d0", snaps, embeds, 0.0, rng)
        old_prints = {k: nn.fingerprint(e.weights) for k, e in pool.entries.items()}

        for _ in range(3):
            model.train_batch(client, _batch(rng, 8, 2))
        pool.round = 2
        snaps2, embeds2 = snapshots_and_embeddings(rng, client)
        fed.share(pool, "d0", snaps2, embeds2, 0.0, rng)
        for key, entry in pool.entries.items():
            assert entry.version == 2
            assert nn.fingerprint(entry.weights) != old_prints[key]

    def test_shared_weights_are_frozen_copies(self, rng):
        client = model.init_client("d0", 1, 5, 0.01, None, 0)
        pool = SourcePool()
        snaps, embeds = snapshots_and_embeddings(rng, client)
        fed.share(pool, "d0", snaps, embeds, 0.0, rng)
        stamp = nn.fingerprint(pool.entries[("d0", 0)].weights)
        for _ in range(3):
            model.train_batch(client, _batch(rng, 8, 1))
        assert nn.fingerprint(pool.entries[("d0", 0)].weights) == stamp

    def test_invalid_drop_rate_rejected(self, rng):
        client = model.init_client("d0", 1, 5, 0.01, None, 0)
        snaps, embeds = snapshots_and_embeddings(rng, client)
        with pytest.raises(ValueError, match="drop_rate"):
            fed.share(SourcePool(), "d0", snaps, embeds, 1.5, rng)

    def test_misaligned_embeddings_rejected(self, rng):
        client = model.init_client("d0", 2, 5, 0.01, None, 0)
        snaps, _ = snapshots_and_embeddings(rng, client)
        with pytest.raises(ValueError, match="embedding"):
            fed.share(SourcePool(), "d0", snaps, [make_embedding(rng)], 0.0, rng)


def _batch(rng, b, nf, w=5):
    from mhfed.data import SampleSet
    return SampleSet(
        x=rng.normal(size=(b, nf, w)),
        c=rng.choice([-1, 1], size=(b, nf)).astype(np.int8),
        y=rng.normal(size=b),
        t_index=np.arange(b, dtype=np.int64),
    )


def brute_force_single(pool, target_key, target_embedding):
    best_key, best_dist = None, None
    for key in sorted(pool.entries):
        if key == target_key:
            continue
        d = embedding_distance(target_embedding, pool.entries[key].embedding)
        if best_dist is None or d < best_dist:
            best_key, best_dist = key, d
    return best_key


def brute_force_multiple(pool, target_key, target_embedding):
    per_domain = {}
    for key in sorted(pool.entries):
        if key == target_key:
            continue
        d = embedding_distance(target_embedding, pool.entries[key].embedding)
        dom = key[0]
        if dom not in per_domain or d < per_domain[dom][0]:
            per_domain[dom] = (d, key)
    return [per_domain[dom][1] for dom in sorted(per_domain)]


class TestSelectSingle:
    def test_picks_nearest(self, rng):
        pool = make_pool(rng)
        target = make_embedding(rng)
        chosen = fed.select_single(pool, ("d0", 0), target)
        assert chosen.key == brute_force_single(pool, ("d0", 0), target)

    def test_excludes_own_entry(self, rng):
        pool = make_pool(rng, n_domains=1, heads_per_domain=2)
        own = ("d0", 0)
        # make own entry the unbeatable nearest
        target = Embedding(e=pool.entries[own].embedding.e.copy(), sample_count=1)
        chosen = fed.select_single(pool, own, target)
        assert chosen.key == ("d0", 1)

    def test_lexicographic_tie_break(self, rng):
        pool = make_pool(rng, n_domains=3, heads_per_domain=2)
        shared = make_embedding(rng)
        for entry in pool.entries.values():
            entry.embedding = Embedding(e=shared.e.copy(), sample_count=1)
        assert fed.select_single(pool, ("d0", 0), shared).key == ("d0", 1)
        assert fed.select_single(pool, ("d0", 1), shared).key == ("d0", 0)

    def test_empty_pool_raises(self, rng):
        with pytest.raises(PoolEmptyError):
            fed.select_single(SourcePool(), ("d0", 0), make_embedding(rng))
        pool = make_pool(rng, n_domains=1, heads_per_domain=1)
        with pytest.raises(PoolEmptyError):
            fed.select_single(pool, ("d0", 0), make_embedding(rng))

    def test_matches_brute_force_on_random_pools(self):
        rng = np.random.default_rng(101)
        for _ in range(300):
            pool = make_pool(rng, n_domains=int(rng.integers(1, 5)),
                             heads_per_domain=int(rng.integers(1, 4)))
            keys = sorted(pool.entries)
            target_key = keys[rng.integers(len(keys))]
            target = make_embedding(rng)
            expected = brute_force_single(pool, target_key, target)
            if expected is None:
                with pytest.raises(PoolEmptyError):
                    fed.select_single(pool, target_key, target)
            else:
                assert fed.select_single(pool, target_key, target).key == expected


class TestSelectMultiple:
    def test_one_per_domain(self, rng):
        pool = make_pool(rng, n_domains=4, heads_per_domain=3)
        target = make_embedding(rng)
        chosen = fed.select_multiple(pool, ("d1", 0), target)
        assert [e.key for e in chosen] == brute_force_multiple(pool, ("d1", 0), target)
        assert [e.domain_id for e in chosen] == sorted({e.domain_id for e in chosen})

    def test_own_domain_remains_via_other_heads(self, rng):
        pool = make_pool(rng, n_domains=2, heads_per_domain=2)
        chosen = fed.select_multiple(pool, ("d0", 0), make_embedding(rng))
        doms = [e.domain_id for e in chosen]
        assert doms == ["d0", "d1"]
        assert all(e.key != ("d0", 0) for e in chosen)

    def test_sole_entry_domain_omitted(self, rng):
        pool = make_pool(rng, n_domains=2, heads_per_domain=1)
        chosen = fed.select_multiple(pool, ("d0", 0), make_embedding(rng))
        assert [e.key for e in chosen] == [("d1", 0)]

    def test_empty_result_is_empty_list(self, rng):
        pool = make_pool(rng, n_domains=1, heads_per_domain=1)
        assert fed.select_multiple(pool, ("d0", 0), make_embedding(rng)) == []
        assert fed.select_multiple(SourcePool(), ("d0", 0), make_embedding(rng)) == []

    def test_matches_brute_force_on_random_pools(self):
        rng = np.random.default_rng(202)
        for _ in range(300):
            pool = make_pool(rng, n_domains=int(rng.integers(1, 5)),
                             heads_per_domain=int(rng.integers(1, 4)))
            keys = sorted(pool.entries)
            target_key = keys[rng.integers(len(keys))]
            target = make_embedding(rng)
            got = [e.key for e in fed.select_multiple(pool, target_key, target)]
            assert got == brute_force_multiple(pool, target_key, target)


class TestBlendScale:
    def test_equidistant_pair_splits_evenly(self, rng):
        target = Embedding(e=np.zeros(4), sample_count=1)
        a = PoolEntry("d1", 0, make_head(1), Embedding(e=np.array([1.0, 0, 0, 0]), sample_count=1), 1)
        b = PoolEntry("d2", 0, make_head(2), Embedding(e=np.array([0, 1.0, 0, 0]), sample_count=1), 1)
        np.testing.assert_allclose(fed.blend_scale([a, b], target), [0.5, 0.5], atol=1e-15)

    def test_farther_source_gets_larger_weight(self):
        target = Embedding(e=np.zeros(4), sample_count=1)
        near = PoolEntry("d1", 0, make_head(1), Embedding(e=np.zeros(4), sample_count=1), 1)
        far = PoolEntry("d2", 0, make_head(2), Embedding(e=np.full(4, 2.0), sample_count=1), 1)
        scales = fed.blend_scale([near, far], target)
        # distances 0 and 4: softmax([0, 4])
        np.testing.assert_allclose(scales, [1 / (1 + np.e**4), np.e**4 / (1 + np.e**4)], rtol=1e-12)
        assert scales[1] > scales[0]

    def test_negate_distance_prefers_nearer(self):
        target = Embedding(e=np.zeros(4), sample_count=1)
        near = PoolEntry("d1", 0, make_head(1), Embedding(e=np.zeros(4), sample_count=1), 1)
        far = PoolEntry("d2", 0, make_head(2), Embedding(e=np.full(4, 2.0), sample_count=1), 1)
        scales = fed.blend_scale([near, far], target, negate_distance=True)
        assert scales[0] > scales[1]

    def test_singleton_gets_unit_scale(self, rng):
        entry = PoolEntry("d1", 0, make_head(1), make_embedding(rng), 1)
        np.testing.assert_array_equal(fed.blend_scale([entry], make_embedding(rng)), [1.0])

    def test_sums_to_one(self, rng):
        for _ in range(100):
            k = int(rng.integers(1, 6))
            entries = [PoolEntry(f"d{i}", 0, make_head(i), make_embedding(rng), 1) for i in range(k)]
            scales = fed.blend_scale(entries, make_embedding(rng))
            np.testing.assert_allclose(scales.sum(), 1.0, atol=1e-12)
            assert (scales > 0).all()

    def test_large_distances_stay_finite(self):
        target = Embedding(e=np.zeros(4), sample_count=1)
        entries = [
            PoolEntry("d1", 0, make_head(1), Embedding(e=np.full(4, 100.0), sample_count=1), 1),
            PoolEntry("d2", 0, make_head(2), Embedding(e=np.full(4, 101.0), sample_count=1), 1),
        ]
        scales = fed.blend_scale(entries, target)
        assert np.isfinite(scales).all()
        np.testing.assert_allclose(scales.sum(), 1.0, atol=1e-12)

    def test_empty_selection_rejected(self, rng):
        with pytest.raises(ValueError, match="at least one"):
            fed.blend_scale([], make_embedding(rng))


class TestBlendUpdate:
    def test_alpha_zero_is_bitwise_copy(self, rng):
        target = make_head(0)
        sources = [PoolEntry("d1", 0, make_head(1), make_embedding(rng), 1)]
        out = fed.blend_update(target, sources, np.array([1.0]), 0.0)
        assert nn.fingerprint(out) == nn.fingerprint(target)
        assert out is not target

    def test_alpha_one_is_pure_source_mix(self, rng):
        target = make_head(0)
        source = make_head(1)
        out = fed.blend_update(target, [source], np.array([1.0]), 1.0)
        assert nn.fingerprint(out) == nn.fingerprint(source)

    def test_identical_nets_are_a_fixed_point(self, rng):
        base = make_head(5)
        sources = [PoolEntry(f"d{i}", 0, base.copy(), make_embedding(rng), 1) for i in range(3)]
        scales = fed.blend_scale(sources, make_embedding(rng))
        out = fed.blend_update(base, sources, scales, 0.37)
        for la, lb in zip(out.layers, base.layers):
            np.testing.assert_allclose(la.weights, lb.weights, atol=1e-15)
            np.testing.assert_allclose(la.bias, lb.bias, atol=1e-15)

    def test_result_within_convex_envelope(self, rng):
        target = make_head(0)
        sources = [PoolEntry(f"d{i}", 0, make_head(i + 1), make_embedding(rng), 1) for i in range(3)]
        scales = fed.blend_scale(sources, make_embedding(rng))
        out = fed.blend_update(target, sources, scales, 0.4)
        for li, layer in enumerate(out.layers):
            stack = np.stack([target.layers[li].weights]
                             + [s.weights.layers[li].weights for s in sources])
            assert (layer.weights >= stack.min(axis=0) - 1e-12).all()
            assert (layer.weights <= stack.max(axis=0) + 1e-12).all()

    def test_interpolation_formula(self, rng):
        target = make_head(0)
        sources = [PoolEntry(f"d{i}", 0, make_head(i + 1), make_embedding(rng), 1) for i in range(2)]
        scales = np.array([0.3, 0.7])
        alpha = 0.25
        out = fed.blend_update(target, sources, scales, alpha)
        for li, layer in enumerate(out.layers):
            mix = 0.3 * sources[0].weights.layers[li].weights + 0.7 * sources[1].weights.layers[li].weights
            np.testing.assert_allclose(
                layer.weights, (1 - alpha) * target.layers[li].weights + alpha * mix, rtol=1e-14)

    def test_plain_nets_accepted_as_sources(self, rng):
        target = make_head(0)
        out = fed.blend_update(target, [make_head(1)], np.array([1.0]), 0.5)
        assert out.dims == target.dims

    def test_topology_mismatch_names_entry(self, rng):
        target = make_head(0, w=5)
        bad = PoolEntry("d9", 3, make_head(1, w=7), make_embedding(rng), 1)
        with pytest.raises(ValueError, match=r"d9.*3"):
            fed.blend_update(target, [bad], np.array([1.0]), 0.5)

    def test_invalid_alpha_rejected(self, rng):
        target = make_head(0)
        src = [PoolEntry("d1", 0, make_head(1), make_embedding(rng), 1)]
        for alpha in (-0.1, 1.1):
            with pytest.raises(ValueError, match="alpha"):
                fed.blend_update(target, src, np.array([1.0]), alpha)

    def test_unnormalized_scales_rejected(self, rng):
        target = make_head(0)
        src = [PoolEntry("d1", 0, make_head(1), make_embedding(rng), 1)]
        with pytest.raises(ValueError, match="scales"):
            fed.blend_update(target, src, np.array([0.5]), 0.5)


class TestFedavg:
    def test_mean_of_two_sources(self, rng):
        target = make_head(0)
        pool = SourcePool()
        a, b = make_head(1), make_head(2)
        for layer in a.layers:
            layer.weights[:] = 0.0
            layer.bias[:] = 0.0
        for layer in b.layers:
            layer.weights[:] = 2.0
            layer.bias[:] = 2.0
        pool.entries[("d1", 0)] = PoolEntry("d1", 0, a, make_embedding(rng), 1)
        pool.entries[("d2", 0)] = PoolEntry("d2", 0, b, make_embedding(rng), 1)
        avg = fed.fedavg_aggregate(pool, ("d0", 0), target)
        for layer in avg.layers:
            np.testing.assert_array_equal(layer.weights, np.ones_like(layer.weights))
            np.testing.assert_array_equal(layer.bias, np.ones_like(layer.bias))

    def test_includes_own_published_entry(self, rng):
        pool = make_pool(rng, n_domains=1, heads_per_domain=1)
        target = make_head(9)
        avg = fed.fedavg_aggregate(pool, ("d0", 0), target)
        assert nn.fingerprint(avg) == nn.fingerprint(pool.entries[("d0", 0)].weights)

    def test_skips_incompatible_topologies(self, rng):
        pool = SourcePool()
        good = make_head(1, w=5)
        pool.entries[("d1", 0)] = PoolEntry("d1", 0, good, make_embedding(rng), 1)
        pool.entries[("d2", 0)] = PoolEntry("d2", 0, make_head(2, w=9), make_embedding(rng), 1)
        avg = fed.fedavg_aggregate(pool, ("d0", 0), make_head(0, w=5))
        assert nn.fingerprint(avg) == nn.fingerprint(good)

    def test_empty_pool_raises(self, rng):
        with pytest.raises(PoolEmptyError):
            fed.fedavg_aggregate(SourcePool(), ("d0", 0), make_head(0))


class TestRandomSelect:
    def test_excludes_own_key(self, rng):
        pool = make_pool(rng, n_domains=2, heads_per_domain=1)
        for trial in range(100):
            entry = fed.random_select(pool, ("d0", 0), np.random.default_rng(trial))
            assert entry.key == ("d1", 0)

    def test_uniform_over_candidates(self):
        rng = np.random.default_rng(4)
        pool = make_pool(rng, n_domains=2, heads_per_domain=2)
        counts = {}
        picker = np.random.default_rng(99)
        n = 20_000
        for _ in range(n):
            key = fed.random_select(pool, ("d0", 0), picker).key
            counts[key] = counts.get(key, 0) + 1
        assert set(counts) == {("d0", 1), ("d1", 0), ("d1", 1)}
        for c in counts.values():
            assert abs(c / n - 1 / 3) < 0.02

    def test_empty_pool_raises(self, rng):
        with pytest.raises(PoolEmptyError):
            fed.random_select(SourcePool(), ("d0", 0), rng)
        pool = make_pool(rng, n_domains=1, heads_per_domain=1)
        with pytest.raises(PoolEmptyError):
            fed.random_select(pool, ("d0", 0), rng)

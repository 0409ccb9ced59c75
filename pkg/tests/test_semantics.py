import itertools

import numpy as np
import pytest

from streamsplat.core import Camera, FrameObservation, GaussianArrays, RigidTransform, logit
from streamsplat.errors import BadK, EmptyLabel
from streamsplat.semantics import (
    CacheEntry,
    SemanticCache,
    assign_sem_ids,
    category_mask,
    forward_warp,
    ingest_labels,
    integrate_feature_map,
    knowledge_gain,
    matching_distribution,
    project_embedding,
)

from conftest import small_camera


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def single_linkage_partition(embeds, threshold):
    """Brute-force agglomerative single-linkage clustering at a cosine
    threshold: merge the closest pair of clusters while their single-link
    similarity reaches the threshold."""
    clusters = [{i} for i in range(len(embeds))]
    sim = embeds @ embeds.T
    while True:
        best = None
        best_sim = threshold
        for a, b in itertools.combinations(range(len(clusters)), 2):
            link = max(sim[i, j] for i in clusters[a] for j in clusters[b])
            if link >= best_sim:
                best_sim = link
                best = (a, b)
        if best is None:
            return clusters
        a, b = best
        clusters[a] |= clusters[b]
        del clusters[b]


def partition_of_cache(cache, labels):
    groups = {}
    for i, lbl in enumerate(labels):
        for j, e in enumerate(cache.entries):
            pass
    return groups


class TestIngestLabels:
    def test_duplicate_label_merges(self):
        cache = SemanticCache(0.6)
        e = unit([1.0, 0.2, 0.0])
        ingest_labels(cache, [("chair", e, {}), ("chair", e, {})])
        assert len(cache) == 1
        assert cache.entries[0].hits == 2

    def test_similar_embeddings_merge(self):
        # "brown toy bear" / "brown teddy bear": cosine 0.95 >= 0.6
        cache = SemanticCache(0.6)
        a = unit([1.0, 0.0, 0.0])
        c, s = 0.95, np.sqrt(1 - 0.95**2)
        b = unit([c, s, 0.0])
        assert a @ b == pytest.approx(0.95)
        _, ids = ingest_labels(cache, [("brown toy bear", a, {}), ("brown teddy bear", b, {})])
        assert len(cache) == 1
        assert ids["brown teddy bear"] == ids["brown toy bear"]
        assert cache.entries[0].label == "brown toy bear"

    def test_distinct_embeddings_stay_separate(self):
        cache = SemanticCache(0.6)
        ingest_labels(cache, [("chair", unit([1, 0, 0]), {}), ("sofa", unit([0, 1, 0]), {})])
        assert len(cache) == 2

    def test_empty_label_raises(self):
        cache = SemanticCache(0.6)
        with pytest.raises(EmptyLabel):
            ingest_labels(cache, [("", unit([1, 0]), {})])

    def test_phys_fusion_keeps_first_and_adopts_new_slots(self):
        cache = SemanticCache(0.6)
        e = unit([1.0, 0.0])
        ingest_labels(cache, [("cup", e, {"material": "ceramic"})])
        ingest_labels(cache, [("cup", e, {"material": "plastic", "rigidity": 0.9})])
        entry = cache.entries[0]
        assert entry.phys["material"] == "ceramic"  # higher-hits side wins
        assert entry.phys["rigidity"] == 0.9  # new slot adopted
        assert entry.hits == 2

    def _crafted_six(self):
        # two tight triples, cross-cluster similarity < 0.6
        base1 = unit([1.0, 0.0, 0.0, 0.0])
        base2 = unit([0.0, 1.0, 0.0, 0.0])
        out = []
        for k, base in ((0, base1), (1, base2)):
            for d in range(3):
                v = base.copy()
                v[2 + k] = 0.25 + 0.05 * d
                out.append(unit(v))
        return np.stack(out)

    def test_partition_matches_single_linkage_oracle(self):
        embeds = self._crafted_six()
        oracle = single_linkage_partition(embeds, 0.6)
        oracle_sets = sorted(tuple(sorted(c)) for c in oracle)

        cache = SemanticCache(0.6)
        _, ids = ingest_labels(cache, [(f"l{i}", embeds[i], {}) for i in range(6)])
        groups = {}
        for i in range(6):
            groups.setdefault(ids[f"l{i}"], set()).add(i)
        got = sorted(tuple(sorted(c)) for c in groups.values())
        assert got == oracle_sets

    def test_order_invariance_on_separable_sets(self):
        embeds = self._crafted_six()
        reference = None
        for perm in itertools.permutations(range(6)):
            if perm[0] != 0 and reference is not None:
                # spot-check a subset of permutations to keep runtime sane
                if sum(perm) % 7:
                    continue
            cache = SemanticCache(0.6)
            _, ids = ingest_labels(cache, [(f"l{i}", embeds[i], {}) for i in perm])
            groups = {}
            for i in perm:
                groups.setdefault(ids[f"l{i}"], frozenset()), None
            part = {}
            for i in perm:
                part.setdefault(ids[f"l{i}"], set()).add(i)
            canon = frozenset(frozenset(s) for s in part.values())
            if reference is None:
                reference = canon
            assert canon == reference

    def test_idempotence(self):
        embeds = self._crafted_six()
        cache = SemanticCache(0.6)
        labels = [(f"l{i}", embeds[i], {}) for i in range(6)]
        _, ids1 = ingest_labels(cache, labels)
        n1 = len(cache)
        hits1 = [e.hits for e in cache.entries]
        _, ids2 = ingest_labels(cache, labels)
        assert len(cache) == n1
        assert ids1 == ids2
        assert [e.hits for e in cache.entries] == [2 * h for h in hits1]

    def test_entry_pairwise_similarity_below_threshold(self):
        rng = np.random.default_rng(0)
        cache = SemanticCache(0.6)
        labels = [(f"r{i}", unit(rng.standard_normal(6)), {}) for i in range(40)]
        ingest_labels(cache, labels)
        E = cache.embed_matrix()
        sim = E @ E.T - np.eye(len(cache))
        assert sim.max() < 0.6


class TestCategoryMask:
    def test_one_hot_exact_support(self):
        # spatially coherent support (majority smoothing preserves blocks)
        cls = np.zeros((16, 16), dtype=int)
        cls[3:9, 4:12] = 1
        cls[10:14, 1:6] = 2
        fm = np.eye(3)[cls]
        entry = CacheEntry("c1", np.eye(3)[1])
        mask = category_mask(fm, entry, k=8)
        assert np.array_equal(mask, cls == 1)

    def test_all_zero_map_empty_mask(self):
        entry = CacheEntry("x", unit([1, 0, 0]))
        assert not category_mask(np.zeros((8, 8, 3)), entry, k=8).any()

    def test_bad_k(self):
        entry = CacheEntry("x", unit([1, 0]))
        with pytest.raises(BadK):
            category_mask(np.zeros((4, 4, 2)), entry, k=0)

    def test_noisy_one_hot_within_two_percent(self):
        rng = np.random.default_rng(5)
        h = w = 32
        yy, xx = np.mgrid[0:h, 0:w]
        clean = ((yy - 16) ** 2 + (xx - 16) ** 2) <= 100
        cls = np.where(clean, 1, 0)
        noisy = cls.copy()
        flip = rng.uniform(size=cls.shape) < 0.10
        noisy[flip] = 1 - noisy[flip]
        fm = np.eye(2)[noisy]
        entry = CacheEntry("blob", np.eye(2)[1])
        mask = category_mask(fm, entry, k=8)
        hamming = (mask != clean).mean()
        assert hamming <= 0.02

    def test_projection_rules(self):
        e = unit([3.0, 4.0])
        assert np.allclose(project_embedding(e, 2), e)
        p3 = project_embedding(e, 3)
        assert np.allclose(p3[:2], e) and p3[2] == 0.0
        p1 = project_embedding(e, 1)
        assert np.linalg.norm(p1) == pytest.approx(1.0)


class TestIntegrate:
    def _frame(self, fm, conf=None, pointmap=None):
        h, w = fm.shape[:2]
        return FrameObservation(
            index=0,
            rgb=np.zeros((h, w, 3)),
            feature_map=fm,
            confidence=conf,
            pointmap=pointmap,
        )

    def test_no_pointmap_is_padded_semantics(self):
        rng = np.random.default_rng(2)
        fm = rng.standard_normal((4, 4, 3))
        fm /= np.linalg.norm(fm, axis=-1, keepdims=True)
        out = integrate_feature_map(self._frame(fm), SemanticCache(0.6))
        assert out.shape == (4, 4, 6)
        assert np.allclose(out[..., :3], fm, atol=1e-12)
        assert np.all(out[..., 3:] == 0.0)
        assert np.allclose(np.linalg.norm(out, axis=-1), 1.0)

    def test_confidence_zero_pixels_exactly_zero(self):
        rng = np.random.default_rng(3)
        fm = rng.standard_normal((4, 4, 2))
        fm /= np.linalg.norm(fm, axis=-1, keepdims=True)
        conf = np.ones((4, 4))
        conf[1, 2] = 0.0
        out = integrate_feature_map(self._frame(fm, conf=conf), SemanticCache(0.6))
        assert np.all(out[1, 2] == 0.0)
        others = np.linalg.norm(out, axis=-1)
        others[1, 2] = 1.0
        assert np.allclose(others, 1.0)

    def test_gain_arithmetic(self):
        # per-pixel product: geometry 3 x similarity 2 x confidence 0.5
        assert knowledge_gain(3.0, 2.0, 0.5) == pytest.approx(3.0)

    def test_unit_rows_with_pointmap(self):
        rng = np.random.default_rng(4)
        fm = np.eye(3)[rng.integers(0, 3, (5, 5))]
        pm = rng.standard_normal((5, 5, 3)) + np.array([0, 0, 3.0])
        out = integrate_feature_map(self._frame(fm, pointmap=pm), SemanticCache(0.6))
        assert np.allclose(np.linalg.norm(out, axis=-1), 1.0)
        assert np.any(out[..., 3:] != 0.0)


class TestMatching:
    def test_self_matching_argmax(self):
        rng = np.random.default_rng(6)
        f = rng.standard_normal((6, 6, 8))
        f /= np.linalg.norm(f, axis=-1, keepdims=True)
        m = matching_distribution(f, f, radius=2)
        center = np.nonzero((m.offsets == 0).all(axis=1))[0][0]
        assert np.all(np.argmax(m.probs, axis=-1) == center)

    def test_constant_maps_uniform_rows(self):
        f = np.tile(unit([1.0, 2.0, 3.0]), (5, 5, 1))
        m = matching_distribution(f, f, radius=1)
        for y in (0, 2, 4):
            for x in (0, 2, 4):
                _, mass = m.row(y, x)
                assert np.allclose(mass, 1.0 / mass.size)

    def test_dense_softmax_oracle(self):
        rng = np.random.default_rng(7)
        h = w = 8
        f1 = rng.standard_normal((h, w, 4))
        f1 /= np.linalg.norm(f1, axis=-1, keepdims=True)
        f2 = rng.standard_normal((h, w, 4))
        f2 /= np.linalg.norm(f2, axis=-1, keepdims=True)
        r = 3
        tau = 0.07
        m = matching_distribution(f1, f2, tau=tau, radius=r)
        # dense full-image softmax then window restriction + renormalization
        flat1 = f1.reshape(-1, 4)
        flat2 = f2.reshape(-1, 4)
        dense = np.exp((flat1 @ flat2.T) / tau)
        dense /= dense.sum(axis=1, keepdims=True)
        for y in range(h):
            for x in range(w):
                pix, mass = m.row(y, x)
                dense_row = dense[y * w + x].reshape(h, w)
                sel = dense_row[pix[:, 0], pix[:, 1]]
                sel = sel / sel.sum()
                assert np.allclose(mass, sel, atol=1e-9)

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(8)
        f1 = rng.standard_normal((7, 9, 3))
        f1[2, 3] = 0.0  # zero-feature source -> uniform row
        norms = np.linalg.norm(f1, axis=-1, keepdims=True)
        np.divide(f1, norms, out=f1, where=norms > 0)
        f2 = rng.standard_normal((7, 9, 3))
        f2 /= np.linalg.norm(f2, axis=-1, keepdims=True)
        m = matching_distribution(f1, f2, radius=2)
        sums = m.probs.sum(axis=-1)
        assert np.all(np.abs(sums - 1.0) <= 1e-6)
        assert m.probs.min() >= 0.0


class TestForwardWarp:
    def _arrays(self, mu, feat):
        n = len(mu)
        return GaussianArrays(
            mu=np.asarray(mu, dtype=float),
            scale=np.log(np.full((n, 3), 0.1)),
            quat=np.tile([1.0, 0, 0, 0], (n, 1)),
            opacity_logit=np.zeros(n),
            color=np.full((n, 3), 0.5),
            feat=np.asarray(feat, dtype=float),
        )

    def test_beta_zero_noop(self):
        rng = np.random.default_rng(9)
        f = rng.standard_normal((8, 8, 3))
        f /= np.linalg.norm(f, axis=-1, keepdims=True)
        m = matching_distribution(f, f, radius=1)
        arrays = self._arrays([[0, 0, 2.0]], [unit([1, 1, 0])])
        cam = small_camera(8, f=10.0)
        out = forward_warp(arrays, m, cam, cam, beta=0.0)
        assert np.array_equal(out.feat, arrays.feat)

    def test_fixed_point(self):
        # Gaussian feature equals the (self-matching) map at its pixel
        cam = small_camera(8, f=10.0)
        f = np.zeros((8, 8, 3))
        base = unit([1.0, 2.0, 3.0])
        f[...] = base
        # distinct per-pixel features so self-matching is deterministic
        rng = np.random.default_rng(10)
        f = rng.standard_normal((8, 8, 3))
        f /= np.linalg.norm(f, axis=-1, keepdims=True)
        m = matching_distribution(f, f, radius=0)
        arrays = self._arrays([[0.0, 0.0, 2.0]], [unit([1, 0, 0])])
        xy, _ = cam.project_points(arrays.mu)
        px, py = int(xy[0, 0]), int(xy[0, 1])
        arrays.feat[0] = f[py, px]
        out = forward_warp(arrays, m, cam, cam, beta=0.3)
        assert np.allclose(out.feat[0], f[py, px], atol=1e-12)

    def test_hand_computed_blend(self):
        cam = small_camera(8, f=10.0)
        e1 = np.array([1.0, 0.0, 0.0])
        e2 = np.array([0.0, 1.0, 0.0])
        src = np.tile(e1, (8, 8, 1))
        tgt = np.tile(e2, (8, 8, 1))
        m = matching_distribution(src, tgt, radius=0)  # deterministic self-pixel rows
        arrays = self._arrays([[0.0, 0.0, 2.0]], [e1])
        out = forward_warp(arrays, m, cam, cam, beta=0.3)
        expected = unit(0.7 * e1 + 0.3 * e2)
        assert np.allclose(out.feat[0], expected, atol=1e-12)

    def test_norm_preserved(self):
        rng = np.random.default_rng(11)
        f1 = rng.standard_normal((12, 12, 4))
        f1 /= np.linalg.norm(f1, axis=-1, keepdims=True)
        f2 = rng.standard_normal((12, 12, 4))
        f2 /= np.linalg.norm(f2, axis=-1, keepdims=True)
        m = matching_distribution(f1, f2, radius=2)
        mu = rng.uniform(-0.3, 0.3, (15, 3)) + np.array([0, 0, 2.0])
        feat = rng.standard_normal((15, 4))
        feat /= np.linalg.norm(feat, axis=1, keepdims=True)
        arrays = self._arrays(mu, feat)
        out = forward_warp(arrays, m, small_camera(12, f=20.0), small_camera(12, f=20.0))
        assert np.allclose(np.linalg.norm(out.feat, axis=1), 1.0)


def test_assign_sem_ids():
    cache = SemanticCache(0.6)
    ingest_labels(cache, [("a", unit([1, 0]), {}), ("b", unit([0, 1]), {})])
    arrays = GaussianArrays(
        mu=np.zeros((2, 3)),
        scale=np.zeros((2, 3)),
        quat=np.tile([1.0, 0, 0, 0], (2, 1)),
        opacity_logit=np.zeros(2),
        color=np.zeros((2, 3)),
        feat=np.array([[0.9, 0.1, 0, 0, 0], [0.1, 0.9, 0, 0, 0]]),
    )
    ids = assign_sem_ids(arrays, cache)
    assert list(ids) == [0, 1]

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tableqg.embed import DimensionMismatch
from tableqg.index import (
    IndexFormatError,
    IVFIndex,
    MultiIndex,
    brute_force_search,
    build_ivf,
    maxsim_score,
    rank,
    search_dense,
    search_multi,
)


def unit_rows(rng, n, dim):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def corpus(n, dim, seed):
    return [(f"v{i:04d}", v) for i, v in enumerate(unit_rows(np.random.default_rng(seed), n, dim))]


class TestBuild:
    def test_nlist_clamped(self):
        idx = build_ivf(corpus(10, 8, 0), nlist=256)
        assert idx.nlist == 10 and len(idx) == 10

    def test_identical_vectors_share_a_list(self):
        v = np.array([1.0, 0.0, 0.0])
        idx = build_ivf([(f"d{i}", v) for i in range(4)], nlist=4)
        sizes = sorted(len(idx.postings(c)) for c in range(idx.nlist))
        assert sizes[-1] == 4

    def test_partition(self):
        vecs = corpus(300, 8, 1)
        idx = build_ivf(vecs, nlist=20)
        listed = [i for c in range(idx.nlist) for i in idx.postings(c)]
        assert sorted(listed) == sorted(i for i, _ in vecs)

    def test_deterministic_bytes(self):
        vecs = corpus(200, 16, 2)
        assert build_ivf(vecs, 16, seed=5).to_bytes() == build_ivf(vecs, 16, seed=5).to_bytes()

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            build_ivf([], 4)
        with pytest.raises(ValueError):
            build_ivf([("a", np.ones(2)), ("a", np.ones(2))], 1)
        with pytest.raises(DimensionMismatch):
            build_ivf([("a", np.ones(2)), ("b", np.ones(3))], 1)


class TestSearch:
    def test_hand_2d(self):
        vecs = [("a", np.array([1.0, 0.0])), ("b", np.array([0.6, 0.8])), ("c", np.array([0.0, 1.0]))]
        q = np.array([0.8, 0.6])
        res = brute_force_search(vecs, q, 3)
        assert res.ids == ["b", "a", "c"]
        assert res.scores == pytest.approx([0.96, 0.8, 0.6])
        assert build_ivf(vecs, 2).search(q, 3, nprobe=2).ids == ["b", "a", "c"]

    def test_ties_by_id(self):
        assert rank(["z", "b", "a", "c"], [0.5, 0.5, 0.5, 0.9], 3).ids == ["c", "a", "b"]

    def test_self_similarity(self):
        vecs = corpus(100, 8, 3)
        idx = build_ivf(vecs, 10)
        for tid, v in vecs[:10]:
            hit = idx.search(v, 1, nprobe=idx.nlist).hits[0]
            assert hit[0] == tid and hit[1] == pytest.approx(1.0, abs=1e-9)

    def test_k_larger_than_corpus(self):
        vecs = corpus(5, 4, 4)
        assert len(build_ivf(vecs, 2).search(vecs[0][1], 50, nprobe=2)) == 5

    def test_nprobe_validation(self):
        idx = build_ivf(corpus(20, 4, 5), 4)
        with pytest.raises(ValueError):
            idx.search(np.ones(4) / 2, 3, nprobe=0)
        assert idx.search(np.ones(4) / 2, 3, nprobe=99).ids == idx.search(np.ones(4) / 2, 3, nprobe=4).ids

    def test_query_dim_checked(self):
        with pytest.raises(DimensionMismatch):
            build_ivf(corpus(5, 4, 0), 2).search(np.ones(3), 1, 1)

    def test_recall_at_default_nprobe(self):
        # fixture frozen after measurement: dim 16, nlist 64, data seed 7 gives 0.913
        vecs = corpus(1000, 16, 7)
        idx = build_ivf(vecs, nlist=64, seed=0)
        queries = unit_rows(np.random.default_rng(8), 100, 16)
        recalls = [
            len(set(search_dense(idx, q, 10, nprobe=16).ids) & set(brute_force_search(vecs, q, 10).ids)) / 10
            for q in queries
        ]
        assert np.mean(recalls) >= 0.8

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 32), st.integers(0, 10_000), st.integers(1, 20))
    def test_full_probe_is_exact(self, n, nlist, seed, k):
        vecs = corpus(n, 6, seed)
        idx = build_ivf(vecs, nlist, seed=seed)
        q = unit_rows(np.random.default_rng(seed + 1), 1, 6)[0]
        assert idx.search(q, k, nprobe=idx.nlist).hits == brute_force_search(vecs, q, k).hits

    def test_orthogonal_insert_keeps_ranking(self):
        vecs = [(f"d{i}", np.array([np.cos(t), np.sin(t), 0.0])) for i, t in enumerate(np.linspace(0, 1.5, 12))]
        q = np.array([1.0, 0.0, 0.0])
        before = brute_force_search(vecs, q, 12).ids
        after = brute_force_search(vecs + [("zz", np.array([0.0, 0.0, 1.0]))], q, 13).ids
        assert [i for i in after if i != "zz"] == before


class TestPersistence:
    def test_round_trip(self, tmp_path):
        vecs = corpus(120, 8, 9)
        idx = build_ivf(vecs, 12)
        idx.save(tmp_path / "i.bin")
        back = IVFIndex.load(tmp_path / "i.bin")
        assert back.ids == idx.ids and np.array_equal(back.vectors, idx.vectors)
        assert np.array_equal(back.centroids, idx.centroids) and np.array_equal(back.offsets, idx.offsets)
        q = vecs[3][1]
        assert back.search(q, 5, 4).hits == idx.search(q, 5, 4).hits

    def test_corruption_detected(self):
        data = bytearray(build_ivf(corpus(20, 4, 0), 4).to_bytes())
        data[40] ^= 0xFF
        with pytest.raises(IndexFormatError):
            IVFIndex.from_bytes(bytes(data))

    def test_bad_magic(self):
        with pytest.raises(IndexFormatError):
            IVFIndex.from_bytes(b"NOPE" + b"\0" * 100)


def naive_maxsim(q, d):
    total = 0.0
    for qi in q:
        total += max(sum(a * b for a, b in zip(qi, dj)) for dj in d)
    return total


class TestMaxSim:
    def test_hand_2x3(self):
        q = np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])
        d = np.array([[0.6, 0.8, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        # 0.6 for the first query token, 0.8 for the second
        assert maxsim_score(q, d) == pytest.approx(1.4)

    def test_self_score_is_token_count(self):
        d = np.eye(5)[[0, 2, 4]]
        assert maxsim_score(d, d) == pytest.approx(3.0)

    def test_disjoint_is_zero(self):
        assert maxsim_score(np.eye(4)[:2], np.eye(4)[2:]) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            maxsim_score(np.ones((1, 2)), np.ones((1, 3)))

    @given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
    def test_bounds_and_permutation(self, seed, nq, nd):
        rng = np.random.default_rng(seed)
        q, d = unit_rows(rng, nq, 5), unit_rows(rng, nd, 5)
        s = maxsim_score(q, d)
        assert -nq - 1e-9 <= s <= nq + 1e-9
        assert s == pytest.approx(maxsim_score(q, d[rng.permutation(nd)]), abs=1e-12)
        assert s == pytest.approx(naive_maxsim(q, d), abs=1e-9)

    def test_search_against_oracle(self):
        rng = np.random.default_rng(11)
        entries = [(f"t{i:02d}", unit_rows(rng, int(rng.integers(1, 6)), 8)) for i in range(30)]
        idx = MultiIndex.build(entries)
        q = unit_rows(rng, 3, 8)
        expected = sorted(((naive_maxsim(q, d), tid) for tid, d in entries), key=lambda p: (-p[0], p[1]))[:7]
        res = search_multi(idx, q, 7)
        assert res.ids == [tid for _, tid in expected]
        assert res.scores == pytest.approx([s for s, _ in expected], abs=1e-9)
        assert len(search_multi(idx, q, 100)) == 30

    def test_candidates(self):
        entries = [("a", np.eye(3)[[0]]), ("b", np.eye(3)[[1]]), ("c", np.eye(3)[[0, 1]])]
        res = MultiIndex.build(entries).search(np.eye(3)[[0]], 3, candidates=["a", "b"])
        assert res.ids == ["a", "b"]

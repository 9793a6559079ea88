"""Concept cache: build oracle, retrieval oracle, prompt synthesis."""

import numpy as np
import pytest

from cplearn import concept_cache as cc
from cplearn import toyworld as tw
from cplearn.errors import CacheBuildError, CacheQueryError, DegenerateInputError
from cplearn.feature_store import ConceptLexicon, FeatureRecord, SPLIT_TRAIN


def unit_rows(rng, n, d):
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_lexicon(words, embeddings):
    return ConceptLexicon(words=list(words), categories=["other"] * len(words),
                          embeddings=embeddings)


def make_records(features):
    return [FeatureRecord(record_id=f"img{i:03d}", class_id=0,
                          final_feature=np.asarray(row, dtype=np.float64),
                          level_summaries=[], split_tag=SPLIT_TRAIN)
            for i, row in enumerate(features)]


def brute_force_build(lexicon, records):
    """Independent per-concept argmax over every (concept, image) pair."""
    chosen = []
    for i in range(len(lexicon.words)):
        best_j, best_s = 0, -np.inf
        for j, rec in enumerate(records):
            s = float(np.dot(lexicon.embeddings[i], rec.final_feature))
            if s > best_s:
                best_j, best_s = j, s
        chosen.append((best_j, best_s))
    return chosen


def brute_force_topk(cache, query, k):
    """Independent full sort with word de-duplication."""
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    entries = []
    for idx, word in enumerate(cache.values):
        entries.append((word, float(np.dot(cache.keys[idx], q)), idx))
    best = {}
    for word, sim, idx in entries:
        if word not in best or sim > best[word][0]:
            best[word] = (sim, idx)
    ranked = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[1][1]))[:k]
    return [w for w, _ in ranked], [s for _, (s, _) in ranked]


class TestBuildCache:
    def test_exact_self_match(self):
        # hand-set exactly-unit vectors so the similarity is exactly 1.0
        basis = np.eye(4)
        lexicon = make_lexicon(["red"], basis[2:3])
        records = make_records([basis[0], basis[2], basis[3]])
        cache = cc.build_cache(lexicon, records)
        np.testing.assert_array_equal(cache.keys[0], basis[2])
        assert cache.provenance[0] == (0, "img001", 1.0)

    def test_matches_brute_force_on_handset(self):
        rng = np.random.default_rng(0)
        lex_emb = unit_rows(rng, 2, 5)
        feats = unit_rows(rng, 3, 5)
        lexicon = make_lexicon(["redish", "bluish"], lex_emb)
        records = make_records(feats)
        cache = cc.build_cache(lexicon, records)
        for i, (j, s) in enumerate(brute_force_build(lexicon, records)):
            np.testing.assert_array_equal(cache.keys[i], feats[j])
            assert cache.provenance[i][1] == records[j].record_id
            assert cache.provenance[i][2] == pytest.approx(s, abs=0)

    def test_full_lexicon_over_toy_bank(self):
        # 2000 concepts against a 16-shot, 10-class toy bank
        cfg = tw.ToyWorldConfig(classes=10, shots=16, test_per_class=0,
                                lexicon_size=2000)
        data = tw.build_toy_dataset(cfg)
        train = [r for r in data.records if r.split_tag == SPLIT_TRAIN]
        cache = cc.build_cache(data.lexicon, train)
        assert cache.keys.shape == (2000, cfg.dim)
        assert len(cache.values) == 2000

    def test_keys_are_input_rows(self):
        rng = np.random.default_rng(1)
        feats = unit_rows(rng, 6, 8)
        lexicon = make_lexicon([f"w{i}" for i in range(10)], unit_rows(rng, 10, 8))
        cache = cc.build_cache(lexicon, make_records(feats))
        pool = {row.tobytes() for row in feats}
        assert all(key.tobytes() in pool for key in cache.keys)

    def test_empty_training_set(self):
        rng = np.random.default_rng(2)
        lexicon = make_lexicon(["w"], unit_rows(rng, 1, 4))
        with pytest.raises(CacheBuildError):
            cc.build_cache(lexicon, [])

    def test_tie_breaks_lower_record_index(self):
        v = np.array([1.0, 0.0])
        lexicon = make_lexicon(["w"], v[None, :])
        records = make_records([v, v])  # identical candidates
        cache = cc.build_cache(lexicon, records)
        assert cache.provenance[0][1] == "img000"


class TestQueryTopK:
    def _random_cache(self, rng, n=50, d=8, dup_words=False):
        keys = unit_rows(rng, n, d)
        if dup_words:
            vocab = [f"w{i}" for i in range(max(2, n // 3))]
            values = [vocab[int(rng.integers(0, len(vocab)))] for _ in range(n)]
        else:
            values = [f"w{i}" for i in range(n)]
        prov = [(i, f"img{i}", 0.0) for i in range(n)]
        return cc.ConceptCache(keys=keys, values=values, provenance=prov)

    def test_self_retrieval(self):
        rng = np.random.default_rng(3)
        cache = self._random_cache(rng)
        hits = cc.query_topk(cache, cache.keys[7], k=3)
        assert hits.words[0] == "w7"
        assert hits.similarities[0] == pytest.approx(1.0, abs=1e-12)

    def test_default_k_ten(self):
        rng = np.random.default_rng(4)
        cache = self._random_cache(rng, n=64)
        hits = cc.query_topk(cache, rng.normal(size=8), k=10)
        assert len(hits) == 10

    def test_equals_brute_force_including_duplicates(self):
        rng = np.random.default_rng(5)
        for trial in range(30):
            cache = self._random_cache(rng, n=int(rng.integers(5, 60)),
                                       d=6, dup_words=bool(trial % 2))
            query = rng.normal(size=6)
            k = int(rng.integers(1, cache.distinct_words + 1))
            hits = cc.query_topk(cache, query, k)
            words, sims = brute_force_topk(cache, query, k)
            assert hits.words == words  # exact set and order
            # per-row dot vs BLAS gemv differ in summation order by ~1 ulp
            np.testing.assert_allclose(hits.similarities, sims, atol=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        cache = self._random_cache(rng, n=40, d=8)
        query = rng.normal(size=8)
        base = cc.query_topk(cache, query, k=5)
        for c in (0.5, 2.0, 4.0):  # power-of-two scaling is exact in floats
            scaled = cc.query_topk(cache, c * query, k=5)
            assert scaled.words == base.words
            np.testing.assert_array_equal(scaled.similarities, base.similarities)
        odd = cc.query_topk(cache, 3.7 * query, k=5)
        assert odd.words == base.words
        np.testing.assert_allclose(odd.similarities, base.similarities, atol=1e-12)

    def test_k_prefix_monotonicity(self):
        rng = np.random.default_rng(7)
        cache = self._random_cache(rng, n=30, d=8)
        query = rng.normal(size=8)
        for k in range(1, 20):
            small = cc.query_topk(cache, query, k)
            big = cc.query_topk(cache, query, k + 1)
            assert big.words[:k] == small.words

    def test_k_bounds(self):
        rng = np.random.default_rng(8)
        cache = self._random_cache(rng, n=10, d=4)
        with pytest.raises(CacheQueryError):
            cc.query_topk(cache, rng.normal(size=4), k=11)
        with pytest.raises(CacheQueryError):
            cc.query_topk(cache, rng.normal(size=4), k=0)

    def test_zero_query_rejected(self):
        rng = np.random.default_rng(9)
        cache = self._random_cache(rng, n=5, d=4)
        with pytest.raises(DegenerateInputError):
            cc.query_topk(cache, np.zeros(4), k=1)


class TestSynthesizePrompt:
    def test_default_template(self):
        hits = cc.ConceptHits(words=["red", "round"], similarities=[0.9, 0.8])
        assert cc.synthesize_prompt("cat", hits) == \
            "a photo of a cat, which is red, round."

    def test_empty_hits_degrade(self):
        hits = cc.ConceptHits(words=[], similarities=[])
        assert cc.synthesize_prompt("cat", hits) == "a photo of a cat."
        assert cc.synthesize_prompt("cat", None) == "a photo of a cat."

    def test_template_override_verbatim(self):
        hits = cc.ConceptHits(words=["oak"], similarities=[0.5])
        assert cc.synthesize_prompt("table", hits, template="{class_name} made of {w1}") \
            == "table made of oak"

    def test_unknown_field_rejected(self):
        hits = cc.ConceptHits(words=["oak"], similarities=[0.5])
        with pytest.raises(CacheQueryError):
            cc.synthesize_prompt("table", hits, template="{class_name} of {w2}")

    def test_empty_class_name_rejected(self):
        with pytest.raises(DegenerateInputError):
            cc.synthesize_prompt("", None)


class TestCacheFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        keys = unit_rows(rng, 12, 6).astype(np.float32).astype(np.float64)
        cache = cc.ConceptCache(keys=keys, values=[f"w{i}" for i in range(12)],
                                provenance=[(i, f"img{i}", float(i) / 12) for i in range(12)])
        path = tmp_path / "cache.cplc"
        cc.write_cache(cache, path)
        loaded = cc.read_cache(path)
        np.testing.assert_array_equal(loaded.keys, cache.keys)
        assert loaded.values == cache.values
        assert loaded.provenance == cache.provenance

"""Visual concept cache: build, Top-K retrieval, and prompt synthesis.

Keys are training-image features (one per concept: the image whose feature
has the highest cosine similarity to the concept's text feature); values are
the concept words.  Retrieval is an exact full scan -- a few thousand keys
make approximate search pointless and exactness lets tests compare against a
brute-force oracle.

Ties anywhere break deterministically: build by lower record index, query by
lower concept index.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .binio import Reader, Writer
from .errors import CacheBuildError, CacheQueryError, DegenerateInputError
from .feature_store import ConceptLexicon, FeatureRecord, FORMAT_VERSION

CACHE_MAGIC = b"CPLC"

DEFAULT_TEMPLATE = "a photo of a {class_name}, which is {concepts}."
BASELINE_TEMPLATE = "a photo of a {class_name}."


@dataclass
class ConceptHits:
    """Top-K retrieved concept words, strictly ordered by similarity."""

    words: list[str]
    similarities: list[float]

    def __post_init__(self):
        if len(self.words) != len(self.similarities):
            raise CacheQueryError("words/similarities length mismatch")

    def __len__(self) -> int:
        return len(self.words)


@dataclass
class ConceptCache:
    keys: np.ndarray                      # (I', d_v) unit rows
    values: list[str]                     # concept word per key
    provenance: list[tuple[int, str, float]]  # (concept index, record_id, similarity)

    def __post_init__(self):
        if self.keys.shape[0] != len(self.values):
            raise CacheBuildError("keys/values length mismatch")
        self._word_count = len(set(self.values))

    @property
    def distinct_words(self) -> int:
        return self._word_count


def build_cache(lexicon: ConceptLexicon, train_features: Sequence[FeatureRecord]
                ) -> ConceptCache:
    """Match every concept to its best training image (argmax cosine)."""
    if len(train_features) == 0:
        raise CacheBuildError("cannot build a concept cache from zero training features")
    feats = np.stack([r.final_feature for r in train_features])  # (N, d)
    if feats.shape[1] != lexicon.text_dim:
        raise CacheBuildError(
            f"image dim {feats.shape[1]} != concept dim {lexicon.text_dim} "
            "(keys and concept features must share the embedding space)")
    sims = lexicon.embeddings @ feats.T  # (I, N)
    best = np.argmax(sims, axis=1)       # first occurrence wins ties (lower index)
    keys = feats[best].copy()
    provenance = [(i, train_features[j].record_id, float(sims[i, j]))
                  for i, j in enumerate(best)]
    return ConceptCache(keys=keys, values=list(lexicon.words), provenance=provenance)


def query_topk(cache: ConceptCache, query: np.ndarray, k: int) -> ConceptHits:
    """The K best-matching distinct concept words for a query feature.

    Duplicate words keep their best-scoring key.  Order is (similarity desc,
    concept index asc), which makes results reproducible under exact ties.
    """
    if not 1 <= k <= cache.distinct_words:
        raise CacheQueryError(
            f"k={k} outside [1, {cache.distinct_words}] distinct concept words")
    query = np.asarray(query, dtype=np.float64)
    norm = np.linalg.norm(query)
    if norm == 0.0:
        raise DegenerateInputError("zero query vector")
    sims = cache.keys @ (query / norm)

    # one global sort by (similarity desc, concept index asc); the first
    # occurrence of each word along that order is that word's best key
    order = np.lexsort((np.arange(sims.shape[0]), -sims))
    words: list[str] = []
    similarities: list[float] = []
    seen: set[str] = set()
    for idx in order:
        word = cache.values[idx]
        if word in seen:
            continue
        seen.add(word)
        words.append(word)
        similarities.append(float(sims[idx]))
        if len(words) == k:
            break
    return ConceptHits(words=words, similarities=similarities)


def synthesize_prompt(class_name: str, hits: ConceptHits | None,
                      template: str = DEFAULT_TEMPLATE) -> str:
    """Instantiate the prompt template; pure function of its inputs.

    The template may reference ``{class_name}``, ``{concepts}`` (the words
    joined by ", " in rank order), or positional ``{w1}``..``{wK}``.  With no
    hits the default template degrades to the bare photo prompt.
    """
    if not class_name:
        raise DegenerateInputError("empty class name")
    words = list(hits.words) if hits is not None else []
    if not words and template == DEFAULT_TEMPLATE:
        template = BASELINE_TEMPLATE
    fields = {"class_name": class_name, "concepts": ", ".join(words)}
    for i, word in enumerate(words, start=1):
        fields[f"w{i}"] = word
    try:
        return template.format(**fields)
    except (KeyError, IndexError) as exc:
        raise CacheQueryError(f"template {template!r} references unknown field: {exc}")


# -- cache serialization ------------------------------------------------------


def write_cache(cache: ConceptCache, path: str | Path) -> None:
    with open(Path(path), "wb") as fh:
        w = Writer(fh)
        w.magic(CACHE_MAGIC)
        w.u32(FORMAT_VERSION)
        w.u32(cache.keys.shape[1])
        w.u64(cache.keys.shape[0])
        for word, (concept_idx, record_id, sim) in zip(cache.values, cache.provenance):
            w.string(word)
            w.u32(concept_idx)
            w.string(record_id)
            w.f64(sim)
        w.f32_array(cache.keys)


def read_cache(path: str | Path) -> ConceptCache:
    path = Path(path)
    with open(path, "rb") as fh:
        r = Reader(fh, name=path.name)
        r.magic(CACHE_MAGIC)
        r.version(FORMAT_VERSION)
        dim = r.u32()
        count = r.u64()
        values, provenance = [], []
        for _ in range(count):
            word = r.string()
            concept_idx = r.u32()
            record_id = r.string()
            sim = r.f64()
            values.append(word)
            provenance.append((concept_idx, record_id, sim))
        keys = r.f32_array(count * dim).reshape(count, dim)
        r.expect_eof()
    return ConceptCache(keys=keys, values=values, provenance=provenance)

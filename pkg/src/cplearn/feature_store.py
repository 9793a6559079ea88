"""On-disk embedding bank, dataset manifest, and few-shot sampling.

The bank file layout (little-endian):

    magic "CPLF" | version u32=1 | d_v u32 | d_t u32 | Q u32
    | Q channel dims (u32 each) | record count u64
    | per record: id len u16 + UTF-8 id | class_id u32 | split_tag u8
      | final_feature (d_v f32) | level summaries (C_1..C_Q f32, level order)

The concept lexicon uses the same header style (magic "CPLL"): a word table
(word + category byte per entry) followed by an I x d_t f32 matrix.

Vectors are stored already L2-normalized; loading re-verifies the norm
instead of silently renormalizing, so exporter bugs surface here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .binio import Reader, Writer
from .errors import (
    BankDimError,
    BankRecordError,
    SamplingError,
    SplitError,
)

BANK_MAGIC = b"CPLF"
LEXICON_MAGIC = b"CPLL"
FORMAT_VERSION = 1

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
_SPLIT_CODES = {SPLIT_TRAIN: 0, SPLIT_TEST: 1}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}

CATEGORIES = ("color", "material", "size", "shape", "texture", "other")
_CATEGORY_CODES = {name: i for i, name in enumerate(CATEGORIES)}

UNIT_NORM_TOL = 1e-5


@dataclass(eq=False)
class FeatureRecord:
    """One image: final embedding, per-layer pooled summaries, label, split."""

    record_id: str
    class_id: int
    final_feature: np.ndarray
    level_summaries: list[np.ndarray]
    split_tag: str = SPLIT_TRAIN

    def validate(self, d_v: int, channel_dims: Sequence[int]) -> None:
        if self.class_id < 0:
            raise BankRecordError(f"record {self.record_id!r}: negative class_id")
        if self.split_tag not in _SPLIT_CODES:
            raise BankRecordError(f"record {self.record_id!r}: bad split {self.split_tag!r}")
        if self.final_feature.shape != (d_v,):
            raise BankDimError(
                f"record {self.record_id!r}: final_feature dim {self.final_feature.shape} != ({d_v},)")
        if len(self.level_summaries) != len(channel_dims):
            raise BankDimError(
                f"record {self.record_id!r}: {len(self.level_summaries)} levels, "
                f"header says {len(channel_dims)}")
        for q, (row, dim) in enumerate(zip(self.level_summaries, channel_dims)):
            if row.shape != (dim,):
                raise BankDimError(
                    f"record {self.record_id!r}: level {q} dim {row.shape} != ({dim},)")
            if not np.all(np.isfinite(row)):
                raise BankRecordError(f"record {self.record_id!r}: non-finite level {q}")
        if not np.all(np.isfinite(self.final_feature)):
            raise BankRecordError(f"record {self.record_id!r}: non-finite final_feature")
        norm = float(np.linalg.norm(self.final_feature))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise BankRecordError(
                f"record {self.record_id!r}: final_feature norm {norm:.8f} not unit")


@dataclass
class ConceptLexicon:
    """Ordered concept vocabulary with unit-row text embeddings."""

    words: list[str]
    categories: list[str]
    embeddings: np.ndarray  # (I, d_t)

    def __post_init__(self):
        if len(self.words) < 1:
            raise BankRecordError("lexicon must hold at least one concept")
        if len(set(self.words)) != len(self.words):
            raise BankRecordError("lexicon words must be unique")
        if len(self.categories) != len(self.words):
            raise BankDimError("lexicon categories/words length mismatch")
        for cat in self.categories:
            if cat not in _CATEGORY_CODES:
                raise BankRecordError(f"unknown concept category {cat!r}")
        if self.embeddings.shape[0] != len(self.words):
            raise BankDimError("lexicon embedding rows != word count")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise BankRecordError(
                f"lexicon row {bad} ({self.words[bad]!r}) norm {norms[bad]:.8f} not unit")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def text_dim(self) -> int:
        return self.embeddings.shape[1]

    def truncated(self, size: int) -> "ConceptLexicon":
        """Category-balanced prefix of the lexicon (round-robin per category)."""
        if not 1 <= size <= len(self.words):
            raise BankDimError(f"truncated size {size} outside [1, {len(self.words)}]")
        if size == len(self.words):
            return self
        by_cat: dict[str, list[int]] = {}
        cat_order: list[str] = []
        for i, cat in enumerate(self.categories):
            if cat not in by_cat:
                by_cat[cat] = []
                cat_order.append(cat)
            by_cat[cat].append(i)
        picked: list[int] = []
        cursor = {cat: 0 for cat in cat_order}
        while len(picked) < size:
            progressed = False
            for cat in cat_order:
                if len(picked) >= size:
                    break
                pos = cursor[cat]
                if pos < len(by_cat[cat]):
                    picked.append(by_cat[cat][pos])
                    cursor[cat] = pos + 1
                    progressed = True
            if not progressed:  # pragma: no cover - size <= len guards this
                break
        picked.sort()
        return ConceptLexicon(words=[self.words[i] for i in picked],
                              categories=[self.categories[i] for i in picked],
                              embeddings=self.embeddings[picked])


@dataclass
class DatasetManifest:
    """Human-inspectable sidecar describing a bank and its companion files."""

    dataset_name: str
    class_names: list[str]
    shots_per_class: int
    feature_dim: int
    text_dim: int
    level_count: int
    channel_dims: list[int]
    bank_path: str = ""
    lexicon_path: str = ""
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.shots_per_class < 1:
            raise BankDimError("shots_per_class must be >= 1")
        if len(self.class_names) < 2:
            raise BankDimError("a dataset needs at least two classes")
        if self.level_count != len(self.channel_dims):
            raise BankDimError("level_count disagrees with channel_dims")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


@dataclass
class EvalSplit:
    """Base/novel class partition for generalization harnesses."""

    base_classes: list[int]
    novel_classes: list[int]
    disjoint: bool = True

    def __post_init__(self):
        if self.disjoint and set(self.base_classes) & set(self.novel_classes):
            raise SplitError("base and novel classes overlap")


class Bank:
    """Loaded, validated bank: immutable records plus their manifest."""

    def __init__(self, records: list[FeatureRecord], manifest: DatasetManifest):
        ids = [r.record_id for r in records]
        if len(set(ids)) != len(ids):
            raise BankRecordError("duplicate record_id in bank")
        for rec in records:
            rec.validate(manifest.feature_dim, manifest.channel_dims)
            if rec.class_id >= len(manifest.class_names):
                raise BankRecordError(
                    f"record {rec.record_id!r}: class_id {rec.class_id} out of range")
        self.records = records
        self.manifest = manifest

    def select(self, split_tag: str, class_ids: Iterable[int] | None = None
               ) -> list[FeatureRecord]:
        wanted = None if class_ids is None else set(class_ids)
        return [r for r in self.records
                if r.split_tag == split_tag and (wanted is None or r.class_id in wanted)]


# -- bank serialization -----------------------------------------------------


def write_bank(records: Sequence[FeatureRecord], manifest: DatasetManifest,
               path: str | Path) -> None:
    """Write the binary bank plus a JSON manifest sidecar next to it."""
    path = Path(path)
    ids = set()
    for rec in records:
        rec.validate(manifest.feature_dim, manifest.channel_dims)
        if rec.record_id in ids:
            raise BankRecordError(f"duplicate record_id {rec.record_id!r}")
        ids.add(rec.record_id)
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.magic(BANK_MAGIC)
        w.u32(FORMAT_VERSION)
        w.u32(manifest.feature_dim)
        w.u32(manifest.text_dim)
        w.u32(manifest.level_count)
        for dim in manifest.channel_dims:
            w.u32(dim)
        w.u64(len(records))
        for rec in records:
            w.string(rec.record_id)
            w.u32(rec.class_id)
            w.u8(_SPLIT_CODES[rec.split_tag])
            w.f32_array(rec.final_feature)
            for row in rec.level_summaries:
                w.f32_array(row)
    sidecar_path(path).write_text(manifest.to_json(), encoding="utf-8")


def sidecar_path(bank_path: str | Path) -> Path:
    return Path(str(bank_path) + ".json")


def expected_bank_size(manifest: DatasetManifest, record_ids: Sequence[str]) -> int:
    """Byte size the header arithmetic predicts for a bank."""
    header = 4 + 4 + 4 + 4 + 4 + 4 * manifest.level_count + 8
    per_vec = 4 * manifest.feature_dim + 4 * sum(manifest.channel_dims)
    body = sum(2 + len(rid.encode("utf-8")) + 4 + 1 + per_vec for rid in record_ids)
    return header + body


def read_bank(path: str | Path, manifest: DatasetManifest | None = None
              ) -> tuple[list[FeatureRecord], DatasetManifest]:
    """Load and validate a bank; raises distinct errors per failure mode.

    Without an explicit manifest the JSON sidecar next to the bank is used.
    """
    path = Path(path)
    if manifest is None:
        manifest = DatasetManifest.from_json(sidecar_path(path).read_text(encoding="utf-8"))
    with open(path, "rb") as fh:
        r = Reader(fh, name=path.name)
        r.magic(BANK_MAGIC)
        r.version(FORMAT_VERSION)
        d_v, d_t, q = r.u32(), r.u32(), r.u32()
        channel_dims = [r.u32() for _ in range(q)]
        if (d_v, d_t, q) != (manifest.feature_dim, manifest.text_dim, manifest.level_count) \
                or channel_dims != list(manifest.channel_dims):
            raise BankDimError(
                f"{path.name}: header dims {(d_v, d_t, q, channel_dims)} disagree with manifest")
        count = r.u64()
        records = []
        for _ in range(count):
            rid = r.string()
            class_id = r.u32()
            split_code = r.u8()
            if split_code not in _SPLIT_NAMES:
                raise BankRecordError(f"record {rid!r}: unknown split code {split_code}")
            final = r.f32_array(d_v)
            levels = [r.f32_array(dim) for dim in channel_dims]
            rec = FeatureRecord(record_id=rid, class_id=class_id,
                                final_feature=final, level_summaries=levels,
                                split_tag=_SPLIT_NAMES[split_code])
            rec.validate(d_v, channel_dims)
            records.append(rec)
        r.expect_eof()
    return records, manifest


def load_bank(path: str | Path, manifest: DatasetManifest | None = None) -> Bank:
    records, manifest = read_bank(path, manifest)
    return Bank(records, manifest)


def load_dataset(manifest_path: str | Path) -> tuple[Bank, ConceptLexicon]:
    """Open a dataset through its manifest: bank plus concept lexicon."""
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.from_json(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent
    bank = load_bank(root / manifest.bank_path, manifest)
    lexicon = read_lexicon(root / manifest.lexicon_path)
    if lexicon.text_dim != manifest.text_dim:
        raise BankDimError(
            f"lexicon dim {lexicon.text_dim} != manifest text dim {manifest.text_dim}")
    return bank, lexicon


# -- lexicon serialization ---------------------------------------------------


def write_lexicon(lexicon: ConceptLexicon, path: str | Path) -> None:
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.magic(LEXICON_MAGIC)
        w.u32(FORMAT_VERSION)
        w.u32(lexicon.text_dim)
        w.u64(len(lexicon.words))
        for word, cat in zip(lexicon.words, lexicon.categories):
            w.string(word)
            w.u8(_CATEGORY_CODES[cat])
        w.f32_array(lexicon.embeddings)


def read_lexicon(path: str | Path) -> ConceptLexicon:
    path = Path(path)
    with open(path, "rb") as fh:
        r = Reader(fh, name=path.name)
        r.magic(LEXICON_MAGIC)
        r.version(FORMAT_VERSION)
        d_t = r.u32()
        count = r.u64()
        words, cats = [], []
        for _ in range(count):
            words.append(r.string())
            code = r.u8()
            if code >= len(CATEGORIES):
                raise BankRecordError(f"lexicon entry {words[-1]!r}: bad category {code}")
            cats.append(CATEGORIES[code])
        mat = r.f32_array(count * d_t).reshape(count, d_t)
        r.expect_eof()
    return ConceptLexicon(words=words, categories=cats, embeddings=mat)


# -- sampling and splits ------------------------------------------------------


def sample_few_shot(records: Sequence[FeatureRecord], shots: int, num_classes: int,
                    seed: int) -> list[FeatureRecord]:
    """Pick exactly ``shots`` train-tagged records for each of ``num_classes``.

    Selection depends only on the record *set* and the seed: candidates are
    ordered by record_id and drawn with a per-class generator, so shuffling
    the input does not change the outcome.
    """
    groups: dict[int, list[FeatureRecord]] = {}
    for rec in records:
        if rec.split_tag == SPLIT_TRAIN:
            groups.setdefault(rec.class_id, []).append(rec)
    classes = sorted(groups)
    if len(classes) < num_classes:
        raise SamplingError(
            f"need {num_classes} classes with train records, found {len(classes)}")
    picked: list[FeatureRecord] = []
    for class_id in classes[:num_classes]:
        pool = sorted(groups[class_id], key=lambda r: r.record_id)
        if len(pool) < shots:
            raise SamplingError(
                f"class {class_id} has {len(pool)} train records, need {shots}")
        rng = np.random.default_rng([seed, class_id])
        idx = sorted(rng.choice(len(pool), size=shots, replace=False).tolist())
        picked.extend(pool[i] for i in idx)
    return picked


def make_base_novel_split(class_names: Sequence[str], rule: str = "half") -> EvalSplit:
    """Partition classes into base/novel; ids ordered by class name.

    ``half``: first ceil(D/2) names are base.  ``alternate``: every other
    name starting with the first.
    """
    if len(class_names) < 2:
        raise SplitError("base/novel split needs at least two classes")
    order = sorted(range(len(class_names)), key=lambda i: (class_names[i], i))
    if rule == "half":
        cut = math.ceil(len(order) / 2)
        base, novel = order[:cut], order[cut:]
    elif rule == "alternate":
        base, novel = order[0::2], order[1::2]
    else:
        raise SplitError(f"unknown split rule {rule!r}")
    return EvalSplit(base_classes=base, novel_classes=novel, disjoint=True)

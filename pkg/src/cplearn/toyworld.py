"""Constructed attribute-correlated datasets for offline runs and tests.

Every class gets a pseudo-word name, a per-class style direction, and a
handful of characteristic attributes drawn from a shared low-level pool, so
attribute knowledge transfers between base and novel classes while class
identity does not.  All randomness is keyed on the config seed; rebuilding
with the same config is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import ToyImageEncoder, ToyImageSpec, ToySignalMix, ToyTextEncoder, _stable_rng
from .errors import DegenerateInputError
from .feature_store import (
    CATEGORIES,
    ConceptLexicon,
    DatasetManifest,
    FeatureRecord,
    SPLIT_TEST,
    SPLIT_TRAIN,
    write_bank,
    write_lexicon,
)

CONCEPT_PROMPT_PREFIX = "The photo is"

_BASE_VOCAB = {
    "color": ["red", "blue", "green", "yellow", "purple", "orange", "pink",
              "brown", "black", "white", "gray", "teal", "maroon", "beige"],
    "material": ["wooden", "metallic", "plastic", "glassy", "woven", "leather",
                 "stone", "papery", "rubbery", "ceramic", "concrete", "waxy"],
    "size": ["tiny", "small", "large", "huge", "narrow", "wide", "thick",
             "thin", "short", "tall", "compact", "bulky"],
    "shape": ["round", "square", "triangular", "oval", "flat", "curved",
              "pointed", "hollow", "twisted", "angular", "conical", "wavy"],
    "texture": ["striped", "spotted", "smooth", "rough", "glossy", "matte",
                "furry", "scaly", "bumpy", "grainy", "ribbed", "cracked"],
}

_SYLLABLES = ["ba", "cor", "del", "fen", "gol", "hem", "jin", "kal", "lor",
              "mun", "nev", "pods", "quil", "rem", "sot", "tav", "urn", "vex",
              "wob", "yim", "zar"]


def make_class_names(count: int, seed: int = 0) -> list[str]:
    """Pronounceable pseudo-word class names, unique and deterministic."""
    rng = _stable_rng(seed, "class-names")
    names: list[str] = []
    seen = set()
    while len(names) < count:
        name = "".join(rng.choice(_SYLLABLES) for _ in range(2))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return sorted(names)


def make_concept_words(count: int) -> tuple[list[str], list[str]]:
    """Concept vocabulary: real attribute words first, then numbered filler.

    Categories are interleaved so any balanced truncation keeps the real
    (image-active) words.
    """
    cats = [c for c in CATEGORIES if c != "other"]
    pools = {c: list(_BASE_VOCAB[c]) for c in cats}
    words, categories = [], []
    counter = {c: 0 for c in cats}
    while len(words) < count:
        for cat in cats:
            if len(words) >= count:
                break
            pool = pools[cat]
            idx = counter[cat]
            word = pool[idx] if idx < len(pool) else f"{cat}{idx:04d}"
            counter[cat] = idx + 1
            words.append(word)
            categories.append(cat)
    return words, categories


@dataclass
class ToyWorldConfig:
    classes: int = 10
    shots: int = 16
    test_per_class: int = 20
    dim: int = 32
    channel_dims: tuple[int, ...] = (32, 32, 32, 32)
    lexicon_size: int = 64
    active_attributes: int = 12
    attrs_per_class: int = 3
    attrs_per_image: int = 3
    noise_scale: float = 0.55
    seed: int = 0
    pair_weight: float = 0.35
    mix: ToySignalMix = field(default_factory=ToySignalMix)
    dataset_name: str = "toyworld"
    variant: int = 0  # same classes/attributes/encoder, different image draws


@dataclass
class ToyDataset:
    records: list[FeatureRecord]
    manifest: DatasetManifest
    lexicon: ConceptLexicon
    class_attributes: dict[int, list[str]]


def build_lexicon(cfg: ToyWorldConfig, encoder: ToyTextEncoder) -> ConceptLexicon:
    words, categories = make_concept_words(cfg.lexicon_size)
    embeddings = np.stack([encoder.encode(f"{CONCEPT_PROMPT_PREFIX} {w}") for w in words])
    # single precision: in-memory lexicon equals its on-disk bytes
    embeddings = embeddings.astype(np.float32).astype(np.float64)
    return ConceptLexicon(words=words, categories=categories, embeddings=embeddings)


def build_toy_dataset(cfg: ToyWorldConfig) -> ToyDataset:
    if cfg.active_attributes < cfg.attrs_per_class:
        raise DegenerateInputError("active attribute pool smaller than per-class draw")
    if cfg.active_attributes > cfg.lexicon_size:
        raise DegenerateInputError("active attribute pool exceeds lexicon size")

    encoder = ToyTextEncoder(cfg.dim, seed=cfg.seed, pair_weight=cfg.pair_weight)
    lexicon = build_lexicon(cfg, encoder)
    image_encoder = ToyImageEncoder(encoder, cfg.channel_dims, mix=cfg.mix)

    class_names = make_class_names(cfg.classes, seed=cfg.seed)
    pool = lexicon.words[: cfg.active_attributes]
    class_attrs: dict[int, list[str]] = {}
    for cid in range(cfg.classes):
        rng = _stable_rng(cfg.seed, "class-attrs", cid)
        picks = rng.choice(len(pool), size=cfg.attrs_per_class, replace=False)
        class_attrs[cid] = [pool[i] for i in sorted(picks.tolist())]

    records: list[FeatureRecord] = []
    for cid, name in enumerate(class_names):
        for split, count in ((SPLIT_TRAIN, cfg.shots), (SPLIT_TEST, cfg.test_per_class)):
            for i in range(count):
                rng = _stable_rng(cfg.seed, "image-attrs", cfg.variant, cid, split, i)
                k = min(cfg.attrs_per_image, cfg.attrs_per_class)
                chosen = rng.choice(cfg.attrs_per_class, size=k, replace=False)
                attrs = [class_attrs[cid][j] for j in sorted(chosen.tolist())]
                spec = ToyImageSpec(
                    record_id=f"{name}-{split}-{i:04d}",
                    class_id=cid,
                    class_name=name,
                    attributes=attrs,
                    split_tag=split,
                    noise_scale=cfg.noise_scale,
                    seed=cfg.seed * 1000003 + cfg.variant,
                )
                records.append(image_encoder.encode(spec))

    manifest = DatasetManifest(
        dataset_name=cfg.dataset_name,
        class_names=class_names,
        shots_per_class=cfg.shots,
        feature_dim=cfg.dim,
        text_dim=cfg.dim,
        level_count=len(cfg.channel_dims),
        channel_dims=list(cfg.channel_dims),
        notes={
            "encoder": {"kind": "toy", "dim": cfg.dim, "seed": cfg.seed,
                        "pair_weight": cfg.pair_weight},
            "concept_prompt_prefix": CONCEPT_PROMPT_PREFIX,
            "world_seed": cfg.seed,
        },
    )
    return ToyDataset(records=records, manifest=manifest, lexicon=lexicon,
                      class_attributes=class_attrs)


def export_toy_dataset(cfg: ToyWorldConfig, out_dir: str | Path) -> Path:
    """Write bank, lexicon, and manifest files; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = build_toy_dataset(cfg)
    bank_path = out / "bank.cplf"
    lexicon_path = out / "lexicon.cpll"
    data.manifest.bank_path = bank_path.name
    data.manifest.lexicon_path = lexicon_path.name
    write_bank(data.records, data.manifest, bank_path)
    write_lexicon(data.lexicon, lexicon_path)
    manifest_path = out / "manifest.json"
    manifest_path.write_text(data.manifest.to_json(), encoding="utf-8")
    return manifest_path

"""Forward-pass composition: cache query -> prompt -> encode -> project ->
fuse -> classify.

Both the trainer and the evaluator drive this object.  Text features for a
(record, class set) pair are constant while encoders stay frozen, so they
are computed once and reused across epochs; the memo also covers the concept
hits, which depend only on the record.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as mdl
from . import numcore as nc
from .concept_cache import (
    BASELINE_TEMPLATE,
    ConceptCache,
    ConceptHits,
    DEFAULT_TEMPLATE,
    query_topk,
    synthesize_prompt,
)
from .encoders import TextEncoder
from .errors import DimensionError
from .feature_store import FeatureRecord
from .model import ClassifierConfig, FusionState, ProjectorParams
from .numcore import Tensor


def zero_shot_probabilities(encoder: TextEncoder, class_names: list[str],
                            record: FeatureRecord, cfg: ClassifierConfig,
                            prompts: list[str] | None = None) -> np.ndarray:
    """Hand-crafted-prompt classifier: softmax of cosine/temperature.

    Plain numpy on purpose: this is the independent reference the trained
    pipeline is checked against, so it shares no code with the tensor path.
    """
    if prompts is None:
        prompts = [synthesize_prompt(name, None, BASELINE_TEMPLATE)
                   for name in class_names]
    rows = np.stack([encoder.encode(p) for p in prompts])
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    f_v = record.final_feature / np.linalg.norm(record.final_feature)
    logits = rows @ f_v / cfg.temperature
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


@dataclass
class PipelineConfig:
    template: str = DEFAULT_TEMPLATE
    k_concepts: int = 10


class Pipeline:
    """Concept-guided prompting plus the trainable head, for one vocabulary."""

    def __init__(self, encoder: TextEncoder, cache: ConceptCache | None,
                 params: ProjectorParams, fusion: FusionState,
                 classifier: ClassifierConfig, class_names: list[str],
                 template: str = DEFAULT_TEMPLATE, k_concepts: int = 10):
        if k_concepts > 0 and cache is None:
            raise DimensionError("k_concepts > 0 requires a concept cache")
        self.encoder = encoder
        self.cache = cache
        self.params = params
        self.fusion = fusion
        self.classifier = classifier
        self.class_names = list(class_names)
        self.template = template
        self.k_concepts = k_concepts
        self._hits_memo: dict[str, ConceptHits | None] = {}
        self._text_memo: dict[tuple, np.ndarray] = {}

    # -- prompt side -----------------------------------------------------

    def hits_for(self, record: FeatureRecord) -> ConceptHits | None:
        if self.k_concepts == 0:
            return None
        hits = self._hits_memo.get(record.record_id)
        if hits is None:
            hits = query_topk(self.cache, record.final_feature, self.k_concepts)
            self._hits_memo[record.record_id] = hits
        return hits

    def prompts_for(self, record: FeatureRecord,
                    class_names: list[str] | None = None) -> list[str]:
        names = self.class_names if class_names is None else class_names
        hits = self.hits_for(record)
        return [synthesize_prompt(name, hits, self.template) for name in names]

    def text_features(self, record: FeatureRecord,
                      class_names: list[str] | None = None) -> np.ndarray:
        names = tuple(self.class_names if class_names is None else class_names)
        key = (record.record_id, names)
        cached = self._text_memo.get(key)
        if cached is None:
            prompts = self.prompts_for(record, list(names))
            cached = np.stack([self.encoder.encode(p) for p in prompts])
            self._text_memo[key] = cached
        return cached

    # -- head side ---------------------------------------------------------

    def fusion_for(self, class_names: list[str] | None) -> FusionState:
        """Adapter rows matched by class name; unseen classes get zero rows."""
        if class_names is None or list(class_names) == self.class_names:
            return self.fusion
        rows = np.zeros((len(class_names), self.params.d_t))
        trained = {name: i for i, name in enumerate(self.class_names)}
        for i, name in enumerate(class_names):
            row = trained.get(name)
            if row is not None:
                rows[i] = self.fusion.adapter.data[row]
        return FusionState(adapter=Tensor(rows), alpha=self.fusion.alpha,
                           beta=self.fusion.beta)

    def logits(self, record: FeatureRecord,
               class_names: list[str] | None = None) -> Tensor:
        f_t = Tensor(self.text_features(record, class_names))
        f_tv = mdl.project(f_t, record.level_summaries, self.params)
        refined = mdl.fuse(f_t, f_tv, self.fusion_for(class_names))
        return mdl.class_logits(refined, record.final_feature, self.classifier)

    def probabilities(self, record: FeatureRecord,
                      class_names: list[str] | None = None) -> Tensor:
        return nc.softmax(self.logits(record, class_names), axis=-1)

    def predict(self, record: FeatureRecord,
                class_names: list[str] | None = None) -> int:
        return int(np.argmax(self.probabilities(record, class_names).data))

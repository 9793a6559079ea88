"""Concept-guided prompt learning over frozen dual-encoder embeddings.

Pipeline: build a key-value cache matching text concepts to few-shot image
features, retrieve Top-K concept words per image to enrich class prompts,
refine class text features with a cross-attention projector over pooled
multi-level visual features plus a learnable per-class adapter, and classify
by temperature-scaled cosine similarity.
"""

from .concept_cache import (
    ConceptCache,
    ConceptHits,
    build_cache,
    query_topk,
    read_cache,
    synthesize_prompt,
    write_cache,
)
from .encoders import (
    RemoteEncoderClient,
    ToyImageEncoder,
    ToyImageSpec,
    ToySignalMix,
    ToyTextEncoder,
    multi_level_summary,
)
from .evaluator import (
    AblationGrid,
    EvalReport,
    evaluate_component_stack,
    harmonic_mean,
    predict,
    run_ablation,
    run_base_to_novel,
    run_transfer,
)
from .feature_store import (
    Bank,
    ConceptLexicon,
    DatasetManifest,
    EvalSplit,
    FeatureRecord,
    load_bank,
    load_dataset,
    make_base_novel_split,
    read_bank,
    read_lexicon,
    sample_few_shot,
    write_bank,
    write_lexicon,
)
from .model import (
    Checkpoint,
    ClassifierConfig,
    FusionState,
    ProjectorParams,
    classify,
    fuse,
    init_fusion,
    init_projector,
    load_checkpoint,
    project,
    save_checkpoint,
)
from .numcore import Tensor, grad_check
from .pipeline import Pipeline, zero_shot_probabilities
from .toyworld import ToyWorldConfig, build_toy_dataset, export_toy_dataset
from .trainer import AdamW, TrainConfig, cosine_lr, fit, train_step

__version__ = "0.1.0"

"""Inference, metrics, and the evaluation harnesses.

Three harnesses: base-to-novel generalization (train on half the classes,
test on both halves), cross-dataset / domain transfer (reuse a trained
checkpoint on other banks with no training), and ablation sweeps over
concept count, lexicon size, component stack, and shot count.

Unseen classes have no trained adapter row, so their adapter term is zero
while the projected visual context still applies; the projector and the
concept cache are class-agnostic and are exactly the parts expected to
transfer.
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .concept_cache import ConceptCache
from .encoders import TextEncoder, encoder_from_notes
from .errors import ContractError, MetricError
from .feature_store import Bank, ConceptLexicon, EvalSplit, make_base_novel_split
from .model import Checkpoint
from .pipeline import Pipeline, zero_shot_probabilities
from .trainer import TrainConfig, fit

CSV_HEADER = ("dataset", "split", "metric", "value", "seed")

COMPONENT_STACKS = ("baseline", "+CGP", "+CGP+P", "+CGP+P+TA")


def harmonic_mean(base_acc: float, novel_acc: float) -> float:
    """2ab/(a+b); defined only for strictly positive accuracies."""
    if base_acc <= 0 or novel_acc <= 0:
        raise MetricError(f"harmonic mean undefined for ({base_acc}, {novel_acc})")
    return 2.0 * base_acc * novel_acc / (base_acc + novel_acc)


def predict(record, checkpoint: Checkpoint, cache: ConceptCache | None,
            class_names: list[str], encoder: TextEncoder) -> int:
    """Argmax class for one record; ties resolve to the lower index."""
    if not class_names:
        raise ContractError("class_names must be non-empty")
    pipe = Pipeline(encoder, cache, checkpoint.params, checkpoint.fusion,
                    checkpoint.config, checkpoint.class_names,
                    template=checkpoint.template, k_concepts=checkpoint.k_concepts)
    return pipe.predict(record, class_names)


@dataclass
class EvalReport:
    dataset: str
    seed: int
    config_snapshot: dict = field(default_factory=dict)
    overall_accuracy: float | None = None
    base_accuracy: float | None = None
    novel_accuracy: float | None = None
    hm: float | None = None
    per_class: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0
    warnings: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple]:
        out = []
        if self.overall_accuracy is not None:
            out.append((self.dataset, "all", "accuracy", self.overall_accuracy, self.seed))
        if self.base_accuracy is not None:
            out.append((self.dataset, "base", "accuracy", self.base_accuracy, self.seed))
        if self.novel_accuracy is not None:
            out.append((self.dataset, "novel", "accuracy", self.novel_accuracy, self.seed))
        if self.hm is not None:
            out.append((self.dataset, "base-novel", "harmonic_mean", self.hm, self.seed))
        for name, acc in self.per_class.items():
            out.append((self.dataset, "per-class", f"accuracy[{name}]", acc, self.seed))
        out.append((self.dataset, "meta", "wall_seconds", self.wall_seconds, self.seed))
        out.append((self.dataset, "meta", "config", json.dumps(self.config_snapshot,
                                                               sort_keys=True), self.seed))
        for i, warning in enumerate(self.warnings):
            out.append((self.dataset, "meta", f"warning[{i}]", warning, self.seed))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(CSV_HEADER)
        for dataset, split, metric, value, seed in self.rows():
            writer.writerow([dataset, split, metric,
                             repr(value) if isinstance(value, float) else value, seed])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ContractError(f"unexpected CSV header {header}")
        report = cls(dataset="", seed=0)
        for dataset, split, metric, value, seed in reader:
            report.dataset = dataset
            report.seed = int(seed)
            if metric == "accuracy" and split == "all":
                report.overall_accuracy = float(value)
            elif metric == "accuracy" and split == "base":
                report.base_accuracy = float(value)
            elif metric == "accuracy" and split == "novel":
                report.novel_accuracy = float(value)
            elif metric == "harmonic_mean":
                report.hm = float(value)
            elif metric.startswith("accuracy[") and split == "per-class":
                report.per_class[metric[len("accuracy["):-1]] = float(value)
            elif metric == "wall_seconds":
                report.wall_seconds = float(value)
            elif metric == "config":
                report.config_snapshot = json.loads(value)
            elif metric.startswith("warning["):
                report.warnings.append(value)
        return report

    def to_text(self) -> str:
        lines = [f"dataset: {self.dataset} (seed {self.seed})"]
        for label, value in (("overall", self.overall_accuracy),
                             ("base", self.base_accuracy),
                             ("novel", self.novel_accuracy),
                             ("harmonic mean", self.hm)):
            if value is not None:
                lines.append(f"  {label:>14}: {value:6.2f}")
        for warning in self.warnings:
            lines.append(f"  warning: {warning}")
        return "\n".join(lines)


def evaluate_records(pipe: Pipeline, records, class_names: list[str],
                     label_of: dict[int, int], workers: int = 1
                     ) -> tuple[float, dict[str, float]]:
    """Accuracy (percent) over records plus per-class accuracies."""
    if not records:
        raise ContractError("no records to evaluate")

    def one(rec):
        return pipe.predict(rec, class_names)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(one, records))
    else:
        preds = [one(rec) for rec in records]
    correct_total = 0
    per_class_hit: dict[str, list[int]] = {name: [0, 0] for name in class_names}
    for rec, pred in zip(records, preds):
        label = label_of[rec.class_id]
        stats = per_class_hit[class_names[label]]
        stats[1] += 1
        if pred == label:
            stats[0] += 1
            correct_total += 1
    per_class = {name: 100.0 * hit / max(1, count)
                 for name, (hit, count) in per_class_hit.items() if count > 0}
    return 100.0 * correct_total / len(records), per_class


def run_base_to_novel(bank: Bank, lexicon: ConceptLexicon, config: TrainConfig,
                      encoder: TextEncoder, split_rule: str = "half",
                      split: EvalSplit | None = None, workers: int = 1) -> EvalReport:
    """Train on base classes only, evaluate on base and novel test splits."""
    started = time.perf_counter()
    manifest = bank.manifest
    if split is None:
        split = make_base_novel_split(manifest.class_names, rule=split_rule)
    report = EvalReport(dataset=manifest.dataset_name, seed=config.seed,
                        config_snapshot=_config_snapshot(config, split))

    result = fit(bank, lexicon, config, encoder, class_ids=split.base_classes)
    pipe = result.pipeline

    base_ids = sorted(split.base_classes)
    base_names = [manifest.class_names[i] for i in base_ids]
    base_records = bank.select("test", base_ids)
    base_acc, base_per_class = evaluate_records(
        pipe, base_records, base_names, {c: i for i, c in enumerate(base_ids)},
        workers=workers)
    report.base_accuracy = base_acc
    report.per_class.update(base_per_class)

    novel_ids = sorted(split.novel_classes)
    if novel_ids:
        novel_names = [manifest.class_names[i] for i in novel_ids]
        novel_records = bank.select("test", novel_ids)
        novel_acc, novel_per_class = evaluate_records(
            pipe, novel_records, novel_names, {c: i for i, c in enumerate(novel_ids)},
            workers=workers)
        report.novel_accuracy = novel_acc
        report.per_class.update(novel_per_class)
        report.hm = harmonic_mean(base_acc, novel_acc)
    else:
        report.warnings.append("novel split empty: reporting base accuracy only")
    report.wall_seconds = time.perf_counter() - started
    return report


def run_transfer(checkpoint: Checkpoint, cache: ConceptCache | None,
                 targets: list[Bank], encoder: TextEncoder | None = None,
                 workers: int = 1, seed: int = 0) -> list[EvalReport]:
    """Direct evaluation of a trained checkpoint on target banks (no training).

    Returns one report per target plus a trailing macro-average report.
    Adapter rows follow class names; names unseen at training time get zero
    rows while the projected visual context still applies.
    """
    if not targets:
        raise ContractError("no transfer targets")
    reports = []
    for bank in targets:
        started = time.perf_counter()
        manifest = bank.manifest
        target_encoder = encoder or encoder_from_notes(manifest.notes)
        pipe = Pipeline(target_encoder, cache, checkpoint.params, checkpoint.fusion,
                        checkpoint.config, checkpoint.class_names,
                        template=checkpoint.template,
                        k_concepts=checkpoint.k_concepts)
        ids = list(range(len(manifest.class_names)))
        records = bank.select("test", ids)
        acc, per_class = evaluate_records(pipe, records, manifest.class_names,
                                          {c: c for c in ids}, workers=workers)
        reports.append(EvalReport(
            dataset=manifest.dataset_name, seed=seed,
            overall_accuracy=acc, per_class=per_class,
            wall_seconds=time.perf_counter() - started,
            config_snapshot={"checkpoint_classes": len(checkpoint.class_names),
                             "k_concepts": checkpoint.k_concepts}))
    average = float(np.mean([r.overall_accuracy for r in reports]))
    reports.append(EvalReport(dataset="average", seed=seed, overall_accuracy=average,
                              config_snapshot={"targets": [r.dataset for r in reports]}))
    return reports


# -- component stacks and ablation grids ---------------------------------------


def evaluate_component_stack(bank: Bank, lexicon: ConceptLexicon,
                             config: TrainConfig, encoder: TextEncoder, stack: str,
                             train_ids: list[int] | None = None,
                             eval_ids: list[int] | None = None) -> float:
    """Accuracy (percent) of one component stack.

    baseline    hand-crafted prompts, no cache, no training
    +CGP        concept-guided prompts, no training
    +CGP+P      prompts + trained projector (adapter frozen at zero)
    +CGP+P+TA   the full head
    Training (when any) happens on ``train_ids``; accuracy is measured on the
    ``eval_ids`` test records within the eval label space.
    """
    manifest = bank.manifest
    all_ids = list(range(len(manifest.class_names)))
    train_ids = sorted(train_ids if train_ids is not None else all_ids)
    eval_ids = sorted(eval_ids if eval_ids is not None else all_ids)
    eval_names = [manifest.class_names[i] for i in eval_ids]
    label_of = {c: i for i, c in enumerate(eval_ids)}
    records = bank.select("test", eval_ids)
    if stack not in COMPONENT_STACKS:
        raise ContractError(f"unknown component stack {stack!r}")

    if stack in ("baseline", "+CGP"):
        if stack == "baseline":
            prompts_for = lambda rec: None  # noqa: E731 - default prompts
            hits_pipe = None
        else:
            from .concept_cache import build_cache, synthesize_prompt, query_topk
            from .feature_store import sample_few_shot
            shots = config.shots if config.shots is not None else manifest.shots_per_class
            train_records = sample_few_shot(bank.select("train", train_ids), shots,
                                            len(train_ids), config.seed)
            cache = build_cache(lexicon, train_records)

            def prompts_for(rec):
                hits = query_topk(cache, rec.final_feature, config.k_concepts)
                return [synthesize_prompt(name, hits, config.template)
                        for name in eval_names]
        correct = 0
        from .model import ClassifierConfig
        cfg = ClassifierConfig(temperature=config.temperature)
        for rec in records:
            probs = zero_shot_probabilities(encoder, eval_names, rec, cfg,
                                            prompts=prompts_for(rec))
            if int(np.argmax(probs)) == label_of[rec.class_id]:
                correct += 1
        return 100.0 * correct / len(records)

    stack_config = replace(config,
                           train_adapter=(stack == "+CGP+P+TA"),
                           train_projector=True)
    result = fit(bank, lexicon, stack_config, encoder, class_ids=train_ids)
    acc, _ = evaluate_records(result.pipeline, records, eval_names, label_of)
    return acc


@dataclass
class AblationGrid:
    axis: str
    values: list
    accuracies: list[float]
    seed: int
    dataset: str = ""

    def __post_init__(self):
        if len(self.values) != len(self.accuracies):
            raise ContractError("one accuracy per grid cell is required")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(("dataset", "axis", "value", "accuracy", "seed"))
        for value, acc in zip(self.values, self.accuracies):
            writer.writerow([self.dataset, self.axis, value, repr(acc), self.seed])
        return buf.getvalue()


def run_ablation(axis: str, values: list, bank: Bank, lexicon: ConceptLexicon,
                 base_config: TrainConfig, encoder: TextEncoder) -> AblationGrid:
    """One full train+eval per cell with the seed held fixed across cells."""
    if not values:
        raise ContractError("ablation needs at least one cell")
    manifest = bank.manifest
    all_ids = list(range(len(manifest.class_names)))
    eval_names = manifest.class_names
    label_of = {c: i for i, c in enumerate(all_ids)}
    records = bank.select("test", all_ids)
    accuracies: list[float] = []

    for value in values:
        if axis == "K":
            config = replace(base_config, k_concepts=int(value))
            lex = lexicon
        elif axis == "I":
            config = base_config
            lex = lexicon.truncated(int(value))
        elif axis == "shots":
            config = replace(base_config, shots=int(value))
            lex = lexicon
        elif axis == "components":
            accuracies.append(evaluate_component_stack(
                bank, lexicon, base_config, encoder, str(value)))
            continue
        else:
            raise ContractError(f"unknown ablation axis {axis!r}")
        result = fit(bank, lex, config, encoder)
        acc, _ = evaluate_records(result.pipeline, records, eval_names, label_of)
        accuracies.append(acc)
    return AblationGrid(axis=axis, values=list(values), accuracies=accuracies,
                        seed=base_config.seed, dataset=manifest.dataset_name)


def _config_snapshot(config: TrainConfig, split: EvalSplit | None = None) -> dict:
    snapshot = {
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "weight_decay": config.weight_decay,
        "seed": config.seed,
        "k_concepts": config.k_concepts,
        "temperature": config.temperature,
        "template": config.template,
        "shots": config.shots,
    }
    if split is not None:
        snapshot["base_classes"] = list(split.base_classes)
        snapshot["novel_classes"] = list(split.novel_classes)
    return snapshot

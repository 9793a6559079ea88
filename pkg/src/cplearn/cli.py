"""Operator entry point.

Every command is a pure function of its inputs and the seed: rerunning with
the same arguments produces byte-identical artifacts.  Exit codes: 0 on
success, 1 on runtime failure, 2 on usage or validation problems.  Config
precedence is flags > config file > defaults, and the effective settings are
echoed into every report.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluator as ev
from .concept_cache import DEFAULT_TEMPLATE, build_cache, read_cache, write_cache
from .encoders import RemoteEncoderClient, ToyTextEncoder, encoder_from_notes
from .errors import CplearnError
from .feature_store import (
    load_bank,
    load_dataset,
    read_bank,
    sample_few_shot,
    read_lexicon,
)
from .model import load_checkpoint, save_checkpoint
from .toyworld import ToyWorldConfig, export_toy_dataset
from .trainer import TrainConfig, fit

ENDPOINT_ENV = "CPLEARN_ENCODER_ENDPOINT"

DEFAULTS = {
    "epochs": 50,
    "batch_size": 256,
    "learning_rate": 1e-3,
    "weight_decay": 0.01,
    "k": 10,
    "concepts": 2000,
    "seed": 0,
    "heads": 4,
    "template": DEFAULT_TEMPLATE,
    "temperature": 0.01,
}


class UsageError(Exception):
    pass


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _effective(args, config_keys: list[str]) -> dict:
    """flags > config file > defaults."""
    from_file = {}
    if getattr(args, "config", None):
        from_file = json.loads(_existing(args.config, "config file").read_text())
    effective = {}
    for key in config_keys:
        flag = getattr(args, key, None)
        if flag is not None:
            effective[key] = flag
        elif key in from_file:
            effective[key] = from_file[key]
        else:
            effective[key] = DEFAULTS[key]
    return effective


def _encoder_for(args, manifest_notes: dict):
    mode = getattr(args, "encoder", None) or "toy"
    endpoint = getattr(args, "endpoint", None) or os.environ.get(ENDPOINT_ENV)
    if mode == "remote":
        if not endpoint:
            raise UsageError(f"remote encoder requires --endpoint or ${ENDPOINT_ENV}")
        return RemoteEncoderClient(endpoint)
    return encoder_from_notes(manifest_notes)


def _train_config(eff: dict, args) -> TrainConfig:
    return TrainConfig(
        epochs=int(eff["epochs"]),
        batch_size=int(eff["batch_size"]),
        learning_rate=float(eff["learning_rate"]),
        weight_decay=float(eff["weight_decay"]),
        seed=int(eff["seed"]),
        k_concepts=int(eff["k"]),
        template=str(eff["template"]),
        temperature=float(eff["temperature"]),
        heads=int(eff["heads"]),
        shots=getattr(args, "shots", None),
        train_scales=not getattr(args, "freeze_alpha_beta", False),
    )


# -- commands -------------------------------------------------------------


def cmd_make_toy(args) -> int:
    cfg = ToyWorldConfig(
        classes=args.classes, shots=args.shots_per_class, dim=args.dim,
        test_per_class=args.test_per_class,
        channel_dims=tuple([args.dim] * args.levels),
        lexicon_size=args.lexicon_size, seed=args.seed,
        dataset_name=args.name, variant=args.variant,
        noise_scale=args.noise if args.noise is not None else 0.55,
    )
    manifest_path = export_toy_dataset(cfg, args.out)
    print(f"wrote {manifest_path}")
    return 0


def cmd_build_cache(args) -> int:
    manifest_path = _existing(args.manifest, "manifest")
    bank, lexicon = load_dataset(manifest_path)
    if args.lexicon:
        lexicon = read_lexicon(_existing(args.lexicon, "lexicon"))
    eff = _effective(args, ["concepts", "seed"])
    concepts = min(int(eff["concepts"]), len(lexicon))
    lexicon = lexicon.truncated(concepts)
    shots = args.shots or bank.manifest.shots_per_class
    classes = len(bank.manifest.class_names)
    train = sample_few_shot(bank.select("train"), shots, classes, int(eff["seed"]))
    cache = build_cache(lexicon, train)
    write_cache(cache, args.out)
    matched = len({record_id for _, record_id, _ in cache.provenance})
    sims = [s for _, _, s in cache.provenance]
    print(f"cache: {len(cache.values)} concepts -> {matched} distinct images; "
          f"similarity range [{min(sims):.4f}, {max(sims):.4f}]")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    manifest_path = _existing(args.manifest, "manifest")
    bank, lexicon = load_dataset(manifest_path)
    eff = _effective(args, ["epochs", "batch_size", "learning_rate", "weight_decay",
                            "k", "seed", "heads", "template", "temperature"])
    config = _train_config(eff, args)
    encoder = _encoder_for(args, bank.manifest.notes)
    result = fit(bank, lexicon, config, encoder)
    save_checkpoint(result.checkpoint, args.out)
    log_path = Path(str(args.out) + ".log")
    log_path.write_text("\n".join(result.log_lines) + "\n", encoding="utf-8")
    if result.pipeline.cache is not None and args.cache_out:
        write_cache(result.pipeline.cache, args.cache_out)
    print("\n".join(result.log_lines[-3:]))
    print(f"effective config: {json.dumps(eff, sort_keys=True)}")
    print(f"wrote {args.out} (+{log_path.name})")
    return 0


def cmd_eval(args) -> int:
    manifest_path = _existing(args.manifest, "manifest")
    bank, lexicon = load_dataset(manifest_path)
    eff = _effective(args, ["epochs", "batch_size", "learning_rate", "weight_decay",
                            "k", "seed", "heads", "template", "temperature"])
    config = _train_config(eff, args)
    encoder = _encoder_for(args, bank.manifest.notes)
    if args.split != "base-novel":
        raise UsageError(f"unknown --split {args.split!r} (expected base-novel)")
    report = ev.run_base_to_novel(bank, lexicon, config, encoder,
                                  split_rule=args.split_rule)
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def cmd_transfer(args) -> int:
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    cache = read_cache(_existing(args.cache, "cache")) if args.cache else None
    targets = []
    for target in args.targets.split(","):
        path = _existing(target.strip(), "target")
        if path.suffix == ".cplf":  # bare bank: manifest comes from the sidecar
            targets.append(load_bank(path))
        else:
            bank, _ = load_dataset(path)
            targets.append(bank)
    encoder = None
    if getattr(args, "encoder", None) == "remote" or args.endpoint:
        encoder = _encoder_for(args, {})
    reports = ev.run_transfer(ckpt, cache, targets, encoder=encoder,
                              seed=args.seed or 0)
    for report in reports:
        print(report.to_text())
    if args.out:
        rows = ["dataset,split,metric,value,seed"]
        for report in reports:
            rows.extend(report.to_csv().splitlines()[1:])
        Path(args.out).write_text("\n".join(rows) + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    manifest_path = _existing(args.manifest, "manifest")
    bank, lexicon = load_dataset(manifest_path)
    eff = _effective(args, ["epochs", "batch_size", "learning_rate", "weight_decay",
                            "k", "seed", "heads", "template", "temperature"])
    config = _train_config(eff, args)
    encoder = _encoder_for(args, bank.manifest.notes)
    if args.axis == "components":
        values = list(ev.COMPONENT_STACKS)
    else:
        values = [int(v) for v in args.values.split(",")]
    grid = ev.run_ablation(args.axis, values, bank, lexicon, config, encoder)
    for value, acc in zip(grid.values, grid.accuracies):
        print(f"{grid.axis}={value}: {acc:.2f}")
    if args.out:
        Path(args.out).write_text(grid.to_csv(), encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def cmd_inspect_bank(args) -> int:
    records, manifest = read_bank(_existing(args.path, "bank"))
    payload = {
        "manifest": manifest.__dict__,
        "records": [
            {
                "record_id": r.record_id,
                "class_id": r.class_id,
                "split_tag": r.split_tag,
                "final_feature_f32_hex": [
                    np.float32(v).tobytes().hex() for v in r.final_feature],
                "level_summaries_f32_hex": [
                    [np.float32(v).tobytes().hex() for v in row]
                    for row in r.level_summaries],
            }
            for r in records
        ],
    }
    text = json.dumps(payload, indent=None if args.compact else 2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cplearn",
        description="Concept-guided prompt learning: cache building, training, "
                    "and evaluation harnesses over feature banks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_train=False):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--encoder", choices=["toy", "remote"], default=None,
                       help="text encoder backend (default: manifest's)")
        p.add_argument("--endpoint", default=None,
                       help=f"remote encoder host:port (or ${ENDPOINT_ENV})")
        if with_train:
            p.add_argument("--epochs", type=int, default=None)
            p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
            p.add_argument("--lr", dest="learning_rate", type=float, default=None)
            p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
            p.add_argument("--k", type=int, default=None, help="concepts per prompt")
            p.add_argument("--heads", type=int, default=None)
            p.add_argument("--template", default=None)
            p.add_argument("--temperature", type=float, default=None)
            p.add_argument("--shots", type=int, default=None)
            p.add_argument("--freeze-alpha-beta", action="store_true",
                           help="train only the projector weights and adapter")

    p = sub.add_parser("make-toy", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--shots-per-class", type=int, default=16)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--lexicon-size", type=int, default=64)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", type=int, default=0)
    p.add_argument("--name", default="toyworld")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("build-cache", help="build the visual concept cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lexicon", default=None,
                   help="override the manifest's lexicon file")
    p.add_argument("--concepts", type=int, default=None,
                   help="lexicon size to use (default 2000, capped at available)")
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("train", help="fit projector/adapter on few-shot data")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache-out", dest="cache_out", default=None)
    common(p, with_train=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="base-to-novel generalization harness")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="base-novel")
    p.add_argument("--split-rule", dest="split_rule", default="half",
                   choices=["half", "alternate"])
    p.add_argument("--out", default=None, help="CSV report path")
    common(p, with_train=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="evaluate a checkpoint on other banks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", default=None)
    p.add_argument("--targets", required=True, help="comma-separated manifests")
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ablate", help="sweep K, I, shots, or component stacks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--axis", required=True, choices=["K", "I", "shots", "components"])
    p.add_argument("--values", default="", help="comma-separated cell values")
    p.add_argument("--out", default=None)
    common(p, with_train=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-bank", help="dump a bank as JSON (f32 bit patterns)")
    p.add_argument("--path", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--compact", action="store_true")
    p.set_defaults(func=cmd_inspect_bank)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CplearnError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

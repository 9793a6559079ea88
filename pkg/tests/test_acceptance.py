"""Acceptance gate: one test per criterion, one printed PASS/FAIL line each.

Paper-scale table numbers are out of reach at desk scale; these are the
property-based and arithmetic checks that stand in for them.  Tolerances are
pinned here and nowhere else.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from cplearn import evaluator as ev
from cplearn import model as mdl
from cplearn import numcore as nc
from cplearn import toyworld as tw
from cplearn import trainer as tr
from cplearn.cli import main as cli_main
from cplearn.concept_cache import ConceptCache, query_topk
from cplearn.encoders import ToyTextEncoder
from cplearn.feature_store import Bank, FeatureRecord, make_base_novel_split
from cplearn.numcore import Tensor
from cplearn.pipeline import Pipeline, zero_shot_probabilities


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{name}: {detail}"


class TestGradientFidelity:
    def test_end_to_end_gradients(self):
        # config pinned by the criterion: D=3, Q=4, d_t=8, h=2
        started = time.perf_counter()
        rng = np.random.default_rng(11)
        params = mdl.init_projector((3, 4, 5, 6), d_t=8, heads=2, seed=11)
        f_t = Tensor(rng.normal(size=(3, 8)))
        levels = [rng.normal(size=c) for c in (3, 4, 5, 6)]
        f_v = rng.normal(size=8)
        f_v /= np.linalg.norm(f_v)
        cfg = mdl.ClassifierConfig(temperature=0.01)
        onehot = np.zeros(3)
        onehot[2] = 1.0

        def forward(adapter, alpha, beta, *blocks):
            p = params.replace_blocks(blocks)
            fusion = mdl.FusionState(adapter=adapter, alpha=alpha, beta=beta)
            refined = mdl.fuse(f_t, mdl.project(f_t, levels, p), fusion)
            logits = mdl.class_logits(refined, f_v, cfg)
            return nc.sub(nc.logsumexp(logits), nc.tsum(nc.mul(logits, Tensor(onehot))))

        blocks = {"fusion.adapter": Tensor(0.05 * rng.normal(size=(3, 8)), requires_grad=True),
                  "fusion.alpha": Tensor(0.25, requires_grad=True),
                  "fusion.beta": Tensor(0.15, requires_grad=True)}
        blocks.update(params.named_blocks())
        result = nc.grad_check(forward, blocks, step=1e-6)
        elapsed = time.perf_counter() - started
        report("gradient-fidelity",
               result.max_rel_err <= 1e-4 and elapsed < 10.0,
               f"max rel err {result.max_rel_err:.2e}, {elapsed:.1f}s")


class TestRetrievalOracle:
    def test_topk_matches_full_sort(self):
        started = time.perf_counter()
        rng = np.random.default_rng(21)
        mismatches = 0
        for _ in range(100):
            keys = rng.normal(size=(2000, 32))
            keys /= np.linalg.norm(keys, axis=1, keepdims=True)
            words = [f"w{i:04d}" for i in range(2000)]
            cache = ConceptCache(keys=keys, values=words,
                                 provenance=[(i, f"r{i}", 0.0) for i in range(2000)])
            queries = rng.normal(size=(100, 32))
            for q in queries:
                hits = query_topk(cache, q, 10)
                sims = keys @ (q / np.linalg.norm(q))
                ranked = sorted(range(2000), key=lambda i: (-sims[i], i))[:10]
                expect_words = [words[i] for i in ranked]
                expect_sims = [float(sims[i]) for i in ranked]
                if hits.words != expect_words or hits.similarities != expect_sims:
                    mismatches += 1
        elapsed = time.perf_counter() - started
        report("retrieval-oracle", mismatches == 0 and elapsed < 30.0,
               f"{mismatches} mismatches over 10000 queries, {elapsed:.1f}s")


class TestCacheBuildOracle:
    def test_argmax_matches_brute_force(self):
        from cplearn.concept_cache import build_cache
        from cplearn.feature_store import ConceptLexicon, SPLIT_TRAIN
        rng = np.random.default_rng(31)
        failures = 0
        for trial in range(20):
            n_concepts = int(rng.integers(3, 40))
            n_images = int(rng.integers(2, 60))
            d = int(rng.integers(4, 24))
            emb = rng.normal(size=(n_concepts, d))
            emb /= np.linalg.norm(emb, axis=1, keepdims=True)
            lexicon = ConceptLexicon(words=[f"w{i}" for i in range(n_concepts)],
                                     categories=["other"] * n_concepts,
                                     embeddings=emb)
            feats = rng.normal(size=(n_images, d))
            feats /= np.linalg.norm(feats, axis=1, keepdims=True)
            records = [FeatureRecord(record_id=f"img{j:03d}", class_id=0,
                                     final_feature=feats[j], level_summaries=[],
                                     split_tag=SPLIT_TRAIN)
                       for j in range(n_images)]
            cache = build_cache(lexicon, records)
            for i in range(n_concepts):
                best_j, best_s = 0, -np.inf
                for j in range(n_images):
                    s = float(np.dot(emb[i], feats[j]))
                    if s > best_s:
                        best_j, best_s = j, s
                if not np.array_equal(cache.keys[i], feats[best_j]) \
                        or cache.provenance[i][1] != f"img{best_j:03d}":
                    failures += 1
        report("cache-build-oracle", failures == 0,
               f"{failures} argmax mismatches over 20 instances")


class TestBaselineEquivalence:
    def test_zero_scales_match_zero_shot(self):
        rng = np.random.default_rng(41)
        d = 16
        class_names = [f"class{i:02d}" for i in range(7)]
        encoder = ToyTextEncoder(d, seed=41)
        params = mdl.init_projector((5, 6), d_t=d, heads=2, seed=41)
        fusion = mdl.FusionState(adapter=Tensor(np.zeros((7, d))),
                                 alpha=Tensor(0.0), beta=Tensor(0.0))
        cfg = mdl.ClassifierConfig()
        pipe = Pipeline(encoder, None, params, fusion, cfg, class_names, k_concepts=0)
        worst = 0.0
        for i in range(1000):
            vec = rng.normal(size=d)
            vec /= np.linalg.norm(vec)
            rec = FeatureRecord(record_id=f"r{i}", class_id=0, final_feature=vec,
                                level_summaries=[rng.normal(size=5), rng.normal(size=6)],
                                split_tag="test")
            ours = pipe.probabilities(rec).data
            reference = zero_shot_probabilities(encoder, class_names, rec, cfg)
            worst = max(worst, float(np.max(np.abs(ours - reference))))
        report("baseline-equivalence", worst <= 1e-9,
               f"max |diff| {worst:.2e} over 1000 records")


class TestMetricArithmetic:
    def test_table_rows(self):
        coop = ev.harmonic_mean(82.69, 63.22)
        clip = ev.harmonic_mean(69.34, 74.22)
        ok = abs(coop - 71.66) <= 0.01 and abs(clip - 71.70) <= 0.01
        report("metric-arithmetic", ok,
               f"HM(82.69,63.22)={coop:.4f}, HM(69.34,74.22)={clip:.4f}")


class TestSyntheticEfficacy:
    def test_component_ordering_and_concept_gap(self):
        # D=10 classes, N=16 shots, d=32, seeds 0-4.  Two clauses:
        # (a) component stacks show a strictly monotone mean accuracy trend in
        #     the paper-table setting (train on all classes few-shot);
        # (b) in base-to-novel mode, the full stack beats the same head trained
        #     with concept-free prompts by >= 5 points of novel accuracy.
        started = time.perf_counter()
        chain = {stack: [] for stack in ev.COMPONENT_STACKS}
        novel_full, novel_k0 = [], []
        for seed in range(5):
            cfg = tw.ToyWorldConfig(seed=seed)  # D=10, N=16, d=32 defaults
            data = tw.build_toy_dataset(cfg)
            bank = Bank(data.records, data.manifest)
            encoder = ToyTextEncoder(cfg.dim, seed=seed, pair_weight=cfg.pair_weight)
            config = tr.TrainConfig(epochs=25, batch_size=256, learning_rate=3e-3,
                                    heads=2, k_concepts=10, seed=seed)
            for stack in ev.COMPONENT_STACKS:
                chain[stack].append(ev.evaluate_component_stack(
                    bank, data.lexicon, config, encoder, stack))
            split = make_base_novel_split(bank.manifest.class_names)
            base, novel = sorted(split.base_classes), sorted(split.novel_classes)
            novel_full.append(ev.evaluate_component_stack(
                bank, data.lexicon, config, encoder, "+CGP+P+TA", base, novel))
            novel_k0.append(ev.evaluate_component_stack(
                bank, data.lexicon, replace(config, k_concepts=0), encoder,
                "+CGP+P+TA", base, novel))
        means = [float(np.mean(chain[stack])) for stack in ev.COMPONENT_STACKS]
        monotone = all(a < b for a, b in zip(means, means[1:]))
        gap = float(np.mean(novel_full)) - float(np.mean(novel_k0))
        elapsed = time.perf_counter() - started
        detail = (f"means {['%.1f' % m for m in means]}, novel gap {gap:.2f}, "
                  f"{elapsed:.0f}s")
        report("synthetic-efficacy", monotone and gap >= 5.0 and elapsed < 120.0,
               detail)


@pytest.fixture(scope="module")
def grid_world():
    cfg = tw.ToyWorldConfig(classes=10, shots=16, test_per_class=10,
                            lexicon_size=3000, seed=0)
    data = tw.build_toy_dataset(cfg)
    return Bank(data.records, data.manifest), data.lexicon, cfg


class TestAblationHarnessShape:
    def test_k_and_lexicon_grids(self, grid_world):
        bank, lexicon, cfg = grid_world
        encoder = ToyTextEncoder(cfg.dim, seed=cfg.seed, pair_weight=cfg.pair_weight)
        config = tr.TrainConfig(epochs=4, batch_size=256, learning_rate=3e-3,
                                heads=2, k_concepts=10, seed=0)
        k_grid = ev.run_ablation("K", [6, 8, 10, 12, 14], bank, lexicon,
                                 config, encoder)
        i_grid = ev.run_ablation("I", [1000, 1500, 2000, 2500, 3000], bank, lexicon,
                                 config, encoder)
        ok = (k_grid.values == [6, 8, 10, 12, 14]
              and len(k_grid.accuracies) == 5
              and all(0.0 <= a <= 100.0 for a in k_grid.accuracies)
              and i_grid.values == [1000, 1500, 2000, 2500, 3000]
              and len(i_grid.accuracies) == 5
              and all(0.0 <= a <= 100.0 for a in i_grid.accuracies)
              and k_grid.seed == i_grid.seed == 0)
        report("ablation-harness-shape", ok,
               f"K cells {['%.1f' % a for a in k_grid.accuracies]}, "
               f"I cells {['%.1f' % a for a in i_grid.accuracies]}")


class TestDeterminism:
    def test_byte_identical_checkpoints(self, tmp_path):
        toy = tmp_path / "toy"
        assert cli_main(["make-toy", "--out", str(toy), "--classes", "6",
                         "--shots-per-class", "8", "--test-per-class", "4",
                         "--dim", "16", "--levels", "2", "--lexicon-size", "24",
                         "--seed", "1"]) == 0
        blobs = []
        for name in ("first.cplm", "second.cplm"):
            out = tmp_path / name
            code = cli_main(["train", "--manifest", str(toy / "manifest.json"),
                             "--out", str(out), "--epochs", "3",
                             "--batch-size", "24", "--k", "5", "--heads", "2",
                             "--seed", "7"])
            assert code == 0
            blobs.append(out.read_bytes())
        report("determinism", blobs[0] == blobs[1],
               f"checkpoints {len(blobs[0])} bytes each")

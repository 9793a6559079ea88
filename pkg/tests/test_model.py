"""Projector, fusion, classifier: semantics and gradient fidelity."""

import math

import numpy as np
import pytest

from cplearn import model as mdl
from cplearn import numcore as nc
from cplearn.errors import DegenerateInputError, DimensionError
from cplearn.numcore import Tensor


def small_setup(seed=0, d_t=8, heads=2, channel_dims=(3, 4, 5, 6), n_classes=3):
    rng = np.random.default_rng(seed)
    params = mdl.init_projector(channel_dims, d_t=d_t, heads=heads, seed=seed)
    f_t = rng.normal(size=(n_classes, d_t))
    levels = [rng.normal(size=c) for c in channel_dims]
    return params, f_t, levels, rng


class TestProject:
    def test_zero_output_projection(self):
        params, f_t, levels, _ = small_setup()
        params.out_proj = Tensor(np.zeros((params.d_m, params.d_t)), requires_grad=True)
        out = mdl.project(Tensor(f_t), levels, params)
        np.testing.assert_array_equal(out.data, np.zeros((3, 8)))

    def test_singleton_attention_is_one(self):
        rng = np.random.default_rng(1)
        params = mdl.init_projector([4], d_t=8, heads=2, seed=1)
        collect = {}
        mdl.project(Tensor(rng.normal(size=(3, 8))), [rng.normal(size=4)],
                    params, collect=collect)
        assert len(collect["attention"]) == 2
        for weights in collect["attention"]:
            np.testing.assert_array_equal(weights, np.ones((3, 1)))

    def test_dim_mismatch(self):
        params, f_t, levels, _ = small_setup()
        with pytest.raises(DimensionError):
            mdl.project(Tensor(f_t), levels[:2], params)
        with pytest.raises(DimensionError):
            mdl.project(Tensor(f_t[:, :4]), levels, params)

    def test_gradients_of_all_blocks(self):
        # sum of the projector output, all parameter blocks vs central differences
        params, f_t, levels, _ = small_setup(seed=2, d_t=8, heads=2)
        f_t_t = Tensor(f_t)

        def forward(*blocks):
            p = params.replace_blocks(blocks)
            return nc.tsum(mdl.project(f_t_t, levels, p))

        report = nc.grad_check(forward, params.named_blocks(), step=1e-5)
        assert report.ok(1e-4), repr(report)

    def test_gradient_flows_to_text_features(self):
        params, f_t, levels, _ = small_setup(seed=3)

        def forward(ft):
            return nc.tsum(mdl.project(ft, levels, params))

        report = nc.grad_check(forward, [Tensor(f_t, requires_grad=True)], step=1e-5)
        assert report.ok(1e-4), repr(report)

    def test_token_permutation_with_tied_level_embeddings(self):
        rng = np.random.default_rng(4)
        dims = (5, 5, 5, 5)
        params = mdl.init_projector(dims, d_t=8, heads=2, seed=4)
        f_t = rng.normal(size=(3, 8))
        levels = [rng.normal(size=5) for _ in dims]
        perm = [2, 0, 3, 1]

        def run(p):
            return mdl.project(Tensor(f_t), [levels[i] for i in perm_arg], p).data

        tied = params.replace_blocks(list(params.named_blocks().values()))
        tied.level_embed = Tensor(np.tile(params.level_embed.data[:1], (4, 1)),
                                  requires_grad=True)
        permuted = tied.replace_blocks(list(tied.named_blocks().values()))
        permuted.level_in = [tied.level_in[i] for i in perm]

        perm_arg = [0, 1, 2, 3]
        base = run(tied)
        perm_arg = perm
        shuffled = run(permuted)
        np.testing.assert_allclose(shuffled, base, atol=1e-12)

        # distinct embeddings break the symmetry
        perm_arg = [0, 1, 2, 3]
        base_distinct = run(params)
        distinct_perm = params.replace_blocks(list(params.named_blocks().values()))
        distinct_perm.level_in = [params.level_in[i] for i in perm]
        perm_arg = perm
        assert not np.allclose(run(distinct_perm), base_distinct, atol=1e-9)


class TestFuse:
    def test_zero_scales_pass_through(self):
        rng = np.random.default_rng(5)
        f_t = Tensor(rng.normal(size=(4, 6)))
        f_tv = Tensor(rng.normal(size=(4, 6)))
        fusion = mdl.FusionState(adapter=Tensor(rng.normal(size=(4, 6)), requires_grad=True),
                                 alpha=Tensor(0.0), beta=Tensor(0.0))
        out = mdl.fuse(f_t, f_tv, fusion)
        np.testing.assert_array_equal(out.data, f_t.data)

    def test_default_init_is_diminutive(self):
        fusion = mdl.init_fusion(3, 8)
        assert fusion.alpha.item() == pytest.approx(1e-4)
        assert fusion.beta.item() == pytest.approx(1e-4)
        np.testing.assert_array_equal(fusion.adapter.data, np.zeros((3, 8)))

    def test_linearity(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(2, 3))
        fusion = mdl.FusionState(adapter=Tensor(a), alpha=Tensor(1.0), beta=Tensor(1.0))
        out = mdl.fuse(Tensor(np.zeros((2, 3))), Tensor(a), fusion)
        np.testing.assert_allclose(out.data, 2.0 * a, atol=1e-15)

    def test_shape_mismatch(self):
        fusion = mdl.init_fusion(2, 3)
        with pytest.raises(DimensionError):
            mdl.fuse(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))), fusion)

    def test_scale_gradients_high_precision(self):
        rng = np.random.default_rng(7)
        f_t = Tensor(rng.normal(size=(3, 4)))
        f_tv = Tensor(rng.normal(size=(3, 4)))
        adapter = Tensor(rng.normal(size=(3, 4)))
        readout = Tensor(rng.normal(size=(3, 4)))

        def forward(alpha, beta):
            fusion = mdl.FusionState(adapter=adapter, alpha=alpha, beta=beta)
            return nc.tsum(nc.mul(mdl.fuse(f_t, f_tv, fusion), readout))

        report = nc.grad_check(forward,
                               {"alpha": Tensor(1e-4, requires_grad=True),
                                "beta": Tensor(1e-4, requires_grad=True)},
                               step=1e-5)
        assert report.ok(1e-6), repr(report)


class TestClassify:
    def test_two_equal_rows(self):
        rows = Tensor(np.tile(np.array([[0.3, 0.4, 0.5]]), (2, 1)))
        probs = mdl.classify(rows, np.array([1.0, 0.0, 0.0]), mdl.ClassifierConfig())
        np.testing.assert_allclose(probs.data, [0.5, 0.5], atol=1e-15)

    def test_known_similarities_at_paper_temperature(self):
        # rows built so cosines are exactly 0.2 and 0.1
        row0 = np.array([0.2, math.sqrt(1 - 0.04), 0.0, 0.0])
        row1 = np.array([0.1, 0.0, math.sqrt(1 - 0.01), 0.0])
        f_v = np.array([1.0, 0.0, 0.0, 0.0])
        probs = mdl.classify(Tensor(np.stack([row0, row1])), f_v,
                             mdl.ClassifierConfig(temperature=0.01)).data
        assert probs[0] == pytest.approx(0.9999546, abs=1e-7)
        assert probs[1] == pytest.approx(0.0000454, abs=1e-7)

    def test_uniform_over_identical_rows(self):
        for d in (2, 5, 9):
            rows = Tensor(np.tile(np.array([[1.0, 2.0, 3.0]]), (d, 1)))
            probs = mdl.classify(rows, np.array([0.5, 0.5, 0.5]),
                                 mdl.ClassifierConfig()).data
            np.testing.assert_allclose(probs, np.full(d, 1.0 / d), atol=1e-12)

    def test_sums_to_one_and_scale_invariant(self):
        rng = np.random.default_rng(8)
        rows = rng.normal(size=(5, 6))
        f_v = rng.normal(size=6)
        cfg = mdl.ClassifierConfig()
        base = mdl.classify(Tensor(rows), f_v, cfg).data
        assert abs(base.sum() - 1.0) <= 1e-10
        # power-of-two rescaling of the image feature is exactly invariant
        np.testing.assert_array_equal(mdl.classify(Tensor(rows), 4.0 * f_v, cfg).data, base)
        # rescaling one text row
        scaled = rows.copy()
        scaled[2] *= 2.0
        np.testing.assert_array_equal(mdl.classify(Tensor(scaled), f_v, cfg).data, base)
        odd = mdl.classify(Tensor(rows), 3.7 * f_v, cfg).data
        np.testing.assert_allclose(odd, base, atol=1e-12)
        assert int(np.argmax(odd)) == int(np.argmax(base))

    def test_zero_row_rejected(self):
        rows = np.ones((3, 4))
        rows[1] = 0.0
        with pytest.raises(DegenerateInputError):
            mdl.classify(Tensor(rows), np.ones(4), mdl.ClassifierConfig())
        with pytest.raises(DegenerateInputError):
            mdl.classify(Tensor(np.ones((2, 4))), np.zeros(4), mdl.ClassifierConfig())

    def test_temperature_must_be_positive(self):
        with pytest.raises(DegenerateInputError):
            mdl.ClassifierConfig(temperature=0.0)


class TestEndToEndGradients:
    def test_classify_fuse_project_all_trainables(self):
        # the full head at the paper temperature; step at the small end of the
        # allowed range because tau=0.01 makes the loss stiff
        params, f_t, levels, rng = small_setup(seed=9, d_t=8, heads=2)
        f_v = rng.normal(size=8)
        f_v /= np.linalg.norm(f_v)
        f_t_t = Tensor(f_t)
        cfg = mdl.ClassifierConfig(temperature=0.01)
        label = 1
        onehot = np.zeros(3)
        onehot[label] = 1.0
        names = params.block_names()

        def forward(adapter, alpha, beta, *blocks):
            p = params.replace_blocks(blocks)
            fusion = mdl.FusionState(adapter=adapter, alpha=alpha, beta=beta)
            refined = mdl.fuse(f_t_t, mdl.project(f_t_t, levels, p), fusion)
            logits = mdl.class_logits(refined, f_v, cfg)
            return nc.sub(nc.logsumexp(logits), nc.tsum(nc.mul(logits, Tensor(onehot))))

        blocks = {"fusion.adapter": Tensor(0.05 * rng.normal(size=(3, 8)), requires_grad=True),
                  "fusion.alpha": Tensor(0.3, requires_grad=True),
                  "fusion.beta": Tensor(0.2, requires_grad=True)}
        blocks.update(params.named_blocks())
        report = nc.grad_check(forward, blocks, step=1e-6)
        assert report.ok(1e-4), repr(report)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = mdl.init_projector((3, 4), d_t=6, heads=2, seed=10)
        fusion = mdl.init_fusion(4, 6)
        ckpt = mdl.Checkpoint(params=params, fusion=fusion,
                              config=mdl.ClassifierConfig(temperature=0.02),
                              template="a photo of a {class_name}, which is {concepts}.",
                              k_concepts=10,
                              class_names=["a", "b", "c", "d"])
        path = tmp_path / "model.cplm"
        mdl.save_checkpoint(ckpt, path)
        loaded = mdl.load_checkpoint(path)

        assert loaded.template == ckpt.template
        assert loaded.k_concepts == 10
        assert loaded.class_names == ["a", "b", "c", "d"]
        assert loaded.config.temperature == 0.02
        assert loaded.params.channel_dims == [3, 4]
        for name, tensor in params.named_blocks().items():
            np.testing.assert_array_equal(loaded.params.named_blocks()[name].data,
                                          tensor.data)
        np.testing.assert_array_equal(loaded.fusion.adapter.data, fusion.adapter.data)
        assert loaded.fusion.alpha.item() == fusion.alpha.item()

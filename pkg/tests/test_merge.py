import numpy as np
import pytest

from forge import merge, model
from forge import numerics as nm
from forge.errors import IncompatibleModulesError, InputError, ParameterError
from forge.merge import CoeffOptimConfig, ForgeItem, MergeCoefficients
from forge.model import AffineLayer, BaseEncoder, LoraAdapter, PluginModule
from forge.numerics import Tensor


def scalar_plugin(a: float, b: float, alpha: float = 1.0) -> PluginModule:
    ad = LoraAdapter(0, Tensor([[a]]), Tensor([[b]]), rank=1, alpha=alpha)
    return PluginModule({0: ad})


def scalar_base(w0: float = 1.0) -> BaseEncoder:
    layer = AffineLayer(Tensor(np.array([[w0]], dtype=np.float32)),
                        Tensor(np.zeros(1, dtype=np.float32)))
    return BaseEncoder([layer])


@pytest.fixture(scope="module")
def base():
    return BaseEncoder.from_seed(17)


def random_plugin(base, rng, rank=4, alpha=4.0):
    plugin = PluginModule.fresh(base, rank, alpha, rng)
    for ad in plugin.adapters.values():
        ad.a.data[:] = rng.normal(size=ad.a.shape).astype(np.float32) * 0.2
        ad.b.data[:] = rng.normal(size=ad.b.shape).astype(np.float32) * 0.2
    return plugin


class TestFuse:
    def test_identity_coefficients(self, base):
        rng = nm.make_rng(0)
        main = random_plugin(base, rng)
        branch = random_plugin(base, rng)
        keep_main = merge.fuse(main, branch, MergeCoefficients(1.0, 0.0))
        keep_branch = merge.fuse(main, branch, MergeCoefficients(0.0, 1.0))
        assert keep_main.to_bytes() == main.to_bytes()
        assert keep_branch.to_bytes() == branch.to_bytes()

    def test_one_by_one_hand_case(self):
        # main A=2,B=3 (delta 6); branch A=4,B=5 (delta 20); w=w'=0.5
        # fused A = 3, B = 4, delta = 12
        fused = merge.fuse(scalar_plugin(2, 3), scalar_plugin(4, 5),
                           MergeCoefficients(0.5, 0.5))
        ad = fused.adapters[0]
        assert ad.a.data[0, 0] == pytest.approx(3.0)
        assert ad.b.data[0, 0] == pytest.approx(4.0)
        assert ad.effective_delta()[0, 0] == pytest.approx(12.0)

    def test_rank_mismatch_rejected(self, base):
        rng = nm.make_rng(1)
        a = PluginModule.fresh(base, 4, 4.0, rng)
        b = PluginModule.fresh(base, 8, 8.0, rng)
        with pytest.raises(IncompatibleModulesError):
            merge.fuse(a, b, MergeCoefficients(0.5, 0.5))

    def test_cross_term_law(self, base):
        # fused_delta - (w^2 main + w'^2 branch) == w w' (B_m A_b + B_b A_m) * alpha/r
        rng = nm.make_rng(2)
        for _ in range(100):
            d, k, r = 3, 5, 2
            alpha = 2.0
            mk = lambda: LoraAdapter(
                0, Tensor(rng.normal(size=(r, k)).astype(np.float32)),
                Tensor(rng.normal(size=(d, r)).astype(np.float32)), r, alpha)
            am, ab = mk(), mk()
            w, wp = rng.uniform(0, 2, size=2)
            fused = merge.fuse(PluginModule({0: am}), PluginModule({0: ab}),
                               MergeCoefficients(w, wp))
            got = fused.adapters[0].effective_delta().astype(np.float64)
            got -= w * w * am.effective_delta() + wp * wp * ab.effective_delta()
            want = (w * wp * (alpha / r)) * (
                am.b.data.astype(np.float64) @ ab.a.data.astype(np.float64)
                + ab.b.data.astype(np.float64) @ am.a.data.astype(np.float64))
            assert np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-9) < 1e-5


class TestMixtureForward:
    def test_single_entry_equals_plain_forward(self, base):
        rng = nm.make_rng(3)
        plugin = random_plugin(base, rng)
        x = Tensor(rng.normal(size=(4, base.input_dim)).astype(np.float32))
        mixed = merge.mixture_forward(base, [(plugin, 1.0)], x).data
        plain = model.forward(base, plugin, x).data
        np.testing.assert_allclose(mixed, plain, atol=1e-6)

    def test_one_by_one_differs_from_fusion(self):
        # same fixture as fusion: mixture delta 0.5*6 + 0.5*20 = 13, not 12
        enc = scalar_base(0.0)
        x = Tensor([[1.0]])
        out = merge.mixture_forward(
            enc, [(scalar_plugin(2, 3), 0.5), (scalar_plugin(4, 5), 0.5)], x)
        assert out.data[0, 0] == pytest.approx(13.0, rel=1e-6)

    def test_zero_coefficients_equal_base(self, base):
        rng = nm.make_rng(4)
        entries = [(random_plugin(base, rng), 0.0), (random_plugin(base, rng), 0.0)]
        x = Tensor(rng.normal(size=(3, base.input_dim)).astype(np.float32))
        mixed = merge.mixture_forward(base, entries, x).data
        plain = model.forward(base, None, x).data
        np.testing.assert_allclose(mixed, plain, atol=1e-6)

    def test_linearity_in_each_coefficient(self, base):
        rng = nm.make_rng(5)
        p1, p2 = random_plugin(base, rng), random_plugin(base, rng)
        d1 = merge.mixture_deltas([(p1, 0.7), (p2, 0.3)])
        d2 = merge.mixture_deltas([(p1, 1.4), (p2, 0.3)])
        for lid in d1:
            contrib1 = d1[lid] - 0.3 * p2.adapters[lid].effective_delta()
            contrib2 = d2[lid] - 0.3 * p2.adapters[lid].effective_delta()
            np.testing.assert_allclose(contrib2, 2.0 * contrib1, atol=1e-6)

    def test_heterogeneous_ranks_allowed(self, base):
        rng = nm.make_rng(6)
        p1 = PluginModule.fresh(base, 4, 4.0, rng)
        p2 = PluginModule.fresh(base, 8, 8.0, rng)
        x = Tensor(rng.normal(size=(2, base.input_dim)).astype(np.float32))
        merge.mixture_forward(base, [(p1, 0.5), (p2, 0.5)], x)


class TestOptimizeCoefficients:
    def test_convex_bowl(self):
        objective = lambda w: (w[0] - 0.3) ** 2 + (w[1] - 0.7) ** 2
        best, value, trace = merge.optimize_coefficients(objective, CoeffOptimConfig())
        assert len(trace) <= 40
        assert np.linalg.norm(best - np.array([0.3, 0.7])) < 0.05
        assert trace[0]["point"] == [0.5, 0.5]

    def test_never_worse_than_init(self):
        # adversarial objective: init is the global minimum
        objective = lambda w: float(np.sum((w - 0.5) ** 2)) * -1.0 + 1.0 \
            if False else float(np.sum((w - 0.5) ** 4))
        best, value, _ = merge.optimize_coefficients(objective, CoeffOptimConfig())
        assert value <= objective(np.array([0.5, 0.5])) + 1e-12

    def test_l1_drives_flat_objective_to_zero(self):
        cfg = CoeffOptimConfig(l1_lambda=10.0)
        objective = lambda w: 1.0 + cfg.l1_lambda * float(np.abs(w).sum())
        best, _, _ = merge.optimize_coefficients(objective, cfg)
        assert np.all(np.abs(best) < 0.1)

    def test_respects_box(self):
        seen = []
        objective = lambda w: seen.append(w.copy()) or float(-(w[0] + w[1]))
        best, _, _ = merge.optimize_coefficients(objective, CoeffOptimConfig())
        for w in seen:
            assert np.all(w >= 0.0 - 1e-12) and np.all(w <= 2.0 + 1e-12)

    def test_nan_objective_rejected(self):
        with pytest.raises(InputError):
            merge.optimize_coefficients(lambda w: float("nan"), CoeffOptimConfig())

    def test_budget_respected(self):
        calls = []
        objective = lambda w: calls.append(1) or float(np.sum(w ** 2))
        merge.optimize_coefficients(objective, CoeffOptimConfig(max_iterations=15))
        assert len(calls) <= 15

    def test_budget_is_a_hard_cap_in_higher_dimensions(self):
        # shrink steps evaluate n points at once; the cap must still hold
        for n_vars in (3, 5):
            calls = []
            objective = lambda w: calls.append(1) or float(np.sum((w - 0.1) ** 2))
            _, _, trace = merge.optimize_coefficients(
                objective, CoeffOptimConfig(max_iterations=10), n_vars=n_vars)
            assert len(calls) <= 10
            assert len(trace) == len(calls)

    def test_budget_one_returns_init(self):
        best, value, trace = merge.optimize_coefficients(
            lambda w: float(np.sum(w ** 2)), CoeffOptimConfig(max_iterations=1))
        assert len(trace) == 1
        np.testing.assert_allclose(best, [0.5, 0.5])

    def test_init_at_box_edge_still_searches(self):
        cfg = CoeffOptimConfig(init_value=2.0, max_iterations=30)
        objective = lambda w: float(np.sum((w - 1.0) ** 2))
        best, _, _ = merge.optimize_coefficients(objective, cfg)
        assert np.linalg.norm(best - 1.0) < 0.2


class TestModelSoup:
    def test_average_with_itself_is_identity(self, base):
        plugin = random_plugin(base, nm.make_rng(7))
        soup = merge.baseline_modelsoup([plugin, plugin])
        assert soup.to_bytes() == plugin.to_bytes()

    def test_two_scalar_modules(self):
        soup = merge.baseline_modelsoup([scalar_plugin(2, 3), scalar_plugin(4, 5)])
        assert soup.adapters[0].a.data[0, 0] == pytest.approx(3.0)
        assert soup.adapters[0].b.data[0, 0] == pytest.approx(4.0)

    def test_empty_list_rejected(self):
        with pytest.raises(InputError):
            merge.baseline_modelsoup([])


def make_guidance(base, rng, labels=("alpha pattern", "beta pattern")):
    from forge.distill import DistilledDataset
    from forge.model import LabelEmbeddingTable

    table = LabelEmbeddingTable("toy", list(labels), base.embed_dim)
    ipc = 4
    inputs = rng.normal(size=(ipc * len(labels), base.input_dim)).astype(np.float32)
    y = np.repeat(np.arange(len(labels)), ipc)
    distilled = DistilledDataset("toy", len(labels), ipc, (16, 16), inputs, y)
    return [(distilled, table)]


def make_guidance_dim(enc, rng, labels=("alpha pattern", "beta pattern")):
    from forge.distill import DistilledDataset
    from forge.model import LabelEmbeddingTable

    table = LabelEmbeddingTable("toy", list(labels), enc.embed_dim)
    inputs = rng.normal(size=(2 * len(labels), enc.input_dim)).astype(np.float32)
    y = np.repeat(np.arange(len(labels)), 2)
    distilled = DistilledDataset("toy", len(labels), 2, (1, enc.input_dim), inputs, y)
    return [(distilled, table)]


class TestLoraHub:
    def test_single_module_weight_one_is_identity(self, base):
        plugin = random_plugin(base, nm.make_rng(8))
        merged = merge.combine_plugins([plugin], [1.0])
        assert merged.to_bytes() == plugin.to_bytes()

    def test_equal_halves_reproduce_fuse(self, base):
        rng = nm.make_rng(9)
        p1, p2 = random_plugin(base, rng), random_plugin(base, rng)
        via_hub = merge.combine_plugins([p1, p2], [0.5, 0.5])
        via_fuse = merge.fuse(p1, p2, MergeCoefficients(0.5, 0.5))
        assert via_hub.to_bytes() == via_fuse.to_bytes()

    def test_joint_optimization_runs(self, base):
        rng = nm.make_rng(10)
        plugins = [random_plugin(base, rng) for _ in range(3)]
        guidance = make_guidance(base, rng)
        merged, weights, trace = merge.baseline_lorahub(
            base, plugins, guidance, CoeffOptimConfig(max_iterations=20))
        assert weights.shape == (3,)
        assert len(trace) <= 20
        assert isinstance(merged, PluginModule)

    def test_empty_guidance_rejected(self, base):
        plugin = random_plugin(base, nm.make_rng(11))
        with pytest.raises(InputError):
            merge.baseline_lorahub(base, [plugin], [], CoeffOptimConfig())


class TestMergeRounds:
    def test_fusion_self_merge_preserves_behavior(self, base):
        rng = nm.make_rng(12)
        plugin = random_plugin(base, rng)
        item = ForgeItem("fused", 1, plugin=plugin)
        guidance = make_guidance(base, rng)
        new_item, outcome = merge.merge_round_fusion(
            base, item, plugin, guidance, CoeffOptimConfig())
        assert new_item.round == 2
        w = outcome.coefficients
        # any (w, w') with w + w' = 1 reproduces the module; check behavior
        distilled, table = guidance[0]
        before = model.cosine_logits_np(
            model.encode_np(base, item.plugin.layer_deltas(), distilled.inputs), table)
        after = model.cosine_logits_np(
            model.encode_np(base, new_item.plugin.layer_deltas(), distilled.inputs), table)
        if abs(w.w_main + w.w_branch - 1.0) < 5e-3:
            np.testing.assert_allclose(after, before, atol=1e-4)

    def test_fusion_first_round_recovers_branch(self, base):
        rng = nm.make_rng(13)
        genesis = ForgeItem.genesis("fusion", base, rank=4, alpha=4.0)
        branch = random_plugin(base, rng)
        fused = merge.fuse(genesis.plugin, branch, MergeCoefficients(0.0, 1.0))
        assert fused.to_bytes() == branch.to_bytes()

    def test_mixture_first_round_single_entry(self, base):
        rng = nm.make_rng(14)
        genesis = ForgeItem.genesis("mixture", base, rank=4, alpha=4.0)
        branch = random_plugin(base, rng)
        guidance = make_guidance(base, rng)
        new_item, outcome = merge.merge_round_mixture(
            base, genesis, branch, guidance, CoeffOptimConfig())
        assert new_item.round == 1
        assert len(new_item.entries) == 1
        assert new_item.entries[0][0] is branch
        assert new_item.entries[0][1] == pytest.approx(outcome.coefficients.w_branch)

    def test_mixture_bookkeeping_hand_expansion(self, base):
        # (0.5, 0.5) then (0.4, 0.6): effective coefficients [0.2, 0.6]
        rng = nm.make_rng(15)
        p1, p2 = random_plugin(base, rng), random_plugin(base, rng)
        item = ForgeItem("mixture", 1, entries=[(p1, 0.5)])
        rescaled = [(p, c * 0.4) for p, c in item.entries] + [(p2, 0.6)]
        assert rescaled[0][1] == pytest.approx(0.2)
        assert rescaled[1][1] == pytest.approx(0.6)

    def test_mixture_flattened_matches_nested(self, base):
        # flattened coefficients reproduce nested two-term evaluation
        rng = nm.make_rng(16)
        p1, p2 = random_plugin(base, rng), random_plugin(base, rng)
        w1, w1p, w2, w2p = 0.9, 0.8, 0.7, 0.6
        x = rng.normal(size=(5, base.input_dim)).astype(np.float32)
        flat = merge.mixture_deltas([(p1, w1p * w2), (p2, w2p)])
        nested_round1 = merge.mixture_deltas([(p1, w1p)])
        nested = {lid: w2 * d for lid, d in nested_round1.items()}
        for lid, d in merge.mixture_deltas([(p2, w2p)]).items():
            nested[lid] = nested[lid] + d
        out_flat = model.encode_np(base, flat, x)
        out_nested = model.encode_np(base, nested, x)
        assert np.linalg.norm(out_flat - out_nested) / np.linalg.norm(out_nested) < 1e-5

    def test_mixture_round_matches_direct_evaluation(self):
        # single affine layer, where the output rule is exactly linear:
        # new output delta = w * (previous mixture delta) + w' * (branch delta)
        rng = nm.make_rng(17)
        w_base = rng.normal(size=(6, 10)).astype(np.float32)
        enc = BaseEncoder([AffineLayer(Tensor(w_base), Tensor(np.zeros(6, dtype=np.float32)))])
        mk = lambda: PluginModule({0: LoraAdapter(
            0, Tensor(rng.normal(size=(2, 10)).astype(np.float32)),
            Tensor(rng.normal(size=(6, 2)).astype(np.float32)), 2, 2.0)})
        p1, p2 = mk(), mk()
        item = ForgeItem("mixture", 1, entries=[(p1, 0.8)])
        guidance = make_guidance_dim(enc, rng)
        new_item, outcome = merge.merge_round_mixture(
            enc, item, p2, guidance, CoeffOptimConfig(max_iterations=10))
        w, wp = outcome.coefficients.w_main, outcome.coefficients.w_branch
        x = rng.normal(size=(4, 10)).astype(np.float32)
        got = model.encode_np(enc, merge.mixture_deltas(new_item.entries), x)
        base_out = model.encode_np(enc, None, x)
        prev = model.encode_np(enc, merge.mixture_deltas(item.entries), x)
        branch_out = model.encode_np(enc, p2.layer_deltas(), x)
        want = base_out + w * (prev - base_out) + wp * (branch_out - base_out)
        assert np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-9) < 1e-5

    def test_empty_guidance_rejected(self, base):
        genesis = ForgeItem.genesis("fusion", base, 4, 4.0)
        branch = random_plugin(base, nm.make_rng(18))
        with pytest.raises(InputError):
            merge.merge_round_fusion(base, genesis, branch, [], CoeffOptimConfig())


class TestForgeItemSerialization:
    def test_fused_round_trip(self, base):
        plugin = random_plugin(base, nm.make_rng(19))
        item = ForgeItem("fused", 3, plugin=plugin)
        back = ForgeItem.from_bytes(item.to_bytes())
        assert back.kind == "fused" and back.round == 3
        assert back.plugin.to_bytes() == plugin.to_bytes()
        assert back.to_bytes() == item.to_bytes()

    def test_mixture_round_trip_with_loader(self, base):
        rng = nm.make_rng(20)
        p1, p2 = random_plugin(base, rng), random_plugin(base, rng)
        store = {p.content_id(): p for p in (p1, p2)}
        item = ForgeItem("mixture", 2, entries=[(p1, 0.25), (p2, 0.75)])
        back = ForgeItem.from_bytes(item.to_bytes(), store.__getitem__)
        assert [(p.content_id(), c) for p, c in back.entries] == \
               [(p.content_id(), c) for p, c in item.entries]
        assert back.to_bytes() == item.to_bytes()

    def test_invalid_kind_rejected(self):
        with pytest.raises(ParameterError):
            ForgeItem("other", 0)

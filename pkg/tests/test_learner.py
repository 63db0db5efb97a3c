import math

import numpy as np
import pytest

from fedtrek.learner import (
    AdapterDelta,
    BaseModel,
    Catalog,
    EncodedExample,
    LearnerError,
    LowRankAdapter,
    TrainConfig,
    all_scores,
    context_embedding,
    encode_example,
    init_adapter,
    kto_loss,
    kto_reference_point,
    policy_logprob,
    recommend,
    recommend_indices,
    reference_logprob,
    score,
    train_local,
)
from fedtrek.pkg_store import EntityRef, PreferenceTriple, SubPkg
from fedtrek.prompt_codec import PromptSpec, format_completion, render_prompt
from fedtrek.records import PreferenceExample
from oracles import brute_scores, fd_gradient, kto_loss_fixed_z, log_softmax_sum, max_relative_error, random_instance


def items(n):
    return [EntityRef(f"urn:i:{i}", f"Item {i}", "movie") for i in range(n)]


def model_of(n=6, d=4, seed=0, W=None):
    return BaseModel(Catalog(items(n), d, seed), W=W)


def sub(*pairs):
    ents = items(20)
    return SubPkg("u", tuple(PreferenceTriple("u", rel, ents[i], k) for k, (rel, i) in enumerate(pairs)))


class TestCatalog:
    def test_unit_rows_and_determinism(self):
        a, b = Catalog(items(10), 8, 3), Catalog(items(10), 8, 3)
        assert np.allclose(np.linalg.norm(a.item_embeddings, axis=1), 1.0)
        assert np.array_equal(a.item_embeddings, b.item_embeddings)
        assert not a.item_embeddings.flags.writeable

    def test_duplicate_iri(self):
        with pytest.raises(LearnerError):
            Catalog(items(3) + items(1), 4)

    def test_label_lookup_is_normalized(self):
        cat = Catalog(items(3), 4)
        assert cat.index_of_label("  item   2 ") == 2
        assert cat.index_of_label("nope") is None

    def test_file_round_trip(self, tmp_path):
        m = BaseModel(Catalog(items(5), 4, 9), base_scale=0.3)
        m.save(tmp_path / "catalog.json")
        back = BaseModel.load(tmp_path / "catalog.json")
        assert np.array_equal(back.W, m.W) and np.array_equal(back.E, m.E)
        assert "embeddings" not in (tmp_path / "catalog.json").read_text()


class TestContext:
    def test_single_liked(self):
        m = model_of()
        assert np.allclose(context_embedding(m, sub(("liked", 1))), m.E[1])

    def test_cancellation(self):
        m = model_of()
        assert np.allclose(context_embedding(m, sub(("liked", 1), ("disliked", 1))), 0)

    def test_empty(self):
        assert np.array_equal(context_embedding(model_of(), SubPkg("u")), np.zeros(4))

    def test_brute_force(self):
        m = model_of(n=10, d=5)
        s = sub(("liked", 0), ("liked", 3), ("disliked", 7), ("liked", 9), ("disliked", 2))
        want = (m.E[0] + m.E[3] + m.E[9]) / 3 - (m.E[7] + m.E[2]) / 2
        assert np.allclose(context_embedding(m, s), want)


class TestScore:
    def test_zero_B_is_base(self):
        m = model_of()
        rng = np.random.default_rng(0)
        ad = LowRankAdapter(rng.standard_normal((2, 4)), np.zeros((4, 2)), 8.0)
        c = rng.standard_normal(4)
        assert score(m, ad, c, 3) == score(m, None, c, 3)

    def test_alpha_zero_is_base(self):
        m = model_of()
        rng = np.random.default_rng(1)
        ad = LowRankAdapter(rng.standard_normal((2, 4)), rng.standard_normal((4, 2)), 0.0)
        c = rng.standard_normal(4)
        assert score(m, ad, c, 2) == pytest.approx(score(m, None, c, 2), abs=1e-15)

    def test_hand_matmul(self):
        rng = np.random.default_rng(2)
        m = model_of(d=4, W=rng.standard_normal((4, 4)))
        ad = LowRankAdapter(rng.standard_normal((2, 4)), rng.standard_normal((4, 2)), 3.0)
        c = rng.standard_normal(4)
        want = brute_scores(m, ad, c)
        got = [score(m, ad, c, j) for j in range(len(m.catalog))]
        assert np.allclose(got, want, rtol=0, atol=1e-12)
        assert np.allclose(all_scores(m, ad, c), want, rtol=0, atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            score(model_of(), None, np.zeros(4), 6)


class TestLogprob:
    def test_uniform(self):
        m = model_of(n=7, W=np.zeros((4, 4)))
        c = np.ones(4)
        assert policy_logprob(m, None, c, [2]) == pytest.approx(math.log(1 / 7), abs=1e-12)
        assert policy_logprob(m, None, c, [2, 5]) == pytest.approx(2 * math.log(1 / 7), abs=1e-12)

    def test_brute_force(self):
        rng = np.random.default_rng(3)
        m, ad, _, _ = random_instance(rng)
        c = rng.standard_normal(m.d)
        its = [0, 2]
        assert policy_logprob(m, ad, c, its) == pytest.approx(log_softmax_sum(brute_scores(m, ad, c), its), abs=1e-10)

    def test_normalization(self):
        rng = np.random.default_rng(4)
        m, ad, _, _ = random_instance(rng)
        c = rng.standard_normal(m.d)
        total = sum(math.exp(policy_logprob(m, ad, c, [j])) for j in range(len(m.catalog)))
        assert abs(total - 1) < 1e-9

    def test_unknown_item(self):
        with pytest.raises(LearnerError):
            policy_logprob(model_of(), None, np.zeros(4), [99])
        with pytest.raises(LearnerError):
            policy_logprob(model_of(), None, np.zeros(4), [])

    def test_reference_ignores_adapter(self):
        rng = np.random.default_rng(5)
        m, ad, _, _ = random_instance(rng)
        c = rng.standard_normal(m.d)
        ref = reference_logprob(m, c, [1])
        assert ref == policy_logprob(m, ad.zeroed(), c, [1])
        assert ref != pytest.approx(policy_logprob(m, ad, c, [1]))


class TestKto:
    def balanced(self, m):
        return [EncodedExample(m.E[0], np.array([1]), True, None),
                EncodedExample(m.E[2], np.array([3]), False, None)]

    def test_fresh_adapter_value(self):
        m = model_of()
        ad = init_adapter(TrainConfig(rank=2), 4, np.random.default_rng(0))
        loss, _ = kto_loss(self.balanced(m), m, ad, TrainConfig(rank=2))
        assert abs(loss - 7 / 12) < 1e-12

    def test_saturation(self):
        m = model_of(W=np.zeros((4, 4)))
        # a huge update pushing item 1 up for context e0
        big = 50.0 * np.outer(m.E[0], m.E[1])
        u, s, vt = np.linalg.svd(big)
        ad = LowRankAdapter(vt[:1] * s[0], u[:, :1], 1.0)
        cfg = TrainConfig(beta=10.0)
        loss, _ = kto_loss([EncodedExample(m.E[0], np.array([1]), True, None)], m, ad, cfg, z=0.0)
        assert loss < 1e-6

    def test_single_example_reference_point_is_zero(self):
        rng = np.random.default_rng(6)
        m, ad, batch, cfg = random_instance(rng)
        assert kto_reference_point(batch[:1], m, ad, cfg) == 0.0

    def test_reference_point_cyclic_pairing(self):
        rng = np.random.default_rng(7)
        m, ad, batch, cfg = random_instance(rng, batch=3)
        rewards = []
        for i in range(3):
            ctx, its = batch[i].context, batch[(i + 1) % 3].items
            rewards.append(cfg.beta * (log_softmax_sum(brute_scores(m, ad, ctx), its)
                                       - log_softmax_sum(brute_scores(m, None, ctx), its)))
        assert kto_reference_point(batch, m, ad, cfg) == pytest.approx(max(0.0, sum(rewards) / 3), abs=1e-10)

    def test_loss_matches_plain_python(self):
        rng = np.random.default_rng(8)
        m, ad, batch, cfg = random_instance(rng)
        z = kto_reference_point(batch, m, ad, cfg)
        loss, _ = kto_loss(batch, m, ad, cfg)
        assert loss == pytest.approx(kto_loss_fixed_z(batch, m, ad, cfg, z), abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        m, ad, batch, cfg = random_instance(rng, d=4, r=2)
        z = kto_reference_point(batch, m, ad, cfg)
        _, grad = kto_loss(batch, m, ad, cfg)
        num = fd_gradient(lambda a: kto_loss(batch, m, a, cfg, z=z)[0], ad)
        assert max_relative_error(grad, num) < 1e-4

    def test_desirable_monotone(self):
        m = model_of(W=np.zeros((4, 4)))
        cfg = TrainConfig()
        ex = [EncodedExample(m.E[0], np.array([1]), True, None)]
        losses = []
        for scale in (0.0, 1.0, 2.0, 4.0):
            ad = LowRankAdapter(scale * m.E[1][None, :], m.E[0][:, None].copy(), 1.0)
            losses.append(kto_loss(ex, m, ad, cfg, z=0.0)[0])
        assert all(a >= b for a, b in zip(losses, losses[1:]))

    def test_undesirable_monotone(self):
        m = model_of(W=np.zeros((4, 4)))
        cfg = TrainConfig()
        ex = [EncodedExample(m.E[0], np.array([1]), False, None)]
        losses = []
        for scale in (0.0, 1.0, 2.0, 4.0):
            ad = LowRankAdapter(scale * m.E[1][None, :], m.E[0][:, None].copy(), 1.0)
            losses.append(kto_loss(ex, m, ad, cfg, z=0.0)[0])
        assert all(a <= b for a, b in zip(losses, losses[1:]))

    def test_empty_batch(self):
        with pytest.raises(LearnerError):
            kto_loss([], model_of(), init_adapter(TrainConfig(rank=2), 4, np.random.default_rng(0)), TrainConfig())

    @pytest.mark.parametrize("lam_d, lam_u", [(2.0, 1.0), (1.0, 2.0)])
    def test_weight_ratio_bounds(self, lam_d, lam_u):
        with pytest.raises(LearnerError):
            TrainConfig(lambda_desirable=lam_d, lambda_undesirable=lam_u)

    def test_ratio_edges_accepted(self):
        TrainConfig(lambda_desirable=3.0, lambda_undesirable=4.0)
        TrainConfig(lambda_desirable=4.0, lambda_undesirable=3.0)


class TestInit:
    def test_B_zero_and_policy_is_reference(self):
        for seed in range(5):
            ad = init_adapter(TrainConfig(rank=3), 4, np.random.default_rng(seed))
            assert not ad.B.any()
            m = model_of()
            c = np.random.default_rng(seed).standard_normal(4)
            assert score(m, ad, c, 1) == score(m, None, c, 1)

    def test_seeds_differ(self):
        a = init_adapter(TrainConfig(), 4, np.random.default_rng(0))
        b = init_adapter(TrainConfig(), 4, np.random.default_rng(1))
        assert not np.array_equal(a.A, b.A)

    def test_checkpoint_round_trip(self, tmp_path):
        ad = LowRankAdapter(np.arange(6.0).reshape(2, 3), np.ones((3, 2)), 4.0)
        ad.save(tmp_path / "a.json")
        back = LowRankAdapter.load(tmp_path / "a.json")
        assert np.array_equal(back.A, ad.A) and np.array_equal(back.B, ad.B) and back.alpha == 4.0

    def test_checkpoint_version_checked(self):
        d = LowRankAdapter(np.ones((1, 2)), np.ones((2, 1)), 1.0).to_dict()
        d["version"] = 99
        with pytest.raises(LearnerError):
            LowRankAdapter.from_dict(d)


def example(m, liked, completion, label="desirable"):
    s = SubPkg("u", tuple(PreferenceTriple("u", "liked", m.catalog.entities[i], k) for k, i in enumerate(liked)))
    prompt = render_prompt(PromptSpec.for_domain("movie", s))
    return PreferenceExample("u", prompt, format_completion([m.catalog.entities[i].label for i in completion]), label)


class TestTrainLocal:
    def test_zero_epochs(self):
        m = model_of()
        cfg = TrainConfig(epochs=0, rank=2)
        ad = init_adapter(cfg, 4, np.random.default_rng(0))
        delta = train_local([example(m, [0], [1])], m, ad, cfg)
        assert not delta.dA.any() and not delta.dB.any()

    def test_deterministic(self):
        m = model_of()
        cfg = TrainConfig(rank=2, epochs=2, batch_size=2, rng_seed=4)
        ad = init_adapter(cfg, 4, np.random.default_rng(0))
        exs = [example(m, [0], [1]), example(m, [2], [3], "undesirable"), example(m, [1], [4])]
        a, b = train_local(exs, m, ad, cfg), train_local(exs, m, ad, cfg)
        assert np.array_equal(a.dA, b.dA) and np.array_equal(a.dB, b.dB) and a.example_count == 3

    def test_descent(self):
        m = model_of()
        cfg = TrainConfig(rank=2, learning_rate=1e-3, batch_size=1)
        ad = init_adapter(cfg, 4, np.random.default_rng(0))
        ad = LowRankAdapter(ad.A, 0.1 * np.random.default_rng(1).standard_normal(ad.B.shape), ad.alpha)
        ex = example(m, [0], [1])
        enc = [encode_example(m, ex)]
        before = kto_loss(enc, m, ad, cfg)[0]
        after = kto_loss(enc, m, ad.apply(train_local([ex], m, ad, cfg)), cfg)[0]
        assert after < before

    def test_no_usable_examples(self):
        m = model_of()
        cfg = TrainConfig(rank=2)
        ad = init_adapter(cfg, 4, np.random.default_rng(0))
        ex = PreferenceExample("u", render_prompt(PromptSpec.for_domain("movie", SubPkg("u"))),
                               format_completion(["Not In Catalog"]), "desirable")
        delta = train_local([ex], m, ad, cfg)
        assert delta.example_count == 0 and not delta.dB.any()


class TestRecommend:
    def test_exclusion_and_truncation(self):
        m = model_of(n=2)
        assert recommend(m, None, sub(("liked", 0)), 5) == ["Item 1"]

    def test_ties_by_index(self):
        m = model_of(n=6, W=np.zeros((4, 4)))
        assert recommend_indices(m, None, sub(("liked", 1), ("disliked", 3)), 3) == [0, 2, 4]

    def test_brute_force_sort(self):
        rng = np.random.default_rng(9)
        m, ad, _, _ = random_instance(rng, n_items=15)
        s = sub(("liked", 2), ("disliked", 5))
        scores = brute_scores(m, ad, context_embedding(m, s))
        want = sorted((j for j in range(15) if j not in (2, 5)), key=lambda j: (-scores[j], j))[:7]
        assert recommend_indices(m, ad, s, 7) == want

    def test_k_validation(self):
        with pytest.raises(LearnerError):
            recommend(model_of(), None, SubPkg("u"), 0)

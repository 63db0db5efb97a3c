import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedtrek.dataset_builder import entity_iris
from fedtrek.pkg_store import EntityRef, PersonalKnowledgeGraph, PreferenceTriple
from fedtrek.prompt_codec import extract_prompt_pkg, normalize_label, parse_completion
from fedtrek.records import Dataset, PreferenceExample
from fedtrek.synth_gen import SynthConfig, augment, client_rng, mask_triples, redundancy_negatives
from strategies import graphs

E = {x: EntityRef(f"urn:m:{x}", f"Movie {x}", "movie") for x in "ABCDXY"}


def pkg_of(*pairs, user="u"):
    return PersonalKnowledgeGraph.from_triples(user, [PreferenceTriple(user, rel, E[x], i)
                                                       for i, (rel, x) in enumerate(pairs)])


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMask:
    def test_half_of_four_liked(self):
        pkg = pkg_of(("liked", "A"), ("liked", "B"), ("liked", "C"), ("liked", "D"))
        exs = mask_triples(pkg, SynthConfig(mask_count_per_client=1, mask_fraction=0.5), rng())
        (ex,) = exs
        assert ex.label == "desirable" and ex.origin == "synthetic_mask"
        hidden = parse_completion(ex.completion)
        assert len(hidden) == 2
        _, rels = extract_prompt_pkg(ex.prompt)
        assert sorted(rels["liked"] + hidden) == [f"Movie {x}" for x in "ABCD"]
        assert ex.prompt.endswith("User: Recommend movies to me.")

    def test_hidden_disliked_is_undesirable(self):
        pkg = pkg_of(("disliked", "X"), ("liked", "Y"))
        seen = {}
        for seed in range(20):
            for ex in mask_triples(pkg, SynthConfig(mask_count_per_client=1, mask_fraction=0.5), rng(seed)):
                seen[tuple(parse_completion(ex.completion))] = ex.label
        assert seen == {("Movie X",): "undesirable", ("Movie Y",): "desirable"}

    def test_mixed_hidden_set_is_split(self):
        pkg = pkg_of(("liked", "A"), ("disliked", "B"), ("liked", "C"))
        cfg = SynthConfig(mask_count_per_client=1, mask_fraction=0.6)  # hides 2 of 3
        for seed in range(50):
            exs = mask_triples(pkg, cfg, rng(seed))
            if len(exs) == 2:
                assert [e.label for e in exs] == ["desirable", "undesirable"]
                assert exs[0].prompt == exs[1].prompt
                assert parse_completion(exs[1].completion) == ["Movie B"]
                return
        pytest.fail("no seed hid a mixed set")

    def test_too_small(self):
        assert mask_triples(pkg_of(("liked", "A")), SynthConfig(), rng()) == []
        assert mask_triples(PersonalKnowledgeGraph("u"), SynthConfig(), rng()) == []

    def test_remainder_never_empty(self):
        pkg = pkg_of(("liked", "A"), ("liked", "B"))
        (ex,) = mask_triples(pkg, SynthConfig(mask_count_per_client=1, mask_fraction=0.99), rng())
        assert len(parse_completion(ex.completion)) == 1

    @given(graphs(user="u", types=st.just("movie"), unique_labels=True), st.integers(0, 2**32 - 1),
           st.floats(0.05, 0.95))
    def test_invariants(self, pkg, seed, frac):
        latest = {t.object.iri: t.relation for t in pkg.triples}
        label_of = {t.object.iri: normalize_label(t.object.label) for t in pkg.triples}
        want = {"liked": "desirable", "disliked": "undesirable"}
        for ex in mask_triples(pkg, SynthConfig(mask_count_per_client=3, mask_fraction=frac), rng(seed)):
            hidden = entity_iris(ex)
            assert [label_of[i] for i in hidden] == [normalize_label(h) for h in parse_completion(ex.completion)]
            _, rels = extract_prompt_pkg(ex.prompt)
            shown = {normalize_label(x) for x in rels["liked"] + rels["disliked"]}
            assert shown and not {label_of[i] for i in hidden} & shown
            assert {want[latest[i]] for i in hidden} == {ex.label}


class TestRedundancy:
    def test_single_liked(self):
        (ex,) = redundancy_negatives(pkg_of(("liked", "A")), SynthConfig(), rng())
        assert ex.label == "undesirable" and parse_completion(ex.completion) == ["Movie A"]
        assert ex.origin == "synthetic_redundancy"

    def test_zero_requested(self):
        assert redundancy_negatives(pkg_of(("liked", "A")), SynthConfig(redundancy_count_per_client=0), rng()) == []

    def test_empty_graph(self):
        assert redundancy_negatives(PersonalKnowledgeGraph("u"), SynthConfig(), rng()) == []

    @given(graphs(user="u", types=st.just("movie")), st.integers(0, 2**32 - 1))
    def test_completion_repeats_the_prompt_graph(self, pkg, seed):
        for ex in redundancy_negatives(pkg, SynthConfig(redundancy_count_per_client=3), rng(seed)):
            items = {normalize_label(x) for x in parse_completion(ex.completion)}
            _, rels = extract_prompt_pkg(ex.prompt)
            assert items and items <= {normalize_label(x) for x in rels["liked"] + rels["disliked"]}
            assert ex.label == "undesirable"


class TestAugment:
    def dataset(self):
        pkgs = {u: pkg_of(("liked", "A"), ("liked", "B"), ("disliked", "C"), user=u) for u in ("u1", "u2")}
        real = [PreferenceExample("u1", f"p{i}", "- x", "desirable", "real") for i in range(10)]
        return Dataset(real, [], pkgs)

    def test_union(self):
        cfg = SynthConfig(mask_count_per_client=2, redundancy_count_per_client=1)
        ds = self.dataset()
        out = augment(ds, cfg)
        assert out.train[:10] == ds.train
        synth = out.train[10:]
        assert synth and all(e.synthetic for e in synth)
        assert {e.origin for e in synth} <= {"synthetic_mask", "synthetic_redundancy"}
        assert len(ds.train) == 10  # input untouched

    def test_deterministic(self):
        cfg = SynthConfig(rng_seed=5)
        assert augment(self.dataset(), cfg).train == augment(self.dataset(), cfg).train

    def test_seed_changes_output(self):
        a = augment(self.dataset(), SynthConfig(rng_seed=1, mask_count_per_client=4)).train
        b = augment(self.dataset(), SynthConfig(rng_seed=2, mask_count_per_client=4)).train
        assert a != b

    def test_client_streams_are_stable(self):
        assert client_rng(3, "u1").integers(1 << 30) == client_rng(3, "u1").integers(1 << 30)
        assert client_rng(3, "u1").integers(1 << 30) != client_rng(3, "u2").integers(1 << 30)

    def test_fixture_real_share(self, movie_dataset):
        out = augment(movie_dataset, SynthConfig())
        real = sum(not e.synthetic for e in out.train)
        share = real / len(out.train)
        assert 0.5 <= share <= 0.75

    @pytest.mark.parametrize("bad", [dict(mask_fraction=0), dict(mask_fraction=1), dict(mask_count_per_client=-1)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            SynthConfig(**bad)

import random

import pytest

from oracles import span_overlap_labels
from veribeam.corpora import make_toy_corpus, table2_fate, table2_instance
from veribeam.fate import (
    BalanceError,
    CoverageError,
    FateInstance,
    HypothesisPair,
    TemplateSet,
    balance_labels,
    build_fate,
    cell_counts,
    perturb_triple,
    read_fate_file,
    read_pairs_file,
    render_description,
    render_triple,
    split_hypotheses,
    strip_marks,
    write_fate_file,
    write_pairs_file,
)
from veribeam.knowledge import FactList, FactTriple
from veribeam.perturbations import PerturbationRegistry
from veribeam.verify import SUPPORTED, rule_oracle_verify

IRELAND = FactTriple("Ireland", "largest_city", "Dublin")


class TestPerturbTriple:
    def test_table2_relation_swap(self):
        rng = random.Random(0)
        registry = PerturbationRegistry()
        out = perturb_triple(IRELAND, "relation", ["national_capital"], rng, registry)
        assert out == FactTriple("Ireland", "national_capital", "Dublin")
        record = registry.lookup(IRELAND)[0]
        assert (record.original, record.replacement) == ("largest_city", "national_capital")

    def test_pool_of_one_entity(self):
        rng = random.Random(1)
        out = perturb_triple(IRELAND, "subject", ["France"], rng)
        assert out.subject == "France"

    def test_seeded_determinism(self):
        pool = ["France", "Spain", "Italy"]
        a = perturb_triple(IRELAND, "subject", pool, random.Random(7))
        b = perturb_triple(IRELAND, "subject", pool, random.Random(7))
        assert a == b

    def test_empty_pool(self):
        with pytest.raises(CoverageError):
            perturb_triple(IRELAND, "object", ["Dublin"], random.Random(0))


class TestRender:
    def test_table2_relation_marked(self):
        template = "{object} is {subject}'s {relation}"
        out = render_triple(IRELAND, template, mark_position="relation", mark_index=0)
        assert out == "Dublin is Ireland's <S0> largest city </S0>"

    def test_unperturbed_has_no_marks(self):
        _, templates, _ = table2_instance()
        out = render_description(FactList((IRELAND,)), templates)
        assert out == "Dublin is Ireland's largest city"
        assert "<S" not in out

    def test_deterministic(self):
        _, templates, _ = table2_instance()
        facts = FactList((IRELAND,))
        assert (render_description(facts, templates, 0, "relation")
                == render_description(facts, templates, 0, "relation"))

    def test_cannot_mark_attached_placeholder(self):
        template = "{object} is {subject}'s {relation}"
        from veribeam.fate import TemplateError

        with pytest.raises(TemplateError):
            render_triple(IRELAND, template, mark_position="subject", mark_index=0)

    def test_missing_template_listed(self):
        templates = TemplateSet({})
        with pytest.raises(CoverageError, match="largest_city"):
            render_description(FactList((IRELAND,)), templates)


class TestStripMarks:
    def test_round_trip(self):
        tokens, span, index = strip_marks("Dublin is Ireland's <S0> largest city </S0>")
        assert tokens == ["Dublin", "is", "Ireland's", "largest", "city"]
        assert span == (3, 5)
        assert index == 0

    def test_unbalanced_rejected(self):
        with pytest.raises(ValueError):
            strip_marks("a <S0> b")
        with pytest.raises(ValueError):
            strip_marks("a </S0> b")


@pytest.fixture
def table2():
    instance, fate_instance, pairs = table2_fate()
    return instance, fate_instance, pairs


class TestFateInstance:
    def test_table2_texts(self, table2):
        _, fate_instance, _ = table2
        assert fate_instance.t_pos == "Dublin is Ireland's <S0> largest city </S0>"
        assert fate_instance.t_neg == "Dublin is Ireland's <S0> national capital </S0>"
        fate_instance.validate()

    def test_exactly_one_perturbation_enforced(self, table2):
        _, fate_instance, _ = table2
        broken = FateInstance(
            fate_instance.f_pos, fate_instance.f_pos,  # no difference at all
            fate_instance.t_pos, fate_instance.t_neg, 0, "relation")
        with pytest.raises(ValueError):
            broken.validate()

    def test_span_text_must_differ(self, table2):
        _, fate_instance, _ = table2
        broken = FateInstance(
            fate_instance.f_pos, fate_instance.f_neg,
            fate_instance.t_pos, fate_instance.t_pos, 0, "relation")
        with pytest.raises(ValueError):
            broken.validate()

    def test_record_round_trip(self, table2, tmp_path):
        _, fate_instance, _ = table2
        path = tmp_path / "fate.jsonl"
        write_fate_file([fate_instance], path)
        assert read_fate_file(path) == [fate_instance]


class TestSplitHypotheses:
    # token layout (perturbed): Dublin is Ireland's national capital
    #                           0      1  2         3        4

    def test_split_inside_span_both_unsupported(self, table2):
        _, fate_instance, _ = table2
        pair = split_hypotheses(fate_instance, 4, "perturbed")
        assert pair.backward == ("Dublin", "is", "Ireland's", "national")
        assert pair.labels == ((False, False),)

    def test_original_source_all_supported(self, table2):
        _, fate_instance, _ = table2
        pair = split_hypotheses(fate_instance, 4, "original")
        assert pair.backward == ("Dublin", "is", "Ireland's", "largest")
        assert pair.forward == ("city",)
        assert pair.labels == ((True, True),)

    def test_split_before_span(self, table2):
        _, fate_instance, _ = table2
        pair = split_hypotheses(fate_instance, 3, "perturbed")
        assert pair.backward == ("Dublin", "is", "Ireland's")
        assert pair.forward == ("national", "capital")
        assert pair.labels == ((True, False),)

    def test_reconstruction(self, table2):
        _, fate_instance, _ = table2
        for source in ("original", "perturbed"):
            tokens = fate_instance.clean_tokens(source)[0]
            for t in range(1, len(tokens)):
                pair = split_hypotheses(fate_instance, t, source)
                assert list(pair.backward) + list(pair.forward) == tokens

    def test_out_of_range(self, table2):
        _, fate_instance, _ = table2
        with pytest.raises(ValueError):
            split_hypotheses(fate_instance, 0, "original")
        with pytest.raises(ValueError):
            split_hypotheses(fate_instance, 99, "original")

    def test_labels_match_brute_force_overlap(self):
        corpus = make_toy_corpus(12, seed=5)
        build = build_fate(corpus.instances, corpus.pools, corpus.templates,
                           per_instance_splits=1, seed=5, balance=False)
        for instance in build.instances:
            for source in ("original", "perturbed"):
                tokens = instance.clean_tokens(source)[0]
                for t in range(1, len(tokens)):
                    pair = split_hypotheses(instance, t, source)
                    assert pair.labels == span_overlap_labels(instance, t, source)


def _pair_with_labels(labels, source="perturbed"):
    facts = FactList(tuple(FactTriple(f"s{i}", f"r{i}", f"o{i}") for i in range(len(labels))))
    return HypothesisPair(
        facts=facts,
        backward=("b",),
        forward=("f",),
        source=source,
        split=1,
        labels=tuple(labels),
        perturbed_index=0,
        position="relation",
        original_surface="r0",
        replacement_surface="x0",
    )


class TestBalance:
    def test_already_balanced_unchanged(self):
        pairs = [_pair_with_labels([(True, True)]), _pair_with_labels([(False, False)])]
        assert balance_labels(pairs) == pairs

    def test_supported_minority_upsampled(self):
        pairs = [_pair_with_labels([(True, True)])] + [
            _pair_with_labels([(False, False)]) for _ in range(4)
        ]
        out = balance_labels(pairs)
        supported, unsupported = cell_counts(out)
        assert supported == 8 and unsupported == 8
        assert out.count(pairs[0]) == 4  # the supported pair was duplicated

    def test_unsupported_minority_upsampled(self):
        pairs = [_pair_with_labels([(False, False)])] + [
            _pair_with_labels([(True, True)]) for _ in range(4)
        ]
        out = balance_labels(pairs)
        supported, unsupported = cell_counts(out)
        assert 0.9 <= supported / unsupported <= 1.1

    def test_ratio_window_contract(self):
        corpus = make_toy_corpus(30, seed=2, m_range=(1, 2))
        build = build_fate(corpus.instances, corpus.pools, corpus.templates,
                           per_instance_splits=2, seed=2, balance=False)
        out = balance_labels(build.pairs)
        supported, unsupported = cell_counts(out)
        assert 0.9 <= supported / unsupported <= 1.1

    def test_single_label_reported(self):
        pairs = [_pair_with_labels([(True, True)], source="original")]
        with pytest.raises(BalanceError, match="single-label"):
            balance_labels(pairs)

    def test_unreachable_window_reported(self):
        # only supported-heavy pairs available while supported already dominates
        pairs = [
            _pair_with_labels([(True, True), (True, False)]),
            _pair_with_labels([(True, True), (True, True)]),
        ]
        with pytest.raises(BalanceError):
            balance_labels(pairs)


class TestBuildFate:
    def test_one_instance_one_split_two_pairs(self):
        corpus = make_toy_corpus(1, seed=0, m_range=(2, 2))
        build = build_fate(corpus.instances, corpus.pools, corpus.templates,
                           per_instance_splits=1, seed=0, balance=False)
        assert len(build.instances) == 1
        assert len(build.pairs) == 2
        assert {p.source for p in build.pairs} == {"original", "perturbed"}

    def test_every_instance_valid(self):
        corpus = make_toy_corpus(25, seed=9)
        build = build_fate(corpus.instances, corpus.pools, corpus.templates, seed=9,
                           balance=False)
        for instance in build.instances:
            instance.validate()
            diff = [j for j, (a, b) in enumerate(zip(instance.f_pos, instance.f_neg)) if a != b]
            assert diff == [instance.perturbed_index]

    def test_labels_agree_with_rule_oracle(self):
        corpus = make_toy_corpus(20, seed=11)
        build = build_fate(corpus.instances, corpus.pools, corpus.templates,
                           per_instance_splits=2, seed=11, balance=False)
        for pair in build.pairs:
            for j, triple in enumerate(pair.facts):
                for hyp, supported in ((pair.backward, pair.labels[j][0]),
                                       (pair.forward, pair.labels[j][1])):
                    verdict = rule_oracle_verify(build.registry, triple, " ".join(hyp))
                    assert (verdict == SUPPORTED) == supported

    def test_coverage_gaps_listed_before_abort(self):
        corpus = make_toy_corpus(2, seed=0)
        pools = {"subject": {}, "relation": {}, "object": {}}
        with pytest.raises(CoverageError) as err:
            build_fate(corpus.instances, pools, corpus.templates, seed=0)
        text = str(err.value)
        assert text.count("empty") >= 3  # every gap listed, not just the first

    def test_seeded_determinism_byte_identical(self, tmp_path):
        corpus = make_toy_corpus(8, seed=4)
        outs = []
        for run in range(2):
            build = build_fate(corpus.instances, corpus.pools, corpus.templates,
                               per_instance_splits=2, seed=7)
            fate_path = tmp_path / f"fate{run}.jsonl"
            pairs_path = tmp_path / f"pairs{run}.jsonl"
            registry_path = tmp_path / f"registry{run}.json"
            write_fate_file(build.instances, fate_path)
            write_pairs_file(build.pairs, pairs_path)
            build.registry.save(registry_path)
            outs.append((fate_path.read_bytes(), pairs_path.read_bytes(),
                         registry_path.read_bytes()))
        assert outs[0] == outs[1]

    def test_pairs_file_round_trip(self, tmp_path):
        corpus = make_toy_corpus(3, seed=1)
        build = build_fate(corpus.instances, corpus.pools, corpus.templates, seed=1)
        path = tmp_path / "pairs.jsonl"
        write_pairs_file(build.pairs, path)
        assert read_pairs_file(path) == build.pairs

    def test_all_splits_mode(self):
        corpus = make_toy_corpus(2, seed=3, m_range=(1, 1))
        build = build_fate(corpus.instances, corpus.pools, corpus.templates,
                           per_instance_splits="all", seed=3, balance=False)
        for instance in build.instances:
            n = min(len(instance.clean_tokens("original")[0]),
                    len(instance.clean_tokens("perturbed")[0]))
            expected = 2 * (n - 1)
            got = [p for p in build.pairs if p.facts == instance.f_pos]
            assert len(got) == expected

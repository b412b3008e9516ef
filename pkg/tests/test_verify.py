import math

import pytest

from oracles import naive_contains_perturbation
from veribeam.corpora import make_toy_corpus, table2_fate
from veribeam.fate import build_fate
from veribeam.knowledge import FactList, FactTriple
from veribeam.perturbations import PerturbationRegistry, UnregisteredTripleError
from veribeam.verify import (
    OracleEntailmentScorer,
    OracleVerifier,
    SUPPORTED,
    UNSUPPORTED,
    Verdict,
    nli_adapter_score,
    render_premise,
    rule_oracle_verify,
)

IRELAND = FactTriple("Ireland", "largest_city", "Dublin")


@pytest.fixture
def registry():
    reg = PerturbationRegistry()
    reg.register_clean(IRELAND)
    reg.register(IRELAND, "relation", "national_capital")
    return reg


class TestVerdict:
    def test_score_must_be_nonpositive(self):
        with pytest.raises(ValueError):
            Verdict(score=0.5)

    def test_from_probs_mean_log(self):
        v = Verdict.from_probs([1.0, math.exp(-2)])
        assert v.score == pytest.approx(-1.0)
        assert v.per_triple == (1.0, pytest.approx(math.exp(-2)))

    def test_negative_flag_cells(self):
        assert Verdict.from_probs([0.9, 0.2]).negative
        assert not Verdict.from_probs([0.9, 0.8]).negative

    def test_negative_flag_score_only(self):
        assert Verdict(score=math.log(0.3)).negative
        assert not Verdict(score=math.log(0.7)).negative

    def test_probs_validated(self):
        with pytest.raises(ValueError):
            Verdict(score=-1.0, per_triple=(1.5,))


class TestRuleOracle:
    def test_table2_supported_row(self, registry):
        assert rule_oracle_verify(registry, IRELAND, "Dublin is Ireland's largest") == SUPPORTED

    def test_table2_unsupported_row(self, registry):
        assert rule_oracle_verify(registry, IRELAND, "national capital.") == UNSUPPORTED

    def test_empty_hypothesis_vacuously_supported(self, registry):
        assert rule_oracle_verify(registry, IRELAND, "") == SUPPORTED

    def test_original_form_shields(self, registry):
        text = "the largest city not the national capital"
        assert rule_oracle_verify(registry, IRELAND, text) == SUPPORTED

    def test_partial_span_overlap_detected(self, registry):
        assert rule_oracle_verify(registry, IRELAND, "Dublin is Ireland's national") == UNSUPPORTED

    def test_unregistered_triple_rejected(self, registry):
        with pytest.raises(UnregisteredTripleError):
            rule_oracle_verify(registry, FactTriple("a", "b", "c"), "x")

    def test_punctuation_insensitive(self, registry):
        assert rule_oracle_verify(registry, IRELAND, "its national capital.") == UNSUPPORTED

    def test_agrees_with_naive_rederivation(self):
        corpus = make_toy_corpus(15, seed=13)
        build = build_fate(corpus.instances, corpus.pools, corpus.templates,
                           per_instance_splits=2, seed=13, balance=False)
        for pair in build.pairs:
            text = " ".join(pair.backward)
            for triple in pair.facts:
                expected = naive_contains_perturbation(build.registry, triple, text)
                got = rule_oracle_verify(build.registry, triple, text) == UNSUPPORTED
                assert got == expected


class TestOracleVerifier:
    def test_per_triple_probs(self, registry):
        verifier = OracleVerifier(registry, p_support=0.99, p_refute=0.01)
        verdict = verifier.verify(FactList((IRELAND,)), "national capital", "forward")
        assert verdict.per_triple == (0.01,)
        assert verdict.negative
        assert verdict.score == pytest.approx(math.log(0.01))

    def test_default_refute_probability_is_moderate(self, registry):
        verdict = OracleVerifier(registry).verify(FactList((IRELAND,)), "national capital", "forward")
        assert verdict.per_triple == (0.3,)
        assert verdict.negative

    def test_scale_contract(self, registry):
        verifier = OracleVerifier(registry)
        for text in ("Dublin is Ireland's largest", "national capital"):
            assert verifier.verify(FactList((IRELAND,)), text, "backward").score <= 0.0

    def test_bad_probs_rejected(self, registry):
        with pytest.raises(ValueError):
            OracleVerifier(registry, p_support=0.2, p_refute=0.5)


class _FixedScorer:
    def __init__(self, prob):
        self.prob = prob
        self.premises = []

    def score(self, premise, hypothesis):
        self.premises.append(premise)
        return self.prob


class TestNliAdapter:
    def test_prob_one_scores_zero(self):
        facts = FactList((IRELAND,))
        assert nli_adapter_score(_FixedScorer(1.0), facts, "anything") == 0.0

    def test_prob_inv_e_scores_minus_one(self):
        facts = FactList((IRELAND,))
        score = nli_adapter_score(_FixedScorer(math.exp(-1)), facts, "anything")
        assert score == pytest.approx(-1.0)

    def test_premise_format(self):
        facts = FactList((IRELAND, FactTriple("Aston Martin V8", "engine", "5.3 litres")))
        scorer = _FixedScorer(0.5)
        nli_adapter_score(scorer, facts, "x")
        assert scorer.premises == [
            "Ireland largest city Dublin; Aston Martin V8 engine 5.3 litres"
        ]

    def test_oracle_backed_verbatim_near_zero(self, registry):
        facts = FactList((IRELAND,))
        scorer = OracleEntailmentScorer(registry)
        score = nli_adapter_score(scorer, facts, "Dublin is Ireland's largest city")
        assert score == pytest.approx(math.log(0.99))
        assert score > -0.02

    def test_oracle_backed_contradiction_below_entailment(self, registry):
        facts = FactList((IRELAND,))
        scorer = OracleEntailmentScorer(registry)
        good = nli_adapter_score(scorer, facts, "Dublin is Ireland's largest city")
        bad = nli_adapter_score(scorer, facts, "Dublin is the national capital")
        assert bad < good
        assert bad == pytest.approx(math.log(0.3))

    def test_empty_hypothesis_rejected(self, registry):
        with pytest.raises(ValueError):
            nli_adapter_score(OracleEntailmentScorer(registry), FactList((IRELAND,)), "  ")

    def test_render_premise_uses_relation_words(self):
        assert render_premise(FactList((IRELAND,))) == "Ireland largest city Dublin"


class TestHvmVerifierPath:
    def test_table2_trained_ordering(self):
        from veribeam.hvm import train_hvm
        from veribeam.verify import HvmVerifier

        corpus = make_toy_corpus(20, seed=8, m_range=(1, 2))
        build = build_fate(corpus.instances, corpus.pools, corpus.templates,
                           per_instance_splits=2, seed=8)
        _, _, t2_pairs = table2_fate()
        model = train_hvm(list(build.pairs) + t2_pairs, epochs=200)
        verifier = HvmVerifier(model)
        facts = FactList((IRELAND,))
        good = verifier.verify(facts, "largest city.", "forward")
        bad = verifier.verify(facts, "national capital.", "forward")
        assert good.score > bad.score
        assert bad.negative and not good.negative
        # calibration floor bounds the refuted cell away from zero
        assert bad.per_triple[0] >= 0.3
        raw = HvmVerifier(model, floor=0.0).verify(facts, "national capital.", "forward")
        assert raw.per_triple[0] <= bad.per_triple[0]

    def test_empty_hypothesis_rejected(self):
        from veribeam.hvm import TabularHvm
        from veribeam.verify import HvmVerifier
        import numpy as np
        from veribeam.hvm import FEATURE_NAMES, ContradictionIndex

        model = TabularHvm()
        model.weights_ = np.zeros(len(FEATURE_NAMES))
        model.contradictions_ = ContradictionIndex()
        with pytest.raises(ValueError):
            HvmVerifier(model).verify(FactList((IRELAND,)), "", "forward")

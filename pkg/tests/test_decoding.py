import random

import pytest

from oracles import enumerate_best, replay_greedy_from_counts
from veribeam.corpora import make_adversarial_build, make_toy_corpus
from veribeam.decoding import (
    BeamCandidate,
    DecodeConfig,
    DecodeError,
    beam_step,
    combined_score,
    decode,
    faith_score,
    faithfulness_weight,
    rollout,
    weight_scheme_for,
)
from veribeam.hvm import train_hvm
from veribeam.knowledge import FactList, FactTriple
from veribeam.lm import Vocabulary, train_toy_lm
from veribeam.verify import HvmVerifier, OracleVerifier, Verdict, Verifier


def facts_for(tag):
    return FactList((FactTriple(f"s{tag}", f"r{tag}", f"o{tag}"),))


@pytest.fixture(scope="module")
def toy():
    corpus = make_toy_corpus(10, seed=21)
    model = train_toy_lm(corpus.lm_corpus, order=3)
    return corpus, model


class TestFaithfulnessWeight:
    def test_backward_always_one(self):
        for t, fl in [(1, 0), (3, 7), (100, 1)]:
            assert faithfulness_weight("backward", t, fl) == 1.0

    def test_forward_always_zero(self):
        for t, fl in [(1, 0), (3, 7), (100, 1)]:
            assert faithfulness_weight("forward", t, fl) == 0.0

    def test_dynamic_ratio(self):
        assert faithfulness_weight("dynamic", 5, 15) == 0.25

    @pytest.mark.parametrize("t,fl", [(t, fl) for t in (1, 2, 5, 9) for fl in (0, 1, 4, 30)])
    def test_dynamic_grid(self, t, fl):
        w = faithfulness_weight("dynamic", t, fl)
        expected = 1.0 if fl == 0 else t / (t + fl)
        assert w == expected
        assert 0.0 <= w <= 1.0

    def test_dynamic_monotone_in_t(self):
        values = [faithfulness_weight("dynamic", t, 10) for t in range(1, 30)]
        assert values == sorted(values)

    def test_dynamic_requires_positive_t(self):
        with pytest.raises(ValueError):
            faithfulness_weight("dynamic", 0, 5)

    def test_strategy_mapping(self):
        assert weight_scheme_for("tweak-nli-b") == "backward"
        assert weight_scheme_for("tweak-nli-f") == "forward"
        assert weight_scheme_for("tweak-nli-bf") == "dynamic"
        assert weight_scheme_for("tweak-hvm") == "dynamic"


class TestCombinedScore:
    def test_alpha_zero_is_beam_objective(self):
        assert combined_score(-2.0, -123.0, 0.0) == -2.0

    def test_paper_alpha_arithmetic(self):
        assert combined_score(-2.0, -0.5, 8.0) == -6.0

    def test_zero_generative_term(self):
        assert combined_score(0.0, -0.7, 3.0) == pytest.approx(-2.1)

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            combined_score(0.0, 0.0, -1.0)


class _SideScorer(Verifier):
    """Fixed backward/forward scores; records the texts it saw."""

    def __init__(self, backward=-0.2, forward=-1.0):
        self.backward = backward
        self.forward = forward
        self.calls = []

    def verify(self, facts, hypothesis, kind):
        self.calls.append((kind, hypothesis))
        return Verdict(score=self.backward if kind == "backward" else self.forward)


def _vocab(n=20):
    return Vocabulary.build({f"w{i}" for i in range(n)})


class TestFaithScore:
    def test_hvm_weighted_sum(self):
        vocab = _vocab(30)
        verifier = _SideScorer(-0.2, -1.0)
        backward = tuple([vocab.bos_id] + vocab.encode([f"w{i}" for i in range(5)]))
        forward = tuple(vocab.encode([f"w{i}" for i in range(5, 20)]))
        f, w, b, fw, records = faith_score(
            verifier, facts_for("x"), backward, forward, "tweak-hvm", vocab)
        assert w == 0.25
        assert f == pytest.approx(0.25 * -0.2 + 0.75 * -1.0)
        assert f == pytest.approx(-0.8)
        assert len(records) == 2

    def test_scheme_backward_only_calls_backward(self):
        vocab = _vocab()
        verifier = _SideScorer()
        backward = tuple([vocab.bos_id] + vocab.encode(["w1", "w2"]))
        forward = tuple(vocab.encode(["w3"]))
        f, w, b, fw, _ = faith_score(
            verifier, facts_for("x"), backward, forward, "tweak-nli-b", vocab)
        assert w == 1.0 and f == -0.2 and fw is None
        assert [kind for kind, _ in verifier.calls] == ["backward"]

    def test_scheme_forward_concatenates(self):
        vocab = _vocab()
        verifier = _SideScorer()
        backward = tuple([vocab.bos_id] + vocab.encode(["w1", "w2"]))
        forward = tuple(vocab.encode(["w3", "w4"]))
        f, w, b, fw, _ = faith_score(
            verifier, facts_for("x"), backward, forward, "tweak-nli-f", vocab)
        assert w == 0.0 and f == -1.0 and b is None
        assert verifier.calls == [("forward", "w1 w2 w3 w4")]

    def test_hvm_forward_is_rollout_alone(self):
        vocab = _vocab()
        verifier = _SideScorer()
        backward = tuple([vocab.bos_id] + vocab.encode(["w1"]))
        forward = tuple(vocab.encode(["w3", "w4"]))
        faith_score(verifier, facts_for("x"), backward, forward, "tweak-hvm", vocab)
        kinds = dict(verifier.calls)
        assert kinds["forward"] == "w3 w4"
        assert kinds["backward"] == "w1"

    def test_empty_forward_shifts_weight_backward(self):
        vocab = _vocab()
        verifier = _SideScorer()
        backward = tuple([vocab.bos_id] + vocab.encode(["w1"]))
        f, w, b, fw, _ = faith_score(
            verifier, facts_for("x"), backward, (), "tweak-hvm", vocab)
        assert w == 1.0 and f == -0.2

    def test_empty_everything_vacuous(self):
        vocab = _vocab()
        verifier = _SideScorer()
        backward = (vocab.bos_id, vocab.eos_id)
        f, w, b, fw, records = faith_score(
            verifier, facts_for("x"), backward, (), "tweak-hvm", vocab)
        assert f == 0.0 and records == [] and verifier.calls == []

    def test_wt_override(self):
        vocab = _vocab()
        verifier = _SideScorer(-0.2, -1.0)
        backward = tuple([vocab.bos_id] + vocab.encode(["w1", "w2"]))
        forward = tuple(vocab.encode(["w3", "w4"]))
        f, w, _, _, _ = faith_score(
            verifier, facts_for("x"), backward, forward, "tweak-nli-bf", vocab,
            wt_override=0.5)
        assert w == 0.5
        assert f == pytest.approx(0.5 * -0.2 + 0.5 * -1.0)


class TestRollout:
    def test_cap_zero_empty(self, toy):
        corpus, model = toy
        facts = corpus.instances[0].facts
        assert rollout(model, (model.vocab.bos_id,), facts, 0) == ()

    def test_replays_training_sentence(self, toy):
        corpus, model = toy
        instance = corpus.instances[0]
        from veribeam.knowledge import tokenize

        ids = [model.vocab.bos_id] + model.vocab.encode(tokenize(instance.references[0])[:3])
        roll = rollout(model, tuple(ids), instance.facts, cap=64)
        expected = replay_greedy_from_counts(model, instance.facts, ids, cap=64)
        assert roll == expected
        assert roll[-1] == model.vocab.eos_id

    def test_eos_predicting_state_gives_single_eos(self, toy):
        corpus, model = toy
        instance = corpus.instances[0]
        from veribeam.knowledge import tokenize

        full = [model.vocab.bos_id] + model.vocab.encode(tokenize(instance.references[0]))
        roll = rollout(model, tuple(full), instance.facts, cap=64)
        assert roll == (model.vocab.eos_id,)

    def test_finished_prefix_rejected(self, toy):
        corpus, model = toy
        with pytest.raises(ValueError):
            rollout(model, (model.vocab.bos_id, model.vocab.eos_id),
                    corpus.instances[0].facts, 4)

    def test_cache_soundness(self, toy):
        corpus, model = toy
        instance = corpus.instances[0]
        cache = {}
        prefix = (model.vocab.bos_id,)
        fresh = rollout(model, prefix, instance.facts, 64, cache=cache)
        again = rollout(model, prefix, instance.facts, 64, cache=cache)
        assert fresh == again
        assert len(cache) == 1
        # a different fact list must not reuse the entry
        other = corpus.instances[1].facts
        rollout(model, prefix, other, 64, cache=cache)
        assert len(cache) == 2


class TestBeamStep:
    def test_tie_break_lexicographic(self):
        # uniform model: every expansion ties; lexicographically smallest wins
        # (bos is never expanded, so ids 1 and 2 lead)
        corpus = [(facts_for("t"), "a b")]
        model = train_toy_lm(corpus, order=2, smoothing=0.0)
        unseen = facts_for("other")  # unseen bucket -> uniform fallback
        cfg = DecodeConfig(strategy="beam", k=2, max_len=4).normalized()
        beam = [BeamCandidate(tokens=(model.vocab.bos_id,), gen_logprob=0.0, combined=0.0)]
        new_beam, _ = beam_step(beam, model, None, unseen, cfg, 1)
        assert [c.tokens for c in new_beam] == [(0, 1), (0, 2)]
        assert new_beam[0].finished  # id 1 is eos

    def test_equal_f_keeps_higher_gen_logprob(self):
        from veribeam.decoding import _candidate_sort_key

        # equal combined scores: the candidate with higher gen_logprob ranks first
        a = BeamCandidate(tokens=(0, 5), gen_logprob=-1.0, faith=0.0, combined=-1.0)
        b = BeamCandidate(tokens=(0, 3), gen_logprob=-0.5, faith=-0.0625, combined=-1.0)
        ranked = sorted([a, b], key=_candidate_sort_key)
        assert ranked[0] is b

    def test_requires_unfinished(self, toy):
        corpus, model = toy
        cfg = DecodeConfig(strategy="beam").normalized()
        done = BeamCandidate(tokens=(model.vocab.bos_id, model.vocab.eos_id),
                             gen_logprob=-1.0, combined=-1.0, finished=True)
        with pytest.raises(ValueError):
            beam_step([done], model, None, corpus.instances[0].facts, cfg, 1)

    def test_verifier_failure_names_candidate(self, toy):
        corpus, model = toy

        class Exploding(Verifier):
            def verify(self, facts, hypothesis, kind):
                raise RuntimeError("boom")

        cfg = DecodeConfig(strategy="tweak-hvm", k=2, alpha=1.0, max_len=8)
        with pytest.raises(DecodeError, match="verifier failed at step 1"):
            decode(corpus.instances[0], model, Exploding(), cfg)


class TestDecode:
    def test_greedy_reproduces_training_sentence(self, toy):
        corpus, model = toy
        for instance in corpus.instances[:5]:
            result = decode(instance, model, None, DecodeConfig(strategy="greedy", max_len=40))
            assert result.text == instance.references[0]

    def test_greedy_is_k1_alpha0_beam(self, toy):
        corpus, model = toy
        instance = corpus.instances[0]
        greedy = decode(instance, model, None, DecodeConfig(strategy="greedy", max_len=40))
        beam1 = decode(instance, model, None, DecodeConfig(strategy="beam", k=1, max_len=40))
        assert greedy.best.tokens == beam1.best.tokens

    @pytest.mark.parametrize("strategy", ["tweak-nli-b", "tweak-nli-f", "tweak-nli-bf", "tweak-hvm"])
    def test_alpha_zero_matches_beam_exactly(self, toy, strategy):
        corpus, model = toy
        for instance in corpus.instances[:4]:
            beam = decode(instance, model, None,
                          DecodeConfig(strategy="beam", k=4, max_len=40))
            tweak = decode(instance, model, None,
                           DecodeConfig(strategy=strategy, k=4, alpha=0.0, max_len=40))
            assert tweak.best.tokens == beam.best.tokens
            beam_traj = [[c.tokens for c in rec.candidates] for rec in beam.trace.steps]
            tweak_traj = [[c.tokens for c in rec.candidates] for rec in tweak.trace.steps]
            assert beam_traj == tweak_traj

    def test_beam_matches_exhaustive_argmax(self):
        # tiny vocab so the whole sequence space fits in the beam
        rng = random.Random(5)
        sentences = [" ".join(rng.choice("ab") for _ in range(rng.randint(1, 3)))
                     for _ in range(6)]
        corpus = [(facts_for(i % 2), s) for i, s in enumerate(sentences)]
        model = train_toy_lm(corpus, order=2, smoothing=0.3)
        assert len(model.vocab) == 4
        max_len = 4
        cfg = DecodeConfig(strategy="beam", k=256, prune_width=256 * 4, max_len=max_len)
        for tag in (0, 1):
            facts = facts_for(tag)
            result = decode(facts, model, None, cfg)
            best_tokens, best_score = enumerate_best(model, facts, max_len)
            assert result.best.tokens == best_tokens
            assert result.best.gen_logprob == pytest.approx(best_score, abs=1e-12)

    def test_trace_completeness(self, toy):
        # a beam the finished hypotheses can fill terminates all-finished;
        # the step count then equals the longest finished length minus one
        corpus, model = toy
        result = decode(corpus.instances[0], model, None,
                        DecodeConfig(strategy="beam", k=2, max_len=64))
        assert all(c.finished for c in result.beam)
        longest = max(len(c.tokens) for c in result.beam)
        assert len(result.trace.steps) == longest - 1

    def test_trace_positions_in_unit_interval(self, toy):
        corpus, model = toy
        build = make_adversarial_build(4, seed=2)
        model2 = train_toy_lm(build.lm_corpus, order=3)
        verifier = OracleVerifier(build.fate.registry)
        result = decode(build.corpus.instances[0], model2, verifier,
                        DecodeConfig(strategy="tweak-hvm", k=4, alpha=8.0, max_len=40))
        verdicts = list(result.trace.iter_verdicts())
        assert verdicts
        assert all(0.0 <= v.relative_position <= 1.0 for v in verdicts)

    def test_determinism_bit_identical_traces(self, toy):
        corpus, model = toy
        build = make_adversarial_build(3, seed=4)
        model2 = train_toy_lm(build.lm_corpus, order=3)
        verifier = OracleVerifier(build.fate.registry)
        cfg = DecodeConfig(strategy="tweak-hvm", k=4, alpha=8.0, max_len=40)
        runs = [decode(build.corpus.instances[0], model2, verifier, cfg) for _ in range(2)]
        a = [rec.to_dict() for rec in runs[0].trace.steps]
        b = [rec.to_dict() for rec in runs[1].trace.steps]
        assert a == b

    def test_missing_verifier_rejected(self, toy):
        corpus, model = toy
        with pytest.raises(ValueError, match="requires a verifier"):
            decode(corpus.instances[0], model, None,
                   DecodeConfig(strategy="tweak-hvm", alpha=8.0))

    def test_max_len_caps_unfinished(self, toy):
        corpus, model = toy
        result = decode(corpus.instances[0], model, None,
                        DecodeConfig(strategy="beam", k=2, max_len=2))
        assert len(result.trace.steps) <= 2
        assert all(len(c.tokens) <= 3 for c in result.beam)

    def test_finished_candidates_frozen(self, toy):
        corpus, model = toy
        result = decode(corpus.instances[0], model, None,
                        DecodeConfig(strategy="beam", k=4, max_len=40))
        # the eos-at-start candidate enters the beam early and must persist
        # with its score untouched
        early = None
        for rec in result.trace.steps:
            for cand in rec.candidates:
                if cand.finished and len(cand.tokens) == 2:
                    if early is None:
                        early = cand.gen_logprob
                    assert cand.gen_logprob == early


class TestFig1Scenario:
    """Likelihood prefers a contradicting token; verification demotes it."""

    def test_tweak_avoids_contradiction_beam_does_not(self):
        build = make_adversarial_build(1, seed=0, m_range=(1, 1))
        model = train_toy_lm(build.lm_corpus, order=3)
        instance = build.corpus.instances[0]
        registry = build.fate.registry

        beam_result = decode(instance, model, None,
                             DecodeConfig(strategy="beam", k=4, max_len=40))
        # exhaustive check that beam's winner really is the global ML argmax
        hallucinated = beam_result.text
        from veribeam.evalkit import output_is_hallucinated

        assert output_is_hallucinated(hallucinated, instance.facts, registry)

        hvm_model = train_hvm(build.fate.pairs, epochs=150)
        tweak_result = decode(instance, model, HvmVerifier(hvm_model),
                              DecodeConfig(strategy="tweak-hvm", k=4, alpha=8.0, max_len=40))
        assert not output_is_hallucinated(tweak_result.text, instance.facts, registry)
        assert tweak_result.text == instance.references[0]


class TestConfig:
    def test_defaults_mirror_paper(self):
        beam = DecodeConfig.defaults("beam")
        assert (beam.k, beam.alpha) == (5, 0.0)
        tweak = DecodeConfig.defaults("tweak-hvm")
        assert (tweak.k, tweak.alpha) == (4, 8.0)
        greedy = DecodeConfig.defaults("greedy")
        assert greedy.k == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            DecodeConfig(k=0)
        with pytest.raises(ValueError):
            DecodeConfig(alpha=-1)
        with pytest.raises(ValueError):
            DecodeConfig(k=4, prune_width=2)
        with pytest.raises(ValueError):
            DecodeConfig(rollout_cap=-1)
        with pytest.raises(ValueError):
            DecodeConfig(strategy="nope")
        with pytest.raises(ValueError):
            DecodeConfig(wt_override=1.5)

    def test_normalized_prune_width(self):
        cfg = DecodeConfig(strategy="beam", k=3).normalized()
        assert cfg.prune_width == 6

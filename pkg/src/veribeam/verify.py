"""Hypothesis verification: how well a (partial) description supports the facts.

Every verifier returns scores <= 0 on the log-probability scale so the decoder
can mix them with generator log-likelihoods in one objective. Three families:
an NLI-style adapter over a single concatenated premise, the tabular verifier
with per-triple cells, and a deterministic rule oracle for hermetic tests.
Verifiers are pure and safe for concurrent calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import wire
from .hvm import KIND_FORWARD, TabularHvm, VerificationTable
from .knowledge import FactList, tokenize
from .perturbations import PerturbationRegistry, contains_phrase, normalize_tokens, surface_form

SUPPORTED = "supported"
UNSUPPORTED = "unsupported"

_MIN_PROB = 1e-300


@dataclass(frozen=True)
class Verdict:
    """A support score, optionally broken down per triple.

    ``score`` is log-scale (<= 0); when per-triple probabilities are present
    the score is the mean of their logs and ``negative`` reflects any cell
    falling below 0.5.
    """

    score: float
    per_triple: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.score > 1e-12:
            raise ValueError(f"verdict score must be <= 0, got {self.score}")
        if self.per_triple is not None:
            probs = tuple(float(p) for p in self.per_triple)
            if not all(0.0 <= p <= 1.0 for p in probs):
                raise ValueError("per-triple values must be probabilities")
            object.__setattr__(self, "per_triple", probs)

    @classmethod
    def from_probs(cls, probs):
        probs = tuple(float(p) for p in probs)
        score = sum(math.log(max(p, _MIN_PROB)) for p in probs) / len(probs)
        return cls(score=score, per_triple=probs)

    @property
    def negative(self) -> bool:
        if self.per_triple is not None:
            return any(p < 0.5 for p in self.per_triple)
        return self.score < math.log(0.5)


class Verifier:
    """Interface: verify(facts, hypothesis text, kind) -> Verdict."""

    def verify(self, facts: FactList, hypothesis: str, kind: str) -> Verdict:
        raise NotImplementedError

    def verify_pair(self, facts: FactList, backward: str, forward: str):
        """Both hypotheses at once; single-call backends may override."""
        return (
            self.verify(facts, backward, "backward"),
            self.verify(facts, forward, "forward"),
        )


def rule_oracle_verify(registry: PerturbationRegistry, triple, hypothesis) -> str:
    """Deterministic support check against the shared perturbation dictionary.

    Unsupported iff the hypothesis contains surface material registered as a
    perturbation of this triple (any token of a registered replacement span)
    while not containing the original form. Matching is at token granularity
    so that partial overlaps with a perturbed span are caught, mirroring the
    span-overlap labeling rule of the synthesized corpora; the oracle is only
    valid on corpora built with the same registry.
    """
    records = registry.lookup(triple)
    tokens = normalize_tokens(hypothesis if isinstance(hypothesis, str) else list(hypothesis))
    if not tokens:
        return SUPPORTED
    token_set = set(tokens)
    for record in records:
        replacement_tokens = set(normalize_tokens(record.replacement_surface))
        if not replacement_tokens & token_set:
            continue
        if contains_phrase(tokens, record.original_surface):
            continue
        return UNSUPPORTED
    return SUPPORTED


class OracleVerifier(Verifier):
    """Rule-oracle-backed verifier emitting per-triple probabilities.

    Supported cells get probability ``p_support``, contradicted cells
    ``p_refute``. The refuted default is deliberately moderate (0.3, about
    -1.2 in log space) so that alpha-weighted penalties stay commensurable
    with generator log-likelihoods: a candidate whose rollout currently
    wanders into contradicted text is demoted, not annihilated, and can
    recover once its own continuation diverges from the hallucination.
    """

    def __init__(self, registry: PerturbationRegistry, p_support=0.99, p_refute=0.3):
        if not 0.0 < p_refute < p_support <= 1.0:
            raise ValueError("need 0 < p_refute < p_support <= 1")
        self.registry = registry
        self.p_support = p_support
        self.p_refute = p_refute

    def verify(self, facts, hypothesis, kind) -> Verdict:
        probs = [
            self.p_support if rule_oracle_verify(self.registry, t, hypothesis) == SUPPORTED
            else self.p_refute
            for t in facts
        ]
        return Verdict.from_probs(probs)


def render_premise(facts: FactList) -> str:
    """Natural-ish premise for NLI consumers: fields space-joined, triples
    separated by '; '. The marker linearization stays on the generator path."""
    parts = []
    for t in facts:
        parts.append(" ".join(surface_form(getattr(t, pos), pos)
                              for pos in ("subject", "relation", "object")))
    return "; ".join(parts)


class OracleEntailmentScorer:
    """Entailment scorer for hermetic tests, backed by the rule oracle.

    Fact-aware (scores facts directly instead of parsing the premise text
    back into triples). Returns the entailment probability only; the
    contradiction default is moderate for the same calibration reason as
    OracleVerifier.
    """

    def __init__(self, registry: PerturbationRegistry, p_entail=0.99, p_contradict=0.3):
        self.registry = registry
        self.p_entail = p_entail
        self.p_contradict = p_contradict

    def score_facts(self, facts: FactList, hypothesis: str) -> float:
        for t in facts:
            if rule_oracle_verify(self.registry, t, hypothesis) == UNSUPPORTED:
                return self.p_contradict
        return self.p_entail


class RemoteNliScorer:
    """Entailment scorer speaking the shared wire protocol."""

    def __init__(self, address, timeout=30.0):
        self.address = address
        self._conn = wire.Connection(address, timeout=timeout)

    def close(self):
        self._conn.close()

    def score(self, premise: str, hypothesis: str) -> float:
        response = self._conn.request(
            {"op": "nli_score", "premise": premise, "hypothesis": hypothesis}
        )
        prob = response.get("entail_prob")
        if not isinstance(prob, (int, float)) or not 0.0 <= float(prob) <= 1.0:
            raise wire.ProtocolError(f"entail_prob must be a probability, got {prob!r}")
        return float(prob)


class NliVerifier(Verifier):
    """Single-premise adapter: score = log(entailment probability).

    Neutral/contradiction mass is discarded. Accepts fact-aware scorers
    (``score_facts``) and plain premise/hypothesis scorers (``score``).
    """

    def __init__(self, scorer):
        self.scorer = scorer

    def nli_score(self, facts: FactList, hypothesis: str) -> float:
        if not hypothesis.strip():
            raise ValueError("hypothesis must be non-empty")
        if hasattr(self.scorer, "score_facts"):
            prob = self.scorer.score_facts(facts, hypothesis)
        else:
            prob = self.scorer.score(render_premise(facts), hypothesis)
        return math.log(max(float(prob), _MIN_PROB))

    def verify(self, facts, hypothesis, kind) -> Verdict:
        return Verdict(score=min(self.nli_score(facts, hypothesis), 0.0))


def nli_adapter_score(scorer, facts: FactList, hypothesis: str) -> float:
    return NliVerifier(scorer).nli_score(facts, hypothesis)


class HvmVerifier(Verifier):
    """Per-triple verifier backed by the trained tabular model.

    ``floor`` calibrates the adapter: trained cells saturate near 0 on
    separable data, and an uncalibrated log of a near-zero cell, scaled by
    alpha, would dwarf every likelihood difference in the beam. Flooring the
    verdict probabilities (the raw table is untouched) keeps the two score
    scales commensurable. Set floor=0 for raw log-probabilities.
    """

    def __init__(self, model: TabularHvm, floor=0.3):
        if not 0.0 <= floor < 1.0:
            raise ValueError("floor must lie in [0, 1)")
        self.model = model
        self.floor = floor

    def verify(self, facts, hypothesis, kind) -> Verdict:
        tokens = tokenize(hypothesis) if isinstance(hypothesis, str) else list(hypothesis)
        if not tokens:
            raise ValueError("hypothesis must be non-empty")
        probs = self.model.predict_cells(tuple(facts), tokens, kind)
        return Verdict.from_probs(np.maximum(probs, self.floor))


def hvm_verdict_score(model: TabularHvm, facts, hypothesis, kind=KIND_FORWARD) -> float:
    """Mean over triples of log P(supported), via the verifier path."""
    return HvmVerifier(model).verify(facts, hypothesis, kind).score


class RemoteHvmVerifier(Verifier):
    """Wire-protocol verifier returning the full 2D table in one round trip.

    The wire carries raw table cells; the same calibration floor as the local
    adapter is applied when forming verdicts.
    """

    def __init__(self, address, timeout=30.0, floor=0.3):
        if not 0.0 <= floor < 1.0:
            raise ValueError("floor must lie in [0, 1)")
        self.address = address
        self.floor = floor
        self._conn = wire.Connection(address, timeout=timeout)

    def close(self):
        self._conn.close()

    def _request_table(self, facts, backward, forward) -> VerificationTable:
        response = self._conn.request(
            {
                "op": "hvm_table",
                "triples": [t.as_list() for t in facts],
                "backward": backward,
                "forward": forward,
            }
        )
        rows = response.get("table")
        if not isinstance(rows, list) or len(rows) != len(facts):
            raise wire.ProtocolError("hvm_table response must have one row per triple")
        cells = []
        for row in rows:
            if (not isinstance(row, list) or len(row) != 2
                    or not all(isinstance(p, (int, float)) and 0.0 <= p <= 1.0 for p in row)):
                raise wire.ProtocolError(f"bad table row {row!r}")
            cells.append((float(row[0]), float(row[1])))
        return VerificationTable(tuple(facts), tuple(cells))

    def _verdict(self, probs) -> Verdict:
        return Verdict.from_probs([max(p, self.floor) for p in probs])

    def verify(self, facts, hypothesis, kind) -> Verdict:
        table = self._request_table(facts, hypothesis, hypothesis)
        return self._verdict(table.column(kind))

    def verify_pair(self, facts, backward, forward):
        table = self._request_table(facts, backward, forward)
        return (
            self._verdict(table.column("backward")),
            self._verdict(table.column("forward")),
        )

"""Search strategies: greedy, beam, and verification-reranked beam variants.

Candidates are scored by f = gen_logprob + alpha * f_faith, where f_faith
mixes the support scores of the backward hypothesis (tokens so far) and the
forward hypothesis (a greedy rollout), weighted by w_t. Expansion is
two-staged: all k*|V| continuations are pre-pruned to the top ``prune_width``
by generator likelihood before the (expensive) verification rescoring; setting
prune_width to k*|V| recovers the exhaustive ranking. All tie-breaking is
total and deterministic, which is what the equivalence and oracle tests rely
on. Per-candidate rollouts and verifier calls are independent and could run
in parallel; results are merged in candidate order so scheduling can never
change the output. The step loop itself is sequential.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .knowledge import FactList, linearize
from .verify import Verifier

STRATEGIES = ("greedy", "beam", "tweak-nli-b", "tweak-nli-f", "tweak-nli-bf", "tweak-hvm")

# weight scheme, and what the forward hypothesis is made of
STRATEGY_FORMS = {
    "tweak-nli-b": ("backward", "concat"),
    "tweak-nli-f": ("forward", "concat"),
    "tweak-nli-bf": ("dynamic", "concat"),
    "tweak-hvm": ("dynamic", "rollout"),
}

WEIGHT_SCHEMES = ("backward", "forward", "dynamic")


class DecodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    """Search hyperparameters. ``prune_width`` defaults to 2k; ``rollout_cap``
    defaults to whatever remains until ``max_len``."""

    strategy: str = "beam"
    k: int = 5
    alpha: float = 0.0
    prune_width: int | None = None
    rollout_cap: int | None = None
    max_len: int = 64
    seed: int = 0
    wt_override: float | None = None

    PAPER_TWEAK_K = 4
    PAPER_TWEAK_ALPHA = 8.0
    PAPER_BEAM_K = 5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.k < 1:
            raise ValueError("beam size k must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.prune_width is not None and self.prune_width < self.k:
            raise ValueError("prune_width must be >= k")
        if self.rollout_cap is not None and self.rollout_cap < 0:
            raise ValueError("rollout_cap must be >= 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.wt_override is not None and not 0.0 <= self.wt_override <= 1.0:
            raise ValueError("wt_override must lie in [0, 1]")

    @classmethod
    def defaults(cls, strategy, **overrides):
        """Paper-default shapes: beam k=5, TWEAK k=4 alpha=8, greedy k=1."""
        base = {"strategy": strategy}
        if strategy == "greedy":
            base.update(k=1, alpha=0.0)
        elif strategy == "beam":
            base.update(k=cls.PAPER_BEAM_K, alpha=0.0)
        else:
            base.update(k=cls.PAPER_TWEAK_K, alpha=cls.PAPER_TWEAK_ALPHA)
        base.update(overrides)
        return cls(**base)

    def normalized(self):
        cfg = self
        if cfg.strategy == "greedy":
            cfg = replace(cfg, k=1, alpha=0.0)
        if cfg.strategy == "beam":
            cfg = replace(cfg, alpha=0.0)
        if cfg.prune_width is None:
            cfg = replace(cfg, prune_width=2 * cfg.k)
        return cfg

    @property
    def verifying(self):
        return self.strategy in STRATEGY_FORMS and self.alpha > 0.0

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "k": self.k,
            "alpha": self.alpha,
            "prune_width": self.prune_width,
            "rollout_cap": self.rollout_cap,
            "max_len": self.max_len,
            "seed": self.seed,
            "wt_override": self.wt_override,
        }


@dataclass(frozen=True)
class BeamCandidate:
    """A partial sequence with its running scores.

    ``combined`` equals gen_logprob + alpha * faith whenever faith is present;
    finished candidates end with eos and keep their final scores frozen.
    """

    tokens: tuple[int, ...]
    gen_logprob: float
    rollout: tuple[int, ...] | None = None
    faith: float | None = None
    combined: float = 0.0
    finished: bool = False


@dataclass
class VerdictRecord:
    step: int
    kind: str
    score: float
    negative: bool
    relative_position: float | None = None

    def to_dict(self):
        return {
            "step": self.step,
            "kind": self.kind,
            "score": self.score,
            "negative": self.negative,
            "relative_position": self.relative_position,
        }


@dataclass
class CandidateRecord:
    tokens: tuple[int, ...]
    text: str
    gen_logprob: float
    w_t: float | None
    backward_score: float | None
    forward_score: float | None
    faith: float | None
    combined: float
    finished: bool

    def to_dict(self):
        return {
            "tokens": list(self.tokens),
            "text": self.text,
            "gen_logprob": self.gen_logprob,
            "w_t": self.w_t,
            "backward_score": self.backward_score,
            "forward_score": self.forward_score,
            "faith": self.faith,
            "combined": self.combined,
            "finished": self.finished,
        }


@dataclass
class StepRecord:
    step: int
    candidates: list
    verdicts: list

    def to_dict(self):
        return {
            "step": self.step,
            "candidates": [c.to_dict() for c in self.candidates],
            "verdicts": [v.to_dict() for v in self.verdicts],
        }


@dataclass
class DecodeTrace:
    """One record per decoding step, with verdict positions normalized to
    [0, 1] over the run once it finishes."""

    steps: list = field(default_factory=list)

    def finalize(self):
        total = len(self.steps)
        for record in self.steps:
            for verdict in record.verdicts:
                verdict.relative_position = verdict.step / total if total else 0.0
        return self

    def iter_verdicts(self):
        for record in self.steps:
            yield from record.verdicts

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.steps:
                fh.write(json.dumps(record.to_dict(), ensure_ascii=False))
                fh.write("\n")


def load_trace_jsonl(path) -> list[dict]:
    """Step records as plain dicts, schema-compatible with DecodeTrace."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def faithfulness_weight(scheme: str, t: int, forward_len: int) -> float:
    """Backward weight w_t: 1 for backward-only, 0 for forward-only, and the
    relative backward length t/(t+forward_len) for the dynamic schemes.
    A zero-length forward hypothesis degenerates to pure backward."""
    if scheme not in WEIGHT_SCHEMES:
        raise ValueError(f"unknown weight scheme {scheme!r}")
    if forward_len < 0:
        raise ValueError("forward_len must be >= 0")
    if scheme == "backward":
        return 1.0
    if scheme == "forward":
        return 0.0
    if t < 1:
        raise ValueError("dynamic weighting requires t >= 1")
    if forward_len == 0:
        return 1.0
    return t / (t + forward_len)


def weight_scheme_for(strategy: str) -> str:
    return STRATEGY_FORMS[strategy][0]


def rollout(lm, prefix, facts, cap, cache=None, facts_key=None):
    """Greedy continuation from step t+1 until eos or the cap; returns only
    the new tokens. Cached per (candidate tokens, facts) key. The bos token
    is a decoder-start artifact and is never generated."""
    prefix = tuple(prefix)
    if prefix and prefix[-1] == lm.vocab.eos_id:
        raise ValueError("cannot roll out a finished prefix")
    if cap < 0:
        raise ValueError("rollout cap must be >= 0")
    if cache is not None:
        if facts_key is None:
            facts_key = linearize(facts)
        key = (facts_key, prefix)
        hit = cache.get(key)
        if hit is not None:
            return hit
    out = []
    current = list(prefix)
    for _ in range(cap):
        vec = np.array(lm.next_logprobs(current, facts))
        vec[lm.vocab.bos_id] = -np.inf
        tok = int(np.argmax(vec))
        out.append(tok)
        current.append(tok)
        if tok == lm.vocab.eos_id:
            break
    result = tuple(out)
    if cache is not None:
        cache[key] = result
    return result


def combined_score(gen_logprob: float, f_faith: float, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return gen_logprob + alpha * f_faith


def faith_score(verifier: Verifier, facts, backward_tokens, forward_tokens,
                strategy, vocab, wt_override=None, step=None):
    """Weighted backward/forward support score for one candidate.

    Returns (f_faith, w_t, backward_score, forward_score, verdict_records).
    The NLI schemes verify the forward hypothesis as the full concatenation
    backward+rollout; the table-verifier scheme verifies the rollout alone.
    Whichever side carries exactly zero weight is never verified. Empty
    hypothesis texts never reach the verifier: a candidate whose surface text
    is empty is vacuously supported, and an empty forward side shifts all
    weight backward.
    """
    if strategy not in STRATEGY_FORMS:
        raise ValueError(f"strategy {strategy!r} has no faithfulness form")
    scheme, forward_form = STRATEGY_FORMS[strategy]
    backward_tokens = tuple(backward_tokens)
    forward_tokens = tuple(forward_tokens)
    t = len(backward_tokens) - 1
    backward_text = vocab.text(backward_tokens)
    if forward_form == "concat":
        forward_text = vocab.text(backward_tokens + forward_tokens)
    else:
        forward_text = vocab.text(forward_tokens)

    w_t = wt_override if wt_override is not None else faithfulness_weight(scheme, t, len(forward_tokens))
    if not forward_text:
        w_t = 1.0
    if not backward_text:
        # pure <s></s> candidate: nothing claimed, nothing to verify
        return 0.0, w_t, None, None, []

    step = step if step is not None else t
    records = []
    backward_score = forward_score = None
    if w_t == 1.0:
        verdict = verifier.verify(facts, backward_text, "backward")
        backward_score = verdict.score
        records.append(VerdictRecord(step, "backward", verdict.score, verdict.negative))
        f_faith = backward_score
    elif w_t == 0.0:
        verdict = verifier.verify(facts, forward_text, "forward")
        forward_score = verdict.score
        records.append(VerdictRecord(step, "forward", verdict.score, verdict.negative))
        f_faith = forward_score
    else:
        vb, vf = verifier.verify_pair(facts, backward_text, forward_text)
        backward_score, forward_score = vb.score, vf.score
        records.append(VerdictRecord(step, "backward", vb.score, vb.negative))
        records.append(VerdictRecord(step, "forward", vf.score, vf.negative))
        f_faith = w_t * backward_score + (1.0 - w_t) * forward_score
    return f_faith, w_t, backward_score, forward_score, records


@dataclass
class _Expansion:
    tokens: tuple[int, ...]
    gen: float


def _candidate_sort_key(candidate: BeamCandidate):
    return (-candidate.combined, -candidate.gen_logprob, candidate.tokens)


def beam_step(beam, lm, verifier, facts, config: DecodeConfig, step,
              rollout_cache=None, facts_key=None):
    """Expand, pre-prune by likelihood, verification-rescore, select top k."""
    cfg = config
    finished = [c for c in beam if c.finished]
    open_candidates = [c for c in beam if not c.finished]
    if not beam or not open_candidates:
        raise ValueError("beam_step requires at least one unfinished candidate")
    vocab_size = len(lm.vocab)
    eos_id = lm.vocab.eos_id

    try:
        logprob_rows = [lm.next_logprobs(list(c.tokens), facts) for c in open_candidates]
    except Exception as err:
        raise DecodeError(f"language model failed at step {step}: {err}") from err
    scores = np.concatenate(
        [c.gen_logprob + row for c, row in zip(open_candidates, logprob_rows)]
    )
    scores[lm.vocab.bos_id::vocab_size] = -np.inf  # never generate the start token
    total = scores.size
    m_pre = min(cfg.prune_width, total)
    if total > m_pre:
        threshold = np.partition(scores, total - m_pre)[total - m_pre]
        above = np.nonzero(scores > threshold)[0]
        tied = np.nonzero(scores == threshold)[0]
        needed = m_pre - above.size
        if 0 < needed < tied.size:
            # boundary ties resolve lexicographically; candidates share a
            # length, so per parent only the `needed` smallest token ids can
            # win, which keeps the tie group small even for huge vocabularies
            blocks = []
            for parent_idx in range(len(open_candidates)):
                lo, hi = parent_idx * vocab_size, (parent_idx + 1) * vocab_size
                block = tied[(tied >= lo) & (tied < hi)][:needed]
                blocks.append(block)
            tied = np.concatenate(blocks)
        keep = np.concatenate([above, tied]) if needed > 0 else above
    else:
        keep = np.arange(total)
    expansions = []
    for flat in keep:
        if scores[flat] == -np.inf:
            continue
        parent_idx, token = divmod(int(flat), vocab_size)
        parent = open_candidates[parent_idx]
        expansions.append(_Expansion(parent.tokens + (token,), float(scores[flat])))
    expansions.sort(key=lambda e: (-e.gen, e.tokens))
    expansions = expansions[:m_pre]

    verdicts = []
    scored = []
    details = {}
    for expansion in expansions:
        is_finished = expansion.tokens[-1] == eos_id
        if not cfg.verifying:
            scored.append(BeamCandidate(expansion.tokens, expansion.gen, None, None,
                                        expansion.gen, is_finished))
            continue
        t = len(expansion.tokens) - 1
        if is_finished:
            roll = ()
        else:
            cap = cfg.rollout_cap if cfg.rollout_cap is not None else max(cfg.max_len - t, 0)
            roll = rollout(lm, expansion.tokens, facts, cap,
                           cache=rollout_cache, facts_key=facts_key)
        try:
            f_faith, w_t, b_score, f_score, records = faith_score(
                verifier, facts, expansion.tokens, roll, cfg.strategy,
                lm.vocab, wt_override=cfg.wt_override, step=step)
        except Exception as err:
            raise DecodeError(
                f"verifier failed at step {step} on candidate "
                f"{lm.vocab.text(expansion.tokens)!r}: {err}"
            ) from err
        verdicts.extend(records)
        details[expansion.tokens] = (w_t, b_score, f_score)
        scored.append(BeamCandidate(
            expansion.tokens, expansion.gen, roll, f_faith,
            combined_score(expansion.gen, f_faith, cfg.alpha), is_finished))

    pool = scored + finished
    if not pool:
        raise DecodeError(f"no viable expansions at step {step}")
    pool.sort(key=_candidate_sort_key)
    new_beam = pool[: cfg.k]
    record = StepRecord(
        step=step,
        candidates=[
            CandidateRecord(
                tokens=c.tokens,
                text=lm.vocab.text(c.tokens),
                gen_logprob=c.gen_logprob,
                w_t=details.get(c.tokens, (None, None, None))[0],
                backward_score=details.get(c.tokens, (None, None, None))[1],
                forward_score=details.get(c.tokens, (None, None, None))[2],
                faith=c.faith,
                combined=c.combined,
                finished=c.finished,
            )
            for c in new_beam
        ],
        verdicts=verdicts,
    )
    return new_beam, record


@dataclass
class DecodeResult:
    best: BeamCandidate
    beam: list
    trace: DecodeTrace
    text: str


def decode(instance, lm, verifier, config: DecodeConfig) -> DecodeResult:
    """Run the configured search on one instance.

    Greedy is the k=1, alpha=0 special case; beam is alpha=0. Verification
    strategies recompute faith scores every step (they depend on t), reuse
    rollouts through an exact-key cache, and freeze finished candidates.
    """
    cfg = config.normalized()
    facts = instance.facts if hasattr(instance, "facts") else instance
    if not isinstance(facts, FactList):
        raise TypeError("decode expects a K2TInstance or FactList")
    if cfg.verifying and verifier is None:
        raise ValueError(f"strategy {cfg.strategy!r} with alpha > 0 requires a verifier")
    facts_key = linearize(facts)
    rollout_cache: dict = {}
    beam = [BeamCandidate(tokens=(lm.vocab.bos_id,), gen_logprob=0.0, combined=0.0)]
    trace = DecodeTrace()
    for step in range(1, cfg.max_len + 1):
        if all(c.finished for c in beam):
            break
        beam, record = beam_step(beam, lm, verifier, facts, cfg, step,
                                 rollout_cache=rollout_cache, facts_key=facts_key)
        trace.steps.append(record)
    trace.finalize()
    best = beam[0]
    return DecodeResult(best=best, beam=list(beam), trace=trace, text=lm.vocab.text(best.tokens))

"""Autoregressive language-model interface and a trainable toy n-gram backend.

Every model exposes ``next_logprobs(prefix, facts)`` returning a full-vocabulary
log distribution. Fact conditioning works by hashing the linearized fact string
into a bucket, so the same interface serves the hermetic toy model and a remote
bridge wrapping a real generator. Implementations must be pure: identical
arguments always return identical vectors, which is what makes decode runs
bit-reproducible. All models are safe for concurrent read-only queries.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import wire
from .knowledge import FactList, linearize, tokenize

BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"

NORMALIZATION_TOL = 1e-6
REMOTE_NORMALIZATION_TOL = 1e-4


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token set with designated bos/eos entries."""

    tokens: tuple[str, ...]
    bos_id: int
    eos_id: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        for name in ("bos_id", "eos_id"):
            idx = getattr(self, name)
            if not 0 <= idx < len(tokens):
                raise ValueError(f"{name}={idx} out of range for vocabulary of {len(tokens)}")
        if self.bos_id == self.eos_id:
            raise ValueError("bos and eos must be distinct tokens")
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(tokens)})

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, token_iter, bos=BOS_TOKEN, eos=EOS_TOKEN):
        body = sorted(set(token_iter) - {bos, eos})
        return cls(tuple([bos, eos] + body), bos_id=0, eos_id=1)

    def encode(self, tokens) -> list[int]:
        ids = []
        for tok in tokens:
            if tok not in self._index:
                raise KeyError(f"token {tok!r} not in vocabulary")
            ids.append(self._index[tok])
        return ids

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def text(self, ids) -> str:
        """Detokenize, dropping bos/eos."""
        specials = {self.bos_id, self.eos_id}
        return " ".join(self.tokens[i] for i in ids if i not in specials)

    @property
    def checksum(self) -> str:
        return wire.vocab_checksum(self.tokens, self.bos_id, self.eos_id)

    def to_dict(self):
        return {"tokens": list(self.tokens), "bos_id": self.bos_id, "eos_id": self.eos_id}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["tokens"]), d["bos_id"], d["eos_id"])


def validate_logprobs(values, vocab_size, tol=NORMALIZATION_TOL):
    """Check the log-distribution contract: full size, values <= 0, exp-sum 1."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.shape != (vocab_size,):
        raise ValueError(f"logprob vector has shape {vec.shape}, expected ({vocab_size},)")
    if np.any(np.isnan(vec)) or np.any(vec > 0.0):
        raise ValueError("logprob vector must be <= 0 everywhere and NaN-free")
    total = float(np.exp(vec).sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"logprob vector exp-sum {total} deviates from 1 beyond {tol}")
    return vec


def bucket_for_facts(facts: FactList, n_buckets: int) -> int:
    digest = hashlib.sha256(linearize(facts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % n_buckets


def bucket_for_linearized(facts_linearized: str, n_buckets: int) -> int:
    digest = hashlib.sha256(facts_linearized.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % n_buckets


class LanguageModel:
    """Interface: p(next token | prefix token ids, facts)."""

    vocab: Vocabulary

    def next_logprobs(self, prefix, facts) -> np.ndarray:
        raise NotImplementedError

    def _check_prefix(self, prefix):
        if not prefix or prefix[0] != self.vocab.bos_id:
            raise ValueError("prefix must begin with bos")
        for i in prefix:
            if not 0 <= i < len(self.vocab):
                raise ValueError(f"token id {i} out of range")


def _eos_onehot(vocab_size, eos_id):
    vec = np.full(vocab_size, -np.inf)
    vec[eos_id] = 0.0
    vec.setflags(write=False)
    return vec


class ToyNgramLM(BaseEstimator, LanguageModel):
    """Count-based n-gram model conditioned on a hash bucket of the facts.

    ``fit`` consumes (facts, description) pairs; conditional distributions use
    add-constant smoothing. With smoothing 0 an unseen context falls back to
    the uniform distribution. EOS is absorbing.
    """

    def __init__(self, order=3, smoothing=1e-4, n_buckets=1 << 20):
        self.order = order
        self.smoothing = smoothing
        self.n_buckets = n_buckets

    _CACHE_CAP = 100_000  # distribution vectors are pure functions of (bucket, ctx)

    def fit(self, corpus):
        if not corpus:
            raise ValueError("training corpus is empty")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.smoothing < 0:
            raise ValueError("smoothing must be >= 0")
        tokens = set()
        for _, description in corpus:
            tokens.update(tokenize(description))
        self.vocab_ = Vocabulary.build(tokens)
        counts: dict[tuple, dict[int, float]] = {}
        for facts, description in corpus:
            bucket = bucket_for_facts(facts, self.n_buckets)
            ids = [self.vocab_.bos_id] + self.vocab_.encode(tokenize(description)) + [self.vocab_.eos_id]
            for t in range(1, len(ids)):
                ctx = self._context(ids[:t])
                slot = counts.setdefault((bucket, ctx), {})
                slot[ids[t]] = slot.get(ids[t], 0.0) + 1.0
        self.counts_ = counts
        return self

    @property
    def vocab(self):
        self._require_fitted()
        return self.vocab_

    def _require_fitted(self):
        if not hasattr(self, "counts_"):
            raise NotFittedError("ToyNgramLM must be fitted or loaded before use")

    def _context(self, prefix):
        if self.order == 1:
            return ()
        return tuple(prefix[-(self.order - 1):])

    def next_logprobs(self, prefix, facts) -> np.ndarray:
        self._require_fitted()
        self._check_prefix(prefix)
        if prefix[-1] == self.vocab_.eos_id:
            return self._eos_vector()
        bucket = bucket_for_facts(facts, self.n_buckets)
        return self._logprobs_for(bucket, self._context(list(prefix)))

    def _eos_vector(self):
        vec = getattr(self, "_eos_vec", None)
        if vec is None:
            vec = self._eos_vec = _eos_onehot(len(self.vocab_), self.vocab_.eos_id)
        return vec

    def logprobs_for_linearized(self, prefix, facts_linearized: str) -> np.ndarray:
        """Same distribution keyed by an already-linearized fact string."""
        self._require_fitted()
        self._check_prefix(prefix)
        if prefix[-1] == self.vocab_.eos_id:
            return self._eos_vector()
        bucket = bucket_for_linearized(facts_linearized, self.n_buckets)
        return self._logprobs_for(bucket, self._context(list(prefix)))

    def _logprobs_for(self, bucket, ctx):
        # returned vectors are read-only and shared; callers copy before mutating
        cache = getattr(self, "_vector_cache", None)
        if cache is None:
            cache = self._vector_cache = {}
        key = (bucket, ctx)
        cached = cache.get(key)
        if cached is not None:
            return cached
        vocab_size = len(self.vocab_)
        slot = self.counts_.get(key)
        gamma = float(self.smoothing)
        counts = np.zeros(vocab_size)
        if slot:
            for tok, c in slot.items():
                counts[tok] = c
        total = counts.sum()
        if total == 0.0 and gamma == 0.0:
            vec = np.full(vocab_size, -np.log(vocab_size))
        else:
            probs = (counts + gamma) / (total + gamma * vocab_size)
            with np.errstate(divide="ignore"):
                vec = np.log(probs)
        vec.setflags(write=False)
        if len(cache) < self._CACHE_CAP:
            cache[key] = vec
        return vec

    def to_file(self, path):
        self._require_fitted()
        entries = []
        for (bucket, ctx), slot in sorted(self.counts_.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            entries.append([bucket, list(ctx), sorted([t, c] for t, c in slot.items())])
        data = {
            "format": "toy-lm/v1",
            "order": self.order,
            "smoothing": self.smoothing,
            "n_buckets": self.n_buckets,
            "vocab": self.vocab_.to_dict(),
            "counts": entries,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, ensure_ascii=False)
            fh.write("\n")

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("format") != "toy-lm/v1":
            raise ValueError(f"unsupported toy LM format in {path}")
        model = cls(order=data["order"], smoothing=data["smoothing"], n_buckets=data["n_buckets"])
        model.vocab_ = Vocabulary.from_dict(data["vocab"])
        model.counts_ = {
            (bucket, tuple(ctx)): {int(t): float(c) for t, c in slot}
            for bucket, ctx, slot in data["counts"]
        }
        return model


class RemoteLM(LanguageModel):
    """Client for a bridge server speaking the shared wire protocol.

    Responses are validated (size, normalization within 1e-4) and then
    renormalized exactly, so downstream code sees the same invariant the toy
    model guarantees. Transport failures and protocol violations raise
    distinct exception types. One connection handles requests serially;
    use one client per thread.
    """

    def __init__(self, address, vocab: Vocabulary, timeout=30.0):
        self.address = address
        self.vocab = vocab
        self._conn = wire.Connection(address, timeout=timeout)

    def close(self):
        self._conn.close()

    def next_logprobs(self, prefix, facts) -> np.ndarray:
        self._check_prefix(prefix)
        response = self._conn.request(
            {
                "op": "next_logprobs",
                "prefix": list(prefix),
                "facts_linearized": linearize(facts),
                "vocab_checksum": self.vocab.checksum,
            }
        )
        values = wire.expect_number_list(response, "logprobs", length=len(self.vocab))
        vec = np.asarray(values, dtype=np.float64)
        total = float(np.exp(vec).sum())
        if not np.isfinite(total) or abs(total - 1.0) > REMOTE_NORMALIZATION_TOL:
            raise wire.ProtocolError(
                f"next_logprobs exp-sum {total} deviates from 1 beyond {REMOTE_NORMALIZATION_TOL}"
            )
        vec = vec - np.log(total)
        return np.minimum(vec, 0.0)


def next_logprobs(model: LanguageModel, prefix, facts) -> np.ndarray:
    """Module-level convenience mirroring the interface contract."""
    return model.next_logprobs(prefix, facts)


def sequence_logprob(model: LanguageModel, tokens, facts) -> float:
    """Sum of per-step log-probabilities for a bos...eos sequence."""
    if not tokens or tokens[0] != model.vocab.bos_id:
        raise ValueError("sequence must begin with bos")
    if tokens[-1] != model.vocab.eos_id:
        raise ValueError("sequence must end with eos")
    return prefix_logprob(model, tokens, facts)


def prefix_logprob(model: LanguageModel, tokens, facts) -> float:
    """Sum of per-step log-probabilities for any bos-led prefix."""
    total = 0.0
    for t in range(1, len(tokens)):
        vec = model.next_logprobs(list(tokens[:t]), facts)
        total += float(vec[tokens[t]])
    return total


def train_toy_lm(corpus, order=3, smoothing=1e-4, n_buckets=1 << 20) -> ToyNgramLM:
    return ToyNgramLM(order=order, smoothing=smoothing, n_buckets=n_buckets).fit(corpus)


def load_vocabulary(path) -> Vocabulary:
    """Read a vocabulary from either a vocab JSON or a toy-lm file."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if "vocab" in data:
        data = data["vocab"]
    return Vocabulary.from_dict(data)


def write_lm_corpus(pairs, path):
    """(facts, description) pairs as JSONL; repeats encode frequency bias."""
    with open(path, "w", encoding="utf-8") as fh:
        for facts, text in pairs:
            fh.write(json.dumps(
                {"facts": [t.as_list() for t in facts], "text": text}, ensure_ascii=False))
            fh.write("\n")


def read_lm_corpus(path):
    from .knowledge import FactList

    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            pairs.append((FactList.from_lists(record["facts"]), record["text"]))
    return pairs

"""Shared perturbation bookkeeping: surface forms, containment, and the registry.

The registry is written while synthesizing perturbed corpora and read back by
the rule oracle, so the two always agree on which surface forms count as
contradictions of which triple.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from functools import lru_cache

from .knowledge import FactTriple, tokenize

POSITIONS = ("subject", "relation", "object")

_EDGE_PUNCT = string.punctuation


def surface_form(value: str, position: str) -> str:
    """Render a raw field value the way descriptions spell it.

    Relations use underscores as word separators (``largest_city`` reads
    "largest city"); entities are kept verbatim.
    """
    if position == "relation":
        return value.replace("_", " ")
    return value


def normalize_tokens(text_or_tokens) -> list[str]:
    """Tokens with edge punctuation stripped; empty tokens dropped."""
    tokens = text_or_tokens if isinstance(text_or_tokens, list) else tokenize(text_or_tokens)
    out = []
    for tok in tokens:
        tok = tok.strip(_EDGE_PUNCT)
        if tok:
            out.append(tok)
    return out


@lru_cache(maxsize=65536)
def _phrase_tokens(phrase: str) -> tuple[str, ...]:
    return tuple(normalize_tokens(phrase))


def contains_phrase(tokens: list[str], phrase: str) -> bool:
    """True if the phrase's tokens appear contiguously in ``tokens``."""
    needle = list(_phrase_tokens(phrase))
    if not needle:
        return False
    n = len(needle)
    return any(tokens[i : i + n] == needle for i in range(len(tokens) - n + 1))


def overlap_rate(phrase: str, tokens: list[str]) -> float:
    """Fraction of the phrase's distinct tokens present in ``tokens``."""
    needle = set(_phrase_tokens(phrase))
    if not needle:
        return 0.0
    have = set(tokens)
    return len(needle & have) / len(needle)


def _triple_key(triple: FactTriple) -> str:
    return "\t".join(triple.fields)


@dataclass(frozen=True)
class PerturbationRecord:
    """One recorded swap: which field was replaced, and both surface forms."""

    position: str
    original: str
    replacement: str

    @property
    def original_surface(self):
        return surface_form(self.original, self.position)

    @property
    def replacement_surface(self):
        return surface_form(self.replacement, self.position)


class UnregisteredTripleError(KeyError):
    """The rule oracle only knows triples that went through synthesis."""


class PerturbationRegistry:
    """Maps each known triple to the perturbations applied to it (possibly none)."""

    def __init__(self):
        self._records: dict[str, list[PerturbationRecord]] = {}

    def __len__(self):
        return len(self._records)

    def register_clean(self, triple: FactTriple):
        self._records.setdefault(_triple_key(triple), [])

    def register(self, triple: FactTriple, position: str, replacement: str):
        if position not in POSITIONS:
            raise ValueError(f"unknown position {position!r}")
        original = getattr(triple, position)
        record = PerturbationRecord(position, original, replacement)
        records = self._records.setdefault(_triple_key(triple), [])
        if record not in records:
            records.append(record)
        return record

    def lookup(self, triple: FactTriple) -> list[PerturbationRecord]:
        key = _triple_key(triple)
        if key not in self._records:
            raise UnregisteredTripleError(
                f"triple {triple.fields!r} was never registered; "
                "the rule oracle is only valid on synthesized corpora"
            )
        return list(self._records[key])

    def known(self, triple: FactTriple) -> bool:
        return _triple_key(triple) in self._records

    def save(self, path):
        data = {
            "format": "perturbation-registry/v1",
            "triples": [
                {
                    "triple": key.split("\t"),
                    "perturbations": [
                        {"position": r.position, "original": r.original, "replacement": r.replacement}
                        for r in records
                    ],
                }
                for key, records in sorted(self._records.items())
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, ensure_ascii=False, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("format") != "perturbation-registry/v1":
            raise ValueError(f"unsupported registry format in {path}")
        registry = cls()
        for entry in data["triples"]:
            key = "\t".join(entry["triple"])
            registry._records[key] = [
                PerturbationRecord(p["position"], p["original"], p["replacement"])
                for p in entry["perturbations"]
            ]
        return registry

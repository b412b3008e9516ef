"""Fact-triple data model, linearization, and dataset IO for WebNLG-shaped corpora.

Tokenization is whitespace-based throughout the engine so that token
boundaries are unambiguous for label alignment and search oracles.
All types here are immutable after construction and safe to share.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

MARKER_TOKENS = ("<H>", "<R>", "<T>")


class SchemaError(ValueError):
    """A dataset record violates the expected schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization used everywhere in the engine."""
    return text.split()


def detokenize(tokens) -> str:
    return " ".join(tokens)


def _check_field(name, value, line=None):
    value = value.strip()
    if not value:
        raise SchemaError(f"triple field {name!r} is empty", line=line)
    return value


@dataclass(frozen=True)
class FactTriple:
    """One input fact: a relation holding between a subject and an object."""

    subject: str
    relation: str
    object: str

    def __post_init__(self):
        for name in ("subject", "relation", "object"):
            object.__setattr__(self, name, _check_field(name, getattr(self, name)))

    def as_list(self):
        return [self.subject, self.relation, self.object]

    @property
    def fields(self):
        return (self.subject, self.relation, self.object)


@dataclass(frozen=True)
class FactList:
    """Ordered, non-empty list of fact triples; order is meaningful."""

    triples: tuple[FactTriple, ...]

    def __post_init__(self):
        triples = tuple(self.triples)
        if not triples:
            raise SchemaError("fact list must contain at least one triple")
        object.__setattr__(self, "triples", triples)

    def __len__(self):
        return len(self.triples)

    def __iter__(self):
        return iter(self.triples)

    def __getitem__(self, i):
        return self.triples[i]

    @classmethod
    def from_lists(cls, rows, line=None):
        triples = []
        for row in rows:
            if len(row) != 3:
                raise SchemaError(f"triple must have 3 fields, got {len(row)}", line=line)
            triples.append(FactTriple(*row))
        return cls(tuple(triples))


@dataclass(frozen=True)
class K2TInstance:
    """Input facts paired with zero or more reference descriptions."""

    facts: FactList
    references: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(self.references))


def linearize(facts: FactList) -> str:
    """Serialize triples into the ``<H> subj <R> rel <T> obj`` marker string.

    Deterministic, order-preserving, and injective as long as no field
    contains a marker token (enforced at parse time).
    """
    parts = []
    for t in facts:
        parts.append(f"<H> {t.subject} <R> {t.relation} <T> {t.object}")
    return " ".join(parts)


def _reject_markers(triple: FactTriple, line=None):
    for name, value in zip(("subject", "relation", "object"), triple.fields):
        for marker in MARKER_TOKENS:
            if marker in value:
                raise SchemaError(
                    f"field {name!r} contains reserved marker token {marker!r}", line=line
                )


def instance_to_record(instance: K2TInstance) -> dict:
    return {
        "facts": [t.as_list() for t in instance.facts],
        "references": list(instance.references),
    }


def record_to_instance(record: dict, line=None) -> K2TInstance:
    if "facts" not in record:
        raise SchemaError("record missing 'facts' field", line=line)
    rows = record["facts"]
    if not isinstance(rows, list) or not rows:
        raise SchemaError("'facts' must be a non-empty list of [subject, relation, object]", line=line)
    triples = []
    for i, row in enumerate(rows):
        if isinstance(row, dict):
            for key in ("subject", "relation", "object"):
                if key not in row:
                    raise SchemaError(f"facts[{i}] missing {key!r} field", line=line)
            row = [row["subject"], row["relation"], row["object"]]
        if not isinstance(row, list) or len(row) != 3:
            raise SchemaError(f"facts[{i}] must have exactly 3 fields", line=line)
        if not all(isinstance(f, str) for f in row):
            raise SchemaError(f"facts[{i}] fields must be strings", line=line)
        try:
            triple = FactTriple(*row)
        except SchemaError as err:
            raise SchemaError(f"facts[{i}]: {err}", line=line) from None
        _reject_markers(triple, line=line)
        triples.append(triple)
    references = record.get("references", [])
    if not isinstance(references, list) or not all(isinstance(r, str) for r in references):
        raise SchemaError("'references' must be a list of strings", line=line)
    return K2TInstance(FactList(tuple(triples)), tuple(references))


def _parse_tsv_line(text, line):
    fields = text.split("\t")
    triples = []
    i = 0
    while i < len(fields):
        parts = fields[i].split("|")
        if len(parts) != 3:
            break
        try:
            triple = FactTriple(*parts)
        except SchemaError as err:
            raise SchemaError(str(err), line=line) from None
        _reject_markers(triple, line=line)
        triples.append(triple)
        i += 1
    if not triples:
        raise SchemaError("no leading subj|rel|obj triple group found", line=line)
    references = tuple(f for f in fields[i:] if f.strip())
    return K2TInstance(FactList(tuple(triples)), references)


def parse_dataset(path, format="jsonl") -> list[K2TInstance]:
    """Parse a corpus file; malformed records are reported with line numbers."""
    if format not in ("jsonl", "tsv"):
        raise ValueError(f"unknown dataset format {format!r}")
    instances = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            if format == "jsonl":
                try:
                    record = json.loads(raw)
                except json.JSONDecodeError as err:
                    raise SchemaError(f"invalid JSON: {err.msg}", line=line_no) from None
                instances.append(record_to_instance(record, line=line_no))
            else:
                instances.append(_parse_tsv_line(raw, line_no))
    return instances


def write_dataset(instances, path):
    """Write instances as canonical JSONL, one record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(json.dumps(instance_to_record(instance), ensure_ascii=False))
            fh.write("\n")

"""Synthesis of fact-aligned entailment tuples and labeled hypothesis pairs.

Each synthesized instance pairs original triples with a singly-perturbed copy
and two descriptions rendered from the same templates, differing only inside
a tagged span. Splitting a description at a decoding position yields a
backward/forward hypothesis pair whose per-triple support labels follow from
span overlap, giving exact, oracle-checkable training data for the tabular
verifier. Synthesis is embarrassingly parallel across records; output order
follows input order.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass

from .knowledge import FactList, FactTriple, tokenize
from .perturbations import POSITIONS, PerturbationRegistry, surface_form

PLACEHOLDER_RE = re.compile(r"\{(subject|relation|object)\}")
OPEN_TAG_RE = re.compile(r"^<S(\d+)>$")
CLOSE_TAG_RE = re.compile(r"^</S(\d+)>$")


class TemplateError(ValueError):
    pass


class CoverageError(ValueError):
    """Synthesis inputs do not cover the corpus; lists every gap found."""

    def __init__(self, gaps):
        super().__init__("synthesis coverage gaps:\n" + "\n".join(f"  - {g}" for g in gaps))
        self.gaps = list(gaps)


class BalanceError(ValueError):
    pass


def validate_template(relation, template):
    seen = [m.group(1) for m in PLACEHOLDER_RE.finditer(template)]
    problems = []
    for pos in POSITIONS:
        n = seen.count(pos)
        if n != 1:
            problems.append(f"template for {relation!r} uses {{{pos}}} {n} times (need exactly 1)")
    for tok in template.split():
        if len(PLACEHOLDER_RE.findall(tok)) > 1:
            problems.append(f"template for {relation!r} packs two placeholders into one token: {tok!r}")
    if problems:
        raise TemplateError("; ".join(problems))


class TemplateSet:
    """Relation-keyed templates, e.g. ``"{object} is {subject}'s {relation}"``."""

    def __init__(self, templates: dict):
        for relation, template in templates.items():
            validate_template(relation, template)
        self.templates = dict(templates)

    def __contains__(self, relation):
        return relation in self.templates

    def __getitem__(self, relation):
        return self.templates[relation]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"format": "templates/v1", "templates": self.templates},
                      fh, ensure_ascii=False, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("format") != "templates/v1":
            raise ValueError(f"unsupported template format in {path}")
        return cls(data["templates"])


def render_triple(triple: FactTriple, template: str, mark_position=None, mark_index=None) -> str:
    """Realize one triple. The marked field is wrapped in standalone span tags.

    Placeholders may carry attached text (``{subject}'s``) except when that
    placeholder is the one being marked, since tags must stay whitespace
    tokens.
    """
    out = []
    for tok in template.split():
        m = PLACEHOLDER_RE.search(tok)
        if not m:
            out.append(tok)
            continue
        position = m.group(1)
        prefix, suffix = tok[: m.start()], tok[m.end():]
        words = surface_form(getattr(triple, position), position).split()
        if position == mark_position:
            if prefix or suffix:
                raise TemplateError(
                    f"cannot mark {{{position}}} inside attached token {tok!r}; "
                    "the perturbed field's placeholder must stand alone"
                )
            out.append(f"<S{mark_index}>")
            out.extend(words)
            out.append(f"</S{mark_index}>")
        else:
            words = list(words)
            words[0] = prefix + words[0]
            words[-1] = words[-1] + suffix
            out.extend(words)
    return " ".join(out)


def render_description(triples, templates: TemplateSet, perturbed_index=None,
                       perturbed_position=None, template_relations=None) -> str:
    """Concatenate per-triple realizations; only the perturbed field is tagged.

    ``template_relations`` selects templates when the rendered triples carry a
    perturbed relation: both description variants must use the same template.
    """
    if template_relations is None:
        template_relations = [t.relation for t in triples]
    missing = sorted({r for r in template_relations if r not in templates})
    if missing:
        raise CoverageError([f"no template for relation {r!r}" for r in missing])
    parts = []
    for j, (triple, rel) in enumerate(zip(triples, template_relations)):
        if j == perturbed_index:
            parts.append(render_triple(triple, templates[rel],
                                       mark_position=perturbed_position, mark_index=j))
        else:
            parts.append(render_triple(triple, templates[rel]))
    return " ".join(parts)


def strip_marks(text: str):
    """Remove span tags; return (clean tokens, (start, end) span or None, index or None)."""
    tokens = []
    span_start = span_end = index = None
    open_index = None
    for tok in tokenize(text):
        m = OPEN_TAG_RE.match(tok)
        if m:
            if open_index is not None or index is not None:
                raise ValueError(f"nested or repeated span tags in {text!r}")
            open_index = int(m.group(1))
            span_start = len(tokens)
            continue
        m = CLOSE_TAG_RE.match(tok)
        if m:
            if open_index is None or int(m.group(1)) != open_index:
                raise ValueError(f"unbalanced span tags in {text!r}")
            index = open_index
            open_index = None
            span_end = len(tokens)
            continue
        tokens.append(tok)
    if open_index is not None:
        raise ValueError(f"unclosed span tag in {text!r}")
    span = (span_start, span_end) if index is not None else None
    return tokens, span, index


@dataclass(frozen=True)
class FateInstance:
    """Original and perturbed triples with their span-marked descriptions."""

    f_pos: FactList
    f_neg: FactList
    t_pos: str
    t_neg: str
    perturbed_index: int
    position: str

    def validate(self):
        if len(self.f_pos) != len(self.f_neg):
            raise ValueError("f_pos and f_neg must have equal length")
        diffs = [j for j, (a, b) in enumerate(zip(self.f_pos, self.f_neg)) if a != b]
        if diffs != [self.perturbed_index]:
            raise ValueError(f"expected exactly one perturbed triple at {self.perturbed_index}, got {diffs}")
        orig, pert = self.f_pos[self.perturbed_index], self.f_neg[self.perturbed_index]
        for pos in POSITIONS:
            same = getattr(orig, pos) == getattr(pert, pos)
            if (pos == self.position) == same:
                raise ValueError(f"perturbation must change exactly the {self.position!r} field")
        tok_p, span_p, idx_p = strip_marks(self.t_pos)
        tok_n, span_n, idx_n = strip_marks(self.t_neg)
        if span_p is None or span_n is None:
            raise ValueError("both descriptions must carry a marked span")
        if idx_p != self.perturbed_index or idx_n != self.perturbed_index:
            raise ValueError("span tag index must equal the perturbed triple index")
        if span_p[0] != span_n[0]:
            raise ValueError("marked spans must start at the same token position")
        if tok_p[: span_p[0]] != tok_n[: span_n[0]] or tok_p[span_p[1]:] != tok_n[span_n[1]:]:
            raise ValueError("descriptions must be identical outside the marked spans")
        if tok_p[span_p[0]: span_p[1]] == tok_n[span_n[0]: span_n[1]]:
            raise ValueError("marked spans must differ between the two descriptions")
        return self

    def clean_tokens(self, source):
        text = self.t_pos if source == "original" else self.t_neg
        return strip_marks(text)

    def to_record(self):
        return {
            "f_pos": [t.as_list() for t in self.f_pos],
            "f_neg": [t.as_list() for t in self.f_neg],
            "t_pos": self.t_pos,
            "t_neg": self.t_neg,
            "perturbed_index": self.perturbed_index,
            "position": self.position,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            f_pos=FactList.from_lists(record["f_pos"]),
            f_neg=FactList.from_lists(record["f_neg"]),
            t_pos=record["t_pos"],
            t_neg=record["t_neg"],
            perturbed_index=record["perturbed_index"],
            position=record["position"],
        )


@dataclass(frozen=True)
class HypothesisPair:
    """A split description with ground-truth per-triple support labels.

    ``labels[j]`` is (backward_supported, forward_supported) for original
    triple j; True means supported. The perturbation surfaces ride along as
    training metadata for the featurizer.
    """

    facts: FactList
    backward: tuple[str, ...]
    forward: tuple[str, ...]
    source: str
    split: int
    labels: tuple[tuple[bool, bool], ...]
    perturbed_index: int
    position: str
    original_surface: str
    replacement_surface: str

    def cell_counts(self):
        supported = sum(b + f for b, f in self.labels)
        return supported, 2 * len(self.labels) - supported

    def to_record(self):
        return {
            "facts": [t.as_list() for t in self.facts],
            "backward": " ".join(self.backward),
            "forward": " ".join(self.forward),
            "source": self.source,
            "split": self.split,
            "labels": [[bool(b), bool(f)] for b, f in self.labels],
            "perturbed_index": self.perturbed_index,
            "position": self.position,
            "original_surface": self.original_surface,
            "replacement_surface": self.replacement_surface,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            facts=FactList.from_lists(record["facts"]),
            backward=tuple(tokenize(record["backward"])),
            forward=tuple(tokenize(record["forward"])),
            source=record["source"],
            split=record["split"],
            labels=tuple((bool(b), bool(f)) for b, f in record["labels"]),
            perturbed_index=record["perturbed_index"],
            position=record["position"],
            original_surface=record["original_surface"],
            replacement_surface=record["replacement_surface"],
        )


def _effective_pool(pool, position, original_value):
    """Alternatives for one field, excluding anything surface-equal to it."""
    if isinstance(pool, dict):
        candidates = pool.get(original_value, [])
    else:
        candidates = pool
    original_surface = surface_form(original_value, position)
    return [c for c in candidates
            if c != original_value and surface_form(c, position) != original_surface]


def perturb_triple(triple: FactTriple, position: str, pool, rng: random.Random,
                   registry: PerturbationRegistry | None = None) -> FactTriple:
    """Replace exactly one field with a pool draw and record the swap."""
    if position not in POSITIONS:
        raise ValueError(f"unknown position {position!r}")
    candidates = _effective_pool(pool, position, getattr(triple, position))
    if not candidates:
        raise CoverageError([f"empty pool for {position!r} of triple {triple.fields!r}"])
    replacement = rng.choice(sorted(candidates))
    if registry is not None:
        registry.register(triple, position, replacement)
    fields = {pos: getattr(triple, pos) for pos in POSITIONS}
    fields[position] = replacement
    return FactTriple(fields["subject"], fields["relation"], fields["object"])


def split_hypotheses(instance: FateInstance, t: int, source: str) -> HypothesisPair:
    """Split the unmarked description at position t and label every cell.

    A hypothesis from the perturbed description is unsupported for the
    perturbed triple iff at least one of its token indices falls inside the
    marked span; everything else, including every original-source hypothesis,
    is supported.
    """
    if source not in ("original", "perturbed"):
        raise ValueError(f"source must be 'original' or 'perturbed', got {source!r}")
    tokens, span, _ = instance.clean_tokens(source)
    if not 1 <= t < len(tokens):
        raise ValueError(f"split position {t} out of range 1..{len(tokens) - 1}")
    backward, forward = tuple(tokens[:t]), tuple(tokens[t:])
    labels = []
    for j in range(len(instance.f_pos)):
        if source == "perturbed" and j == instance.perturbed_index:
            # backward covers [0, t), forward covers [t, len); span is half-open
            labels.append((not span[0] < t, not span[1] > t))
        else:
            labels.append((True, True))
    orig, pert = instance.f_pos[instance.perturbed_index], instance.f_neg[instance.perturbed_index]
    record = (
        surface_form(getattr(orig, instance.position), instance.position),
        surface_form(getattr(pert, instance.position), instance.position),
    )
    return HypothesisPair(
        facts=instance.f_pos,
        backward=backward,
        forward=forward,
        source=source,
        split=t,
        labels=tuple(labels),
        perturbed_index=instance.perturbed_index,
        position=instance.position,
        original_surface=record[0],
        replacement_surface=record[1],
    )


def cell_counts(pairs):
    supported = unsupported = 0
    for pair in pairs:
        s, u = pair.cell_counts()
        supported += s
        unsupported += u
    return supported, unsupported


def balance_labels(pairs, seed=0, window=(0.9, 1.1), max_steps=1_000_000):
    """Duplicate whole pairs until the supported:unsupported cell ratio is ~1.

    The ratio window is inclusive. Duplication picks, round-robin, from the
    pairs that shift the current minority label fastest. Deterministic
    (the seed parameter is accepted for interface symmetry; no randomness is
    needed). Raises if the input is single-label or the window is unreachable
    at whole-pair granularity.
    """
    pairs = list(pairs)
    supported, unsupported = cell_counts(pairs)
    if supported == 0 or unsupported == 0:
        raise BalanceError(
            f"cannot balance single-label input (supported={supported}, unsupported={unsupported})"
        )
    per_pair = [pair.cell_counts() for pair in pairs]
    supported_heavy = sorted(
        (i for i, (s, u) in enumerate(per_pair) if s > u),
        key=lambda i: (per_pair[i][1] - per_pair[i][0], -per_pair[i][0], i),
    )
    unsupported_heavy = sorted(
        (i for i, (s, u) in enumerate(per_pair) if u > s),
        key=lambda i: (per_pair[i][0] - per_pair[i][1], -per_pair[i][1], i),
    )
    neutral = [i for i, (s, u) in enumerate(per_pair) if s == u and s > 0]
    out = list(pairs)
    cursors = {"s": 0, "u": 0, "n": 0}

    def take(pool, key):
        i = pool[cursors[key] % len(pool)]
        cursors[key] += 1
        return i

    lo, hi = window
    for _ in range(max_steps):
        ratio = supported / unsupported
        if lo <= ratio <= hi:
            return out
        if ratio > hi:
            pool, key = (unsupported_heavy, "u") if unsupported_heavy else (neutral, "n")
        else:
            pool, key = (supported_heavy, "s") if supported_heavy else (neutral, "n")
        if not pool:
            raise BalanceError(
                f"cannot reach ratio window {window} by duplication "
                f"(supported={supported}, unsupported={unsupported})"
            )
        i = take(pool, key)
        out.append(pairs[i])
        s, u = per_pair[i]
        supported += s
        unsupported += u
    raise BalanceError(f"balance did not converge within {max_steps} duplications")


@dataclass
class FateBuild:
    instances: list
    pairs: list
    registry: PerturbationRegistry


def build_fate(instances, pools, templates: TemplateSet, per_instance_splits=1,
               seed=0, registry=None, position_weights=None, balance=True) -> FateBuild:
    """Synthesize one FateInstance per corpus record plus labeled pairs.

    ``per_instance_splits`` is a count of split positions per description pair
    (each yields an original- and a perturbed-source pair) or ``"all"`` for
    exhaustive splits. Every field of every triple must be perturbable and
    every relation templated; gaps are listed exhaustively before aborting.
    """
    rng = random.Random(seed)
    registry = registry if registry is not None else PerturbationRegistry()

    gaps = []
    fact_lists = [inst.facts if hasattr(inst, "facts") else inst for inst in instances]
    for idx, facts in enumerate(fact_lists):
        for triple in facts:
            if triple.relation not in templates:
                gaps.append(f"instance {idx}: no template for relation {triple.relation!r}")
            for position in POSITIONS:
                if not _effective_pool(pools.get(position, []), position, getattr(triple, position)):
                    gaps.append(
                        f"instance {idx}: empty {position!r} pool for triple {triple.fields!r}"
                    )
    if gaps:
        raise CoverageError(sorted(set(gaps)))

    fate_instances = []
    pairs = []
    for facts in fact_lists:
        i = rng.randrange(len(facts))
        if position_weights:
            position = rng.choices(POSITIONS, weights=[position_weights[p] for p in POSITIONS], k=1)[0]
        else:
            position = rng.choice(POSITIONS)
        for triple in facts:
            registry.register_clean(triple)
        perturbed = perturb_triple(facts[i], position, pools[position], rng, registry)
        f_neg = FactList(tuple(perturbed if j == i else t for j, t in enumerate(facts)))
        relations = [t.relation for t in facts]
        t_pos = render_description(facts, templates, i, position, relations)
        t_neg = render_description(f_neg, templates, i, position, relations)
        instance = FateInstance(facts, f_neg, t_pos, t_neg, i, position).validate()
        fate_instances.append(instance)

        # one split position serves both descriptions, so it must be valid for
        # the shorter of the two (replacement spans can change the length)
        n_tokens = min(len(instance.clean_tokens("original")[0]),
                       len(instance.clean_tokens("perturbed")[0]))
        if per_instance_splits == "all":
            splits = list(range(1, n_tokens))
        else:
            k = min(per_instance_splits, n_tokens - 1)
            splits = sorted(rng.sample(range(1, n_tokens), k))
        for t in splits:
            for source in ("original", "perturbed"):
                pairs.append(split_hypotheses(instance, t, source))

    if balance:
        pairs = balance_labels(pairs, seed=seed)
    return FateBuild(fate_instances, pairs, registry)


def write_fate_file(instances, path):
    with open(path, "w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(json.dumps(instance.to_record(), ensure_ascii=False))
            fh.write("\n")


def read_fate_file(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(FateInstance.from_record(json.loads(line)))
    return out


def write_pairs_file(pairs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_record(), ensure_ascii=False))
            fh.write("\n")


def read_pairs_file(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(HypothesisPair.from_record(json.loads(line)))
    return out


def load_pools(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("format") != "pools/v1":
        raise ValueError(f"unsupported pools format in {path}")
    return {position: data[position] for position in POSITIONS}


def save_pools(pools, path):
    data = {"format": "pools/v1"}
    data.update({position: pools[position] for position in POSITIONS})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")

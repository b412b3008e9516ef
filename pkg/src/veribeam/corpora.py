"""Deterministic synthetic corpora for hermetic experiments.

Instances use globally unique field names whose token sets are disjoint from
every pool replacement, so span-overlap labels, the rule oracle, and the
featurized verifier all agree exactly. The adversarial builder additionally
biases the language model toward the perturbed wording, reproducing the
situation where likelihood-only search prefers a hallucination that
verification-guided search can demote.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .fate import (
    FateBuild,
    FateInstance,
    TemplateSet,
    build_fate,
    render_description,
    split_hypotheses,
    strip_marks,
)
from .knowledge import FactList, FactTriple, K2TInstance, detokenize
from .perturbations import PerturbationRegistry

_TEMPLATE_SHAPES = (
    "{subject} {relation} {object} .",
    "{object} is the {relation} of {subject} .",
    "{subject} has {relation} {object} there .",
)


@dataclass
class ToyCorpus:
    instances: list
    templates: TemplateSet
    pools: dict
    lm_corpus: list  # (facts, description) pairs for language-model training


def make_toy_corpus(n, seed=0, m_range=(1, 3)) -> ToyCorpus:
    """Instances with unique fields, per-field pools, and faithful references."""
    rng = random.Random(seed)
    counter = 0
    fact_lists = []
    templates = {}
    pools = {"subject": {}, "relation": {}, "object": {}}
    for _ in range(n):
        m = rng.randint(*m_range)
        triples = []
        for _ in range(m):
            c = counter
            counter += 1
            subject = f"Person{c}"
            relation = rng.choice([f"link{c}", f"rel{c}a_rel{c}b"])
            obj = rng.choice([f"Place{c}", f"Place{c}a Place{c}b"])
            triples.append(FactTriple(subject, relation, obj))
            templates[relation] = _TEMPLATE_SHAPES[c % len(_TEMPLATE_SHAPES)]
            pools["subject"][subject] = [f"Impostor{c}"]
            pools["relation"][relation] = [f"alt{c}a_alt{c}b"]
            pools["object"][obj] = [f"Nowhere{c}"]
        fact_lists.append(FactList(tuple(triples)))
    template_set = TemplateSet(templates)
    instances = []
    for facts in fact_lists:
        reference = render_description(facts, template_set)
        instances.append(K2TInstance(facts, (reference,)))
    lm_corpus = [(inst.facts, inst.references[0]) for inst in instances]
    return ToyCorpus(instances, template_set, pools, lm_corpus)


def table2_instance():
    """The Ireland/Dublin showcase instance with its template and pools."""
    facts = FactList((FactTriple("Ireland", "largest_city", "Dublin"),))
    templates = {"largest_city": "{object} is {subject}'s {relation}"}
    pools = {
        "subject": {"Ireland": ["France"]},
        "relation": {"largest_city": ["national_capital"]},
        "object": {"Dublin": ["Cork"]},
    }
    reference = "Dublin is Ireland's largest city"
    return K2TInstance(facts, (reference,)), TemplateSet(templates), pools


def table2_fate(registry: PerturbationRegistry | None = None):
    """Showcase instance perturbed at the relation, with exhaustive splits.

    Built deterministically (the possessive template cannot mark the subject
    slot, so this instance never goes through random position sampling).
    Returns (K2TInstance, FateInstance, pairs).
    """
    instance, templates, _ = table2_instance()
    facts = instance.facts
    perturbed = FactList((FactTriple("Ireland", "national_capital", "Dublin"),))
    relations = [t.relation for t in facts]
    t_pos = render_description(facts, templates, 0, "relation", relations)
    t_neg = render_description(perturbed, templates, 0, "relation", relations)
    fate_instance = FateInstance(facts, perturbed, t_pos, t_neg, 0, "relation").validate()
    if registry is not None:
        registry.register_clean(facts[0])
        registry.register(facts[0], "relation", "national_capital")
    n_tokens = len(fate_instance.clean_tokens("original")[0])
    pairs = [
        split_hypotheses(fate_instance, t, source)
        for t in range(1, n_tokens)
        for source in ("original", "perturbed")
    ]
    return instance, fate_instance, pairs


@dataclass
class AdversarialBuild:
    corpus: ToyCorpus
    fate: FateBuild
    lm_corpus: list  # hallucination-biased (facts, description) pairs


def make_adversarial_build(n, seed=0, m_range=(1, 2), per_instance_splits=2,
                           halluc_weight=3, faithful_weight=1) -> AdversarialBuild:
    """Corpus whose LM ranks the perturbed wording above the faithful one.

    The perturbed description of each synthesized instance is duplicated
    ``halluc_weight`` times in the LM training data versus ``faithful_weight``
    for the original, so likelihood-only decoding emits registered perturbed
    surface forms while the faithful continuation stays within beam reach.
    """
    corpus = make_toy_corpus(n, seed=seed, m_range=m_range)
    fate = build_fate(
        corpus.instances, corpus.pools, corpus.templates,
        per_instance_splits=per_instance_splits, seed=seed,
    )
    lm_corpus = []
    for instance, fate_instance in zip(corpus.instances, fate.instances):
        faithful = detokenize(strip_marks(fate_instance.t_pos)[0])
        hallucinated = detokenize(strip_marks(fate_instance.t_neg)[0])
        lm_corpus.extend([(instance.facts, hallucinated)] * halluc_weight)
        lm_corpus.extend([(instance.facts, faithful)] * faithful_weight)
    return AdversarialBuild(corpus, fate, lm_corpus)


def split_pairs(pairs, holdout_fraction=0.2, seed=0):
    """Deterministic train/holdout split of hypothesis pairs."""
    pairs = list(pairs)
    indices = list(range(len(pairs)))
    random.Random(seed).shuffle(indices)
    cut = max(1, int(len(pairs) * holdout_fraction))
    holdout = sorted(indices[:cut])
    train = sorted(indices[cut:])
    return [pairs[i] for i in train], [pairs[i] for i in holdout]

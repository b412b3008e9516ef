"""Trainable tabular hypothesis verifier.

A featurized linear scorer fills the per-(triple, hypothesis) support table:
cell(j, column) = sigmoid(w . features(triple_j, hypothesis_column)). Training
minimizes the table-form objective, the mean over instances of
-(1/(2|x|)) sum over triples and both hypotheses of log P(predicted = label).
Prediction is pure and thread-safe; training is single-threaded full-batch
gradient descent for reproducibility.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .knowledge import FactTriple, tokenize
from .perturbations import POSITIONS, contains_phrase, normalize_tokens, overlap_rate, surface_form

FEATURE_NAMES = (
    "subject_overlap",
    "relation_overlap",
    "object_overlap",
    "contradiction_hit",
    "original_present",
    "length_bucket",
    "kind_forward",
    "bias",
)

LENGTH_BUCKET_CAP = 16

KIND_BACKWARD = "backward"
KIND_FORWARD = "forward"


@dataclass(frozen=True)
class VerificationTable:
    """Supported-probabilities per triple, columns (backward, forward)."""

    triples: tuple[FactTriple, ...]
    cells: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.cells) != len(self.triples):
            raise ValueError("one cell row per triple required")
        for row in self.cells:
            if len(row) != 2 or not all(0.0 <= p <= 1.0 for p in row):
                raise ValueError("cells must be (backward, forward) probabilities in [0, 1]")

    def column(self, kind):
        idx = 0 if kind == KIND_BACKWARD else 1
        return tuple(row[idx] for row in self.cells)


class ContradictionIndex:
    """Surfaces observed to replace a given field surface in training data."""

    def __init__(self, entries=None):
        self._map: dict[tuple[str, str], list[str]] = {}
        for (position, original), replacements in (entries or {}).items():
            self._map[(position, original)] = sorted(set(replacements))

    def add(self, position, original_surface, replacement_surface):
        slot = self._map.setdefault((position, original_surface), [])
        if replacement_surface not in slot:
            slot.append(replacement_surface)
            slot.sort()

    def replacements(self, position, original_surface):
        return self._map.get((position, original_surface), [])

    def known_original(self, position, original_surface):
        return (position, original_surface) in self._map

    def to_json(self):
        return [
            [position, original, replacements]
            for (position, original), replacements in sorted(self._map.items())
        ]

    @classmethod
    def from_json(cls, rows):
        index = cls()
        for position, original, replacements in rows:
            for r in replacements:
                index.add(position, original, r)
        return index

    @classmethod
    def from_pairs(cls, pairs):
        index = cls()
        for pair in pairs:
            index.add(pair.position, pair.original_surface, pair.replacement_surface)
        return index


def featurize(triple: FactTriple, hypothesis, kind, contradictions: ContradictionIndex) -> np.ndarray:
    """Deterministic features for one (triple, hypothesis) cell.

    ``hypothesis`` is a token sequence or string; overlap rates are computed
    over punctuation-normalized tokens and land in [0, 1].
    """
    tokens = normalize_tokens(list(hypothesis) if not isinstance(hypothesis, str) else hypothesis)
    token_set = set(tokens)
    features = np.zeros(len(FEATURE_NAMES))
    contradiction_hit = 0.0
    original_present = 0.0
    for col, position in enumerate(POSITIONS):
        surface = surface_form(getattr(triple, position), position)
        features[col] = overlap_rate(surface, tokens)
        replacements = contradictions.replacements(position, surface)
        if not replacements:
            continue
        if contains_phrase(tokens, surface):
            original_present = 1.0
            continue
        for replacement in replacements:
            repl_tokens = normalize_tokens(replacement)
            hit = len(set(repl_tokens) & token_set)
            if hit:
                contradiction_hit = max(contradiction_hit, hit / len(repl_tokens))
    features[3] = contradiction_hit
    features[4] = original_present
    features[5] = min(len(tokens), LENGTH_BUCKET_CAP) / LENGTH_BUCKET_CAP
    features[6] = 1.0 if kind == KIND_FORWARD else 0.0
    features[7] = 1.0
    return features


def _sigmoid(z):
    z = np.clip(z, -500.0, 500.0)
    return 1.0 / (1.0 + np.exp(-z))


class DivergenceError(RuntimeError):
    pass


def _pair_design(pairs, contradictions):
    """Flatten pairs into (features, labels, per-cell instance weights)."""
    rows, labels, weights = [], [], []
    for pair in pairs:
        inv = 1.0 / (2.0 * len(pair.facts))
        for j, triple in enumerate(pair.facts):
            b_supported, f_supported = pair.labels[j]
            rows.append(featurize(triple, pair.backward, KIND_BACKWARD, contradictions))
            labels.append(1.0 if b_supported else 0.0)
            weights.append(inv)
            rows.append(featurize(triple, pair.forward, KIND_FORWARD, contradictions))
            labels.append(1.0 if f_supported else 0.0)
            weights.append(inv)
    return np.array(rows), np.array(labels), np.array(weights)


def _loss_and_grad(weights, X, y, cell_w, n_instances):
    z = X @ weights
    p = _sigmoid(z)
    eps = 1e-300
    per_cell = -(y * np.log(np.maximum(p, eps)) + (1.0 - y) * np.log(np.maximum(1.0 - p, eps)))
    loss = float((cell_w * per_cell).sum() / n_instances)
    grad = (X * (cell_w * (p - y))[:, None]).sum(axis=0) / n_instances
    return loss, grad


class TabularHvm(BaseEstimator):
    """Featurized linear table predictor with an sklearn-style surface.

    fit(pairs) learns weights and the contradiction index from labeled
    hypothesis pairs; predict_table fills the 2D support table.
    """

    def __init__(self, epochs=200, learning_rate=2.0, seed=0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed

    def _require_fitted(self):
        if not hasattr(self, "weights_"):
            raise NotFittedError("TabularHvm must be fitted or loaded before prediction")

    def fit(self, pairs):
        if not pairs:
            raise ValueError("no training pairs")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.contradictions_ = ContradictionIndex.from_pairs(pairs)
        X, y, cell_w = _pair_design(pairs, self.contradictions_)
        n = len(pairs)
        weights = np.zeros(len(FEATURE_NAMES))
        history = []
        rising = 0
        for epoch in range(self.epochs):
            loss, grad = _loss_and_grad(weights, X, y, cell_w, n)
            if history and loss > history[-1] + 1e-9:
                rising += 1
                if rising >= 3:
                    raise DivergenceError(
                        f"training diverged at epoch {epoch}: loss rose "
                        f"{history[-3]:.6g} -> {loss:.6g}; lower the learning rate"
                    )
            else:
                rising = 0
            history.append(loss)
            weights = weights - self.learning_rate * grad
        final_loss, _ = _loss_and_grad(weights, X, y, cell_w, n)
        history.append(final_loss)
        self.weights_ = weights
        self.loss_history_ = history
        self.metadata_ = {
            "seed": self.seed,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "final_loss": final_loss,
        }
        return self

    def predict_cells(self, triples, hypothesis, kind) -> np.ndarray:
        """Supported probability per triple for a single hypothesis."""
        self._require_fitted()
        feats = np.array([featurize(t, hypothesis, kind, self.contradictions_) for t in triples])
        return _sigmoid(feats @ self.weights_)

    def predict_table(self, triples, backward, forward) -> VerificationTable:
        self._require_fitted()
        triples = tuple(triples)
        b = self.predict_cells(triples, backward, KIND_BACKWARD)
        f = self.predict_cells(triples, forward, KIND_FORWARD)
        return VerificationTable(triples, tuple((float(pb), float(pf)) for pb, pf in zip(b, f)))

    def to_file(self, path):
        self._require_fitted()
        data = {
            "format": "hvm/v1",
            "feature_names": list(FEATURE_NAMES),
            "weights": [float(w) for w in self.weights_],
            "contradictions": self.contradictions_.to_json(),
            "metadata": self.metadata_,
            "params": {"epochs": self.epochs, "learning_rate": self.learning_rate, "seed": self.seed},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, ensure_ascii=False, indent=2)
            fh.write("\n")

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("format") != "hvm/v1":
            raise ValueError(f"unsupported HVM model format in {path}")
        if data.get("feature_names") != list(FEATURE_NAMES):
            raise ValueError("model file feature set does not match this build")
        params = data.get("params", {})
        model = cls(**params)
        model.weights_ = np.array(data["weights"])
        model.contradictions_ = ContradictionIndex.from_json(data["contradictions"])
        model.metadata_ = data.get("metadata", {})
        return model


def table_loss(model: TabularHvm, pairs) -> float:
    """Table-form objective of a batch, averaged over instances."""
    if not pairs:
        raise ValueError("empty batch")
    model._require_fitted()
    X, y, cell_w = _pair_design(pairs, model.contradictions_)
    loss, _ = _loss_and_grad(model.weights_, X, y, cell_w, len(pairs))
    return loss


def table_loss_gradient(model: TabularHvm, pairs) -> np.ndarray:
    model._require_fitted()
    X, y, cell_w = _pair_design(pairs, model.contradictions_)
    _, grad = _loss_and_grad(model.weights_, X, y, cell_w, len(pairs))
    return grad


def train_hvm(pairs, epochs=200, learning_rate=2.0, seed=0) -> TabularHvm:
    return TabularHvm(epochs=epochs, learning_rate=learning_rate, seed=seed).fit(pairs)


def hvm_score(model: TabularHvm, facts, hypothesis, kind=KIND_FORWARD) -> float:
    """Mean over triples of log P(supported); <= 0 on the log-prob scale."""
    if isinstance(hypothesis, str):
        hypothesis = tokenize(hypothesis)
    if not hypothesis:
        raise ValueError("hypothesis must be non-empty")
    probs = model.predict_cells(tuple(facts), hypothesis, kind)
    return float(np.mean([math.log(max(p, 1e-300)) for p in probs]))


def cell_accuracy(model: TabularHvm, pairs) -> float:
    """Fraction of table cells predicted correctly at the 0.5 threshold."""
    correct = total = 0
    for pair in pairs:
        table = model.predict_table(pair.facts, pair.backward, pair.forward)
        for j, (b_supported, f_supported) in enumerate(pair.labels):
            pb, pf = table.cells[j]
            correct += (pb >= 0.5) == b_supported
            correct += (pf >= 0.5) == f_supported
            total += 2
    return correct / total if total else 0.0

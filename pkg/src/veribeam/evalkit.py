"""Metrics and analyses: BLEU, oracle hallucination rate, verdict-position
histograms, alpha/beam sweeps, input-length splits, and comparison reports.

Faithfulness here is measured against the rule oracle of the synthesized
corpora, not a pretrained metric model; reports label it
``hallucination_rate`` so the numbers cannot be mistaken for anything else.
Metric computation is independent per instance; aggregation is by instance
index, so ordering never depends on scheduling.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, replace

from .decoding import DecodeConfig, DecodeTrace, decode
from .knowledge import tokenize
from .verify import UNSUPPORTED, rule_oracle_verify


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def clipped_counts(candidate, references, n):
    """(clipped match count, candidate n-gram total) for one segment."""
    cand = _ngram_counts(candidate, n)
    total = sum(cand.values())
    if not total:
        return 0, 0
    max_ref = Counter()
    for ref in references:
        for gram, count in _ngram_counts(ref, n).items():
            if count > max_ref[gram]:
                max_ref[gram] = count
    matches = sum(min(count, max_ref[gram]) for gram, count in cand.items())
    return matches, total


def _closest_ref_length(candidate_len, references):
    return min((len(r) for r in references),
               key=lambda rl: (abs(rl - candidate_len), rl))


def _bleu_from_stats(matches, totals, candidate_len, reference_len, max_n):
    log_sum = 0.0
    for n in range(1, max_n + 1):
        m, t = matches[n], totals[n]
        if t == 0:
            p = 1.0  # segment too short to contain any n-gram of this order
        elif m == 0:
            if n == 1:
                return 0.0
            p = 1.0 / (t + 1.0)  # add-one smoothing for empty higher-order counts
        else:
            p = m / t
        log_sum += math.log(p)
    geo_mean = math.exp(log_sum / max_n)
    if candidate_len == 0:
        return 0.0
    bp = 1.0 if candidate_len > reference_len else math.exp(1.0 - reference_len / candidate_len)
    return 100.0 * bp * geo_mean


def bleu(candidate, references, max_n=4) -> float:
    """Sentence BLEU in [0, 100]: clipped n-gram precisions x brevity penalty."""
    candidate = tokenize(candidate) if isinstance(candidate, str) else list(candidate)
    references = [tokenize(r) if isinstance(r, str) else list(r) for r in references]
    if not candidate:
        raise ValueError("candidate must be non-empty")
    if not references:
        raise ValueError("at least one reference required")
    matches, totals = {}, {}
    for n in range(1, max_n + 1):
        matches[n], totals[n] = clipped_counts(candidate, references, n)
    return _bleu_from_stats(matches, totals, len(candidate),
                            _closest_ref_length(len(candidate), references), max_n)


def corpus_bleu(candidates, references_list, max_n=4) -> float:
    """Corpus BLEU aggregating clipped counts across segments."""
    if len(candidates) != len(references_list):
        raise ValueError("one reference list per candidate required")
    matches = {n: 0 for n in range(1, max_n + 1)}
    totals = {n: 0 for n in range(1, max_n + 1)}
    cand_len = ref_len = 0
    seen = 0
    for candidate, references in zip(candidates, references_list):
        candidate = tokenize(candidate) if isinstance(candidate, str) else list(candidate)
        references = [tokenize(r) if isinstance(r, str) else list(r) for r in references]
        if not references:
            continue
        seen += 1
        # empty candidates contribute their reference length (and nothing
        # else), so degenerate outputs are penalized instead of skipped
        cand_len += len(candidate)
        ref_len += _closest_ref_length(len(candidate), references)
        for n in range(1, max_n + 1):
            m, t = clipped_counts(candidate, references, n)
            matches[n] += m
            totals[n] += t
    if not seen:
        return 0.0
    return _bleu_from_stats(matches, totals, cand_len, ref_len, max_n)


def output_is_hallucinated(output_text, facts, registry) -> bool:
    return any(rule_oracle_verify(registry, t, output_text) == UNSUPPORTED for t in facts)


def hallucination_rate(outputs, instances, registry) -> float:
    """Fraction of outputs contradicting at least one input triple, judged by
    the rule oracle of the corpus the instances were synthesized with."""
    if len(outputs) != len(instances):
        raise ValueError("one output per instance required")
    if not outputs:
        return 0.0
    flagged = sum(
        output_is_hallucinated(out, inst.facts, registry)
        for out, inst in zip(outputs, instances)
    )
    return flagged / len(outputs)


@dataclass(frozen=True)
class PositionHistogram:
    """Counts of negative verdicts per relative-position bin, by hypothesis kind."""

    bin_edges: tuple[float, ...]
    backward: tuple[int, ...]
    forward: tuple[int, ...]

    @property
    def total(self):
        return sum(self.backward) + sum(self.forward)


def _iter_verdict_dicts(trace):
    if isinstance(trace, DecodeTrace):
        for v in trace.iter_verdicts():
            yield {"kind": v.kind, "negative": v.negative, "relative_position": v.relative_position}
    elif isinstance(trace, dict):  # a single JSONL-loaded step record
        yield from trace.get("verdicts", [])
    else:  # a list of step records
        for record in trace:
            yield from _iter_verdict_dicts(record)


def position_histogram(traces, bins=10) -> PositionHistogram:
    """Bucket negative verdicts by relative position t / run length."""
    edges = tuple(i / bins for i in range(bins + 1))
    backward = [0] * bins
    forward = [0] * bins
    for trace in traces:
        for verdict in _iter_verdict_dicts(trace):
            if not verdict["negative"]:
                continue
            p = verdict["relative_position"]
            if p is None or not 0.0 <= p <= 1.0:
                raise ValueError(f"verdict has no relative position in [0,1]: {verdict}")
            idx = min(int(p * bins), bins - 1)
            (backward if verdict["kind"] == "backward" else forward)[idx] += 1
    return PositionHistogram(edges, tuple(backward), tuple(forward))


def write_histogram_csv(histogram: PositionHistogram, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_start", "bin_end", "backward_count", "forward_count"])
        for i in range(len(histogram.backward)):
            writer.writerow([
                repr(histogram.bin_edges[i]),
                repr(histogram.bin_edges[i + 1]),
                histogram.backward[i],
                histogram.forward[i],
            ])


def read_histogram_csv(path) -> PositionHistogram:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["bin_start", "bin_end", "backward_count", "forward_count"]:
        raise ValueError(f"not a histogram CSV: {path}")
    edges, backward, forward = [], [], []
    for start, end, b, f in rows[1:]:
        edges.append(float(start))
        backward.append(int(b))
        forward.append(int(f))
        last_end = float(end)
    edges.append(last_end)
    return PositionHistogram(tuple(edges), tuple(backward), tuple(forward))


@dataclass
class RunResult:
    """Everything needed to reproduce and compare one decode run."""

    name: str
    config: dict
    outputs: list
    metrics: dict
    per_instance: list
    traces: list

    def to_dict(self):
        return {
            "name": self.name,
            "config": self.config,
            "outputs": self.outputs,
            "metrics": self.metrics,
            "per_instance": self.per_instance,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(
            name=data["name"],
            config=data["config"],
            outputs=data["outputs"],
            metrics=data["metrics"],
            per_instance=data["per_instance"],
            traces=[],
        )


def run_decode(instances, lm, verifier, config: DecodeConfig, registry=None, name=None) -> RunResult:
    """Decode a corpus and collect per-instance and aggregate metrics."""
    outputs, traces, per_instance = [], [], []
    for idx, instance in enumerate(instances):
        result = decode(instance, lm, verifier, config)
        outputs.append(result.text)
        traces.append(result.trace)
        row = {"index": idx, "output": result.text, "gen_logprob": result.best.gen_logprob}
        if instance.references:
            row["bleu"] = bleu(result.text, list(instance.references)) if result.text else 0.0
        if registry is not None:
            row["hallucinated"] = output_is_hallucinated(result.text, instance.facts, registry)
        per_instance.append(row)
    metrics = {}
    with_refs = [(o, list(inst.references)) for o, inst in zip(outputs, instances) if inst.references]
    if with_refs:
        metrics["bleu"] = corpus_bleu([o for o, _ in with_refs], [r for _, r in with_refs])
    if registry is not None:
        metrics["hallucination_rate"] = hallucination_rate(outputs, instances, registry)
    return RunResult(
        name=name or config.strategy,
        config=config.to_dict(),
        outputs=outputs,
        metrics=metrics,
        per_instance=per_instance,
        traces=traces,
    )


SWEEP_AXES = ("alpha", "beam_size")


def sweep(instances, lm, verifier, base_config: DecodeConfig, axis, values,
          registry=None):
    """One full decode run per value; returns ([(value, bleu, rate)], [runs])."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    rows, runs = [], []
    for value in values:
        if axis == "alpha":
            cfg = replace(base_config, alpha=float(value))
        else:
            cfg = replace(base_config, k=int(value), prune_width=None)
        run = run_decode(instances, lm, verifier, cfg, registry=registry,
                         name=f"{base_config.strategy}[{axis}={value}]")
        rows.append((value, run.metrics.get("bleu"), run.metrics.get("hallucination_rate")))
        runs.append(run)
    return rows, runs


DEFAULT_LENGTH_BOUNDS = ((1, 1), (2, 4), (5, 7))


def length_split_report(instances, result: RunResult, bounds=DEFAULT_LENGTH_BOUNDS):
    """Metrics grouped by triple count; bounds must partition the count range."""
    groups = {b: [] for b in bounds}
    for idx, instance in enumerate(instances):
        m = len(instance.facts)
        hits = [b for b in bounds if b[0] <= m <= b[1]]
        if len(hits) != 1:
            raise ValueError(f"triple count {m} matched {len(hits)} groups; bounds must partition")
        groups[hits[0]].append(idx)
    report = []
    for (lo, hi), indices in groups.items():
        row = {"bounds": [lo, hi], "size": len(indices)}
        if indices:
            outs = [result.outputs[i] for i in indices]
            refs = [list(instances[i].references) for i in indices]
            if all(refs):
                row["bleu"] = corpus_bleu(outs, refs)
            flags = [result.per_instance[i].get("hallucinated") for i in indices]
            if all(f is not None for f in flags):
                row["hallucination_rate"] = sum(flags) / len(flags)
        report.append(row)
    return report


def compare_report(runs):
    """Side-by-side metrics plus per-instance diffs; (text table, dict)."""
    if not runs:
        raise ValueError("nothing to compare")
    n = len(runs[0].outputs)
    for run in runs:
        if len(run.outputs) != n:
            raise ValueError(
                f"runs cover different instance sets: {run.name} has "
                f"{len(run.outputs)} outputs, expected {n}"
            )
    metric_names = sorted({m for run in runs for m in run.metrics})
    header = ["run"] + metric_names
    rows = [[run.name] + [_fmt(run.metrics.get(m)) for m in metric_names] for run in runs]
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = [
        "  ".join(str(cell).ljust(widths[i]) for i, cell in enumerate(row))
        for row in [header] + rows
    ]
    diffs = []
    if len(runs) > 1:
        base = runs[0].outputs
        for idx in range(n):
            variants = {run.name: run.outputs[idx] for run in runs}
            if any(v != base[idx] for v in variants.values()):
                diffs.append({"index": idx, "outputs": variants})
    payload = {
        "runs": [{"name": run.name, "metrics": run.metrics, "config": run.config} for run in runs],
        "instances": n,
        "diffs": diffs,
    }
    return "\n".join(lines), payload


def _fmt(value):
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)

"""Command-line entry point wiring the whole pipeline.

Every command echoes its effective configuration (flags plus defaults) to the
run log so any artifact can be reproduced from the log alone; seeds default to
fixed constants, never the clock. Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error; failures emit one machine-parsable JSON line
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import corpora, evalkit, fate, hvm, lm as lm_mod
from .decoding import STRATEGIES, DecodeConfig, decode
from .knowledge import parse_dataset, write_dataset
from .perturbations import PerturbationRegistry
from .verify import (
    HvmVerifier,
    NliVerifier,
    OracleEntailmentScorer,
    OracleVerifier,
    RemoteHvmVerifier,
    RemoteNliScorer,
)

log = logging.getLogger("veribeam")

BRIDGE_ADDR_ENV = "VERIBEAM_BRIDGE_ADDR"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Bad flags or unusable inputs; maps to exit code 2."""


def _require_file(path, what):
    if not os.path.exists(path):
        raise UsageError(f"{what} file not found: {path}")
    return path


def _echo_config(command, params):
    log.info("effective-config %s %s", command, json.dumps(params, sort_keys=True, default=str))


def _write_json(payload, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")


def _load_lm(args):
    spec = args.lm
    if spec.startswith("toy:"):
        return lm_mod.ToyNgramLM.from_file(_require_file(spec[4:], "toy LM"))
    if spec.startswith("remote:"):
        address = spec[len("remote:"):] or os.environ.get(BRIDGE_ADDR_ENV, "")
        if not address:
            raise UsageError(f"remote LM needs an address (or ${BRIDGE_ADDR_ENV})")
        if not getattr(args, "vocab", None):
            raise UsageError("--vocab is required with a remote LM")
        vocab = lm_mod.load_vocabulary(_require_file(args.vocab, "vocabulary"))
        return lm_mod.RemoteLM(address, vocab)
    raise UsageError(f"--lm must be toy:<path> or remote:<host:port>, got {spec!r}")


def _load_registry(args):
    if not getattr(args, "registry", None):
        raise UsageError("--registry is required for oracle-backed verification")
    return PerturbationRegistry.load(_require_file(args.registry, "registry"))


def _load_verifier(args):
    kind = args.verifier
    bridge = os.environ.get(BRIDGE_ADDR_ENV, "")
    if kind == "oracle":
        return OracleVerifier(_load_registry(args))
    if kind == "nli-oracle":
        return NliVerifier(OracleEntailmentScorer(_load_registry(args)))
    if kind == "hvm-local":
        if not getattr(args, "hvm", None):
            raise UsageError("--hvm is required with verifier hvm-local")
        return HvmVerifier(hvm.TabularHvm.from_file(_require_file(args.hvm, "HVM model")),
                           floor=args.hvm_floor)
    if kind == "nli-remote":
        address = getattr(args, "verifier_addr", None) or bridge
        if not address:
            raise UsageError(f"nli-remote needs --verifier-addr or ${BRIDGE_ADDR_ENV}")
        return NliVerifier(RemoteNliScorer(address))
    if kind == "hvm-remote":
        address = getattr(args, "verifier_addr", None) or bridge
        if not address:
            raise UsageError(f"hvm-remote needs --verifier-addr or ${BRIDGE_ADDR_ENV}")
        return RemoteHvmVerifier(address, floor=args.hvm_floor)
    raise UsageError(f"unknown verifier {kind!r}")


def _decode_config(args) -> DecodeConfig:
    try:
        return DecodeConfig(
            strategy=args.strategy,
            k=args.k,
            alpha=args.alpha,
            prune_width=args.prune_width,
            rollout_cap=args.rollout_cap,
            max_len=args.max_len,
            seed=args.seed,
            wt_override=args.wt_override,
        )
    except ValueError as err:
        raise UsageError(str(err)) from None


def _add_decode_flags(parser, strategy_default="beam"):
    parser.add_argument("--corpus", required=True, help="input corpus JSONL/TSV")
    parser.add_argument("--strategy", choices=STRATEGIES, default=strategy_default)
    parser.add_argument("--k", type=int, default=None,
                        help="beam size (default: 5 for beam, 4 for tweak-*, 1 for greedy)")
    parser.add_argument("--alpha", type=float, default=None,
                        help="faithfulness weight (default: 0 for beam/greedy, 8 for tweak-*)")
    parser.add_argument("--prune-width", type=int, default=None,
                        help="expansions rescored per step (default 2k)")
    parser.add_argument("--rollout-cap", type=int, default=None,
                        help="max forward tokens (default: remaining budget)")
    parser.add_argument("--max-len", type=int, default=64)
    parser.add_argument("--wt-override", type=float, default=None,
                        help="fix w_t instead of the strategy's scheme (ablations)")
    parser.add_argument("--lm", required=True, help="toy:<path> or remote:<host:port>")
    parser.add_argument("--vocab", help="vocabulary JSON (remote LM only)")
    parser.add_argument("--verifier",
                        choices=["oracle", "nli-oracle", "nli-remote", "hvm-local", "hvm-remote"],
                        default="oracle")
    parser.add_argument("--verifier-addr", help="bridge address for remote verifiers")
    parser.add_argument("--registry", help="perturbation registry JSON (oracle verifiers/metrics)")
    parser.add_argument("--hvm", help="trained HVM model file (hvm-local)")
    parser.add_argument("--hvm-floor", type=float, default=0.3,
                        help="calibration floor on verdict probabilities (0 disables)")


def _resolve_decode_defaults(args):
    defaults = DecodeConfig.defaults(args.strategy)
    if args.k is None:
        args.k = defaults.k
    if args.alpha is None:
        args.alpha = defaults.alpha


def _needs_verifier(args, config):
    return config.normalized().verifying


def cmd_make_corpus(args):
    _echo_config("make-corpus", vars(args))
    os.makedirs(args.out_dir, exist_ok=True)
    if args.kind == "toy":
        corpus = corpora.make_toy_corpus(args.n, seed=args.seed, m_range=(args.m_min, args.m_max))
        lm_corpus = corpus.lm_corpus
    else:
        build = corpora.make_adversarial_build(
            args.n, seed=args.seed, m_range=(args.m_min, args.m_max))
        corpus = build.corpus
        lm_corpus = build.lm_corpus
    write_dataset(corpus.instances, os.path.join(args.out_dir, "corpus.jsonl"))
    corpus.templates.save(os.path.join(args.out_dir, "templates.json"))
    fate.save_pools(corpus.pools, os.path.join(args.out_dir, "pools.json"))
    lm_mod.write_lm_corpus(lm_corpus, os.path.join(args.out_dir, "lm_corpus.jsonl"))
    log.info("wrote %d instances to %s", len(corpus.instances), args.out_dir)
    return EXIT_OK


def cmd_synth_fate(args):
    _echo_config("synth-fate", vars(args))
    instances = parse_dataset(_require_file(args.corpus, "corpus"))
    pools = fate.load_pools(_require_file(args.pools, "pools"))
    templates = fate.TemplateSet.load(_require_file(args.templates, "templates"))
    splits = "all" if args.splits == "all" else int(args.splits)
    build = fate.build_fate(instances, pools, templates,
                            per_instance_splits=splits, seed=args.seed,
                            balance=not args.no_balance)
    fate.write_fate_file(build.instances, args.out_fate)
    fate.write_pairs_file(build.pairs, args.out_pairs)
    build.registry.save(args.out_registry)
    log.info("synthesized %d instances, %d pairs", len(build.instances), len(build.pairs))
    return EXIT_OK


def cmd_train_lm(args):
    _echo_config("train-lm", vars(args))
    corpus = lm_mod.read_lm_corpus(_require_file(args.lm_corpus, "LM corpus"))
    model = lm_mod.train_toy_lm(corpus, order=args.order, smoothing=args.smoothing,
                                n_buckets=args.buckets)
    model.to_file(args.out)
    log.info("trained toy LM: vocab=%d contexts=%d", len(model.vocab_), len(model.counts_))
    return EXIT_OK


def cmd_train_hvm(args):
    _echo_config("train-hvm", vars(args))
    pairs = fate.read_pairs_file(_require_file(args.pairs, "pairs"))
    model = hvm.train_hvm(pairs, epochs=args.epochs, learning_rate=args.lr, seed=args.seed)
    model.to_file(args.out)
    log.info("trained HVM: final_loss=%.6f train_accuracy=%.4f",
             model.metadata_["final_loss"], hvm.cell_accuracy(model, pairs))
    return EXIT_OK


def _run_decode_command(args):
    instances = parse_dataset(_require_file(args.corpus, "corpus"))
    config = _decode_config(args)
    model = _load_lm(args)
    verifier = _load_verifier(args) if _needs_verifier(args, config) else None
    registry = None
    if args.registry:
        registry = PerturbationRegistry.load(_require_file(args.registry, "registry"))
    return instances, config, model, verifier, registry


def cmd_decode(args):
    _resolve_decode_defaults(args)
    _echo_config("decode", vars(args))
    instances, config, model, verifier, _ = _run_decode_command(args)
    with open(args.out, "w", encoding="utf-8") as out_fh:
        trace_fh = open(args.trace_out, "w", encoding="utf-8") if args.trace_out else None
        try:
            for idx, instance in enumerate(instances):
                result = decode(instance, model, verifier, config)
                out_fh.write(json.dumps({
                    "index": idx,
                    "output": result.text,
                    "gen_logprob": result.best.gen_logprob,
                    "combined": result.best.combined,
                    "finished": result.best.finished,
                }, ensure_ascii=False))
                out_fh.write("\n")
                if trace_fh is not None:
                    for record in result.trace.steps:
                        line = {"instance": idx}
                        line.update(record.to_dict())
                        trace_fh.write(json.dumps(line, ensure_ascii=False))
                        trace_fh.write("\n")
        finally:
            if trace_fh is not None:
                trace_fh.close()
    log.info("decoded %d instances -> %s", len(instances), args.out)
    return EXIT_OK


def cmd_eval(args):
    _resolve_decode_defaults(args)
    _echo_config("eval", vars(args))
    instances, config, model, verifier, registry = _run_decode_command(args)
    run = evalkit.run_decode(instances, model, verifier, config,
                             registry=registry, name=args.name or config.strategy)
    run.save(args.report)
    if args.histogram_csv:
        histogram = evalkit.position_histogram(run.traces, bins=args.bins)
        evalkit.write_histogram_csv(histogram, args.histogram_csv)
    log.info("metrics %s", json.dumps(run.metrics, sort_keys=True))
    print(json.dumps(run.metrics, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args):
    _resolve_decode_defaults(args)
    _echo_config("sweep", vars(args))
    instances, config, model, verifier, registry = _run_decode_command(args)
    values = [float(v) if args.axis == "alpha" else int(v) for v in args.values.split(",")]
    rows, runs = evalkit.sweep(instances, model, verifier, config, args.axis, values,
                               registry=registry)
    table = {
        "axis": args.axis,
        "rows": [
            {"value": value, "bleu": b, "hallucination_rate": r} for value, b, r in rows
        ],
    }
    if args.out:
        _write_json(table, args.out)
    for row in table["rows"]:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_compare(args):
    _echo_config("compare", vars(args))
    runs = [evalkit.RunResult.load(_require_file(path, "run")) for path in args.runs]
    text, payload = evalkit.compare_report(runs)
    print(text)
    if args.out:
        _write_json(payload, args.out)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="veribeam",
        description="Faithfulness-aware decoding for knowledge-to-text generation",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="run seed (fixed constant by default, never wall-clock)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", parents=[common], help="generate a synthetic corpus bundle")
    p.add_argument("--kind", choices=["toy", "adversarial"], default="toy")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--m-min", type=int, default=1)
    p.add_argument("--m-max", type=int, default=3)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("synth-fate", parents=[common], help="synthesize perturbed descriptions and labeled pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--pools", required=True)
    p.add_argument("--templates", required=True)
    p.add_argument("--splits", default="1", help="split positions per instance, or 'all'")
    p.add_argument("--no-balance", action="store_true")
    p.add_argument("--out-fate", required=True)
    p.add_argument("--out-pairs", required=True)
    p.add_argument("--out-registry", required=True)
    p.set_defaults(func=cmd_synth_fate)

    p = sub.add_parser("train-lm", parents=[common], help="train the toy n-gram language model")
    p.add_argument("--lm-corpus", required=True)
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--smoothing", type=float, default=1e-4)
    p.add_argument("--buckets", type=int, default=1 << 20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("train-hvm", parents=[common], help="train the tabular hypothesis verifier")
    p.add_argument("--pairs", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_hvm)

    p = sub.add_parser("decode", parents=[common], help="decode a corpus")
    _add_decode_flags(p)
    p.add_argument("--out", required=True, help="outputs JSONL")
    p.add_argument("--trace-out", help="step-trace JSONL")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="decode and compute metrics")
    _add_decode_flags(p)
    p.add_argument("--name", help="run label for reports")
    p.add_argument("--report", required=True, help="run-result JSON")
    p.add_argument("--histogram-csv", help="negative-verdict position histogram CSV")
    p.add_argument("--bins", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="decode once per axis value")
    _add_decode_flags(p, strategy_default="tweak-hvm")
    p.add_argument("--axis", choices=list(evalkit.SWEEP_AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", help="sweep table JSON")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", parents=[common], help="side-by-side report over saved runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", help="comparison JSON")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, format="%(name)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    log.setLevel(logging.INFO if not args.verbose else logging.DEBUG)
    try:
        return args.func(args)
    except UsageError as err:
        sys.stderr.write(json.dumps(
            {"error": str(err), "type": "usage", "exit_code": EXIT_USAGE}) + "\n")
        return EXIT_USAGE
    except Exception as err:  # runtime failure: one machine-parsable line
        sys.stderr.write(json.dumps(
            {"error": str(err), "type": type(err).__name__, "exit_code": EXIT_RUNTIME}) + "\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

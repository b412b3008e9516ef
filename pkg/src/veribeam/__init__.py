"""Faithfulness-aware decoding for knowledge-to-text generation."""

from .decoding import BeamCandidate, DecodeConfig, DecodeResult, decode
from .hvm import TabularHvm, train_hvm
from .knowledge import FactList, FactTriple, K2TInstance, linearize, parse_dataset
from .lm import RemoteLM, ToyNgramLM, Vocabulary, sequence_logprob, train_toy_lm
from .verify import HvmVerifier, NliVerifier, OracleVerifier, Verdict

__all__ = [
    "BeamCandidate",
    "DecodeConfig",
    "DecodeResult",
    "decode",
    "FactList",
    "FactTriple",
    "K2TInstance",
    "linearize",
    "parse_dataset",
    "RemoteLM",
    "ToyNgramLM",
    "Vocabulary",
    "sequence_logprob",
    "train_toy_lm",
    "TabularHvm",
    "train_hvm",
    "HvmVerifier",
    "NliVerifier",
    "OracleVerifier",
    "Verdict",
]

__version__ = "0.1.0"

/**
 * Wire protocol shared with the decoding engine: one JSON object per line
 * over a stream socket. Ops: next_logprobs, nli_score, hvm_table. Errors are
 * reported as {"error": "..."} without dropping the connection.
 *
 * JSON cannot carry -Infinity, so log-probabilities are floored at LOG_FLOOR;
 * exp(LOG_FLOOR) underflows to exactly 0, preserving normalization.
 */

import { createHash } from 'node:crypto';

export const LOG_FLOOR = -1e9;

export interface NextLogprobsRequest {
  op: 'next_logprobs';
  prefix: number[];
  facts_linearized: string;
  vocab_checksum: string;
}

export interface NliScoreRequest {
  op: 'nli_score';
  premise: string;
  hypothesis: string;
}

export interface HvmTableRequest {
  op: 'hvm_table';
  triples: [string, string, string][];
  backward: string;
  forward: string;
}

export type BridgeRequest = NextLogprobsRequest | NliScoreRequest | HvmTableRequest;

export type BridgeResponse =
  | { logprobs: number[] }
  | { entail_prob: number }
  | { table: [number, number][] }
  | { error: string };

export function vocabChecksum(tokens: string[], bosId: number, eosId: number): string {
  const payload = tokens.join('\n') + `\n#bos=${bosId}#eos=${eosId}`;
  return createHash('sha256').update(payload, 'utf8').digest('hex');
}

export function hashBucket(factsLinearized: string, nBuckets: number): number {
  const digest = createHash('sha256').update(factsLinearized, 'utf8').digest();
  const high = digest.readBigUInt64BE(0);
  return Number(high % BigInt(nBuckets));
}

function isStringTriple(row: unknown): row is [string, string, string] {
  return Array.isArray(row) && row.length === 3 && row.every((f) => typeof f === 'string');
}

/** Validate an incoming request object; returns an error message or null. */
export function validateRequest(request: unknown): string | null {
  if (typeof request !== 'object' || request === null || Array.isArray(request)) {
    return 'request must be a JSON object';
  }
  const req = request as Record<string, unknown>;
  switch (req.op) {
    case 'next_logprobs': {
      if (!Array.isArray(req.prefix) || req.prefix.length === 0
          || !req.prefix.every((t) => Number.isInteger(t))) {
        return 'prefix must be a non-empty list of token ids';
      }
      if (typeof req.facts_linearized !== 'string') {
        return 'facts_linearized must be a string';
      }
      if (typeof req.vocab_checksum !== 'string') {
        return 'vocab_checksum must be a string';
      }
      return null;
    }
    case 'nli_score': {
      if (typeof req.premise !== 'string' || typeof req.hypothesis !== 'string') {
        return 'premise and hypothesis must be strings';
      }
      if (req.hypothesis.trim().length === 0) {
        return 'hypothesis must be non-empty';
      }
      return null;
    }
    case 'hvm_table': {
      if (!Array.isArray(req.triples) || req.triples.length === 0
          || !req.triples.every(isStringTriple)) {
        return 'triples must be a non-empty list of [subject, relation, object]';
      }
      if (typeof req.backward !== 'string' || typeof req.forward !== 'string') {
        return 'backward and forward must be strings';
      }
      return null;
    }
    default:
      return `unknown op ${JSON.stringify(req.op)}`;
  }
}

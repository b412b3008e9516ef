/**
 * Autoregressive generator backend: loads the engine's toy-lm JSON model file
 * and serves full-vocabulary log distributions. The arithmetic mirrors the
 * training side exactly: add-constant smoothing over count tables keyed by
 * (fact hash bucket, n-gram context), uniform fallback when both counts and
 * smoothing are zero, and an absorbing eos.
 */

import { readFileSync } from 'node:fs';
import { LOG_FLOOR, hashBucket, vocabChecksum } from './protocol.js';

interface ToyLmFile {
  format: string;
  order: number;
  smoothing: number;
  n_buckets: number;
  vocab: { tokens: string[]; bos_id: number; eos_id: number };
  counts: [number, number[], [number, number][]][];
}

export class ToyLm {
  readonly order: number;
  readonly smoothing: number;
  readonly nBuckets: number;
  readonly tokens: string[];
  readonly bosId: number;
  readonly eosId: number;
  readonly checksum: string;
  private counts: Map<string, Map<number, number>>;

  constructor(path: string) {
    const data = JSON.parse(readFileSync(path, 'utf8')) as ToyLmFile;
    if (data.format !== 'toy-lm/v1') {
      throw new Error(`unsupported toy LM format in ${path}`);
    }
    this.order = data.order;
    this.smoothing = data.smoothing;
    this.nBuckets = data.n_buckets;
    this.tokens = data.vocab.tokens;
    this.bosId = data.vocab.bos_id;
    this.eosId = data.vocab.eos_id;
    this.checksum = vocabChecksum(this.tokens, this.bosId, this.eosId);
    this.counts = new Map();
    for (const [bucket, ctx, slot] of data.counts) {
      this.counts.set(this.key(bucket, ctx), new Map(slot));
    }
  }

  private key(bucket: number, ctx: number[]): string {
    return `${bucket}|${ctx.join(',')}`;
  }

  get vocabSize(): number {
    return this.tokens.length;
  }

  nextLogprobs(prefix: number[], factsLinearized: string): number[] {
    if (prefix[0] !== this.bosId) {
      throw new Error('prefix must begin with bos');
    }
    for (const id of prefix) {
      if (!Number.isInteger(id) || id < 0 || id >= this.vocabSize) {
        throw new Error(`token id ${id} out of range`);
      }
    }
    const V = this.vocabSize;
    if (prefix[prefix.length - 1] === this.eosId) {
      const vec = new Array<number>(V).fill(LOG_FLOOR);
      vec[this.eosId] = 0.0;
      return vec;
    }
    const bucket = hashBucket(factsLinearized, this.nBuckets);
    const ctx = this.order === 1 ? [] : prefix.slice(-(this.order - 1));
    const slot = this.counts.get(this.key(bucket, ctx));
    const gamma = this.smoothing;
    let total = 0;
    if (slot) {
      for (const count of slot.values()) total += count;
    }
    const vec = new Array<number>(V);
    if (total === 0 && gamma === 0) {
      vec.fill(-Math.log(V));
      return vec;
    }
    const denom = total + gamma * V;
    for (let tok = 0; tok < V; tok++) {
      const count = slot?.get(tok) ?? 0;
      const p = (count + gamma) / denom;
      vec[tok] = p > 0 ? Math.log(p) : LOG_FLOOR;
    }
    return vec;
  }
}

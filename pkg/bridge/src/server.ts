#!/usr/bin/env node
/**
 * Bridge server: drives a generator and verifiers behind the newline-JSON
 * wire protocol so the decoding engine can use them without linking any
 * model runtime. One process serves all three ops; roles are optional
 * (requests for an unloaded role get an error response). Connections are
 * handled concurrently, requests within a connection serially; every line
 * receives exactly one response line and malformed input never drops the
 * connection.
 */

import { createServer, type Server, type Socket } from 'node:net';
import { LOG_FLOOR, validateRequest, type BridgeRequest, type BridgeResponse } from './protocol.js';
import { ToyLm } from './toylm.js';
import { TableVerifier, lexicalEntailProb } from './verifiers.js';

export interface BridgeOptions {
  generatorPath?: string;
  hvmPath?: string;
}

export class BridgeSession {
  private generator?: ToyLm;
  private verifier?: TableVerifier;
  requestCount = 0;

  constructor(options: BridgeOptions) {
    if (options.generatorPath) {
      this.generator = new ToyLm(options.generatorPath);
    }
    if (options.hvmPath) {
      this.verifier = new TableVerifier(options.hvmPath);
    }
  }

  handle(request: unknown): BridgeResponse {
    this.requestCount += 1;
    const problem = validateRequest(request);
    if (problem !== null) {
      return { error: problem };
    }
    const req = request as BridgeRequest;
    try {
      switch (req.op) {
        case 'next_logprobs': {
          if (!this.generator) {
            return { error: 'no generator loaded' };
          }
          if (req.vocab_checksum !== this.generator.checksum) {
            return { error: 'vocab_checksum mismatch' };
          }
          const vec = this.generator.nextLogprobs(req.prefix, req.facts_linearized);
          return { logprobs: vec.map((v) => (Number.isFinite(v) ? v : LOG_FLOOR)) };
        }
        case 'nli_score':
          return { entail_prob: lexicalEntailProb(req.premise, req.hypothesis) };
        case 'hvm_table': {
          if (!this.verifier) {
            return { error: 'no verifier loaded' };
          }
          return { table: this.verifier.table(req.triples, req.backward, req.forward) };
        }
      }
    } catch (err) {
      return { error: err instanceof Error ? err.message : String(err) };
    }
  }
}

export function createBridgeServer(options: BridgeOptions): Server {
  const session = new BridgeSession(options);
  return createServer((socket: Socket) => {
    let buffer = '';
    socket.on('data', (chunk) => {
      buffer += chunk.toString('utf8');
      let newline;
      while ((newline = buffer.indexOf('\n')) >= 0) {
        const line = buffer.slice(0, newline);
        buffer = buffer.slice(newline + 1);
        if (line.trim().length === 0) continue;
        let response: BridgeResponse;
        try {
          response = session.handle(JSON.parse(line));
        } catch {
          response = { error: 'invalid JSON' };
        }
        socket.write(JSON.stringify(response) + '\n');
      }
    });
    socket.on('error', () => socket.destroy());
  });
}

function parseArgs(argv: string[]): { port: number; options: BridgeOptions } {
  let port = 7799;
  const options: BridgeOptions = {};
  for (let i = 0; i < argv.length; i++) {
    switch (argv[i]) {
      case '--port':
        port = Number(argv[++i]);
        break;
      case '--generator':
        options.generatorPath = argv[++i];
        break;
      case '--hvm':
        options.hvmPath = argv[++i];
        break;
      default:
        throw new Error(`unknown flag ${argv[i]} (use --port, --generator, --hvm)`);
    }
  }
  return { port, options };
}

const isMain = process.argv[1] && import.meta.url.endsWith(process.argv[1].split('/').pop()!);
if (isMain) {
  const { port, options } = parseArgs(process.argv.slice(2));
  const server = createBridgeServer(options);
  server.listen(port, '127.0.0.1', () => {
    const address = server.address();
    const bound = typeof address === 'object' && address ? address.port : port;
    console.log(`veribeam-bridge listening on 127.0.0.1:${bound}`);
  });
}

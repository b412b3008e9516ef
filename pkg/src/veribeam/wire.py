"""Newline-delimited JSON wire protocol shared with external model bridges.

One request object per line, one response object per line, over a stream
socket. Ops: ``next_logprobs``, ``nli_score``, ``hvm_table``. Error responses
are ``{"error": "..."}``. See docs/protocol.md for the full schemas.
"""

from __future__ import annotations

import hashlib
import json
import socket


class TransportError(ConnectionError):
    """The socket failed: connect, send, or receive."""


class ProtocolError(ValueError):
    """The peer violated the wire protocol (bad JSON, bad schema, or a
    server-reported error such as a vocabulary checksum mismatch)."""


def vocab_checksum(tokens, bos_id, eos_id) -> str:
    """Stable digest both endpoints compute over the vocabulary."""
    payload = "\n".join(tokens) + f"\n#bos={bos_id}#eos={eos_id}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def parse_address(address: str):
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


class Connection:
    """One serial request/response channel to a bridge server."""

    def __init__(self, address, timeout=30.0):
        self.address = address
        host, port = parse_address(address)
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as err:
            raise TransportError(f"cannot connect to {address}: {err}") from None
        self._reader = self._sock.makefile("r", encoding="utf-8", newline="\n")

    def close(self):
        try:
            self._reader.close()
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, payload: dict) -> dict:
        line = json.dumps(payload, ensure_ascii=False)
        try:
            self._sock.sendall(line.encode("utf-8") + b"\n")
            raw = self._reader.readline()
        except OSError as err:
            raise TransportError(f"request to {self.address} failed: {err}") from None
        if not raw:
            raise TransportError(f"connection to {self.address} closed by peer")
        try:
            response = json.loads(raw)
        except json.JSONDecodeError:
            raise ProtocolError(f"peer sent invalid JSON: {raw[:200]!r}") from None
        if not isinstance(response, dict):
            raise ProtocolError(f"peer response is not an object: {raw[:200]!r}")
        if "error" in response:
            raise ProtocolError(f"peer reported error: {response['error']}")
        return response


def expect_number_list(response, key, length=None):
    values = response.get(key)
    if not isinstance(values, list) or not all(isinstance(v, (int, float)) for v in values):
        raise ProtocolError(f"response field {key!r} must be a list of numbers")
    if length is not None and len(values) != length:
        raise ProtocolError(f"response field {key!r} has length {len(values)}, expected {length}")
    return [float(v) for v in values]

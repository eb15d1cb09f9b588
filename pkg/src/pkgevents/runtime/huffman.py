"""Canonical Huffman byte codec.

Container layout: 256 code lengths (one byte per symbol, 0 = unused), the
payload length in bits as little-endian uint64, then the MSB-first bitstream
padded with zeros to a whole byte.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numba
import numpy as np

from ..errors import ParseError

TABLE_BYTES = 256
HEADER_BYTES = TABLE_BYTES + 8


class CodecError(ParseError):
    category = "corrupt_encoding"


def code_lengths(freqs) -> np.ndarray:
    """Huffman code length per byte value; a lone symbol gets a 1-bit code."""
    freqs = np.asarray(freqs, dtype=np.int64)
    lengths = np.zeros(256, dtype=np.int64)
    used = np.flatnonzero(freqs)
    if len(used) == 1:
        lengths[used[0]] = 1
        return lengths
    # (weight, tiebreak, members); leaves break ties by symbol, merges by creation order
    heap = [(int(freqs[s]), int(s), [int(s)]) for s in used]
    heapq.heapify(heap)
    next_id = 256
    while len(heap) > 1:
        w1, _, a = heapq.heappop(heap)
        w2, _, b = heapq.heappop(heap)
        lengths[a] += 1
        lengths[b] += 1
        heapq.heappush(heap, (w1 + w2, next_id, a + b))
        next_id += 1
    return lengths


def kraft_ok(lengths) -> bool:
    lengths = [int(l) for l in lengths if l]
    if not lengths:
        return False
    top = max(lengths)
    return sum(1 << (top - l) for l in lengths) <= (1 << top)


def canonical_codes(lengths) -> np.ndarray:
    """Codes assigned in (length, symbol) order, each the previous plus one."""
    lengths = np.asarray(lengths, dtype=np.int64)
    codes = np.zeros(256, dtype=object)
    code, prev_len = 0, 0
    for sym in sorted(np.flatnonzero(lengths), key=lambda s: (lengths[s], s)):
        code <<= int(lengths[sym]) - prev_len
        codes[sym] = code
        prev_len = int(lengths[sym])
        code += 1
    return codes


@dataclass
class EncodedModel:
    lengths: np.ndarray  # uint8[256]
    n_bits: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return bytes(self.lengths.astype(np.uint8)) + struct.pack("<Q", self.n_bits) + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> EncodedModel:
        if len(blob) < HEADER_BYTES:
            raise CodecError("encoded stream shorter than its header")
        lengths = np.frombuffer(blob[:TABLE_BYTES], dtype=np.uint8).copy()
        (n_bits,) = struct.unpack("<Q", blob[TABLE_BYTES:HEADER_BYTES])
        return cls(lengths, n_bits, bytes(blob[HEADER_BYTES:]))


def _bit_matrix(lengths, codes):
    width = max(int(lengths.max()), 1)
    mat = np.zeros((256, width), dtype=np.uint8)
    for sym in np.flatnonzero(lengths):
        n = int(lengths[sym])
        bits = [(codes[sym] >> (n - 1 - j)) & 1 for j in range(n)]
        mat[sym, :n] = bits
    return mat


def huffman_encode(data: bytes, chunk: int = 1 << 20) -> EncodedModel:
    data = np.frombuffer(bytes(data), dtype=np.uint8)
    if len(data) == 0:
        raise ValueError("cannot encode an empty byte sequence")
    freqs = np.bincount(data, minlength=256)
    lengths = code_lengths(freqs)
    mat = _bit_matrix(lengths, canonical_codes(lengths))
    width = mat.shape[1]
    pieces = []
    for start in range(0, len(data), chunk):
        part = data[start:start + chunk]
        valid = np.arange(width) < lengths[part][:, None]
        pieces.append(mat[part][valid])
    bits = np.concatenate(pieces)
    n_bits = int((freqs * lengths).sum())
    assert len(bits) == n_bits
    return EncodedModel(lengths.astype(np.uint8), n_bits, np.packbits(bits).tobytes())


@numba.njit(cache=True)
def _decode_bits(payload, n_bits, first, count, offset, symbols, max_len, out):
    pos = 0
    n_out = 0
    while pos < n_bits:
        code = 0
        length = 0
        while True:
            if pos >= n_bits or length >= max_len:
                return -1
            bit = (payload[pos >> 3] >> (7 - (pos & 7))) & 1
            code = (code << 1) | bit
            pos += 1
            length += 1
            if count[length] > 0 and code >= first[length] and code - first[length] < count[length]:
                out[n_out] = symbols[offset[length] + code - first[length]]
                n_out += 1
                break
    return n_out


def huffman_decode(encoded) -> bytes:
    if isinstance(encoded, (bytes, bytearray, memoryview)):
        encoded = EncodedModel.from_bytes(bytes(encoded))
    lengths = np.asarray(encoded.lengths, dtype=np.int64)
    if not kraft_ok(lengths):
        raise CodecError("code-length table violates the Kraft inequality")
    if len(encoded.payload) != (encoded.n_bits + 7) // 8:
        raise CodecError(f"bit count {encoded.n_bits} does not match "
                         f"{len(encoded.payload)} payload bytes")
    max_len = int(lengths.max())
    if max_len > 62:
        raise CodecError("code lengths above 62 bits are not supported")
    order = sorted(np.flatnonzero(lengths), key=lambda s: (lengths[s], s))
    symbols = np.asarray(order, dtype=np.uint8)
    count = np.bincount(lengths[order], minlength=max_len + 1).astype(np.int64)
    first = np.zeros(max_len + 1, dtype=np.int64)
    offset = np.zeros(max_len + 1, dtype=np.int64)
    code = 0
    for length in range(1, max_len + 1):
        code = (code + count[length - 1]) << 1 if length > 1 else 0
        first[length] = code
        offset[length] = offset[length - 1] + count[length - 1] if length > 1 else 0
    payload = np.frombuffer(encoded.payload, dtype=np.uint8)
    out = np.empty(encoded.n_bits, dtype=np.uint8)
    n = _decode_bits(payload, encoded.n_bits, first, count, offset, symbols, max_len, out)
    if n < 0:
        raise CodecError("bitstream ends inside a code or contains an unassigned code")
    return out[:n].tobytes()

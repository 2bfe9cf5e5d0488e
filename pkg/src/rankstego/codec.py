"""Bit-level machinery: canonical Huffman rank codes, keystream XOR, beta-bit chunking."""

from __future__ import annotations

import heapq
import io
import secrets
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

from .errors import ModelFormatError, ParameterError, RankRangeError, SymbolRangeError

CODEBOOK_MAGIC = b"RCB1"
DEFAULT_TABLE_SIZE = 256
MAX_BETA = 16


class BitStream:
    """Immutable sequence of bits, most significant first when packed to bytes."""

    __slots__ = ("_bits",)

    def __init__(self, bits: Iterable[int] = ()) -> None:
        data = bytes(bits)
        if data.strip(b"\x00\x01"):
            raise ValueError("bits must be 0 or 1")
        self._bits = data

    @classmethod
    def from_str(cls, text: str) -> "BitStream":
        return cls(int(c) for c in text)

    @classmethod
    def from_int(cls, value: int, width: int) -> "BitStream":
        if value < 0 or value >> width:
            raise ValueError(f"{value} does not fit in {width} bits")
        return cls((value >> (width - 1 - i)) & 1 for i in range(width))

    @classmethod
    def from_bytes(cls, data: bytes, nbits: int | None = None) -> "BitStream":
        if nbits is None:
            nbits = 8 * len(data)
        if nbits > 8 * len(data):
            raise ValueError("not enough bytes for the requested bit length")
        return cls((data[i >> 3] >> (7 - (i & 7))) & 1 for i in range(nbits))

    def to_bytes(self) -> bytes:
        """Pack MSB-first; the last byte is zero-padded on the right."""
        out = bytearray((len(self._bits) + 7) // 8)
        for i, b in enumerate(self._bits):
            if b:
                out[i >> 3] |= 0x80 >> (i & 7)
        return bytes(out)

    def to_int(self) -> int:
        return int(str(self), 2) if self._bits else 0

    def __len__(self) -> int:
        return len(self._bits)

    def __iter__(self) -> Iterator[int]:
        return iter(self._bits)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return BitStream(self._bits[index])
        return self._bits[index]

    def __add__(self, other: "BitStream") -> "BitStream":
        return BitStream(self._bits + other._bits)

    def __xor__(self, other: "BitStream") -> "BitStream":
        if len(self) != len(other):
            raise ValueError("XOR needs equal-length streams")
        return BitStream(a ^ b for a, b in zip(self._bits, other._bits))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitStream):
            return NotImplemented
        return self._bits == other._bits

    def __hash__(self) -> int:
        return hash(self._bits)

    def __str__(self) -> str:
        return "".join("1" if b else "0" for b in self._bits)

    def __repr__(self) -> str:
        text = str(self)
        if len(text) > 64:
            text = text[:61] + "..."
        return f"BitStream({text!r}, len={len(self)})"

    @staticmethod
    def concat(parts: Iterable["BitStream"]) -> "BitStream":
        return BitStream(b"".join(p._bits for p in parts))


# --- canonical Huffman --------------------------------------------------------


def huffman_code_lengths(weights: Sequence[int]) -> list[int]:
    """Code length per symbol; merges by (weight, lowest contained symbol)."""
    if len(weights) < 2:
        raise ParameterError("need at least two symbols")
    heap = [(w, s, [s]) for s, w in enumerate(weights)]
    heapq.heapify(heap)
    lengths = [0] * len(weights)
    while len(heap) > 1:
        w1, s1, members1 = heapq.heappop(heap)
        w2, s2, members2 = heapq.heappop(heap)
        for s in members1:
            lengths[s] += 1
        for s in members2:
            lengths[s] += 1
        heapq.heappush(heap, (w1 + w2, min(s1, s2), members1 + members2))
    return lengths


def canonical_codes(lengths: Sequence[int]) -> list[str]:
    codes = [""] * len(lengths)
    code = 0
    prev = 0
    for length, sym in sorted((l, s) for s, l in enumerate(lengths)):
        code <<= length - prev
        codes[sym] = format(code, f"0{length}b")
        code += 1
        prev = length
    return codes


@dataclass(frozen=True)
class Codebook:
    """Prefix-free code for ranks ``0..K-1`` plus an escape for larger ranks.

    Only code lengths are stored; the codes themselves are the canonical
    assignment, so two parties holding the same lengths hold the same code.
    Symbol ``K`` is the escape, followed by the rank in ``escape_width`` bits.
    """

    lengths: tuple[int, ...]
    escape_width: int
    codes: tuple[str, ...] = field(init=False, repr=False, compare=False)
    _lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.lengths) < 3:
            raise ParameterError("codebook needs K >= 2 direct symbols plus escape")
        if any(l < 1 for l in self.lengths):
            raise ModelFormatError("code lengths must be positive")
        if sum(2.0 ** -l for l in self.lengths) > 1.0 + 1e-12:
            raise ModelFormatError("code lengths violate the Kraft inequality")
        if self.escape_width < 1:
            raise ParameterError("escape width must be positive")
        codes = canonical_codes(self.lengths)
        object.__setattr__(self, "codes", tuple(codes))
        object.__setattr__(self, "_lookup", {c: s for s, c in enumerate(codes)})

    @property
    def table_size(self) -> int:
        return len(self.lengths) - 1

    @property
    def escape_code(self) -> str:
        return self.codes[-1]

    @property
    def direct_codes(self) -> dict[int, str]:
        return dict(enumerate(self.codes[:-1]))

    def expected_length(self, weights: Sequence[int]) -> float:
        total = sum(weights)
        return sum(w * l for w, l in zip(weights, self.lengths)) / total

    def codeword(self, rank: int) -> str:
        if rank < 0:
            raise RankRangeError(f"negative rank {rank}")
        if rank < self.table_size:
            return self.codes[rank]
        if rank >> self.escape_width:
            raise RankRangeError(f"rank {rank} does not fit the {self.escape_width}-bit escape")
        return self.escape_code + format(rank, f"0{self.escape_width}b")

    # container -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        k = self.table_size
        out = [CODEBOOK_MAGIC, struct.pack("<II", k, self.escape_width)]
        out.extend(struct.pack("<II", s, l) for s, l in enumerate(self.lengths))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codebook":
        stream = io.BytesIO(data)
        if stream.read(4) != CODEBOOK_MAGIC:
            raise ModelFormatError("not an RCB1 codebook")
        head = stream.read(8)
        if len(head) != 8:
            raise ModelFormatError("truncated codebook header")
        k, width = struct.unpack("<II", head)
        lengths: dict[int, int] = {}
        for _ in range(k + 1):
            raw = stream.read(8)
            if len(raw) != 8:
                raise ModelFormatError("truncated codebook table")
            sym, length = struct.unpack("<II", raw)
            lengths[sym] = length
        if sorted(lengths) != list(range(k + 1)):
            raise ModelFormatError("codebook symbols must cover 0..K exactly once")
        if stream.read(1):
            raise ModelFormatError("trailing bytes after codebook table")
        return cls(tuple(lengths[s] for s in range(k + 1)), width)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        return cls.from_bytes(Path(path).read_bytes())


def escape_width_for(vocab_size: int) -> int:
    """ceil(log2 |V|), at least one bit."""
    return max(1, (vocab_size - 1).bit_length())


def codebook_weights(rank_histogram: Mapping[int, int], table_size: int) -> list[int]:
    """Huffman weights for ranks ``0..K-1`` then the escape symbol.

    Ranks never seen in calibration get weight 1 so unseen ranks keep short
    codes; the escape weighs the overflow mass plus one.
    """
    weights = [max(int(rank_histogram.get(r, 0)), 1) for r in range(table_size)]
    overflow = sum(c for r, c in rank_histogram.items() if r >= table_size)
    weights.append(overflow + 1)
    return weights


def build_codebook(
    rank_histogram: Mapping[int, int],
    table_size: int = DEFAULT_TABLE_SIZE,
    vocab_size: int | None = None,
) -> Codebook:
    if table_size < 2:
        raise ParameterError("table size K must be >= 2")
    if not rank_histogram:
        raise ParameterError("rank histogram is empty")
    if any(c < 0 for c in rank_histogram.values()) or any(r < 0 for r in rank_histogram):
        raise ParameterError("histogram ranks and counts must be non-negative")
    if vocab_size is None:
        vocab_size = max(table_size, max(rank_histogram) + 1)
    if table_size > vocab_size:
        raise ParameterError("table size K cannot exceed the vocabulary size")
    lengths = huffman_code_lengths(codebook_weights(rank_histogram, table_size))
    return Codebook(tuple(lengths), escape_width_for(vocab_size))


def encode_ranks(codebook: Codebook, ranks: Iterable[int]) -> BitStream:
    return BitStream.from_str("".join(codebook.codeword(r) for r in ranks))


def decode_ranks(codebook: Codebook, bits: BitStream) -> list[int]:
    """Greedy prefix decode; an incomplete trailing codeword is dropped as padding."""
    lookup = codebook._lookup
    k = codebook.table_size
    width = codebook.escape_width
    text = str(bits)
    ranks: list[int] = []
    i = 0
    start = 0
    while i < len(text):
        i += 1
        sym = lookup.get(text[start:i])
        if sym is None:
            continue
        if sym == k:
            if i + width > len(text):
                break
            ranks.append(int(text[i:i + width], 2))
            i += width
        else:
            ranks.append(sym)
        start = i
    return ranks


# --- keystream ----------------------------------------------------------------


@dataclass(frozen=True)
class SecretKey:
    """32-byte shared secret.  ``repr`` never shows the key material."""

    key: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.key) != 32:
            raise ParameterError("secret key must be exactly 32 bytes")

    @classmethod
    def from_hex(cls, text: str) -> "SecretKey":
        text = text.strip()
        if len(text) != 64:
            raise ParameterError("key must be 64 hex characters")
        try:
            return cls(bytes.fromhex(text))
        except ValueError as exc:
            raise ParameterError("key is not valid hex") from exc

    @classmethod
    def generate(cls) -> "SecretKey":
        return cls(secrets.token_bytes(32))

    def hex(self) -> str:
        return self.key.hex()

    def __repr__(self) -> str:
        return "SecretKey(<redacted>)"


def keystream(key: SecretKey | bytes, nbytes: int) -> bytes:
    """ChaCha20 keystream, all-zero 96-bit nonce, block counter starting at 0."""
    raw = key.key if isinstance(key, SecretKey) else SecretKey(key).key
    # cryptography takes a 16-byte nonce: 32-bit LE counter then 96-bit nonce
    encryptor = Cipher(algorithms.ChaCha20(raw, bytes(16)), mode=None).encryptor()
    return encryptor.update(bytes(nbytes))


def keystream_xor(key: SecretKey | bytes, bits: BitStream) -> BitStream:
    n = len(bits)
    if n == 0:
        return BitStream()
    stream = BitStream.from_bytes(keystream(key, (n + 7) // 8), n)
    return bits ^ stream


# --- beta-bit symbols -----------------------------------------------------------


def _check_beta(beta: int) -> None:
    if not 1 <= beta <= MAX_BETA:
        raise ParameterError(f"beta must be in 1..{MAX_BETA}")


def to_beta_symbols(bits: BitStream, beta: int) -> list[int]:
    """Big-endian beta-bit chunks; a short final chunk is zero-padded on the right."""
    _check_beta(beta)
    text = str(bits)
    if len(text) % beta:
        text += "0" * (beta - len(text) % beta)
    return [int(text[i:i + beta], 2) for i in range(0, len(text), beta)]


def from_beta_symbols(symbols: Sequence[int], beta: int) -> BitStream:
    _check_beta(beta)
    for d in symbols:
        if not 0 <= d < (1 << beta):
            raise SymbolRangeError(f"symbol {d} does not fit in {beta} bits")
    return BitStream.from_str("".join(format(d, f"0{beta}b") for d in symbols))

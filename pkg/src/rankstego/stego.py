"""Entropy-gated embedding and the matching extraction.

Sender side::

    text -> tokens -> ranks (private context) -> Huffman bits -> XOR keystream
         -> beta-bit symbols -> generation under the stego context

At each generation step the top ``2**beta`` candidates (EOS excluded) are
renormalized and their entropy compared with ``alpha * beta``.  Open gate:
the next symbol picks the candidate at that index.  Closed gate: an ordinary
temperature sample, carrying nothing.  The receiver recomputes the same gate
per token, so ungated tokens need no synchronization at all.
"""

from __future__ import annotations

import functools
import json
import math
import random
import warnings
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Any, Mapping, Sequence

import mpmath

from .codec import (
    DEFAULT_TABLE_SIZE,
    MAX_BETA,
    BitStream,
    Codebook,
    SecretKey,
    build_codebook,
    decode_ranks,
    encode_ranks,
    from_beta_symbols,
    keystream_xor,
    to_beta_symbols,
)
from .errors import (
    CapacityExhaustedError,
    DesyncError,
    ParameterError,
    RankRangeError,
    StegoError,
)
from .lm import Distribution, ModelProvider, Vocabulary, apply_temperature, query
from .ranking import compress_message, decompress_ranks_with_status

DEFAULT_ALPHA = 0.6
DEFAULT_BETA = 3
DEFAULT_TEMPERATURE = 0.7
DEFAULT_MAX_TOKENS = 4096

# float entropies closer than this to the threshold are re-decided at high precision
_GATE_MARGIN = 1e-9
_GATE_DIGITS = 120


class EmptyPayloadError(DesyncError):
    """The stego text carries no gated tokens, hence no message."""


@dataclass(frozen=True)
class StegoConfig:
    """Everything both parties must share, plus the sender's sampling seed."""

    key: SecretKey
    alpha: float = DEFAULT_ALPHA
    beta: int = DEFAULT_BETA
    temperature: float = DEFAULT_TEMPERATURE
    private_context: tuple[int, ...] = ()
    stego_context: tuple[int, ...] = ()
    max_tokens: int = DEFAULT_MAX_TOKENS
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ParameterError("alpha must lie in (0, 1)")
        if not 1 <= self.beta <= MAX_BETA:
            raise ParameterError(f"beta must lie in 1..{MAX_BETA}")
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if self.max_tokens < 1:
            raise ParameterError("max_tokens must be >= 1")
        object.__setattr__(self, "private_context", tuple(self.private_context))
        object.__setattr__(self, "stego_context", tuple(self.stego_context))

    @property
    def threshold(self) -> Fraction:
        """alpha * beta, with alpha read as the decimal it was written as."""
        return Fraction(repr(float(self.alpha))) * self.beta

    def check_vocabulary(self, vocab: Vocabulary) -> None:
        # EOS is masked during generation, so one token fewer is selectable
        if (1 << self.beta) > len(vocab) - 1:
            raise ParameterError(
                f"2**beta = {1 << self.beta} candidates exceed the {len(vocab) - 1} selectable tokens"
            )
        for tid in (*self.private_context, *self.stego_context):
            if not 0 <= tid < len(vocab):
                raise ParameterError(f"context token id {tid} outside vocabulary")

    def replace(self, **changes: Any) -> "StegoConfig":
        return replace(self, **changes)

    # session config file ------------------------------------------------------

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], vocab: Vocabulary, key: SecretKey | None = None) -> "StegoConfig":
        """Build from the JSON session schema; contexts are text, tokenized with ``vocab``."""
        known = {
            "alpha", "beta", "temperature", "key", "private_context",
            "stego_context", "max_tokens", "rng_seed",
        }
        extra = set(data) - known
        if extra:
            raise ParameterError(f"unknown config fields: {sorted(extra)}")
        if key is None:
            if "key" not in data:
                raise ParameterError("no key given in config, flag or environment")
            key = SecretKey.from_hex(str(data["key"]))
        return cls(
            key=key,
            alpha=float(data.get("alpha", DEFAULT_ALPHA)),
            beta=int(data.get("beta", DEFAULT_BETA)),
            temperature=float(data.get("temperature", DEFAULT_TEMPERATURE)),
            private_context=tuple(_encode_context(vocab, data.get("private_context", ""))),
            stego_context=tuple(_encode_context(vocab, data.get("stego_context", ""))),
            max_tokens=int(data.get("max_tokens", DEFAULT_MAX_TOKENS)),
            rng_seed=int(data.get("rng_seed", 0)),
        )

    def to_dict(self, vocab: Vocabulary, include_key: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "alpha": self.alpha,
            "beta": self.beta,
            "temperature": self.temperature,
            "private_context": vocab.decode(self.private_context),
            "stego_context": vocab.decode(self.stego_context),
            "max_tokens": self.max_tokens,
            "rng_seed": self.rng_seed,
        }
        if include_key:
            out["key"] = self.key.hex()
        return out

    def summary(self) -> dict[str, Any]:
        """Key-free echo for reports."""
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "rng_seed": self.rng_seed,
            "private_context_len": len(self.private_context),
            "stego_context_len": len(self.stego_context),
        }


def _encode_context(vocab: Vocabulary, text: str) -> list[int]:
    ids, unknown = vocab.encode(text)
    if unknown:
        warnings.warn(f"context words mapped to <unk>: {unknown}", stacklevel=3)
    return ids


def load_config(path, vocab: Vocabulary, key: SecretKey | None = None) -> StegoConfig:
    with open(path, encoding="utf-8") as fh:
        return StegoConfig.from_dict(json.load(fh), vocab, key)


# --- entropy gate ---------------------------------------------------------------


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[int, ...]
    # un-normalized candidate weights in the provider's arithmetic
    weights: tuple
    entropy: float
    exact: bool = True

    @property
    def normalized_probs(self) -> tuple:
        total = sum(self.weights)
        if not total:
            return tuple(0 for _ in self.weights)
        if self.exact:
            return tuple(Fraction(w, total) for w in self.weights)
        return tuple(w / total for w in self.weights)

    def index(self, token: int) -> int | None:
        try:
            return self.candidates.index(token)
        except ValueError:
            return None

    def is_gated(self, threshold: Fraction | float) -> bool:
        """Decide ``entropy >= threshold``.

        Exact weights near the threshold are re-evaluated at 120 digits so the
        decision never rides on the last bits of a libm ``log2``.
        """
        t = float(threshold)
        if not self.exact or abs(self.entropy - t) > _GATE_MARGIN:
            return self.entropy >= t
        return _precise_entropy(self.weights) >= mpmath_fraction(threshold)


def mpmath_fraction(value: Fraction | float) -> mpmath.mpf:
    value = Fraction(value)
    with mpmath.workdps(_GATE_DIGITS):
        return mpmath.mpf(value.numerator) / value.denominator


def _precise_entropy(weights: Sequence[int]) -> mpmath.mpf:
    with mpmath.workdps(_GATE_DIGITS):
        total = mpmath.mpf(sum(weights))
        h = mpmath.mpf(0)
        for w in weights:
            if w:
                p = mpmath.mpf(w) / total
                h -= p * mpmath.log(p, 2)
        # entropies within 1e-100 of the threshold are treated as equal to it
        return h + mpmath.mpf(10) ** -100


def _float_entropy(probs: Sequence[float]) -> float:
    h = 0.0
    for p in probs:
        if p > 0.0:
            h -= p * math.log2(p)
    return h


def norm_entropy(dist: Distribution, beta: int, exclude: int | None = None) -> CandidateSet:
    """Top ``2**beta`` candidates (skipping ``exclude``), renormalized, and their entropy in bits."""
    size = 1 << beta
    candidates = dist.top(size, exclude=exclude)
    if len(candidates) < size:
        raise ParameterError(f"distribution has fewer than {size} selectable tokens")
    raw = dist.weights[candidates]
    if dist.exact:
        weights = tuple(int(w) for w in raw)
        total = sum(weights)
    else:
        weights = tuple(float(w) for w in raw)
        total = math.fsum(weights)
    if total <= 0:
        return CandidateSet(tuple(candidates), weights, 0.0, dist.exact)
    # ascending candidate index: both parties sum in this order
    entropy = _float_entropy([w / total for w in weights])
    return CandidateSet(tuple(candidates), weights, entropy, dist.exact)


# --- embedding ------------------------------------------------------------------


@dataclass(frozen=True)
class TraceStep:
    position: int
    entropy: float
    gated: bool
    symbol: int | None
    token: int
    # the top 2**beta tokens the gate looked at, EOS excluded
    candidates: tuple[int, ...] = ()


@dataclass
class EmbedResult:
    stego_tokens: list[int]
    trace: list[TraceStep]
    message_tokens: list[int]
    ranks: list[int]
    plain_bits: BitStream
    cipher_bits: BitStream
    symbols: list[int]

    def __iter__(self):
        # allows ``tokens, trace = embed(...)``
        return iter((self.stego_tokens, self.trace))


@functools.lru_cache(maxsize=32)
def default_codebook(vocab_size: int, table_size: int = DEFAULT_TABLE_SIZE) -> Codebook:
    """Fallback codebook from a Zipf-shaped rank prior, for sessions without calibration."""
    k = min(table_size, vocab_size)
    return build_codebook({r: -(-4096 // (r + 1)) for r in range(k)}, k, vocab_size)


def message_to_tokens(vocab: Vocabulary, message: bytes | str) -> list[int]:
    text = message.decode("utf-8") if isinstance(message, (bytes, bytearray)) else message
    ids, unknown = vocab.encode(text)
    if unknown:
        warnings.warn(
            f"{len(unknown)} out-of-vocabulary word(s) replaced by <unk>; recovery will be lossy",
            stacklevel=3,
        )
    elif vocab.decode(ids) != text:
        warnings.warn("message whitespace is normalized to single spaces", stacklevel=3)
    return ids


def _sample(dist: Distribution, temperature: float, rng: random.Random, exclude: int) -> int:
    probs = apply_temperature(dist, temperature, exclude=exclude)
    return rng.choices(range(len(probs)), weights=probs.tolist())[0]


def embed(
    provider: ModelProvider,
    config: StegoConfig,
    message: bytes | str,
    codebook: Codebook | None = None,
) -> EmbedResult:
    vocab = provider.vocab
    config.check_vocabulary(vocab)
    if codebook is None:
        codebook = default_codebook(len(vocab))
    message_tokens = message_to_tokens(vocab, message)
    if not message_tokens:
        raise ParameterError("message has no tokens")

    ranks = compress_message(provider, message_tokens, config.private_context)
    plain = encode_ranks(codebook, ranks)
    cipher = keystream_xor(config.key, plain)
    symbols = to_beta_symbols(cipher, config.beta)

    rng = random.Random(config.rng_seed)
    threshold = config.threshold
    eos = vocab.eos
    tokens: list[int] = []
    trace: list[TraceStep] = []
    pending = 0
    while pending < len(symbols):
        if len(tokens) >= config.max_tokens:
            raise CapacityExhaustedError(
                f"{len(symbols) - pending} of {len(symbols)} symbols left after {config.max_tokens} tokens"
            )
        dist = query(provider, tokens, config.stego_context)
        cand = norm_entropy(dist, config.beta, exclude=eos)
        if cand.is_gated(threshold):
            symbol = symbols[pending]
            pending += 1
            token = cand.candidates[symbol]
        else:
            symbol = None
            token = _sample(dist, config.temperature, rng, eos)
        trace.append(TraceStep(len(tokens), cand.entropy, symbol is not None, symbol, token, cand.candidates))
        tokens.append(token)
    return EmbedResult(tokens, trace, message_tokens, ranks, plain, cipher, symbols)


# --- extraction -----------------------------------------------------------------


@dataclass
class ExtractResult:
    """Receiver-side intermediates; fields after a failing stage stay ``None``."""

    trace: list[TraceStep] = field(default_factory=list)
    symbols: list[int] | None = None
    cipher_bits: BitStream | None = None
    plain_bits: BitStream | None = None
    ranks: list[int] | None = None
    message_tokens: list[int] | None = None
    message: bytes | None = None
    error: StegoError | None = None


def extract_detailed(
    provider: ModelProvider,
    config: StegoConfig,
    stego_tokens: Sequence[int],
    codebook: Codebook | None = None,
) -> ExtractResult:
    vocab = provider.vocab
    result = ExtractResult()
    try:
        config.check_vocabulary(vocab)
        if codebook is None:
            codebook = default_codebook(len(vocab))
        threshold = config.threshold
        symbols: list[int] = []
        for pos, token in enumerate(stego_tokens):
            if not 0 <= token < len(vocab):
                raise DesyncError(f"stego token id {token} outside vocabulary")
            dist = query(provider, stego_tokens[:pos], config.stego_context)
            cand = norm_entropy(dist, config.beta, exclude=vocab.eos)
            if cand.is_gated(threshold):
                idx = cand.index(token)
                if idx is None:
                    raise DesyncError(f"token at position {pos} is not among the gated candidates")
                symbols.append(idx)
                result.trace.append(TraceStep(pos, cand.entropy, True, idx, token, cand.candidates))
            else:
                result.trace.append(TraceStep(pos, cand.entropy, False, None, token, cand.candidates))
        result.symbols = symbols
        if not symbols:
            raise EmptyPayloadError("stego text carries no payload")

        result.cipher_bits = from_beta_symbols(symbols, config.beta)
        result.plain_bits = keystream_xor(config.key, result.cipher_bits)
        result.ranks = decode_ranks(codebook, result.plain_bits)
        try:
            tokens, terminated = decompress_ranks_with_status(
                provider, result.ranks, config.private_context
            )
        except RankRangeError as exc:
            raise DesyncError(f"decoded rank out of range: {exc}") from exc
        result.message_tokens = tokens
        if not terminated:
            raise DesyncError("no end-of-message marker in the recovered ranks")
        _check_padding(codebook, result.ranks[: len(tokens) + 1], result.cipher_bits, config.beta)
        result.message = vocab.decode(tokens).encode("utf-8")
    except StegoError as exc:
        result.error = exc
    return result


def _check_padding(codebook: Codebook, used_ranks: Sequence[int], cipher: BitStream, beta: int) -> None:
    # the sender pads the ciphertext with fewer than beta zero bits; anything else means desync
    used = len(encode_ranks(codebook, used_ranks))
    tail = cipher[used:]
    if len(tail) >= beta or any(tail):
        raise DesyncError("bits after the end-of-message marker are not sender padding")


def extract(
    provider: ModelProvider,
    config: StegoConfig,
    stego_tokens: Sequence[int],
    codebook: Codebook | None = None,
) -> bytes:
    result = extract_detailed(provider, config, stego_tokens, codebook)
    if result.error is not None:
        raise result.error
    assert result.message is not None
    return result.message


# --- closed-loop check ------------------------------------------------------------


@dataclass(frozen=True)
class StageCheck:
    stage: str
    equal: bool
    detail: str = ""


@dataclass
class ClosedLoopReport:
    ok: bool
    stages: list[StageCheck]
    embed_trace: list[TraceStep]
    message: bytes
    recovered: bytes | None
    error: str | None = None

    @property
    def first_divergence(self) -> str | None:
        for s in self.stages:
            if not s.equal:
                return s.stage
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "first_divergence": self.first_divergence,
            "error": self.error,
            "stages": [asdict(s) for s in self.stages],
            "gated_steps": sum(t.gated for t in self.embed_trace),
            "stego_tokens": len(self.embed_trace),
        }


def _prefix_equal(sent, received) -> tuple[bool, str]:
    if received is None:
        return False, "stage not reached"
    if len(received) < len(sent):
        return False, f"received {len(received)} items, sent {len(sent)}"
    same = received[: len(sent)] == sent
    return same, "" if same else "content differs"


def verify_closed_loop(
    provider: ModelProvider,
    config: StegoConfig,
    message: bytes | str,
    codebook: Codebook | None = None,
    *,
    receiver_config: StegoConfig | None = None,
    receiver_provider: ModelProvider | None = None,
    receiver_codebook: Codebook | None = None,
) -> ClosedLoopReport:
    """Embed with the sender's settings, extract with the receiver's, compare every stage.

    Receiver settings default to the sender's.  Bit streams and ranks are
    compared as prefixes since the receiver legitimately sees trailing padding.
    """
    if isinstance(message, str):
        message = message.encode("utf-8")
    sent = embed(provider, config, message, codebook)
    got = extract_detailed(
        receiver_provider or provider,
        receiver_config or config,
        sent.stego_tokens,
        receiver_codebook if receiver_codebook is not None else codebook,
    )
    stages = []
    sym_ok = got.symbols == sent.symbols
    stages.append(StageCheck("symbols", sym_ok, "" if sym_ok else "gated symbol sequence differs"))
    for name, a, b in (
        ("cipher_bits", list(sent.cipher_bits), None if got.cipher_bits is None else list(got.cipher_bits)),
        ("plain_bits", list(sent.plain_bits), None if got.plain_bits is None else list(got.plain_bits)),
        ("ranks", sent.ranks, got.ranks),
    ):
        stages.append(StageCheck(name, *_prefix_equal(a, b)))
    tok_ok = got.message_tokens == sent.message_tokens
    stages.append(StageCheck("message_tokens", tok_ok, "" if tok_ok else "decoded tokens differ"))
    expected = provider.vocab.decode(sent.message_tokens).encode("utf-8")
    msg_ok = got.message == expected
    stages.append(StageCheck("message", msg_ok, "" if msg_ok else "recovered message differs"))
    return ClosedLoopReport(
        ok=all(s.equal for s in stages),
        stages=stages,
        embed_trace=sent.trace,
        message=message,
        recovered=got.message,
        error=None if got.error is None else f"{type(got.error).__name__}: {got.error}",
    )

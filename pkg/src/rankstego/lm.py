"""Next-token distributions and the exact-arithmetic n-gram reference model.

Every distribution carries a canonical order: descending probability, ties
broken by ascending token id.  Sender and receiver both rank tokens through
that order, so it must never depend on sort stability or float noise.
"""

from __future__ import annotations

import io
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import BinaryIO, Iterable, Protocol, Sequence, Union

import numpy as np

from .errors import (
    ContextOverflowError,
    DegenerateModelError,
    ModelFormatError,
    ParameterError,
    RankRangeError,
)

EOS = "</s>"
UNK = "<unk>"

MODEL_MAGIC = b"NGM1"
# int64 headroom for the mixed integer weights
_WEIGHT_LIMIT = 1 << 62


def tokenize(text: str) -> list[str]:
    return text.split()


@dataclass(frozen=True)
class Vocabulary:
    """Dense id <-> surface table with a reserved end-of-sequence token."""

    surfaces: tuple[str, ...]
    eos: int
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index = {s: i for i, s in enumerate(self.surfaces)}
        if len(index) != len(self.surfaces):
            raise ParameterError("vocabulary surfaces must be unique")
        if not 0 <= self.eos < len(self.surfaces):
            raise ParameterError("eos id is not in the vocabulary")
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        """Specials first (``</s>`` = 0, ``<unk>`` = 1), then sorted unique words."""
        rest = sorted(set(words) - {EOS, UNK})
        return cls((EOS, UNK, *rest), eos=0)

    def __len__(self) -> int:
        return len(self.surfaces)

    def __contains__(self, surface: object) -> bool:
        return surface in self._index

    @property
    def unk(self) -> int | None:
        return self._index.get(UNK)

    def id_of(self, surface: str) -> int:
        return self._index[surface]

    def surface(self, token: int) -> str:
        return self.surfaces[token]

    def encode(self, text: str) -> tuple[list[int], list[str]]:
        """Word-level encoding; returns ids plus the out-of-vocabulary words."""
        ids: list[int] = []
        unknown: list[str] = []
        for word in tokenize(text):
            tid = self._index.get(word)
            if tid is None:
                if self.unk is None:
                    raise ParameterError(f"word {word!r} not in vocabulary and no {UNK} token")
                unknown.append(word)
                tid = self.unk
            ids.append(tid)
        return ids, unknown

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.surfaces[i] for i in ids)


class Distribution:
    """Probability vector over a vocabulary with its canonical rank order.

    ``weights`` are either non-negative integers over a common denominator
    ``total`` (exact) or floats summing to ``total`` (approximately 1).
    """

    __slots__ = ("weights", "total", "_order")

    def __init__(self, weights: np.ndarray, total: int | float | None = None) -> None:
        weights = np.asarray(weights)
        if weights.ndim != 1 or weights.size == 0:
            raise ParameterError("distribution needs a non-empty 1-d weight vector")
        if weights.dtype.kind in "iu":
            weights = weights.astype(np.int64, copy=False)
            exact_total = int(weights.sum())
            if total is None:
                total = exact_total
            elif int(total) != exact_total:
                raise ParameterError("exact weights do not sum to the stated total")
            if total <= 0 or (weights < 0).any():
                raise ParameterError("exact weights must be non-negative with positive sum")
            total = int(total)
        else:
            weights = weights.astype(np.float64, copy=False)
            if total is None:
                total = 1.0
            total = float(total)
        weights.setflags(write=False)
        self.weights = weights
        self.total = total
        self._order: np.ndarray | None = None

    @classmethod
    def _trusted(cls, weights: np.ndarray, total: int) -> "Distribution":
        # for providers that already guarantee the invariants; skips the checks
        self = cls.__new__(cls)
        weights.setflags(write=False)
        self.weights = weights
        self.total = total
        self._order = None
        return self

    @classmethod
    def from_fractions(cls, probs: Sequence[Fraction]) -> "Distribution":
        den = math.lcm(*(p.denominator for p in probs))
        return cls(np.array([int(p * den) for p in probs], dtype=np.int64), den)

    @property
    def exact(self) -> bool:
        return self.weights.dtype.kind == "i"

    def __len__(self) -> int:
        return int(self.weights.size)

    @property
    def order(self) -> np.ndarray:
        if self._order is None:
            # a stable sort of descending weights leaves ties in ascending id order
            order = np.argsort(-self.weights, kind="stable")
            order.setflags(write=False)
            self._order = order
        return self._order

    @property
    def probs(self) -> tuple:
        if self.exact:
            return tuple(Fraction(int(w), self.total) for w in self.weights)
        return tuple(float(w) / self.total for w in self.weights)

    def prob(self, token: int) -> Fraction | float:
        if self.exact:
            return Fraction(int(self.weights[token]), self.total)
        return float(self.weights[token]) / self.total

    def as_floats(self) -> np.ndarray:
        return self.weights.astype(np.float64) / float(self.total)

    def rank_of(self, token: int) -> int:
        """Position of ``token`` in the canonical order, without sorting."""
        if not 0 <= token < self.weights.size:
            raise RankRangeError(f"token id {token} outside vocabulary of {self.weights.size}")
        w = self.weights[token]
        return int((self.weights > w).sum() + (self.weights[:token] == w).sum())

    def token_at(self, rank: int) -> int:
        if not 0 <= rank < self.weights.size:
            raise RankRangeError(f"rank {rank} outside vocabulary of {self.weights.size}")
        return int(self.order[rank])

    def top(self, k: int, exclude: int | None = None) -> list[int]:
        head = self.order[: k + 1].tolist()
        if exclude in head:
            head.remove(exclude)
        return head[:k]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Distribution):
            return NotImplemented
        return (
            self.exact == other.exact
            and self.total == other.total
            and np.array_equal(self.weights, other.weights)
        )

    def __repr__(self) -> str:
        kind = "exact" if self.exact else "float"
        return f"Distribution({kind}, |V|={len(self)}, top={self.top(4)})"


class ModelProvider(Protocol):
    """Anything that maps (context, history) to a next-token distribution."""

    vocab: Vocabulary
    max_context: int | None

    def distribution(self, context: Sequence[int], history: Sequence[int] = ()) -> Distribution:
        ...


def next_distribution(
    provider: ModelProvider, context: Sequence[int], history: Sequence[int] = ()
) -> Distribution:
    """Validated provider query: ``history`` is the fixed prompt, ``context`` the tokens so far."""
    check_ids(provider.vocab, history)
    check_ids(provider.vocab, context)
    return query(provider, context, history)


def check_ids(vocab: Vocabulary, ids: Sequence[int]) -> None:
    size = len(vocab)
    for tid in ids:
        if not 0 <= tid < size:
            raise RankRangeError(f"token id {tid} outside vocabulary of {size}")


def query(provider: ModelProvider, context: Sequence[int], history: Sequence[int] = ()) -> Distribution:
    """Provider query with only the length check; callers guarantee valid ids."""
    limit = provider.max_context
    if limit is not None and len(history) + len(context) > limit:
        raise ContextOverflowError(
            f"context of {len(history) + len(context)} tokens exceeds limit {limit}"
        )
    return provider.distribution(context, history)


def apply_temperature(dist: Distribution, temperature: float, exclude: int | None = None) -> np.ndarray:
    """Float probabilities after the power transform ``p ** (1 / temperature)``."""
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    probs = dist.as_floats()
    if exclude is not None:
        probs = probs.copy()
        probs[exclude] = 0.0
    if temperature != 1.0:
        probs = np.power(probs, 1.0 / temperature)
    s = probs.sum()
    if s <= 0:
        raise ParameterError("no probability mass left to sample from")
    return probs / s


def _as_fraction(value: Fraction | int | float | str) -> Fraction:
    if isinstance(value, float):
        # 0.6 means 3/5, not the nearest binary double
        return Fraction(repr(value))
    return Fraction(value)


class NgramModel:
    """Add-k smoothed n-gram model with stepwise backoff and an optional cache term.

    Probabilities are exact rationals.  With ``cache_weight`` λ > 0 the result
    is ``(1 - λ) * P_ngram + λ * P_cache`` where ``P_cache`` is the relative
    frequency of each token in the whole history + context window, so every
    prompt token influences every step.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        tables: Sequence[dict[tuple[int, ...], Counter]],
        smoothing: Fraction | int | str = 1,
        cache_weight: Fraction | int | str = 0,
        max_context: int | None = None,
    ) -> None:
        if order < 1:
            raise ParameterError("n-gram order must be >= 1")
        if len(tables) != order:
            raise ParameterError("need one count table per order 1..n")
        self.vocab = vocab
        self.order = order
        self.tables = [
            {ctx: Counter(c) for ctx, c in t.items()} for t in tables
        ]
        self.smoothing = _as_fraction(smoothing)
        self.cache_weight = _as_fraction(cache_weight)
        if self.smoothing < 0:
            raise ParameterError("smoothing must be non-negative")
        if not 0 <= self.cache_weight < 1:
            raise ParameterError("cache weight must lie in [0, 1)")
        self.max_context = max_context
        self._totals = [{ctx: sum(c.values()) for ctx, c in t.items()} for t in self.tables]
        self._base: dict[tuple[int, ...], tuple[np.ndarray, int]] = {}
        # last (window, token counts); lets a window grown by one token update in O(|V|)
        self._counts_memo: tuple[tuple[int, ...], np.ndarray] = ((), np.zeros(len(vocab), dtype=np.int64))

    def _base_weights(self, window: Sequence[int]) -> tuple[np.ndarray, int]:
        size = len(self.vocab)
        for k in range(self.order, 0, -1):
            if k - 1 > len(window):
                continue
            ctx = tuple(window[len(window) - (k - 1):]) if k > 1 else ()
            total = self._totals[k - 1].get(ctx, 0)
            if total > 0:
                break
        else:
            ctx, k, total = (), 0, 0
        key = (k, *ctx)
        hit = self._base.get(key)
        if hit is not None:
            return hit
        if total == 0:
            result = (np.ones(size, dtype=np.int64), size)
        else:
            p, q = self.smoothing.numerator, self.smoothing.denominator
            w = np.full(size, p, dtype=np.int64)
            for tid, c in self.tables[k - 1][ctx].items():
                w[tid] += c * q
            result = (w, total * q + size * p)
        result[0].setflags(write=False)
        self._base[key] = result
        return result

    def distribution(self, context: Sequence[int], history: Sequence[int] = ()) -> Distribution:
        window = (*history, *context)
        base, base_total = self._base_weights(window)
        lam = self.cache_weight
        if lam == 0 or not window:
            return Distribution._trusted(base, base_total)
        a, b = lam.numerator, lam.denominator
        length = len(window)
        if b * base_total * length >= _WEIGHT_LIMIT:
            raise DegenerateModelError("counts too large for exact int64 mixing")
        cache = self._window_counts(window)
        weights = (b - a) * length * base + a * base_total * cache
        return Distribution._trusted(weights, b * base_total * length)

    def _window_counts(self, window: tuple[int, ...]) -> np.ndarray:
        prev, prev_counts = self._counts_memo
        if len(window) == len(prev) + 1 and window[:-1] == prev:
            counts = prev_counts.copy()
            counts[window[-1]] += 1
        elif window == prev:
            return prev_counts
        else:
            counts = np.bincount(np.asarray(window, dtype=np.int64), minlength=len(self.vocab))
        # stored as one tuple so concurrent readers never see a half update
        self._counts_memo = (window, counts)
        return counts

    def __repr__(self) -> str:
        return (
            f"NgramModel(n={self.order}, |V|={len(self.vocab)}, "
            f"smoothing={self.smoothing}, cache_weight={self.cache_weight})"
        )

    # serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        u64 = struct.Struct("<Q")
        w = lambda v: buf.write(u64.pack(v))  # noqa: E731
        buf.write(MODEL_MAGIC)
        w(self.order)
        w(self.smoothing.numerator)
        w(self.smoothing.denominator)
        w(self.cache_weight.numerator)
        w(self.cache_weight.denominator)
        w(len(self.vocab))
        w(self.vocab.eos)
        for s in self.vocab.surfaces:
            raw = s.encode("utf-8")
            w(len(raw))
            buf.write(raw)
        for k, table in enumerate(self.tables, start=1):
            entries = sorted(
                (ctx, tid, c) for ctx, counter in table.items() for tid, c in counter.items()
            )
            w(len(entries))
            for ctx, tid, c in entries:
                for t in ctx:
                    w(t)
                w(tid)
                w(c)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, max_context: int | None = None) -> "NgramModel":
        stream = io.BytesIO(data)
        if stream.read(4) != MODEL_MAGIC:
            raise ModelFormatError("not an NGM1 model file")

        def r() -> int:
            raw = stream.read(8)
            if len(raw) != 8:
                raise ModelFormatError("truncated model file")
            return struct.unpack("<Q", raw)[0]

        order = r()
        smoothing = Fraction(r(), r())
        cache_weight = Fraction(r(), r())
        size = r()
        eos = r()
        surfaces = []
        for _ in range(size):
            n = r()
            raw = stream.read(n)
            if len(raw) != n:
                raise ModelFormatError("truncated vocabulary table")
            surfaces.append(raw.decode("utf-8"))
        vocab = Vocabulary(tuple(surfaces), eos=eos)
        tables: list[dict[tuple[int, ...], Counter]] = []
        for k in range(1, order + 1):
            table: dict[tuple[int, ...], Counter] = {}
            for _ in range(r()):
                ctx = tuple(r() for _ in range(k - 1))
                tid = r()
                table.setdefault(ctx, Counter())[tid] = r()
            tables.append(table)
        if stream.read(1):
            raise ModelFormatError("trailing bytes after count tables")
        return cls(vocab, order, tables, smoothing, cache_weight, max_context)

    def save(self, path: str | Path | BinaryIO) -> None:
        if hasattr(path, "write"):
            path.write(self.to_bytes())
        else:
            Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, max_context: int | None = None) -> "NgramModel":
        return cls.from_bytes(Path(path).read_bytes(), max_context)


Corpus = Union[str, Path, Sequence[str]]


def _corpus_lines(corpus: Corpus) -> list[list[str]]:
    if isinstance(corpus, Path):
        corpus = corpus.read_text(encoding="utf-8")
    if isinstance(corpus, str):
        return [tokenize(line) for line in corpus.splitlines() if line.strip()]
    words = list(corpus)
    return [words] if words else []


def train_ngram(
    corpus: Corpus,
    n: int,
    smoothing: Fraction | int | str = 1,
    *,
    vocab: Vocabulary | None = None,
    cache_weight: Fraction | int | str = 0,
    max_context: int | None = None,
) -> NgramModel:
    """Count k-grams for k = 1..n over the corpus, one ``</s>`` after each line.

    A ``str`` corpus is text (one sentence per line), a ``Path`` is read as
    UTF-8 text, and any other sequence is a single pre-tokenized sentence.
    """
    if n < 1:
        raise ParameterError("n-gram order must be >= 1")
    lines = _corpus_lines(corpus)
    if vocab is None:
        vocab = Vocabulary.from_words(w for line in lines for w in line)
    stream: list[int] = []
    for line in lines:
        stream.extend(vocab.encode(" ".join(line))[0])
        stream.append(vocab.eos)
    if stream and n > len(stream):
        raise DegenerateModelError(f"order {n} exceeds corpus length {len(stream)}")
    tables: list[dict[tuple[int, ...], Counter]] = []
    for k in range(1, n + 1):
        table: dict[tuple[int, ...], Counter] = {}
        for i in range(k - 1, len(stream)):
            ctx = tuple(stream[i - k + 1:i])
            table.setdefault(ctx, Counter())[stream[i]] += 1
        tables.append(table)
    return NgramModel(vocab, n, tables, smoothing, cache_weight, max_context)


def reference_corpus_path() -> Path:
    return Path(__file__).with_name("data") / "reference_corpus.txt"


def reference_model(
    n: int = 2, smoothing: Fraction | int | str = "1/100", cache_weight: Fraction | int | str = "1/10"
) -> NgramModel:
    """The bundled toy model used by the tests, benchmarks and CLI defaults."""
    return train_ngram(reference_corpus_path(), n, smoothing, cache_weight=cache_weight)

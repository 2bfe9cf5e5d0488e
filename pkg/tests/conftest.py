from __future__ import annotations

from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
import pytest

from rankstego.codec import SecretKey
from rankstego.lm import Distribution, Vocabulary, reference_model
from rankstego.stego import StegoConfig


class FixedModel:
    """Provider whose distribution is a fixed function of the query."""

    max_context = None

    def __init__(self, vocab: Vocabulary, fn: Callable[[Sequence[int], Sequence[int]], Distribution]):
        self.vocab = vocab
        self._fn = fn

    def distribution(self, context, history=()):
        return self._fn(tuple(context), tuple(history))


def vocab_of(size: int) -> Vocabulary:
    """``</s>`` = 0 then words w1..w{size-1}."""
    return Vocabulary(("</s>", *(f"w{i}" for i in range(1, size))), eos=0)


def exact(*probs) -> Distribution:
    return Distribution.from_fractions([Fraction(p) for p in probs])


def uniform_model(size: int) -> FixedModel:
    d = Distribution(np.ones(size, dtype=np.int64))
    return FixedModel(vocab_of(size), lambda c, h: d)


def peaked_model(size: int) -> FixedModel:
    """All mass (minus a sliver) on token 1, never EOS."""
    w = np.ones(size, dtype=np.int64)
    w[1] = 10**12
    d = Distribution(w)
    return FixedModel(vocab_of(size), lambda c, h: d)


@pytest.fixture(scope="session")
def ref_model():
    return reference_model()


@pytest.fixture(scope="session")
def key():
    return SecretKey(bytes(range(32)))


@pytest.fixture(scope="session")
def base_config(ref_model, key):
    vocab = ref_model.vocab
    return StegoConfig(
        key=key,
        private_context=tuple(vocab.encode("the teacher told the children a story")[0]),
        stego_context=tuple(vocab.encode("the old man walked to the market in the morning")[0]),
    )


@pytest.fixture(scope="session")
def words(ref_model):
    return [w for w in ref_model.vocab.surfaces if w not in ("</s>", "<unk>")]


# --- acceptance reporting ---------------------------------------------------------

CRITERIA: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    CRITERIA[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed, detail = CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} {status}: {title}" + (f" ({detail})" if detail else ""))

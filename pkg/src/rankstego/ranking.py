"""Token <-> rank conversion under a context, and whole-message rank coding.

Ranks are 0-based positions in a distribution's canonical order.
"""

from __future__ import annotations

from typing import Sequence

from .errors import RankRangeError
from .lm import ModelProvider, check_ids, next_distribution, query


def token_to_rank(
    provider: ModelProvider,
    prefix: Sequence[int],
    token: int,
    private_context: Sequence[int] = (),
) -> int:
    return next_distribution(provider, prefix, private_context).rank_of(token)


def rank_to_token(
    provider: ModelProvider,
    prefix: Sequence[int],
    rank: int,
    private_context: Sequence[int] = (),
) -> int:
    return next_distribution(provider, prefix, private_context).token_at(rank)


def compress_message(
    provider: ModelProvider,
    message_tokens: Sequence[int],
    private_context: Sequence[int] = (),
) -> list[int]:
    """Rank every message token, then the end-of-sequence token.

    The trailing EOS rank lets the decoder stop in-band, which is what makes
    any bits after it safe to ignore.
    """
    if not message_tokens:
        raise ValueError("message must contain at least one token")
    check_ids(provider.vocab, message_tokens)
    check_ids(provider.vocab, private_context)
    tokens = [*message_tokens, provider.vocab.eos]
    return [
        query(provider, tokens[:t], private_context).rank_of(tokens[t])
        for t in range(len(tokens))
    ]


def decompress_ranks(
    provider: ModelProvider,
    ranks: Sequence[int],
    private_context: Sequence[int] = (),
) -> list[int]:
    """Inverse of :func:`compress_message`; EOS and everything after it is dropped."""
    tokens, _ = decompress_ranks_with_status(provider, ranks, private_context)
    return tokens


def decompress_ranks_with_status(
    provider: ModelProvider,
    ranks: Sequence[int],
    private_context: Sequence[int] = (),
) -> tuple[list[int], bool]:
    """Like :func:`decompress_ranks` but also reports whether EOS was reached."""
    eos = provider.vocab.eos
    size = len(provider.vocab)
    tokens: list[int] = []
    for rank in ranks:
        if not 0 <= rank < size:
            raise RankRangeError(f"rank {rank} outside vocabulary of {size}")
        tok = query(provider, tokens, private_context).token_at(rank)
        if tok == eos:
            return tokens, True
        tokens.append(tok)
    return tokens, False

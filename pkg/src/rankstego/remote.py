"""Client for a logits-serving endpoint speaking the next-distribution protocol.

Request  ``POST /v1/next-distribution``::

    {"context": [int, ...], "temperature": float}

Response::

    {"probs": [{"id": int, "p": float}, ...], "tail_mass": float}

``probs`` covers the whole vocabulary, or only the top M tokens, in which case
``tail_mass`` is the probability left for the rest and is spread evenly over
the ids not listed.  The rank order is always recomputed locally.
"""

from __future__ import annotations

import math
from typing import Any, Mapping, Sequence

import httpx
import numpy as np

from .errors import DistributionValidationError, ProtocolError, TransportError
from .lm import Distribution, Vocabulary

NEXT_DISTRIBUTION_PATH = "/v1/next-distribution"
VOCABULARY_PATH = "/v1/vocabulary"
SUM_TOLERANCE = 2.0 ** -40


def _url(endpoint: str, path: str) -> str:
    endpoint = endpoint.rstrip("/")
    if endpoint.endswith(path):
        return endpoint
    return endpoint + path


def parse_distribution_response(
    data: Any,
    vocab_size: int | None = None,
    *,
    min_top: int = 2,
    tolerance: float = SUM_TOLERANCE,
) -> Distribution:
    """Validate a response body and rebuild the full float distribution."""
    if not isinstance(data, Mapping) or not isinstance(data.get("probs"), list):
        raise ProtocolError("response must be an object with a 'probs' list")
    ids: list[int] = []
    ps: list[float] = []
    for item in data["probs"]:
        if not isinstance(item, Mapping) or "id" not in item or "p" not in item:
            raise ProtocolError(f"malformed probability entry: {item!r}")
        tid, p = item["id"], item["p"]
        if isinstance(tid, bool) or not isinstance(tid, int) or tid < 0:
            raise ProtocolError(f"token id must be a non-negative integer, got {tid!r}")
        if isinstance(p, bool) or not isinstance(p, (int, float)) or not math.isfinite(p) or p < 0:
            raise ProtocolError(f"probability must be a finite non-negative number, got {p!r}")
        ids.append(tid)
        ps.append(float(p))
    if not ids:
        raise ProtocolError("empty 'probs' list")
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate token ids in response")
    tail = data.get("tail_mass", 0.0)
    if isinstance(tail, bool) or not isinstance(tail, (int, float)) or not math.isfinite(tail) or tail < 0:
        raise ProtocolError(f"tail_mass must be a finite non-negative number, got {tail!r}")
    tail = float(tail)

    if vocab_size is None:
        vocab_size = max(ids) + 1
    if max(ids) >= vocab_size:
        raise ProtocolError(f"token id {max(ids)} outside vocabulary of {vocab_size}")
    missing = vocab_size - len(ids)
    if tail > 0 and missing == 0:
        raise ProtocolError("tail_mass given but every token is listed")
    if tail > 0 and len(ids) < min(min_top, vocab_size):
        raise ProtocolError(f"top-M response lists {len(ids)} tokens, need at least {min_top}")

    total = math.fsum(ps) + tail
    if abs(total - 1.0) > tolerance:
        raise DistributionValidationError(f"probabilities sum to {total!r}, not 1")

    weights = np.full(vocab_size, tail / missing if missing else 0.0, dtype=np.float64)
    weights[ids] = ps
    return Distribution(weights, 1.0)


class RemoteModel:
    """Model provider backed by an HTTP inference endpoint.

    The endpoint sees ``history + context`` as one context list.  Whether it
    is deterministic is up to the server; responses are validated, not trusted.
    """

    def __init__(
        self,
        endpoint: str,
        vocab: Vocabulary,
        *,
        temperature: float = 1.0,
        client: httpx.Client | None = None,
        timeout: float = 30.0,
        max_context: int | None = None,
        min_top: int = 1 << 16,
    ) -> None:
        self.endpoint = endpoint
        self.vocab = vocab
        self.temperature = temperature
        self.max_context = max_context
        self.min_top = min_top
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_endpoint(cls, endpoint: str, *, client: httpx.Client | None = None, **kwargs: Any) -> "RemoteModel":
        """Fetch the vocabulary table from the server, then build the provider."""
        client = client or httpx.Client(timeout=kwargs.pop("timeout", 30.0))
        data = _post_or_get(client, "GET", _url(endpoint, VOCABULARY_PATH))
        try:
            vocab = Vocabulary(tuple(data["tokens"]), eos=int(data["eos"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed vocabulary response: {exc}") from exc
        return cls(endpoint, vocab, client=client, **kwargs)

    def distribution(self, context: Sequence[int], history: Sequence[int] = ()) -> Distribution:
        payload = {"context": [int(t) for t in (*history, *context)], "temperature": self.temperature}
        data = _post_or_get(self._client, "POST", _url(self.endpoint, NEXT_DISTRIBUTION_PATH), payload)
        return parse_distribution_response(data, len(self.vocab), min_top=self.min_top)

    def close(self) -> None:
        self._client.close()


def _post_or_get(client: httpx.Client, method: str, url: str, payload: Any = None) -> Any:
    try:
        resp = client.request(method, url, json=payload)
    except httpx.TransportError as exc:
        raise TransportError(f"cannot reach {url}: {exc}") from exc
    if resp.status_code != 200:
        raise ProtocolError(f"{url} answered HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        return resp.json()
    except ValueError as exc:
        raise ProtocolError(f"{url} returned non-JSON body") from exc


def remote_next_distribution(
    endpoint: str,
    context: Sequence[int],
    *,
    vocab_size: int | None = None,
    temperature: float = 1.0,
    client: httpx.Client | None = None,
    min_top: int = 2,
) -> Distribution:
    """One-shot query; without ``vocab_size`` the vocabulary is inferred from the ids returned."""
    owned = client is None
    client = client or httpx.Client(timeout=30.0)
    try:
        data = _post_or_get(
            client,
            "POST",
            _url(endpoint, NEXT_DISTRIBUTION_PATH),
            {"context": [int(t) for t in context], "temperature": temperature},
        )
    finally:
        if owned:
            client.close()
    return parse_distribution_response(data, vocab_size, min_top=min_top)

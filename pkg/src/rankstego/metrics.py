"""Payload, perplexity and timing measurements, and the alpha/beta sweep."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Sequence

import gmpy2

from .codec import Codebook
from .errors import CapacityExhaustedError, StegoError
from .lm import ModelProvider, query
from .stego import StegoConfig, embed, extract

SCHEMA = "eval-v1"
PPL_WINDOW = 10


def payload_capacity(message: bytes | str, stego_text: str) -> float:
    """Message characters per stego character, in percent."""
    if isinstance(message, (bytes, bytearray)):
        message = message.decode("utf-8")
    if not stego_text:
        raise ZeroDivisionError("stego text is empty")
    return 100.0 * len(message) / len(stego_text)


def _exact_root(value: Fraction, n: int) -> Fraction | None:
    num, num_exact = gmpy2.iroot(gmpy2.mpz(value.numerator), n)
    den, den_exact = gmpy2.iroot(gmpy2.mpz(value.denominator), n)
    if num_exact and den_exact:
        return Fraction(int(num), int(den))
    return None


def _log(p: Fraction | float) -> float:
    if isinstance(p, Fraction):
        return math.log(p.numerator) - math.log(p.denominator)
    return math.log(p)


def perplexity(provider: ModelProvider, tokens: Sequence[int], context: Sequence[int] = ()) -> float:
    """exp of the mean negative log-likelihood, each token conditioned on context + predecessors.

    A zero-probability token gives ``inf``.  For exact providers whose
    probability product has a rational n-th root the result is that root
    exactly (so a uniform model over |V| scores exactly |V|).
    """
    if not tokens:
        raise ValueError("perplexity needs at least one token")
    probs = [query(provider, tokens[:i], context).prob(t) for i, t in enumerate(tokens)]
    if any(p == 0 for p in probs):
        return math.inf
    if all(isinstance(p, Fraction) for p in probs):
        product = math.prod(probs, start=Fraction(1))
        root = _exact_root(1 / product, len(probs))
        if root is not None:
            return float(root)
    return math.exp(-math.fsum(_log(p) for p in probs) / len(probs))


def ppl_window(
    provider: ModelProvider,
    context: Sequence[int],
    generated: Sequence[int],
    window: int = PPL_WINDOW,
) -> float:
    """Perplexity of the first ``window`` generated tokens given the last ``window`` context tokens."""
    if not generated:
        raise ValueError("ppl_window needs at least one generated token")
    ctx = tuple(context[-window:]) if window and context else ()
    return perplexity(provider, list(generated[:window]), ctx)


@dataclass
class EvalReport:
    alpha: float
    beta: int
    n_messages: int
    n_ok: int
    n_capacity_exhausted: int
    n_failed: int
    payload_pct: float | None
    bits_per_token: float | None
    ppl: float | None
    ppl20: float | None
    embed_seconds: float | None
    extract_seconds: float | None
    scoring_model: str
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def status(self) -> str:
        if self.n_ok:
            return "ok"
        if self.n_capacity_exhausted == self.n_messages:
            return "capacity-exhausted"
        return "failed"

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["status"] = self.status
        return out


def evaluate_message(
    provider: ModelProvider,
    config: StegoConfig,
    message: bytes | str,
    codebook: Codebook | None = None,
    scoring_provider: ModelProvider | None = None,
) -> dict[str, Any]:
    """Embed, extract and score one message; failures come back as record fields."""
    if isinstance(message, str):
        message = message.encode("utf-8")
    scorer = scoring_provider or provider
    record: dict[str, Any] = {"message_bytes": len(message), "ok": False, "error": None}
    try:
        t0 = time.perf_counter()
        result = embed(provider, config, message, codebook)
        t1 = time.perf_counter()
        recovered = extract(provider, config, result.stego_tokens, codebook)
        t2 = time.perf_counter()
    except CapacityExhaustedError as exc:
        record["error"] = f"capacity-exhausted: {exc}"
        return record
    except StegoError as exc:
        record["error"] = f"{type(exc).__name__}: {exc}"
        return record
    stego = result.stego_tokens
    stego_text = provider.vocab.decode(stego)
    record.update(
        ok=recovered == message,
        error=None if recovered == message else "recovered message differs",
        stego_tokens=len(stego),
        gated_steps=sum(step.gated for step in result.trace),
        payload_pct=payload_capacity(message, stego_text),
        bits_per_token=8.0 * len(message) / len(stego),
        ppl=perplexity(scorer, stego, config.stego_context),
        ppl20=ppl_window(scorer, config.stego_context, stego),
        embed_seconds=t1 - t0,
        extract_seconds=t2 - t1,
    )
    return record


def _mean(values: Iterable[float]) -> float | None:
    values = list(values)
    return math.fsum(values) / len(values) if values else None


def summarize(
    config: StegoConfig, records: Sequence[dict[str, Any]], scoring_model: str
) -> EvalReport:
    ok = [r for r in records if r["ok"]]
    exhausted = sum(1 for r in records if (r["error"] or "").startswith("capacity-exhausted"))
    return EvalReport(
        alpha=config.alpha,
        beta=config.beta,
        n_messages=len(records),
        n_ok=len(ok),
        n_capacity_exhausted=exhausted,
        n_failed=len(records) - len(ok) - exhausted,
        payload_pct=_mean(r["payload_pct"] for r in ok),
        bits_per_token=_mean(r["bits_per_token"] for r in ok),
        ppl=_mean(r["ppl"] for r in ok),
        ppl20=_mean(r["ppl20"] for r in ok),
        embed_seconds=_mean(r["embed_seconds"] for r in ok),
        extract_seconds=_mean(r["extract_seconds"] for r in ok),
        scoring_model=scoring_model,
        config=config.summary(),
    )


@dataclass
class SweepCell:
    alpha: float
    beta: int
    records: list[dict[str, Any]]
    report: EvalReport


def _run_cell(
    provider: ModelProvider,
    config: StegoConfig,
    corpus: Sequence[bytes | str],
    codebook: Codebook | None,
    scoring_provider: ModelProvider | None,
) -> SweepCell:
    records = []
    for i, message in enumerate(corpus):
        # seed per message index so cells are seed-matched with each other
        cfg = config.replace(rng_seed=config.rng_seed + i)
        rec = evaluate_message(provider, cfg, message, codebook, scoring_provider)
        rec["index"] = i
        records.append(rec)
    scorer = scoring_provider or provider
    return SweepCell(config.alpha, config.beta, records, summarize(config, records, repr(scorer)))


def sweep(
    provider: ModelProvider,
    base_config: StegoConfig,
    alphas: Sequence[float],
    betas: Sequence[int],
    corpus: Sequence[bytes | str],
    codebook: Codebook | None = None,
    *,
    scoring_provider: ModelProvider | None = None,
    workers: int = 1,
) -> list[SweepCell]:
    """Run every (alpha, beta) cell over the corpus; cells come back in grid order."""
    if not alphas or not betas or not corpus:
        raise ValueError("alphas, betas and corpus must be non-empty")
    configs = [base_config.replace(alpha=a, beta=b) for a in alphas for b in betas]
    args = [(provider, cfg, list(corpus), codebook, scoring_provider) for cfg in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, *zip(*args)))
    return [_run_cell(*a) for a in args]


def sweep_jsonl(cells: Sequence[SweepCell]) -> str:
    """One line per (alpha, beta, message), then a summary line per cell."""
    lines = []
    for cell in cells:
        for rec in cell.records:
            lines.append({"schema": SCHEMA, "kind": "message", "alpha": cell.alpha, "beta": cell.beta, **rec})
        lines.append({"schema": SCHEMA, "kind": "cell", **cell.report.to_dict()})
    return "".join(json.dumps(_finite(line), sort_keys=True) + "\n" for line in lines)


def _finite(obj: Any) -> Any:
    # infinite perplexities become the string "inf" to stay strict JSON
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj

"""FastAPI app serving a local model so remote clients can share it.

Both stego parties can point at the same server instead of shipping model
files; the server is stateless and every answer is recomputed from the
request alone.
"""

from __future__ import annotations

import math

from fastapi import FastAPI, HTTPException

from ..errors import ContextOverflowError, RankRangeError
from ..lm import ModelProvider, apply_temperature, next_distribution
from ..remote import NEXT_DISTRIBUTION_PATH, VOCABULARY_PATH
from .schemas import (
    HealthResponse,
    NextDistributionRequest,
    NextDistributionResponse,
    TokenProb,
    VocabularyResponse,
)


def create_app(model: ModelProvider, *, top_m: int | None = None) -> FastAPI:
    """Build the app.  With ``top_m`` only the M most likely tokens are listed."""
    app = FastAPI(title="rankstego inference", version="1")

    @app.get("/v1/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", vocab_size=len(model.vocab), model=repr(model))

    @app.get(VOCABULARY_PATH, response_model=VocabularyResponse)
    def vocabulary() -> VocabularyResponse:
        return VocabularyResponse(tokens=list(model.vocab.surfaces), eos=model.vocab.eos)

    @app.post(NEXT_DISTRIBUTION_PATH, response_model=NextDistributionResponse)
    def next_dist(req: NextDistributionRequest) -> NextDistributionResponse:
        try:
            dist = next_distribution(model, req.context)
        except RankRangeError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        except ContextOverflowError as exc:
            raise HTTPException(status_code=413, detail=str(exc)) from exc
        probs = apply_temperature(dist, req.temperature)
        if top_m is None or top_m >= len(probs):
            listed = range(len(probs))
            tail = 0.0
        else:
            listed = [int(t) for t in dist.order[:top_m]]
            rest = set(range(len(probs))) - set(listed)
            tail = math.fsum(float(probs[t]) for t in sorted(rest))
        return NextDistributionResponse(
            probs=[TokenProb(id=int(t), p=float(probs[t])) for t in listed],
            tail_mass=tail,
        )

    return app

"""Request and response models for the inference endpoint."""

from __future__ import annotations

from typing import List

from pydantic import BaseModel, Field


class NextDistributionRequest(BaseModel):
    context: List[int] = Field(default_factory=list)
    temperature: float = Field(1.0, gt=0)


class TokenProb(BaseModel):
    id: int
    p: float


class NextDistributionResponse(BaseModel):
    probs: List[TokenProb]
    tail_mass: float = 0.0


class VocabularyResponse(BaseModel):
    tokens: List[str]
    eos: int


class HealthResponse(BaseModel):
    status: str
    vocab_size: int
    model: str

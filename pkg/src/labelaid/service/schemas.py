"""Wire models for the /v1 HTTP API (JSON, snake_case keys)."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class CreateStudyRequest(BaseModel):
    corpus_path: str
    expert_gold_path: str
    config: Optional[dict] = None
    control_pool_ids: Optional[list[str]] = None


class CreateStudyResponse(BaseModel):
    study_id: str
    admin_token: str


class RegisterRequest(BaseModel):
    group: Optional[str] = None


class RegisterResponse(BaseModel):
    annotator_id: str
    token: str
    group: str


class SuggestionPayload(BaseModel):
    label: str
    confidence: float


class NextResponse(BaseModel):
    done: bool = False
    round_complete: bool = False
    study_complete: bool = False
    doc_id: Optional[str] = None
    text: Optional[str] = None
    round: Optional[int] = None
    position: Optional[int] = None
    total: Optional[int] = None
    suggestion: Optional[SuggestionPayload] = None


class SubmitRequest(BaseModel):
    doc_id: str
    chosen: str
    started_at: str = Field(description="RFC 3339 timestamp of item render time")


class SubmitResponse(BaseModel):
    accepted_recorded: Optional[bool] = None
    retrain_scheduled: bool = False


class FinishRoundResponse(BaseModel):
    annotator_id: str
    round: int
    n_items: int
    n_suggested: int
    n_accepted: int
    mean_latency: float
    study_complete: bool

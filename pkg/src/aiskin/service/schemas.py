"""Request and response bodies for the admin HTTP API."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class Health(BaseModel):
    status: str = "ok"
    role: str
    versions: dict[str, int] = Field(default_factory=dict)


class DelayRecordOut(BaseModel):
    request_id: int
    computation_s: float
    transmission_s: float
    total_s: float


class EdgeStatus(BaseModel):
    versions: dict[str, int]
    pool_size: int
    pool_capacity: int
    threshold_bits: float
    spooled: int
    metrics: dict[str, int]


class FilterRoundOut(BaseModel):
    round_id: int
    pooled_samples: int
    uploaded_samples: int
    pooled_bytes: int
    uploaded_bytes: int
    frames: int
    delivered: int
    spooled: int


class EdgeEntry(BaseModel):
    address: str
    versions: dict[str, int] = Field(default_factory=dict)
    failures: int = 0


class RegisterEdge(BaseModel):
    address: str = Field(..., min_length=3, examples=["127.0.0.1:7001"])
    versions: dict[str, int] = Field(default_factory=dict)


class CloudStatus(BaseModel):
    versions: dict[str, int]
    new_samples: dict[str, int]
    partitions: dict[str, int]
    edges: list[EdgeEntry]
    metrics: dict[str, int]


class RetrainOut(BaseModel):
    disease: str
    retrained: bool
    version: int
    reason: str = ""
    labeled_samples: int = 0
    pseudo_samples: int = 0
    mean_loss: Optional[float] = None


class PushOut(BaseModel):
    edge: str
    disease: str
    status: str
    version: int
    detail: str = ""

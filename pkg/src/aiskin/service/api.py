"""Admin HTTP API for edge and cloud nodes.

Frames between terminal, edge and cloud travel over the AISP socket protocol;
this API only exposes status, the delay-metrics channel and manual triggers.
"""

from __future__ import annotations

import math
import threading
import time
from typing import Optional

import uvicorn
from fastapi import FastAPI, HTTPException

from ..cloud import CloudNode
from ..core import DISEASE_TYPES, DiseaseType
from ..edge import EdgeNode
from .schemas import (
    CloudStatus,
    DelayRecordOut,
    EdgeEntry,
    EdgeStatus,
    FilterRoundOut,
    Health,
    PushOut,
    RegisterEdge,
    RetrainOut,
)


def _slugs(versions: dict) -> dict:
    return {DiseaseType(d).slug: int(v) for d, v in versions.items()}


def _disease(name: str) -> DiseaseType:
    try:
        return DiseaseType.parse(name)
    except (KeyError, ValueError):
        raise HTTPException(404, f"unknown disease type {name!r}") from None


def create_edge_app(node: EdgeNode) -> FastAPI:
    app = FastAPI(title="aiskin edge admin")

    @app.get("/health", response_model=Health)
    def health():
        return Health(role="edge", versions=_slugs(node.versions()))

    @app.get("/status", response_model=EdgeStatus)
    def status():
        return EdgeStatus(
            versions=_slugs(node.versions()),
            pool_size=node.pool_size(),
            pool_capacity=node.config.pool_capacity,
            threshold_bits=node.config.filter.threshold_bits,
            spooled=node.spooled(),
            metrics=node.metrics.snapshot(),
        )

    @app.get("/metrics/delays", response_model=list[DelayRecordOut])
    def delays(request_id: Optional[int] = None, since: int = 0):
        records = node.delay_records(since)
        if request_id is not None:
            records = [r for r in records if r.request_id == request_id]
        return [DelayRecordOut(**r.__dict__) for r in records]

    @app.post("/filter-round", response_model=FilterRoundOut)
    def filter_round():
        r = node.run_filter_round()
        return FilterRoundOut(
            round_id=r.round_id, pooled_samples=r.pooled_samples,
            uploaded_samples=r.uploaded_samples, pooled_bytes=r.pooled_bytes,
            uploaded_bytes=r.uploaded_bytes, frames=len(r.frames), delivered=r.delivered,
            spooled=r.spooled,
        )

    return app


def create_cloud_app(node: CloudNode) -> FastAPI:
    app = FastAPI(title="aiskin cloud admin")

    @app.get("/health", response_model=Health)
    def health():
        return Health(role="cloud", versions=_slugs(node.versions()))

    @app.get("/status", response_model=CloudStatus)
    def status():
        return CloudStatus(
            versions=_slugs(node.versions()),
            new_samples={d.slug: node.new_samples(d) for d in DISEASE_TYPES},
            partitions=node.store.sizes(),
            edges=[EdgeEntry(address=e.address, versions=_slugs(e.versions), failures=e.failures)
                   for e in node.edges.edges()],
            metrics=node.metrics.snapshot(),
        )

    @app.post("/edges", response_model=EdgeEntry, status_code=201)
    def register(body: RegisterEdge):
        try:
            versions = {DiseaseType.parse(k): v for k, v in body.versions.items()}
        except (KeyError, ValueError):
            raise HTTPException(422, "unknown disease type in versions") from None
        rec = node.edges.register(body.address, versions)
        return EdgeEntry(address=rec.address, versions=_slugs(rec.versions), failures=rec.failures)

    @app.post("/retrain/{disease}", response_model=RetrainOut)
    def retrain(disease: str):
        r = node.retrain_round(_disease(disease))
        return RetrainOut(
            disease=r.disease_type.slug, retrained=r.retrained, version=r.version,
            reason=r.reason, labeled_samples=r.labeled_samples, pseudo_samples=r.pseudo_samples,
            mean_loss=None if math.isnan(r.mean_loss) else r.mean_loss,
        )

    @app.post("/push", response_model=list[PushOut])
    def push():
        return [PushOut(edge=p.edge, disease=p.disease_type.slug, status=p.status,
                        version=p.version, detail=p.detail)
                for p in node.push_updates(ignore_backoff=True)]

    return app


class AdminServer:
    """Runs an app under uvicorn in a background thread."""

    def __init__(self, app: FastAPI, host: str = "127.0.0.1", port: int = 0):
        config = uvicorn.Config(app, host=host, port=port, log_level="warning", lifespan="off")
        self.server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self.server.run, name="admin-http", daemon=True)

    def start(self, timeout: float = 10.0) -> "AdminServer":
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self.server.started:
            if time.monotonic() > deadline or not self._thread.is_alive():
                raise RuntimeError("admin server did not start")
            time.sleep(0.02)
        return self

    @property
    def url(self) -> str:
        sock = self.server.servers[0].sockets[0]
        host, port = sock.getsockname()[:2]
        return f"http://{host}:{port}"

    def stop(self) -> None:
        self.server.should_exit = True
        self._thread.join(timeout=10)

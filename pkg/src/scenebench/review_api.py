"""HTTP surface of the review loop, consumed by the inspector UI.

JSON endpoints: GET /health, GET /batches?status=, GET /batches/{id},
POST /batches/{id}/decision, POST /batches/{id}/relabel,
POST /items/{id}/caption, GET /ledger, POST /ingest, GET /export.
Built UI assets, when present, are served from the root path.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from . import __version__
from .review import (
    BlacklistedSourceError,
    ReviewError,
    ReviewStore,
    StateTransitionError,
)

__all__ = ["create_app"]


class IngestItem(BaseModel):
    id: str
    image_ref: str
    prompt_kind: str = "A"
    caption: str | None = None


class IngestRequest(BaseModel):
    source_id: str
    items: list[IngestItem]
    stage: str = "raw_qc"


class DecisionRequest(BaseModel):
    action: str
    worst_item_ids: list[str] | None = None
    feedback: str | None = None


class CaptionRequest(BaseModel):
    caption: str
    editor: str = Field(default="inspector")


def _batch_view(store: ReviewStore, batch) -> dict:
    doc = batch.to_dict()
    doc["sampled_items"] = [
        store.items[i].to_dict() for i in batch.sampled_ids
    ]
    doc["n_items"] = len(batch.item_ids)
    return doc


def create_app(
    store: ReviewStore,
    captioner=None,
    static_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="scenebench review", version=__version__)

    @app.exception_handler(ReviewError)
    async def _review_error(_request, exc: ReviewError):
        status = 400
        if isinstance(exc, StateTransitionError):
            status = 409
        elif isinstance(exc, BlacklistedSourceError):
            status = 403
        elif "unknown" in str(exc):
            status = 404
        raise HTTPException(status_code=status, detail=str(exc))

    @app.get("/health")
    def health():
        return {"version": __version__, "seed": store.seed, "events": store._seq}

    @app.get("/batches")
    def list_batches(status: str | None = None):
        return [_batch_view(store, b) for b in store.list_batches(status)]

    @app.get("/batches/{batch_id}")
    def get_batch(batch_id: str):
        batch = store._get_batch(batch_id)
        return _batch_view(store, batch)

    @app.post("/batches/{batch_id}/decision")
    def decide(batch_id: str, body: DecisionRequest):
        batch = store.record_decision(
            batch_id, body.action, body.worst_item_ids, body.feedback
        )
        return _batch_view(store, batch)

    @app.post("/batches/{batch_id}/relabel")
    def relabel(batch_id: str):
        if captioner is None:
            raise HTTPException(status_code=503, detail="no captioner configured")
        result = store.request_relabel(batch_id, captioner)
        result["batch"] = _batch_view(store, store._get_batch(batch_id))
        return result

    @app.post("/items/{item_id}/caption")
    def set_caption(item_id: str, body: CaptionRequest):
        item = store.edit_caption(item_id, body.caption, editor=body.editor)
        return item.to_dict()

    @app.get("/ledger")
    def ledger():
        return store.ledger.to_dict()

    @app.post("/ingest")
    def ingest(body: IngestRequest):
        batch = store.ingest(
            body.source_id,
            [item.model_dump() for item in body.items],
            stage=body.stage,
        )
        return _batch_view(store, batch)

    @app.get("/export", response_class=PlainTextResponse)
    def export():
        return store.export_accepted()

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app

"""Event-sourced human review loop for auto-labeled image batches.

Two quality-check stages share one state machine: raw image QC (whole
batch returns on reject) and caption QC (only the flagged worst items
return). Every mutation is an event appended to a JSONL log; replaying
the log from empty reproduces the state exactly. Sources accumulate one
return strike per flagged item and enter the blacklist at five strikes.
"""

from __future__ import annotations

import json
import math
import random
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

__all__ = [
    "BLACKLIST_THRESHOLD",
    "SAMPLE_FRACTION",
    "MAX_WORST",
    "ReviewError",
    "StateTransitionError",
    "BlacklistedSourceError",
    "LabelItem",
    "ReviewBatch",
    "SourceLedger",
    "ReviewStore",
    "CaptionerClient",
    "MockCaptioner",
    "FlakyCaptioner",
]

BLACKLIST_THRESHOLD = 5
SAMPLE_FRACTION = 0.10
MAX_WORST = 3

ITEM_STATES = ("unlabeled", "labeled", "approved", "returned")
BATCH_STATUSES = ("pending", "in_review", "accepted", "rejected")
STAGES = ("raw_qc", "caption_qc")


class ReviewError(ValueError):
    pass


class StateTransitionError(ReviewError):
    pass


class BlacklistedSourceError(ReviewError):
    pass


@dataclass
class LabelItem:
    id: str
    image_ref: str
    source_id: str
    prompt_kind: str = "A"
    caption: str | None = None
    state: str = "unlabeled"
    caption_history: list[str] = field(default_factory=list)

    def check(self):
        if self.state not in ITEM_STATES:
            raise ReviewError(f"bad item state {self.state!r}")
        if self.state == "approved" and not self.caption:
            raise ReviewError(f"approved item {self.id} has no caption")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "source_id": self.source_id,
            "prompt_kind": self.prompt_kind,
            "caption": self.caption,
            "state": self.state,
            "caption_history": list(self.caption_history),
        }


@dataclass
class ReviewBatch:
    id: str
    item_ids: list[str]
    stage: str
    sampled_ids: list[str]
    status: str = "pending"
    feedback: str | None = None
    round: int = 0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "item_ids": list(self.item_ids),
            "stage": self.stage,
            "sampled_ids": list(self.sampled_ids),
            "status": self.status,
            "feedback": self.feedback,
            "round": self.round,
        }


@dataclass
class SourceLedger:
    return_counts: dict[str, int] = field(default_factory=dict)

    @property
    def blacklist(self) -> set[str]:
        return {
            s for s, n in self.return_counts.items() if n >= BLACKLIST_THRESHOLD
        }

    def to_dict(self) -> dict:
        return {
            "return_counts": dict(sorted(self.return_counts.items())),
            "blacklist": sorted(self.blacklist),
        }


def sample_size(n_items: int) -> int:
    return math.ceil(SAMPLE_FRACTION * n_items)


class CaptionerClient:
    """HTTP captioner: POST {image_ref, prompt, feedback?} -> {caption}."""

    def __init__(self, base_url: str, timeout: float = 10.0, retries: int = 2):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries

    def caption(self, image_ref: str, prompt: str, feedback: str | None = None) -> str:
        import httpx

        payload = {"image_ref": image_ref, "prompt": prompt}
        if feedback:
            payload["feedback"] = feedback
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = httpx.post(self.base_url, json=payload, timeout=self.timeout)
                resp.raise_for_status()
                body = resp.json()
                if not isinstance(body, dict) or "caption" not in body:
                    raise ReviewError(f"malformed captioner response: {body!r}")
                return str(body["caption"])
            except ReviewError:
                raise
            except Exception as exc:  # noqa: BLE001 - network errors are retriable
                last_error = exc
        raise ConnectionError(f"captioner unreachable: {last_error}")


class MockCaptioner:
    """Deterministic in-process captioner for tests and the desk demo."""

    def caption(self, image_ref: str, prompt: str, feedback: str | None = None) -> str:
        suffix = f" [after feedback: {feedback}]" if feedback else ""
        return f"caption:{image_ref}{suffix}"


class FlakyCaptioner:
    """Fails on the image refs listed; everything else captions normally."""

    def __init__(self, fail_refs):
        self.fail_refs = set(fail_refs)
        self.inner = MockCaptioner()

    def caption(self, image_ref: str, prompt: str, feedback: str | None = None) -> str:
        if image_ref in self.fail_refs:
            raise ConnectionError(f"captioner unreachable for {image_ref}")
        return self.inner.caption(image_ref, prompt, feedback)


# prompt kinds mirror the three description prompt styles the labeling
# pipeline feeds the captioner: overall scene (A), traffic elements (B),
# lane and maneuver (C)
PROMPTS = {
    "A": "Describe the overall scene and anything unusual.",
    "B": "Describe the traffic elements relevant to driving.",
    "C": "Describe the lane the vehicle occupies and the sensible maneuver.",
}


class ReviewStore:
    """Single-writer, event-sourced review state.

    Handlers never mutate state directly: every operation builds an event,
    appends it to the log (flushed per event), then applies it. Replaying
    the persisted log through ``ReviewStore.replay`` rebuilds the state
    byte-for-byte.
    """

    def __init__(self, log_path: str | Path | None = None, seed: int = 0):
        self.items: dict[str, LabelItem] = {}
        self.batches: dict[str, ReviewBatch] = {}
        self.ledger = SourceLedger()
        self.seed = seed
        self._seq = 0
        self._batch_counter = 0
        self._lock = threading.RLock()
        self._log_path = Path(log_path) if log_path else None
        self._log_file = None
        if self._log_path:
            self._log_path.parent.mkdir(parents=True, exist_ok=True)
            if self._log_path.exists():
                self._replay_file(self._log_path)
            self._log_file = self._log_path.open("a", encoding="utf-8")

    # ------------------------------------------------------------------
    # event plumbing

    def _emit(self, kind: str, **payload) -> dict:
        with self._lock:
            event = {"seq": self._seq, "kind": kind, **payload}
            if self._log_file is not None:
                self._log_file.write(
                    json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n"
                )
                self._log_file.flush()
            self._apply(event)
            return event

    def _replay_file(self, path: Path):
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                self._apply(json.loads(line))

    @classmethod
    def replay(cls, log_path: str | Path, seed: int = 0) -> "ReviewStore":
        """Rebuild a store from an event log without attaching to it."""
        store = cls(log_path=None, seed=seed)
        store._replay_file(Path(log_path))
        return store

    def close(self):
        with self._lock:
            if self._log_file is not None:
                self._log_file.flush()
                self._log_file.close()
                self._log_file = None

    def _apply(self, event: dict):
        kind = event["kind"]
        handler = getattr(self, f"_apply_{kind}")
        handler(event)
        self._seq = event["seq"] + 1
        self._check_invariants()

    def _check_invariants(self):
        for item in self.items.values():
            item.check()
        for batch in self.batches.values():
            if not set(batch.sampled_ids) <= set(batch.item_ids):
                raise ReviewError(f"batch {batch.id}: sample not a subset")

    # ------------------------------------------------------------------
    # operations (validate, then emit)

    def ingest(self, source_id: str, item_refs: list[dict], stage: str = "raw_qc") -> ReviewBatch:
        """Stage a QC batch from a source; refused if the source is blacklisted."""
        with self._lock:
            if stage not in STAGES:
                raise ReviewError(f"unknown stage {stage!r}")
            if not item_refs:
                raise ReviewError("cannot ingest an empty item list")
            if source_id in self.ledger.blacklist:
                raise BlacklistedSourceError(
                    f"source {source_id!r} is blacklisted "
                    f"({self.ledger.return_counts[source_id]} returns)"
                )
            for ref in item_refs:
                if ref["id"] in self.items:
                    raise ReviewError(f"duplicate item id {ref['id']!r}")
            batch_id = f"batch-{self._batch_counter:05d}"
            ids = [ref["id"] for ref in item_refs]
            rng = random.Random(f"{self.seed}:{batch_id}")
            sampled = sorted(rng.sample(sorted(ids), sample_size(len(ids))))
            self._emit(
                "ingested",
                source_id=source_id,
                stage=stage,
                batch_id=batch_id,
                items=[
                    {
                        "id": ref["id"],
                        "image_ref": ref["image_ref"],
                        "prompt_kind": ref.get("prompt_kind", "A"),
                        "caption": ref.get("caption"),
                    }
                    for ref in item_refs
                ],
                sampled_ids=sampled,
            )
            return self.batches[batch_id]

    def _apply_ingested(self, event: dict):
        stage = event["stage"]
        for ref in event["items"]:
            caption = ref.get("caption")
            self.items[ref["id"]] = LabelItem(
                id=ref["id"],
                image_ref=ref["image_ref"],
                source_id=event["source_id"],
                prompt_kind=ref["prompt_kind"],
                caption=caption,
                state="labeled" if caption else "unlabeled",
                caption_history=[caption] if caption else [],
            )
        self.batches[event["batch_id"]] = ReviewBatch(
            id=event["batch_id"],
            item_ids=[ref["id"] for ref in event["items"]],
            stage=stage,
            sampled_ids=list(event["sampled_ids"]),
        )
        self._batch_counter = max(
            self._batch_counter, int(event["batch_id"].split("-")[1]) + 1
        )

    def start_review(self, batch_id: str) -> ReviewBatch:
        with self._lock:
            batch = self._get_batch(batch_id)
            if batch.status not in ("pending",):
                raise StateTransitionError(
                    f"batch {batch_id} is {batch.status}, cannot start review"
                )
            self._emit("review_started", batch_id=batch_id)
            return self.batches[batch_id]

    def _apply_review_started(self, event: dict):
        self.batches[event["batch_id"]].status = "in_review"

    def record_decision(
        self,
        batch_id: str,
        action: str,
        worst_item_ids: list[str] | None = None,
        feedback: str | None = None,
    ) -> ReviewBatch:
        """Accept or reject a batch under inspection.

        A pending batch implicitly enters review. Reject needs 1..3 worst
        ids drawn from the inspected sample plus feedback text; at the raw
        stage the whole batch returns, at the caption stage only the worst
        items do. Each flagged item adds one return strike to its source.
        """
        with self._lock:
            batch = self._get_batch(batch_id)
            if batch.status in ("accepted", "rejected"):
                raise StateTransitionError(
                    f"batch {batch_id} already {batch.status}"
                )
            if action == "accept":
                self._emit("decided", batch_id=batch_id, action="accept")
            elif action == "reject":
                worst = list(worst_item_ids or [])
                if not 1 <= len(worst) <= MAX_WORST:
                    raise ReviewError(
                        f"reject flags 1..{MAX_WORST} worst items, got {len(worst)}"
                    )
                if not set(worst) <= set(batch.sampled_ids):
                    raise ReviewError("worst items must come from the inspected sample")
                if not feedback or not feedback.strip():
                    raise ReviewError("reject requires feedback text")
                self._emit(
                    "decided",
                    batch_id=batch_id,
                    action="reject",
                    worst_item_ids=sorted(worst),
                    feedback=feedback,
                )
            else:
                raise ReviewError(f"unknown action {action!r}")
            return self.batches[batch_id]

    def _apply_decided(self, event: dict):
        batch = self.batches[event["batch_id"]]
        if event["action"] == "accept":
            batch.status = "accepted"
            if batch.stage == "caption_qc":
                for item_id in batch.item_ids:
                    item = self.items[item_id]
                    if item.caption:
                        item.state = "approved"
            return
        batch.status = "rejected"
        batch.feedback = event["feedback"]
        batch.round += 1
        worst = set(event["worst_item_ids"])
        returned = (
            set(batch.item_ids) if batch.stage == "raw_qc" else worst
        )
        for item_id in returned:
            self.items[item_id].state = "returned"
        for item_id in sorted(worst):
            source = self.items[item_id].source_id
            self.ledger.return_counts[source] = (
                self.ledger.return_counts.get(source, 0) + 1
            )

    def edit_caption(self, item_id: str, caption: str, editor: str = "inspector") -> LabelItem:
        """Inspector caption correction; recorded with editor attribution."""
        with self._lock:
            if item_id not in self.items:
                raise ReviewError(f"unknown item {item_id!r}")
            if not caption or not caption.strip():
                raise ReviewError("caption cannot be empty")
            self._emit(
                "caption_set",
                item_id=item_id,
                caption=caption,
                editor=editor,
                to_state=self.items[item_id].state,
            )
            return self.items[item_id]

    def _apply_caption_set(self, event: dict):
        item = self.items[event["item_id"]]
        item.caption = event["caption"]
        item.caption_history.append(event["caption"])
        item.state = event["to_state"]

    def request_relabel(self, batch_id: str, captioner) -> dict:
        """Send every returned item of a rejected batch back through the
        captioner with the inspector feedback. Items whose caption request
        fails stay returned (retriable); the batch re-enters the pending
        queue only when nothing is left in the returned state."""
        with self._lock:
            batch = self._get_batch(batch_id)
            if batch.status != "rejected":
                raise StateTransitionError(
                    f"batch {batch_id} is {batch.status}, relabel needs rejected"
                )
            returned = [
                i for i in batch.item_ids if self.items[i].state == "returned"
            ]
            relabeled: list[str] = []
            failed: list[str] = []
            for item_id in returned:
                item = self.items[item_id]
                prompt = PROMPTS.get(item.prompt_kind, PROMPTS["A"])
                try:
                    caption = captioner.caption(
                        item.image_ref, prompt, feedback=batch.feedback
                    )
                except ConnectionError:
                    failed.append(item_id)
                    continue
                if not isinstance(caption, str) or not caption:
                    raise ReviewError(f"malformed caption for {item_id!r}")
                self._emit(
                    "caption_set",
                    item_id=item_id,
                    caption=caption,
                    editor="captioner",
                    to_state="labeled",
                )
                relabeled.append(item_id)
            if not failed:
                self._emit("requeued", batch_id=batch_id)
            return {"relabeled": relabeled, "failed": failed}

    def _apply_requeued(self, event: dict):
        self.batches[event["batch_id"]].status = "pending"

    # ------------------------------------------------------------------
    # queries

    def _get_batch(self, batch_id: str) -> ReviewBatch:
        if batch_id not in self.batches:
            raise ReviewError(f"unknown batch {batch_id!r}")
        return self.batches[batch_id]

    def list_batches(self, status: str | None = None) -> list[ReviewBatch]:
        out = sorted(self.batches.values(), key=lambda b: b.id)
        if status:
            out = [b for b in out if b.status == status]
        return out

    def export_accepted(self) -> str:
        """JSONL of approved items sorted by id; idempotent."""
        lines = []
        for item in sorted(self.items.values(), key=lambda i: i.id):
            if item.state == "approved":
                lines.append(
                    json.dumps(
                        {
                            "image_ref": item.image_ref,
                            "caption": item.caption,
                            "prompt_kind": item.prompt_kind,
                        },
                        sort_keys=True,
                        separators=(",", ":"),
                    )
                )
        return "".join(line + "\n" for line in lines)

    def state_snapshot(self) -> str:
        """Canonical JSON of the full state, for replay comparison."""
        doc = {
            "seq": self._seq,
            "items": [
                self.items[k].to_dict() for k in sorted(self.items)
            ],
            "batches": [
                self.batches[k].to_dict() for k in sorted(self.batches)
            ],
            "ledger": self.ledger.to_dict(),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

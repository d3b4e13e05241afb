"""QA-pair construction for the driving-scene benchmark tasks.

Scenes arrive as JSONL frame records (opaque image refs plus timestamps,
lidar points, narrations, sign lists, and ego state). Constructors turn
them into task-tagged question/answer pairs: localization answers are
serialized through the spatial codec as space-token triples, temporal
tasks attach the frame contexts the benchmark fixes per task (7 frames
over 3.5 s for the driving tasks, 20 frames over 60 s for the egocentric
ones, 3 frames for planning), and all sampling is driven by per-scene
seeds so regeneration is byte-identical.

Temporal conventions: a 7-frame context covers timestamps now-3.0 .. now
at 0.5 s spacing; tracking answers the 7 context positions and box
prediction mirrors it with now+0.5 .. now+3.5.
"""

from __future__ import annotations

import json
import math
import random
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spatial import (
    BehindCameraError,
    CameraCalib,
    GridIndex,
    GridSpec,
    OutOfExtentError,
    SpaceVocab,
    grid_to_tokens,
    project,
    quantize,
    tokens_to_grid,
)

__all__ = [
    "TASKS",
    "TASK_FRAME_COUNT",
    "TASK_PLACEHOLDERS",
    "Template",
    "TemplateBank",
    "PointObs",
    "EgoState",
    "FrameRecord",
    "Scene",
    "QAPair",
    "GenerationConfig",
    "MissingAnnotationError",
    "InfeasibleWindowError",
    "extract_placeholders",
    "fill_template",
    "fps_sample",
    "make_box_detection",
    "make_tracking",
    "make_box_prediction",
    "make_surrounding_narration",
    "make_traffic_sign_inquiry",
    "make_action_decision",
    "make_moment_recap",
    "make_event_query",
    "make_activity_prediction",
    "make_egocentric_narration",
    "make_planning",
    "generate_scene",
    "generate",
    "pairs_to_jsonl",
    "load_scene_file",
    "load_scenes_dir",
    "decode_located_answer",
    "scene_seed",
]

PLANNING_COMMANDS = ("turn_left", "turn_right", "keep_forward")

TASK_FRAME_COUNT = {
    "surrounding_narration": 1,
    "traffic_sign_inquiry": 7,
    "action_decision": 7,
    "box_detection": 1,
    "tracking": 7,
    "box_prediction": 7,
    "egocentric_narration": 1,
    "moment_recap": 20,
    "event_query": 20,
    "activity_prediction": 20,
    "planning": 3,
}
TASKS = tuple(TASK_FRAME_COUNT)

TASK_PLACEHOLDERS = {
    "surrounding_narration": set(),
    "traffic_sign_inquiry": {"t"},
    "action_decision": set(),
    "box_detection": {"c", "u", "v"},
    "tracking": {"c", "u", "v", "t"},
    "box_prediction": {"c", "u", "v", "t"},
    "egocentric_narration": set(),
    "moment_recap": {"t"},
    "event_query": {"event_a", "event_b"},
    "activity_prediction": {"t"},
    "planning": {"direction", "s"},
}

CONTEXT_SPACING = 0.5
CONTEXT_TOL = 1e-3
LONG_WINDOW = 60.0
LONG_FRAMES = 20
RECAP_MIN_GAP = 20.0
PLANNING_POINTS = 6

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")
_INT_PLACEHOLDERS = {"u", "v"}
_DECIMAL_PLACEHOLDERS = {"t", "s"}


class MissingAnnotationError(ValueError):
    """The scene lacks the annotation stream a task needs."""


class InfeasibleWindowError(ValueError):
    """No candidate satisfies the task's temporal window constraint."""


@dataclass(frozen=True)
class Template:
    id: str
    task: str
    text: str
    answer_kind: str

    def __post_init__(self):
        if self.task not in TASK_FRAME_COUNT:
            raise ValueError(f"unknown task {self.task!r} in template {self.id!r}")
        extra = extract_placeholders(self.text) - TASK_PLACEHOLDERS[self.task]
        if extra:
            raise ValueError(
                f"template {self.id!r} uses placeholders {sorted(extra)} "
                f"not in the {self.task} binding schema"
            )


@dataclass(frozen=True)
class TemplateBank:
    templates: tuple[Template, ...]

    def __post_init__(self):
        ids = [t.id for t in self.templates]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate template ids")

    def for_task(self, task: str) -> tuple[Template, ...]:
        subset = tuple(
            sorted((t for t in self.templates if t.task == task), key=lambda t: t.id)
        )
        if not subset:
            raise MissingAnnotationError(f"template bank has no {task} templates")
        return subset

    @classmethod
    def load(cls, path) -> "TemplateBank":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            templates=tuple(
                Template(
                    id=r["id"],
                    task=r["task"],
                    text=r["text"],
                    answer_kind=r["answer_kind"],
                )
                for r in raw
            )
        )


def extract_placeholders(text: str) -> set[str]:
    return set(_PLACEHOLDER_RE.findall(text))


def fill_template(tpl: Template, bindings: dict) -> str:
    """Substitute placeholders: pixels as integers, timestamps and speeds
    with one decimal, everything else verbatim."""
    needed = extract_placeholders(tpl.text)
    missing = needed - set(bindings)
    if missing:
        raise ValueError(f"missing bindings for {sorted(missing)}")

    def render(match):
        name = match.group(1)
        value = bindings[name]
        if name in _INT_PLACEHOLDERS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"{name} must be numeric, got {value!r}")
            return str(int(round(value)))
        if name in _DECIMAL_PLACEHOLDERS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"{name} must be numeric, got {value!r}")
            return f"{float(value):.1f}"
        if not isinstance(value, str):
            raise ValueError(f"{name} must be a string, got {value!r}")
        return value

    return _PLACEHOLDER_RE.sub(render, tpl.text)


@dataclass(frozen=True)
class PointObs:
    xyz: tuple[float, float, float]
    category: str | None = None
    track_id: str | None = None


@dataclass(frozen=True)
class EgoState:
    speed: float | None = None
    command: str | None = None
    future_xy: tuple[tuple[float, float], ...] | None = None


@dataclass(frozen=True)
class FrameRecord:
    image: str
    t: float
    calib_id: str | None = None
    points: tuple[PointObs, ...] = ()
    narration: str | None = None
    traffic_signs: tuple[str, ...] | None = None
    decision: str | None = None
    ego: EgoState | None = None


@dataclass(frozen=True)
class Scene:
    id: str
    frames: tuple[FrameRecord, ...]

    def __post_init__(self):
        if not self.frames:
            raise ValueError(f"scene {self.id!r} has no frames")
        ts = [f.t for f in self.frames]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"scene {self.id!r} timestamps not monotone")

    @property
    def t_min(self) -> float:
        return self.frames[0].t

    @property
    def t_max(self) -> float:
        return self.frames[-1].t


@dataclass(frozen=True)
class QAPair:
    id: str
    task: str
    frames: tuple[tuple[str, float], ...]
    question: str
    answer: str
    structured_gt: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = TASK_FRAME_COUNT.get(self.task)
        if expected is None:
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.frames) != expected:
            raise ValueError(
                f"{self.task} pairs carry {expected} frames, got {len(self.frames)}"
            )
        localized = self.task in ("box_detection", "tracking", "box_prediction", "planning")
        if localized and self.structured_gt is None:
            raise ValueError(f"{self.task} pairs need structured_gt")
        if not localized and self.structured_gt is not None:
            raise ValueError(f"{self.task} pairs must not carry structured_gt")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "task": self.task,
            "frames": [{"image": img, "t": t} for img, t in self.frames],
            "question": self.question,
            "answer": self.answer,
            "structured_gt": self.structured_gt,
            "meta": self.meta,
        }


@dataclass(frozen=True)
class GenerationConfig:
    grid: GridSpec
    vocab: SpaceVocab
    templates: TemplateBank
    calibs: dict[str, CameraCalib]
    seed: int = 0
    tasks: tuple[str, ...] = TASKS
    fps_threshold: float = 1.5
    fps_cap: int = 200
    recap_min_gap: float = RECAP_MIN_GAP
    long_window: float = LONG_WINDOW


def scene_seed(global_seed: int, scene_id: str) -> int:
    return (int(global_seed) & 0xFFFFFFFF) ^ zlib.crc32(scene_id.encode("utf-8"))


def fps_sample(points, threshold: float = 1.5, cap: int = 200) -> list[int]:
    """Greedy farthest-point selection, seeded at the point nearest the
    centroid; stops once the farthest remaining point is within
    ``threshold`` of the selected set or ``cap`` points are chosen.
    Returns indices in selection order."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("fps_sample needs a non-empty N x d point array")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    centroid = pts.mean(axis=0)
    seed = int(np.argmin(np.linalg.norm(pts - centroid, axis=1)))
    selected = [seed]
    dists = np.linalg.norm(pts - pts[seed], axis=1)
    while len(selected) < cap:
        far = int(np.argmax(dists))
        if dists[far] < threshold:
            break
        selected.append(far)
        dists = np.minimum(dists, np.linalg.norm(pts - pts[far], axis=1))
    return selected


def _draw_template(bank: TemplateBank, task: str, rng: random.Random) -> Template:
    subset = bank.for_task(task)
    return subset[rng.randrange(len(subset))]


def _frame_refs(scene: Scene, indices) -> tuple[tuple[str, float], ...]:
    return tuple((scene.frames[i].image, scene.frames[i].t) for i in indices)


def _context_indices(scene: Scene, now_idx: int, count: int = 7) -> list[int] | None:
    """Indices of frames at now - (count-1)*0.5 .. now, or None if any is absent."""
    now = scene.frames[now_idx].t
    wanted = [now - CONTEXT_SPACING * (count - 1 - k) for k in range(count)]
    by_time = {round(f.t / CONTEXT_TOL): i for i, f in enumerate(scene.frames)}
    out = []
    for w in wanted:
        key = round(w / CONTEXT_TOL)
        idx = by_time.get(key)
        if idx is None:
            return None
        out.append(idx)
    return out


def _cell_tokens(point, grid: GridSpec, vocab: SpaceVocab) -> tuple[GridIndex, list[str]]:
    idx = quantize(point, grid)
    return idx, list(grid_to_tokens(idx, vocab))


def decode_located_answer(
    answer: str, vocab: SpaceVocab, n_cells: int = 1
) -> tuple[str, list[GridIndex]]:
    """Split a located answer back into (category, cells); the last
    3 * n_cells tokens are space tokens, everything before is the label."""
    toks = answer.split()
    if len(toks) < 3 * n_cells:
        raise ValueError("answer too short for the expected cell count")
    head = toks[: len(toks) - 3 * n_cells]
    tail = toks[len(toks) - 3 * n_cells :]
    cells = [
        tokens_to_grid(tail[3 * i : 3 * i + 3], vocab) for i in range(n_cells)
    ]
    return (" ".join(head), cells)


def make_box_detection(
    scene: Scene,
    frame_idx: int,
    cfg: GenerationConfig,
    rng: random.Random,
    start_seq: int = 0,
) -> list[QAPair]:
    """One pair per FPS-surviving categorized point that projects in front
    of the camera and quantizes inside the grid."""
    frame = scene.frames[frame_idx]
    candidates = [p for p in frame.points if p.category]
    if not candidates:
        raise MissingAnnotationError(f"frame {frame.image} has no categorized points")
    calib = cfg.calibs.get(frame.calib_id or "")
    if calib is None:
        raise MissingAnnotationError(f"no calibration for {frame.calib_id!r}")
    order = fps_sample([p.xyz for p in candidates], cfg.fps_threshold, cfg.fps_cap)
    pairs = []
    seq = start_seq
    for pi in order:
        point = candidates[pi]
        try:
            u, v, _depth = project(point.xyz, calib)
            idx, toks = _cell_tokens(point.xyz, cfg.grid, cfg.vocab)
        except (BehindCameraError, OutOfExtentError):
            continue
        tpl = _draw_template(cfg.templates, "box_detection", rng)
        question = fill_template(tpl, {"c": calib.camera_id, "u": u, "v": v})
        pairs.append(
            QAPair(
                id=f"{scene.id}-box_detection-{seq:04d}",
                task="box_detection",
                frames=((frame.image, frame.t),),
                question=question,
                answer=f"{point.category} {' '.join(toks)}",
                structured_gt={"cell": list(idx.as_tuple()), "category": point.category},
                meta={
                    "camera_id": calib.camera_id,
                    "pixel": [int(round(u)), int(round(v))],
                    "source_ids": [point.track_id] if point.track_id else [],
                    "template_id": tpl.id,
                },
            )
        )
        seq += 1
    return pairs


def _track_table(scene: Scene) -> dict[str, dict[int, PointObs]]:
    table: dict[str, dict[int, PointObs]] = {}
    for i, frame in enumerate(scene.frames):
        for p in frame.points:
            if p.track_id:
                table.setdefault(p.track_id, {})[i] = p
    return table


def _trajectory_pairs(
    scene: Scene,
    now_idx: int,
    cfg: GenerationConfig,
    rng: random.Random,
    task: str,
    start_seq: int = 0,
) -> list[QAPair]:
    context = _context_indices(scene, now_idx)
    if context is None:
        return []
    now = scene.frames[now_idx].t
    if task == "tracking":
        answer_times = [scene.frames[i].t for i in context]
    else:
        answer_times = [now + CONTEXT_SPACING * (k + 1) for k in range(7)]
    by_time = {round(f.t / CONTEXT_TOL): i for i, f in enumerate(scene.frames)}
    answer_idx = [by_time.get(round(t / CONTEXT_TOL)) for t in answer_times]
    if any(i is None for i in answer_idx):
        return []

    frame = scene.frames[now_idx]
    calib = cfg.calibs.get(frame.calib_id or "")
    if calib is None:
        raise MissingAnnotationError(f"no calibration for {frame.calib_id!r}")
    tracks = _track_table(scene)
    pairs = []
    seq = start_seq
    for p in frame.points:
        if not (p.track_id and p.category):
            continue
        history = tracks.get(p.track_id, {})
        if any(i not in history for i in answer_idx):
            continue  # track absent somewhere in the window: pair skipped
        try:
            u, v, _depth = project(p.xyz, calib)
            cells = [
                _cell_tokens(history[i].xyz, cfg.grid, cfg.vocab) for i in answer_idx
            ]
        except (BehindCameraError, OutOfExtentError):
            continue
        tpl = _draw_template(cfg.templates, task, rng)
        question = fill_template(
            tpl, {"c": calib.camera_id, "u": u, "v": v, "t": 3.5}
        )
        tokens = [tok for _, toks in cells for tok in toks]
        pairs.append(
            QAPair(
                id=f"{scene.id}-{task}-{seq:04d}",
                task=task,
                frames=_frame_refs(scene, context),
                question=question,
                answer=f"{p.category} {' '.join(tokens)}",
                structured_gt={
                    "cells": [list(idx.as_tuple()) for idx, _ in cells],
                    "category": p.category,
                },
                meta={
                    "camera_id": calib.camera_id,
                    "pixel": [int(round(u)), int(round(v))],
                    "source_ids": [p.track_id],
                    "template_id": tpl.id,
                },
            )
        )
        seq += 1
    return pairs


def make_tracking(scene, now_idx, cfg, rng, start_seq=0) -> list[QAPair]:
    """Past 3D trajectory of the object under a query pixel: the 7 context
    positions, oldest first."""
    return _trajectory_pairs(scene, now_idx, cfg, rng, "tracking", start_seq)


def make_box_prediction(scene, now_idx, cfg, rng, start_seq=0) -> list[QAPair]:
    """Future mirror of tracking: positions at now+0.5 .. now+3.5."""
    return _trajectory_pairs(scene, now_idx, cfg, rng, "box_prediction", start_seq)


def make_surrounding_narration(
    scene: Scene, frame_idx: int, cfg: GenerationConfig, rng: random.Random, seq: int = 0
) -> QAPair:
    frame = scene.frames[frame_idx]
    if not frame.narration:
        raise MissingAnnotationError(f"frame {frame.image} has no narration")
    tpl = _draw_template(cfg.templates, "surrounding_narration", rng)
    return QAPair(
        id=f"{scene.id}-surrounding_narration-{seq:04d}",
        task="surrounding_narration",
        frames=((frame.image, frame.t),),
        question=fill_template(tpl, {}),
        answer=frame.narration,
        meta={"template_id": tpl.id},
    )


def make_traffic_sign_inquiry(
    scene: Scene, now_idx: int, cfg: GenerationConfig, rng: random.Random, seq: int = 0
) -> QAPair | None:
    """Signs observed strictly before the current frame within the 7-frame
    context; the answer lists them sorted, or reports none."""
    context = _context_indices(scene, now_idx)
    if context is None:
        return None
    if all(scene.frames[i].traffic_signs is None for i in context):
        raise MissingAnnotationError("scene carries no traffic-sign stream")
    now = scene.frames[now_idx].t
    signs: set[str] = set()
    for i in context:
        frame = scene.frames[i]
        if frame.t < now and frame.traffic_signs:
            signs.update(frame.traffic_signs)
    tpl = _draw_template(cfg.templates, "traffic_sign_inquiry", rng)
    answer = ", ".join(sorted(signs)) if signs else "no traffic signs"
    return QAPair(
        id=f"{scene.id}-traffic_sign_inquiry-{seq:04d}",
        task="traffic_sign_inquiry",
        frames=_frame_refs(scene, context),
        question=fill_template(tpl, {"t": 3.5}),
        answer=answer,
        meta={"template_id": tpl.id},
    )


def make_action_decision(
    scene: Scene, now_idx: int, cfg: GenerationConfig, rng: random.Random, seq: int = 0
) -> QAPair | None:
    context = _context_indices(scene, now_idx)
    if context is None:
        return None
    frame = scene.frames[now_idx]
    if not frame.decision:
        raise MissingAnnotationError(f"frame {frame.image} has no decision label")
    tpl = _draw_template(cfg.templates, "action_decision", rng)
    return QAPair(
        id=f"{scene.id}-action_decision-{seq:04d}",
        task="action_decision",
        frames=_frame_refs(scene, context),
        question=fill_template(tpl, {}),
        answer=frame.decision,
        meta={"template_id": tpl.id},
    )


def _long_window_indices(scene: Scene, now_idx: int, window: float) -> list[int]:
    """The LONG_FRAMES frames sampled evenly over [now - window, now]."""
    now = scene.frames[now_idx].t
    lo = now - window
    if now - scene.t_min < window - CONTEXT_TOL:
        raise InfeasibleWindowError(
            f"scene spans {now - scene.t_min:.1f} s before now; needs {window:.0f} s"
        )
    in_window = [i for i, f in enumerate(scene.frames) if lo - CONTEXT_TOL <= f.t <= now + CONTEXT_TOL and i <= now_idx]
    if len(in_window) < LONG_FRAMES:
        raise InfeasibleWindowError(
            f"only {len(in_window)} frames inside the {window:.0f} s window"
        )
    picks = np.round(np.linspace(0, len(in_window) - 1, LONG_FRAMES)).astype(int)
    return [in_window[i] for i in picks]


def _narrated(scene: Scene) -> list[int]:
    return [i for i, f in enumerate(scene.frames) if f.narration]


def make_moment_recap(
    scene: Scene, now_idx: int, cfg: GenerationConfig, rng: random.Random, seq: int = 0
) -> QAPair:
    """Recall a narration at least ``recap_min_gap`` seconds in the past."""
    window_frames = _long_window_indices(scene, now_idx, cfg.long_window)
    now = scene.frames[now_idx].t
    candidates = [
        i
        for i in _narrated(scene)
        if i <= now_idx
        and now - scene.frames[i].t >= cfg.recap_min_gap
        and now - scene.frames[i].t <= cfg.long_window + CONTEXT_TOL
    ]
    if not candidates:
        raise InfeasibleWindowError(
            f"no narration at least {cfg.recap_min_gap:.0f} s before now"
        )
    chosen = candidates[rng.randrange(len(candidates))]
    offset = now - scene.frames[chosen].t
    tpl = _draw_template(cfg.templates, "moment_recap", rng)
    return QAPair(
        id=f"{scene.id}-moment_recap-{seq:04d}",
        task="moment_recap",
        frames=_frame_refs(scene, window_frames),
        question=fill_template(tpl, {"t": offset}),
        answer=scene.frames[chosen].narration,
        meta={"template_id": tpl.id, "offset_s": round(offset, 1)},
    )


def make_event_query(
    scene: Scene, now_idx: int, cfg: GenerationConfig, rng: random.Random, start_seq: int = 0
) -> list[QAPair]:
    """For each run of three consecutive narrated moments inside the window,
    ask for the middle narration given the outer two."""
    window_frames = _long_window_indices(scene, now_idx, cfg.long_window)
    now = scene.frames[now_idx].t
    lo = now - cfg.long_window
    narrated = [
        i
        for i in _narrated(scene)
        if i <= now_idx and scene.frames[i].t >= lo - CONTEXT_TOL
    ]
    pairs = []
    seq = start_seq
    for a, b, c in zip(narrated, narrated[1:], narrated[2:]):
        n_a = scene.frames[a].narration
        n_b = scene.frames[b].narration
        n_c = scene.frames[c].narration
        tpl = _draw_template(cfg.templates, "event_query", rng)
        question = fill_template(tpl, {"event_a": n_a, "event_b": n_c})
        if n_b in question:
            continue  # middle narration must stay hidden from the prompt
        pairs.append(
            QAPair(
                id=f"{scene.id}-event_query-{seq:04d}",
                task="event_query",
                frames=_frame_refs(scene, window_frames),
                question=question,
                answer=n_b,
                meta={"template_id": tpl.id},
            )
        )
        seq += 1
    return pairs


def make_activity_prediction(
    scene: Scene, now_idx: int, cfg: GenerationConfig, rng: random.Random, seq: int = 0
) -> QAPair:
    """Mirror of moment recap: a narration at least the same gap ahead."""
    window_frames = _long_window_indices(scene, now_idx, cfg.long_window)
    now = scene.frames[now_idx].t
    candidates = [
        i
        for i in _narrated(scene)
        if i > now_idx and scene.frames[i].t - now >= cfg.recap_min_gap
    ]
    if not candidates:
        raise InfeasibleWindowError(
            f"no narration at least {cfg.recap_min_gap:.0f} s after now"
        )
    chosen = candidates[rng.randrange(len(candidates))]
    offset = scene.frames[chosen].t - now
    tpl = _draw_template(cfg.templates, "activity_prediction", rng)
    return QAPair(
        id=f"{scene.id}-activity_prediction-{seq:04d}",
        task="activity_prediction",
        frames=_frame_refs(scene, window_frames),
        question=fill_template(tpl, {"t": offset}),
        answer=scene.frames[chosen].narration,
        meta={"template_id": tpl.id, "offset_s": round(offset, 1)},
    )


def make_egocentric_narration(
    scene: Scene, frame_idx: int, cfg: GenerationConfig, rng: random.Random, seq: int = 0
) -> QAPair | None:
    """Single-frame caption pair; frames without narration are skipped."""
    frame = scene.frames[frame_idx]
    if not frame.narration:
        return None
    tpl = _draw_template(cfg.templates, "egocentric_narration", rng)
    return QAPair(
        id=f"{scene.id}-egocentric_narration-{seq:04d}",
        task="egocentric_narration",
        frames=((frame.image, frame.t),),
        question=fill_template(tpl, {}),
        answer=frame.narration,
        meta={"template_id": tpl.id},
    )


def make_planning(
    scene: Scene, now_idx: int, cfg: GenerationConfig, rng: random.Random, seq: int = 0
) -> QAPair:
    """Six future ego waypoints at 0.5 s steps serialized through the codec
    (z fixed at 0); inputs are the current frame and the two preceding
    half-second frames."""
    frame = scene.frames[now_idx]
    if frame.ego is None or frame.ego.command not in PLANNING_COMMANDS:
        raise MissingAnnotationError(
            f"planning needs an ego command in {PLANNING_COMMANDS}"
        )
    if frame.ego.speed is None:
        raise MissingAnnotationError("planning needs the ego speed")
    future = frame.ego.future_xy or ()
    if len(future) < PLANNING_POINTS:
        raise InfeasibleWindowError(
            f"planning needs {PLANNING_POINTS} future waypoints, got {len(future)}"
        )
    context = _context_indices(scene, now_idx, count=3)
    if context is None:
        raise InfeasibleWindowError("planning needs 3 frames at 0.5 s spacing")
    waypoints = list(future[:PLANNING_POINTS])
    cells = [_cell_tokens((x, y, 0.0), cfg.grid, cfg.vocab) for x, y in waypoints]
    tpl = _draw_template(cfg.templates, "planning", rng)
    question = fill_template(
        tpl,
        {"direction": frame.ego.command.replace("_", " "), "s": frame.ego.speed},
    )
    tokens = [tok for _, toks in cells for tok in toks]
    return QAPair(
        id=f"{scene.id}-planning-{seq:04d}",
        task="planning",
        frames=_frame_refs(scene, context),
        question=question,
        answer=" ".join(tokens),
        structured_gt={
            "trajectory": [[float(x), float(y)] for x, y in waypoints],
            "cells": [list(idx.as_tuple()) for idx, _ in cells],
        },
        meta={"template_id": tpl.id, "command": frame.ego.command},
    )


def _last_index_with(scene: Scene, predicate) -> int | None:
    for i in range(len(scene.frames) - 1, -1, -1):
        if predicate(i):
            return i
    return None


def generate_scene(scene: Scene, cfg: GenerationConfig) -> list[QAPair]:
    """All pairs for one scene, deterministic under cfg.seed.

    Each task draws from its own stream seeded by (global seed XOR the
    scene id's CRC-32), so task filters do not disturb other tasks'
    outputs."""
    base = scene_seed(cfg.seed, scene.id)
    pairs: list[QAPair] = []

    def rng_for(task: str) -> random.Random:
        return random.Random(f"{base}:{task}")

    def has_context(i: int) -> bool:
        return _context_indices(scene, i) is not None

    if "box_detection" in cfg.tasks:
        rng = rng_for("box_detection")
        seq = 0
        for i, frame in enumerate(scene.frames):
            if frame.calib_id and any(p.category for p in frame.points):
                got = make_box_detection(scene, i, cfg, rng, start_seq=seq)
                pairs.extend(got)
                seq += len(got)

    if "tracking" in cfg.tasks:
        rng = rng_for("tracking")
        seq = 0
        for i in range(len(scene.frames)):
            if has_context(i):
                got = make_tracking(scene, i, cfg, rng, start_seq=seq)
                pairs.extend(got)
                seq += len(got)

    if "box_prediction" in cfg.tasks:
        rng = rng_for("box_prediction")
        seq = 0
        for i in range(len(scene.frames)):
            if has_context(i):
                got = make_box_prediction(scene, i, cfg, rng, start_seq=seq)
                pairs.extend(got)
                seq += len(got)

    if "surrounding_narration" in cfg.tasks:
        rng = rng_for("surrounding_narration")
        seq = 0
        for i, frame in enumerate(scene.frames):
            if frame.narration and frame.points:
                pairs.append(make_surrounding_narration(scene, i, cfg, rng, seq))
                seq += 1

    if "traffic_sign_inquiry" in cfg.tasks:
        rng = rng_for("traffic_sign_inquiry")
        seq = 0
        if any(f.traffic_signs is not None for f in scene.frames):
            for i in range(len(scene.frames)):
                if has_context(i):
                    pair = make_traffic_sign_inquiry(scene, i, cfg, rng, seq)
                    if pair is not None:
                        pairs.append(pair)
                        seq += 1

    if "action_decision" in cfg.tasks:
        rng = rng_for("action_decision")
        seq = 0
        for i, frame in enumerate(scene.frames):
            if frame.decision and has_context(i):
                pair = make_action_decision(scene, i, cfg, rng, seq)
                if pair is not None:
                    pairs.append(pair)
                    seq += 1

    if "egocentric_narration" in cfg.tasks:
        rng = rng_for("egocentric_narration")
        seq = 0
        for i, frame in enumerate(scene.frames):
            if frame.narration and not frame.points:
                pair = make_egocentric_narration(scene, i, cfg, rng, seq)
                if pair is not None:
                    pairs.append(pair)
                    seq += 1

    def window_ok(i: int) -> bool:
        return scene.frames[i].t - scene.t_min >= cfg.long_window - CONTEXT_TOL

    if "moment_recap" in cfg.tasks:
        rng = rng_for("moment_recap")
        now_idx = _last_index_with(scene, window_ok)
        if now_idx is not None:
            try:
                pairs.append(make_moment_recap(scene, now_idx, cfg, rng))
            except InfeasibleWindowError:
                pass

    if "event_query" in cfg.tasks:
        rng = rng_for("event_query")
        now_idx = _last_index_with(scene, window_ok)
        if now_idx is not None:
            try:
                pairs.extend(make_event_query(scene, now_idx, cfg, rng))
            except InfeasibleWindowError:
                pass

    if "activity_prediction" in cfg.tasks:
        rng = rng_for("activity_prediction")
        now_idx = _last_index_with(
            scene,
            lambda i: window_ok(i)
            and scene.t_max - scene.frames[i].t >= cfg.recap_min_gap,
        )
        if now_idx is not None:
            try:
                pairs.append(make_activity_prediction(scene, now_idx, cfg, rng))
            except InfeasibleWindowError:
                pass

    if "planning" in cfg.tasks:
        rng = rng_for("planning")
        seq = 0
        for i, frame in enumerate(scene.frames):
            if (
                frame.ego
                and frame.ego.command in PLANNING_COMMANDS
                and frame.ego.future_xy
                and len(frame.ego.future_xy) >= PLANNING_POINTS
                and _context_indices(scene, i, count=3) is not None
            ):
                try:
                    pairs.append(make_planning(scene, i, cfg, rng, seq))
                    seq += 1
                except (InfeasibleWindowError, OutOfExtentError):
                    continue

    return pairs


def generate(scenes: list[Scene], cfg: GenerationConfig) -> list[QAPair]:
    """All pairs across scenes, merged in scene-id order."""
    out: list[QAPair] = []
    for scene in sorted(scenes, key=lambda s: s.id):
        out.extend(generate_scene(scene, cfg))
    return out


def pairs_to_jsonl(pairs: list[QAPair]) -> str:
    """Canonical JSONL rendering: sorted keys, compact separators, one pair
    per line; byte-identical across runs for identical pairs."""
    lines = [
        json.dumps(p.to_dict(), sort_keys=True, separators=(",", ":")) for p in pairs
    ]
    return "".join(line + "\n" for line in lines)


def _parse_frame(raw: dict, where: str) -> FrameRecord:
    try:
        points = tuple(
            PointObs(
                xyz=tuple(float(v) for v in p["xyz"]),
                category=p.get("category"),
                track_id=p.get("track_id"),
            )
            for p in raw.get("points", [])
        )
        ego = None
        if "ego" in raw and raw["ego"] is not None:
            e = raw["ego"]
            future = e.get("future_xy")
            ego = EgoState(
                speed=e.get("speed"),
                command=e.get("command"),
                future_xy=tuple(tuple(map(float, xy)) for xy in future)
                if future
                else None,
            )
        signs = raw.get("traffic_signs")
        return FrameRecord(
            image=raw["image"],
            t=float(raw["t"]),
            calib_id=raw.get("calib_id"),
            points=points,
            narration=raw.get("narration"),
            traffic_signs=tuple(signs) if signs is not None else None,
            decision=raw.get("decision"),
            ego=ego,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{where}: bad frame record: {exc}") from exc


def load_scene_file(path) -> Scene:
    path = Path(path)
    frames = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON at column {exc.colno}") from exc
        frames.append(_parse_frame(raw, f"{path}:{lineno}"))
    return Scene(id=path.stem, frames=tuple(frames))


def load_scenes_dir(path) -> tuple[list[Scene], dict[str, CameraCalib]]:
    """A scenes directory: one <scene_id>.jsonl per scene plus an optional
    calibs.json holding a list of calibration records."""
    path = Path(path)
    scenes = [load_scene_file(p) for p in sorted(path.glob("*.jsonl"))]
    calibs: dict[str, CameraCalib] = {}
    calib_file = path / "calibs.json"
    if calib_file.exists():
        for raw in json.loads(calib_file.read_text(encoding="utf-8")):
            calib = CameraCalib(
                intrinsics=np.array(raw["intrinsics"], dtype=np.float64).reshape(3, 3),
                extrinsics=np.array(raw["extrinsics"], dtype=np.float64).reshape(4, 4),
                camera_id=raw["camera_id"],
            )
            calibs[calib.camera_id] = calib
    return scenes, calibs

"""Shared fixtures: a desk-scale synthetic scene set covering every task."""

import numpy as np
import pytest

from scenebench import assets
from scenebench.qaforge import (
    EgoState,
    FrameRecord,
    GenerationConfig,
    PointObs,
    Scene,
    TemplateBank,
)
from scenebench.spatial import (
    CameraCalib,
    GridSpec,
    build_space_vocab,
    load_frequency_file,
)

# camera looks along ego +x: cam_x = -ego_y, cam_y = -ego_z, cam_z = ego_x
FRONT_EXTRINSICS = np.array(
    [
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)


@pytest.fixture(scope="session")
def front_calib():
    k = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])
    return CameraCalib(intrinsics=k, extrinsics=FRONT_EXTRINSICS, camera_id="cam_front")


@pytest.fixture(scope="session")
def grid():
    return GridSpec()


@pytest.fixture(scope="session")
def vocab(grid):
    return build_space_vocab(
        load_frequency_file(assets.default_vocab_path()), grid
    )


@pytest.fixture(scope="session")
def template_bank():
    return TemplateBank.load(assets.default_templates_path())


DECISIONS = [
    "hold the current lane and keep a steady speed",
    "ease off the accelerator and follow the lead vehicle",
    "keep straight while watching the crossing on the right",
    "maintain the lane and prepare for a gentle stop",
]


def build_drive_scene(scene_id: str, n_frames: int = 21, offset: float = 0.0) -> Scene:
    """0.5 s-spaced driving frames with tracked objects, signs, narrations,
    decisions, and ego state. One car moves +1 m in x per frame; one
    pedestrian holds still; a cone sits near the roadside. Every frame
    posts a distinct sign phrase so sign-inquiry answers stay non-empty."""
    frames = []
    for k in range(n_frames):
        t = 0.5 * k
        points = [
            PointObs(xyz=(8.0 + 1.0 * k + offset, 2.0, 0.5), category="car", track_id="veh_1"),
            PointObs(xyz=(12.0, -4.0 + offset, 0.2), category="pedestrian", track_id="ped_1"),
            PointObs(xyz=(15.0, 6.0, 0.0), category="traffic cone"),
        ]
        signs = [f"route marker {k} posted along {scene_id}"]
        frames.append(
            FrameRecord(
                image=f"{scene_id}/frame_{k:03d}.jpg",
                t=t,
                calib_id="cam_front",
                points=tuple(points),
                narration=f"frame {k} of {scene_id} shows traffic flowing normally",
                traffic_signs=tuple(signs),
                decision=f"{DECISIONS[k % len(DECISIONS)]} near mark {k}",
                ego=EgoState(
                    speed=2.0,
                    command="keep_forward",
                    future_xy=tuple((1.0 * (i + 1), 0.0) for i in range(8)),
                ),
            )
        )
    return Scene(id=scene_id, frames=tuple(frames))


def build_ego_scene(scene_id: str = "ego0", n_frames: int = 31, dt: float = 3.0) -> Scene:
    """Ego4D-style long scene: 3 s-spaced narrated frames, no points."""
    acts = [
        "opens the fridge",
        "pours a glass of water",
        "chops vegetables on the board",
        "stirs the pot on the stove",
        "wipes the counter clean",
        "places dishes in the sink",
        "reads the recipe card",
        "sets the table for dinner",
    ]
    frames = []
    for k in range(n_frames):
        frames.append(
            FrameRecord(
                image=f"{scene_id}/clip_{k:03d}.jpg",
                t=dt * k,
                narration=f"the person {acts[k % len(acts)]} at step {k}",
            )
        )
    return Scene(id=scene_id, frames=tuple(frames))


@pytest.fixture(scope="session")
def drive_scene():
    return build_drive_scene("drive0")


@pytest.fixture(scope="session")
def ego_scene():
    return build_ego_scene()


@pytest.fixture(scope="session")
def gen_config(grid, vocab, template_bank, front_calib):
    return GenerationConfig(
        grid=grid,
        vocab=vocab,
        templates=template_bank,
        calibs={"cam_front": front_calib},
        seed=2024,
    )

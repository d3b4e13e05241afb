#!/usr/bin/env python3
"""Write the synthetic desk-scale scene fixtures to a directory.

Produces two driving scenes (0.5 s frames, tracked objects, signs, ego
state) plus one long narrated scene, and the camera calibration file the
generators need. The same builders back the test suite.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

import numpy as np

from conftest import FRONT_EXTRINSICS, build_drive_scene, build_ego_scene


def frame_to_json(frame) -> dict:
    rec = {"image": frame.image, "t": frame.t}
    if frame.calib_id:
        rec["calib_id"] = frame.calib_id
    if frame.points:
        rec["points"] = [
            {
                "xyz": list(p.xyz),
                **({"category": p.category} if p.category else {}),
                **({"track_id": p.track_id} if p.track_id else {}),
            }
            for p in frame.points
        ]
    if frame.narration:
        rec["narration"] = frame.narration
    if frame.traffic_signs is not None:
        rec["traffic_signs"] = list(frame.traffic_signs)
    if frame.decision:
        rec["decision"] = frame.decision
    if frame.ego:
        rec["ego"] = {
            "speed": frame.ego.speed,
            "command": frame.ego.command,
            "future_xy": [list(xy) for xy in frame.ego.future_xy]
            if frame.ego.future_xy
            else None,
        }
    return rec


def write_scene(scene, out_dir: Path) -> None:
    path = out_dir / f"{scene.id}.jsonl"
    lines = [json.dumps(frame_to_json(f), sort_keys=True) for f in scene.frames]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path} ({len(scene.frames)} frames)")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="fixtures/scenes", help="output directory")
    args = parser.parse_args()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    write_scene(build_drive_scene("drive0"), out_dir)
    write_scene(build_drive_scene("drive1", offset=3.0), out_dir)
    write_scene(build_ego_scene("ego0"), out_dir)

    intrinsics = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])
    calibs = [
        {
            "camera_id": "cam_front",
            "intrinsics": intrinsics.reshape(-1).tolist(),
            "extrinsics": np.asarray(FRONT_EXTRINSICS).reshape(-1).tolist(),
        }
    ]
    calib_path = out_dir / "calibs.json"
    calib_path.write_text(json.dumps(calibs, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {calib_path}")


if __name__ == "__main__":
    main()

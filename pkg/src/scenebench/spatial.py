"""Space-aware codec: metric grid quantization, the remapped low-frequency
token vocabulary that serializes grid cells as text, and pinhole 2D<->3D
geometry for location labeling.

Grid convention: axis extents are half-open intervals [min, max); a point
quantizes to floor((coord - min) / resolution) per axis and dequantizes to
the cell center, so the round trip lands within resolution/2 per axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "OutOfExtentError",
    "BehindCameraError",
    "UnknownTokenError",
    "GridSpec",
    "GridIndex",
    "SpaceVocab",
    "CameraCalib",
    "quantize",
    "dequantize",
    "build_space_vocab",
    "grid_to_tokens",
    "tokens_to_grid",
    "project",
    "unproject",
    "load_calib",
    "load_frequency_file",
]

DEFAULT_EXTENT_MIN = (-50.0, -50.0, -5.0)
DEFAULT_EXTENT_MAX = (50.0, 50.0, 5.0)


class OutOfExtentError(ValueError):
    """Point or index falls outside the grid extent."""


class BehindCameraError(ValueError):
    """Point has non-positive depth after the extrinsic transform."""


class UnknownTokenError(ValueError):
    """Token is not part of the space vocabulary."""


@dataclass(frozen=True)
class GridSpec:
    resolution: float = 1.0
    extent_min: tuple[float, float, float] = DEFAULT_EXTENT_MIN
    extent_max: tuple[float, float, float] = DEFAULT_EXTENT_MAX

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        for lo, hi in zip(self.extent_min, self.extent_max):
            if not lo < hi:
                raise ValueError("extent_min must be < extent_max per axis")

    def cells(self, axis: int) -> int:
        lo = self.extent_min[axis]
        hi = self.extent_max[axis]
        return int(np.ceil((hi - lo) / self.resolution - 1e-12))

    @property
    def cell_counts(self) -> tuple[int, int, int]:
        return (self.cells(0), self.cells(1), self.cells(2))


@dataclass(frozen=True, order=True)
class GridIndex:
    ix: int
    iy: int
    iz: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.ix, self.iy, self.iz)


def quantize(point, spec: GridSpec) -> GridIndex:
    """Map an in-extent xyz point (meters) to its grid cell."""
    idx = []
    for axis, coord in enumerate(point):
        lo = spec.extent_min[axis]
        hi = spec.extent_max[axis]
        if not (lo <= coord < hi):
            raise OutOfExtentError(
                f"coordinate {coord} outside [{lo}, {hi}) on axis {axis}"
            )
        idx.append(int(np.floor((coord - lo) / spec.resolution)))
    return GridIndex(*idx)


def dequantize(idx: GridIndex, spec: GridSpec) -> tuple[float, float, float]:
    """Return the center of a grid cell in meters."""
    out = []
    for axis, i in enumerate(idx.as_tuple()):
        if not (0 <= i < spec.cells(axis)):
            raise OutOfExtentError(f"index {i} out of range on axis {axis}")
        out.append(spec.extent_min[axis] + (i + 0.5) * spec.resolution)
    return tuple(out)


@dataclass(frozen=True)
class SpaceVocab:
    """Bijective per-axis maps from cell index to a repurposed text token.

    Tokens come from the low-frequency tail of a base vocabulary; x cells
    are assigned first, then y, then z, ascending index within each axis.
    """

    axis_tokens: tuple[dict[int, str], dict[int, str], dict[int, str]]
    reverse: dict[str, tuple[int, int]] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        rev: dict[str, tuple[int, int]] = {}
        for axis, table in enumerate(self.axis_tokens):
            for i, tok in table.items():
                if tok in rev:
                    raise ValueError(f"token {tok!r} reused across assignments")
                rev[tok] = (axis, i)
        object.__setattr__(self, "reverse", rev)

    def token(self, axis: int, index: int) -> str:
        try:
            return self.axis_tokens[axis][index]
        except KeyError:
            raise OutOfExtentError(f"index {index} unassigned on axis {axis}") from None

    def lookup(self, token: str) -> tuple[int, int]:
        try:
            return self.reverse[token]
        except KeyError:
            raise UnknownTokenError(f"not a space token: {token!r}") from None

    @property
    def assigned_tokens(self) -> set[str]:
        return set(self.reverse)


def build_space_vocab(base_vocab: list[tuple[str, int]], spec: GridSpec) -> SpaceVocab:
    """Assign the lowest-frequency base-vocabulary tokens to grid cells.

    Sort is ascending by (frequency, token) so frequency ties break
    lexicographically; assignment order is x cells, then y, then z,
    ascending cell index within each axis.
    """
    counts = spec.cell_counts
    needed = sum(counts)
    seen = set()
    for tok, _ in base_vocab:
        if tok in seen:
            raise ValueError(f"duplicate token in base vocabulary: {tok!r}")
        seen.add(tok)
    if len(base_vocab) < needed:
        raise ValueError(
            f"base vocabulary has {len(base_vocab)} tokens; grid needs {needed}"
        )
    pool = sorted(base_vocab, key=lambda tf: (tf[1], tf[0]))
    tail = [tok for tok, _ in pool[:needed]]
    tables: list[dict[int, str]] = []
    cursor = 0
    for axis in range(3):
        n = counts[axis]
        tables.append({i: tail[cursor + i] for i in range(n)})
        cursor += n
    return SpaceVocab(axis_tokens=tuple(tables))


def grid_to_tokens(idx: GridIndex, vocab: SpaceVocab) -> tuple[str, str, str]:
    """Serialize a cell as its (x-token, y-token, z-token) triple."""
    return (
        vocab.token(0, idx.ix),
        vocab.token(1, idx.iy),
        vocab.token(2, idx.iz),
    )


def tokens_to_grid(tokens, vocab: SpaceVocab) -> GridIndex:
    """Exact inverse of :func:`grid_to_tokens`."""
    tokens = tuple(tokens)
    if len(tokens) != 3:
        raise ValueError(f"expected 3 space tokens, got {len(tokens)}")
    out = [None, None, None]
    for pos, tok in enumerate(tokens):
        axis, i = vocab.lookup(tok)
        if axis != pos:
            raise ValueError(
                f"token {tok!r} belongs to axis {axis}, found in position {pos}"
            )
        out[axis] = i
    return GridIndex(*out)


@dataclass(frozen=True)
class CameraCalib:
    """Pinhole intrinsics (pixels) and rigid extrinsics mapping ego -> camera."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    camera_id: str = "cam_front"

    def __post_init__(self):
        k = np.array(self.intrinsics, dtype=np.float64)
        e = np.array(self.extrinsics, dtype=np.float64)
        if k.shape != (3, 3):
            raise ValueError("intrinsics must be 3x3")
        if e.shape != (4, 4):
            raise ValueError("extrinsics must be 4x4")
        if abs(k[1, 0]) > 0 or abs(k[2, 0]) > 0 or abs(k[2, 1]) > 0:
            raise ValueError("intrinsics must be upper triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        r = e[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("extrinsic rotation block must be orthonormal")
        if not np.allclose(e[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("extrinsics last row must be [0,0,0,1]")
        k.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsics", e)

    @classmethod
    def identity(cls, fx=1.0, fy=1.0, cx=0.0, cy=0.0, camera_id="cam_front"):
        k = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
        return cls(intrinsics=k, extrinsics=np.eye(4), camera_id=camera_id)


def project(point, calib: CameraCalib) -> tuple[float, float, float]:
    """Project an ego-frame point to pixel (u, v) plus its camera depth."""
    p = np.array([*point, 1.0], dtype=np.float64)
    pc = calib.extrinsics @ p
    depth = pc[2]
    if depth <= 0:
        raise BehindCameraError(f"camera-frame depth {depth} <= 0")
    uvw = calib.intrinsics @ pc[:3]
    return (uvw[0] / depth, uvw[1] / depth, depth)


def unproject(pixel, depth: float, calib: CameraCalib) -> tuple[float, float, float]:
    """Invert :func:`project` for the same calibration."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    uv1 = np.array([pixel[0], pixel[1], 1.0], dtype=np.float64)
    pc = depth * np.linalg.solve(calib.intrinsics, uv1)
    r = calib.extrinsics[:3, :3]
    t = calib.extrinsics[:3, 3]
    pe = r.T @ (pc - t)
    return (pe[0], pe[1], pe[2])


def load_calib(path) -> CameraCalib:
    """Read a calibration JSON: 9 row-major intrinsics, 16 row-major extrinsics, camera_id."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    k = np.array(raw["intrinsics"], dtype=np.float64).reshape(3, 3)
    e = np.array(raw["extrinsics"], dtype=np.float64).reshape(4, 4)
    return CameraCalib(intrinsics=k, extrinsics=e, camera_id=raw.get("camera_id", "cam_front"))


def load_frequency_file(path) -> list[tuple[str, int]]:
    """Read a base-vocabulary frequency file: one ``token<TAB>count`` per line, UTF-8."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected token<TAB>count")
        out.append((parts[0], int(parts[1])))
    return out

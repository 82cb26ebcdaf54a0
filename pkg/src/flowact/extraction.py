"""Moving-object detection over precomputed point tracks.

Turns tracker output (point tracks + per-frame depth maps + a gripper
mask) into a flow sequence for the manipulated object: seed, detect
significant movers, box them, erode, and look up depths.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .flowdata import FlowSequence, ParseError, SchemaError
from .geometry import CameraIntrinsics


class ExtractionError(ValueError):
    pass


class EmptyResult(ExtractionError):
    """The exclusion mask swallowed every seed point."""


class EmptyInput(ExtractionError):
    pass


class NoMovingObject(ExtractionError):
    """No track shows significant movement (or too few to form a flow)."""


class DegenerateBackground(ExtractionError):
    """Background points too few or collinear to fit camera motion."""


class BBox(NamedTuple):
    u_min: int
    v_min: int
    u_max: int
    v_max: int

    def area(self) -> int:
        return (self.u_max - self.u_min + 1) * (self.v_max - self.v_min + 1)

    def iou(self, other: "BBox") -> float:
        iu = min(self.u_max, other.u_max) - max(self.u_min, other.u_min) + 1
        iv = min(self.v_max, other.v_max) - max(self.v_min, other.v_min) + 1
        if iu <= 0 or iv <= 0:
            return 0.0
        inter = iu * iv
        return inter / (self.area() + other.area() - inter)


@dataclass(frozen=True, eq=False)
class TrackSet:
    """M point tracks over T frames: uv is (M, T, 2) px, visible is (M, T)."""

    uv: np.ndarray
    visible: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=np.float64)
        vis = np.asarray(self.visible, dtype=np.uint8)
        if uv.ndim != 3 or uv.shape[2] != 2 or vis.shape != uv.shape[:2]:
            raise ExtractionError(f"tracks must be (M, T, 2) px, got {uv.shape}")
        if uv.shape[1] < 2:
            raise ExtractionError("need at least 2 frames")
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "visible", vis)

    @property
    def num_points(self) -> int:
        return self.uv.shape[0]

    @property
    def num_frames(self) -> int:
        return self.uv.shape[1]


@dataclass
class ExtractionConfig:
    stride: int = 8
    threshold_frac: float = 0.05
    margin_px: int = 2
    erosion_radius: int = 2
    remove_camera_motion: bool = False
    instruction: str = ""


def seed_grid_points(width: int, height: int, stride: int,
                     exclude: np.ndarray | None = None) -> np.ndarray:
    """Regular (u, v) grid, row-major, minus pixels of the exclusion mask."""
    if stride < 1:
        raise ExtractionError(f"stride must be >= 1, got {stride}")
    us, vs = np.meshgrid(np.arange(0, width, stride),
                         np.arange(0, height, stride))
    pts = np.stack([us.ravel(), vs.ravel()], axis=1)
    if exclude is not None:
        keep = ~exclude[pts[:, 1], pts[:, 0]]
        pts = pts[keep]
    if len(pts) == 0:
        raise EmptyResult("exclusion mask covers every grid point")
    return pts


def detect_moving_points(tracks: TrackSet, threshold_frac: float) -> list[int]:
    """Indices whose peak displacement from their first visible position
    exceeds threshold_frac of the image diagonal, visible frames only."""
    if not 0.0 < threshold_frac < 1.0:
        raise ExtractionError("threshold_frac must be in (0, 1)")
    threshold = threshold_frac * float(np.hypot(tracks.width, tracks.height))
    moving = []
    vis = tracks.visible.astype(bool)
    for m in range(tracks.num_points):
        ts = np.flatnonzero(vis[m])
        if len(ts) < 2:
            continue
        disp = np.linalg.norm(tracks.uv[m, ts] - tracks.uv[m, ts[0]], axis=1)
        if disp.max() > threshold:
            moving.append(m)
    return moving


def max_bounding_box(points, margin: int, width: int, height: int) -> BBox:
    """Axis-aligned extent of the points, grown by margin, clipped to image."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyInput("no points to bound")
    u_min = max(int(np.floor(pts[:, 0].min())) - margin, 0)
    v_min = max(int(np.floor(pts[:, 1].min())) - margin, 0)
    u_max = min(int(np.ceil(pts[:, 0].max())) + margin, width - 1)
    v_max = min(int(np.ceil(pts[:, 1].max())) + margin, height - 1)
    return BBox(u_min, v_min, u_max, v_max)


def erode_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological erosion with a (2r+1)-square structuring element."""
    if radius < 0:
        raise ExtractionError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    size = 2 * radius + 1
    return ndimage.binary_erosion(mask, structure=np.ones((size, size), dtype=bool))


def _fit_similarity(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares 2D similarity (a, b, tx, ty): dst ~ [[a,-b],[b,a]] src + t."""
    n = len(src)
    design = np.zeros((2 * n, 4))
    design[0::2, 0] = src[:, 0]
    design[0::2, 1] = -src[:, 1]
    design[0::2, 2] = 1.0
    design[1::2, 0] = src[:, 1]
    design[1::2, 1] = src[:, 0]
    design[1::2, 3] = 1.0
    rhs = dst.reshape(-1)
    params, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    return params


def _apply_similarity_inverse(params: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a, b, tx, ty = params
    mat = np.array([[a, -b], [b, a]])
    return (pts - np.array([tx, ty])) @ np.linalg.inv(mat).T


def remove_camera_motion(tracks: TrackSet, background: list[int]) -> TrackSet:
    """Undo per-frame 2D similarity camera motion fitted to background points.

    The model maps frame-0 background positions onto each frame; its inverse
    is applied to every track, making the background static up to residual.
    """
    if len(background) < 3:
        raise DegenerateBackground(f"need >= 3 background points, have {len(background)}")
    bg = np.asarray(background, dtype=np.int64)
    vis = tracks.visible.astype(bool)
    uv = tracks.uv.copy()
    for t in range(tracks.num_frames):
        usable = bg[vis[bg, 0] & vis[bg, t]]
        if len(usable) < 3:
            raise DegenerateBackground(f"fewer than 3 background points visible at frame {t}")
        src = tracks.uv[usable, 0]
        dst = tracks.uv[usable, t]
        centered = src - src.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        if s[1] <= max(s[0], 1.0) * 1e-9:
            raise DegenerateBackground(f"background points collinear at frame {t}")
        params = _fit_similarity(src, dst)
        uv[:, t] = _apply_similarity_inverse(params, tracks.uv[:, t])
    return TrackSet(uv, tracks.visible, tracks.width, tracks.height)


def extract_episode(tracks: TrackSet, depth: np.ndarray, gripper: np.ndarray,
                    intrinsics: CameraIntrinsics,
                    config: ExtractionConfig | None = None,
                    background: list[int] | None = None,
                    ) -> tuple[FlowSequence, BBox]:
    """Full pipeline: gripper exclusion, movement detection, bounding box,
    erosion, and per-sample depth lookup.

    depth is the (T, H, W) stack in meters, non-positive entries invalid.
    When camera-motion removal is enabled, `background` names the static
    points; if omitted they are inferred as the non-moving complement.
    """
    config = config or ExtractionConfig()
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (tracks.num_frames, tracks.height, tracks.width):
        raise ExtractionError(f"depth stack shape {depth.shape} does not match episode")
    gripper = np.asarray(gripper, dtype=bool)
    if gripper.shape != (tracks.height, tracks.width):
        raise ExtractionError("gripper mask shape does not match episode")

    vis0 = tracks.visible[:, 0].astype(bool)
    u0 = np.clip(np.rint(tracks.uv[:, 0, 0]).astype(np.int64), 0, tracks.width - 1)
    v0 = np.clip(np.rint(tracks.uv[:, 0, 1]).astype(np.int64), 0, tracks.height - 1)
    outside_gripper = vis0 & ~gripper[v0, u0]

    work = tracks
    if config.remove_camera_motion:
        if background is None:
            provisional = set(detect_moving_points(tracks, config.threshold_frac))
            background = [m for m in range(tracks.num_points)
                          if m not in provisional and outside_gripper[m]]
        work = remove_camera_motion(tracks, background)

    moving = [m for m in detect_moving_points(work, config.threshold_frac)
              if outside_gripper[m]]
    if not moving:
        raise NoMovingObject("no track exceeds the movement threshold")

    bbox = max_bounding_box(work.uv[moving, 0], config.margin_px,
                            tracks.width, tracks.height)
    box_mask = np.zeros((tracks.height, tracks.width), dtype=bool)
    box_mask[bbox.v_min:bbox.v_max + 1, bbox.u_min:bbox.u_max + 1] = True
    box_mask = erode_mask(box_mask, config.erosion_radius)

    selected = [m for m in moving if box_mask[v0[m], u0[m]]]
    if len(selected) < 3:
        raise NoMovingObject(f"only {len(selected)} moving points inside the eroded box")

    t_count = tracks.num_frames
    n_count = len(selected)
    uv = work.uv[selected].transpose(1, 0, 2).copy()
    vis = work.visible[selected].transpose(1, 0).astype(bool)
    depth_out = np.zeros((t_count, n_count))
    for t in range(t_count):
        pu = np.rint(uv[t, :, 0]).astype(np.int64)
        pv = np.rint(uv[t, :, 1]).astype(np.int64)
        inside = (pu >= 0) & (pu < tracks.width) & (pv >= 0) & (pv < tracks.height)
        pu, pv = np.clip(pu, 0, tracks.width - 1), np.clip(pv, 0, tracks.height - 1)
        d = depth[t, pv, pu]
        good = inside & (d > 0)
        depth_out[t] = np.where(good, d, 0.0)
        vis[t] &= good
    flow = FlowSequence(uv=uv, depth=depth_out,
                        visibility=vis.astype(np.uint8), intrinsics=intrinsics,
                        instruction=config.instruction)
    return flow.validate(), bbox


# ---------------------------------------------------------------------------
# File formats: tracks (JSON), depth maps (DMAP v1), masks (PBM P4)

def write_tracks(tracks: TrackSet, path) -> None:
    doc = {
        "num_points": tracks.num_points,
        "num_frames": tracks.num_frames,
        "width": tracks.width,
        "height": tracks.height,
        "tracks": [
            [[round(float(tracks.uv[m, t, 0]), 4), round(float(tracks.uv[m, t, 1]), 4),
              int(tracks.visible[m, t])] for t in range(tracks.num_frames)]
            for m in range(tracks.num_points)
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def read_tracks(path) -> TrackSet:
    with open(path) as f:
        doc = json.load(f)
    arr = np.asarray(doc["tracks"], dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ExtractionError("track file must hold M x T x (u, v, visible)")
    if arr.shape[0] != doc["num_points"] or arr.shape[1] != doc["num_frames"]:
        raise ExtractionError("track file counts disagree with payload")
    return TrackSet(uv=arr[:, :, :2], visible=arr[:, :, 2].astype(np.uint8),
                    width=int(doc["width"]), height=int(doc["height"]))


DMAP_MAGIC = b"DMAP"
_DMAP_HEADER = struct.Struct("<4sIII")


def write_depth_map(depth: np.ndarray, path) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ExtractionError("depth map must be 2-D")
    with open(path, "wb") as f:
        f.write(_DMAP_HEADER.pack(DMAP_MAGIC, 1, depth.shape[1], depth.shape[0]))
        f.write(depth.astype("<f4").tobytes())


def read_depth_map(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _DMAP_HEADER.size:
        raise ParseError("truncated DMAP header", len(data))
    magic, version, width, height = _DMAP_HEADER.unpack_from(data)
    if magic != DMAP_MAGIC:
        raise SchemaError(f"bad magic {magic!r}", "magic")
    if version != 1:
        raise SchemaError(f"unsupported version {version}", "version")
    expected = _DMAP_HEADER.size + width * height * 4
    if len(data) != expected:
        raise ParseError(f"payload is {len(data)} bytes, expected {expected}",
                         min(len(data), expected))
    payload = np.frombuffer(data, dtype="<f4", offset=_DMAP_HEADER.size)
    return payload.reshape(height, width).astype(np.float64)


def write_mask(mask: np.ndarray, path) -> None:
    """Binary PBM (P4); 1 bits are masked pixels."""
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    packed = np.packbits(mask, axis=1)
    with open(path, "wb") as f:
        f.write(f"P4\n{width} {height}\n".encode("ascii"))
        f.write(packed.tobytes())


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P4"):
        raise SchemaError("not a binary PBM file", "magic")
    parts = data.split(b"\n", 2)
    if len(parts) < 3:
        raise ParseError("truncated PBM header", len(data))
    try:
        width, height = (int(x) for x in parts[1].split())
    except ValueError as e:
        raise ParseError(f"bad PBM dimensions: {parts[1]!r}", len(parts[0]) + 1) from e
    row_bytes = (width + 7) // 8
    body = parts[2]
    if len(body) < row_bytes * height:
        raise ParseError("truncated PBM payload", len(data) - len(body))
    rows = np.frombuffer(body[:row_bytes * height], dtype=np.uint8)
    bits = np.unpackbits(rows.reshape(height, row_bytes), axis=1)[:, :width]
    return bits.astype(bool)

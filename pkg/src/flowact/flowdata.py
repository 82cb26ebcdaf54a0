"""Tracked 3D optical flow sequences and the MFLW binary file format.

A flow sequence stores T timesteps of N tracked points as
(u, v, depth, visibility) samples against fixed camera intrinsics; the
metric-space lift turns each visible sample into a camera-frame 3D point.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, Pose, PointSet, unproject_points


class FlowError(ValueError):
    pass


class CorruptFlow(FlowError):
    """A visible sample violates the flow invariants; carries (t, n)."""

    def __init__(self, message: str, t: int, n: int):
        super().__init__(f"{message} at timestep {t}, point {n}")
        self.t = t
        self.n = n


class ParseError(FlowError):
    """Malformed binary payload; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(FlowError):
    """Structurally valid file with an unsupported field value."""

    def __init__(self, message: str, fieldname: str):
        super().__init__(f"{message} (field '{fieldname}')")
        self.fieldname = fieldname


class IndexOutOfRange(FlowError):
    pass


MAGIC = b"MFLW"
VERSION = 1


@dataclass(frozen=True, eq=False)
class FlowSequence:
    """T x N point tracks of (u, v, depth, visibility) samples.

    uv: (T, N, 2) pixel coordinates; depth: (T, N) meters;
    visibility: (T, N) in {0, 1}. Invariants hold only for visible samples.
    """

    uv: np.ndarray
    depth: np.ndarray
    visibility: np.ndarray
    intrinsics: CameraIntrinsics
    instruction: str = ""

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        vis = np.asarray(self.visibility, dtype=np.uint8)
        if uv.ndim != 3 or uv.shape[2] != 2:
            raise FlowError(f"uv must be (T, N, 2), got {uv.shape}")
        if depth.shape != uv.shape[:2] or vis.shape != uv.shape[:2]:
            raise FlowError("uv/depth/visibility shapes disagree")
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "visibility", vis)

    @property
    def num_timesteps(self) -> int:
        return self.uv.shape[0]

    @property
    def num_points(self) -> int:
        return self.uv.shape[1]

    def validate(self) -> "FlowSequence":
        """Check the full invariant set; returns self for chaining."""
        if self.num_timesteps < 2:
            raise FlowError(f"need T >= 2, got {self.num_timesteps}")
        if self.num_points < 3:
            raise FlowError(f"need N >= 3, got {self.num_points}")
        vis = self.visibility.astype(bool)
        if np.any(self.depth[vis] <= 0):
            t, n = np.argwhere(vis & (self.depth <= 0))[0]
            raise CorruptFlow("non-positive depth on visible sample", int(t), int(n))
        k = self.intrinsics
        u, v = self.uv[..., 0], self.uv[..., 1]
        bad = vis & ~((u >= 0) & (u < k.width) & (v >= 0) & (v < k.height))
        if np.any(bad):
            t, n = np.argwhere(bad)[0]
            raise CorruptFlow("visible sample outside image bounds", int(t), int(n))
        return self


@dataclass(frozen=True, eq=False)
class Flow3D:
    """Camera-frame 3D tracks: (T, N, 3) points plus visibility mask."""

    points: np.ndarray
    visibility: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        vis = np.asarray(self.visibility, dtype=np.uint8)
        if pts.ndim != 3 or pts.shape[2] != 3 or vis.shape != pts.shape[:2]:
            raise FlowError("points must be (T, N, 3) with matching visibility")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visibility", vis)

    @property
    def num_timesteps(self) -> int:
        return self.points.shape[0]

    @property
    def num_points(self) -> int:
        return self.points.shape[1]

    def transformed(self, pose: Pose) -> "Flow3D":
        """Same tracks expressed through a rigid transform (e.g. into world)."""
        shape = self.points.shape
        moved = pose.apply(self.points.reshape(-1, 3)).reshape(shape)
        return Flow3D(moved, self.visibility, self.intrinsics)


def lift_to_3d(flow: FlowSequence) -> Flow3D:
    """Unproject every visible sample; invisible samples carry the last
    visible 3D position forward (backfilled at the start of a track)."""
    flow.validate()
    t_count, n_count = flow.num_timesteps, flow.num_points
    vis = flow.visibility.astype(bool)
    if np.any(vis & (flow.depth <= 0)):
        t, n = np.argwhere(vis & (flow.depth <= 0))[0]
        raise CorruptFlow("non-positive depth", int(t), int(n))
    pts = np.zeros((t_count, n_count, 3))
    pts[vis] = unproject_points(flow.intrinsics, flow.uv[vis], flow.depth[vis])
    for n in range(n_count):
        vis_ts = np.flatnonzero(vis[:, n])
        if len(vis_ts) == 0:
            continue  # never-seen track stays at the origin, visibility all 0
        pts[: vis_ts[0], n] = pts[vis_ts[0], n]
        last = vis_ts[0]
        for t in range(vis_ts[0] + 1, t_count):
            if vis[t, n]:
                last = t
            else:
                pts[t, n] = pts[last, n]
    return Flow3D(pts, flow.visibility, flow.intrinsics)


def frame_points(flow3d: Flow3D, t: int) -> PointSet:
    """Points of frame t with weight 1 where visible, 0 where not."""
    if not 0 <= t < flow3d.num_timesteps:
        raise IndexOutOfRange(f"t={t} outside [0, {flow3d.num_timesteps})")
    return PointSet(flow3d.points[t], flow3d.visibility[t].astype(np.float64))


def inject_noise(flow: FlowSequence, sigma_px: float, sigma_depth: float,
                 seed: int) -> FlowSequence:
    """Seeded Gaussian perturbation of every visible sample.

    Pixel coordinates are clamped into the image and depths to >= 1e-4 m so
    the output still satisfies the flow invariants. sigma = 0 is the identity.
    """
    if sigma_px < 0 or sigma_depth < 0:
        raise FlowError("noise sigmas must be >= 0")
    if sigma_px == 0 and sigma_depth == 0:
        return flow
    rng = np.random.default_rng(seed)
    vis = flow.visibility.astype(bool)
    uv = flow.uv.copy()
    depth = flow.depth.copy()
    if sigma_px:
        uv[vis] += rng.normal(0.0, sigma_px, size=(int(vis.sum()), 2))
    if sigma_depth:
        depth[vis] += rng.normal(0.0, sigma_depth, size=int(vis.sum()))
    k = flow.intrinsics
    uv[..., 0] = np.clip(uv[..., 0], 0.0, k.width - 1e-6)
    uv[..., 1] = np.clip(uv[..., 1], 0.0, k.height - 1e-6)
    depth = np.maximum(depth, 1e-4)
    return replace(flow, uv=uv, depth=depth)


# ---------------------------------------------------------------------------
# MFLW v1 binary format (little-endian):
#   magic "MFLW", u32 version=1, u32 T, u32 N,
#   f64 fx fy cx cy, u32 width, u32 height,
#   u32 instruction byte length + UTF-8 bytes,
#   T*N records of (f32 u, f32 v, f32 depth, u8 visibility), timestep-major.

_HEADER = struct.Struct("<4sIII")
_CAMERA = struct.Struct("<ddddII")
_RECORD_DTYPE = np.dtype([("u", "<f4"), ("v", "<f4"),
                          ("depth", "<f4"), ("vis", "u1")])


def write_flow(flow: FlowSequence, path) -> None:
    instr = flow.instruction.encode("utf-8")
    records = np.empty(flow.num_timesteps * flow.num_points, dtype=_RECORD_DTYPE)
    records["u"] = flow.uv[..., 0].reshape(-1)
    records["v"] = flow.uv[..., 1].reshape(-1)
    records["depth"] = flow.depth.reshape(-1)
    records["vis"] = flow.visibility.reshape(-1)
    k = flow.intrinsics
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, flow.num_timesteps, flow.num_points))
        f.write(_CAMERA.pack(k.fx, k.fy, k.cx, k.cy, k.width, k.height))
        f.write(struct.pack("<I", len(instr)))
        f.write(instr)
        f.write(records.tobytes())


def read_flow(path) -> FlowSequence:
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise ParseError(f"truncated while reading {what}", off)
        chunk = data[off:off + n]
        off += n
        return chunk

    magic, version, t_count, n_count = _HEADER.unpack(take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise SchemaError(f"bad magic {magic!r}", "magic")
    if version != VERSION:
        raise SchemaError(f"unsupported version {version}", "version")
    fx, fy, cx, cy, width, height = _CAMERA.unpack(take(_CAMERA.size, "camera"))
    (instr_len,) = struct.unpack("<I", take(4, "instruction length"))
    instr = take(instr_len, "instruction").decode("utf-8")
    payload = take(t_count * n_count * _RECORD_DTYPE.itemsize, "samples")
    if off != len(data):
        raise ParseError("trailing bytes after payload", off)
    try:
        intrinsics = CameraIntrinsics(fx, fy, cx, cy, width, height)
    except ValueError as e:
        raise SchemaError(str(e), "intrinsics") from e
    records = np.frombuffer(payload, dtype=_RECORD_DTYPE)
    uv = np.stack([records["u"], records["v"]], axis=-1).astype(np.float64)
    return FlowSequence(
        uv=uv.reshape(t_count, n_count, 2),
        depth=records["depth"].astype(np.float64).reshape(t_count, n_count),
        visibility=records["vis"].reshape(t_count, n_count).copy(),
        intrinsics=intrinsics,
        instruction=instr,
    )


def flow_to_dict(flow: FlowSequence) -> dict:
    """Lossy human-readable mirror of the binary fields, for debugging."""
    k = flow.intrinsics
    return {
        "format": "MFLW-debug",
        "version": VERSION,
        "num_timesteps": flow.num_timesteps,
        "num_points": flow.num_points,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                       "width": k.width, "height": k.height},
        "instruction": flow.instruction,
        "samples": [
            [[round(float(flow.uv[t, n, 0]), 3), round(float(flow.uv[t, n, 1]), 3),
              round(float(flow.depth[t, n]), 4), int(flow.visibility[t, n])]
             for n in range(flow.num_points)]
            for t in range(flow.num_timesteps)
        ],
    }


def write_flow_debug(flow: FlowSequence, path) -> None:
    with open(path, "w") as f:
        json.dump(flow_to_dict(flow), f, indent=1)

"""Z-buffer point splatting: points become axis-aligned squares of
(2r+1)^2 pixels keeping the nearest depth per pixel.

Winner resolution is deterministic: smallest depth wins, ties go to the
lowest point index. Points behind the camera are silently dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, project_points


class RenderError(ValueError):
    pass


class EmptyRender(RenderError):
    """No point projected inside the frame."""


@dataclass(frozen=True, eq=False)
class SplatBuffer:
    """depth: (H, W) meters, 0 where empty; winner: (H, W) source point
    index, -1 where empty; color: (H, W, 3) uint8 or None."""

    depth: np.ndarray
    winner: np.ndarray
    color: np.ndarray | None = None

    def valid(self) -> np.ndarray:
        return self.winner >= 0


def splat_points(points_cam, k: CameraIntrinsics, radius: int = 0,
                 colors=None) -> SplatBuffer:
    """Render camera-frame points into a z-buffered splat buffer."""
    pts = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    uv, z = project_points(k, pts)
    ok = (z > 0) & np.isfinite(uv).all(axis=1)
    idx = np.flatnonzero(ok)
    px = np.rint(uv[idx, 0]).astype(np.int64)
    py = np.rint(uv[idx, 1]).astype(np.int64)
    zs = z[idx]

    if radius > 0:
        offs = np.arange(-radius, radius + 1)
        du, dv = np.meshgrid(offs, offs)
        du, dv = du.ravel(), dv.ravel()
        px = (px[:, None] + du[None, :]).ravel()
        py = (py[:, None] + dv[None, :]).ravel()
        zs = np.repeat(zs, len(du))
        idx = np.repeat(idx, len(du))

    inside = (px >= 0) & (px < k.width) & (py >= 0) & (py < k.height)
    px, py, zs, idx = px[inside], py[inside], zs[inside], idx[inside]

    depth = np.zeros((k.height, k.width))
    winner = np.full((k.height, k.width), -1, dtype=np.int64)
    if len(px):
        flat = py * k.width + px
        order = np.lexsort((idx, zs, flat))  # per pixel: nearest, then lowest id
        flat_sorted = flat[order]
        first = np.ones(len(flat_sorted), dtype=bool)
        first[1:] = flat_sorted[1:] != flat_sorted[:-1]
        sel = order[first]
        depth.ravel()[flat[sel]] = zs[sel]
        winner.ravel()[flat[sel]] = idx[sel]

    color = None
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(len(pts), 3)
        color = np.zeros((k.height, k.width, 3), dtype=np.uint8)
        hit = winner >= 0
        color[hit] = colors[winner[hit]]
    return SplatBuffer(depth=depth, winner=winner, color=color)


def render_image(points_cam, colors, k: CameraIntrinsics, radius: int = 2,
                 background: int = 128) -> np.ndarray:
    """RGB uint8 image of the splatted points over a flat background."""
    buf = splat_points(points_cam, k, radius=radius, colors=colors)
    if not buf.valid().any():
        raise EmptyRender("no point projects into the frame")
    img = np.full((k.height, k.width, 3), background, dtype=np.uint8)
    hit = buf.valid()
    img[hit] = buf.color[hit]
    return img

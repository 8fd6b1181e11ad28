"""Occupancy/semantic map rasters and agent-centric rotated crops.

File format (TRJGRID1): an ASCII magic line, an ASCII header line
``width height channels resolution origin_x origin_y``, then the payload as
32-bit little-endian floats, channel-major and row-major within a channel.

World convention: cell (row i, col j) of channel c covers the square whose
center is ``origin + ((j + 0.5) * r, (i + 0.5) * r)``; columns index x,
rows index y.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

MAGIC = b"TRJGRID1"


class MapFormatError(ValueError):
    """Raised when a raster file violates the on-disk contract."""


@dataclass
class MapRaster:
    values: np.ndarray  # [height, width, channels], float32 in [0, 1]
    resolution: float  # meters per cell
    origin: np.ndarray  # world coordinates of the corner of cell (0, 0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"values must be [H, W, C] with positive dims, got {self.values.shape}")
        if self.resolution <= 0:
            raise ValueError(f"resolution must be > 0, got {self.resolution}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("raster contains non-finite values")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def world_to_cell(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of the cells containing the given world points."""
        pts = np.asarray(points, dtype=np.float64)
        cols = np.floor((pts[..., 0] - self.origin[0]) / self.resolution).astype(int)
        rows = np.floor((pts[..., 1] - self.origin[1]) / self.resolution).astype(int)
        return rows, cols

    def in_bounds(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return (rows >= 0) & (rows < self.height) & (cols >= 0) & (cols < self.width)


def save_map_raster(path: str, raster: MapRaster) -> None:
    header = (
        f"{raster.width} {raster.height} {raster.channels} "
        f"{raster.resolution!r} {raster.origin[0]!r} {raster.origin[1]!r}\n"
    )
    payload = np.ascontiguousarray(raster.values.transpose(2, 0, 1), dtype="<f4")
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC + b"\n")
            f.write(header.encode("ascii"))
            f.write(payload.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_map_raster(path: str) -> MapRaster:
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != MAGIC:
            raise MapFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        header = f.readline().decode("ascii").split()
        if len(header) != 6:
            raise MapFormatError(f"header must have 6 fields, got {len(header)}")
        width, height, channels = (int(x) for x in header[:3])
        resolution, ox, oy = (float(x) for x in header[3:])
        expected = width * height * channels * 4
        payload = f.read()
        if len(payload) != expected:
            raise MapFormatError(
                f"payload size mismatch: header implies {expected} bytes, file has {len(payload)}"
            )
    values = np.frombuffer(payload, dtype="<f4").reshape(channels, height, width)
    return MapRaster(values.transpose(1, 2, 0).copy(), resolution, np.array([ox, oy]))


@dataclass(frozen=True)
class CropSpec:
    """Geometry of the agent-centric crop.

    ``context`` meters on a side, resampled at ``resolution`` m/cell. The
    agent sits ``rear_fraction`` of the way along the forward (column) axis,
    so most of the crop looks ahead of the agent. Heading is rotated onto
    the +column direction.
    """

    context: float = 39.6
    resolution: float = 0.33
    rear_fraction: float = 0.25
    pad_value: float = 0.0
    method: str = "nearest"  # or "bilinear"

    def __post_init__(self):
        if self.context <= 0 or self.resolution <= 0:
            raise ValueError("context and resolution must be > 0")
        if self.method not in ("nearest", "bilinear"):
            raise ValueError(f"unknown resampling method {self.method!r}")

    @property
    def size(self) -> int:
        return int(round(self.context / self.resolution))


def crop_rotate_map(raster: MapRaster, position: np.ndarray, heading: float,
                    spec: CropSpec) -> np.ndarray:
    """Heading-aligned local view of the map around a world position.

    Returns an [S, S, C] float32 array; cells that fall outside the map are
    filled with the pad value, so a fully out-of-bounds agent yields an
    all-pad crop rather than an error.
    """
    s = spec.size
    position = np.asarray(position, dtype=np.float64).reshape(2)
    idx = np.arange(s, dtype=np.float64)
    forward = (idx + 0.5) * spec.resolution - spec.rear_fraction * spec.context  # cols
    lateral = (idx + 0.5) * spec.resolution - 0.5 * spec.context  # rows
    ch, sh = np.cos(heading), np.sin(heading)
    fx = forward[None, :] * ch - lateral[:, None] * sh
    fy = forward[None, :] * sh + lateral[:, None] * ch
    wx = position[0] + fx
    wy = position[1] + fy

    out = np.full((s, s, raster.channels), spec.pad_value, dtype=np.float32)
    if spec.method == "nearest":
        rows, cols = raster.world_to_cell(np.stack([wx, wy], axis=-1))
        ok = raster.in_bounds(rows, cols)
        out[ok] = raster.values[rows[ok], cols[ok]]
        return out

    # bilinear on cell centers
    gx = (wx - raster.origin[0]) / raster.resolution - 0.5
    gy = (wy - raster.origin[1]) / raster.resolution - 0.5
    x0, y0 = np.floor(gx).astype(int), np.floor(gy).astype(int)
    tx, ty = (gx - x0).astype(np.float32), (gy - y0).astype(np.float32)
    acc = np.zeros((s, s, raster.channels), dtype=np.float32)
    for dy, wy_ in ((0, 1.0 - ty), (1, ty)):
        for dx, wx_ in ((0, 1.0 - tx), (1, tx)):
            rr, cc = y0 + dy, x0 + dx
            ok = raster.in_bounds(rr, cc)
            val = np.full((s, s, raster.channels), spec.pad_value, dtype=np.float32)
            val[ok] = raster.values[rr[ok], cc[ok]]
            acc += (wy_ * wx_)[:, :, None] * val
    return acc


def corridor_occupancy(x_range: tuple[float, float], y_range: tuple[float, float],
                       half_width: float, resolution: float) -> MapRaster:
    """Occupancy grid with free space inside |y| < half_width, walls outside."""
    origin = np.array([x_range[0], y_range[0]])
    width = int(round((x_range[1] - x_range[0]) / resolution))
    height = int(round((y_range[1] - y_range[0]) / resolution))
    ys = origin[1] + (np.arange(height) + 0.5) * resolution
    occupied = (np.abs(ys) >= half_width).astype(np.float32)
    values = np.repeat(occupied[:, None], width, axis=1)[:, :, None]
    return MapRaster(values, resolution, origin)

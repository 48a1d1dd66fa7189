"""Equidistant N x N grid representations: binary image, distance field,
resampled velocity components, and training-set standardization.

All samples of a dataset share one world-anchored grid frame so that a given
world position always maps to the same pixel.  Arrays are indexed
``values[iy, ix]`` with row 0 at the bottom (y increases with the row index).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (ChannelBoundary, DistortionBounds, points_in_domain,
                       polyline_distance)

FIELD_MAGIC = b"FBS1"
FIELD_KINDS = ("binary", "sdf", "vx", "vy")


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Geometry of an equidistant n x n grid."""

    n: int
    origin: tuple[float, float]  # world coords of the lower-left grid corner
    spacing: float  # metres per cell

    def validate(self) -> None:
        if self.n < 8:
            raise RasterError("grid size must be at least 8")
        if self.spacing <= 0.0:
            raise RasterError("spacing must be positive")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        c = (np.arange(self.n) + 0.5) * self.spacing
        x = self.origin[0] + c
        y = self.origin[1] + c
        return np.meshgrid(x, y)  # X[iy, ix], Y[iy, ix]


@dataclass
class ScalarField:
    """One scalar quantity sampled on a GridSpec."""

    n: int
    origin: tuple[float, float]
    spacing: float
    values: np.ndarray  # (n, n) float64, [iy, ix]

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.n, self.origin, self.spacing)

    def validate(self) -> None:
        self.grid.validate()
        if self.values.shape != (self.n, self.n):
            raise RasterError("values shape does not match grid size")
        if not np.all(np.isfinite(self.values)):
            raise RasterError("field contains non-finite values")


def field_on(grid: GridSpec, values: np.ndarray) -> ScalarField:
    return ScalarField(grid.n, grid.origin, grid.spacing, values)


def default_grid(bounds: DistortionBounds | None = None, n: int = 128) -> GridSpec:
    """Fixed frame covering the largest admissible geometry of ``bounds``."""
    if bounds is None:
        bounds = DistortionBounds()
    bounds.validate()
    avail = 1.5 * bounds.width + bounds.max_distortion
    extent = max(2.0 * avail, bounds.leg_length + avail)
    margin = 0.01 * extent
    side = extent + 2.0 * margin
    origin = (-side / 2.0, -(bounds.leg_length + margin))
    return GridSpec(n=n, origin=origin, spacing=side / n)


def _membership(boundary: ChannelBoundary, grid: GridSpec) -> np.ndarray:
    xg, yg = grid.cell_centers()
    pts = np.column_stack([xg.ravel(), yg.ravel()])
    return points_in_domain(boundary, pts).reshape(grid.n, grid.n)


def rasterize_binary(boundary: ChannelBoundary, grid: GridSpec) -> ScalarField:
    """1.0 where the cell center lies inside the fluid domain, else 0.0."""
    grid.validate()
    return field_on(grid, _membership(boundary, grid).astype(float))


def compute_sdf(boundary: ChannelBoundary, grid: GridSpec) -> ScalarField:
    """Distance to the boundary polyline inside the fluid, exactly 0 outside.

    Shares the membership predicate with rasterize_binary, so the two fields
    have identical support.
    """
    grid.validate()
    inside = _membership(boundary, grid)
    xg, yg = grid.cell_centers()
    pts = np.column_stack([xg.ravel()[inside.ravel()], yg.ravel()[inside.ravel()]])
    values = np.zeros((grid.n, grid.n))
    if pts.size:
        values[inside] = polyline_distance(boundary.points, pts)
    return field_on(grid, values)


def bilinear_sample(values: np.ndarray, origin: tuple[float, float],
                    spacing: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of cell-centred ``values`` at world points."""
    ny, nx = values.shape
    fx = (np.asarray(x) - origin[0]) / spacing - 0.5
    fy = (np.asarray(y) - origin[1]) / spacing - 0.5
    i0 = np.clip(np.floor(fx).astype(int), 0, nx - 2)
    j0 = np.clip(np.floor(fy).astype(int), 0, ny - 2)
    tx = np.clip(fx - i0, 0.0, 1.0)
    ty = np.clip(fy - j0, 0.0, 1.0)
    v00 = values[j0, i0]
    v01 = values[j0, i0 + 1]
    v10 = values[j0 + 1, i0]
    v11 = values[j0 + 1, i0 + 1]
    return ((1 - ty) * ((1 - tx) * v00 + tx * v01)
            + ty * ((1 - tx) * v10 + tx * v11))


def resample_velocity(flow, grid: GridSpec,
                      binary: ScalarField) -> tuple[ScalarField, ScalarField]:
    """Resample solver velocity onto ``grid``; background cells get exactly 0."""
    grid.validate()
    if binary.grid != grid:
        raise RasterError("binary image grid does not match target grid")
    uc, vc = flow.cell_centered_velocity()
    xg, yg = grid.cell_centers()
    mask = binary.values > 0.5
    vx = np.zeros((grid.n, grid.n))
    vy = np.zeros((grid.n, grid.n))
    vx[mask] = bilinear_sample(uc, flow.origin, flow.spacing, xg[mask], yg[mask])
    vy[mask] = bilinear_sample(vc, flow.origin, flow.spacing, xg[mask], yg[mask])
    return field_on(grid, vx), field_on(grid, vy)


@dataclass
class StandardizationStats:
    """Per-field-kind global mean/std computed from the training split only."""

    entries: dict  # kind -> (mean, std)

    def get(self, kind: str) -> tuple[float, float]:
        if kind not in self.entries:
            raise RasterError(f"no standardization stats for kind {kind!r}")
        return self.entries[kind]

    def to_json(self) -> dict:
        return {k: [float(m), float(s)] for k, (m, s) in self.entries.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "StandardizationStats":
        return cls({k: (float(v[0]), float(v[1])) for k, v in obj.items()})


VELOCITY_KINDS = ("vx", "vy")


def compute_stats(fields_by_kind: dict) -> StandardizationStats:
    """Global mean/std per kind; std falls back to 1 for constant fields.

    Velocity components are standardized jointly: zero mean and a scale
    shared by both components (their pooled RMS), so that 90-degree
    rotations and flips act as isometries on the standardized targets
    instead of mixing channels with unequal scales.
    """
    entries = {}
    velocity = {}
    for kind, arrays in fields_by_kind.items():
        stacked = np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])
        if kind in VELOCITY_KINDS:
            velocity[kind] = stacked
            continue
        mean = float(stacked.mean())
        std = float(stacked.std())
        if std <= 0.0:
            std = 1.0
        entries[kind] = (mean, std)
    if velocity:
        pooled = np.concatenate(list(velocity.values()))
        scale = float(np.sqrt(np.mean(pooled * pooled)))
        if scale <= 0.0:
            scale = 1.0
        for kind in velocity:
            entries[kind] = (0.0, scale)
    return StandardizationStats(entries)


def standardize(field: ScalarField, stats: StandardizationStats, kind: str) -> ScalarField:
    mean, std = stats.get(kind)
    return replace(field, values=(field.values - mean) / std)


def destandardize(field: ScalarField, stats: StandardizationStats, kind: str) -> ScalarField:
    mean, std = stats.get(kind)
    return replace(field, values=field.values * std + mean)


def standardize_values(values: np.ndarray, stats: StandardizationStats, kind: str) -> np.ndarray:
    mean, std = stats.get(kind)
    return (values - mean) / std


def destandardize_values(values: np.ndarray, stats: StandardizationStats, kind: str) -> np.ndarray:
    mean, std = stats.get(kind)
    return values * std + mean


def write_field(fh, field: ScalarField) -> None:
    """Binary framing: magic, u32 n, f64 origin_x/origin_y/spacing, n*n f64."""
    fh.write(FIELD_MAGIC)
    fh.write(struct.pack("<Iddd", field.n, field.origin[0], field.origin[1],
                         field.spacing))
    fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_field(fh) -> ScalarField:
    magic = fh.read(4)
    if magic != FIELD_MAGIC:
        raise RasterError(f"bad field magic {magic!r}")
    n, ox, oy, spacing = struct.unpack("<Iddd", fh.read(28))
    raw = fh.read(8 * n * n)
    if len(raw) != 8 * n * n:
        raise RasterError("truncated field record")
    values = np.frombuffer(raw, dtype="<f8").reshape(n, n).astype(float)
    return ScalarField(n, (ox, oy), spacing, values)


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit min-max scaled P5 image (row 0 of the array at the bottom)."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = ((v - lo) * scale).round().astype(np.uint8)[::-1]  # flip to top-down
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())

"""Distorted U-bend channel boundaries built from cubic Bezier walls.

The baseline channel is two vertical straight legs (width ``w``) joined by a
180-degree turn centred on the origin.  The inner wall is a semicircle of
radius ``w/2`` and the outer wall a semicircle of radius ``3w/2``, each
approximated by two cubic Bezier segments.  Distortions displace the movable
Bezier control points; the leg junction points stay fixed so the straight
parts always connect.

Flow enters the left leg moving upward (+y), goes around the turn at the top
and leaves through the bottom of the right leg.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Tangent length making one cubic segment approximate a quarter circle.
KAPPA = 4.0 * (np.sqrt(2.0) - 1.0) / 3.0

DEFAULT_WIDTH = 0.075  # m
N_MOVABLE = 5  # movable control points per wall
_MAX_ATTEMPTS = 1000
_ON_BOUNDARY_TOL = 1e-12


class GeometryError(ValueError):
    """Invalid distortion parameters or a degenerate boundary."""


@dataclass(frozen=True)
class DistortionBounds:
    """Sampling bounds shared by every geometry of one dataset."""

    width: float = DEFAULT_WIDTH
    leg_length: float = 4.0 * DEFAULT_WIDTH
    max_distortion: float = 0.45 * DEFAULT_WIDTH
    # the inner wall has a third of the outer radius; full-size offsets make it
    # fold over itself, so its draws are capped at a fraction of max_distortion
    inner_scale: float = 0.5
    restricted_margin: float = 0.05 * DEFAULT_WIDTH

    def validate(self) -> None:
        if self.width <= 0.0:
            raise GeometryError("width must be positive")
        if self.leg_length < 4.0 * self.width:
            raise GeometryError("leg_length must be at least 4x width")
        if not 0.0 <= self.max_distortion < 0.5 * self.width:
            raise GeometryError("max_distortion must lie in [0, width/2)")
        if not 0.0 < self.inner_scale <= 1.0:
            raise GeometryError("inner_scale must lie in (0, 1]")
        if self.restricted_margin < 0.0:
            raise GeometryError("restricted_margin must be non-negative")


@dataclass(frozen=True)
class BendParams:
    """Normalized distortion parameters defining one U-bend variant."""

    inner_offsets: np.ndarray  # (N_MOVABLE, 2) metres
    outer_offsets: np.ndarray  # (N_MOVABLE, 2) metres
    width: float = DEFAULT_WIDTH
    leg_length: float = 4.0 * DEFAULT_WIDTH
    seed: int = 0

    def validate(self, max_distortion: float | None = None) -> None:
        if self.width <= 0.0:
            raise GeometryError("width must be positive")
        if self.leg_length < 4.0 * self.width:
            raise GeometryError("leg_length must be at least 4x width")
        cap = 0.5 * self.width if max_distortion is None else max_distortion
        for name, offs in (("inner", self.inner_offsets), ("outer", self.outer_offsets)):
            offs = np.asarray(offs, dtype=float)
            if offs.shape != (N_MOVABLE, 2):
                raise GeometryError(f"{name}_offsets must have shape ({N_MOVABLE}, 2)")
            mags = np.hypot(offs[:, 0], offs[:, 1])
            if np.any(mags > cap + 1e-12):
                raise GeometryError(f"{name} offset magnitude exceeds {cap:g}")


@dataclass(frozen=True)
class ChannelBoundary:
    """Closed CCW polyline with inlet/outlet edges marked by index."""

    points: np.ndarray  # (m, 2), closure edge points[-1] -> points[0] implicit
    inlet: tuple[int, int]  # edge from points[i] to points[j]
    outlet: tuple[int, int]
    bounding_box: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


def cubic_bezier(ctrl: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Evaluate a cubic Bezier with control points ``ctrl`` (4, 2) at ``ts``."""
    ctrl = np.asarray(ctrl, dtype=float)
    t = np.asarray(ts, dtype=float)[:, None]
    mt = 1.0 - t
    return (mt ** 3 * ctrl[0] + 3.0 * mt ** 2 * t * ctrl[1]
            + 3.0 * mt * t ** 2 * ctrl[2] + t ** 3 * ctrl[3])


def _wall_control_points(radius: float, left_to_right: bool) -> np.ndarray:
    """Seven control points for a semicircular wall made of two cubic segments.

    ``left_to_right`` walls run (-r, 0) -> (r, 0) over the top; otherwise the
    traversal is mirrored.
    """
    k = KAPPA * radius
    r = radius
    cps = np.array([
        [-r, 0.0], [-r, k], [-k, r], [0.0, r], [k, r], [r, k], [r, 0.0],
    ])
    if not left_to_right:
        cps = cps[::-1].copy()
    return cps


def _wall_polyline(cps: np.ndarray, points_per_segment: int) -> np.ndarray:
    ts = np.linspace(0.0, 1.0, points_per_segment + 1)
    seg_a = cubic_bezier(cps[0:4], ts)
    seg_b = cubic_bezier(cps[3:7], ts)
    return np.vstack([seg_a, seg_b[1:]])


def signed_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return 0.5 * float(np.sum(x * yn - xn * y))


def polyline_distance(loop: np.ndarray, pts: np.ndarray,
                      closed: bool = True) -> np.ndarray:
    """Min point-to-segment distance from each query point to a polyline."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    best = np.full(pts.shape[0], np.inf)
    a = loop
    b = np.roll(loop, -1, axis=0)
    n_edges = loop.shape[0] if closed else loop.shape[0] - 1
    for i in range(n_edges):
        d = b[i] - a[i]
        denom = float(d @ d)
        if denom == 0.0:
            dist = np.hypot(pts[:, 0] - a[i, 0], pts[:, 1] - a[i, 1])
        else:
            t = np.clip(((pts - a[i]) @ d) / denom, 0.0, 1.0)
            proj = a[i] + t[:, None] * d
            dist = np.hypot(pts[:, 0] - proj[:, 0], pts[:, 1] - proj[:, 1])
        np.minimum(best, dist, out=best)
    return best


def _segments_intersect_any(points: np.ndarray) -> bool:
    """Scan a closed polyline for intersections between non-adjacent edges."""
    m = points.shape[0]
    a = points
    b = np.roll(points, -1, axis=0)
    d = b - a
    for i in range(m - 2):
        # skip edges adjacent to i (shared endpoint); edge m-1 is adjacent to 0
        j0 = i + 2
        j1 = m - 1 if i == 0 else m
        if j0 >= j1:
            continue
        aj = a[j0:j1]
        dj = d[j0:j1]
        r = d[i]
        q = aj - a[i]
        denom = r[0] * dj[:, 1] - r[1] * dj[:, 0]
        qxr = q[:, 0] * r[1] - q[:, 1] * r[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (q[:, 0] * dj[:, 1] - q[:, 1] * dj[:, 0]) / denom
            u = qxr / denom
        hit = (denom != 0.0) & (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)
        if np.any(hit):
            return True
        # collinear overlap
        col = (denom == 0.0) & (qxr == 0.0)
        if np.any(col):
            rr = float(r @ r)
            t0 = (q[col] @ r) / rr
            t1 = t0 + (dj[col] @ r) / rr
            lo = np.minimum(t0, t1)
            hi = np.maximum(t0, t1)
            if np.any((hi >= 0.0) & (lo <= 1.0)):
                return True
    return False


def build_boundary(params: BendParams, points_per_segment: int = 64) -> ChannelBoundary:
    """Build the closed channel boundary polyline for one parameter set."""
    params.validate()
    if points_per_segment < 64:
        raise GeometryError("points_per_segment must be at least 64")
    w, leg = params.width, params.leg_length
    r_i, r_o = 0.5 * w, 1.5 * w

    cp_inner = _wall_control_points(r_i, left_to_right=True)
    cp_inner[1:6] += np.asarray(params.inner_offsets, dtype=float)
    cp_outer = _wall_control_points(r_o, left_to_right=False)
    cp_outer[1:6] += np.asarray(params.outer_offsets, dtype=float)

    inner = _wall_polyline(cp_inner, points_per_segment)
    outer = _wall_polyline(cp_outer, points_per_segment)

    points = np.vstack([
        [[-r_o, -leg], [-r_i, -leg]],
        inner,                      # (-r_i, 0) ... (r_i, 0)
        [[r_i, -leg], [r_o, -leg]],
        outer,                      # (r_o, 0) ... (-r_o, 0); closes to start
    ])
    inlet = (0, 1)
    out_start = 2 + inner.shape[0]
    outlet = (out_start, out_start + 1)

    if signed_area(points) <= 0.0:
        raise GeometryError("boundary is not counter-clockwise")
    gap = min(
        float(polyline_distance(outer, inner, closed=False).min()),
        float(polyline_distance(inner, outer, closed=False).min()),
    )
    if gap <= 0.1 * w:
        raise GeometryError(f"inner/outer wall gap {gap:.4g} below 0.1*width")
    if _segments_intersect_any(points):
        raise GeometryError("boundary polyline self-intersects")

    bbox = (float(points[:, 0].min()), float(points[:, 1].min()),
            float(points[:, 0].max()), float(points[:, 1].max()))
    return ChannelBoundary(points=points, inlet=inlet, outlet=outlet, bounding_box=bbox)


def wall_polylines(params: BendParams, points_per_segment: int = 64):
    """Inner and outer turn-wall polylines (used by gap diagnostics/tests)."""
    cp_inner = _wall_control_points(0.5 * params.width, left_to_right=True)
    cp_inner[1:6] += np.asarray(params.inner_offsets, dtype=float)
    cp_outer = _wall_control_points(1.5 * params.width, left_to_right=False)
    cp_outer[1:6] += np.asarray(params.outer_offsets, dtype=float)
    return (_wall_polyline(cp_inner, points_per_segment),
            _wall_polyline(cp_outer, points_per_segment))


def points_in_domain(boundary: ChannelBoundary, pts: np.ndarray) -> np.ndarray:
    """Even-odd membership test; points on the polyline count as inside."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    loop = boundary.points
    nxt = np.roll(loop, -1, axis=0)
    x = pts[:, 0][:, None]
    y = pts[:, 1][:, None]
    x1, y1 = loop[:, 0][None, :], loop[:, 1][None, :]
    x2, y2 = nxt[:, 0][None, :], nxt[:, 1][None, :]
    cond = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    inside = (np.sum(cond & (x < xint), axis=1) % 2) == 1
    on_edge = polyline_distance(loop, pts) <= _ON_BOUNDARY_TOL
    return inside | on_edge


def point_in_domain(boundary: ChannelBoundary, p) -> bool:
    return bool(points_in_domain(boundary, np.asarray(p, dtype=float)[None, :])[0])


def restricted_rectangle(bounds: DistortionBounds) -> tuple[float, float, float, float]:
    """Upper-left corner of the available area, forbidden to train/val shapes."""
    r_o = 1.5 * bounds.width
    avail = r_o + bounds.max_distortion
    q = 0.75 * r_o
    return (-avail, q, -q, avail)


def _inflate(rect, margin):
    return (rect[0] - margin, rect[1] - margin, rect[2] + margin, rect[3] + margin)


def _any_point_in_rect(pts: np.ndarray, rect) -> bool:
    xmin, ymin, xmax, ymax = rect
    return bool(np.any((pts[:, 0] >= xmin) & (pts[:, 0] <= xmax)
                       & (pts[:, 1] >= ymin) & (pts[:, 1] <= ymax)))


def _draw_offsets(rng: np.random.Generator, radius: float) -> np.ndarray:
    out = np.empty((N_MOVABLE, 2))
    for i in range(N_MOVABLE):
        while True:
            cand = rng.uniform(-radius, radius, 2)
            if cand @ cand <= radius * radius:
                out[i] = cand
                break
    return out


def sample_params(seed: int, policy: str = "restricted",
                  bounds: DistortionBounds | None = None) -> BendParams:
    """Draw one distortion parameter set, deterministically for a given seed.

    Under the ``restricted`` policy, draws whose boundary comes within
    ``restricted_margin`` of the restricted rectangle (or fails to build) are
    rejected and redrawn from the same stream.
    """
    if bounds is None:
        bounds = DistortionBounds()
    bounds.validate()
    if policy not in ("restricted", "unrestricted"):
        raise GeometryError(f"unknown policy {policy!r}")
    rng = np.random.default_rng(seed)
    rect = _inflate(restricted_rectangle(bounds), bounds.restricted_margin)
    for _ in range(_MAX_ATTEMPTS):
        params = BendParams(
            inner_offsets=_draw_offsets(rng, bounds.inner_scale * bounds.max_distortion),
            outer_offsets=_draw_offsets(rng, bounds.max_distortion),
            width=bounds.width,
            leg_length=bounds.leg_length,
            seed=seed,
        )
        if policy == "unrestricted":
            return params
        try:
            boundary = build_boundary(params)
        except GeometryError:
            continue
        if not _any_point_in_rect(boundary.points, rect):
            return params
    raise GeometryError(
        f"could not satisfy policy {policy!r} within {_MAX_ATTEMPTS} attempts")


def straight_channel_boundary(width: float, length: float) -> ChannelBoundary:
    """Axis-aligned vertical channel: inlet at the bottom, outlet at the top."""
    if width <= 0.0 or length <= 0.0:
        raise GeometryError("width and length must be positive")
    pts = np.array([[0.0, 0.0], [width, 0.0], [width, length], [0.0, length]])
    return ChannelBoundary(points=pts, inlet=(0, 1), outlet=(2, 3),
                           bounding_box=(0.0, 0.0, width, length))


def export_boundary_csv(boundary: ChannelBoundary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in boundary.points:
            fh.write(f"{x:.9g},{y:.9g}\n")

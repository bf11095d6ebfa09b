"""Shape generation from agent actions.

Raw actions come in as (p, q, s) triplets in [-1, 1]. Each triplet is mapped
to a control point restricted to an annular sector, the points are sorted by
polar angle and joined by cubic Bezier segments whose end tangents are blended
from the neighbouring chord directions. Sampling the segments gives a closed
polygon (closure implied, the first vertex is not repeated).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

EPS_AREA = 1e-6
EPS_EDGE = 1e-6


def circle_curvature(n: int) -> float:
    """Curvature weight making n equal cubic arcs approximate a circle.

    Standard handle length (4/3) tan(pi / 2n) for a unit circle, divided by
    the chord 2 sin(pi / n).
    """
    return (4.0 / 3.0) * math.tan(math.pi / (2 * n)) / (2.0 * math.sin(math.pi / n))


class DegenerateShape(ValueError):
    """Raised when control points cannot define a closed shape."""


def _clamp(x: float) -> float:
    return min(1.0, max(-1.0, float(x)))


@dataclass(frozen=True)
class ActionTriplet:
    p: float
    q: float
    s: float

    def __post_init__(self):
        object.__setattr__(self, "p", _clamp(self.p))
        object.__setattr__(self, "q", _clamp(self.q))
        object.__setattr__(self, "s", _clamp(self.s))


@dataclass(frozen=True)
class ControlPoint:
    x: float
    y: float
    e: float = 0.5

    @property
    def radius(self) -> float:
        return math.hypot(self.x, self.y)

    @property
    def angle(self) -> float:
        """Polar angle mapped to [0, 2pi)."""
        a = math.atan2(self.y, self.x)
        if a < 0.0:
            a += 2.0 * math.pi
        # atan2 of a tiny negative y can round to exactly 2pi
        return 0.0 if a >= 2.0 * math.pi else a


@dataclass(frozen=True)
class ShapeSpec:
    points: tuple[ControlPoint, ...]
    smoothing: float = 0.5
    samples_per_segment: int = 32

    def __post_init__(self):
        if len(self.points) < 3:
            raise DegenerateShape(f"need at least 3 points, got {len(self.points)}")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ValueError("smoothing must lie in [0, 1]")
        if self.samples_per_segment < 2:
            raise ValueError("samples_per_segment must be >= 2")
        object.__setattr__(self, "points", tuple(sort_points(list(self.points))))


@dataclass
class Polygon:
    """Closed polygon, stored counter-clockwise without a repeated last vertex."""

    vertices: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) > 1 and np.array_equal(v[0], v[-1]):
            v = v[:-1]
        if _signed_area(v) < 0.0:
            v = v[::-1]
        self.vertices = np.ascontiguousarray(v)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        xmin, ymin = self.vertices.min(axis=0)
        xmax, ymax = self.vertices.max(axis=0)
        return float(xmin), float(ymin), float(xmax), float(ymax)

    def translated(self, dx: float, dy: float) -> "Polygon":
        return Polygon(self.vertices + np.array([dx, dy]))


@dataclass(frozen=True)
class Validity:
    valid: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.valid


def decode_point(t: ActionTriplet, i: int, n: int, r_min: float, r_max: float,
                 angular_factor: float = 2.0 * math.pi) -> ControlPoint:
    """Map a raw triplet to the i-th of n control points.

    The point lies at radius ``r_max * max(|p|, r_min)`` and polar angle
    ``(angular_factor / n) * (i + q / 2)``; ``angular_factor = pi`` gives the
    half-turn variant.
    """
    if not 0 <= i < n:
        raise ValueError(f"point index {i} out of range for n={n}")
    if not 0.0 < r_min < 1.0 or r_max <= 0.0:
        raise ValueError("need 0 < r_min < 1 and r_max > 0")
    r = r_max * max(abs(t.p), r_min)
    theta = (angular_factor / n) * (i + 0.5 * t.q)
    return ControlPoint(r * math.cos(theta), r * math.sin(theta), 0.5 * (1.0 + t.s))


def sort_points(points: Sequence[ControlPoint]) -> list[ControlPoint]:
    """Sort by polar angle in [0, 2pi), ties broken by ascending radius."""
    pts = list(points)
    seen = set()
    for pt in pts:
        key = (pt.x, pt.y)
        if key in seen:
            raise DegenerateShape(f"coincident control points at {key}")
        seen.add(key)
    return sorted(pts, key=lambda pt: (pt.angle, pt.radius))


def _direction(a: ControlPoint, b: ControlPoint) -> float:
    return math.atan2(b.y - a.y, b.x - a.x)


def tangent_angles(points: Sequence[ControlPoint], alpha: float) -> list[float]:
    n = len(points)
    out = []
    for i in range(n):
        incoming = _direction(points[i - 1], points[i])
        outgoing = _direction(points[i], points[(i + 1) % n])
        # blend unit vectors so the average follows the shorter arc
        cx = alpha * math.cos(incoming) + (1.0 - alpha) * math.cos(outgoing)
        cy = alpha * math.sin(incoming) + (1.0 - alpha) * math.sin(outgoing)
        if cx == 0.0 and cy == 0.0:
            # exact reversal: fall back to the outgoing direction
            out.append(outgoing)
        else:
            out.append(math.atan2(cy, cx))
    return out


def bezier_controls(p_i: ControlPoint, p_j: ControlPoint, theta_i: float,
                    theta_j: float) -> np.ndarray:
    """The four control points of the cubic joining p_i to p_j."""
    chord = math.hypot(p_j.x - p_i.x, p_j.y - p_i.y)
    d_i = p_i.e * chord
    d_j = p_j.e * chord
    return np.array([
        [p_i.x, p_i.y],
        [p_i.x + d_i * math.cos(theta_i), p_i.y + d_i * math.sin(theta_i)],
        [p_j.x - d_j * math.cos(theta_j), p_j.y - d_j * math.sin(theta_j)],
        [p_j.x, p_j.y],
    ])


def bezier_segment(p_i: ControlPoint, p_j: ControlPoint, theta_i: float,
                   theta_j: float, m: int) -> np.ndarray:
    if m < 2:
        raise ValueError("need at least 2 samples per segment")
    c = bezier_controls(p_i, p_j, theta_i, theta_j)
    t = np.linspace(0.0, 1.0, m)[:, None]
    s = 1.0 - t
    pts = (s**3) * c[0] + (3.0 * s * s * t) * c[1] + (3.0 * s * t * t) * c[2] + (t**3) * c[3]
    pts[0] = c[0]
    pts[-1] = c[3]
    return pts


def build_shape(spec: ShapeSpec) -> Polygon:
    pts = spec.points
    thetas = tangent_angles(pts, spec.smoothing)
    n = len(pts)
    pieces = []
    for i in range(n):
        j = (i + 1) % n
        seg = bezier_segment(pts[i], pts[j], thetas[i], thetas[j], spec.samples_per_segment)
        pieces.append(seg[:-1])
    return Polygon(np.concatenate(pieces))


def _signed_area(v: np.ndarray) -> float:
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly: Polygon) -> float:
    """Shoelace area; positive because polygons are kept counter-clockwise."""
    return _signed_area(poly.vertices)


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def validate(poly: Polygon, eps_area: float = EPS_AREA, eps_edge: float = EPS_EDGE) -> Validity:
    v = poly.vertices
    nv = len(v)
    if nv < 3:
        return Validity(False, "too-few-vertices")
    if not np.all(np.isfinite(v)):
        return Validity(False, "non-finite")
    w = np.roll(v, -1, axis=0)
    edges = w - v
    if np.min(np.hypot(edges[:, 0], edges[:, 1])) <= eps_edge:
        return Validity(False, "edge-too-short")

    # proper intersection between every pair of non-adjacent edges
    i, j = np.triu_indices(nv, k=2)
    keep = ~((i == 0) & (j == nv - 1))
    i, j = i[keep], j[keep]
    p, r = v[i], edges[i]
    q, s = v[j], edges[j]
    d1 = _cross(r[:, 0], r[:, 1], q[:, 0] - p[:, 0], q[:, 1] - p[:, 1])
    d2 = _cross(r[:, 0], r[:, 1], q[:, 0] + s[:, 0] - p[:, 0], q[:, 1] + s[:, 1] - p[:, 1])
    d3 = _cross(s[:, 0], s[:, 1], p[:, 0] - q[:, 0], p[:, 1] - q[:, 1])
    d4 = _cross(s[:, 0], s[:, 1], p[:, 0] + r[:, 0] - q[:, 0], p[:, 1] + r[:, 1] - q[:, 1])
    crossing = (d1 * d2 <= 0.0) & (d3 * d4 <= 0.0)
    # collinear pairs only count when their extents overlap
    collinear = (d1 == 0.0) & (d2 == 0.0)
    if np.any(collinear):
        rr = np.einsum("ij,ij->i", r, r)
        t0 = np.einsum("ij,ij->i", q - p, r) / rr
        t1 = np.einsum("ij,ij->i", q + s - p, r) / rr
        overlap = (np.maximum(t0, t1) >= 0.0) & (np.minimum(t0, t1) <= 1.0)
        crossing = np.where(collinear, overlap, crossing)
    if np.any(crossing):
        return Validity(False, "self-intersection")
    if abs(polygon_area(poly)) <= eps_area:
        return Validity(False, "area-too-small")
    return Validity(True)


def circle_polygon(radius: float = 1.0, n: int = 4096) -> Polygon:
    t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    return Polygon(np.column_stack([radius * np.cos(t), radius * np.sin(t)]))


def reference_points(n: int = 4, radius: float = 1.0) -> list[ControlPoint]:
    """Control points of the reference cylinder: equally spaced, starting at +x."""
    return [ControlPoint(radius * math.cos(2.0 * math.pi * i / n),
                         radius * math.sin(2.0 * math.pi * i / n),
                         circle_curvature(n))
            for i in range(n)]


def write_outline(poly: Polygon, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for x, y in poly.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
    return path


def read_outline(path: str | Path) -> Polygon:
    return Polygon(np.loadtxt(path, ndmin=2))

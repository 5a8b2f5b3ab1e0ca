"""Composite Bézier fin shapes: construction, sampling, polygonization, checks.

A fin is a closed chain of Bézier segments. Sampled fins use the midpoint
scheme: base points are sorted by polar angle about their centroid and each
base point becomes the middle control point of a quadratic segment running
between the midpoints of its two adjacent edges. Closure is exact because
neighbouring segments share the very same midpoint tuple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .rng import stream

CHANNEL_LENGTH = 3.0
CHANNEL_HEIGHT = 1.0
FIN_WIDTH = CHANNEL_LENGTH / 3
FIN_HEIGHT = CHANNEL_HEIGHT / 4
MIN_AREA_FRACTION = 0.01
MAX_ATTEMPTS = 100


class GeometryError(ValueError):
    """Invalid geometric input."""


class GenerationExhausted(RuntimeError):
    """Rejection sampling ran out of attempts."""


class Point2(NamedTuple):
    x: float
    y: float


class Rect(NamedTuple):
    x0: float
    y0: float
    width: float
    height: float

    @property
    def x1(self) -> float:
        return self.x0 + self.width

    @property
    def y1(self) -> float:
        return self.y0 + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, p: Sequence[float]) -> bool:
        return self.x0 <= p[0] <= self.x1 and self.y0 <= p[1] <= self.y1


UNIT_BOX = Rect(0.0, 0.0, 1.0, 1.0)
CHANNEL = Rect(0.0, 0.0, CHANNEL_LENGTH, CHANNEL_HEIGHT)


def slot_boxes(n_shapes: int) -> list[Rect]:
    """Fin bounding boxes in the channel.

    Slot 0 sits in the middle of the channel and is the only slot used for
    single-fin runs. Five fins use a staggered quincunx: two fins upstream,
    the central fin, two fins downstream, all separated by at least 0.05.
    """
    centers = [(1.5, 0.5), (0.75, 0.2), (0.75, 0.8), (2.25, 0.2), (2.25, 0.8)]
    if not 1 <= n_shapes <= len(centers):
        raise GeometryError(f"n_shapes must be in 1..{len(centers)}, got {n_shapes}")
    return [
        Rect(cx - FIN_WIDTH / 2, cy - FIN_HEIGHT / 2, FIN_WIDTH, FIN_HEIGHT)
        for cx, cy in centers[:n_shapes]
    ]


def bernstein(i: int, n: int, u: float) -> float:
    """Bernstein basis polynomial C(n, i) u^i (1-u)^(n-i)."""
    if n < 0 or not 0 <= i <= n:
        raise ValueError(f"need 0 <= i <= n, got i={i}, n={n}")
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    return math.comb(n, i) * u**i * (1.0 - u) ** (n - i)


def _basis_matrix(n: int, us: np.ndarray) -> np.ndarray:
    i = np.arange(n + 1)
    coeff = np.array([math.comb(n, k) for k in i], dtype=float)
    us = us[:, None]
    return coeff * us**i * (1.0 - us) ** (n - i)


@dataclass(frozen=True)
class BezierSegment:
    control_points: tuple[Point2, ...]

    def __post_init__(self) -> None:
        if len(self.control_points) < 2:
            raise GeometryError("a Bézier segment needs at least 2 control points")
        pts = tuple(Point2(float(p[0]), float(p[1])) for p in self.control_points)
        if not all(math.isfinite(c) for p in pts for c in p):
            raise GeometryError("control points must be finite")
        object.__setattr__(self, "control_points", pts)

    @property
    def degree(self) -> int:
        return len(self.control_points) - 1

    def as_array(self) -> np.ndarray:
        return np.array(self.control_points, dtype=float)

    def evaluate(self, us: np.ndarray) -> np.ndarray:
        """Curve points for an array of parameters, shape (len(us), 2)."""
        us = np.asarray(us, dtype=float)
        if us.size and (us.min() < 0.0 or us.max() > 1.0):
            raise ValueError("curve parameters must lie in [0, 1]")
        return _basis_matrix(self.degree, us) @ self.as_array()


def bezier_point(seg: BezierSegment, u: float) -> Point2:
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    n = seg.degree
    x = y = 0.0
    for i, p in enumerate(seg.control_points):
        b = bernstein(i, n, u)
        x += p.x * b
        y += p.y * b
    return Point2(x, y)


@dataclass(frozen=True)
class FinShape:
    segments: tuple[BezierSegment, ...]
    bbox: Rect
    n_base_points: int

    @property
    def anchor(self) -> Point2:
        return Point2(self.bbox.x0, self.bbox.y0)

    def control_points(self) -> np.ndarray:
        return np.concatenate([s.as_array() for s in self.segments])

    def translated(self, dx: float, dy: float, bbox: Rect | None = None) -> FinShape:
        segs = tuple(
            BezierSegment(tuple(Point2(p.x + dx, p.y + dy) for p in s.control_points))
            for s in self.segments
        )
        box = bbox or Rect(self.bbox.x0 + dx, self.bbox.y0 + dy, self.bbox.width, self.bbox.height)
        return FinShape(segs, box, self.n_base_points)

    def scaled(self, factor: float, center: Sequence[float] | None = None) -> FinShape:
        """Dilation about ``center`` (default: control-point centroid); bbox is kept."""
        c = np.mean(self.control_points(), axis=0) if center is None else np.asarray(center)
        segs = tuple(
            BezierSegment(tuple(Point2(*(c + factor * (np.array(p) - c))) for p in s.control_points))
            for s in self.segments
        )
        return FinShape(segs, self.bbox, self.n_base_points)

    def mirrored(self, axis_y: float = CHANNEL_HEIGHT / 2) -> FinShape:
        """Reflection across the horizontal line ``y = axis_y`` (the channel centreline by default)."""
        segs = tuple(
            BezierSegment(tuple(Point2(p.x, 2 * axis_y - p.y) for p in reversed(s.control_points)))
            for s in reversed(self.segments)
        )
        b = self.bbox
        return FinShape(segs, Rect(b.x0, 2 * axis_y - b.y1, b.width, b.height), self.n_base_points)


@dataclass(frozen=True)
class Polyline:
    vertices: np.ndarray = field(repr=False)
    closed: bool = True

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise GeometryError("vertices must have shape (k, 2)")
        if self.closed and len(v) < 3:
            raise GeometryError("a closed polyline needs at least 3 vertices")
        object.__setattr__(self, "vertices", v)


def fin_from_base_points(points: Sequence[Sequence[float]], bbox: Rect, sort: bool = True) -> FinShape:
    """Closed quadratic fin through the edge midpoints of the base polygon."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise GeometryError("need at least 3 base points")
    if sort:
        c = pts.mean(axis=0)
        order = np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]), kind="stable")
        pts = pts[order]
    base = [Point2(float(x), float(y)) for x, y in pts]
    m = len(base)
    mids = [
        Point2((base[k].x + base[(k + 1) % m].x) / 2, (base[k].y + base[(k + 1) % m].y) / 2)
        for k in range(m)
    ]
    segs = tuple(BezierSegment((mids[k - 1], base[k], mids[k])) for k in range(m))
    return FinShape(segs, bbox, m)


def bezier_circle(center: Sequence[float], radius: float, bbox: Rect | None = None) -> FinShape:
    """Four cubic segments approximating a circle (radial error ~2.7e-4 r)."""
    cx, cy = float(center[0]), float(center[1])
    k = 4.0 / 3.0 * (math.sqrt(2.0) - 1.0) * radius
    r = radius
    quads = [
        ((cx + r, cy), (cx + r, cy + k), (cx + k, cy + r), (cx, cy + r)),
        ((cx, cy + r), (cx - k, cy + r), (cx - r, cy + k), (cx - r, cy)),
        ((cx - r, cy), (cx - r, cy - k), (cx - k, cy - r), (cx, cy - r)),
        ((cx, cy - r), (cx + k, cy - r), (cx + r, cy - k), (cx + r, cy)),
    ]
    segs = tuple(BezierSegment(tuple(Point2(*p) for p in q)) for q in quads)
    # share the joint tuples so closure is exact
    fixed = []
    for idx, s in enumerate(segs):
        prev_end = segs[idx - 1].control_points[-1]
        fixed.append(BezierSegment((prev_end,) + s.control_points[1:]))
    box = bbox or Rect(cx - r, cy - r, 2 * r, 2 * r)
    return FinShape(tuple(fixed), box, 4)


def polygon_fin(vertices: Sequence[Sequence[float]], bbox: Rect) -> FinShape:
    """Fin made of straight (degree 1) segments, closed through ``vertices``."""
    pts = [Point2(float(x), float(y)) for x, y in vertices]
    segs = tuple(BezierSegment((pts[k], pts[(k + 1) % len(pts)])) for k in range(len(pts)))
    return FinShape(segs, bbox, len(pts))


def polygonize(shape: FinShape | BezierSegment, samples_per_segment: int = 32) -> Polyline:
    """Sample each segment at ``samples_per_segment`` evenly spaced parameters in [0, 1].

    Segment endpoints are included, so joints appear twice; consumers that
    care (the simplicity test) drop zero-length edges.
    """
    if samples_per_segment < 2:
        raise ValueError("samples_per_segment must be >= 2")
    segs = (shape,) if isinstance(shape, BezierSegment) else shape.segments
    us = np.linspace(0.0, 1.0, samples_per_segment)
    verts = np.concatenate([s.evaluate(us) for s in segs])
    closed = isinstance(shape, FinShape) and len(verts) >= 3
    return Polyline(verts, closed=closed)


def area_green(poly: Polyline) -> float:
    """Enclosed area via the discrete Green's theorem (shoelace), orientation-free."""
    if not poly.closed:
        raise GeometryError("area needs a closed polyline")
    x, y = poly.vertices[:, 0], poly.vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _edges(poly: Polyline) -> tuple[np.ndarray, np.ndarray]:
    v = poly.vertices
    a, b = v, np.roll(v, -1, axis=0)
    keep = np.any(a != b, axis=1)
    return a[keep], b[keep]


def is_simple(poly: Polyline) -> bool:
    """True when no two non-adjacent edges of the closed polyline touch or cross."""
    a, b = _edges(poly)
    m = len(a)
    if m < 3:
        return False

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (
            r[..., 0] - p[..., 0]
        )

    i, j = np.triu_indices(m, k=2)
    wrap = (i == 0) & (j == m - 1)
    i, j = i[~wrap], j[~wrap]
    p1, p2, p3, p4 = a[i], b[i], a[j], b[j]
    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    crossing = (d1 * d2 < 0) & (d3 * d4 < 0)
    if crossing.any():
        return False

    def on_segment(p, q, r, d):
        return (
            (d == 0)
            & (np.minimum(p[:, 0], q[:, 0]) <= r[:, 0])
            & (r[:, 0] <= np.maximum(p[:, 0], q[:, 0]))
            & (np.minimum(p[:, 1], q[:, 1]) <= r[:, 1])
            & (r[:, 1] <= np.maximum(p[:, 1], q[:, 1]))
        )

    touching = (
        on_segment(p3, p4, p1, d1)
        | on_segment(p3, p4, p2, d2)
        | on_segment(p1, p2, p3, d3)
        | on_segment(p1, p2, p4, d4)
    )
    return not touching.any()


@dataclass(frozen=True)
class ValidationReport:
    closed: bool
    contained: bool
    simple: bool
    area: float
    area_ok: bool

    @property
    def ok(self) -> bool:
        return self.closed and self.contained and self.simple and self.area_ok

    def failures(self) -> list[str]:
        names = ("closed", "contained", "simple", "area_ok")
        return [n for n in names if not getattr(self, n)]


def validate(shape: FinShape, samples_per_segment: int = 32) -> ValidationReport:
    segs = shape.segments
    closed = len(segs) >= 1 and all(
        segs[k].control_points[-1] == segs[(k + 1) % len(segs)].control_points[0]
        for k in range(len(segs))
    )
    contained = all(shape.bbox.contains(p) for s in segs for p in s.control_points)
    poly = polygonize(shape, samples_per_segment)
    simple = poly.closed and is_simple(poly)
    area = area_green(poly) if poly.closed else 0.0
    area_ok = area >= MIN_AREA_FRACTION * shape.bbox.area
    return ValidationReport(closed, contained, simple, area, area_ok)


def sample_fin(
    rng_seed: int,
    n_base_points: int,
    bbox: Rect,
    key: Sequence[int] = (),
    max_attempts: int = MAX_ATTEMPTS,
) -> FinShape:
    """Random valid fin inside ``bbox``.

    Attempt ``a`` draws from ``stream(rng_seed, "geometry", *key, a)``, so a
    given (seed, key) always yields the same fin.
    """
    if n_base_points not in (4, 5):
        raise ValueError("n_base_points must be 4 or 5")
    if bbox.width <= 0 or bbox.height <= 0:
        raise GeometryError("bbox must have positive area")
    for attempt in range(max_attempts):
        rng = stream(rng_seed, "geometry", *key, attempt)
        u = rng.random((n_base_points, 2))
        pts = np.column_stack([bbox.x0 + u[:, 0] * bbox.width, bbox.y0 + u[:, 1] * bbox.height])
        shape = fin_from_base_points(pts, bbox)
        if validate(shape).ok:
            return shape
    raise GenerationExhausted(
        f"no valid fin after {max_attempts} attempts (seed={rng_seed}, key={tuple(key)})"
    )


def dumps_shape(shape: FinShape) -> str:
    b = shape.bbox
    lines = [f"{len(shape.segments)} {shape.n_base_points} {b.x0!r} {b.y0!r} {b.width!r} {b.height!r}"]
    for s in shape.segments:
        lines.append(" ".join(f"{p.x!r} {p.y!r}" for p in s.control_points))
    return "\n".join(lines) + "\n"


def loads_shape(text: str) -> FinShape:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise GeometryError("empty shape text")
    head = lines[0].split()
    if len(head) != 6:
        raise GeometryError("shape header must have 6 fields")
    n_seg, n_base = int(head[0]), int(head[1])
    bbox = Rect(*map(float, head[2:]))
    if len(lines) != 1 + n_seg:
        raise GeometryError(f"expected {n_seg} segment lines, got {len(lines) - 1}")
    segs = []
    for ln in lines[1:]:
        vals = [float(t) for t in ln.split()]
        if len(vals) % 2:
            raise GeometryError("odd number of coordinates in segment line")
        segs.append(BezierSegment(tuple(Point2(vals[k], vals[k + 1]) for k in range(0, len(vals), 2))))
    return FinShape(tuple(segs), bbox, n_base)

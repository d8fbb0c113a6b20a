"""Spherical and planar geospatial math.

Equal Earth pseudocylindrical projection (forward and inverse), great-circle
distance on the IUGG mean sphere, and a hierarchical quadtree of geocells laid
over the projection's bounding rectangle.

Equal Earth polynomial coefficients (Savric, Patterson & Jenny 2019):
    A1 = 1.340264, A2 = -0.081106, A3 = 0.000893, A4 = 0.003796
with theta = asin(sqrt(3)/2 * sin(phi)) and, on the unit sphere,

    x = (2*sqrt(3)/3) * lambda * cos(theta) / P'(theta)
    y = theta * P(theta)

where P(t)  = A1 + A2*t^2 + t^6*(A3 + A4*t^2)
and   P'(t) = A1 + 3*A2*t^2 + t^6*(7*A3 + 9*A4*t^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

A1 = 1.340264
A2 = -0.081106
A3 = 0.000893
A4 = 0.003796

_SQRT3_HALF = math.sqrt(3.0) / 2.0

#: IUGG mean Earth radius in meters (spherical model).
EARTH_RADIUS_M = 6_371_008.8

#: Planar extent of the projection image on the unit sphere:
#: x in [-X_MAX, X_MAX], y in [-Y_MAX, Y_MAX].
X_MAX = math.pi / (_SQRT3_HALF * A1)
_THETA_MAX = math.asin(_SQRT3_HALF)
Y_MAX = _THETA_MAX * (A1 + A2 * _THETA_MAX**2 + _THETA_MAX**6 * (A3 + A4 * _THETA_MAX**2))

_NEWTON_TOL = 1e-14
_NEWTON_MAX_ITER = 20


def normalize_lon(lon: float) -> float:
    """Wrap a longitude in degrees into [-180, 180).

    Values already in range pass through bit-exactly, preserving the
    projection's longitude symmetry.
    """
    if -180.0 <= lon < 180.0:
        return lon
    return (lon + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class GeoCoordinate:
    """A location in decimal degrees; lon is normalized into [-180, 180)."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise DomainError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise DomainError(f"latitude {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lon", normalize_lon(self.lon))


@dataclass(frozen=True)
class ProjectedPoint:
    """Equal Earth planar image of a coordinate, unit-sphere scale."""

    x: float
    y: float


def _poly(theta):
    t2 = theta * theta
    t6 = t2 * t2 * t2
    return A1 + A2 * t2 + t6 * (A3 + A4 * t2)


def _dpoly(theta):
    t2 = theta * theta
    t6 = t2 * t2 * t2
    return A1 + 3.0 * A2 * t2 + t6 * (7.0 * A3 + 9.0 * A4 * t2)


def project(lat, lon):
    """Equal Earth forward on arrays of degrees; returns planar (x, y) arrays."""
    lam = np.radians(np.asarray(lon, dtype=np.float64))
    phi = np.radians(np.asarray(lat, dtype=np.float64))
    theta = np.arcsin(np.clip(_SQRT3_HALF * np.sin(phi), -1.0, 1.0))
    x = lam * np.cos(theta) / (_SQRT3_HALF * _dpoly(theta))
    y = theta * _poly(theta)
    return x, y


def unproject(x, y):
    """Equal Earth inverse on planar arrays; returns (lat, lon) in degrees.

    Solves theta from y by Newton iteration (initial guess y / A1, tolerance
    1e-14, at most 20 iterations), then recovers latitude and longitude.

    Raises:
        DomainError: if any point lies outside the projection image.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(np.abs(y) > Y_MAX * (1.0 + 1e-12)):
        raise DomainError("planar y outside the projection image")

    theta = np.clip(y / A1, -_THETA_MAX, _THETA_MAX)
    for _ in range(_NEWTON_MAX_ITER):
        delta = (theta * _poly(theta) - y) / _dpoly(theta)
        theta = np.clip(theta - delta, -_THETA_MAX, _THETA_MAX)
        if np.max(np.abs(delta)) < _NEWTON_TOL:
            break

    phi = np.arcsin(np.clip(np.sin(theta) / _SQRT3_HALF, -1.0, 1.0))
    lam = x * _SQRT3_HALF * _dpoly(theta) / np.cos(theta)
    if np.any(np.abs(lam) > math.pi * (1.0 + 1e-9)):
        raise DomainError("planar x outside the projection image")
    lam = np.clip(lam, -math.pi, math.pi)
    return np.degrees(phi), np.degrees(lam)


def equal_earth_forward(c: GeoCoordinate) -> ProjectedPoint:
    """Project a coordinate to the Equal Earth plane."""
    x, y = project(c.lat, c.lon)
    return ProjectedPoint(float(x), float(y))


def equal_earth_inverse(p: ProjectedPoint) -> GeoCoordinate:
    """Recover the coordinate whose Equal Earth image is ``p``.

    Raises:
        DomainError: if ``p`` lies outside the projection image.
    """
    lat, lon = unproject(p.x, p.y)
    return GeoCoordinate(float(lat), float(lon))


def haversine_distance(a: GeoCoordinate, b: GeoCoordinate) -> float:
    """Great-circle distance between two coordinates in meters."""
    return float(haversine_m(a.lat, a.lon, b.lat, b.lon))


def haversine_m(lat1, lon1, lat2, lon2):
    """Vectorized haversine distance in meters on the IUGG mean sphere."""
    phi1 = np.radians(np.asarray(lat1, dtype=np.float64))
    phi2 = np.radians(np.asarray(lat2, dtype=np.float64))
    dphi = phi2 - phi1
    dlam = np.radians(np.asarray(lon2, dtype=np.float64)) - np.radians(
        np.asarray(lon1, dtype=np.float64)
    )
    h = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


@dataclass(frozen=True, order=True)
class CellId:
    """Cell of a 2^level x 2^level grid over the projection bounding rectangle."""

    level: int
    column: int
    row: int

    def __post_init__(self):
        if not 0 <= self.level <= 30:
            raise DomainError(f"cell level {self.level} outside [0, 30]")
        n = 1 << self.level
        if not (0 <= self.column < n and 0 <= self.row < n):
            raise DomainError(
                f"cell index ({self.column}, {self.row}) outside {n}x{n} grid"
            )

    def parent(self) -> "CellId":
        if self.level == 0:
            raise DomainError("root cell has no parent")
        return CellId(self.level - 1, self.column // 2, self.row // 2)

    def __str__(self) -> str:
        return f"L{self.level}:{self.column}:{self.row}"

    @classmethod
    def parse(cls, text: str) -> "CellId":
        if not text.startswith("L"):
            raise DomainError(f"bad cell id {text!r}")
        parts = text[1:].split(":")
        if len(parts) != 3:
            raise DomainError(f"bad cell id {text!r}")
        return cls(int(parts[0]), int(parts[1]), int(parts[2]))


def cell_of(c: GeoCoordinate, level: int) -> CellId:
    """Cell containing the Equal Earth image of ``c``.

    Cells are half-open, [x0, x1) x [y0, y1); the top and right edges of the
    bounding rectangle are clamped into the last cell so every valid
    coordinate maps to exactly one cell.
    """
    if not 0 <= level <= 30:
        raise DomainError(f"cell level {level} outside [0, 30]")
    p = equal_earth_forward(c)
    n = 1 << level
    col = min(int(math.floor((p.x + X_MAX) / (2.0 * X_MAX) * n)), n - 1)
    row = min(int(math.floor((p.y + Y_MAX) / (2.0 * Y_MAX) * n)), n - 1)
    return CellId(level, max(col, 0), max(row, 0))


def cell_center_plane(cell: CellId) -> ProjectedPoint:
    """Planar center of a cell in the bounding rectangle."""
    n = 1 << cell.level
    x = -X_MAX + (cell.column + 0.5) * (2.0 * X_MAX / n)
    y = -Y_MAX + (cell.row + 0.5) * (2.0 * Y_MAX / n)
    return ProjectedPoint(x, y)


def cell_centroid(cell: CellId) -> GeoCoordinate:
    """Inverse projection of the planar cell center.

    Raises:
        DomainError: when the planar center falls outside the projection
            image (possible near the corners of the bounding rectangle);
            callers are expected to skip such cells.
    """
    return equal_earth_inverse(cell_center_plane(cell))

"""Convex domains and translation-invariant nodal sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    pass


class Domain:
    """Base class for bounded convex planar domains.

    Subclasses provide a vectorized signed distance (negative inside) and the
    exit parameter of a ray started inside the closed domain.
    """

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def ray_exit(self, x, d) -> float:
        """Largest s >= 0 with x + s*d in the closed domain (x assumed inside)."""
        raise NotImplementedError

    def boundary_nodes(self, h: float, offset) -> np.ndarray:
        raise NotImplementedError

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def boundary_samples(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform random points on the boundary (used by density checks)."""
        raise NotImplementedError

    @property
    def diameter(self) -> float:
        lo, hi = self.bounding_box()
        return float(np.hypot(*(hi - lo)))

    def contains(self, pts, tol: float = 0.0) -> np.ndarray:
        return self.signed_distance(np.atleast_2d(pts)) <= tol


@dataclass(frozen=True)
class Square(Domain):
    center: tuple[float, float] = (0.0, 0.0)
    half_width: float = 1.0

    def __post_init__(self):
        if not self.half_width > 0:
            raise DomainError("square half-width must be positive")

    def signed_distance(self, pts):
        q = np.abs(np.asarray(pts, dtype=float) - self.center) - self.half_width
        outside = np.hypot(np.maximum(q[:, 0], 0), np.maximum(q[:, 1], 0))
        inside = np.minimum(np.maximum(q[:, 0], q[:, 1]), 0.0)
        return outside + inside

    def ray_exit(self, x, d):
        s = math.inf
        for k in range(2):
            if d[k] > 0:
                s = min(s, (self.center[k] + self.half_width - x[k]) / d[k])
            elif d[k] < 0:
                s = min(s, (self.center[k] - self.half_width - x[k]) / d[k])
        return max(s, 0.0)

    def bounding_box(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.half_width, c + self.half_width

    def corners(self) -> np.ndarray:
        cx, cy = self.center
        w = self.half_width
        return np.array([[cx - w, cy - w], [cx + w, cy - w], [cx + w, cy + w], [cx - w, cy + w]])

    def boundary_nodes(self, h, offset):
        # trace of the lattice lines on each side, plus the corners
        lo, hi = self.bounding_box()
        pts = [self.corners()]
        for axis in range(2):
            other = 1 - axis
            k0 = math.ceil((lo[axis] - offset[axis]) / h - 1e-9)
            k1 = math.floor((hi[axis] - offset[axis]) / h + 1e-9)
            t = offset[axis] + h * np.arange(k0, k1 + 1)
            t = t[(t > lo[axis] + 1e-9 * h) & (t < hi[axis] - 1e-9 * h)]
            for side in (lo[other], hi[other]):
                p = np.empty((len(t), 2))
                p[:, axis] = t
                p[:, other] = side
                pts.append(p)
        return _order_along_boundary(np.vstack(pts), self.center)

    def boundary_samples(self, n, rng):
        c = self.corners()
        side = rng.integers(0, 4, n)
        t = rng.random(n)[:, None]
        return c[side] + t * (c[(side + 1) % 4] - c[side])


@dataclass(frozen=True)
class Disk(Domain):
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("disk radius must be positive")

    def signed_distance(self, pts):
        return np.hypot(*(np.asarray(pts, dtype=float) - self.center).T) - self.radius

    def ray_exit(self, x, d):
        p = np.asarray(x, dtype=float) - self.center
        d = np.asarray(d, dtype=float)
        a = d @ d
        b = p @ d
        c = p @ p - self.radius**2
        disc = b * b - a * c
        return max((-b + math.sqrt(max(disc, 0.0))) / a, 0.0)

    def bounding_box(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius

    def boundary_nodes(self, h, offset):
        n = max(3, math.ceil(2 * math.pi * self.radius / h))
        th = 2 * math.pi * np.arange(n) / n
        return np.asarray(self.center) + self.radius * np.column_stack([np.cos(th), np.sin(th)])

    def boundary_samples(self, n, rng):
        th = rng.uniform(0, 2 * math.pi, n)
        return np.asarray(self.center) + self.radius * np.column_stack([np.cos(th), np.sin(th)])


@dataclass(frozen=True)
class ConvexPolygon(Domain):
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise DomainError("polygon needs at least three 2D vertices")
        e = np.roll(v, -1, axis=0) - v
        turn = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if not np.all(turn > 0):
            raise DomainError("polygon vertices must be strictly convex and counter-clockwise")

    @property
    def _v(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    def _halfplanes(self):
        v = self._v
        e = np.roll(v, -1, axis=0) - v
        n = np.column_stack([e[:, 1], -e[:, 0]])
        n /= np.hypot(n[:, 0], n[:, 1])[:, None]
        return n, np.einsum("ij,ij->i", n, v)

    def signed_distance(self, pts):
        pts = np.asarray(pts, dtype=float)
        n, c = self._halfplanes()
        plane = pts @ n.T - c
        inside = plane.max(axis=1)
        # exterior distance: distance to the closest edge segment
        v = self._v
        w = np.roll(v, -1, axis=0)
        seg = w - v
        t = np.clip(((pts[:, None, :] - v) * seg).sum(-1) / (seg * seg).sum(-1), 0, 1)
        proj = v + t[..., None] * seg
        dist = np.hypot(*(pts[:, None, :] - proj).transpose(2, 0, 1)).min(axis=1)
        return np.where(inside > 0, dist, inside)

    def ray_exit(self, x, d):
        n, c = self._halfplanes()
        nd = n @ np.asarray(d, dtype=float)
        slack = c - n @ np.asarray(x, dtype=float)
        pos = nd > 0
        if not pos.any():
            return math.inf
        return max(float(np.min(slack[pos] / nd[pos])), 0.0)

    def bounding_box(self):
        v = self._v
        return v.min(axis=0), v.max(axis=0)

    def boundary_nodes(self, h, offset):
        v = self._v
        out = []
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            m = max(1, math.ceil(np.hypot(*(b - a)) / h))
            t = np.arange(m)[:, None] / m
            out.append(a + t * (b - a))
        return np.vstack(out)

    def boundary_samples(self, n, rng):
        v = self._v
        w = np.roll(v, -1, axis=0)
        lengths = np.hypot(*(w - v).T)
        side = rng.choice(len(v), n, p=lengths / lengths.sum())
        t = rng.random(n)[:, None]
        return v[side] + t * (w[side] - v[side])


def _order_along_boundary(pts: np.ndarray, center) -> np.ndarray:
    ang = np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
    return pts[np.argsort(ang, kind="stable")]


@dataclass(eq=False)
class NodalSet:
    """Interior lattice nodes followed by boundary nodes.

    Node ids ``0..n_interior-1`` are interior nodes in row-major lattice
    order; the remaining ids are boundary nodes ordered along the boundary.
    """

    domain: Domain
    h: float
    offset: tuple[float, float]
    points: np.ndarray
    lattice: np.ndarray
    n_interior: int
    _lookup: dict = field(default_factory=dict, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.points.setflags(write=False)
        self.lattice.setflags(write=False)
        self._lattice_id = {(int(a), int(b)): i for i, (a, b) in enumerate(self.lattice)}
        self._lookup = {self._key(p): i for i, p in enumerate(self.points)}

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def interior(self) -> np.ndarray:
        return self.points[: self.n_interior]

    @property
    def boundary(self) -> np.ndarray:
        return self.points[self.n_interior :]

    @property
    def interior_ids(self) -> np.ndarray:
        return np.arange(self.n_interior)

    @property
    def boundary_ids(self) -> np.ndarray:
        return np.arange(self.n_interior, self.n)

    def is_interior(self, node: int) -> bool:
        return 0 <= node < self.n_interior

    def lattice_id(self, z) -> int | None:
        """Id of the interior node at integer lattice coordinates ``z``."""
        return self._lattice_id.get((int(z[0]), int(z[1])))

    def _key(self, p):
        s = 1e7 / self.h
        return (round(float(p[0]) * s), round(float(p[1]) * s))

    def node_at(self, p) -> int | None:
        """Id of the node located at point ``p`` (to ~1e-7 h), if any."""
        return self._lookup.get(self._key(p))

    def interpolate(self, func) -> "np.ndarray":
        """Nodal values of a vectorized field ``func(points) -> values``."""
        return np.asarray(func(self.points), dtype=float)


def generate_nodal_set(domain: Domain, h: float, offset=(0.0, 0.0)) -> NodalSet:
    """Lattice ``offset + h Z^2`` restricted to nodes at distance >= h/2 from
    the boundary, plus boundary nodes with spacing at most ``h``."""
    if not h > 0:
        raise DomainError("nodal spacing h must be positive")
    offset = (float(offset[0]), float(offset[1]))
    lo, hi = domain.bounding_box()
    k0 = np.floor((lo - offset) / h).astype(int)
    k1 = np.ceil((hi - offset) / h).astype(int)
    i, j = np.meshgrid(np.arange(k0[0], k1[0] + 1), np.arange(k0[1], k1[1] + 1))
    z = np.column_stack([i.ravel(), j.ravel()])  # row-major: x fastest, then y
    pts = np.asarray(offset) + h * z
    keep = domain.signed_distance(pts) <= -0.5 * h
    if not keep.any():
        raise DomainError(f"empty interior: h={h} is too large for the domain")
    z, pts = z[keep], pts[keep]
    bnd = domain.boundary_nodes(h, offset)
    points = np.vstack([pts, bnd])
    lattice = z.astype(np.int64)
    return NodalSet(domain, float(h), offset, points, lattice, len(pts))


def boundary_clip(nodes: NodalSet, x, e) -> tuple[float, float]:
    """Fractions (rho1, rho2) in (0, 1] such that x + rho1 h e and
    x - rho2 h e are the farthest points of the closed domain along +-e."""
    x = np.asarray(x, dtype=float)
    d = nodes.h * np.asarray(e, dtype=float)
    if not np.any(d):
        raise DomainError("direction must be nonzero")
    dom = nodes.domain
    rho1 = _snap(dom.ray_exit(x, d))
    rho2 = _snap(dom.ray_exit(x, -d))
    return rho1, rho2


def _snap(s: float) -> float:
    # a full step landing on the boundary must not become rho = 1 - ulp
    return 1.0 if s >= 1.0 - 1e-10 else s

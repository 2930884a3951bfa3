"""Lower convex envelope of a nodal function.

The envelope is the lower hull of the lifted points ``(x_i, v_i)``.  It is
stored as a triangulation of the hull vertices together with one affine
plane per facet; nodes that are not hull vertices are classified as active
or inactive by comparing their value with the envelope.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .domain import NodalSet

log = logging.getLogger(__name__)

ACTIVE_RTOL = 1e-10


class EnvelopeError(ValueError):
    pass


@dataclass(eq=False)
class NodalFunction:
    nodes: NodalSet
    values: np.ndarray

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.values.shape != (self.nodes.n,):
            raise ValueError(f"expected {self.nodes.n} nodal values, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("nodal values must be finite")

    @classmethod
    def interpolate(cls, nodes: NodalSet, func) -> "NodalFunction":
        """Nodal interpolant ``N_h func``."""
        return cls(nodes, nodes.interpolate(func))

    @property
    def interior_values(self) -> np.ndarray:
        return self.values[: self.nodes.n_interior]

    def copy(self) -> "NodalFunction":
        return NodalFunction(self.nodes, self.values.copy())

    def _other(self, other):
        if isinstance(other, NodalFunction):
            if other.nodes is not self.nodes:
                raise ValueError("nodal functions live on different nodal sets")
            return other.values
        return other

    def __add__(self, other):
        return NodalFunction(self.nodes, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return NodalFunction(self.nodes, self.values - self._other(other))

    def __rsub__(self, other):
        return NodalFunction(self.nodes, self._other(other) - self.values)

    def __mul__(self, alpha):
        return NodalFunction(self.nodes, float(alpha) * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return NodalFunction(self.nodes, -self.values)


def lower_hull(points: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Counter-clockwise triangles of the lower convex hull of ``(points, values)``.

    A point far above the data is appended so the 3D hull is never flat, which
    keeps affine and constant data well posed; facets through it are dropped.
    """
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(points)
    if n < 3:
        raise EnvelopeError("need at least three nodes")
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise EnvelopeError("nodes are collinear")
    span = max(np.ptp(values), np.ptp(points[:, 0]), np.ptp(points[:, 1]))
    apex = np.append(points.mean(axis=0), values.max() + span + 1.0)
    lifted = np.vstack([np.column_stack([points, values]), apex])
    try:
        hull = ConvexHull(lifted, qhull_options="Qt")
    except QhullError as exc:  # pragma: no cover - guarded by the rank check
        raise EnvelopeError(f"lower hull construction failed: {exc}") from exc
    simp = hull.simplices
    keep = ~(simp == n).any(axis=1) & (hull.equations[:, 2] < -1e-12)
    tris = simp[keep].astype(np.int64)
    p = points[tris]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (
        p[:, 2, 0] - p[:, 0, 0]
    )
    cw = area2 < 0
    tris[cw] = tris[cw][:, [0, 2, 1]]
    return tris


def facet_planes(points, values, tris):
    """Gradient and offset of the affine interpolant on each triangle."""
    p = points[tris]
    v = values[tris]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    dv1 = v[:, 1] - v[:, 0]
    dv2 = v[:, 2] - v[:, 0]
    gx = (dv1 * e2[:, 1] - dv2 * e1[:, 1]) / det
    gy = (e1[:, 0] * dv2 - e2[:, 0] * dv1) / det
    grad = np.column_stack([gx, gy])
    off = v[:, 0] - np.einsum("ij,ij->i", grad, p[:, 0])
    return grad, off


class TriangleLocator:
    """Uniform bucket grid for point location in a planar triangulation."""

    def __init__(self, points: np.ndarray, tris: np.ndarray):
        self.points = points
        self.tris = tris
        P = points[tris]
        lo = P.min(axis=1)
        hi = P.max(axis=1)
        self.origin = points.min(axis=0)
        span = np.maximum(points.max(axis=0) - self.origin, 1e-300)
        self.k = k = max(1, int(np.sqrt(len(tris) / 2)))
        self.cell = span / k
        i0 = np.clip(np.floor((lo - self.origin) / self.cell).astype(np.int64), 0, k - 1)
        i1 = np.clip(np.floor((hi - self.origin) / self.cell).astype(np.int64), 0, k - 1)
        w = i1[:, 0] - i0[:, 0] + 1
        counts = w * (i1[:, 1] - i0[:, 1] + 1)
        tid = np.repeat(np.arange(len(tris)), counts)
        r = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        cx = i0[tid, 0] + r % w[tid]
        cy = i0[tid, 1] + r // w[tid]
        cid = cy * k + cx
        order = np.argsort(cid, kind="stable")
        self.cell_tris = tid[order]
        self.ptr = np.searchsorted(cid[order], np.arange(k * k + 1))

    def locate(self, q: np.ndarray, tol: float = 1e-10):
        """Containing triangle and barycentric coordinates for each query
        point; triangle index -1 when the point is outside."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        c = np.floor((q - self.origin) / self.cell).astype(np.int64)
        c = np.clip(c, 0, self.k - 1)
        cid = c[:, 1] * self.k + c[:, 0]
        start = self.ptr[cid]
        cnt = self.ptr[cid + 1] - start
        qid = np.repeat(np.arange(len(q)), cnt)
        r = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        cand = self.cell_tris[start[qid] + r]
        bary = barycentric(self.points[self.tris[cand]], q[qid])
        score = bary.min(axis=1)
        best_tri = np.full(len(q), -1, dtype=np.int64)
        best_score = np.full(len(q), -np.inf)
        best_bary = np.zeros((len(q), 3))
        order = np.lexsort((score, qid))
        last = np.r_[qid[order][1:] != qid[order][:-1], True] if len(order) else order.astype(bool)
        sel = order[last]
        best_tri[qid[sel]] = cand[sel]
        best_score[qid[sel]] = score[sel]
        best_bary[qid[sel]] = bary[sel]
        best_tri[best_score < -tol] = -1
        return best_tri, best_bary


def barycentric(tri_pts: np.ndarray, q: np.ndarray) -> np.ndarray:
    a, b, c = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    v0 = b - a
    v1 = c - a
    v2 = q - a
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


class LowerEnvelope:
    """Triangulated lower convex envelope with per-facet planes.

    Attributes
    ----------
    triangles : (m, 3) int array, counter-clockwise facets over node ids
    gradients : (m, 2) facet gradients
    offsets : (m,) facet offsets, so facet T is ``x -> gradients[T] @ x + offsets[T]``
    hull_values : envelope values at every node
    active : nodes with ``|v - envelope| <= 1e-10 (1 + |v|)``
    """

    def __init__(self, nodes: NodalSet, values: np.ndarray, triangles: np.ndarray):
        self.nodes = nodes
        self.values = np.array(values, dtype=float)
        self._topo = None
        self._set_triangles(np.asarray(triangles, dtype=np.int64))

    @property
    def points(self) -> np.ndarray:
        return self.nodes.points

    @property
    def scale(self) -> float:
        return 1.0 + float(np.max(np.abs(self.values)))

    def _set_triangles(self, tris):
        self.triangles = tris
        self.gradients, self.offsets = facet_planes(self.points, self.values, tris)
        self._locator = None
        self._star = None
        self.is_vertex = np.zeros(self.nodes.n, dtype=bool)
        self.is_vertex[tris.ravel()] = True
        hv = self.values.copy()
        others = np.flatnonzero(~self.is_vertex)
        if len(others):
            hv[others] = self.evaluate(self.points[others])
        self.hull_values = hv
        self.active = np.abs(self.values - hv) <= ACTIVE_RTOL * (1.0 + np.abs(self.values))

    @property
    def locator(self) -> TriangleLocator:
        if self._locator is None:
            self._locator = TriangleLocator(self.points, self.triangles)
        return self._locator

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tri, _ = self.locator.locate(x, tol=1e-9)
        if np.any(tri < 0):
            bad = x[np.flatnonzero(tri < 0)[0]]
            raise EnvelopeError(f"point {tuple(bad)} lies outside the convex hull of the nodes")
        # max over the planes of the containing facet and its neighbours is
        # the plane of the containing facet, up to rounding on shared edges
        return np.einsum("ij,ij->i", self.gradients[tri], x) + self.offsets[tri]

    def star(self, node: int) -> np.ndarray:
        """Facets incident to ``node`` in counter-clockwise order."""
        ptr, facets = self.star_arrays()
        return facets[ptr[node] : ptr[node + 1]]

    def star_arrays(self):
        """CSR arrays ``(ptr, facets)`` of the counter-clockwise node stars."""
        if self._star is None:
            tris = self.triangles
            m = len(tris)
            inc_node = tris.ravel()
            inc_tri = np.repeat(np.arange(m), 3)
            cen = self.points[tris].mean(axis=1)
            d = cen[inc_tri] - self.points[inc_node]
            ang = np.arctan2(d[:, 1], d[:, 0])
            order = np.lexsort((ang, inc_node))
            ptr = np.searchsorted(inc_node[order], np.arange(self.nodes.n + 1))
            self._star = (ptr, inc_tri[order])
        return self._star

    def interior_edges(self):
        """Edges shared by two facets: ``(a, b, left_facet, right_facet)``
        where the left facet contains the directed edge a->b."""
        tris = self.triangles
        m = len(tris)
        a = tris.ravel()
        b = tris[:, [1, 2, 0]].ravel()
        t = np.repeat(np.arange(m), 3)
        n = self.nodes.n
        key = np.minimum(a, b) * n + np.maximum(a, b)
        order = np.argsort(key, kind="stable")
        ks = key[order]
        pair = np.flatnonzero(ks[1:] == ks[:-1])
        i, j = order[pair], order[pair + 1]
        return a[i], b[i], t[i], t[j]

    def convexity_defect(self) -> float:
        """Largest amount by which an opposite vertex dips below a facet plane
        across an interior edge (0 for a locally convex surface)."""
        a, b, tl, tr = self.interior_edges()
        if len(a) == 0:
            return 0.0
        opp = self.triangles[tr]
        d = opp[np.arange(len(opp)), np.argmax((opp != a[:, None]) & (opp != b[:, None]), axis=1)]
        plane = np.einsum("ij,ij->i", self.gradients[tl], self.points[d]) + self.offsets[tl]
        return float(max(0.0, np.max(plane - self.values[d])))

    def to_nodal(self) -> NodalFunction:
        """Envelope values at the nodes as a nodal function."""
        return NodalFunction(self.nodes, self.hull_values)

    def write_off(self, path) -> None:
        """Write the induced mesh as an OFF surface (x, y, value)."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("OFF\n")
            fh.write(f"{self.nodes.n} {len(self.triangles)} 0\n")
            for (x, y), v in zip(self.points, self.hull_values):
                fh.write(f"{x:.17g} {y:.17g} {v:.17g}\n")
            for a, b, c in self.triangles:
                fh.write(f"3 {a} {b} {c}\n")

    # -- incremental maintenance -------------------------------------------

    def update_value(self, node: int, new_value: float) -> "LowerEnvelope":
        """Change one nodal value and repair the envelope in place."""
        new_value = float(new_value)
        if not np.isfinite(new_value):
            raise EnvelopeError("nodal values must be finite")
        if new_value == self.values[node]:
            return self
        try:
            self._local_update(node, new_value)
        except _LocalRepairFailed as exc:
            log.debug("local envelope repair failed at node %d (%s); rebuilding", node, exc)
            self.values[node] = new_value
            self._topo = None
            self._set_triangles(lower_hull(self.points, self.values))
        return self

    def _local_update(self, node, new_value):
        topo = self._topo
        if topo is None:
            topo = self._topo = _Topology(self.points, self.triangles)
        tol = 1e-13 * self.scale
        old_value = self.values[node]
        try:
            if topo.vtris.get(node):
                topo.delete_vertex(node, self.values)
            self.values[node] = new_value
            below = topo.height_above_surface(node, self.values)
            if below < -tol:
                topo.insert_vertex(node, self.values, tol)
        except _LocalRepairFailed:
            self.values[node] = old_value
            self._topo = None
            raise
        self._set_triangles(topo.array())
        if self.convexity_defect() > 1e-11 * self.scale:
            self._topo = None
            raise _LocalRepairFailed("surface not locally convex after repair")


class _LocalRepairFailed(RuntimeError):
    pass


class _Topology:
    """Mutable triangle/edge incidence used by the flip-based updates."""

    def __init__(self, points, tris):
        self.pts = points
        self.tris: dict[int, tuple[int, int, int]] = {}
        self.edge: dict[tuple[int, int], int] = {}
        self.vtris: dict[int, set] = defaultdict(set)
        self._next = 0
        for a, b, c in tris:
            self.add(int(a), int(b), int(c))

    def add(self, a, b, c):
        tid = self._next
        self._next += 1
        self.tris[tid] = (a, b, c)
        for e in ((a, b), (b, c), (c, a)):
            self.edge[e] = tid
        for v in (a, b, c):
            self.vtris[v].add(tid)
        return tid

    def remove(self, tid):
        a, b, c = self.tris.pop(tid)
        for e in ((a, b), (b, c), (c, a)):
            if self.edge.get(e) == tid:
                del self.edge[e]
        for v in (a, b, c):
            self.vtris[v].discard(tid)
            if not self.vtris[v]:
                del self.vtris[v]

    def array(self):
        return np.array(list(self.tris.values()), dtype=np.int64).reshape(-1, 3)

    def orient(self, a, b, c):
        p = self.pts
        return (p[b, 0] - p[a, 0]) * (p[c, 1] - p[a, 1]) - (p[b, 1] - p[a, 1]) * (p[c, 0] - p[a, 0])

    def plane_at(self, tri, q, values):
        lam = barycentric(self.pts[list(tri)][None], self.pts[q][None])[0]
        return float(lam @ values[list(tri)])

    def height_above_surface(self, node, values):
        """Value at ``node`` minus the current surface below it."""
        arr = self.array()
        lam = barycentric(self.pts[arr], np.broadcast_to(self.pts[node], (len(arr), 2)))
        t = int(np.argmax(lam.min(axis=1)))
        if lam[t].min() < -1e-9:
            raise _LocalRepairFailed("node outside the triangulated region")
        return float(values[node] - lam[t] @ values[arr[t]])

    def delete_vertex(self, i, values):
        star = list(self.vtris[i])
        nxt = {}
        for tid in star:
            a, b, c = self.tris[tid]
            if a == i:
                nxt[b] = c
            elif b == i:
                nxt[c] = a
            else:
                nxt[a] = b
        start = next(iter(nxt))
        link = [start]
        while True:
            v = nxt.get(link[-1])
            if v is None:
                raise _LocalRepairFailed("open star (hull vertex)")
            if v == start:
                break
            link.append(v)
            if len(link) > len(nxt):
                raise _LocalRepairFailed("malformed star")
        if len(link) != len(nxt):
            raise _LocalRepairFailed("malformed star")
        poly = self.pts[link]
        hole_area = 0.5 * np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
        for tid in star:
            self.remove(tid)
        # hidden nodes inside the hole may surface once i is gone
        lo, hi = poly.min(axis=0), poly.max(axis=0)
        cand = np.flatnonzero(np.all((self.pts > lo) & (self.pts < hi), axis=1))
        cand = np.array([c for c in cand if c != i and c not in self.vtris], dtype=np.int64)
        if len(cand):
            cand = cand[_strictly_inside(self.pts[cand], poly)]
        if len(link) == 3 and len(cand) == 0:
            self.add(*link)
            return
        ids = np.concatenate([np.asarray(link, dtype=np.int64), cand])
        pts = self.pts[ids]
        local = lower_hull(pts, values[ids])
        cen = pts[local].mean(axis=1)
        inside = _in_polygon(cen, poly)
        kept = local[inside]
        p = pts[kept]
        area = 0.5 * np.sum(
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
        )
        if abs(area - hole_area) > 1e-12 * max(abs(hole_area), 1e-300) + 1e-14:
            raise _LocalRepairFailed("hole retriangulation does not tile the star")
        # every link edge must survive, otherwise a collinear link vertex
        # would leave a hanging node on the new facets
        directed = {(int(ids[x]), int(ids[y])) for t in kept for x, y in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))}
        for k in range(len(link)):
            if (link[k], link[(k + 1) % len(link)]) not in directed:
                raise _LocalRepairFailed("hole retriangulation drops a link vertex")
        for a, b, c in kept:
            self.add(int(ids[a]), int(ids[b]), int(ids[c]))

    def insert_vertex(self, i, values, tol):
        arr_ids = np.array(list(self.tris.keys()))
        arr = np.array([self.tris[t] for t in arr_ids])
        lam = barycentric(self.pts[arr], np.broadcast_to(self.pts[i], (len(arr), 2)))
        k = int(np.argmax(lam.min(axis=1)))
        tid = int(arr_ids[k])
        a, b, c = self.tris[tid]
        bary = lam[k]
        eps = 1e-10
        stack = []
        on_edge = np.flatnonzero(bary <= eps)
        if len(on_edge) == 0:
            self.remove(tid)
            for x, y in ((a, b), (b, c), (c, a)):
                self.add(i, x, y)
                stack.append((x, y))
        elif len(on_edge) == 1:
            # on the edge opposite the vertex with zero weight
            tri = (a, b, c)
            z = int(on_edge[0])
            x, y, w = tri[(z + 1) % 3], tri[(z + 2) % 3], tri[z]
            other = self.edge.get((y, x))
            self.remove(tid)
            self.add(i, w, x)
            self.add(i, y, w)
            stack += [(w, x), (y, w)]
            if other is not None:
                d = self._apex(other, y, x)
                self.remove(other)
                self.add(i, x, d)
                self.add(i, d, y)
                stack += [(x, d), (d, y)]
        else:
            raise _LocalRepairFailed("inserted node coincides with a vertex")
        self._flip_link(i, stack, values, tol)

    def _apex(self, tid, a, b):
        t = self.tris[tid]
        for v in t:
            if v != a and v != b:
                return v
        raise _LocalRepairFailed("degenerate triangle")

    def _link_edges(self, i):
        out = []
        for tid in self.vtris.get(i, ()):
            a, b, c = self.tris[tid]
            out.append((b, c) if a == i else (c, a) if b == i else (a, b))
        return out

    def _flip_link(self, i, stack, values, tol):
        # a reflex edge that cannot be flipped yet is retried once its
        # neighbours have been processed
        while True:
            if not self._flip_pass(i, stack, values, tol):
                return
            stack = self._link_edges(i)

    def _flip_pass(self, i, stack, values, tol):
        guard = 0
        flipped = False
        while stack:
            guard += 1
            if guard > 100000:
                raise _LocalRepairFailed("flip loop did not terminate")
            a, b = stack.pop()
            t = self.edge.get((a, b))
            if t is None or i not in self.tris[t]:
                continue
            u = self.edge.get((b, a))
            if u is None:
                continue
            d = self._apex(u, b, a)
            if values[d] >= self.plane_at((i, a, b), d, values) - tol:
                continue
            if self.orient(i, a, d) > 0 and self.orient(i, d, b) > 0:
                self.remove(t)
                self.remove(u)
                self.add(i, a, d)
                self.add(i, d, b)
                stack += [(a, d), (d, b)]
                flipped = True
                continue
            r = a if self.orient(i, a, d) <= 0 else b
            ring = self.vtris.get(r, ())
            if len(ring) != 3:
                continue
            verts = set()
            for tid in ring:
                verts.update(self.tris[tid])
            if verts != {r, i, a, b, d} - ({a} if r == b else {b}) | {r}:
                continue
            new = (b, i, d) if r == a else (i, a, d)
            if values[r] <= self.plane_at(new, r, values) + tol:
                continue
            for tid in list(ring):
                self.remove(tid)
            self.add(*new)
            stack.append((d, b) if r == a else (a, d))
            flipped = True
        return flipped


def _strictly_inside(q, poly, tol=1e-12):
    """Points inside a simple polygon and not on any of its edges."""
    inside = _in_polygon(q, poly)
    a = poly
    b = np.roll(poly, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(a, b):
        seg = np.hypot(x1 - x0, y1 - y0)
        cross = (x1 - x0) * (q[:, 1] - y0) - (y1 - y0) * (q[:, 0] - x0)
        t = ((q[:, 0] - x0) * (x1 - x0) + (q[:, 1] - y0) * (y1 - y0)) / seg**2
        on = (np.abs(cross) <= tol * seg * seg) & (t >= -tol) & (t <= 1 + tol)
        inside &= ~on
    return inside


def _in_polygon(q, poly):
    x, y = q[:, 0], q[:, 1]
    inside = np.zeros(len(q), dtype=bool)
    px, py = poly[:, 0], poly[:, 1]
    qx, qy = np.roll(px, -1), np.roll(py, -1)
    for x0, y0, x1, y1 in zip(px, py, qx, qy):
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < xint)
    return inside


def build_envelope(v: NodalFunction) -> LowerEnvelope:
    """Lower convex envelope of a nodal function."""
    tris = lower_hull(v.nodes.points, v.values)
    return LowerEnvelope(v.nodes, v.values, tris)


def evaluate_envelope(env: LowerEnvelope, x):
    """Envelope value at a point (scalar) or at an array of points."""
    x = np.asarray(x, dtype=float)
    out = env.evaluate(x)
    return float(out[0]) if x.ndim == 1 else out


def update_value(env: LowerEnvelope, node: int, new_value: float) -> LowerEnvelope:
    return env.update_value(node, new_value)

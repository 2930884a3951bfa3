"""Subdifferential cells of nodal functions and their areas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import DomainError, NodalSet
from .envelope import LowerEnvelope, NodalFunction


@dataclass
class SubdiffCell:
    node: int
    polygon: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    measure: float = 0.0

    @property
    def empty(self) -> bool:
        return len(self.polygon) == 0


def polygon_area(polygon) -> float:
    """Shoelace area of a convex counter-clockwise polygon (0 if degenerate)."""
    p = np.asarray(polygon, dtype=float).reshape(-1, 2)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    a = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    return max(a, 0.0)


def convex_hull_2d(pts) -> np.ndarray:
    """Counter-clockwise hull by the monotone chain; collinear points dropped."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return pts
    P = sorted(set(map(tuple, pts)))
    if len(P) <= 2:
        return np.array(P)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in P:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(P):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def star_measures(env: LowerEnvelope) -> np.ndarray:
    """Cell areas at all nodes from the ordered star gradients.

    For a vertex of the envelope the facet gradients taken counter-clockwise
    around it are the vertices of its cell, so the shoelace sum over that
    cyclic sequence is the cell area.  Non-vertex nodes get 0; boundary nodes
    are returned as well but carry no meaning for the scheme.
    """
    ptr, facets = env.star_arrays()
    g = env.gradients[facets]
    n = len(ptr) - 1
    counts = np.diff(ptr)
    owner = np.repeat(np.arange(n), counts)
    # successor index within each node's cyclic sequence
    idx = np.arange(len(facets))
    nxt = idx + 1
    last = ptr[1:] - 1
    nxt[last[counts > 0]] = ptr[:-1][counts > 0]
    # subtract a per-node reference point to limit cancellation
    ref = np.zeros((n, 2))
    first = ptr[:-1][counts > 0]
    ref[counts > 0] = g[first]
    q = g - ref[owner]
    qn = q[nxt]
    terms = q[:, 0] * qn[:, 1] - qn[:, 0] * q[:, 1]
    area = 0.5 * np.bincount(owner, weights=terms, minlength=n)
    area[~env.active] = 0.0
    return np.maximum(area, 0.0)


def interior_measures(env: LowerEnvelope) -> np.ndarray:
    return star_measures(env)[: env.nodes.n_interior]


def cell_from_star(env: LowerEnvelope, v: NodalFunction, node: int) -> SubdiffCell:
    """Cell at an interior node as the hull of its star gradients."""
    nodes = env.nodes
    if not nodes.is_interior(node):
        raise DomainError(f"node {node} is not an interior node")
    if not env.active[node]:
        return SubdiffCell(node)
    if env.is_vertex[node]:
        grads = env.gradients[env.star(node)]
    else:
        # active but hidden on a facet or edge: the cell is the set of
        # gradients of the facets containing the point
        x = nodes.points[node]
        tri, bary = env.locator.locate(x[None], tol=1e-9)
        t = int(tri[0])
        grads = env.gradients[[t]]
        on_edge = bary[0] <= 1e-9
        if on_edge.any():
            k = int(np.argmax(on_edge))
            a, b = env.triangles[t][(k + 1) % 3], env.triangles[t][(k + 2) % 3]
            other = _facet_across(env, b, a)
            if other is not None:
                grads = env.gradients[[t, other]]
    poly = convex_hull_2d(grads)
    return SubdiffCell(node, poly, polygon_area(poly))


def _facet_across(env, a, b):
    tris = env.triangles
    hit = np.flatnonzero(
        ((tris[:, 0] == a) & (tris[:, 1] == b)) | ((tris[:, 1] == a) & (tris[:, 2] == b)) | ((tris[:, 2] == a) & (tris[:, 0] == b))
    )
    return int(hit[0]) if len(hit) else None


def halfplane_intersection(normals: np.ndarray, rhs: np.ndarray, box: float | None = None) -> np.ndarray:
    """Intersection of half-planes ``{p : n_k . p <= c_k}`` as a CCW polygon.

    Constraints are sorted by angle and swept with a deque; parallel
    constraints keep the tighter one.  Raises ``ValueError`` when the
    intersection is unbounded, unless a bounding box half-width is given.
    Returns an empty array for an empty intersection.
    """
    normals = np.asarray(normals, dtype=float).reshape(-1, 2)
    rhs = np.asarray(rhs, dtype=float).ravel()
    if box is not None:
        normals = np.vstack([normals, [[1, 0], [0, 1], [-1, 0], [0, -1]]])
        rhs = np.concatenate([rhs, [box] * 4])
    norm = np.hypot(normals[:, 0], normals[:, 1])
    keep = norm > 0
    if np.any(~keep & (rhs < 0)):
        return np.zeros((0, 2))
    n = normals[keep] / norm[keep, None]
    c = rhs[keep] / norm[keep]
    ang = np.arctan2(n[:, 1], n[:, 0])
    if len(ang) == 0 or _max_gap(ang) >= math.pi - 1e-15:
        raise ValueError("node on hull boundary: unbounded subdifferential")
    order = np.argsort(ang, kind="stable")
    n, c, ang = n[order], c[order], ang[order]
    # among (nearly) parallel constraints keep the smallest rhs
    group = np.cumsum(np.r_[True, np.diff(ang) > 1e-12]) - 1
    if len(ang) > 1 and ang[0] + 2 * math.pi - ang[-1] <= 1e-12:
        group[group == group[-1]] = 0
    best = np.lexsort((c, group))
    pick = best[np.r_[True, np.diff(group[best]) != 0]]
    pick = np.sort(pick)
    n, c = n[pick], c[pick]

    def meet(i, j):
        det = n[i, 0] * n[j, 1] - n[i, 1] * n[j, 0]
        return np.array([(c[i] * n[j, 1] - n[i, 1] * c[j]) / det, (n[i, 0] * c[j] - c[i] * n[j, 0]) / det])

    def outside(k, p):
        return n[k] @ p > c[k] + 1e-14 * (1.0 + abs(c[k]))

    dq: list[int] = []
    pts: list[np.ndarray] = []  # pts[k] = meet(dq[k], dq[k+1])
    for k in range(len(n)):
        while len(dq) >= 2 and outside(k, pts[-1]):
            dq.pop()
            pts.pop()
        while len(dq) >= 2 and outside(k, pts[0]):
            dq.pop(0)
            pts.pop(0)
        if dq:
            det = n[dq[-1], 0] * n[k, 1] - n[dq[-1], 1] * n[k, 0]
            if det <= 1e-15:
                # turn of at least pi: the region collapsed
                if det < -1e-15 or n[dq[-1]] @ n[k] < 0:
                    return np.zeros((0, 2))
                continue
            pts.append(meet(dq[-1], k))
        dq.append(k)
    while len(dq) >= 3 and outside(dq[0], pts[-1]):
        dq.pop()
        pts.pop()
    while len(dq) >= 3 and outside(dq[-1], pts[0]):
        dq.pop(0)
        pts.pop(0)
    if len(dq) < 3:
        return np.zeros((0, 2))
    det = n[dq[-1], 0] * n[dq[0], 1] - n[dq[-1], 1] * n[dq[0], 0]
    if det <= 0:
        return np.zeros((0, 2))
    pts.append(meet(dq[-1], dq[0]))
    poly = np.array(pts)
    # every vertex must satisfy all constraints, otherwise the region is empty
    viol = poly @ n.T - c
    if np.any(viol > 1e-9 * (1.0 + np.abs(c).max())):
        return np.zeros((0, 2))
    return poly


def _max_gap(ang):
    a = np.sort(ang)
    gaps = np.diff(np.r_[a, a[0] + 2 * math.pi])
    return float(gaps.max())


def cell_oracle(nodes: NodalSet, v: NodalFunction, node: int, local: int = 48) -> SubdiffCell:
    """Cell at ``node`` straight from its defining inequalities against
    every other node.

    The half-planes of the ``local`` nearest nodes are intersected first;
    the result is kept only if every remaining inequality holds at all of
    its vertices, in which case it equals the full intersection.  Otherwise
    all constraints are intersected at once.
    """
    if not nodes.is_interior(node):
        raise DomainError(f"node {node} is not an interior node")
    x = nodes.points
    vals = v.values
    others = np.flatnonzero(np.arange(nodes.n) != node)
    dx = x[others] - x[node]
    dv = vals[others] - vals[node]
    poly = None
    if len(others) > local:
        near = np.argsort(np.einsum("ij,ij->i", dx, dx), kind="stable")[:local]
        try:
            cand = halfplane_intersection(dx[near], dv[near])
        except ValueError:
            cand = None
        if cand is not None and len(cand):
            slack = 1e-12 * (1.0 + np.abs(dv).max())
            if np.all(cand @ dx.T <= dv + slack):
                poly = cand
    if poly is None:
        poly = halfplane_intersection(dx, dv)
    if len(poly) == 0:
        return SubdiffCell(node)
    return SubdiffCell(node, poly, polygon_area(poly))

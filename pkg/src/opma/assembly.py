"""Background triangulation and the hat-function load vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .domain import DomainError, NodalSet
from .envelope import lower_hull

# symmetric 7-point rule, exact for polynomials of degree 5
# (barycentric coordinates, weights summing to 1)
_A1, _B1, _W1 = 0.059715871789770, 0.470142064105115, 0.132394152788506
_A2, _B2, _W2 = 0.797426985353087, 0.101286507323456, 0.125939180544827
QUAD_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
QUAD_W = np.array([0.225, _W1, _W1, _W1, _W2, _W2, _W2])

# ways to break the diagonal ties of the lattice
PATTERNS = ("delaunay", "diagonal", "antidiagonal", "unionjack")


@dataclass(eq=False)
class BackgroundMesh:
    nodes: NodalSet
    triangles: np.ndarray
    areas: np.ndarray
    shape_ratio: float

    def star(self, node: int) -> np.ndarray:
        """Triangles forming the support of the hat function at ``node``."""
        return np.flatnonzero((self.triangles == node).any(axis=1))


def _orient(points, tris):
    p = points[tris]
    a2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    tris = tris.copy()
    tris[a2 < 0] = tris[a2 < 0][:, [0, 2, 1]]
    return tris, 0.5 * np.abs(a2)


def _shape_ratio(points, tris, areas):
    """max over triangles of diameter / inradius."""
    p = points[tris]
    ed = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
    inradius = 2 * areas / ed.sum(axis=1)
    return float(np.max(ed.max(axis=1) / inradius))


def build_background_mesh(nodes: NodalSet, pattern: str = "delaunay") -> BackgroundMesh:
    """Delaunay triangulation of all nodes.

    Lattice squares have four cocircular corners, so their diagonal is not
    determined by the Delaunay property.  ``pattern="delaunay"`` leaves the
    choice to qhull; ``"diagonal"``/``"antidiagonal"`` break every tie the
    same way by lifting with a slightly sheared paraboloid, which yields a
    Delaunay triangulation with all diagonals parallel to (1,1) or (1,-1).
    ``"unionjack"`` lowers the lift at lattice points with even ``z1 + z2``,
    so every square takes the diagonal through its even corners: even nodes
    get eight triangles and odd nodes four.
    """
    pts = nodes.points
    if pattern not in PATTERNS:
        raise ValueError(f"unknown mesh pattern {pattern!r}")
    if pattern == "delaunay":
        try:
            tris = Delaunay(pts).simplices.astype(np.int64)
        except QhullError as exc:
            raise DomainError(f"cannot triangulate nodes: {exc}") from exc
    else:
        q = pts - pts.mean(axis=0)
        lift = (q**2).sum(axis=1)
        if pattern == "unionjack":
            z = (pts - np.asarray(nodes.offset)) / nodes.h
            zr = np.round(z)
            on_lattice = np.all(np.abs(z - zr) < 1e-9, axis=1)
            even = on_lattice & (zr.sum(axis=1).astype(np.int64) % 2 == 0)
            lift = lift - 1e-3 * nodes.h**2 * even
        else:
            sign = -1.0 if pattern == "diagonal" else 1.0
            lift = lift + sign * 1e-3 * q[:, 0] * q[:, 1]
        tris = lower_hull(pts, lift)
    tris, areas = _orient(pts, tris)
    keep = areas > 1e-14 * nodes.h**2
    tris, areas = tris[keep], areas[keep]
    return BackgroundMesh(nodes, tris, areas, _shape_ratio(pts, tris, areas))


def _sample_bary(k: int) -> np.ndarray:
    """Barycentric grid with step 1/k (vertices included)."""
    out = [(i / k, j / k, 1 - (i + j) / k) for i in range(k + 1) for j in range(k + 1 - i)]
    return np.array(out)


def _refine_bary(levels: int) -> tuple[np.ndarray, np.ndarray]:
    """Sub-triangles of the reference triangle after uniform refinement,
    as barycentric vertex coordinates (s, 3, 3) plus their area fractions."""
    tris = [np.eye(3)]
    for _ in range(levels):
        nxt = []
        for t in tris:
            a, b, c = t
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            nxt += [np.array([a, ab, ca]), np.array([ab, b, bc]), np.array([ca, bc, c]), np.array([ab, bc, ca])]
        tris = nxt
    sub = np.array(tris)
    return sub, np.full(len(sub), 1.0 / len(sub))


def crossing_triangles(mesh: BackgroundMesh, curves, samples: int = 4) -> np.ndarray:
    """Mask of triangles on which some implicit curve function changes sign
    strictly between sample points."""
    mask = np.zeros(len(mesh.triangles), dtype=bool)
    if not curves:
        return mask
    bary = _sample_bary(samples)
    P = mesh.nodes.points[mesh.triangles]
    X = np.einsum("sk,tkd->tsd", bary, P)
    for phi in curves:
        val = np.asarray(phi(X.reshape(-1, 2)), dtype=float).reshape(X.shape[:2])
        mask |= (val.max(axis=1) > 0) & (val.min(axis=1) < 0)
    return mask


def _eval_f(f, X):
    val = np.asarray(f(X), dtype=float)
    bad = ~np.isfinite(val)
    if bad.any():
        p = X[np.flatnonzero(bad)[0]]
        raise FloatingPointError(f"load density is not finite at ({p[0]:.17g}, {p[1]:.17g})")
    return val


RULES = {
    "gauss7": (QUAD_BARY, QUAD_W),
    "centroid": (np.full((1, 3), 1 / 3), np.ones(1)),
}


def assemble_load(
    mesh: BackgroundMesh,
    f,
    singular_curves=(),
    refine_levels: int = 3,
    include_boundary: bool = False,
    rule: str = "gauss7",
) -> np.ndarray:
    """Loads ``f_i = int f phi_i`` at the interior nodes.

    ``f`` is a vectorized field.  ``rule`` is the per-triangle quadrature:
    the degree-5 seven-point rule or the one-point centroid rule.  Triangles
    crossed by one of the implicit ``singular_curves`` are refined
    ``refine_levels`` times before the rule is applied.  With
    ``include_boundary`` the loads of the boundary hats are returned as well
    (used to check partition of unity).
    """
    if rule not in RULES:
        raise ValueError(f"unknown quadrature rule {rule!r}")
    qbary, qweight = RULES[rule]
    nodes = mesh.nodes
    tris = mesh.triangles
    P = nodes.points[tris]
    out = np.zeros(nodes.n)

    def accumulate(sel, sub_bary, sub_frac):
        # sub_bary: (s, 3, 3) sub-triangle vertices in parent barycentrics
        qb = np.einsum("qk,skj->sqj", qbary, sub_bary).reshape(-1, 3)
        qw = (qweight[None, :] * sub_frac[:, None]).ravel()
        X = np.einsum("qj,tjd->tqd", qb, P[sel]).reshape(-1, 2)
        fv = _eval_f(f, X).reshape(len(sel), len(qb))
        contrib = mesh.areas[sel, None] * ((fv * qw) @ qb)
        np.add.at(out, tris[sel].ravel(), contrib.ravel())

    cross = crossing_triangles(mesh, list(singular_curves))
    plain = np.flatnonzero(~cross) if refine_levels > 0 else np.arange(len(tris))
    if len(plain):
        accumulate(plain, np.eye(3)[None], np.ones(1))
    if cross.any() and refine_levels > 0:
        sub, frac = _refine_bary(refine_levels)
        accumulate(np.flatnonzero(cross), sub, frac)
    return out if include_boundary else out[: nodes.n_interior]

"""Discrete error functionals: second differences, W^2_p, L-infinity and H^1."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import QUAD_BARY, QUAD_W
from .domain import DomainError, NodalSet, boundary_clip
from .envelope import LowerEnvelope, NodalFunction, build_envelope

NINE_POINT = ((1, 0), (0, 1), (1, 1), (1, -1))


@dataclass(frozen=True)
class StencilSet:
    directions: tuple = NINE_POINT

    def __post_init__(self):
        for e in self.directions:
            if tuple(e) == (0, 0):
                raise ValueError("stencil directions must be nonzero")


# -- value sources ---------------------------------------------------------


class _Source:
    """Values of a nodal function or a field at nodes and at arbitrary points."""

    def __init__(self, v, nodes: NodalSet, env: LowerEnvelope | None = None):
        self.nodes = nodes
        if isinstance(v, NodalFunction):
            if v.nodes is not nodes:
                raise ValueError("nodal function lives on a different nodal set")
            self.nodal = v.values
            self.field = None
            self._env = env
        elif callable(v):
            self.field = v
            self.nodal = np.asarray(v(nodes.points), dtype=float)
        else:
            self.nodal = np.asarray(v, dtype=float)
            if self.nodal.shape != (nodes.n,):
                raise ValueError("nodal values have the wrong length")
            self.field = None
            self._env = env

    def at_points(self, pts):
        if self.field is not None:
            return np.asarray(self.field(pts), dtype=float)
        # a nodal function is extended off the nodes by its convex envelope
        if self._env is None:
            self._env = build_envelope(NodalFunction(self.nodes, self.nodal))
        return self._env.evaluate(pts)

    def values(self, ids, pts):
        out = np.empty(len(ids))
        on = ids >= 0
        out[on] = self.nodal[ids[on]]
        if (~on).any():
            out[~on] = self.at_points(pts[~on])
        return out


@dataclass
class _Plan:
    plus_ids: np.ndarray
    plus_pts: np.ndarray
    minus_ids: np.ndarray
    minus_pts: np.ndarray
    rho1: np.ndarray
    rho2: np.ndarray
    denom: np.ndarray = field(init=False)

    def __post_init__(self):
        self.denom = 0.5 * self.rho1 * self.rho2 * (self.rho1 + self.rho2)


def _plan(nodes: NodalSet, e) -> _Plan:
    key = ("delta", tuple(int(c) for c in e))
    plan = nodes._cache.get(key)
    if plan is not None:
        return plan
    e = np.asarray(e, dtype=float)
    X = nodes.interior
    h = nodes.h
    # lattice neighbours first; boundary clipping only where they are missing
    rho = np.ones((len(X), 2))
    dom = nodes.domain
    sd_p = dom.signed_distance(X + h * e)
    sd_m = dom.signed_distance(X - h * e)
    for k in np.flatnonzero((sd_p > 0) | (sd_m > 0)):
        rho[k] = boundary_clip(nodes, X[k], e)
    plus = X + (rho[:, 0:1] * h) * e
    minus = X - (rho[:, 1:2] * h) * e
    pid = np.array([_node_or_missing(nodes, p) for p in plus])
    mid = np.array([_node_or_missing(nodes, p) for p in minus])
    plan = _Plan(pid, plus, mid, minus, rho[:, 0], rho[:, 1])
    nodes._cache[key] = plan
    return plan


def _node_or_missing(nodes, p):
    i = nodes.node_at(p)
    return -1 if i is None else i


def delta_all(v, nodes: NodalSet, e, env: LowerEnvelope | None = None) -> np.ndarray:
    """delta_e at every interior node.

    ``v`` is a NodalFunction, an array of nodal values or a vectorized field.
    Where ``x_i +- h e`` leaves the closed domain the step is shortened to
    the boundary and the non-uniform three-point formula is used.
    """
    src = _Source(v, nodes, env)
    plan = _plan(nodes, e)
    e = np.asarray(e, dtype=float)
    vp = src.values(plan.plus_ids, plan.plus_pts)
    vm = src.values(plan.minus_ids, plan.minus_pts)
    v0 = src.nodal[: nodes.n_interior]
    num = plan.rho2 * vp - (plan.rho1 + plan.rho2) * v0 + plan.rho1 * vm
    return num / (plan.denom * (e @ e) * nodes.h**2)


def delta_e(v, nodes: NodalSet, node: int, e, env: LowerEnvelope | None = None) -> float:
    """Second difference of ``v`` at one interior node in lattice direction ``e``."""
    if not nodes.is_interior(node):
        raise DomainError(f"node {node} is not an interior node")
    src = _Source(v, nodes, env)
    e = np.asarray(e, dtype=float)
    x = nodes.points[node]
    h = nodes.h
    r1, r2 = boundary_clip(nodes, x, e)
    pts = np.array([x + r1 * h * e, x - r2 * h * e])
    if not np.all(nodes.domain.contains(pts, tol=1e-9 * h)):
        raise DomainError("second-difference point outside the domain")
    ids = np.array([_node_or_missing(nodes, p) for p in pts])
    vp, vm = src.values(ids, pts)
    num = r2 * vp - (r1 + r2) * src.nodal[node] + r1 * vm
    return float(num / (0.5 * r1 * r2 * (r1 + r2) * (e @ e) * h * h))


# -- W^2_p -----------------------------------------------------------------


def w2p_weighted(u, loads, e, p: float, nodes: NodalSet | None = None) -> float:
    """``(sum_i f_i |delta_e u(x_i)|^p)^(1/p)`` over interior nodes."""
    if p < 1:
        raise ValueError("p must be at least 1")
    nodes = nodes or u.nodes
    d = delta_all(u, nodes, e)
    return float(np.sum(np.asarray(loads) * np.abs(d) ** p) ** (1.0 / p))


def second_differences(v, nodes, stencil: StencilSet = StencilSet(), minus=None, env=None) -> np.ndarray:
    """(directions, interior nodes) array of delta_e v, or of delta_e (v - minus)."""
    rows = []
    for e in stencil.directions:
        d = delta_all(v, nodes, e)
        if minus is not None:
            d = d - delta_all(minus, nodes, e, env=env)
        rows.append(d)
    return np.array(rows)


def w2p_ninepoint(v, nodes: NodalSet, p: float, minus=None, weight: str = "h2", env=None) -> float:
    """Nine-point discrete W^2_p norm of ``v`` (or of ``v - minus``).

    ``weight="h2"`` multiplies every term by h^2, the area per node, which
    makes the value a Riemann sum of the continuous norm; ``"none"`` is the
    bare sum over directions and nodes.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    D = second_differences(v, nodes, minus=minus, env=env)
    w = {"h2": nodes.h**2, "none": 1.0}[weight]
    return float((w * np.sum(np.abs(D) ** p)) ** (1.0 / p))


# per-direction weights of the node-wise sum used by the published tables
TABLE_WEIGHTS = (0.5, 0.5, 1.0, 1.0)


def w2p_table(v, nodes: NodalSet, p: float, minus=None, env=None) -> float:
    """W^2_p in the form that reproduces the reference convergence tables.

    At each interior node the nine-point second differences are combined into
    ``m_i = (|d_(1,0)| + |d_(0,1)|)/2 + |d_(1,1)| + |d_(1,-1)|`` and the
    result is ``(sum_i h^2 m_i^p)^(1/p)``.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    D = second_differences(v, nodes, minus=minus, env=env)
    m = np.asarray(TABLE_WEIGHTS) @ np.abs(D)
    return float((nodes.h**2 * np.sum(m**p)) ** (1.0 / p))


# -- L-infinity and H^1 ----------------------------------------------------


def linf_error(a: NodalFunction, b: NodalFunction) -> float:
    """max over all nodes of |a - b|."""
    if a.nodes is not b.nodes:
        raise ValueError("nodal functions live on different nodal sets")
    return float(np.max(np.abs(a.values - b.values)))


def h1_error(u, grad, u_h: NodalFunction, env: LowerEnvelope, seminorm: bool = False) -> float:
    """H^1 distance between a field and the piecewise linear envelope of u_h.

    Integrated facet by facet over the envelope mesh with the 7-point rule;
    the discrete gradient on a facet is its plane gradient.
    """
    tris = env.triangles
    P = env.points[tris]
    X = np.einsum("qk,tkd->tqd", QUAD_BARY, P)
    m, nq = X.shape[:2]
    flat = X.reshape(-1, 2)
    e1 = P[:, 1] - P[:, 0]
    e2 = P[:, 2] - P[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    dg = np.asarray(grad(flat), dtype=float).reshape(m, nq, 2) - env.gradients[:, None, :]
    integrand = np.sum(dg**2, axis=2)
    if not seminorm:
        uh = QUAD_BARY @ u_h.values[tris].T  # (nq, m)
        integrand = integrand + (np.asarray(u(flat), dtype=float).reshape(m, nq) - uh.T) ** 2
    return float(math.sqrt(np.sum(area * (integrand @ QUAD_W))))


def h1_interp_error(u, u_h: NodalFunction, env: LowerEnvelope, seminorm: bool = True) -> float:
    """H^1 norm of the piecewise linear function (N_h u - u_h) on the envelope mesh."""
    diff = u_h.nodes.interpolate(u) - u_h.values
    tris = env.triangles
    P = env.points[tris]
    e1 = P[:, 1] - P[:, 0]
    e2 = P[:, 2] - P[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    d = diff[tris]
    gx = ((d[:, 1] - d[:, 0]) * e2[:, 1] - (d[:, 2] - d[:, 0]) * e1[:, 1]) / det
    gy = (e1[:, 0] * (d[:, 2] - d[:, 0]) - e2[:, 0] * (d[:, 1] - d[:, 0])) / det
    area = 0.5 * np.abs(det)
    total = np.sum(area * (gx**2 + gy**2))
    if not seminorm:
        # exact mass matrix of a linear function on a triangle
        total += np.sum(area / 12.0 * (np.sum(d**2, axis=1) + np.sum(d, axis=1) ** 2))
    return float(math.sqrt(total))


# -- rates -----------------------------------------------------------------


def rate(e_coarse: float, e_fine: float, ratio: float = 2.0) -> float:
    if e_coarse <= 0 or e_fine <= 0 or not (math.isfinite(e_coarse) and math.isfinite(e_fine)):
        return math.nan
    return math.log(e_coarse / e_fine) / math.log(ratio)


@dataclass
class ErrorRow:
    h: float
    linf: float
    h1: float
    w21: float
    w22: float


@dataclass
class ErrorReport:
    rows: list
    rates: dict  # column -> list of rates between consecutive levels

    COLUMNS = ("linf", "h1", "w21", "w22")


def rates(rows) -> ErrorReport:
    """Observed convergence rates between consecutive levels."""
    rows = list(rows)
    if len(rows) < 2:
        raise ValueError("need at least two levels")
    out = {}
    for col in ErrorReport.COLUMNS:
        out[col] = [
            rate(getattr(a, col), getattr(b, col), a.h / b.h) for a, b in zip(rows[:-1], rows[1:])
        ]
    return ErrorReport(rows, out)

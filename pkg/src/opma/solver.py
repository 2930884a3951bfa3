"""Solvers for the discrete system ``|du_h(x_i)| = f_i`` with ``u_h = g`` on
the boundary nodes.

Two methods are provided.  ``newton`` is a damped Newton iteration on the
interior values; the Jacobian of the cell areas is a weighted graph
Laplacian of the envelope mesh, so every step is one sparse solve.
``perron`` is the classical monotone lowering iteration: Gauss-Seidel sweeps
that push each node down until its cell area matches the load.  It is
simple and provably convergent but far too slow beyond a few hundred nodes.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .domain import NodalSet
from .envelope import LowerEnvelope, NodalFunction, TriangleLocator, build_envelope, facet_planes, lower_hull
from .subdifferential import halfplane_intersection, polygon_area, star_measures

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, msg, history=()):
        super().__init__(msg)
        self.history = list(history)


@dataclass
class SolverConfig:
    residual_tol: float = 1e-8
    max_sweeps: int = 10_000
    bisection_tol: float = 1e-12
    bracket_growth: float = 2.0
    method: str = "newton"
    max_newton: int = 200
    checkpoint: object = None  # writable text stream for per-sweep CSV rows

    def __post_init__(self):
        if not (0 < self.residual_tol < 1):
            raise ValueError("residual_tol must lie in (0, 1)")
        for name in ("max_sweeps", "bisection_tol", "max_newton"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.bracket_growth > 1:
            raise ValueError("bracket_growth must exceed 1")
        if self.method not in ("newton", "perron"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class SolveStats:
    sweeps: int = 0
    residual: float = math.inf
    history: list = field(default_factory=list)
    wall_time: float = 0.0
    method: str = "newton"


def residual(nodes: NodalSet, env: LowerEnvelope, loads) -> float:
    """Largest relative defect ``| |du_h(x_i)| - f_i | / f_i`` over interior nodes."""
    loads = np.asarray(loads, dtype=float)
    area = star_measures(env)[: nodes.n_interior]
    return float(np.max(np.abs(area - loads) / loads))


def boundary_envelope_values(nodes: NodalSet, g_values: np.ndarray) -> np.ndarray:
    """Interior values of the envelope of the boundary data alone."""
    bpts = nodes.boundary
    tris = lower_hull(bpts, g_values)
    grad, off = facet_planes(bpts, g_values, tris)
    tri, _ = TriangleLocator(bpts, tris).locate(nodes.interior, tol=1e-9)
    if np.any(tri < 0):
        raise ValueError("interior node outside the hull of the boundary nodes")
    return np.einsum("ij,ij->i", grad[tri], nodes.interior) + off[tri]


def _check_inputs(nodes, loads, g):
    loads = np.asarray(loads, dtype=float)
    if loads.shape != (nodes.n_interior,):
        raise ValueError(f"expected {nodes.n_interior} loads, got shape {loads.shape}")
    if not np.all(np.isfinite(loads)) or loads.min() <= 0:
        raise ValueError("loads must be positive and finite")
    gv = _boundary_values(nodes, g)
    if not np.all(np.isfinite(gv)):
        raise FloatingPointError("boundary data is not finite")
    return loads, gv


def _boundary_values(nodes, g):
    if callable(g):
        return np.asarray(g(nodes.boundary), dtype=float)
    g = np.asarray(g, dtype=float)
    if g.shape == (nodes.n,):
        return g[nodes.n_interior :].copy()
    if g.shape != (nodes.n - nodes.n_interior,):
        raise ValueError("boundary data has the wrong length")
    return g.copy()


def solve(nodes: NodalSet, loads, g, cfg: SolverConfig | None = None, initial=None):
    """Solve the discrete Monge-Ampere problem.

    ``g`` is a vectorized field, or an array of boundary values (or of
    values at all nodes, of which only the boundary part is used).
    Returns ``(u_h, stats)``.
    """
    cfg = cfg or SolverConfig()
    loads, gv = _check_inputs(nodes, loads, g)
    t0 = time.perf_counter()
    if cfg.method == "newton":
        u, stats = _newton(nodes, loads, gv, cfg, initial)
    else:
        u, stats = _perron(nodes, loads, gv, cfg, initial)
    stats.wall_time = time.perf_counter() - t0
    stats.method = cfg.method
    return u, stats


# -- damped Newton -----------------------------------------------------------


def area_jacobian(env: LowerEnvelope) -> sp.csr_matrix:
    """Derivative of the interior cell areas with respect to interior values.

    Across an envelope edge x_i x_j the cells of i and j share a segment of
    length ``l_ij = |g_left - g_right|``; moving ``u_j`` up by ``t`` pushes
    that segment outwards by ``t / |x_i - x_j|``, hence
    ``dA_i/du_j = l_ij / |x_i - x_j|`` and ``dA_i/du_i = -sum_j dA_i/du_j``.
    """
    nodes = env.nodes
    ni = nodes.n_interior
    a, b, tl, tr = env.interior_edges()
    ell = np.linalg.norm(env.gradients[tl] - env.gradients[tr], axis=1)
    w = ell / np.linalg.norm(nodes.points[a] - nodes.points[b], axis=1)
    diag = np.zeros(ni)
    ia, ib = a < ni, b < ni
    np.add.at(diag, a[ia], -w[ia])
    np.add.at(diag, b[ib], -w[ib])
    both = ia & ib
    rows = np.concatenate([a[both], b[both], np.arange(ni)])
    cols = np.concatenate([b[both], a[both], np.arange(ni)])
    vals = np.concatenate([w[both], w[both], diag])
    return sp.csr_matrix((vals, (rows, cols)), shape=(ni, ni))


def _state(nodes, values):
    env = build_envelope(NodalFunction(nodes, values))
    area = star_measures(env)[: nodes.n_interior]
    ok = bool(np.all(env.is_vertex[: nodes.n_interior]))
    return env, area, ok


def initial_guess(nodes: NodalSet, loads: np.ndarray, gv: np.ndarray) -> np.ndarray:
    """Strictly convex start: the boundary-data envelope minus a paraboloid
    that vanishes on the circumscribed circle of the nodes."""
    lo, hi = nodes.points.min(axis=0), nodes.points.max(axis=0)
    c = 0.5 * (lo + hi)
    R2 = float(np.max(np.sum((nodes.points - c) ** 2, axis=1)))
    base = boundary_envelope_values(nodes, gv)
    # a paraboloid s|x|^2 has cells of area 4 s^2 h^2, about the load size
    s = 0.5 * math.sqrt(float(np.median(loads))) / nodes.h
    vals = np.empty(nodes.n)
    vals[: nodes.n_interior] = base + s * (np.sum((nodes.interior - c) ** 2, axis=1) - R2)
    vals[nodes.n_interior :] = gv
    return vals


def _newton(nodes, loads, gv, cfg, initial):
    ni = nodes.n_interior
    if initial is None:
        vals = initial_guess(nodes, loads, gv)
    else:
        vals = np.array(initial.values if isinstance(initial, NodalFunction) else initial, dtype=float)
        vals[ni:] = gv
    env, area, ok = _state(nodes, vals)
    if not ok:
        raise ConvergenceError("initial guess is not strictly convex at every interior node")
    floor = 0.5 * min(float(area.min()), float(loads.min()))
    stats = SolveStats()
    r = loads - area
    rel = float(np.max(np.abs(r) / loads))
    stats.history.append(rel)
    it = 0
    while rel > cfg.residual_tol:
        if it >= cfg.max_newton:
            raise ConvergenceError(f"Newton did not converge in {it} steps (residual {rel:.3e})", stats.history)
        it += 1
        J = area_jacobian(env)
        step = spsolve(J.tocsc(), r)
        if not np.all(np.isfinite(step)):
            raise FloatingPointError("singular Newton system")
        norm0 = float(np.linalg.norm(r))
        alpha = 1.0
        while True:
            trial = vals.copy()
            trial[:ni] += alpha * step
            env_t, area_t, ok = _state(nodes, trial)
            if ok and area_t.min() >= floor:
                r_t = loads - area_t
                if np.linalg.norm(r_t) <= (1 - 0.5 * alpha) * norm0:
                    break
            alpha *= 0.5
            if alpha < 1e-12:
                raise ConvergenceError(f"line search failed at step {it} (residual {rel:.3e})", stats.history)
        vals, env, area, r = trial, env_t, area_t, r_t
        rel = float(np.max(np.abs(r) / loads))
        stats.history.append(rel)
        log.debug("newton %d: alpha=%g residual=%.3e", it, alpha, rel)
        _checkpoint(cfg, it, vals, rel)
    stats.sweeps = it
    stats.residual = rel
    return NodalFunction(nodes, vals), stats


def _checkpoint(cfg, it, vals, rel):
    if cfg.checkpoint is not None:
        csv.writer(cfg.checkpoint).writerow([it, repr(rel)] + [repr(float(v)) for v in vals])


# -- Perron lowering iteration -----------------------------------------------


def _node_area(dx, dv, t):
    """Cell area at a node with value ``t`` given offsets to all other nodes."""
    poly = halfplane_intersection(dx, dv - t)
    return polygon_area(poly) if len(poly) else 0.0


def _perron(nodes, loads, gv, cfg, initial):
    ni = nodes.n_interior
    vals = np.empty(nodes.n)
    vals[ni:] = gv
    if initial is None:
        vals[:ni] = boundary_envelope_values(nodes, gv)
    else:
        vals[:ni] = np.asarray(initial.values if isinstance(initial, NodalFunction) else initial)[:ni]
    env = build_envelope(NodalFunction(nodes, vals))
    stats = SolveStats()
    rel = residual(nodes, env, loads)
    stats.history.append(rel)
    pts = nodes.points
    scale = 1.0 + float(np.max(np.abs(vals)))
    sweep = 0
    while rel > cfg.residual_tol:
        if sweep >= cfg.max_sweeps:
            raise ConvergenceError(f"Perron iteration did not converge in {sweep} sweeps", stats.history)
        sweep += 1
        for i in range(ni):
            others = np.r_[0:i, i + 1 : nodes.n]
            dx = pts[others] - pts[i]
            dv = env.values[others]
            fi = loads[i]
            hi = env.values[i]
            if _node_area(dx, dv, hi) >= fi:
                continue
            step = math.sqrt(fi) * nodes.h
            lo = hi - step
            while _node_area(dx, dv, lo) < fi:
                hi = lo
                step *= cfg.bracket_growth
                lo = hi - step
                if not math.isfinite(lo):
                    raise FloatingPointError("bracket diverged")
            tol = cfg.bisection_tol * scale
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if _node_area(dx, dv, mid) >= fi:
                    lo = mid
                else:
                    hi = mid
            env.update_value(i, lo)
        rel = residual(nodes, env, loads)
        stats.history.append(rel)
        _checkpoint(cfg, sweep, env.values, rel)
    stats.sweeps = sweep
    stats.residual = rel
    return NodalFunction(nodes, env.values.copy()), stats

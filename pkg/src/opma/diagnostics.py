"""Runnable checks of the stability argument for discrete solutions.

Covered: contact sets and second-difference bounds on them, the measure
estimates for the non-contact set, Brunn-Minkowski for polygons, the
Minkowski-sum inclusion of cells and the level-set L1 bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import assemble_load, build_background_mesh
from .domain import generate_nodal_set
from .envelope import NodalFunction, build_envelope
from .norms import StencilSet, _plan, delta_all
from .solver import solve
from .subdifferential import cell_oracle, convex_hull_2d, polygon_area, star_measures

DIM = 2  # space dimension in the measure formulas
CONTACT_RTOL = 1e-9


class HypothesisError(ValueError):
    """An input violates the assumptions of a check."""


def contact_tol(w: np.ndarray) -> float:
    return CONTACT_RTOL * (1.0 + float(np.max(np.abs(w))))


def _require_convex(v: NodalFunction, name: str) -> None:
    env = build_envelope(v)
    gap = v.values - env.hull_values
    bad = np.flatnonzero(gap > contact_tol(v.values))
    if len(bad):
        raise HypothesisError(f"{name} is not a convex nodal function (node {bad[0]} lies {gap[bad[0]]:.3e} above its envelope)")


def _interior_contact(w: NodalFunction) -> tuple[np.ndarray, float]:
    """Interior nodes where ``w`` touches its convex envelope, and the tolerance used."""
    env = build_envelope(w)
    tol = contact_tol(w.values)
    ni = w.nodes.n_interior
    on = np.abs(w.values[:ni] - env.hull_values[:ni]) <= tol
    return np.flatnonzero(on), tol


def measures(v: NodalFunction) -> np.ndarray:
    """``|dv(x_i)|`` at the interior nodes of a convex nodal function."""
    return star_measures(build_envelope(v))[: v.nodes.n_interior]


@dataclass(eq=False)
class ContactReport:
    eps: float
    tau: float
    contact: np.ndarray  # C_eps: interior ids where w_eps touches its envelope
    upper_contact: np.ndarray  # C^eps, same for w^eps
    noncontact: np.ndarray  # S_eps = interior nodes minus C_eps
    f: np.ndarray  # |du_h(x_i)|
    g: np.ndarray  # |dv_h(x_i)|
    e_root: np.ndarray  # g^(1/d) - f^(1/d)
    mu_S: float
    mu_C: float
    nu_C: float
    nu_C_plus: float  # nu with the opposite sign in front of e^(1/d)/tau
    tol_lower: float
    tol_upper: float
    u_h: NodalFunction = field(repr=False)
    v_h: NodalFunction = field(repr=False)

    @property
    def both(self) -> np.ndarray:
        """C_eps intersected with C^eps."""
        return np.intersect1d(self.contact, self.upper_contact)


def _nu(f, e_root, inv_tau, sign):
    return float(np.sum((f ** (1 / DIM) + sign * inv_tau * e_root) ** DIM))


def contact_sets(u_h: NodalFunction, v_h: NodalFunction, eps: float) -> ContactReport:
    """Contact sets of ``w_eps = u_h - (1-eps) v_h`` and ``w^eps = v_h - (1-eps) u_h``.

    ``nu_C`` is ``sum_C (f^(1/d) - e^(1/d)/tau)^d``.  The cell of the
    envelope of ``w_eps`` at a contact node is bounded by
    ``(f^(1/d) - (1-eps) g^(1/d))^d = eps^d (f^(1/d) - e^(1/d)/tau)^d``,
    which is what the measure estimate rests on.
    """
    if not (0 < eps <= 1):
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    if u_h.nodes is not v_h.nodes:
        raise ValueError("u_h and v_h live on different nodal sets")
    _require_convex(u_h, "u_h")
    _require_convex(v_h, "v_h")
    nodes = u_h.nodes
    ni = nodes.n_interior
    w_lo = NodalFunction(nodes, u_h.values - (1 - eps) * v_h.values)
    w_up = NodalFunction(nodes, v_h.values - (1 - eps) * u_h.values)
    C, tol_lo = _interior_contact(w_lo)
    Cu, tol_up = _interior_contact(w_up)
    S = np.setdiff1d(np.arange(ni), C)
    f = measures(u_h)
    g = measures(v_h)
    e_root = g ** (1 / DIM) - f ** (1 / DIM)
    tau = math.inf if eps == 1 else eps / (1 - eps)
    inv_tau = 0.0 if eps == 1 else (1 - eps) / eps
    return ContactReport(
        eps=eps,
        tau=tau,
        contact=C,
        upper_contact=Cu,
        noncontact=S,
        f=f,
        g=g,
        e_root=e_root,
        mu_S=float(f[S].sum()),
        mu_C=float(f[C].sum()),
        nu_C=_nu(f[C], e_root[C], inv_tau, -1.0),
        nu_C_plus=_nu(f[C], e_root[C], inv_tau, 1.0),
        tol_lower=tol_lo,
        tol_upper=tol_up,
        u_h=u_h,
        v_h=v_h,
    )


# -- second differences on contact sets --------------------------------------


@dataclass
class BoundViolation:
    node: int
    e: tuple
    lower: float
    value: float
    upper: float


def _lattice_stencil_mask(nodes, e) -> np.ndarray:
    """Interior nodes whose neighbours ``x +- h e`` are both nodes."""
    plan = _plan(nodes, e)
    return (plan.rho1 == 1) & (plan.rho2 == 1) & (plan.plus_ids >= 0) & (plan.minus_ids >= 0)


def check_second_diff_bounds(
    report: ContactReport, u_h: NodalFunction | None = None, v_h: NodalFunction | None = None, stencil: StencilSet = StencilSet()
) -> list:
    """Violations of ``-eps d_e v <= d_e (u - v) <= tau d_e v`` on C_eps and C^eps.

    Only stencils whose both neighbours are nodes are checked.  The slack
    covers the contact tolerance, which enters a second difference divided
    by ``|e|^2 h^2``, plus relative rounding.
    """
    u_h = u_h if u_h is not None else report.u_h
    v_h = v_h if v_h is not None else report.v_h
    _require_convex(u_h, "u_h")
    _require_convex(v_h, "v_h")
    nodes = u_h.nodes
    h2 = nodes.h**2
    idx = report.both
    out = []
    for e in stencil.directions:
        e = tuple(int(c) for c in e)
        ok = _lattice_stencil_mask(nodes, e)[idx]
        ids = idx[ok]
        du = delta_all(u_h, nodes, e)[ids]
        dv = delta_all(v_h, nodes, e)[ids]
        ee = e[0] ** 2 + e[1] ** 2
        scale = 1.0 + np.abs(du) + np.abs(dv)
        slack_lo = 2 * report.tol_lower / (ee * h2) + 1e-9 * scale
        eps = report.eps
        diff = du - dv
        lower = -eps * dv
        if eps < 1:
            upper = report.tau * dv
            slack_up = 2 * report.tol_upper / ((1 - eps) * ee * h2) + 1e-9 * scale / (1 - eps)
        else:
            upper = np.full_like(dv, math.inf)
            slack_up = np.zeros_like(dv)
        bad = (diff < lower - slack_lo) | (diff > upper + slack_up)
        for k in np.flatnonzero(bad):
            out.append(BoundViolation(int(ids[k]), e, float(lower[k]), float(diff[k]), float(upper[k])))
    return out


def large_difference_set(report: ContactReport, stencil: StencilSet = StencilSet(), upper: bool = False) -> np.ndarray:
    """``E_tau``: nodes with ``d_e (v - u) >= tau d_e v`` for some lattice
    stencil ``e`` (or ``E^tau`` with ``u - v`` when ``upper``).

    A strict margin equal to the contact slack is added, so that nodes which
    only reach the threshold through rounding are not counted.
    """
    u_h, v_h = report.u_h, report.v_h
    nodes = u_h.nodes
    h2 = nodes.h**2
    hit = np.zeros(nodes.n_interior, dtype=bool)
    if not math.isfinite(report.tau):
        return np.flatnonzero(hit)
    for e in stencil.directions:
        ee = e[0] ** 2 + e[1] ** 2
        mask = _lattice_stencil_mask(nodes, e)
        du = delta_all(u_h, nodes, e)
        dv = delta_all(v_h, nodes, e)
        d = (du - dv) if upper else (dv - du)
        tol = report.tol_upper if upper else report.tol_lower
        margin = 2 * tol / (ee * h2) + 1e-9 * (1.0 + np.abs(du) + np.abs(dv))
        hit |= mask & (d >= report.tau * dv + margin)
    return np.flatnonzero(hit)


# -- measure estimates -------------------------------------------------------


@dataclass
class MeasureBound:
    lhs: float  # mu(S_eps)
    rhs_nu: float  # nu_tau(C_eps) - mu(C_eps)
    rhs_norm: float  # C_f / tau * ||e^(1/d)||_(l^d(C_eps))
    c_f: float
    ok: bool


def check_measure_hypotheses(u_h: NodalFunction, v_h: NodalFunction) -> None:
    """``u_h = v_h`` on boundary nodes and ``u_h <= v_h`` at interior nodes."""
    nodes = u_h.nodes
    ni = nodes.n_interior
    tol = contact_tol(np.r_[u_h.values, v_h.values])
    gap = u_h.values - v_h.values
    b = np.flatnonzero(np.abs(gap[ni:]) > tol)
    if len(b):
        k = ni + int(b[0])
        raise HypothesisError(f"boundary node {k}: u_h - v_h = {gap[k]:.3e}, expected 0")
    i = np.flatnonzero(gap[:ni] > tol)
    if len(i):
        k = int(i[0])
        raise HypothesisError(f"interior node {k}: u_h exceeds v_h by {gap[k]:.3e}")


def check_measure_bound(report: ContactReport) -> MeasureBound:
    """Both measure estimates for the non-contact set:
    ``mu(S) <= nu_tau(C) - mu(C)`` and
    ``mu(S) <= C_f tau^-1 ||e^(1/d)||_(l^d(C))`` with
    ``C_f = d ||f^(1/d)||^(d-1)`` over all interior nodes."""
    check_measure_hypotheses(report.u_h, report.v_h)
    f = report.f
    C = report.contact
    c_f = DIM * float(np.sum(f)) ** ((DIM - 1) / DIM)
    e_norm = float(np.sum(np.abs(report.e_root[C]) ** DIM)) ** (1 / DIM)
    rhs_nu = report.nu_C - report.mu_C
    rhs_norm = 0.0 if not math.isfinite(report.tau) else c_f * e_norm / report.tau
    slack = 1e-9 * (1.0 + float(np.sum(f)))
    ok = report.mu_S <= rhs_nu + slack and report.mu_S <= rhs_norm + slack
    return MeasureBound(report.mu_S, rhs_nu, rhs_norm, c_f, bool(ok))


# -- contact convexity and cell sums -------------------------------------------


def check_contact_convexity(u_h: NodalFunction, v_h: NodalFunction, tol: float = 1e-9) -> list:
    """Nodes of the lower contact set of ``u_h - v_h`` where
    ``|d Gamma(u-v)|^(1/d) <= |du|^(1/d) - |dv|^(1/d)`` fails.  All cells
    come from the oracle.  Returns ``(node, lhs, rhs)`` triples."""
    _require_convex(u_h, "u_h")
    _require_convex(v_h, "v_h")
    nodes = u_h.nodes
    w = NodalFunction(nodes, u_h.values - v_h.values)
    C, _ = _interior_contact(w)
    gw = NodalFunction(nodes, build_envelope(w).hull_values)
    out = []
    for i in C:
        lhs = cell_oracle(nodes, gw, int(i)).measure ** (1 / DIM)
        rhs = cell_oracle(nodes, u_h, int(i)).measure ** (1 / DIM) - cell_oracle(nodes, v_h, int(i)).measure ** (1 / DIM)
        if lhs > rhs + tol:
            out.append((int(i), lhs, rhs))
    return out


def _sample_polygon(poly, rng, k):
    """``k`` random convex combinations of the polygon vertices."""
    w = rng.dirichlet(np.ones(len(poly)), size=k)
    return w @ poly


def check_sum_inclusion(u_h: NodalFunction, v_h: NodalFunction, node: int, samples: int = 20, rng=None) -> int:
    """Sample ``p1`` in ``du(x_i)`` and ``p2`` in ``dv(x_i)`` and count how
    often ``p1 + p2`` violates the defining inequalities of ``d(u+v)(x_i)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    nodes = u_h.nodes
    A = cell_oracle(nodes, u_h, node).polygon
    B = cell_oracle(nodes, v_h, node).polygon
    if len(A) == 0 or len(B) == 0:
        return 0
    P = _sample_polygon(A, rng, samples) + _sample_polygon(B, rng, samples)
    s = u_h.values + v_h.values
    dx = nodes.points - nodes.points[node]
    ds = s - s[node]
    slack = 1e-9 * (1.0 + np.abs(ds).max())
    viol = (P @ dx.T) > ds[None, :] + slack
    return int(viol.any(axis=1).sum())


# -- Brunn-Minkowski ---------------------------------------------------------


def _ccw_from_bottom(poly):
    p = convex_hull_2d(poly)
    if len(p) == 0:
        raise ValueError("polygon must be nonempty")
    k = np.lexsort((p[:, 0], p[:, 1]))[0]
    return np.roll(p, -k, axis=0)


def minkowski_sum(A, B) -> np.ndarray:
    """``A + B`` of two convex polygons by merging their edge sequences."""
    A = _ccw_from_bottom(A)
    B = _ccw_from_bottom(B)

    def edges(p):
        if len(p) < 2:
            return np.zeros((0, 2))
        return np.roll(p, -1, axis=0) - p

    E = np.vstack([edges(A), edges(B)])
    start = A[0] + B[0]
    if len(E) == 0:
        return start[None]
    ang = np.mod(np.arctan2(E[:, 1], E[:, 0]), 2 * math.pi)
    E = E[np.argsort(ang, kind="stable")]
    pts = start + np.vstack([np.zeros((1, 2)), np.cumsum(E, axis=0)[:-1]])
    return convex_hull_2d(pts) if len(pts) > 2 else pts


def check_brunn_minkowski(A, B, tol: float = 1e-12) -> bool:
    """``|A+B|^(1/d) >= |A|^(1/d) + |B|^(1/d)`` for convex polygons."""
    S = minkowski_sum(A, B)
    a = polygon_area(_ccw_from_bottom(A))
    b = polygon_area(_ccw_from_bottom(B))
    s = polygon_area(S)
    return bool(s ** (1 / DIM) + tol * (1.0 + s) >= a ** (1 / DIM) + b ** (1 / DIM))


# -- level sets ----------------------------------------------------------------


def check_level_set_bound(s, loads, sigma: float):
    """``sum f_i |s_i| <= sigma sum_(k=0..N) mu(A_k)`` with
    ``A_k = {|s_i| >= k sigma}`` and ``N = ceil(max|s| / sigma)``.

    ``s`` is a NodalFunction or an array of interior values.
    Returns ``(lhs, rhs, ok)``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    loads = np.asarray(loads, dtype=float)
    vals = s.interior_values if isinstance(s, NodalFunction) else np.asarray(s, dtype=float)
    if vals.shape != loads.shape:
        raise ValueError("values and loads have different lengths")
    a = np.abs(vals)
    lhs = float(np.sum(loads * a))
    N = int(math.ceil(float(a.max(initial=0.0)) / sigma))
    rhs = sigma * sum(float(loads[a >= k * sigma].sum()) for k in range(N + 1))
    return lhs, rhs, bool(lhs <= rhs * (1 + 1e-12) + 1e-300)


# -- consistency ---------------------------------------------------------------


@dataclass
class DecayRow:
    h: float
    interior: float  # max defect over nodes at distance >= R_test h
    boundary: float  # max defect over the remaining interior nodes


@dataclass
class DecayTable:
    rows: list
    interior_slope: float
    boundary_constants: list  # boundary defect / h^2 per level
    r_test: float


def consistency_defect(problem, h: float, offset=(0.0, 0.0), mesh: str = "diagonal", rule: str = "gauss7", refine_levels: int = 3):
    """``| |dN_h u(x_i)| - f_i |`` at every interior node and the distance of
    each node to the boundary."""
    if problem.exact is None:
        raise ValueError("problem has no exact solution")
    nodes = generate_nodal_set(problem.domain, h, offset)
    loads = assemble_load(
        build_background_mesh(nodes, mesh), problem.f, problem.singular_curves, refine_levels=refine_levels, rule=rule
    )
    area = measures(NodalFunction.interpolate(nodes, problem.exact))
    dist = -problem.domain.signed_distance(nodes.interior)
    return np.abs(area - loads), dist


def _slope(hs, vals):
    hs, vals = np.asarray(hs), np.asarray(vals)
    ok = vals > 0
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(hs[ok]), np.log(vals[ok]), 1)[0])


def consistency_decay(problem, levels, r_test: float = 3.0, **kw) -> DecayTable:
    """Interior and near-boundary consistency defects over mesh levels.

    ``levels`` is a sequence of h values.  The interior slope is the least
    squares slope of log(defect) against log(h).
    """
    if not r_test > 0:
        raise ValueError("r_test must be positive")
    rows = []
    for h in levels:
        d, dist = consistency_defect(problem, h, **kw)
        far = dist >= r_test * h - 1e-12
        rows.append(
            DecayRow(float(h), float(d[far].max(initial=0.0)), float(d[~far].max(initial=0.0)))
        )
    return DecayTable(
        rows,
        _slope([r.h for r in rows], [r.interior for r in rows]),
        [r.boundary / r.h**2 for r in rows],
        r_test,
    )


def comparison_pair(nodes, loads, g, shrink: float, cfg=None):
    """Solutions for loads ``f`` and ``(1 - shrink) f`` with the same boundary data.

    By the comparison principle the second lies above the first, so the pair
    satisfies the hypotheses of the measure estimates.
    """
    if not 0 <= shrink < 1:
        raise ValueError("shrink must lie in [0, 1)")
    u_h, _ = solve(nodes, loads, g, cfg)
    v_h, _ = solve(nodes, (1 - shrink) * np.asarray(loads), g, cfg, initial=u_h)
    return u_h, v_h


__all__ = [
    "ContactReport",
    "HypothesisError",
    "contact_sets",
    "check_second_diff_bounds",
    "large_difference_set",
    "check_measure_bound",
    "check_measure_hypotheses",
    "check_contact_convexity",
    "check_sum_inclusion",
    "minkowski_sum",
    "check_brunn_minkowski",
    "check_level_set_bound",
    "consistency_decay",
    "consistency_defect",
    "comparison_pair",
]

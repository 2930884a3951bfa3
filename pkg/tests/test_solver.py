from __future__ import annotations

import csv
import io
import math

import numpy as np
import pytest

from opma.assembly import assemble_load, build_background_mesh
from opma.domain import Disk, Square, generate_nodal_set
from opma.envelope import NodalFunction, build_envelope
from opma.problems import example1, quadratic
from opma.solver import ConvergenceError, SolverConfig, boundary_envelope_values, residual, solve
from opma.subdifferential import star_measures

METHODS = ["newton", "perron"]


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("f0,expected", [(2.0, -1.0), (4.0, -math.sqrt(2.0))])
def test_single_node(method, f0, expected):
    # one interior node at the origin, zero boundary data: the cell of the
    # origin is the diamond |p1| + |p2| <= -u0 with area 2 u0^2
    nodes = generate_nodal_set(Square(), 1.0)
    assert nodes.n_interior == 1
    u, stats = solve(nodes, [f0], np.zeros(nodes.n - 1), SolverConfig(residual_tol=1e-12, method=method))
    assert u.values[0] == pytest.approx(expected, abs=1e-10)
    assert stats.residual <= 1e-12
    if method == "perron":
        # a single node is solved by its first update
        assert stats.sweeps == 1


@pytest.mark.parametrize("method", METHODS)
def test_quadratic_reproduced_exactly(method):
    # N_h of |x|^2/2 has cells of area h^2 at every interior lattice node;
    # Perron contracts slowly, so it gets the small lattice
    nodes = generate_nodal_set(Square(), 0.25 if method == "newton" else 0.5)
    p = quadratic()
    loads = np.full(nodes.n_interior, nodes.h**2)
    cfg = SolverConfig(residual_tol=1e-11, method=method)
    u, _ = solve(nodes, loads, p.g, cfg)
    np.testing.assert_allclose(u.values, nodes.interpolate(p.exact), atol=1e-9)


def test_solution_is_convex_and_solves():
    nodes = generate_nodal_set(Disk(radius=1.0), 0.1, (0.02, 0.01))
    p = example1()
    loads = assemble_load(build_background_mesh(nodes), p.f)
    u, stats = solve(nodes, loads, p.g, SolverConfig(residual_tol=1e-10))
    env = build_envelope(u)
    assert env.is_vertex[: nodes.n_interior].all()
    assert residual(nodes, env, loads) <= 1e-10
    np.testing.assert_allclose(star_measures(env)[: nodes.n_interior], loads, rtol=1e-10)
    np.testing.assert_array_equal(u.values[nodes.n_interior :], p.g(nodes.boundary))


def test_newton_and_perron_agree():
    nodes = generate_nodal_set(Square(), 0.5)
    p = example1()
    loads = assemble_load(build_background_mesh(nodes, "diagonal"), p.f)
    a, _ = solve(nodes, loads, p.g, SolverConfig(residual_tol=1e-10, method="newton"))
    b, _ = solve(nodes, loads, p.g, SolverConfig(residual_tol=1e-10, method="perron"))
    np.testing.assert_allclose(a.values, b.values, atol=1e-8)


def test_comparison_principle(rng):
    # larger loads and smaller boundary data give a smaller solution
    nodes = generate_nodal_set(Square(), 0.2)
    for _ in range(5):
        f = rng.uniform(0.5, 2.0, nodes.n_interior) * nodes.h**2
        extra = rng.uniform(0.0, 1.0, nodes.n_interior) * nodes.h**2
        g = rng.normal(size=nodes.n - nodes.n_interior) * 0.1
        lower = rng.uniform(0.0, 0.05, size=g.shape)
        u, _ = solve(nodes, f + extra, g - lower)
        v, _ = solve(nodes, f, g)
        assert np.all(u.values <= v.values + 1e-10)


def test_residual_examples():
    nodes = generate_nodal_set(Square(), 0.25)
    p = quadratic()
    loads = np.full(nodes.n_interior, nodes.h**2)
    exact = build_envelope(NodalFunction(nodes, nodes.interpolate(p.exact)))
    assert residual(nodes, exact, loads) <= 1e-12
    # the f = 0 solution has empty interior cells: relative defect 1
    gv = p.g(nodes.boundary)
    vals = np.r_[boundary_envelope_values(nodes, gv), gv]
    start = build_envelope(NodalFunction(nodes, vals))
    assert residual(nodes, start, loads) == pytest.approx(1.0)


def test_deterministic():
    nodes = generate_nodal_set(Square(), 0.125)
    p = example1()
    loads = assemble_load(build_background_mesh(nodes), p.f)
    a, sa = solve(nodes, loads, p.g)
    b, sb = solve(nodes, loads, p.g)
    assert a.values.tobytes() == b.values.tobytes()
    assert sa.history == sb.history


def test_perron_monotone():
    nodes = generate_nodal_set(Square(), 0.5)
    loads = np.full(nodes.n_interior, nodes.h**2)
    buf = io.StringIO()
    cfg = SolverConfig(method="perron", residual_tol=1e-6, checkpoint=buf)
    _, stats = solve(nodes, loads, quadratic().g, cfg)
    assert stats.history[-1] <= 1e-6
    assert all(b <= a + 1e-15 for a, b in zip(stats.history, stats.history[1:]))
    # iterates never rise at any interior node, starting from the f = 0 solution
    start = boundary_envelope_values(nodes, quadratic().g(nodes.boundary))
    sweeps = [start] + [np.array([float(x) for x in r[2:]])[: nodes.n_interior] for r in csv.reader(io.StringIO(buf.getvalue()))]
    assert len(sweeps) == stats.sweeps + 1
    for a, b in zip(sweeps, sweeps[1:]):
        assert np.all(b <= a)


def test_convergence_error_carries_history():
    nodes = generate_nodal_set(Square(), 0.125)
    p = example1()
    loads = assemble_load(build_background_mesh(nodes), p.f)
    with pytest.raises(ConvergenceError) as info:
        solve(nodes, loads, p.g, SolverConfig(residual_tol=1e-12, max_newton=1))
    assert len(info.value.history) == 2
    with pytest.raises(ConvergenceError):
        small = generate_nodal_set(Square(), 0.5)
        cfg = SolverConfig(residual_tol=1e-12, method="perron", max_sweeps=1)
        solve(small, np.full(small.n_interior, 0.25), p.g, cfg)


def test_checkpoint_rows():
    nodes = generate_nodal_set(Square(), 0.25)
    buf = io.StringIO()
    p = example1()
    loads = assemble_load(build_background_mesh(nodes), p.f)
    u, stats = solve(nodes, loads, p.g, SolverConfig(checkpoint=buf))
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert len(rows) == stats.sweeps
    assert [int(r[0]) for r in rows] == list(range(1, stats.sweeps + 1))
    assert float(rows[-1][1]) == stats.residual
    np.testing.assert_array_equal([float(x) for x in rows[-1][2:]], u.values)


def test_input_validation():
    nodes = generate_nodal_set(Square(), 0.5)
    ni, nb = nodes.n_interior, nodes.n - nodes.n_interior
    with pytest.raises(ValueError):
        solve(nodes, np.ones(ni + 1), np.zeros(nb))
    with pytest.raises(ValueError):
        solve(nodes, -np.ones(ni), np.zeros(nb))
    with pytest.raises(ValueError):
        solve(nodes, np.ones(ni), np.zeros(nb + 1))
    with pytest.raises(FloatingPointError):
        solve(nodes, np.ones(ni), np.full(nb, np.nan))
    for bad in (dict(residual_tol=0), dict(method="jacobi"), dict(bracket_growth=1.0), dict(max_newton=0)):
        with pytest.raises(ValueError):
            SolverConfig(**bad)

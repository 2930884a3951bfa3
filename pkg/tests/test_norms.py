from __future__ import annotations

import math

import numpy as np
import pytest

from opma.domain import Disk, DomainError, Square, generate_nodal_set
from opma.envelope import EnvelopeError, NodalFunction, build_envelope
from opma.norms import (
    ErrorRow,
    delta_all,
    delta_e,
    h1_error,
    h1_interp_error,
    linf_error,
    rate,
    rates,
    w2p_ninepoint,
    w2p_table,
    w2p_weighted,
)


def quad(A):
    A = np.asarray(A, dtype=float)
    return lambda x: 0.5 * np.einsum("ij,jk,ik->i", np.atleast_2d(x), A, np.atleast_2d(x))


def test_delta_examples():
    nodes = generate_nodal_set(Square(), 0.25)
    x1sq = lambda x: x[:, 0] ** 2
    np.testing.assert_allclose(delta_all(x1sq, nodes, (1, 0)), 2.0, atol=1e-10)
    np.testing.assert_allclose(delta_all(x1sq, nodes, (0, 1)), 0.0, atol=1e-10)
    r2 = lambda x: (x**2).sum(axis=1)
    # along (1,1) the second derivative of |x|^2 divided by |e|^2 is 2
    np.testing.assert_allclose(delta_all(r2, nodes, (1, 1)), 2.0, atol=1e-10)
    i = nodes.node_at((0.0, 0.0))
    assert delta_e(r2, nodes, i, (1, -1)) == pytest.approx(2.0)


@pytest.mark.parametrize("offset", [(0.0, 0.0), (0.031, 0.017)])
def test_nonuniform_formula_exact_on_quadratics(offset):
    # on a disk almost every boundary-adjacent node uses shortened steps
    nodes = generate_nodal_set(Disk(radius=1.0), 0.15, offset)
    A = np.array([[2.0, 0.7], [0.7, 1.2]])
    u = quad(A)
    for e in ((1, 0), (0, 1), (1, 1), (1, -1), (2, 1)):
        e = np.asarray(e, dtype=float)
        np.testing.assert_allclose(delta_all(u, nodes, e), e @ A @ e / (e @ e), rtol=1e-9)


def test_delta_rejects_boundary_node():
    nodes = generate_nodal_set(Square(), 0.5)
    with pytest.raises(DomainError):
        delta_e(lambda x: x[:, 0], nodes, nodes.n - 1, (1, 0))


def test_delta_of_nodal_function_uses_envelope_off_nodes():
    # with an offset lattice the clipped stencil points on the square's
    # boundary are mostly not nodes; the envelope supplies their values
    nodes = generate_nodal_set(Square(), 0.2, (0.05, 0.03))
    u = quad(np.eye(2))
    v = NodalFunction(nodes, nodes.interpolate(u))
    d_field = delta_all(u, nodes, (1, 1))
    d_nodal = delta_all(v, nodes, (1, 1))
    inner = np.all(np.abs(nodes.interior) < 1 - 2 * nodes.h, axis=1)
    np.testing.assert_allclose(d_nodal[inner], d_field[inner], atol=1e-10)
    # the piecewise linear envelope lies above u between nodes
    assert np.all(d_nodal >= d_field - 1e-9)


def test_delta_of_nodal_function_outside_hull():
    # on a disk the clipped points lie on the circle, outside the node hull
    nodes = generate_nodal_set(Disk(radius=1.0), 0.2, (0.05, 0.0))
    v = NodalFunction(nodes, nodes.interpolate(quad(np.eye(2))))
    with pytest.raises(EnvelopeError):
        delta_all(v, nodes, (1, 1))


def test_w2p_weighted_closed_form():
    nodes = generate_nodal_set(Square(), 0.5)
    u = NodalFunction(nodes, nodes.interpolate(lambda x: x[:, 0] ** 2))
    loads = np.full(nodes.n_interior, 0.25)
    # nine interior nodes, delta = 2 at each
    assert w2p_weighted(u, loads, (1, 0), 1) == pytest.approx(9 * 0.25 * 2)
    assert w2p_weighted(u, loads, (1, 0), 2) == pytest.approx(math.sqrt(9 * 0.25 * 4))
    assert w2p_weighted(u, loads, (0, 1), 3) == pytest.approx(0.0, abs=1e-12)
    # x1^2 along the diagonals: e^T D^2 v e / |e|^2 = 2 / 2
    for e in ((1, 1), (1, -1)):
        np.testing.assert_allclose(delta_all(u, nodes, e), 1.0, atol=1e-12)
    affine = NodalFunction(nodes, nodes.interpolate(lambda x: 3 * x[:, 0] - x[:, 1] + 2))
    for e in ((1, 0), (0, 1), (1, 1), (1, -1)):
        assert w2p_weighted(affine, loads, e, 2) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        w2p_weighted(u, loads, (1, 0), 0.5)


def test_ninepoint_and_table_on_quadratic():
    h = 0.125
    nodes = generate_nodal_set(Square(), h)
    n = nodes.n_interior
    u = quad(np.eye(2))  # delta = 1 in every direction
    assert w2p_ninepoint(u, nodes, 1, weight="none") == pytest.approx(4 * n)
    assert w2p_ninepoint(u, nodes, 2) == pytest.approx(math.sqrt(h * h * 4 * n))
    # table combination: m_i = (1 + 1)/2 + 1 + 1 = 3
    assert w2p_table(u, nodes, 1) == pytest.approx(h * h * 3 * n)
    assert w2p_table(u, nodes, 2) == pytest.approx(math.sqrt(h * h * 9 * n))
    assert w2p_table(u, nodes, 2, minus=u) == pytest.approx(0.0, abs=1e-12)


def test_norm_axioms(rng):
    nodes = generate_nodal_set(Square(), 0.25)
    a = rng.normal(size=nodes.n)
    b = rng.normal(size=nodes.n)
    for norm in (w2p_table, w2p_ninepoint):
        for p in (1, 2, 3.5):
            na, nb = norm(a, nodes, p), norm(b, nodes, p)
            assert norm(-3.0 * a, nodes, p) == pytest.approx(3.0 * na)
            assert norm(a + b, nodes, p) <= na + nb + 1e-12


def test_holder_chain(rng):
    # with weights summing to the domain area 4: W1 <= 4^(1/2) W2
    nodes = generate_nodal_set(Square(), 0.125)
    v = rng.normal(size=nodes.n)
    w1 = w2p_table(v, nodes, 1)
    w2 = w2p_table(v, nodes, 2)
    area = nodes.h**2 * nodes.n_interior
    assert w1 <= math.sqrt(area) * w2 + 1e-12


def test_rates():
    assert rate(4.0, 1.0) == pytest.approx(2.0)
    assert rate(1.0, 1.0) == 0.0
    assert rate(2.24e-4, 5.61e-5) == pytest.approx(2.00, abs=5e-3)
    assert math.isnan(rate(0.0, 1.0))
    assert math.isnan(rate(1.0, math.inf))
    rows = [ErrorRow(0.5, 1.0, 1.0, 1.0, 1.0), ErrorRow(0.25, 0.25, 0.5, 1.0, 2.0)]
    rep = rates(rows)
    assert rep.rates["linf"] == [pytest.approx(2.0)]
    assert rep.rates["h1"] == [pytest.approx(1.0)]
    assert rep.rates["w22"] == [pytest.approx(-1.0)]
    with pytest.raises(ValueError):
        rates(rows[:1])


def test_linf_error():
    nodes = generate_nodal_set(Square(), 0.5)
    a = NodalFunction(nodes, np.zeros(nodes.n))
    vals = np.zeros(nodes.n)
    vals[3] = -0.7
    assert linf_error(a, NodalFunction(nodes, vals)) == pytest.approx(0.7)
    assert linf_error(a, NodalFunction(nodes, np.full(nodes.n, -2.5))) == 2.5
    other = generate_nodal_set(Square(), 0.5)
    with pytest.raises(ValueError):
        linf_error(a, NodalFunction(other, np.zeros(other.n)))


def test_h1_closed_form():
    # u_h = 0 and u = x1 + 2 x2: |grad|^2 = 5 on area 4
    nodes = generate_nodal_set(Square(), 0.25)
    zero = NodalFunction(nodes, np.zeros(nodes.n))
    env = build_envelope(zero)
    u = lambda x: x[:, 0] + 2 * x[:, 1]
    grad = lambda x: np.tile([1.0, 2.0], (len(x), 1))
    assert h1_error(u, grad, zero, env, seminorm=True) == pytest.approx(math.sqrt(20))
    # integral of (x1 + 2 x2)^2 over the square is 4/3 + 4 * 4/3 = 20/3
    assert h1_error(u, grad, zero, env) == pytest.approx(math.sqrt(20 + 20 / 3))
    assert h1_interp_error(u, zero, env) == pytest.approx(math.sqrt(20))
    assert h1_interp_error(u, zero, env, seminorm=False) == pytest.approx(math.sqrt(20 + 20 / 3))


@pytest.mark.parametrize("h", [0.5, 0.25, 0.125])
def test_h1_interpolation_error_of_x1_squared(h):
    # on every strip [x0, x0 + h] x [-1, 1] the interpolant of x1^2 has
    # gradient (2 x0 + h, 0) whatever the triangulation, so
    # |u - I u|_1^2 = 4 h^2 / 3 and ||u - I u||_0^2 = 2 h^4 / 15
    nodes = generate_nodal_set(Square(), h)
    u = lambda x: x[:, 0] ** 2
    grad = lambda x: np.column_stack([2 * x[:, 0], np.zeros(len(x))])
    v = NodalFunction(nodes, nodes.interpolate(u))
    env = build_envelope(v)
    semi = h1_error(u, grad, v, env, seminorm=True)
    assert semi == pytest.approx(2 * h / math.sqrt(3), rel=1e-12)
    assert h1_error(u, grad, v, env) == pytest.approx(math.sqrt(4 * h * h / 3 + 2 * h**4 / 15), rel=1e-12)


def test_h1_interp_zero_for_interpolant():
    nodes = generate_nodal_set(Square(), 0.25)
    u = quad(np.eye(2))
    v = NodalFunction(nodes, nodes.interpolate(u))
    assert h1_interp_error(u, v, build_envelope(v), seminorm=False) == pytest.approx(0.0, abs=1e-14)

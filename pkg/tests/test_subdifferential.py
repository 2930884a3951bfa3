from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_convex_values
from opma.domain import DomainError, Square, generate_nodal_set
from opma.envelope import NodalFunction, build_envelope
from opma.subdifferential import (
    cell_from_star,
    cell_oracle,
    convex_hull_2d,
    halfplane_intersection,
    polygon_area,
    star_measures,
)

DIAMOND = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])


def test_polygon_area_examples():
    assert polygon_area([[0, 0], [1, 0], [1, 1], [0, 1]]) == 1.0
    assert polygon_area(DIAMOND) == 2.0
    assert polygon_area([[0, 0], [1, 0], [0, 1]]) == 0.5
    assert polygon_area([[0, 0], [1, 1]]) == 0.0
    assert polygon_area(np.zeros((0, 2))) == 0.0


def single_node():
    nodes = generate_nodal_set(Square(), 1.0)
    v = np.zeros(nodes.n)
    v[0] = -1.0
    return nodes, NodalFunction(nodes, v)


def test_single_node_diamond():
    nodes, v = single_node()
    env = build_envelope(v)
    for cell in (cell_from_star(env, v, 0), cell_oracle(nodes, v, 0)):
        assert cell.measure == pytest.approx(2.0, abs=1e-14)
        got = {tuple(np.round(p, 12)) for p in cell.polygon}
        assert got == {tuple(p) for p in DIAMOND}


def test_affine_cell_is_a_point():
    nodes = generate_nodal_set(Square(), 0.5)
    v = NodalFunction(nodes, nodes.points @ [0.3, -0.2] + 1)
    env = build_envelope(v)
    for i in range(nodes.n_interior):
        a = cell_from_star(env, v, i)
        b = cell_oracle(nodes, v, i)
        assert a.measure <= 1e-14 * nodes.h**2 and b.measure <= 1e-14 * nodes.h**2
        if len(a.polygon):
            np.testing.assert_allclose(a.polygon, [[0.3, -0.2]] * len(a.polygon), atol=1e-12)


def test_quadratic_deep_interior_measure():
    h = 0.25
    nodes = generate_nodal_set(Square(), h)
    v = NodalFunction(nodes, 0.5 * np.sum(nodes.points**2, axis=1))
    env = build_envelope(v)
    i = nodes.node_at((0.0, 0.0))
    assert cell_from_star(env, v, i).measure == pytest.approx(h * h, abs=1e-15)
    assert cell_oracle(nodes, v, i).measure == pytest.approx(h * h, abs=1e-15)
    # every interior node of the lattice sees the same cell
    np.testing.assert_allclose(star_measures(env)[: nodes.n_interior], h * h, atol=1e-14)


def test_inactive_node_has_empty_cell():
    nodes = generate_nodal_set(Square(), 0.25)
    vals = 0.5 * np.sum(nodes.points**2, axis=1)
    i = nodes.node_at((0.25, 0.25))
    vals[i] += 0.5
    v = NodalFunction(nodes, vals)
    env = build_envelope(v)
    assert cell_from_star(env, v, i).empty
    assert cell_oracle(nodes, v, i).measure == 0.0
    assert star_measures(env)[i] == 0.0


def test_boundary_node_rejected():
    nodes, v = single_node()
    env = build_envelope(v)
    with pytest.raises(DomainError):
        cell_from_star(env, v, 1)
    with pytest.raises(DomainError):
        cell_oracle(nodes, v, 1)


def test_unbounded_intersection_raises():
    # p1 <= 1 and -p1 <= 1 alone: a slab
    with pytest.raises(ValueError, match="unbounded"):
        halfplane_intersection([[1.0, 0.0], [-1.0, 0.0]], [1.0, 1.0])


def test_halfplane_box_and_empty():
    poly = halfplane_intersection([[1.0, 0.0]], [0.5], box=1.0)
    assert polygon_area(poly) == pytest.approx(1.5 * 2.0)
    empty = halfplane_intersection([[1, 0], [-1, 0], [0, 1], [0, -1]], [-1.0, 0.0, 1.0, 1.0])
    assert len(empty) == 0


def test_convex_hull_drops_collinear():
    hull = convex_hull_2d([[0, 0], [1, 0], [2, 0], [2, 2], [0, 2], [1, 1]])
    assert len(hull) == 4
    assert polygon_area(hull) == 4.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_cell_vertices_satisfy_definition(seed):
    rng = np.random.default_rng(seed)
    nodes = generate_nodal_set(Square(), 0.5, (0.0, 0.0))
    v = NodalFunction(nodes, random_convex_values(nodes, rng, noise=0.02))
    env = build_envelope(v)
    dx_all = nodes.points
    for i in range(nodes.n_interior):
        cell = cell_from_star(env, v, i)
        for p in cell.polygon:
            lhs = (dx_all - dx_all[i]) @ p
            rhs = v.values - v.values[i]
            assert np.all(lhs <= rhs + 1e-9 * (1 + np.abs(rhs).max()))


def test_monotonicity_and_translation(rng):
    nodes = generate_nodal_set(Square(), 0.25)
    vals = random_convex_values(nodes, rng)
    i = nodes.node_at((0.0, 0.0))
    j = nodes.node_at((0.25, 0.0))
    base = cell_oracle(nodes, NodalFunction(nodes, vals), i).measure
    lowered = vals.copy()
    lowered[i] -= 0.01
    assert cell_oracle(nodes, NodalFunction(nodes, lowered), i).measure >= base
    raised = vals.copy()
    raised[j] += 0.01
    assert cell_oracle(nodes, NodalFunction(nodes, raised), i).measure >= base
    shifted = vals + nodes.points @ [1.5, -0.7] + 2.0
    env_a = build_envelope(NodalFunction(nodes, vals))
    env_b = build_envelope(NodalFunction(nodes, shifted))
    np.testing.assert_allclose(star_measures(env_a), star_measures(env_b), atol=1e-13)

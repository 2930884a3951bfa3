from __future__ import annotations

import numpy as np
import pytest

from opma.domain import Square, generate_nodal_set
from opma.envelope import NodalFunction


def random_convex_values(nodes, rng, n_planes=12, noise=0.0):
    """Nodal values of a random convex function: a max of random planes
    plus a random positive definite quadratic."""
    x = nodes.points
    A = rng.normal(size=(2, 2))
    A = A @ A.T + 0.2 * np.eye(2)
    vals = 0.5 * np.einsum("ij,jk,ik->i", x, A, x)
    G = rng.normal(size=(n_planes, 2))
    c = rng.normal(size=n_planes) * 0.3
    vals = vals + np.max(x @ G.T + c, axis=1) * rng.uniform(0, 1)
    if noise:
        vals = vals + noise * rng.normal(size=len(vals))
    return vals


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def lattice9():
    """9x9 lattice including the boundary: h = 1/4 on the unit square."""
    return generate_nodal_set(Square(), 0.25)


def convex_function(nodes, rng, **kw):
    return NodalFunction(nodes, random_convex_values(nodes, rng, **kw))

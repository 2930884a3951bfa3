"""Built-in test problems with known solutions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domain import Domain, Square

Field = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ProblemSpec:
    """A Dirichlet problem ``det D^2 u = f`` in ``domain``, ``u = g`` on the
    boundary.  All fields take an ``(n, 2)`` array of points."""

    label: str
    domain: Domain
    f: Field
    g: Field
    exact: Field | None = None
    grad: Field | None = None
    singular_curves: tuple = field(default_factory=tuple)

    def check(self, n: int = 4000, seed: int = 0) -> None:
        """Sample-based sanity checks: f > 0 and the exact solution convex."""
        rng = np.random.default_rng(seed)
        lo, hi = self.domain.bounding_box()
        pts = rng.uniform(lo, hi, size=(n, 2))
        pts = pts[self.domain.contains(pts)]
        fv = self.f(pts)
        if not np.all(np.isfinite(fv)) or fv.min() <= 0:
            raise ValueError(f"{self.label}: f must be positive and finite on the domain")
        if self.exact is None:
            return
        s = 1e-3
        for e in ((1, 0), (0, 1), (1, 1), (1, -1)):
            d = s * np.asarray(e, dtype=float)
            inner = pts[self.domain.signed_distance(pts) < -2 * s]
            dd = self.exact(inner + d) - 2 * self.exact(inner) + self.exact(inner - d)
            if dd.min() < -1e-8:
                raise ValueError(f"{self.label}: exact solution is not convex")


def _r2(x):
    return x[:, 0] ** 2 + x[:, 1] ** 2


def example1() -> ProblemSpec:
    """Smooth radial solution ``u = exp(|x|^2 / 2)`` on the square."""

    def u(x):
        return np.exp(0.5 * _r2(np.atleast_2d(x)))

    def f(x):
        r2 = _r2(np.atleast_2d(x))
        return (1.0 + r2) * np.exp(r2)

    def grad(x):
        x = np.atleast_2d(x)
        return x * np.exp(0.5 * _r2(x))[:, None]

    return ProblemSpec("example1", Square(), f, u, u, grad)


def example2() -> ProblemSpec:
    """Radial solution that is C^1 but not C^2 across the circle ``|x| = 1/2``."""

    def u(x):
        r = np.sqrt(_r2(np.atleast_2d(x)))
        return np.where(r <= 0.5, 2 * r**2, 2 * (r - 0.5) ** 2 + 2 * r**2)

    def f(x):
        r = np.sqrt(_r2(np.atleast_2d(x)))
        with np.errstate(divide="ignore"):
            outer = 64.0 - 16.0 / r
        return np.where(r <= 0.5, 16.0, outer)

    def grad(x):
        x = np.atleast_2d(x)
        r = np.sqrt(_r2(x))
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.where(r <= 0.5, 4.0, 8.0 - 2.0 / r)
        return x * k[:, None]

    def circle(x):
        return np.sqrt(_r2(np.atleast_2d(x))) - 0.5

    return ProblemSpec("example2", Square(), f, u, u, grad, (circle,))


def _branch3(x):
    x = np.atleast_2d(x)
    a, b = x[:, 0], np.abs(x[:, 1])
    # first branch |y| <= |x|^3, except at the origin where it is 0/0
    return a, x[:, 1], b, (b <= np.abs(a) ** 3) & (a != 0)


def example3() -> ProblemSpec:
    """Solution in W^2_p for small p only, singular along ``y = 0`` and
    the cusps ``|y| = |x|^3``."""

    def u(x):
        a, _, b, first = _branch3(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            u1 = a**4 + 1.5 * b**2 / a**2
        u2 = 0.5 * a**2 * b ** (2 / 3) + 2 * b ** (4 / 3)
        return np.where(first, u1, u2)

    def f(x):
        a, _, b, first = _branch3(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            f1 = 36.0 - 9.0 * b**2 / a**6
            f2 = np.where(b > 0, 8 / 9 - (5 / 9) * a**2 / b ** (2 / 3), 8 / 9)
        return np.where(first, f1, f2)

    def grad(x):
        a, y, b, first = _branch3(x)
        s = np.sign(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            g1 = np.column_stack([4 * a**3 - 3 * b**2 / a**3, 3 * y / a**2])
            g2 = np.column_stack(
                [
                    a * b ** (2 / 3),
                    np.where(b > 0, s * ((a**2 / 3) * b ** (-1 / 3) + (8 / 3) * b ** (1 / 3)), 0.0),
                ]
            )
        return np.where(first[:, None], g1, g2)

    def axis(x):
        return np.atleast_2d(x)[:, 1]

    def cusp_upper(x):
        x = np.atleast_2d(x)
        return x[:, 1] - np.abs(x[:, 0]) ** 3

    def cusp_lower(x):
        x = np.atleast_2d(x)
        return x[:, 1] + np.abs(x[:, 0]) ** 3

    return ProblemSpec("example3", Square(), f, u, u, grad, (axis, cusp_upper, cusp_lower))


def quadratic(A=((1.0, 0.0), (0.0, 1.0)), domain: Domain | None = None) -> ProblemSpec:
    """``u = x^T A x / 2`` with constant right-hand side ``det A``."""
    A = np.asarray(A, dtype=float)
    if A.shape != (2, 2) or not np.allclose(A, A.T):
        raise ValueError("A must be a symmetric 2x2 matrix")
    if np.linalg.eigvalsh(A).min() <= 0:
        raise ValueError("A must be positive definite")
    det = float(np.linalg.det(A))

    def u(x):
        x = np.atleast_2d(x)
        return 0.5 * np.einsum("ij,jk,ik->i", x, A, x)

    def f(x):
        return np.full(len(np.atleast_2d(x)), det)

    def grad(x):
        return np.atleast_2d(x) @ A

    return ProblemSpec("quadratic", domain or Square(), f, u, u, grad)


def get_problem(name: str) -> ProblemSpec:
    table = {"1": example1, "2": example2, "3": example3, "quadratic": quadratic}
    key = str(name).removeprefix("example")
    if key not in table:
        raise KeyError(f"unknown problem {name!r}; choose from 1, 2, 3, quadratic")
    return table[key]()

"""Closed-form Riemannian primitives on the model manifolds.

Three manifolds are supported: the circle S^1(r), the flat rectangular torus
R^m / (L_1 Z x ... x L_m Z) and the round sphere S^2(r).  All operations are
vectorised over leading axes.  Points are float arrays with a trailing
coordinate axis:

* circle: ``(..., 1)`` angle in ``[0, 2 pi)``
* torus: ``(..., m)`` representative in ``[0, L_1) x ... x [0, L_m)``
* sphere: ``(..., 3)`` ambient vector of norm ``r``

Tangent vectors share the trailing layout (arc-length units on the circle,
ambient vectors orthogonal to the base point on the sphere).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Relative distance to the cut locus below which a pair counts as a cut pair.
CUT_TOLERANCE = 1e-9


class CutLocusError(ValueError):
    """Raised when a minimal geodesic between two points is not unique."""


class DomainError(ValueError):
    """Raised when a curve parameter lies outside its interval."""


@dataclass(frozen=True)
class GridQuadrature:
    """Quadrature nodes on a manifold with positive volume weights."""

    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate node values (leading axis = nodes)."""
        return np.tensordot(self.weights, values, axes=(0, 0))


class Manifold:
    """Common interface of the model manifolds."""

    kind: str
    dim: int
    coord_dim: int

    @property
    def injectivity_radius(self) -> float:
        raise NotImplementedError

    @property
    def volume(self) -> float:
        raise NotImplementedError

    @property
    def cut_epsilon(self) -> float:
        return CUT_TOLERANCE * self.injectivity_radius

    # -- primitives implemented per manifold -------------------------------
    def canonical(self, p):
        raise NotImplementedError

    def distance(self, x, y):
        raise NotImplementedError

    def exp_map(self, x, v):
        raise NotImplementedError

    def log_pair(self, x, y):
        """Return ``(log_x(y), cut_mask)`` without raising.

        Entries flagged in ``cut_mask`` hold an arbitrary (finite) vector.
        """
        raise NotImplementedError

    def volume_distortion_from_distance(self, d):
        raise NotImplementedError

    def scalar_curvature(self, x):
        raise NotImplementedError

    def make_grid(self, n: int) -> GridQuadrature:
        raise NotImplementedError

    def frame(self, x):
        """Orthonormal tangent frame at ``x``, shape ``(..., coord_dim, dim)``."""
        raise NotImplementedError

    # -- derived operations ------------------------------------------------
    def norm(self, v):
        return np.linalg.norm(v, axis=-1)

    def log_map(self, x, y):
        v, cut = self.log_pair(x, y)
        if np.any(cut):
            raise CutLocusError("points lie in each other's cut locus")
        return v

    def is_cut_pair(self, x, y):
        return self.log_pair(x, y)[1]

    def geodesic_point(self, x, y, a: float, b: float, s):
        """Point at time ``s`` of the minimal geodesic with γ(a)=x, γ(b)=y."""
        if not a < b:
            raise DomainError("need a < b")
        s_arr = np.asarray(s, dtype=float)
        if np.any(s_arr < a) or np.any(s_arr > b):
            raise DomainError(f"s outside [{a}, {b}]")
        v = self.log_map(x, y)
        frac = ((s_arr - a) / (b - a))[..., None]
        return self.exp_map(x, frac * v)

    def volume_distortion(self, x, y):
        """Jacobian determinant μ(x, y) of exp_y at log_y(x)."""
        v = self.log_map(y, x)
        return self.volume_distortion_from_distance(self.norm(v))

    def pairwise_distance(self, xs, ys):
        """Distance matrix between two point lists."""
        return self.distance(xs[:, None, :], ys[None, :, :])

    @property
    def curvature_is_constant(self) -> bool:
        return True

    @property
    def constant_scalar_curvature(self) -> float:
        """The scalar curvature value of a homogeneous manifold."""
        return float(self.scalar_curvature(np.zeros((1, self.coord_dim)) + self._base_point())[0])

    def _base_point(self):
        return np.zeros(self.coord_dim)


def _wrap(delta, period):
    """Nearest-image reduction of a coordinate difference to [-L/2, L/2)."""
    return delta - period * np.floor(delta / period + 0.5)


class FlatTorus(Manifold):
    """Flat torus with periods ``L_1..L_m``."""

    kind = "flat-torus"

    def __init__(self, periods):
        periods = np.atleast_1d(np.asarray(periods, dtype=float))
        if periods.ndim != 1 or np.any(periods <= 0):
            raise ValueError("periods must be positive")
        self.periods = periods
        self.dim = len(periods)
        self.coord_dim = self.dim

    def __repr__(self):
        return f"FlatTorus(periods={self.periods.tolist()})"

    @property
    def injectivity_radius(self) -> float:
        return float(self.periods.min() / 2)

    @property
    def volume(self) -> float:
        return float(np.prod(self.periods))

    def canonical(self, p):
        return np.mod(p, self.periods)

    def _delta(self, x, y):
        return _wrap(np.asarray(y, float) - np.asarray(x, float), self.periods)

    def distance(self, x, y):
        return np.linalg.norm(self._delta(x, y), axis=-1)

    def exp_map(self, x, v):
        return self.canonical(np.asarray(x, float) + v)

    def log_pair(self, x, y):
        delta = self._delta(x, y)
        tol = CUT_TOLERANCE * self.periods
        cut = np.any(np.abs(np.abs(delta) - self.periods / 2) <= tol, axis=-1)
        return delta, cut

    def volume_distortion_from_distance(self, d):
        return np.ones_like(np.asarray(d, float))

    def scalar_curvature(self, x):
        return np.zeros(np.shape(x)[:-1])

    def make_grid(self, n: int) -> GridQuadrature:
        if n < 2:
            raise ValueError("grid resolution must be >= 2")
        axes = [np.arange(n) * (L / n) for L in self.periods]
        mesh = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([g.ravel() for g in mesh], axis=-1)
        weights = np.full(len(nodes), self.volume / n**self.dim)
        return GridQuadrature(nodes, weights)

    def frame(self, x):
        shape = np.shape(x)[:-1] + (self.dim, self.dim)
        return np.broadcast_to(np.eye(self.dim), shape)


class Circle(Manifold):
    """Circle of radius ``r`` parametrised by angle."""

    kind = "circle"
    dim = 1
    coord_dim = 1

    def __init__(self, radius: float = 1.0):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)

    def __repr__(self):
        return f"Circle(radius={self.radius})"

    @property
    def injectivity_radius(self) -> float:
        return np.pi * self.radius

    @property
    def volume(self) -> float:
        return 2 * np.pi * self.radius

    def canonical(self, p):
        return np.mod(p, 2 * np.pi)

    def _arc(self, x, y):
        return self.radius * _wrap(np.asarray(y, float) - np.asarray(x, float), 2 * np.pi)

    def distance(self, x, y):
        return np.abs(self._arc(x, y))[..., 0]

    def exp_map(self, x, v):
        return self.canonical(np.asarray(x, float) + np.asarray(v, float) / self.radius)

    def log_pair(self, x, y):
        v = self._arc(x, y)
        cut = np.abs(np.abs(v[..., 0]) - self.injectivity_radius) <= self.cut_epsilon
        return v, cut

    def volume_distortion_from_distance(self, d):
        return np.ones_like(np.asarray(d, float))

    def scalar_curvature(self, x):
        return np.zeros(np.shape(x)[:-1])

    def make_grid(self, n: int) -> GridQuadrature:
        if n < 2:
            raise ValueError("grid resolution must be >= 2")
        nodes = (2 * np.pi / n) * np.arange(n)[:, None]
        return GridQuadrature(nodes, np.full(n, self.volume / n))

    def frame(self, x):
        return np.ones(np.shape(x)[:-1] + (1, 1))


class Sphere(Manifold):
    """Round 2-sphere of radius ``r`` embedded in R^3."""

    kind = "sphere-2"
    dim = 2
    coord_dim = 3

    def __init__(self, radius: float = 1.0):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)

    def __repr__(self):
        return f"Sphere(radius={self.radius})"

    @property
    def injectivity_radius(self) -> float:
        return np.pi * self.radius

    @property
    def volume(self) -> float:
        return 4 * np.pi * self.radius**2

    def canonical(self, p):
        p = np.asarray(p, float)
        return self.radius * p / np.linalg.norm(p, axis=-1, keepdims=True)

    def _angle(self, x, y):
        # atan2 form stays accurate near 0 and pi
        xu = np.asarray(x, float) / self.radius
        yu = np.asarray(y, float) / self.radius
        cross = np.linalg.norm(np.cross(xu, yu), axis=-1)
        dot = np.sum(xu * yu, axis=-1)
        return np.arctan2(cross, dot)

    def distance(self, x, y):
        return self.radius * self._angle(x, y)

    def pairwise_distance(self, xs, ys):
        xu = xs / self.radius
        yu = ys / self.radius
        dot = np.clip(xu @ yu.T, -1.0, 1.0)
        ang = np.arccos(dot)
        # arccos loses precision for nearly parallel vectors
        close = (dot > 0.999) | (dot < -0.999)
        if np.any(close):
            i, j = np.nonzero(close)
            ang[i, j] = self._angle(xs[i], ys[j])
        return self.radius * ang

    def exp_map(self, x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        nv = np.linalg.norm(v, axis=-1, keepdims=True)
        theta = nv / self.radius
        safe = np.where(nv > 0, nv, 1.0)
        direction = np.where(nv > 0, v / safe, 0.0)
        p = np.cos(theta) * x + self.radius * np.sin(theta) * direction
        return self.canonical(p)

    def log_pair(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        theta = self._angle(x, y)
        xu = x / self.radius
        perp = y / self.radius - np.sum(xu * y / self.radius, axis=-1, keepdims=True) * xu
        pn = np.linalg.norm(perp, axis=-1, keepdims=True)
        safe = np.where(pn > 0, pn, 1.0)
        v = np.where(pn > 0, perp / safe, 0.0) * (self.radius * theta)[..., None]
        cut = self.radius * (np.pi - theta) <= self.cut_epsilon
        return v, cut

    def volume_distortion_from_distance(self, d):
        u = np.asarray(d, float) / self.radius
        safe = np.where(u > 0, u, 1.0)
        return np.where(u > 1e-4, np.sin(safe) / safe, 1 - u**2 / 6 + u**4 / 120)

    def scalar_curvature(self, x):
        return np.full(np.shape(x)[:-1], 2.0 / self.radius**2)

    def make_grid(self, n: int) -> GridQuadrature:
        if n < 2:
            raise ValueError("grid resolution must be >= 2")
        golden = (1 + 5**0.5) / 2
        i = np.arange(n)
        z = 1 - (2 * i + 1) / n
        rho = np.sqrt(1 - z**2)
        phi = 2 * np.pi * i / golden
        nodes = self.radius * np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)
        return GridQuadrature(nodes, np.full(n, self.volume / n))

    def _base_point(self):
        return np.array([0.0, 0.0, self.radius])

    def frame(self, x):
        xu = np.asarray(x, float) / self.radius
        ez = np.array([0.0, 0.0, 1.0])
        ex = np.array([1.0, 0.0, 0.0])
        polar = np.abs(xu[..., 2:3]) > 0.9
        ref = np.where(polar, ex, ez)
        e1 = np.cross(ref, xu)
        e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
        e2 = np.cross(xu, e1)
        return np.stack([e1, e2], axis=-1)


def tangent_from_coordinates(M: Manifold, x, coords):
    """Map frame coordinates (..., dim) at ``x`` to a tangent vector."""
    return np.einsum("...ij,...j->...i", M.frame(x), coords)


def make_manifold(kind: str, radius: float = 1.0, periods=None) -> Manifold:
    if kind == "circle":
        return Circle(radius)
    if kind in ("flat-torus", "torus"):
        if periods is None:
            raise ValueError("flat torus needs periods")
        return FlatTorus(periods)
    if kind in ("sphere-2", "sphere"):
        return Sphere(radius)
    raise ValueError(f"unknown manifold kind {kind!r}")

"""Vector bundles with metric connections over the model manifolds.

Fibres are identified with R^k or C^k through an orthonormal frame at each
point: the standard basis for the trivialised bundles on circle and torus, and
``Manifold.frame`` for the tangent bundle of the sphere.  Every fibre map is
the k x k matrix of the linear map between those frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Circle, FlatTorus, Manifold, Sphere
from .linalg import expm


# ---------------------------------------------------------------------------
# connections


class TrivialConnection:
    name = "trivial"

    def segment_transport(self, M, x, y, f0, f1, rank, dtype):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1], np.shape(f0), np.shape(f1))
        return np.broadcast_to(np.eye(rank, dtype=dtype), shape + (rank, rank)).copy()


@dataclass
class ConstantFormConnection:
    """Flat connection d + A ⊗ G with a constant covector ``A``.

    ``generator`` must be anti-symmetric (real) or anti-Hermitian (complex);
    the covector pairs with the displacement in arc-length / coordinate units.
    """

    form: np.ndarray
    generator: np.ndarray
    name: str = "constant-form"

    def __post_init__(self):
        self.form = np.atleast_1d(np.asarray(self.form, dtype=float))
        self.generator = np.asarray(self.generator)
        g = self.generator
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError("generator must be square")
        if not np.allclose(g, -g.conj().T, atol=1e-14):
            raise ValueError("generator must be anti-Hermitian")

    def segment_transport(self, M, x, y, f0, f1, rank, dtype):
        if not isinstance(M, (Circle, FlatTorus)):
            raise ValueError("constant-form connections need a flat manifold")
        v, _ = M.log_pair(x, y)
        phase = (v @ self.form) * (np.asarray(f1) - np.asarray(f0))
        return expm(-phase[..., None, None] * self.generator).astype(dtype, copy=False)


class LeviCivitaConnection:
    """Levi-Civita connection on the tangent bundle of the sphere."""

    name = "levi-civita"

    def segment_transport(self, M, x, y, f0, f1, rank, dtype):
        if not isinstance(M, Sphere) or rank != 2:
            raise ValueError("levi-civita transport is implemented for TS^2 only")
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        v, _ = M.log_pair(x, y)
        f0 = np.asarray(f0, float)
        f1 = np.asarray(f1, float)
        p0 = M.exp_map(x, f0[..., None] * v)
        p1 = M.exp_map(x, f1[..., None] * v)
        xu = x / M.radius
        axis = np.cross(xu, v)
        an = np.linalg.norm(axis, axis=-1, keepdims=True)
        axis = np.where(an > 0, axis / np.where(an > 0, an, 1.0), 0.0)
        phi = (f1 - f0) * np.linalg.norm(v, axis=-1) / M.radius
        frame0 = M.frame(p0)
        frame1 = M.frame(p1)
        # Rodrigues rotation of each frame vector at p0
        axis = np.broadcast_to(axis[..., :, None], frame0.shape)
        c = np.cos(phi)[..., None, None]
        s = np.sin(phi)[..., None, None]
        rotated = (
            frame0 * c
            + np.cross(axis, frame0, axis=-2) * s
            + axis * np.sum(axis * frame0, axis=-2, keepdims=True) * (1 - c)
        )
        return np.einsum("...ai,...aj->...ij", frame1, rotated).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# potentials


@dataclass
class Potential:
    """Field of symmetric (Hermitian) endomorphisms ``x -> V(x)``."""

    func: Callable[[np.ndarray], np.ndarray]
    rank: int
    is_scalar: bool = False
    is_zero: bool = False
    name: str = "custom"
    scalar_func: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, x):
        return self.func(np.asarray(x, float))

    def scalar_values(self, x):
        """Values v(x) for potentials of the form v(x)·id."""
        if not self.is_scalar:
            raise ValueError("potential is not scalar")
        return self.scalar_func(np.asarray(x, float))

    def min_eigenvalue(self, x):
        if self.is_scalar:
            return self.scalar_values(x)
        return np.linalg.eigvalsh(self(x))[..., 0]


def scalar_potential(v: Callable, rank: int, name: str = "custom", zero: bool = False) -> Potential:
    eye = np.eye(rank)

    def func(x):
        return v(x)[..., None, None] * eye

    return Potential(func, rank, is_scalar=True, is_zero=zero, name=name, scalar_func=v)


def _first_angle(M: Manifold, x):
    """Angle-like coordinate used by the demo potentials."""
    if isinstance(M, Circle):
        return x[..., 0]
    if isinstance(M, FlatTorus):
        return 2 * np.pi * x[..., 0] / M.periods[0]
    return np.arccos(np.clip(x[..., 2] / M.radius, -1, 1))


POTENTIALS: dict[str, Callable[..., Potential]] = {}


def register_potential(name):
    def deco(factory):
        POTENTIALS[name] = factory
        return factory

    return deco


@register_potential("zero")
def _zero(M, rank, shift=0.0):
    if shift == 0:
        return scalar_potential(lambda x: np.zeros(np.shape(x)[:-1]), rank, "zero", zero=True)
    return scalar_potential(lambda x: np.full(np.shape(x)[:-1], float(shift)), rank, "zero")


@register_potential("constant")
def _constant(M, rank, value=1.0, shift=0.0):
    c = float(value) + float(shift)
    return scalar_potential(lambda x: np.full(np.shape(x)[:-1], c), rank, "constant")


@register_potential("cos-theta")
def _cos_theta(M, rank, amplitude=1.0, shift=0.0):
    amp, sh = float(amplitude), float(shift)
    return scalar_potential(lambda x: amp * np.cos(_first_angle(M, x)) + sh, rank, "cos-theta")


_DEMO = np.array([[1.0, 0.3], [0.3, 2.0]])


@register_potential("matrix-demo")
def _matrix_demo(M, rank, shift=0.0):
    """Rotating 2x2 potential R(θ) [[1, .3], [.3, 2]] R(θ)^T (+ shift·id).

    Eigenvalues are the same at every point; eigenvectors turn with θ so the
    values at different points do not commute.
    """
    if rank != 2:
        raise ValueError("matrix-demo needs rank 2")
    sh = float(shift)

    def func(x):
        th = _first_angle(M, x)
        c, s = np.cos(th), np.sin(th)
        rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
        return rot @ _DEMO @ np.swapaxes(rot, -1, -2) + sh * np.eye(2)

    return Potential(func, 2, name="matrix-demo")


def make_potential(name: str, M: Manifold, rank: int, **params) -> Potential:
    try:
        factory = POTENTIALS[name]
    except KeyError:
        raise ValueError(f"unknown potential {name!r}") from None
    return factory(M, rank, **params)


def min_eigenvalue_potential(V: Potential) -> Potential:
    """Scalar rank-1 potential x -> smallest eigenvalue of V(x)."""
    return scalar_potential(V.min_eigenvalue, 1, name=f"min-eig({V.name})")


# ---------------------------------------------------------------------------
# bundle


@dataclass
class Bundle:
    manifold: Manifold
    rank: int = 1
    connection: object = field(default_factory=TrivialConnection)
    potential: Potential | None = None

    def __post_init__(self):
        if self.potential is None:
            self.potential = make_potential("zero", self.manifold, self.rank)
        if self.potential.rank != self.rank:
            raise ValueError("potential rank does not match bundle rank")

    @property
    def dtype(self):
        gen = getattr(self.connection, "generator", None)
        if gen is not None and np.iscomplexobj(gen):
            return np.complex128
        return np.float64

    @property
    def has_trivial_transport(self) -> bool:
        return isinstance(self.connection, TrivialConnection)

    def potential_at(self, x):
        return self.potential(x).astype(self.dtype, copy=False)

    def segment_transport(self, x, y, f0, f1):
        """τ from γ(f0) to γ(f1) on the minimal geodesic x -> y, f in [0, 1]."""
        return self.connection.segment_transport(self.manifold, x, y, f0, f1, self.rank, self.dtype)

    def transport(self, segment, s, s2):
        """Parallel transport τ_s^{s2} along the geodesic segment (x, y, a, b)."""
        x, y, a, b = segment
        self.manifold.log_map(x, y)  # raises on cut-locus pairs
        if not (a <= s <= b and a <= s2 <= b):
            from .geometry import DomainError

            raise DomainError("transport times must lie in the segment interval")
        return self.segment_transport(x, y, (s - a) / (b - a), (s2 - a) / (b - a))


def gauss_legendre(q: int, a: float = 0.0, b: float = 1.0):
    nodes, weights = np.polynomial.legendre.leggauss(q)
    half = 0.5 * (b - a)
    return a + half * (nodes + 1), half * weights


def conjugated_potential_integral(B: Bundle, x, y, t: float, q: int = 4):
    """∫_0^t τ_s^t V(γ(s)) τ_t^s ds in End(E_y), γ the geodesic x -> y on [0, t].

    Gauss-Legendre with ``q`` nodes.  Broadcasts over point arrays.
    """
    M = B.manifold
    fr, w = gauss_legendre(q)
    shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
    k = B.rank
    total = np.zeros(shape + (k, k), dtype=B.dtype)
    if B.potential.is_zero:
        return total
    v, _ = M.log_pair(x, y)
    for f, wi in zip(fr, w):
        p = M.exp_map(x, f * v)
        if B.potential.is_scalar:
            total += (t * wi) * B.potential_at(p)
            continue
        u = B.segment_transport(x, y, 1.0, f)  # E_y -> E_γ(s)
        total += (t * wi) * (np.swapaxes(u.conj(), -1, -2) @ B.potential_at(p) @ u)
    return total


# ---------------------------------------------------------------------------
# polygon-level operations (polygon objects are duck-typed)


def transport_along(B: Bundle, polygon, s: float, s2: float):
    """τ(γ)_s^{s2} along a geodesic polygon, composing per-segment transports."""
    if s == s2:
        return np.eye(B.rank, dtype=B.dtype)
    if s2 < s:
        return transport_along(B, polygon, s2, s).conj().T
    sigma = polygon.partition.sigma
    result = np.eye(B.rank, dtype=B.dtype)
    for j in range(1, len(sigma)):
        lo, hi = sigma[j - 1], sigma[j]
        a, b = max(lo, s), min(hi, s2)
        if a >= b:
            continue
        x, y = polygon.vertices[j - 1], polygon.vertices[j]
        step = B.segment_transport(x, y, (a - lo) / (hi - lo), (b - lo) / (hi - lo))
        result = step @ result
    return result


def segment_potential_factor(B: Bundle, polygon, j: int, q: int = 4):
    """exp(-∫_{σ_{j-1}}^{σ_j} τ_s^L V(γ(s)) τ_L^s ds) acting on E_{γ(L)}.

    ``j`` is 1-based, matching the segment numbering of the partition.
    """
    sigma = polygon.partition.sigma
    lo, hi = sigma[j - 1], sigma[j]
    L = sigma[-1]
    x, y = polygon.vertices[j - 1], polygon.vertices[j]
    k = B.rank
    if B.potential.is_zero:
        return np.eye(k, dtype=B.dtype)
    fr, w = gauss_legendre(q)
    M = B.manifold
    v = M.log_map(x, y)
    tail = transport_along(B, polygon, hi, L)  # E_{γ(σ_j)} -> E_{γ(L)}
    acc = np.zeros((k, k), dtype=B.dtype)
    for f, wi in zip(fr, w):
        p = M.exp_map(x, f * v)
        u = tail @ B.segment_transport(x, y, f, 1.0)  # E_γ(s) -> E_γ(L)
        acc += ((hi - lo) * wi) * (u @ B.potential_at(p) @ u.conj().T)
    return expm(-acc)


def holonomy(B: Bundle, polygon):
    """Parallel transport around a closed polygon, E_{γ(0)} -> E_{γ(0)}."""
    M = B.manifold
    if M.distance(polygon.vertices[0], polygon.vertices[-1]) > 1e-12 * max(M.injectivity_radius, 1):
        raise ValueError("polygon is not closed")
    L = polygon.partition.length
    return transport_along(B, polygon, 0.0, L)

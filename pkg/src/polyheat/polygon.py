"""Partitions, geodesic polygons and the path-space weights built from them."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import CutLocusError, DomainError, Manifold, tangent_from_coordinates


@dataclass(frozen=True)
class Partition:
    """Tuple of positive step durations (t_1, ..., t_r)."""

    steps: tuple

    def __post_init__(self):
        steps = tuple(float(t) for t in self.steps)
        if any(t <= 0 for t in steps):
            raise ValueError("partition steps must be positive")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def uniform(cls, t: float, r: int) -> "Partition":
        if r < 1:
            raise ValueError("need r >= 1")
        return cls((t / r,) * r)

    @classmethod
    def fine_then_last(cls, t: float, last: float, r: int) -> "Partition":
        """Fine uniform partition of [0, t - last] followed by one step ``last``."""
        if r < 2 or not 0 < last < t:
            raise ValueError("need r >= 2 and 0 < last < t")
        return cls(((t - last) / (r - 1),) * (r - 1) + (last,))

    def __len__(self) -> int:
        return len(self.steps)

    def __add__(self, other: "Partition") -> "Partition":
        return Partition(self.steps + other.steps)

    @property
    def length(self) -> float:
        return float(sum(self.steps))

    @property
    def mesh(self) -> float:
        return max(self.steps) if self.steps else 0.0

    @cached_property
    def sigma(self) -> np.ndarray:
        """Cumulative times σ_0 = 0, σ_1, ..., σ_r = L."""
        return np.concatenate([[0.0], np.cumsum(self.steps)])


def normalizer(T: Partition, m: int) -> float:
    """Z(T, m) = ∏ (4π t_j)^{m/2}."""
    return float(np.prod([(4 * np.pi * t) ** (m / 2) for t in T.steps]))


@dataclass(frozen=True)
class CutoffChi:
    """Smooth monotone cutoff on squared lengths, 1 on [0, a], 0 on [b, ∞)."""

    injrad: float

    @property
    def inner(self) -> float:
        return self.injrad**2 / 8

    @property
    def outer(self) -> float:
        return 0.2499 * self.injrad**2

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        s = (u - self.inner) / (self.outer - self.inner)
        return _smooth_step_down(s)


def _g(s):
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, np.exp(-1.0 / safe), 0.0)


def _smooth_step_down(s):
    """ψ(s) = g(1-s) / (g(s) + g(1-s)): 1 for s <= 0, 0 for s >= 1."""
    s = np.clip(s, -1.0, 2.0)
    a, b = _g(1 - s), _g(s)
    return a / (a + b)


class GeodesicPolygon:
    """Piecewise minimal geodesic through ``vertices`` with timing ``partition``."""

    def __init__(self, manifold: Manifold, partition: Partition, vertices):
        vertices = np.asarray(vertices, dtype=float)
        if len(vertices) != len(partition) + 1:
            raise ValueError("need r + 1 vertices for a partition with r steps")
        cut = manifold.is_cut_pair(vertices[:-1], vertices[1:])
        if np.any(cut):
            raise CutLocusError(f"hops {np.nonzero(cut)[0].tolist()} join cut points")
        self.manifold = manifold
        self.partition = partition
        self.vertices = vertices

    def hop_lengths(self) -> np.ndarray:
        return self.manifold.distance(self.vertices[:-1], self.vertices[1:])

    def segment(self, j: int):
        """(x_{j-1}, x_j, σ_{j-1}, σ_j) for the 1-based segment index ``j``."""
        s = self.partition.sigma
        return self.vertices[j - 1], self.vertices[j], s[j - 1], s[j]

    def __call__(self, s: float):
        sigma = self.partition.sigma
        if s < 0 or s > sigma[-1]:
            raise DomainError("polygon parameter out of range")
        hit = int(np.searchsorted(sigma, s))
        if sigma[hit] == s:
            return self.vertices[hit]
        j = max(hit, 1)
        x, y, a, b = self.segment(j)
        return self.manifold.geodesic_point(x, y, a, b, s)

    def energy(self) -> float:
        return energy(self)

    def rotated(self, shift: int) -> "GeodesicPolygon":
        """Closed polygon with the vertex list cyclically rotated."""
        body = self.vertices[:-1]
        body = np.roll(body, -shift, axis=0)
        steps = np.roll(np.asarray(self.partition.steps), -shift)
        return GeodesicPolygon(self.manifold, Partition(tuple(steps)), np.vstack([body, body[:1]]))


def energy(polygon: GeodesicPolygon) -> float:
    """E = ½ Σ d(x_{j-1}, x_j)² / t_j."""
    d = polygon.hop_lengths()
    return float(0.5 * np.sum(d**2 / np.asarray(polygon.partition.steps)))


def cutoff_product(polygon: GeodesicPolygon, chi: CutoffChi) -> float:
    """χ(γ, T) = ∏ χ(d(x_{j-1}, x_j)²)."""
    return float(np.prod(chi(polygon.hop_lengths() ** 2)))


def measure_product(polygon: GeodesicPolygon, lam: float) -> float:
    """μ(γ, T)^{(Λ-1)/2} with μ(γ, T) = ∏ μ(x_{j-1}, x_j)."""
    if lam == 1:
        return 1.0
    mu = polygon.manifold.volume_distortion_from_distance(polygon.hop_lengths())
    return float(np.prod(mu) ** ((lam - 1) / 2))


@dataclass
class PathBatch:
    """Start-pinned polygons drawn from the normal-coordinate Gaussian.

    ``vertices`` has shape ``(n, r + 1, coord_dim)``; ``alive`` is False for
    paths with a step of length >= injrad (those carry weight zero).
    """

    partition: Partition
    vertices: np.ndarray
    step_lengths: np.ndarray
    alive: np.ndarray


def sample_paths(M: Manifold, x0, T: Partition, n: int, rng: np.random.Generator) -> PathBatch:
    """Draw ``n`` polygons with ξ_j ~ N(0, 2 t_j I_m) in T_{x_{j-1}} M.

    Normal draws are consumed step by step, each step taking an ``(n, m)``
    block, so a stream gives the same paths whatever the caller does later.
    """
    x0 = np.asarray(x0, dtype=float)
    r = len(T)
    verts = np.empty((n, r + 1, M.coord_dim))
    verts[:, 0] = x0
    lengths = np.empty((n, r))
    for j, t in enumerate(T.steps):
        coords = rng.standard_normal((n, M.dim)) * np.sqrt(2 * t)
        xi = tangent_from_coordinates(M, verts[:, j], coords)
        lengths[:, j] = np.linalg.norm(coords, axis=-1)
        verts[:, j + 1] = M.exp_map(verts[:, j], xi)
    alive = np.all(lengths < M.injectivity_radius * (1 - 1e-9), axis=1)
    return PathBatch(T, verts, lengths, alive)


def sample_pinned_start(M: Manifold, x0, T: Partition, rng: np.random.Generator):
    """One sampled polygon and the log of its residual weight (0 or -inf).

    Steps beyond the injectivity radius leave normal-coordinate range; such a
    draw returns weight zero (and ``None`` if its vertices meet a cut pair).
    """
    batch = sample_paths(M, x0, T, 1, rng)
    log_w = 0.0 if batch.alive[0] else -np.inf
    try:
        return GeodesicPolygon(M, T, batch.vertices[0]), log_w
    except CutLocusError:
        return None, -np.inf

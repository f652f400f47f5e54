"""Chernoff products of step operators on sections.

Grid quadrature gives the deterministic path: every step operator becomes the
weighted matrix ``K_j W`` and a product of steps is a matrix chain.  The Monte
Carlo path samples start-pinned geodesic polygons and averages the weighted
transport chain applied to ``u`` at the endpoint.

Both paths are deterministic for a fixed seed.  Matrix rows are assembled in
fixed chunks and Monte Carlo paths are drawn in fixed chunks of
``MC_CHUNK`` paths with one Philox stream per chunk; the worker count only
decides how many chunks are in flight.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .bundle import Bundle, Potential, scalar_potential
from .geometry import GridQuadrature
from .kernels import StepKernelConfig, chain_matrices, kernel_chain, step_amplitude
from .linalg import op_norm
from .polygon import Partition, sample_paths

#: Paths per Monte Carlo chunk; each chunk owns one random stream.
MC_CHUNK = 1 << 14


class PreconditionError(ValueError):
    """Raised when the comparison function is not below the potential."""


@dataclass
class KernelMatrix:
    """Dense ``(kN, kN)`` matrix whose ``(i, j)`` block is ``k(x_i, x_j) w_j``."""

    matrix: np.ndarray
    grid: GridQuadrature
    rank: int

    @property
    def n_nodes(self) -> int:
        return len(self.grid)

    def blocks(self) -> np.ndarray:
        """View as ``(N, N, k, k)`` with the weights still applied."""
        n, k = self.n_nodes, self.rank
        return self.matrix.reshape(n, k, n, k).transpose(0, 2, 1, 3)

    def kernel_values(self) -> np.ndarray:
        """Node-sampled kernel blocks ``k(x_i, x_j)`` of shape ``(N, N, k, k)``."""
        return self.blocks() / self.grid.weights[None, :, None, None]

    def apply(self, u):
        return _unflatten(self.matrix @ _flatten(u, self.rank), u)

    def diagonal_traces(self) -> np.ndarray:
        """tr k(x_i, x_i) at every node."""
        n, k = self.n_nodes, self.rank
        d = np.diagonal(self.matrix).reshape(n, k).sum(axis=1)
        return d / self.grid.weights

    def trace(self):
        """Σ_i w_i tr k(x_i, x_i)."""
        return np.trace(self.matrix)


def _flatten(u, rank: int) -> np.ndarray:
    u = np.asarray(u)
    if u.ndim == 1 and rank == 1:
        return u
    if u.ndim != 2 or u.shape[1] != rank:
        raise ValueError(f"section must have shape (N, {rank})")
    return u.reshape(-1)


def _unflatten(flat, like):
    return flat.reshape(np.shape(like))


def heat_kernel_matrix(cfg: StepKernelConfig, T: Partition, grid: GridQuadrature, workers: int = 1) -> KernelMatrix:
    """Node-sampled k_T as the chain (K_1 W)(K_2 W)...(K_r W)."""
    if len(T) < 1:
        raise ValueError("heat_kernel_matrix needs r >= 1")
    return KernelMatrix(kernel_chain(cfg, T, grid, workers), grid, cfg.bundle.rank)


def compose_apply(cfg: StepKernelConfig, T: Partition | None, u, grid: GridQuadrature, workers: int = 1):
    """(Ŵ_{t_1} ... Ŵ_{t_r} u) at the grid nodes.

    ``u`` holds node values, shape ``(N,)`` for line bundles or ``(N, k)``.
    An empty partition (``None`` or zero steps) returns ``u`` unchanged.
    """
    if T is None or len(T) == 0:
        return np.array(u, copy=True)
    k = cfg.bundle.rank
    vec = _flatten(u, k).astype(np.result_type(cfg.bundle.dtype, np.asarray(u).dtype))
    for mat in reversed(chain_matrices(cfg, T, grid, workers)):
        vec = mat @ vec
    return _unflatten(vec, u)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MCResult:
    """Mean, standard error and bookkeeping of a Monte Carlo run.

    ``escape_bound`` is the union bound Σ_j P(|ξ_j| >= injrad) on the
    probability that a path has a step outside normal-coordinate range.
    Such paths get weight zero, so for variants without the cutoff it
    bounds the neglected mass relative to sup |u| and the step weights.
    """

    estimate: np.ndarray
    stderr: np.ndarray
    paths: int
    zero_weight: int
    escape_bound: float = 0.0


def escape_bound(M, T: Partition) -> float:
    """Σ_j P(|ξ_j| >= injrad) for ξ_j ~ N(0, 2 t_j I_m)."""
    R = M.injectivity_radius
    return float(sum(scipy.stats.chi2.sf(R**2 / (2 * t), M.dim) for t in T.steps))


def _chunk_stream(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chunk])))


def path_weights(cfg: StepKernelConfig, batch):
    """Ordered products ∏_j a(x_{j-1}, x_j) μ(x_{j-1}, x_j) for a path batch.

    ``a`` is the step amplitude (everything in the step kernel except the
    Gaussian), mapping E_{x_j} -> E_{x_{j-1}}; the factor μ is the Jacobian of
    the normal-coordinate proposal.  Returns ``(n, k, k)`` maps E_{x_r} -> E_{x_0}.
    """
    M = cfg.manifold
    k = cfg.bundle.rank
    v = batch.vertices
    n = v.shape[0]
    acc = np.broadcast_to(np.eye(k, dtype=cfg.bundle.dtype), (n, k, k)).copy()
    for j, t in enumerate(batch.partition.steps):
        d = batch.step_lengths[:, j]
        amp, _ = step_amplitude(cfg, t, v[:, j], v[:, j + 1], d)
        mu = M.volume_distortion_from_distance(d)
        acc = acc @ (amp * mu[:, None, None])
    acc[~batch.alive] = 0
    return acc


def _mc_chunk(cfg, T, u, x0, seed, chunk, size):
    rng = _chunk_stream(seed, chunk)
    batch = sample_paths(cfg.manifold, x0, T, size, rng)
    w = path_weights(cfg, batch)
    end = np.asarray(u(batch.vertices[:, -1]))
    if end.ndim == 1:
        end = end[:, None]
    vals = np.einsum("nij,nj->ni", w, end)
    mean = vals.mean(axis=0)
    m2 = (np.abs(vals - mean) ** 2).sum(axis=0)
    return size, mean, m2, int(np.count_nonzero(~batch.alive))


def compose_apply_mc(
    cfg: StepKernelConfig,
    T: Partition,
    u,
    x0,
    paths: int,
    seed: int,
    workers: int = 1,
) -> MCResult:
    """Monte Carlo estimate of (Ŵ_{t_1} ... Ŵ_{t_r} u)(x_0).

    ``u`` is a callable mapping points ``(n, coord_dim)`` to fibre values
    ``(n,)`` or ``(n, k)`` in the frames of those points.  Chunk statistics
    are merged in chunk order (Chan's pairwise update), so the result does
    not depend on ``workers``.
    """
    if paths < 2:
        raise ValueError("need at least two paths")
    x0 = np.asarray(x0, dtype=float)
    sizes = [min(MC_CHUNK, paths - lo) for lo in range(0, paths, MC_CHUNK)]

    def job(c):
        return _mc_chunk(cfg, T, u, x0, seed, c, sizes[c])

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    else:
        parts = [job(c) for c in range(len(sizes))]

    count, mean, m2, dead = parts[0]
    for nb, mb, m2b, deadb in parts[1:]:
        total = count + nb
        delta = mb - mean
        mean = mean + delta * (nb / total)
        m2 = m2 + m2b + np.abs(delta) ** 2 * (count * nb / total)
        count, dead = total, dead + deadb
    stderr = np.sqrt(m2 / (count - 1) / count)
    return MCResult(mean, stderr, count, dead, escape_bound(cfg.manifold, T))


# ---------------------------------------------------------------------------
# traces and comparison kernels


def trace_estimate(cfg: StepKernelConfig, T: Partition, grid: GridQuadrature, workers: int = 1) -> float:
    """Σ_i w_i tr k_T(x_i, x_i): the quadrature of the closed-polygon integral."""
    if len(T) < 1:
        raise ValueError("trace_estimate needs r >= 1")
    return float(np.real(heat_kernel_matrix(cfg, T, grid, workers).trace()))


def _as_potential(v, rank: int = 1) -> Potential:
    if isinstance(v, Potential):
        if not v.is_scalar:
            raise ValueError("comparison potential must be scalar")
        return scalar_potential(v.scalar_values, rank, name=v.name, zero=v.is_zero)
    if np.isscalar(v):
        c = float(v)
        return scalar_potential(lambda x: np.full(np.shape(x)[:-1], c), rank, name=f"const({c})", zero=c == 0)
    return scalar_potential(v, rank, name="comparison")


def comparison_bundle(B: Bundle, v) -> Bundle:
    """Trivial line bundle over the same manifold with potential ``v``."""
    return Bundle(B.manifold, 1, potential=_as_potential(v))


def hsu_compare(cfg: StepKernelConfig, v, T: Partition, grid: GridQuadrature, workers: int = 1) -> float:
    """max over node pairs of |k_T(x, y)|_op - k̃_T(x, y).

    k̃_T is built for the scalar operator Δ + v with the same variant and
    partition.  ``v`` may be a scalar, a callable on points or a scalar
    :class:`Potential`; it must not exceed the smallest eigenvalue of the
    bundle potential at any node.
    """
    B = cfg.bundle
    comp = comparison_bundle(B, v)
    nodes = grid.nodes
    lower = B.potential.min_eigenvalue(nodes)
    vals = comp.potential.scalar_values(nodes)
    slack = 1e-12 * np.maximum(1.0, np.abs(lower))
    bad = vals > lower + slack
    if np.any(bad):
        i = int(np.argmax(vals - lower))
        raise PreconditionError(f"comparison value {vals[i]!r} exceeds eigenvalue {lower[i]!r} at node {i}")
    big = heat_kernel_matrix(cfg, T, grid, workers).kernel_values()
    small = heat_kernel_matrix(cfg.with_bundle(comp), T, grid, workers).kernel_values()[..., 0, 0]
    return float(np.max(op_norm(big) - small))

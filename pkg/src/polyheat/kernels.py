"""One-step integral kernels and the multi-step pinned kernel k_T.

Every step kernel has the form

    gaussian(t, d) · amplitude(x, y),

where ``gaussian = (4πt)^{-m/2} exp(-d²/4t)`` and the amplitude collects the
variant-specific factors: optional cutoff χ(d²), a power of the volume
distortion μ, parallel transport τ_t^0 and the exponential of the
curvature/potential line integral along the minimal geodesic from x to y.

=================  ======  ==============  ===================================
variant            cutoff  μ power         curvature term in the exponent
=================  ======  ==============  ===================================
``v``              yes     -1/2            ∫ scal/6
``w-hat``          no      0               ∫ scal/3
``lambda`` (Λ)     yes     (Λ-1)/2         (Λ+1)/6 ∫ scal
``endpoint-scal``  no      0               t/6 (scal(x) + scal(y))
=================  ======  ==============  ===================================
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bundle import Bundle, conjugated_potential_integral, gauss_legendre
from .geometry import GridQuadrature
from .linalg import chain_product, expm
from .polygon import CutoffChi, Partition

VARIANTS = ("v", "w-hat", "lambda", "endpoint-scal")

#: Upper bound on point pairs evaluated per chunk during matrix assembly.
PAIRS_PER_CHUNK = 1 << 18


@dataclass
class Diagnostics:
    """Counters filled in while assembling kernels."""

    cut_locus_pairs: int = 0


@dataclass
class StepKernelConfig:
    bundle: Bundle
    variant: str = "w-hat"
    lam: float = 1.0
    cutoff: bool | None = None
    q: int = 4
    chi: CutoffChi = field(init=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if self.variant == "v":
            self.lam = 0.0
        self.chi = CutoffChi(self.bundle.manifold.injectivity_radius)

    @property
    def manifold(self):
        return self.bundle.manifold

    @property
    def uses_cutoff(self) -> bool:
        if self.cutoff is not None:
            return self.cutoff
        return self.variant in ("v", "lambda")

    @property
    def mu_power(self) -> float:
        if self.variant in ("v", "lambda"):
            return (self.lam - 1) / 2
        return 0.0

    @property
    def scal_coefficient(self) -> float:
        if self.variant == "w-hat":
            return 1 / 3
        if self.variant in ("v", "lambda"):
            return (self.lam + 1) / 6
        return 0.0

    def with_bundle(self, bundle: Bundle) -> "StepKernelConfig":
        return StepKernelConfig(bundle, self.variant, self.lam, self.cutoff, self.q)


def cutoff_chi(chi: CutoffChi, u):
    return chi(u)


def gaussian(m: int, t: float, d):
    """(4πt)^{-m/2} exp(-d²/4t)."""
    d = np.asarray(d, dtype=float)
    return (4 * np.pi * t) ** (-m / 2) * np.exp(-(d**2) / (4 * t))


def gauss_factor(M, t: float, x, y, with_cutoff: bool = True):
    """e_t(x, y), or the Gaussian without χ when ``with_cutoff`` is False."""
    d = M.distance(x, y)
    g = gaussian(M.dim, t, d)
    if with_cutoff:
        g = g * CutoffChi(M.injectivity_radius)(d**2)
    return g


def _curvature_integral(cfg: StepKernelConfig, t, x, y, v):
    """Scalar curvature contribution to the exponent (before the identity)."""
    M = cfg.manifold
    if cfg.variant == "endpoint-scal":
        return t / 6 * (M.scalar_curvature(x) + M.scalar_curvature(y))
    c = cfg.scal_coefficient
    if c == 0:
        return 0.0
    if M.curvature_is_constant:
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.full(shape, c * t * M.constant_scalar_curvature)
    fr, w = gauss_legendre(cfg.q)
    total = 0.0
    for f, wi in zip(fr, w):
        total = total + t * wi * M.scalar_curvature(M.exp_map(x, f * v))
    return c * total


def step_amplitude(cfg: StepKernelConfig, t: float, x, y, d=None):
    """Variant factors of the step kernel, E_y -> E_x, without the Gaussian.

    Returns ``(amplitude, cut)`` where ``amplitude`` has shape
    ``broadcast(x, y) + (k, k)`` and ``cut`` flags cut-locus pairs (their
    amplitude is zero).
    """
    B = cfg.bundle
    M = B.manifold
    k = B.rank
    v, cut = M.log_pair(x, y)
    if d is None:
        d = np.linalg.norm(v, axis=-1)
    scalar = np.ones(np.shape(d))
    if cfg.uses_cutoff:
        scalar = scalar * cfg.chi(d**2)
    if cfg.mu_power != 0:
        scalar = scalar * M.volume_distortion_from_distance(d) ** cfg.mu_power
    curv = _curvature_integral(cfg, t, x, y, v)

    if B.potential.is_scalar:
        pot = 0.0
        if not B.potential.is_zero:
            pot = np.real(conjugated_potential_integral(B, x, y, t, cfg.q)[..., 0, 0])
        scalar = scalar * np.exp(curv - pot)
        exp_part = None
    else:
        expo = -conjugated_potential_integral(B, x, y, t, cfg.q)
        expo = expo + (np.asarray(curv)[..., None, None] * np.eye(k))
        exp_part = expm(expo)

    scalar = np.where(cut, 0.0, scalar)
    if B.has_trivial_transport:
        if exp_part is None:
            amp = scalar[..., None, None] * np.eye(k, dtype=B.dtype)
        else:
            amp = scalar[..., None, None] * exp_part
    else:
        tau = B.segment_transport(x, y, 1.0, 0.0)  # E_y -> E_x
        amp = tau if exp_part is None else tau @ exp_part
        amp = scalar[..., None, None] * amp
    return amp, cut


def step_kernel(cfg: StepKernelConfig, t: float, x, y, diagnostics: Diagnostics | None = None):
    """Step kernel value(s) as k x k fibre maps E_y -> E_x."""
    M = cfg.manifold
    d = M.distance(x, y)
    amp, cut = step_amplitude(cfg, t, x, y, d)
    if diagnostics is not None:
        diagnostics.cut_locus_pairs += int(np.count_nonzero(cut))
    return gaussian(M.dim, t, d)[..., None, None] * amp


def _row_chunks(n_rows: int, n_cols: int):
    size = max(1, PAIRS_PER_CHUNK // max(n_cols, 1))
    return [(i, min(i + size, n_rows)) for i in range(0, n_rows, size)]


def step_kernel_matrix(
    cfg: StepKernelConfig,
    t: float,
    grid: GridQuadrature,
    workers: int = 1,
    diagnostics: Diagnostics | None = None,
) -> np.ndarray:
    """Dense (kN, kN) matrix of k_t(x_i, x_j) blocks (no quadrature weights).

    Rows are assembled in fixed chunks; ``workers`` only changes how many
    chunks run at once, never the values.
    """
    B = cfg.bundle
    M = B.manifold
    k = B.rank
    nodes = grid.nodes
    n = len(nodes)
    out = np.empty((n, k, n, k), dtype=B.dtype)
    chunks = _row_chunks(n, n)
    fast = B.has_trivial_transport and B.potential.is_zero and M.curvature_is_constant

    def work(bounds):
        lo, hi = bounds
        xs = nodes[lo:hi]
        counter = Diagnostics()
        if fast:
            d = M.pairwise_distance(xs, nodes)
            val = _radial_scalar(cfg, t, d)
            if _may_cut(M, d):
                cut = M.is_cut_pair(xs[:, None, :], nodes[None, :, :])
                val = np.where(cut, 0.0, val)
                counter.cut_locus_pairs = int(np.count_nonzero(cut))
            block = val[..., None, None] * np.eye(k)
        else:
            block = step_kernel(cfg, t, xs[:, None, :], nodes[None, :, :], counter)
        out[lo:hi] = np.transpose(block, (0, 2, 1, 3))
        return counter.cut_locus_pairs

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            counts = list(pool.map(work, chunks))
    else:
        counts = [work(c) for c in chunks]
    if diagnostics is not None:
        diagnostics.cut_locus_pairs += sum(counts)
    return out.reshape(n * k, n * k)


def _may_cut(M, d) -> bool:
    return bool(np.any(d >= M.injectivity_radius * (1 - 1e-6)))


def _radial_scalar(cfg: StepKernelConfig, t: float, d):
    """Step kernel for trivial transport, zero potential and constant curvature."""
    M = cfg.manifold
    val = gaussian(M.dim, t, d)
    if cfg.uses_cutoff:
        val = val * cfg.chi(d**2)
    if cfg.mu_power != 0:
        val = val * M.volume_distortion_from_distance(d) ** cfg.mu_power
    if cfg.variant == "endpoint-scal":
        val = val * np.exp(t / 3 * M.constant_scalar_curvature)
    elif cfg.scal_coefficient:
        val = val * np.exp(cfg.scal_coefficient * t * M.constant_scalar_curvature)
    return val


def weighted(matrix: np.ndarray, grid: GridQuadrature, rank: int) -> np.ndarray:
    """Scale block columns by the quadrature weights: K -> K W."""
    return matrix * np.repeat(grid.weights, rank)[None, :]


def pinned_kernel(cfg: StepKernelConfig, T: Partition, x, y, grid: GridQuadrature, workers: int = 1):
    """k_T(x, y) as a k x k matrix, intermediate vertices quadratured on ``grid``."""
    k = cfg.bundle.rank
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    steps = T.steps
    if len(steps) == 1:
        return step_kernel(cfg, steps[0], x, y)
    nodes = grid.nodes
    wk = np.repeat(grid.weights, k)
    left = step_kernel(cfg, steps[0], x[None, :], nodes)  # (N, k, k): k(x, z)
    row = np.transpose(left, (1, 0, 2)).reshape(k, -1) * wk[None, :]
    mats = {}
    for t in steps[1:-1]:
        if t not in mats:
            mats[t] = weighted(step_kernel_matrix(cfg, t, grid, workers), grid, k)
        row = row @ mats[t]
    right = step_kernel(cfg, steps[-1], nodes, y[None, :])  # (N, k, k): k(z, y)
    return row @ right.reshape(-1, k)


def chain_matrices(cfg: StepKernelConfig, T: Partition, grid: GridQuadrature, workers: int = 1, diagnostics=None):
    """Weighted step matrices K_j W, one per partition step (shared for equal t_j)."""
    k = cfg.bundle.rank
    cache = {}
    out = []
    for t in T.steps:
        if t not in cache:
            cache[t] = weighted(step_kernel_matrix(cfg, t, grid, workers, diagnostics), grid, k)
        out.append(cache[t])
    return out


def kernel_chain(cfg: StepKernelConfig, T: Partition, grid: GridQuadrature, workers: int = 1, diagnostics=None):
    """Product (K_1 W)(K_2 W)...(K_r W): block (i, j) is k_T(x_i, x_j) w_j."""
    return chain_product(chain_matrices(cfg, T, grid, workers, diagnostics))

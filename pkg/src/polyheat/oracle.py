"""Reference computations that share no code path with the kernel modules.

* exact heat kernels and heat traces of the Laplacian on the model spaces,
  from eigenfunction expansions (and the Gaussian image sum on the circle)
* a Fourier-spectral reference for e^{-tH} of bundle Laplacians on S^1
* a finite-difference Jacobian of the exponential map
* quadrature of the Gaussian moment identity with a symmetric bilinear form
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.integrate
import scipy.linalg

from .geometry import Circle, CutLocusError, FlatTorus, Manifold, Sphere


@dataclass(frozen=True)
class SpectralTruncation:
    """Retained mode count and an estimate of the discarded tail."""

    max_index: int
    tail_bound: float


# ---------------------------------------------------------------------------
# circle


def circle_truncation(t: float, radius: float = 1.0, rel_tol: float = 1e-17) -> SpectralTruncation:
    """Modes |n| <= n_max with 2 Σ_{n > n_max} e^{-n² t/r²} below tolerance."""
    a = t / radius**2
    n = 1
    while 2 * np.exp(-a * (n + 1) ** 2) / (1 - np.exp(-a * (2 * n + 3))) > rel_tol:
        n += 1
    tail = 2 * np.exp(-a * (n + 1) ** 2) / (1 - np.exp(-a * (2 * n + 3)))
    return SpectralTruncation(n, float(tail))


def circle_kernel_eigen(t: float, dtheta, radius: float = 1.0):
    """(1/2πr) Σ_n e^{-n² t/r²} cos(n Δθ)."""
    trunc = circle_truncation(t, radius)
    n = np.arange(1, trunc.max_index + 1)
    dtheta = np.asarray(dtheta, dtype=float)
    terms = np.exp(-(n**2) * t / radius**2) * np.cos(np.multiply.outer(dtheta, n))
    return (1 + 2 * terms.sum(axis=-1)) / (2 * np.pi * radius)


def circle_kernel_images(t: float, dtheta, radius: float = 1.0):
    """Σ_k (4πt)^{-1/2} exp(-(r(Δθ + 2πk))² / 4t), the periodised Gaussian."""
    dtheta = np.mod(np.asarray(dtheta, dtype=float) + np.pi, 2 * np.pi) - np.pi
    period = 2 * np.pi * radius
    kmax = int(np.ceil(np.sqrt(4 * t * 40) / period)) + 1
    k = np.arange(-kmax, kmax + 1)
    s = radius * dtheta[..., None] + period * k
    return np.exp(-(s**2) / (4 * t)).sum(axis=-1) / np.sqrt(4 * np.pi * t)


def circle_trace(t: float, radius: float = 1.0) -> float:
    trunc = circle_truncation(t, radius)
    n = np.arange(1, trunc.max_index + 1)
    return float(1 + 2 * np.exp(-(n**2) * t / radius**2).sum())


# ---------------------------------------------------------------------------
# sphere


def sphere_truncation(t: float, radius: float = 1.0, rel_tol: float = 1e-16) -> SpectralTruncation:
    """Degree l_max with (2l+1) e^{-l(l+1)t/r²} < rel_tol · partial sum."""
    a = t / radius**2
    partial = 0.0
    l = 0
    while True:
        term = (2 * l + 1) * np.exp(-l * (l + 1) * a)
        partial += term
        if l > 0 and term < rel_tol * partial and (2 * l + 3) * np.exp(-(l + 1) * (l + 2) * a) < term:
            # geometric majorant for the rest of the series
            ratio = np.exp(-2 * (l + 1) * a) * (2 * l + 3) / (2 * l + 1)
            tail = term * ratio / (1 - ratio)
            if tail < rel_tol * partial:
                return SpectralTruncation(l, float(tail))
        l += 1


def sphere_kernel(t: float, cos_angle, radius: float = 1.0):
    """Σ_l (2l+1)/(4πr²) e^{-l(l+1)t/r²} P_l(cos(d/r))."""
    trunc = sphere_truncation(t, radius)
    x = np.clip(np.asarray(cos_angle, dtype=float), -1.0, 1.0)
    # three-term recurrence, accumulated degree by degree
    p_prev = np.ones_like(x)
    total = np.ones_like(x) * 1.0
    if trunc.max_index >= 1:
        p_cur = x.copy()
        total = total + 3 * np.exp(-2 * t / radius**2) * p_cur
        for l in range(1, trunc.max_index):
            p_next = ((2 * l + 1) * x * p_cur - l * p_prev) / (l + 1)
            p_prev, p_cur = p_cur, p_next
            ll = l + 1
            total = total + (2 * ll + 1) * np.exp(-ll * (ll + 1) * t / radius**2) * p_cur
    return total / (4 * np.pi * radius**2)


def sphere_trace(t: float, radius: float = 1.0) -> float:
    trunc = sphere_truncation(t, radius)
    l = np.arange(trunc.max_index + 1)
    return float(((2 * l + 1) * np.exp(-l * (l + 1) * t / radius**2)).sum())


# ---------------------------------------------------------------------------
# manifold-level entry points


def spectral_kernel(M: Manifold, t: float, x, y):
    """Exact scalar heat kernel of the Laplacian on ``M``."""
    if t <= 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(M, Circle):
        return circle_kernel_eigen(t, (y - x)[..., 0], M.radius)
    if isinstance(M, FlatTorus):
        out = 1.0
        for i, L in enumerate(M.periods):
            r = L / (2 * np.pi)
            out = out * circle_kernel_eigen(t, (y[..., i] - x[..., i]) / r, r)
        return out
    if isinstance(M, Sphere):
        c = np.sum(x * y, axis=-1) / M.radius**2
        return sphere_kernel(t, c, M.radius)
    raise TypeError(f"no spectral kernel for {M!r}")


def spectral_kernel_matrix(M: Manifold, t: float, xs, ys):
    """Kernel values for all pairs of two point lists."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if isinstance(M, Sphere):
        return sphere_kernel(t, (xs @ ys.T) / M.radius**2, M.radius)
    return spectral_kernel(M, t, xs[:, None, :], ys[None, :, :])


def spectral_trace(M: Manifold, t: float) -> float:
    """Tr e^{-tΔ} on scalar functions."""
    if t <= 0:
        raise ValueError("t must be positive")
    if isinstance(M, Circle):
        return circle_trace(t, M.radius)
    if isinstance(M, FlatTorus):
        return float(np.prod([circle_trace(t, L / (2 * np.pi)) for L in M.periods]))
    if isinstance(M, Sphere):
        return sphere_trace(t, M.radius)
    raise TypeError(f"no spectral trace for {M!r}")


def sphere_tangent_trace(t: float, radius: float = 1.0) -> float:
    """Tr e^{-t ∇*∇} on vector fields of S²(r).

    Hodge Laplacian on 1-forms has eigenvalues l(l+1)/r², l >= 1, with
    multiplicity 2(2l+1); the Weitzenböck identity Δ = ∇*∇ + Ric shifts them
    by -1/r².
    """
    trunc = sphere_truncation(t, radius)
    l = np.arange(1, trunc.max_index + 2)
    return float((2 * (2 * l + 1) * np.exp(-(l * (l + 1) - 1) * t / radius**2)).sum())


# ---------------------------------------------------------------------------
# Fourier-spectral reference on the circle


def operator_reference_1d(
    M: Circle,
    n: int,
    t: float,
    rank: int = 1,
    potential=None,
    form: float = 0.0,
    generator=None,
):
    """e^{-tH} on the nodal values of an n-point circle grid.

    H = -(∂_s + a G)² + V with arc length s, a constant connection form ``a``
    with anti-Hermitian ``generator`` G, and ``potential`` a callable mapping
    angles ``(n, 1)`` to ``(n, rank, rank)`` Hermitian blocks.  Returned matrix
    acts on vectors ordered node-major (node i, component c) -> i*rank + c,
    so its (i, j) block equals k_t(x_i, x_j) · 2πr/n.
    """
    if n < 16:
        raise ValueError("reference needs n >= 16")
    r = M.radius
    theta = 2 * np.pi * np.arange(n) / n
    modes = np.fft.fftfreq(n, d=1.0 / n)
    gen = np.zeros((rank, rank)) if generator is None else np.asarray(generator)
    eye = np.eye(rank)

    fourier = np.exp(-1j * np.outer(modes, theta)) / np.sqrt(n)  # unitary DFT
    blocks = []
    for k in modes:
        if abs(k) == n // 2 and n % 2 == 0:
            # Nyquist mode: average the two aliases to keep H Hermitian
            sym = 0.5 * (_mode_symbol(k, r, form, gen, eye) + _mode_symbol(-k, r, form, gen, eye))
        else:
            sym = _mode_symbol(k, r, form, gen, eye)
        blocks.append(sym)
    symbol = scipy.linalg.block_diag(*blocks)
    f_big = np.kron(fourier, eye)
    h = f_big.conj().T @ symbol @ f_big
    if potential is not None:
        h = h + scipy.linalg.block_diag(*np.asarray(potential(theta[:, None])))
    h = 0.5 * (h + h.conj().T)
    out = scipy.linalg.expm(-t * h)
    if np.iscomplexobj(gen):
        return out
    # real problems: the DFT round trip only leaves rounding-level imaginary parts
    return out.real


def _mode_symbol(k, r, form, gen, eye):
    """Symbol of -(∂_s + aG)² on the Fourier mode e^{ikθ}: -(ik/r + aG)²."""
    op = 1j * k / r * eye + form * gen
    return -(op @ op)


# ---------------------------------------------------------------------------
# finite-difference Jacobian of the exponential map


def jacobian_mu_oracle(M: Manifold, x, y) -> float:
    """det d(exp_y) at log_y(x) by central differences in orthonormal frames."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    v, cut = M.log_pair(y, x)
    if np.any(cut):
        raise CutLocusError("x lies in the cut locus of y")
    frame_y = M.frame(y)
    xi = frame_y.T @ v
    h = 1e-5 * M.injectivity_radius
    frame_x = M.frame(x)
    jac = np.empty((M.dim, M.dim))
    for j in range(M.dim):
        e = np.zeros(M.dim)
        e[j] = h
        plus = M.exp_map(y, frame_y @ (xi + e))
        minus = M.exp_map(y, frame_y @ (xi - e))
        # displacement measured in normal coordinates about x
        dp = M.log_map(x, plus) - M.log_map(x, minus)
        jac[:, j] = (frame_x.T @ dp) / (2 * h)
    return float(abs(np.linalg.det(jac)))


# ---------------------------------------------------------------------------
# Gaussian moment identity


def gauss_moment_check(B, f, t: float, box: float = 12.0, epsabs: float = 1e-15, epsrel: float = 1e-12):
    """Both sides of ∫ G_t B(ξ,ξ) f = 2t tr(B) ∫ G_t f + O(t^{3/2}).

    G_t(ξ) = (4πt)^{-m/2} e^{-|ξ|²/4t}.  Integrals use adaptive quadrature in
    the scaled variable η = ξ/√t on the cube |η_i| <= ``box``; the Gaussian
    mass outside is below e^{-box²/4} relative.  Returns (lhs, rhs, |lhs-rhs|).
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if not np.allclose(B, B.T):
        raise ValueError("B must be symmetric")
    m = B.shape[0]
    st = np.sqrt(t)
    norm = (4 * np.pi) ** (-m / 2)

    def gauss(eta):
        return norm * np.exp(-eta @ eta / 4)

    def lhs_integrand(*eta):
        eta = np.array(eta)
        xi = st * eta
        return gauss(eta) * (xi @ B @ xi) * f(t, xi)

    def rhs_integrand(*eta):
        eta = np.array(eta)
        return gauss(eta) * f(t, st * eta)

    ranges = [(-box, box)] * m
    opts = {"epsabs": epsabs, "epsrel": epsrel, "limit": 200}
    lhs = scipy.integrate.nquad(lhs_integrand, ranges, opts=opts)[0]
    rhs = 2 * t * np.trace(B) * scipy.integrate.nquad(rhs_integrand, ranges, opts=opts)[0]
    return lhs, rhs, abs(lhs - rhs)

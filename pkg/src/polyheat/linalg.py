"""Batched exponentials of small dense matrices and ordered matrix chains.

Scaling and squaring with a degree-13 Padé approximant (Higham 2005), applied
independently to every matrix of a stack ``(..., k, k)``.  Each matrix gets
its own scaling exponent so tiny blocks are never over-scaled.
"""

import numpy as np
import scipy.linalg.blas

_THETA13 = 5.371920351148152
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)


def expm(a):
    """Matrix exponential of a stack of square matrices."""
    a = np.asarray(a)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError("expm needs square matrices")
    k = a.shape[-1]
    if k == 1:
        return np.exp(a)
    batch = a.shape[:-2]
    flat = a.reshape(-1, k, k)
    if not np.issubdtype(flat.dtype, np.inexact):
        flat = flat.astype(float)

    norms = np.abs(flat).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.where(norms > _THETA13, np.ceil(np.log2(norms / _THETA13)), 0).astype(int)
    s = np.maximum(s, 0)
    scaled = flat / (2.0 ** s)[:, None, None]

    c = _PADE13
    ident = np.broadcast_to(np.eye(k, dtype=flat.dtype), flat.shape)
    a2 = scaled @ scaled
    a4 = a2 @ a2
    a6 = a2 @ a4
    u = scaled @ (a6 @ (c[13] * a6 + c[11] * a4 + c[9] * a2) + c[7] * a6 + c[5] * a4 + c[3] * a2 + c[1] * ident)
    v = a6 @ (c[12] * a6 + c[10] * a4 + c[8] * a2) + c[6] * a6 + c[4] * a4 + c[2] * a2 + c[0] * ident
    out = np.linalg.solve(v - u, v + u)

    for step in range(int(s.max(initial=0))):
        active = s > step
        out[active] = out[active] @ out[active]
    return out.reshape(batch + (k, k))


def op_norm(a):
    """Spectral norm of each matrix in a stack."""
    a = np.asarray(a)
    if a.shape[-1] == 1 and a.shape[-2] == 1:
        return np.abs(a[..., 0, 0])
    return np.linalg.norm(a, ord=2, axis=(-2, -1))


def chain_product(factors):
    """Ordered product F_1 F_2 ... F_n of square matrices.

    Runs of identical factors (same object) are raised to their power by
    binary squaring, so a uniform chain of length n costs O(log n) products.
    """
    factors = list(factors)
    if not factors:
        raise ValueError("empty chain")
    runs = []
    for f in factors:
        if runs and runs[-1][0] is f:
            runs[-1][1] += 1
        else:
            runs.append([f, 1])
    result = None
    for f, count in runs:
        block = _power(f, count)
        result = block if result is None else result @ block
    return result


def _is_symmetric(a) -> bool:
    return a.ndim == 2 and a.dtype == np.float64 and a.shape[0] > 64 and np.array_equal(a, a.T)


def _square_symmetric(a):
    """a @ a for real symmetric ``a`` via the rank-k update ``syrk``.

    ``syrk`` does half the flops of a general product and fills one triangle;
    the other is mirrored.  Powers of a symmetric matrix stay symmetric, so
    every squaring in a power chain can use it.
    """
    # a.T is Fortran-ordered and equal to a, so BLAS gets it without a copy
    upper = scipy.linalg.blas.dsyrk(1.0, a.T, lower=0)
    out = upper + upper.T
    np.fill_diagonal(out, np.diagonal(upper))
    return out


def _power(a, n):
    square = _square_symmetric if n > 1 and _is_symmetric(a) else (lambda m: m @ m)
    result = None
    base = a
    while True:
        if n & 1:
            result = base if result is None else result @ base
        n >>= 1
        if not n:
            return result
        base = square(base)

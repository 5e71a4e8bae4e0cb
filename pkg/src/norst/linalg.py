"""Dense linear-algebra primitives used by the tracker.

Subspaces are represented as plain ``(n, r)`` float arrays with orthonormal
columns ("basis matrices"). Nothing here mutates its inputs.
"""
from __future__ import annotations

import itertools
import logging

import numpy as np

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-10
RANK_RTOL = 1e-10
# above this ambient dimension the truncated SVD switches to a randomized range finder
DENSE_SVD_MAX_N = 2000


def is_orthonormal(P, tol=ORTHO_TOL):
    P = np.asarray(P, dtype=float)
    G = P.T @ P
    return bool(np.max(np.abs(G - np.eye(P.shape[1]))) <= tol)


def as_basis(P, tol=ORTHO_TOL):
    """Return ``P`` as a 2-D float basis matrix.

    A vector is treated as a single column. Columns that drift from
    orthonormality by more than ``tol`` are re-orthonormalized with QR and a
    warning is logged.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if P.ndim != 2:
        raise ValueError(f"basis must be 2-D, got shape {P.shape}")
    n, r = P.shape
    if not 1 <= r <= n:
        raise ValueError(f"basis needs 1 <= r <= n, got n={n}, r={r}")
    if not is_orthonormal(P, tol):
        log.warning("basis of shape %s not orthonormal to %.0e; re-orthonormalizing", P.shape, tol)
        Q, R = np.linalg.qr(P)
        # keep column orientation of the input
        P = Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))
    return P


def sin_theta_max(P1, P2):
    """Sine of the largest principal angle, ``||(I - P1 P1') P2||_2``.

    Not symmetric when the two bases have different ranks.
    """
    P1 = as_basis(P1)
    P2 = as_basis(P2)
    if P1.shape[0] != P2.shape[0]:
        raise ValueError(f"dimension mismatch: {P1.shape[0]} vs {P2.shape[0]}")
    R = P2 - P1 @ (P1.T @ P2)
    val = np.linalg.norm(R, 2)
    return float(min(max(val, 0.0), 1.0))


def orthonormal_basis(M, rtol=RANK_RTOL):
    """Orthonormal basis for ``range(M)``.

    The rank is the number of singular values above ``rtol * sigma_max``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("cannot take the basis of a zero matrix")
    rank = int(np.sum(s > rtol * s[0]))
    return U[:, :rank]


def _randomized_range_svd(M, r, oversample=10, power_iters=2, rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    n, m = M.shape
    k = min(r + oversample, min(n, m))
    Q, _ = np.linalg.qr(M @ rng.standard_normal((m, k)))
    for _ in range(power_iters):
        Q, _ = np.linalg.qr(M.T @ Q)
        Q, _ = np.linalg.qr(M @ Q)
    Ub, s, _ = np.linalg.svd(Q.T @ M, full_matrices=False)
    return Q @ Ub, s


def top_r_singular_vectors(M, r, return_singular_values=False):
    """Left singular vectors of the ``r`` largest singular values of ``M``.

    With ``return_singular_values=True`` also returns every singular value
    that was computed (all of them for the dense path, ``r + 10`` for the
    randomized path used when ``n > 2000``).
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("M must be 2-D")
    n, m = M.shape
    if not 1 <= r <= min(n, m):
        raise ValueError(f"r={r} must be in [1, min(n, alpha)={min(n, m)}]")
    if n <= DENSE_SVD_MAX_N:
        U, s, _ = np.linalg.svd(M, full_matrices=False)
    else:
        U, s = _randomized_range_svd(M, r)
    U = U[:, :r]
    if return_singular_values:
        return U, s
    return U


def ric_brute_force(P, s):
    """Restricted isometry constant of ``I - P P'`` by exhaustive search.

    Equals the largest ``||P[T, :]||_2^2`` over index sets with ``|T| <= s``.
    Monotone in ``T``, so only sets of size exactly ``s`` are enumerated.
    Combinatorial; meant for ``n <= 20``.
    """
    P = as_basis(P)
    n = P.shape[0]
    if not 0 <= s <= n:
        raise ValueError(f"s={s} must be in [0, n={n}]")
    if s == 0:
        return 0.0
    best = 0.0
    for T in itertools.combinations(range(n), s):
        sub = P[list(T), :]
        # largest eigenvalue of the r x r Gram is the squared spectral norm
        val = np.linalg.eigvalsh(sub.T @ sub)[-1]
        best = max(best, val)
    return float(min(best, 1.0))


def incoherence(P):
    """``mu`` such that the largest squared row norm equals ``mu * r / n``."""
    P = as_basis(P)
    n, r = P.shape
    return float(n / r * np.max(np.sum(P**2, axis=1)))


def random_basis(n, r, rng):
    """Basis drawn from the random orthogonal model (QR of a Gaussian)."""
    Q, R = np.linalg.qr(rng.standard_normal((n, r)))
    return Q * np.sign(np.diag(R))

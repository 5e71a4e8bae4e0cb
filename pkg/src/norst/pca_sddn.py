"""PCA when the noise is sparse and linearly dependent on the data.

Model: ``y_t = l_t + w_t + v_t`` with ``l_t = P a_t``, ``w_t = I_T M_t l_t`` and
``v_t`` small unstructured noise. The estimator is plain r-SVD; this module
builds batches with controlled ``(b, q, f, lambda_v)`` and measures how the
error of that estimator compares with the theory.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import coefficient_bounds, gen_coefficients, perturbed_basis, rng_streams
from .linalg import random_basis, sin_theta_max, top_r_singular_vectors

REPORT_COLUMNS = ("trial", "alpha", "b", "q", "f", "lambda_v", "sin_theta_err")
# SVD round-off; errors this small count as meeting any bound, including 0
SVD_FLOOR = 1e-12


def pca_sddn_estimate(Y, r):
    """Top-``r`` left singular vectors of the batch."""
    Y = np.asarray(Y, dtype=float)
    n, alpha = Y.shape
    if alpha < r:
        raise ValueError(f"batch has {alpha} columns, need at least r={r}")
    if alpha > 20 * n:
        # very wide batches: eigenvectors of Y Y' are the same left singular vectors
        w, U = np.linalg.eigh(Y @ Y.T)
        return U[:, ::-1][:, :r].copy()
    return top_r_singular_vectors(Y, r)


def row_occupancy(mask):
    """``(1/alpha) ||sum_t I_T I_T'||``: largest per-row fraction of nonzeros."""
    mask = np.asarray(mask, dtype=bool)
    return float(mask.sum(axis=1).max() / mask.shape[1]) if mask.size else 0.0


def cyclic_support(n, alpha, s, offset=0):
    """Supports ``T_t = {(offset + s t + i) mod n : i < s}``.

    Every row is hit ``floor`` or ``ceil`` of ``alpha s / n`` times, the most
    evenly spread pattern with ``s`` entries per column.
    """
    if not 0 <= s <= n:
        raise ValueError(f"need 0 <= s <= n, got s={s}")
    mask = np.zeros((n, alpha), dtype=bool)
    if s:
        rows = (offset + s * np.arange(alpha)[None, :] + np.arange(s)[:, None]) % n
        mask[rows, np.arange(alpha)[None, :]] = True
    return mask


def _support_rows(mask):
    """Group frames by support size: ``{s: (frames, rows s x m)}``."""
    counts = mask.sum(axis=0)
    groups = {}
    for s_t in np.unique(counts):
        if s_t == 0:
            continue
        cols = np.flatnonzero(counts == s_t)
        rows = np.nonzero(mask[:, cols].T)[1].reshape(cols.size, s_t)
        groups[int(s_t)] = (cols, rows)
    return groups


def dependent_noise(P, L, mask, q, rng, operator="norst", constant=False):
    """Sparse data-dependent noise ``w_t = I_T M_t l_t`` with ``max_t ||M_t P|| = q``.

    ``operator="norst"`` uses the residual map of projected CS against a
    fixed wrong basis ``P_hat``: ``M_t = c (Psi_T' Psi_T)^{-1} I_T' Psi`` with
    ``Psi = I - P_hat P_hat'``. Its structure is the same at every frame, so
    the bias only averages down through support motion. ``"random"`` uses
    ``M_t = c G_t P'`` with a fresh Gaussian ``G_t`` per frame, or one shared
    ``G`` when ``constant``. The scale ``c`` sets the measured ``q``.

    Returns ``(W, q_measured)``.
    """
    n, r = P.shape
    W = np.zeros_like(L)
    groups = _support_rows(mask)
    MP = {}
    if operator == "norst":
        P_hat = perturbed_basis(P, 0.5, rng)
        PhL = P_hat.T @ L
        PhP = P_hat.T @ P
        for s_t, (cols, rows) in groups.items():
            PT = P_hat[rows]                              # m x s x r
            G = np.eye(s_t) - PT @ PT.transpose(0, 2, 1)  # Psi_T' Psi_T
            rhs_l = L[rows, cols[:, None]] - np.einsum("msr,rm->ms", PT, PhL[:, cols])
            rhs_p = P[rows] - PT @ PhP
            W[rows, cols[:, None]] = np.linalg.solve(G, rhs_l[..., None])[..., 0]
            MP[s_t] = np.linalg.solve(G, rhs_p)
    elif operator == "random":
        G_fixed = None
        A = P.T @ L
        for s_t, (cols, rows) in groups.items():
            if constant:
                G_fixed = rng.standard_normal((s_t, r)) if G_fixed is None else G_fixed
                G = np.broadcast_to(G_fixed, (cols.size, s_t, r))
            else:
                G = rng.standard_normal((cols.size, s_t, r))
            W[rows, cols[:, None]] = np.einsum("msr,rm->ms", G, A[:, cols])
            MP[s_t] = G
    else:
        raise ValueError(f"unknown operator {operator!r}")
    raw = max((np.linalg.norm(M, 2, axis=(1, 2)).max() for M in MP.values()), default=0.0)
    if raw == 0.0:
        return W, 0.0
    return W * (q / raw), float(q)


@dataclass
class SddnBatch:
    """One PCA-SDDN batch and the quantities that govern its error.

    ``b`` and ``q`` are measured on the generated batch, not the targets.
    ``P0``/``alpha0`` describe an optional mid-batch change: the first
    ``alpha0`` frames come from ``P0``.
    """

    Y: np.ndarray
    P: np.ndarray
    mask: np.ndarray
    b: float
    q: float
    f: float
    lambda_v: float
    lambda_minus: float
    P0: np.ndarray | None = None
    alpha0: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b={self.b} outside [0, 1]")
        if self.q < 0:
            raise ValueError(f"q={self.q} must be >= 0")

    @property
    def alpha(self):
        return self.Y.shape[1]

    @property
    def r(self):
        return self.P.shape[1]


def gen_sddn_batch(n, r, alpha, b, q, f, lambda_v=0.0, seed=0, alpha0=0, delta=0.0,
                   constant_support=False, operator="norst"):
    """Draw a batch with target row occupancy ``b`` and dependency level ``q``.

    Supports are cyclic with ``s = round(b n)`` entries per frame (row
    occupancy ``~ b``), or one fixed set of that size (``b = 1``) when
    ``constant_support``. For a mid-batch change the first ``alpha0`` frames
    use ``P0``, which differs from ``P`` by a rotation of its last direction
    by ``asin(delta)``.
    """
    st = rng_streams(seed)
    P = random_basis(n, r, st["subspace"])
    P0 = None
    if alpha0:
        g = st["subspace"].standard_normal(n)
        g -= P @ (P.T @ g)
        g /= np.linalg.norm(g)
        th = math.asin(min(max(delta, 0.0), 1.0))
        P0 = np.column_stack([P[:, :-1], P[:, -1] * math.cos(th) + g * math.sin(th)])
    A = gen_coefficients(r, alpha, f, st["coeffs"])
    s = int(round(b * n))
    if constant_support:
        mask = np.zeros((n, alpha), dtype=bool)
        mask[st["support"].choice(n, size=max(s, 1), replace=False), :] = True
    else:
        mask = cyclic_support(n, alpha, s, offset=int(st["support"].integers(n)))
    L = P @ A
    if P0 is not None:
        L[:, :alpha0] = P0 @ A[:, :alpha0]
    W, q_meas = dependent_noise(P, L, mask, q, st["mask"], operator=operator, constant=constant_support)
    V = np.zeros_like(L)
    if lambda_v > 0:
        a = math.sqrt(3.0 * lambda_v)
        V = st["noise"].uniform(-a, a, size=L.shape)
    Y = L + W + V
    lam = coefficient_bounds(r, f) ** 2 / 3.0
    f_meas = float(lam.max() / lam.min())
    return SddnBatch(
        Y=Y, P=P, mask=mask, b=row_occupancy(mask), q=q_meas, f=f_meas, lambda_v=lambda_v,
        lambda_minus=float(lam.min()), P0=P0, alpha0=alpha0,
        meta={"seed": seed, "target_b": b, "target_q": q, "delta": delta},
    )


def required_alpha(n, r, q, f, eps_se, g=0.0, r_v=None, C=50.0):
    """Sample size ``C max(q^2 f^2 / eps^2 r log n, g f / eps^2 max(r_v, r) log n)``."""
    r_v = r if r_v is None else r_v
    logn = math.log(n)
    a1 = q**2 * f**2 / eps_se**2 * r * logn
    a2 = g * f / eps_se**2 * max(r_v, r) * logn
    return int(math.ceil(C * max(a1, a2)))


def bound_surrogate(b, q, f, g, C=1.0):
    """``C (sqrt(b) q f + g)``, the error level the theory scales with."""
    return C * (math.sqrt(b) * q * f + g)


@dataclass
class BoundReport:
    rows: list
    fraction_below: float
    median_err: float
    curve: dict

    def write_csv(self, path):
        write_report_csv(self.rows, path)


def write_report_csv(rows, path):
    with open(path, "w", newline="") as fh:
        fh.write("# schema=1\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([row[c] if not isinstance(row[c], float) else repr(row[c]) for c in REPORT_COLUMNS])


def empirical_bound_check(n, r, alphas, b, q, f, lambda_v=0.0, trials=20, seed=0, C=1.0,
                          operator="norst"):
    """Monte Carlo error of r-SVD against ``C (sqrt(b) q f + lambda_v / lambda^-)``.

    Returns the per-trial rows, the fraction of runs under the surrogate
    bound and the median error per ``alpha`` (the error-vs-alpha curve).
    """
    alphas = [alphas] if np.isscalar(alphas) else list(alphas)
    rows = []
    below = 0
    seeds = np.random.SeedSequence(seed).generate_state(trials * len(alphas))
    i = 0
    for alpha in alphas:
        for trial in range(trials):
            batch = gen_sddn_batch(n, r, int(alpha), b, q, f, lambda_v, seed=int(seeds[i]), operator=operator)
            i += 1
            err = sin_theta_max(pca_sddn_estimate(batch.Y, r), batch.P)
            g = batch.lambda_v / batch.lambda_minus
            below += err <= bound_surrogate(batch.b, batch.q, batch.f, g, C) + SVD_FLOOR
            rows.append({"trial": trial, "alpha": int(alpha), "b": batch.b, "q": batch.q, "f": batch.f,
                         "lambda_v": batch.lambda_v, "sin_theta_err": err})
    curve = {a: float(np.median([row["sin_theta_err"] for row in rows if row["alpha"] == a])) for a in alphas}
    errs = [row["sin_theta_err"] for row in rows]
    return BoundReport(rows=rows, fraction_below=below / len(rows), median_err=float(np.median(errs)), curve=curve)


def midchange_bound(alpha0, alpha, delta, b, q, f, g):
    """``1.1 (3 ((alpha0/alpha) delta + 4 sqrt(b) q) f + g)``."""
    return 1.1 * (3.0 * ((alpha0 / alpha) * delta + 4.0 * math.sqrt(b) * q) * f + g)


def pca_midchange_check(alpha0, alpha, delta, n=200, r=3, b=0.0, q=0.0, f=2.0, lambda_v=0.0,
                        trials=20, seed=0):
    """Error of r-SVD when the subspace changes ``alpha0`` frames into the batch.

    Returns a dict with per-trial errors, the bound and the pass fraction.
    """
    if not 0 <= alpha0 <= alpha:
        raise ValueError("need 0 <= alpha0 <= alpha")
    errs = []
    bound = None
    seeds = np.random.SeedSequence(seed).generate_state(trials)
    for trial in range(trials):
        batch = gen_sddn_batch(n, r, alpha, b, q, f, lambda_v, seed=int(seeds[trial]),
                               alpha0=alpha0, delta=delta)
        errs.append(sin_theta_max(pca_sddn_estimate(batch.Y, r), batch.P))
        g = batch.lambda_v / batch.lambda_minus
        bound = midchange_bound(alpha0, alpha, delta, batch.b, batch.q, batch.f, g)
    errs = np.asarray(errs)
    return {"errors": errs, "bound": bound, "fraction_below": float(np.mean(errs <= bound)),
            "median_err": float(np.median(errs))}

"""Projected compressive sensing: l1 recovery, thresholding, LS debiasing.

Everything here works on a single frame (1-D ``y``) or on a block of frames
(2-D ``Y`` with one frame per column) that share the same subspace estimate.
The projection ``Psi = I - P P'`` is never formed; it is applied as
``y - P (P' y)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SupportTooLargeError(ValueError):
    """The restricted LS system is singular or too badly conditioned."""


@dataclass(frozen=True)
class CsSolverConfig:
    """Tolerances for the l1 solve and the LS debias step.

    ``max_restricted_ric`` bounds ``||P[T, :]||^2`` (the restricted isometry
    constant of ``Psi`` on the estimated support); above it the restricted
    system counts as singular.
    """

    l1_tolerance: float = 1e-4
    max_iterations: int = 1000
    ls_tolerance: float = 1e-10
    ls_max_iterations: int = 10
    bisection_steps: int = 10
    constraint_slack: float = 0.05
    lambda_floor: float = 1e-5
    max_restricted_ric: float = 0.9

    def __post_init__(self):
        for name in ("l1_tolerance", "ls_tolerance", "constraint_slack", "lambda_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("max_iterations", "ls_max_iterations", "bisection_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.max_restricted_ric < 1:
            raise ValueError("max_restricted_ric must be in (0, 1)")


@dataclass
class SparseEstimate:
    x_hat: np.ndarray
    support: np.ndarray
    x_cs: np.ndarray
    converged: bool = True


@dataclass
class FrameResult:
    """Per-frame output of the projected CS step (and of the tracker)."""

    x_hat: np.ndarray
    support: np.ndarray
    l_hat: np.ndarray
    residual_norm: float = 0.0
    detection_stat: float | None = None
    subspace_updated: bool = False
    cs_converged: bool = True
    suspect: bool = False
    error: str | None = None


@dataclass
class BlockResult:
    """Projected CS output for a block of frames sharing one subspace."""

    X_hat: np.ndarray
    mask: np.ndarray
    L_hat: np.ndarray
    X_cs: np.ndarray
    residual_norm: np.ndarray
    cs_converged: np.ndarray
    ls_failed: np.ndarray
    suspect: np.ndarray = field(default=None)

    def frame(self, i):
        err = "support too large for current subspace estimate" if self.ls_failed[i] else None
        return FrameResult(
            x_hat=self.X_hat[:, i].copy(),
            support=np.flatnonzero(self.mask[:, i]),
            l_hat=self.L_hat[:, i].copy(),
            residual_norm=float(self.residual_norm[i]),
            cs_converged=bool(self.cs_converged[i]),
            suspect=bool(self.suspect[i]),
            error=err,
        )


def project_out(P, Y):
    """``(I - P P') Y`` without forming the projector."""
    return Y - P @ (P.T @ Y)


def _as_block(y):
    y = np.asarray(y, dtype=float)
    return (y[:, None], True) if y.ndim == 1 else (y, False)


def soft_threshold(X, lam):
    return np.sign(X) * np.maximum(np.abs(X) - lam, 0.0)


def lagrangian_fista(P, Y, lam, X0=None, tol=1e-4, max_iter=1000):
    """Solve ``min_x lam ||x||_1 + 0.5 ||Psi (y - x)||^2`` column-wise.

    ``lam`` is a scalar or one value per column. The smooth term has
    Lipschitz constant exactly 1 (``Psi`` is an orthogonal projector), so a
    fixed unit step is used; momentum is restarted whenever it points
    uphill. Returns ``(X, converged)``.
    """
    Y, _ = _as_block(Y)
    n, m = Y.shape
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (m,))
    PsiY = project_out(P, Y)
    X = np.zeros_like(Y) if X0 is None else np.array(X0, dtype=float).reshape(n, m)
    Z = X.copy()
    t = np.ones(m)
    converged = np.zeros(m, dtype=bool)
    for _ in range(max_iter):
        # Z + Psi (Y - Z) == Psi Y + P P' Z
        X_new = soft_threshold(PsiY + P @ (P.T @ Z), lam)
        step = X_new - X
        converged = np.sqrt(np.sum(step**2, axis=0)) <= tol * np.maximum(
            1.0, np.sqrt(np.sum(X_new**2, axis=0))
        )
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t**2))
        restart = np.sum((Z - X_new) * step, axis=0) > 0
        Z = X_new + ((t - 1.0) / t_new) * step
        Z[:, restart] = X_new[:, restart]
        t_new[restart] = 1.0
        X, t = X_new, t_new
        if converged.all():
            break
    return X, converged


def l1_min(P, y_tilde, xi, config=CsSolverConfig(), return_info=False):
    """Approximately solve ``min ||x||_1 s.t. ||Psi (y - x)|| <= xi``.

    The constrained problem is mapped to its Lagrangian form and ``lam`` is
    bisected on a log scale (per column) until the residual lands in
    ``[(1 - slack) xi, xi]`` or the floor ``lambda_floor * ||Psi y||_inf`` is
    reached. Either ``y`` or ``Psi y`` may be passed; the residual is the same.

    Returns the estimate, plus a per-column convergence flag when
    ``return_info`` is set.
    """
    Y, single = _as_block(y_tilde)
    n, m = Y.shape
    xi = np.broadcast_to(np.asarray(xi, dtype=float), (m,)).copy()
    if np.any(xi < 0):
        raise ValueError("xi must be >= 0")
    PsiY = project_out(P, Y)
    res0 = np.sqrt(np.sum(PsiY**2, axis=0))
    lam_max = np.max(np.abs(PsiY), axis=0)

    X_best = np.zeros_like(Y)
    conv_best = np.ones(m, dtype=bool)
    # Psi y already inside the constraint (up to rounding): x = 0
    active = res0 > xi + 1e-12 * np.sqrt(np.sum(Y**2, axis=0))
    if active.any():
        idx = np.flatnonzero(active)
        Ya, xia, lmax = Y[:, idx], xi[idx], lam_max[idx]
        lo = config.lambda_floor * lmax
        hi = lmax.copy()
        Xa = np.zeros_like(Ya)
        best = np.zeros_like(Ya)
        best_res = np.full(idx.size, np.inf)
        best_conv = np.zeros(idx.size, dtype=bool)
        have_feasible = np.zeros(idx.size, dtype=bool)
        settled = xia == 0
        for _ in range(config.bisection_steps):
            if settled.all():
                break
            lam = np.sqrt(lo * hi)
            Xa, conv = lagrangian_fista(P, Ya, lam, Xa, config.l1_tolerance, config.max_iterations)
            res = np.sqrt(np.sum(project_out(P, Ya - Xa) ** 2, axis=0))
            feasible = res <= xia
            upd = ~settled & (feasible | (~have_feasible & (res < best_res)))
            best[:, upd] = Xa[:, upd]
            best_res[upd] = res[upd]
            best_conv[upd] = conv[upd]
            have_feasible |= feasible & ~settled
            lo = np.where(~settled & feasible, lam, lo)
            hi = np.where(~settled & ~feasible, lam, hi)
            settled |= feasible & (res >= (1.0 - config.constraint_slack) * xia)
        # columns that never became feasible get one solve at the floor
        floor_cols = ~have_feasible
        if floor_cols.any():
            j = np.flatnonzero(floor_cols)
            lam = config.lambda_floor * lmax[j]
            Xf, conv = lagrangian_fista(
                P, Ya[:, j], lam, best[:, j] if np.isfinite(best_res[j]).all() else None,
                config.l1_tolerance, config.max_iterations,
            )
            best[:, j] = Xf
            best_conv[j] = conv
        X_best[:, idx] = best
        conv_best[idx] = best_conv
    out = X_best[:, 0] if single else X_best
    if return_info:
        return out, (bool(conv_best[0]) if single else conv_best)
    return out


def estimate_support(x_cs, omega_supp):
    """Indices with ``|x_i| > omega_supp`` (strict). Boolean mask for blocks."""
    if not omega_supp > 0:
        raise ValueError("omega_supp must be > 0")
    x_cs = np.asarray(x_cs, dtype=float)
    mask = np.abs(x_cs) > omega_supp
    return np.flatnonzero(mask) if x_cs.ndim == 1 else mask


def restricted_ric(P, mask):
    """``||P[T, :]||^2`` for each column's support ``T`` given as a mask."""
    mask, _ = _as_block(mask)
    G = np.einsum("it,ia,ib->tab", mask.astype(float), P, P, optimize=True)
    return np.linalg.eigvalsh(G)[:, -1]


def _masked_cg(P, B, mask, tol, max_iter):
    """CG on ``(Psi_T' Psi_T) x_T = b_T`` for every column at once."""
    M = mask.astype(float)
    X = np.zeros_like(B)
    R = B * M
    D = R.copy()
    rr = np.sum(R**2, axis=0)
    stop = np.sqrt(rr) * tol
    for _ in range(max_iter):
        live = np.sqrt(rr) > stop
        if not live.any():
            break
        AD = M * project_out(P, D)
        dAd = np.sum(D * AD, axis=0)
        a = np.where(live & (dAd > 0), rr / np.where(dAd > 0, dAd, 1.0), 0.0)
        X += a * D
        R -= a * AD
        rr_new = np.sum(R**2, axis=0)
        beta = np.where(rr > 0, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        D = R + beta * D
        rr = rr_new
    return X, np.sqrt(rr) <= np.maximum(stop, 1e-300)


def ls_debias(P, y_tilde, support, config=CsSolverConfig(), return_info=False):
    """LS estimate of ``x`` on the given support.

    Solves ``min ||Psi (y - x)||`` over ``x`` supported on ``support`` by
    conjugate gradients on the normal equations ``Psi_T' Psi_T x_T =
    Psi_T' y``. ``support`` is an index array (single frame) or a boolean
    mask shaped like the block.

    Raises :class:`SupportTooLargeError` for a single frame whose restricted
    system is singular; for blocks the failing columns are zeroed and
    reported through ``return_info``.
    """
    Y, single = _as_block(y_tilde)
    n, m = Y.shape
    if single:
        mask = np.zeros((n, 1), dtype=bool)
        mask[np.asarray(support, dtype=int), 0] = True
    else:
        mask = np.asarray(support, dtype=bool)
    failed = np.zeros(m, dtype=bool)
    nonempty = mask.any(axis=0)
    if nonempty.any():
        failed[nonempty] = restricted_ric(P, mask[:, nonempty]) >= config.max_restricted_ric
    if single and failed[0]:
        raise SupportTooLargeError("support too large for current subspace estimate")
    PsiY = project_out(P, Y)
    ok = mask & ~failed
    X, ls_conv = _masked_cg(P, PsiY, ok, config.ls_tolerance, config.ls_max_iterations)
    X[:, failed] = 0.0
    out = X[:, 0] if single else X
    if return_info:
        return out, failed, ls_conv
    return out


def projected_cs_block(Y, P, xi, omega_supp, config=CsSolverConfig(), known_support=None):
    """Projected CS on a block of frames that share the subspace ``P``.

    With ``known_support`` (a mask) the l1 and thresholding stages are
    skipped and LS runs directly on the given sets, as for missing data.
    Frames whose LS system fails fall back to ``x_hat = 0``.
    """
    Y = np.asarray(Y, dtype=float)
    n, m = Y.shape
    if P.shape[0] != n:
        raise ValueError(f"subspace has n={P.shape[0]} but frames have n={n}")
    if known_support is None:
        X_cs, conv = l1_min(P, Y, xi, config, return_info=True)
        mask = estimate_support(X_cs, omega_supp)
    else:
        mask = np.asarray(known_support, dtype=bool).reshape(n, m)
        X_cs = np.zeros_like(Y)
        conv = np.ones(m, dtype=bool)
    X_hat, failed, _ = ls_debias(P, Y, mask, config, return_info=True)
    L_hat = Y - X_hat
    resid = np.sqrt(np.sum(project_out(P, L_hat) ** 2, axis=0))
    # LS can only leave more residual than ||Psi (l + v)|| when outliers were
    # missed, so a residual above xi means the recovery premise failed
    xi_arr = np.broadcast_to(np.asarray(xi, dtype=float), (m,))
    suspect = failed | (resid > xi_arr + 1e-9 * np.sqrt(np.sum(Y**2, axis=0)))
    return BlockResult(
        X_hat=X_hat, mask=mask & ~failed[None, :], L_hat=L_hat, X_cs=X_cs,
        residual_norm=resid, cs_converged=conv, ls_failed=failed, suspect=suspect,
    )


def projected_cs_step(y, P, xi, omega_supp, config=CsSolverConfig()):
    """One frame: l1 recovery, thresholding, LS debias, ``l_hat = y - x_hat``."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValueError("projected_cs_step takes a single frame")
    return projected_cs_block(y[:, None], P, xi, omega_supp, config).frame(0)

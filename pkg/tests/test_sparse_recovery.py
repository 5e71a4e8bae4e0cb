import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from norst.datagen import perturbed_basis
from norst.linalg import random_basis, ric_brute_force
from norst.sparse_recovery import (
    CsSolverConfig,
    SupportTooLargeError,
    estimate_support,
    l1_min,
    lagrangian_fista,
    ls_debias,
    project_out,
    projected_cs_block,
    projected_cs_step,
)

e1 = np.eye(3)[:, :1]


def outlier_frame(rng, P, s, lo=10.0, hi=20.0):
    n, r = P.shape
    ell = P @ rng.uniform(-5, 5, r)
    T = np.sort(rng.choice(n, s, replace=False))
    x = np.zeros(n)
    x[T] = rng.uniform(lo, hi, s)
    return ell, x, T


# --- l1_min --------------------------------------------------------------------

def test_l1_recovers_outlier_off_subspace():
    x = l1_min(e1, np.array([5.0, 10.0, 0.0]), 0.0)
    np.testing.assert_allclose(x, [0.0, 10.0, 0.0], atol=1e-3)


def test_l1_in_span_is_zero(rng):
    P = random_basis(10, 2, rng)
    y = P @ np.array([3.0, -2.0])
    for xi in (0.0, 0.1):
        np.testing.assert_array_equal(l1_min(P, y, xi), np.zeros(10))


def test_l1_negative_xi():
    with pytest.raises(ValueError):
        l1_min(e1, np.ones(3), -1.0)


def test_l1_single_support_matches_exhaustive_oracle(rng):
    n = 20
    for _ in range(30):
        P = random_basis(n, 2, rng)
        ell, x, T = outlier_frame(rng, P, 1)
        y = ell + x
        # exhaustive oracle: the single index whose LS fit leaves the smallest residual
        Py = project_out(P, y)
        cols = project_out(P, np.eye(n))
        resid = [np.linalg.norm(Py - cols[:, i] * (cols[:, i] @ Py) / (cols[:, i] @ cols[:, i]))
                 for i in range(n)]
        oracle = int(np.argmin(resid))
        x_cs = l1_min(P, y, 0.0)
        assert int(np.argmax(np.abs(x_cs))) == oracle == T[0]


def test_l1_meets_constraint(rng):
    P = random_basis(50, 3, rng)
    ell, x, _ = outlier_frame(rng, P, 4)
    y = ell + x + 0.01 * rng.standard_normal(50)
    for xi in (0.05, 0.5, 2.0):
        x_cs = l1_min(P, y, xi)
        assert np.linalg.norm(project_out(P, y - x_cs)) <= xi * (1 + 1e-6)


def test_l1_block_equals_columns(rng):
    P = random_basis(40, 3, rng)
    Y = np.column_stack([sum(outlier_frame(rng, P, 3)[:2]) for _ in range(5)])
    blk = l1_min(P, Y, 0.5)
    for i in range(5):
        np.testing.assert_array_equal(estimate_support(blk[:, i], 5.0),
                                      estimate_support(l1_min(P, Y[:, i], 0.5), 5.0))


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 2.0))
def test_fista_satisfies_kkt(seed, lam):
    g = np.random.default_rng(seed)
    P = random_basis(15, 2, g)
    y = g.standard_normal(15) * 3
    x, conv = lagrangian_fista(P, y, lam, tol=1e-12, max_iter=20000)
    assert conv.all()
    x = x[:, 0]
    grad = project_out(P, y - x)
    on = np.abs(x) > 1e-9
    np.testing.assert_allclose(grad[on], lam * np.sign(x[on]), atol=1e-6)
    assert np.all(np.abs(grad[~on]) <= lam + 1e-6)


# --- estimate_support ------------------------------------------------------------

def test_support_threshold():
    np.testing.assert_array_equal(estimate_support(np.array([0.1, 9.0, -7.0]), 5.0), [1, 2])


def test_support_of_zero():
    assert estimate_support(np.zeros(4), 1.0).size == 0


def test_support_strict_inequality():
    assert estimate_support(np.array([5.0, -5.0, 5.0]), 5.0).size == 0


def test_support_rejects_nonpositive_threshold():
    with pytest.raises(ValueError):
        estimate_support(np.ones(3), 0.0)


# --- ls_debias ---------------------------------------------------------------------

def test_ls_empty_support(rng):
    P = random_basis(6, 2, rng)
    np.testing.assert_array_equal(ls_debias(P, rng.standard_normal(6), np.array([], int)), np.zeros(6))


def test_ls_identity_on_coordinate():
    x_true = np.array([0.0, 10.0, 0.0])
    y_tilde = project_out(e1, x_true[:, None])[:, 0]
    np.testing.assert_allclose(ls_debias(e1, y_tilde, np.array([1])), x_true, atol=1e-12)


def closed_form_error(P_hat, ell, T):
    """``I_T (Psi_T' Psi_T)^{-1} I_T' Psi ell`` with every matrix formed explicitly."""
    n = P_hat.shape[0]
    Psi = np.eye(n) - P_hat @ P_hat.T
    I_T = np.eye(n)[:, T]
    Psi_T = Psi @ I_T
    return I_T @ np.linalg.solve(Psi_T.T @ Psi_T, I_T.T @ Psi @ ell)


def test_ls_error_closed_form(rng):
    for _ in range(20):
        P = random_basis(60, 3, rng)
        P_hat = perturbed_basis(P, 0.05, rng)
        ell, x, T = outlier_frame(rng, P, 5)
        x_hat = ls_debias(P_hat, ell + x, T)
        e_t = closed_form_error(P_hat, ell, T)
        np.testing.assert_allclose(x_hat - x, e_t, atol=1e-8)
        # the same identity seen from the low-rank side
        np.testing.assert_allclose((ell + x - x_hat) - ell, -e_t, atol=1e-8)


def test_ls_singular_support_raises():
    # the support contains the whole direction of P, so Psi_T is singular
    P = np.zeros((4, 1))
    P[:2, 0] = 1 / np.sqrt(2)
    with pytest.raises(SupportTooLargeError, match="support too large"):
        ls_debias(P, np.ones(4), np.array([0, 1]))


@given(st.integers(0, 2**32 - 1), st.integers(6, 10), st.integers(1, 3))
def test_restricted_inverse_norm_bound(seed, n, s):
    g = np.random.default_rng(seed)
    P = random_basis(n, 2, g)
    delta = ric_brute_force(P, s)
    if delta >= 0.95:
        return
    T = g.choice(n, s, replace=False)
    Psi_T = (np.eye(n) - P @ P.T)[:, T]
    lhs = np.linalg.norm(np.linalg.inv(Psi_T.T @ Psi_T), 2)
    assert lhs <= 1 / (1 - delta) + 1e-9


# --- projected_cs_step ----------------------------------------------------------------

def test_step_outlier_free_exact_subspace(rng):
    P = random_basis(30, 3, rng)
    y = P @ rng.standard_normal(3)
    fr = projected_cs_step(y, P, 10 / 15, 5.0)
    assert fr.support.size == 0
    np.testing.assert_array_equal(fr.l_hat, y)


def test_step_theorem_regime_exact_support(rng):
    P = random_basis(200, 5, rng)
    P_hat = perturbed_basis(P, 0.01, rng)
    for _ in range(20):
        ell, x, T = outlier_frame(rng, P, 10)
        fr = projected_cs_step(ell + x, P_hat, 0.67, 5.0)
        np.testing.assert_array_equal(fr.support, T)


def test_step_output_identity(rng):
    P = random_basis(50, 3, rng)
    ell, x, _ = outlier_frame(rng, P, 4)
    y = ell + x
    fr = projected_cs_step(y, perturbed_basis(P, 0.02, rng), 10 / 15, 5.0)
    np.testing.assert_array_equal(fr.l_hat + fr.x_hat, y)
    np.testing.assert_array_equal(fr.l_hat, y - fr.x_hat)


def test_step_bad_subspace_flagged(rng):
    n = 40
    P = random_basis(n, 2, rng)
    # estimate orthogonal to the truth: all of ell leaks into Psi y
    G = rng.standard_normal((n, 2))
    P_bad, _ = np.linalg.qr(G - P @ (P.T @ G))
    ell, x, _ = outlier_frame(rng, P, 3)
    fr = projected_cs_step(30 * ell + x, P_bad, 10 / 15, 5.0)
    assert fr.suspect
    assert np.all(np.isfinite(fr.l_hat))


def test_block_failure_falls_back_to_zero():
    P = np.zeros((4, 1))
    P[:2, 0] = 1 / np.sqrt(2)
    Y = np.array([[20.0, 0.0], [20.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    res = projected_cs_block(Y, P, 0.0, 5.0, known_support=np.array(
        [[True, False], [True, False], [False, False], [False, False]]))
    assert res.ls_failed.tolist() == [True, False]
    np.testing.assert_array_equal(res.X_hat[:, 0], 0.0)
    assert res.frame(0).error == "support too large for current subspace estimate"


def test_step_rejects_block():
    with pytest.raises(ValueError):
        projected_cs_step(np.ones((3, 2)), e1, 0.1, 1.0)


def test_exact_support_recovery_rate():
    # 100 trials of the desk regime: n=200, r=5, f=50, |T| <= 0.05 n, xmin=10
    hits = total = 0
    q = np.sqrt(50) * (1 - np.arange(5) / 10)
    q[-1] = 1.0
    for trial in range(100):
        g = np.random.default_rng(trial)
        P = random_basis(200, 5, g)
        P_hat = perturbed_basis(P, 0.01, g)
        m = 10
        L = P @ (g.uniform(-1, 1, (5, m)) * q[:, None])
        mask = np.zeros((200, m), bool)
        for i in range(m):
            mask[g.choice(200, 10, replace=False), i] = True
        X = np.where(mask, g.uniform(10, 20, mask.shape), 0.0)
        res = projected_cs_block(L + X, P_hat, 10 / 15, 5.0)
        hits += int(np.all(res.mask == mask, axis=0).sum())
        total += m
    assert hits / total >= 0.99


def test_solver_config_validation():
    with pytest.raises(ValueError):
        CsSolverConfig(l1_tolerance=0)
    with pytest.raises(ValueError):
        CsSolverConfig(max_iterations=0)
    with pytest.raises(ValueError):
        CsSolverConfig(max_restricted_ric=1.0)

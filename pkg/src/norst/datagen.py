"""Synthetic robust subspace tracking scenes.

A scene is ``Y = L + X + V`` where the columns of ``L`` live in a piecewise
constant subspace, ``X`` holds sparse outliers and ``V`` is small bounded
noise. All randomness flows from one integer seed split into named streams,
so a (config, seed) pair reproduces a scene bit for bit.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .linalg import as_basis, random_basis

_STREAMS = ("subspace", "coeffs", "support", "magnitude", "noise", "init", "mask")


def rng_streams(seed):
    """Independent generators keyed by purpose, derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(_STREAMS, children)}


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def random_skew(n, rng):
    G = rng.standard_normal((n, n))
    B = G - G.T
    return B / np.linalg.norm(B, 2)


def gen_subspace_sequence_exp(n, r, J, gammas, seed):
    """``P_j = expm(gamma_j B_j) P_{j-1}`` with unit-norm random skew ``B_j``."""
    if len(gammas) != J:
        raise ValueError(f"need {J} gammas, got {len(gammas)}")
    rng = _rng(seed)
    P = random_basis(n, r, rng)
    seq = [P]
    for gamma in gammas:
        B = random_skew(n, rng)
        P = scipy.linalg.expm(gamma * B) @ P
        Q, R = np.linalg.qr(P)
        P = Q * np.sign(np.diag(R))
        seq.append(P)
    return seq


def gen_subspace_sequence_givens(n, r, J, thetas, seed):
    """Rotate the last direction of ``P_{j-1}`` toward a fresh orthogonal one.

    ``P_j = [P_fix, p_ch cos(theta_j) - p_new sin(theta_j)]`` where ``p_ch`` is
    the last column of ``P_{j-1}`` (its weakest direction under the
    coefficient model) and ``p_new`` is a random unit vector orthogonal to
    ``P_{j-1}``. The largest principal angle is exactly ``|theta_j|``.
    """
    if len(thetas) != J:
        raise ValueError(f"need {J} thetas, got {len(thetas)}")
    rng = _rng(seed)
    P = random_basis(n, r, rng)
    seq = [P]
    for theta in thetas:
        g = rng.standard_normal(n)
        g -= P @ (P.T @ g)
        g -= P @ (P.T @ g)
        p_new = g / np.linalg.norm(g)
        rot = P[:, -1] * math.cos(theta) - p_new * math.sin(theta)
        P = np.column_stack([P[:, :-1], rot])
        seq.append(P)
    return seq


def coefficient_bounds(r, f):
    """Half-widths ``q_i`` of the uniform coefficient laws (``q_r = 1``)."""
    if f < 1:
        raise ValueError("condition number f must be >= 1")
    i = np.arange(1, r + 1)
    q = math.sqrt(f) - math.sqrt(f) * (i - 1) / (2 * r)
    q[-1] = 1.0
    return q


def gen_coefficients(r, d, f, seed):
    """``a_t[i] ~ unif[-q_i, q_i]`` i.i.d., covariance ``diag(q_i^2 / 3)``."""
    q = coefficient_bounds(r, f)
    return _rng(seed).uniform(-1.0, 1.0, size=(r, d)) * q[:, None]


def moving_object_positions(d, tau, c0):
    """Block position (0-based) of the pacing object in each frame."""
    beta = math.ceil(c0 * tau)
    npos = math.ceil(tau / beta)
    t = np.arange(d)
    phase = t % (2 * tau)
    down = phase < tau
    pos = np.where(down, phase // beta, npos - 1 - (phase - tau) // beta)
    return pos, beta, npos


def gen_support_moving_object(n, d, s, tau, c0):
    """Outlier mask of an object of height ``s`` pacing down and up.

    The object sits still for ``beta = ceil(c0 tau)`` frames, moves down by
    ``s`` rows, and turns around every ``tau`` frames. Returns an ``(n, d)``
    boolean mask.
    """
    if not 0 < c0 <= 1:
        raise ValueError("c0 must be in (0, 1]")
    if s < 0 or tau < 1:
        raise ValueError("need s >= 0 and tau >= 1")
    pos, beta, npos = moving_object_positions(d, tau, c0)
    if s / c0 > n or npos * s > n:
        raise ValueError(f"object of height {s} with c0={c0} does not fit in n={n} rows")
    mask = np.zeros((n, d), dtype=bool)
    rows = np.arange(n)[:, None]
    start = (pos * s)[None, :]
    mask[:] = (rows >= start) & (rows < start + s)
    return mask


def gen_support_bernoulli(n, d, rho, seed):
    """Each entry independently in the support with probability ``rho``."""
    if not 0 <= rho <= 1:
        raise ValueError("rho must be in [0, 1]")
    return _rng(seed).random((n, d)) < rho


def mask_to_sets(mask):
    return [np.flatnonzero(mask[:, t]) for t in range(mask.shape[1])]


def max_outlier_frac_row(mask, alpha):
    """Largest fraction of nonzeros in any row of any ``alpha``-column window."""
    n, d = mask.shape
    alpha = min(alpha, d)
    c = np.concatenate([np.zeros((n, 1)), np.cumsum(mask, axis=1)], axis=1)
    win = c[:, alpha:] - c[:, :-alpha]
    return float(win.max() / alpha)


def max_outlier_frac_col(mask):
    return float(mask.sum(axis=0).max() / mask.shape[0])


@dataclass
class SceneConfig:
    """Parameters of a synthetic scene.

    ``change_sizes`` holds ``gamma_j`` for the exponential model and the
    angle ``theta_j`` in radians for the Givens model. Support parameters
    ``s``/``c0``/``tau`` (moving object) or ``rho`` (Bernoulli) apply after
    ``t_train``; the ``train_*`` ones before. The moving object shares one
    ``tau`` across both phases.
    """

    n: int = 200
    d: int = 2400
    r: int = 5
    change_times: tuple = ()
    change_model: str = "exp"
    change_sizes: tuple = ()
    f: float = 50.0
    support_model: str = "moving_object"
    s: int = 10
    c0: float = 0.3
    tau: int = 150
    rho: float = 0.3
    t_train: int = 100
    train_s: int = 2
    train_c0: float = 0.01
    train_rho: float = 0.01
    xmin: float = 10.0
    xmax: float = 20.0
    signed: bool = False
    noise_lambda: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.change_times = tuple(int(t) for t in self.change_times)
        self.change_sizes = tuple(float(g) for g in self.change_sizes)
        self.validate()

    @property
    def J(self):
        return len(self.change_times)

    def validate(self):
        if min(self.n, self.d, self.r) < 1 or self.r > self.n:
            raise ValueError("need n, d >= 1 and 1 <= r <= n")
        ct = self.change_times
        if any(b <= a for a, b in zip(ct, ct[1:])):
            raise ValueError("change_times must be strictly increasing")
        if ct and (ct[0] <= 0 or ct[-1] >= self.d):
            raise ValueError("change_times must lie in (0, d)")
        if len(self.change_sizes) != len(ct):
            raise ValueError("change_sizes must have one entry per change time")
        if self.change_model not in ("exp", "givens"):
            raise ValueError(f"unknown change_model {self.change_model!r}")
        if self.support_model not in ("moving_object", "bernoulli", "none"):
            raise ValueError(f"unknown support_model {self.support_model!r}")
        if not 0 < self.xmin <= self.xmax:
            raise ValueError("need 0 < xmin <= xmax")
        if not 0 <= self.t_train <= self.d:
            raise ValueError("t_train must be in [0, d]")
        if self.noise_lambda < 0:
            raise ValueError("noise_lambda must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["change_times"] = list(self.change_times)
        d["change_sizes"] = list(self.change_sizes)
        return d


@dataclass
class SyntheticScene:
    Y: np.ndarray
    L: np.ndarray
    X: np.ndarray
    V: np.ndarray
    mask: np.ndarray
    P_seq: list
    change_times: tuple
    A: np.ndarray | None = None
    config: SceneConfig | None = field(default=None, repr=False)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def d(self):
        return self.Y.shape[1]

    @property
    def supports(self):
        return mask_to_sets(self.mask)

    def segment_index(self):
        """Index ``j`` of the true subspace in force at every frame."""
        return np.searchsorted(np.asarray(self.change_times, dtype=int), np.arange(self.d), side="right")

    def subspace_at(self, t):
        return self.P_seq[int(np.searchsorted(self.change_times, t, side="right"))]


def _support(cfg, model, d, rng, train):
    if model == "none":
        return np.zeros((cfg.n, d), dtype=bool)
    if model == "bernoulli":
        return gen_support_bernoulli(cfg.n, d, cfg.train_rho if train else cfg.rho, rng)
    if train:
        return gen_support_moving_object(cfg.n, d, cfg.train_s, cfg.tau, cfg.train_c0)
    return gen_support_moving_object(cfg.n, d, cfg.s, cfg.tau, cfg.c0)


def assemble_scene(config):
    """Generate ``Y = L + X + V`` for ``config``."""
    cfg = config
    cfg.validate()
    rs = rng_streams(cfg.seed)
    if cfg.change_model == "exp":
        P_seq = gen_subspace_sequence_exp(cfg.n, cfg.r, cfg.J, cfg.change_sizes, rs["subspace"])
    else:
        P_seq = gen_subspace_sequence_givens(cfg.n, cfg.r, cfg.J, cfg.change_sizes, rs["subspace"])
    A = gen_coefficients(cfg.r, cfg.d, cfg.f, rs["coeffs"])
    seg = np.searchsorted(np.asarray(cfg.change_times, dtype=int), np.arange(cfg.d), side="right")
    L = np.empty((cfg.n, cfg.d))
    for j, P in enumerate(P_seq):
        cols = seg == j
        L[:, cols] = P @ A[:, cols]

    tt = cfg.t_train
    mask = np.concatenate(
        [_support(cfg, cfg.support_model, tt, rs["support"], True),
         _support(cfg, cfg.support_model, cfg.d - tt, rs["support"], False)],
        axis=1,
    )
    mag = rs["magnitude"].uniform(cfg.xmin, cfg.xmax, size=(cfg.n, cfg.d))
    if cfg.signed:
        mag *= rs["magnitude"].choice([-1.0, 1.0], size=(cfg.n, cfg.d))
    X = np.where(mask, mag, 0.0)
    if cfg.noise_lambda > 0:
        c = math.sqrt(3.0 * cfg.noise_lambda)
        V = rs["noise"].uniform(-c, c, size=(cfg.n, cfg.d))
    else:
        V = np.zeros((cfg.n, cfg.d))
    Y = L + X + V
    return SyntheticScene(Y=Y, L=L, X=X, V=V, mask=mask, P_seq=P_seq,
                          change_times=cfg.change_times, A=A, config=cfg)


def perturbed_basis(P, sin_theta, seed):
    """Basis at exactly ``sin_theta`` (largest principal angle) from ``P``.

    Every principal angle equals ``arcsin(sin_theta)``: each column is
    rotated toward its own direction in the orthogonal complement.
    """
    P = as_basis(P)
    n, r = P.shape
    if not 0 <= sin_theta <= 1:
        raise ValueError("sin_theta must be in [0, 1]")
    if sin_theta == 0:
        return P.copy()
    if 2 * r > n:
        raise ValueError("need 2r <= n to build a perturbation")
    rng = _rng(seed)
    G = rng.standard_normal((n, r))
    G -= P @ (P.T @ G)
    Q, _ = np.linalg.qr(G)
    Q -= P @ (P.T @ Q)
    Q, _ = np.linalg.qr(Q)
    c = math.sqrt(1.0 - sin_theta**2)
    return as_basis(P * c + Q * sin_theta)


# --- serialization -------------------------------------------------------

_MAGIC = b"NORSTSCN"
_VERSION = 1


def save_scene(scene, path):
    """Write a scene to a little-endian columnar binary file.

    Layout: magic, u32 version, u32 n, d, r, J; J x u64 change times;
    column-major f8 payloads ``Y``, ``L``, ``X``, ``V``; the ``J + 1`` bases
    as column-major ``n x r`` f8 blocks; support sets as ``d`` u32 counts
    followed by the concatenated u32 row indices.
    """
    n, d = scene.Y.shape
    r = scene.P_seq[0].shape[1]
    J = len(scene.change_times)
    sets = scene.supports
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<5I", _VERSION, n, d, r, J))
        fh.write(np.asarray(scene.change_times, dtype="<u8").tobytes())
        for M in (scene.Y, scene.L, scene.X, scene.V):
            fh.write(np.asarray(M, dtype="<f8").tobytes(order="F"))
        for P in scene.P_seq:
            fh.write(np.asarray(P, dtype="<f8").tobytes(order="F"))
        fh.write(np.array([len(s) for s in sets], dtype="<u4").tobytes())
        if sets:
            fh.write(np.concatenate(sets).astype("<u4").tobytes())


def load_scene(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not a scene file")
    version, n, d, r, J = struct.unpack_from("<5I", buf, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported scene format version {version}")
    off = 8 + 20
    change_times = tuple(int(t) for t in np.frombuffer(buf, "<u8", J, off))
    off += 8 * J

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, "<f8", count, off).reshape(shape, order="F").copy()
        off += 8 * count
        return arr

    Y, L, X, V = (take((n, d)) for _ in range(4))
    P_seq = [take((n, r)) for _ in range(J + 1)]
    counts = np.frombuffer(buf, "<u4", d, off)
    off += 4 * d
    idx = np.frombuffer(buf, "<u4", int(counts.sum()), off)
    mask = np.zeros((n, d), dtype=bool)
    cols = np.repeat(np.arange(d), counts)
    mask[idx, cols] = True
    return SyntheticScene(Y=Y, L=L, X=X, V=V, mask=mask, P_seq=P_seq, change_times=change_times)


def export_csv(M, path):
    np.savetxt(path, np.asarray(M), delimiter=",", fmt="%.17g")

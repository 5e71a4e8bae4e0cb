"""NORST robust subspace tracker and its variants.

The tracker alternates between an *update* phase (``K`` mini-batch r-SVD
refinements of the subspace, one every ``alpha`` frames) and a *detect* phase
(every ``alpha`` frames, test whether the last batch of ``l_hat`` has energy
outside the current estimate). Frames are processed with a projected
compressive sensing step against the estimate available before the frame.

Time is 0-based; the first frame handed to the tracker is ``t = 0`` and plays
the role of the first post-initialization sample.
"""
from __future__ import annotations

import io
import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .linalg import as_basis, orthonormal_basis, top_r_singular_vectors
from .sparse_recovery import (
    BlockResult,
    CsSolverConfig,
    FrameResult,
    project_out,
    projected_cs_block,
)

log = logging.getLogger(__name__)

UPDATE, DETECT, FROZEN = "update", "detect", "frozen"
MODES = ("norst", "nodet", "static", "st_missing")
STATE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NorstParams:
    """Algorithm parameters.

    ``xi``, ``omega_supp`` and ``omega_evals`` may be left as ``None``; they
    then follow ``xmin / 15``, ``xmin / 2`` and ``2 eps^2 lambda_plus``. When
    ``lambda_plus`` is also ``None`` it is estimated from the first subspace
    update batch.
    """

    r: int
    alpha: int
    K: int = 8
    xmin: float = 10.0
    eps: float = 0.01
    xi: float | None = None
    omega_supp: float | None = None
    omega_evals: float | None = None
    lambda_plus: float | None = None
    xi_mode: str = "fixed"
    xmin_mode: str = "fixed"
    cs_config: CsSolverConfig = field(default_factory=CsSolverConfig)

    def __post_init__(self):
        if self.r < 1 or self.alpha < self.r:
            raise ValueError(f"need 1 <= r <= alpha, got r={self.r}, alpha={self.alpha}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.xmin > 0:
            raise ValueError("xmin must be > 0")
        if self.omega_evals is not None and not self.omega_evals > 0:
            raise ValueError("omega_evals must be > 0")
        if self.xi is not None and self.xi < 0:
            raise ValueError("xi must be >= 0")
        if self.xi_mode not in ("fixed", "data"):
            raise ValueError(f"unknown xi_mode {self.xi_mode!r}")
        if self.xmin_mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown xmin_mode {self.xmin_mode!r}")

    @classmethod
    def from_model(cls, n, r, xmin, eps, C=5.0, **kw):
        """Defaults sized from the model: ``alpha = round(C r ceil(log n))``."""
        alpha = int(round(C * r * np.ceil(np.log(n))))
        return cls(r=r, alpha=alpha, xmin=xmin, eps=eps, **kw)

    def resolved_xi(self, xmin=None):
        return self.xi if self.xi is not None else (self.xmin if xmin is None else xmin) / 15.0

    def resolved_omega_supp(self, xmin=None):
        if self.omega_supp is not None:
            return self.omega_supp
        return (self.xmin if xmin is None else xmin) / 2.0

    def to_dict(self):
        d = asdict(self)
        d["cs_config"] = asdict(self.cs_config)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["cs_config"] = CsSolverConfig(**d.get("cs_config", {}))
        return cls(**d)


@dataclass
class TrackerState:
    """Mutable tracker state; owned by one stream and advanced frame by frame."""

    params: NorstParams
    P_hat: np.ndarray
    P_hat_prev: np.ndarray
    mode: str = "norst"
    phase: str = UPDATE
    j: int = 0
    k: int = 0
    t: int = 0
    t_hat: list = field(default_factory=lambda: [0])
    t_fin: list = field(default_factory=list)
    buffer: deque = None
    lambda_plus: float | None = None
    omega_evals: float | None = None
    xmin_t: float | None = None
    xi_t: float | None = None
    n_updates: int = 0

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = deque(maxlen=self.params.alpha)
        if self.lambda_plus is None:
            self.lambda_plus = self.params.lambda_plus
        if self.omega_evals is None:
            self.omega_evals = self.params.omega_evals
            if self.omega_evals is None and self.lambda_plus is not None:
                self.omega_evals = 2.0 * self.params.eps**2 * self.lambda_plus

    @property
    def n(self):
        return self.P_hat.shape[0]

    def batch(self):
        return np.column_stack(self.buffer)

    def next_event(self):
        """Time of the next frame after which the subspace may change."""
        a = self.params.alpha
        if self.mode == "nodet":
            return a * ((self.t + a) // a) - 1
        if self.phase == UPDATE:
            return self.t_hat[-1] + (self.k + 1) * a - 1
        if self.phase == DETECT:
            fin = self.t_fin[-1]
            return fin + a * max(1, -(-(self.t - fin) // a))
        return np.inf

    def to_bytes(self):
        """Version-tagged, self-describing snapshot (``.npz`` container)."""
        meta = {
            "format": "norst-tracker-state",
            "version": STATE_FORMAT_VERSION,
            "params": self.params.to_dict(),
            "mode": self.mode, "phase": self.phase, "j": self.j, "k": self.k, "t": self.t,
            "t_hat": self.t_hat, "t_fin": self.t_fin,
            "lambda_plus": self.lambda_plus, "omega_evals": self.omega_evals,
            "xmin_t": self.xmin_t, "xi_t": self.xi_t, "n_updates": self.n_updates,
        }
        buf = io.BytesIO()
        arrays = {"P_hat": self.P_hat, "P_hat_prev": self.P_hat_prev}
        arrays["buffer"] = self.batch() if self.buffer else np.zeros((self.n, 0))
        np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob):
        with np.load(io.BytesIO(blob)) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            if meta.get("format") != "norst-tracker-state":
                raise ValueError("not a tracker state blob")
            if meta["version"] != STATE_FORMAT_VERSION:
                raise ValueError(f"unsupported state version {meta['version']}")
            params = NorstParams.from_dict(meta.pop("params"))
            buffer = deque(z["buffer"].T.copy(), maxlen=params.alpha)
            P_hat, P_prev = z["P_hat"].copy(), z["P_hat_prev"].copy()
        for key in ("format", "version"):
            meta.pop(key)
        return cls(params=params, P_hat=P_hat, P_hat_prev=P_prev, buffer=buffer, **meta)


@dataclass
class TrackResult:
    """Outputs of a full pass over a stream.

    ``estimates`` lists every subspace estimate in time order; ``used[t]`` is
    the index of the estimate used to process frame ``t`` and ``after[t]`` the
    one in force once frame ``t`` has been processed. ``updates`` records
    ``(t, j, k)`` for each subspace update.
    """

    L_hat: np.ndarray
    X_hat: np.ndarray
    mask: np.ndarray
    residual_norm: np.ndarray
    cs_converged: np.ndarray
    ls_failed: np.ndarray
    suspect: np.ndarray
    estimates: list
    used: np.ndarray
    after: np.ndarray
    updates: list
    detections: list
    t_fin: list
    detection_stats: list
    mode: str
    params: NorstParams
    final_estimates: dict = field(default_factory=dict)
    block_estimates: dict = field(default_factory=dict)
    omega_evals: float | None = None
    wall_ms: np.ndarray | None = None

    @property
    def d(self):
        return self.L_hat.shape[1]

    def frame(self, t):
        stat = dict(self.detection_stats).get(t)
        return FrameResult(
            x_hat=self.X_hat[:, t], support=np.flatnonzero(self.mask[:, t]), l_hat=self.L_hat[:, t],
            residual_norm=float(self.residual_norm[t]), detection_stat=stat,
            subspace_updated=bool(self.after[t] != self.used[t]),
            cs_converged=bool(self.cs_converged[t]), suspect=bool(self.suspect[t]),
            error="support too large for current subspace estimate" if self.ls_failed[t] else None,
        )

    def frames(self):
        return [self.frame(t) for t in range(self.d)]

    def estimate_after(self, t):
        return self.estimates[self.after[t]]

    def estimate_used(self, t):
        return self.estimates[self.used[t]]

    @property
    def timeline(self):
        """``(t_hat_j, P_hat_j)`` per segment, ``t_hat_0 = 0``.

        ``P_hat_j`` is the estimate after the segment's K updates, or the
        latest one if the stream ended first.
        """
        out = []
        for j, t in enumerate([0] + list(self.detections)):
            idx = self.final_estimates.get(j)
            if idx is None:
                idx = self.after[-1] if j == len(self.detections) else self.used[self.detections[j]]
            out.append((t, self.estimates[idx]))
        return out


def init_from_estimate(P0_hat, params, mode="norst"):
    """Fresh tracker state in the update phase starting from ``P0_hat``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    P0 = np.ascontiguousarray(as_basis(P0_hat))
    if P0.shape[1] != params.r:
        raise ValueError(f"initial estimate has rank {P0.shape[1]}, params.r = {params.r}")
    return TrackerState(params=params, P_hat=P0, P_hat_prev=P0, mode=mode,
                        xmin_t=params.xmin)


def detection_statistic(l_hat_batch, P_ref):
    """Largest eigenvalue of ``(1/alpha) sum Phi l l' Phi``, ``Phi = I - P P'``."""
    Lb = np.asarray(l_hat_batch, dtype=float)
    if Lb.ndim == 1:
        Lb = Lb[:, None]
    B = project_out(P_ref, Lb)
    s = np.linalg.norm(B, 2)
    return float(s**2 / Lb.shape[1])


def _cs_args(state):
    p = state.params
    if p.xmin_mode == "adaptive":
        xi = p.resolved_xi(state.xmin_t)
        omega = p.resolved_omega_supp(state.xmin_t)
    else:
        xi, omega = p.resolved_xi(), p.resolved_omega_supp()
    if p.xi_mode == "data" and state.xi_t is not None:
        xi = state.xi_t
    return xi, omega


def _sequential(state):
    return state.params.xi_mode == "data" or state.params.xmin_mode == "adaptive"


def _process(state, Yb, known_mask=None):
    xi, omega = _cs_args(state)
    res = projected_cs_block(Yb, state.P_hat, xi, omega, state.params.cs_config, known_support=known_mask)
    for i in range(Yb.shape[1]):
        state.buffer.append(res.L_hat[:, i])
    if state.params.xi_mode == "data":
        state.xi_t = float(np.linalg.norm(project_out(state.P_hat, res.L_hat[:, -1])))
    if state.params.xmin_mode == "adaptive":
        last = res.mask[:, -1]
        if last.any():
            state.xmin_t = float(np.min(np.abs(res.X_hat[last, -1])))
    return res


def _event(state):
    """Run the update/detect logic after the frame at ``state.t - 1``."""
    p = state.params
    t = state.t - 1
    info = {"updated": False, "stat": None, "detected": False}
    if len(state.buffer) < p.alpha:
        return info

    def update():
        U, s = top_r_singular_vectors(state.batch(), p.r, return_singular_values=True)
        if state.lambda_plus is None:
            state.lambda_plus = float(s[0] ** 2 / p.alpha)
            log.info("estimated lambda_plus = %.4g from first update batch", state.lambda_plus)
        if state.omega_evals is None:
            state.omega_evals = 2.0 * p.eps**2 * state.lambda_plus
        # contiguous, so a checkpointed copy takes the same BLAS paths
        state.P_hat = np.ascontiguousarray(U)
        state.n_updates += 1
        info["updated"] = True

    if state.mode == "nodet":
        if (t + 1) % p.alpha == 0:
            update()
            state.k += 1
        return info

    if state.phase == UPDATE and t == state.t_hat[-1] + (state.k + 1) * p.alpha - 1:
        update()
        state.k += 1
        if state.k == p.K:
            state.t_fin.append(t)
            state.phase = FROZEN if state.mode == "static" else DETECT
    elif state.phase == DETECT and t > state.t_fin[-1] and (t - state.t_fin[-1]) % p.alpha == 0:
        stat = detection_statistic(state.batch(), state.P_hat)
        info["stat"] = stat
        if stat > state.omega_evals:
            state.j += 1
            state.k = 0
            state.t_hat.append(t)
            state.P_hat_prev = state.P_hat
            state.phase = UPDATE
            info["detected"] = True
            log.info("subspace change detected at t=%d (stat %.3g > %.3g)", t, stat, state.omega_evals)
    return info


def step(state, y_t, known_support=None):
    """Process one frame; returns ``(state, FrameResult)``.

    ``state`` is advanced in place. ``known_support`` (indices of missing
    entries) is required in ``st_missing`` mode.
    """
    y = np.asarray(y_t, dtype=float)
    if y.shape != (state.n,):
        raise ValueError(f"frame has shape {y.shape}, expected ({state.n},)")
    km = None
    if state.mode == "st_missing":
        km = np.zeros((state.n, 1), dtype=bool)
        if known_support is not None:
            km[np.asarray(known_support, dtype=int), 0] = True
    res = _process(state, y[:, None], km)
    state.t += 1
    info = _event(state)
    fr = res.frame(0)
    fr.detection_stat = info["stat"]
    fr.subspace_updated = info["updated"]
    return state, fr


def run(state, Y, known_mask=None):
    """Process every column of ``Y`` through ``state``; returns a TrackResult."""
    Y = np.asarray(Y, dtype=float)
    n, d = Y.shape
    if n != state.n:
        raise ValueError(f"frames have n={n}, tracker has n={state.n}")
    if state.mode == "st_missing" and known_mask is None:
        raise ValueError("st_missing mode needs the missing-entry mask")
    p = state.params
    L_hat = np.empty_like(Y)
    X_hat = np.empty_like(Y)
    mask = np.zeros((n, d), dtype=bool)
    resid = np.empty(d)
    conv = np.empty(d, dtype=bool)
    failed = np.empty(d, dtype=bool)
    suspect = np.empty(d, dtype=bool)
    estimates = [state.P_hat]
    used = np.empty(d, dtype=int)
    after = np.empty(d, dtype=int)
    updates, stats = [], []
    final_estimates = {}
    block_estimates = {}
    wall = np.empty(d)
    clock = time.perf_counter()
    t0 = state.t
    i = 0
    while i < d:
        if _sequential(state):
            stop = i + 1
        else:
            stop = int(min(d, i + max(1, state.next_event() - state.t + 1)))
        sl = slice(i, stop)
        km = known_mask[:, sl] if known_mask is not None else None
        res = _process(state, Y[:, sl], km)
        L_hat[:, sl], X_hat[:, sl], mask[:, sl] = res.L_hat, res.X_hat, res.mask
        resid[sl], conv[sl], failed[sl], suspect[sl] = (
            res.residual_norm, res.cs_converged, res.ls_failed, res.suspect)
        used[sl] = len(estimates) - 1
        after[sl] = len(estimates) - 1
        state.t += stop - i
        j_before, k_before = state.j, state.k
        info = _event(state)
        t_abs = state.t - 1
        if info["stat"] is not None:
            stats.append((t_abs - t0, info["stat"]))
        if info["updated"]:
            estimates.append(state.P_hat)
            after[stop - 1] = len(estimates) - 1
            updates.append((t_abs - t0, j_before, k_before + 1))
            block_estimates[t_abs - t0] = len(estimates) - 1
            if state.mode != "nodet" and state.k == p.K:
                final_estimates[state.j] = len(estimates) - 1
        wall[sl] = (time.perf_counter() - clock) * 1e3
        i = stop
    detections = [t - t0 for t in state.t_hat[1:] if t >= t0]
    return TrackResult(
        L_hat=L_hat, X_hat=X_hat, mask=mask, residual_norm=resid, cs_converged=conv,
        ls_failed=failed, suspect=suspect, estimates=estimates, used=used, after=after,
        updates=updates, detections=detections, t_fin=[t - t0 for t in state.t_fin if t >= t0],
        detection_stats=stats, mode=state.mode, params=p,
        final_estimates=final_estimates, block_estimates=block_estimates,
        omega_evals=state.omega_evals, wall_ms=wall,
    )


def _check_length(Y, params):
    d = np.asarray(Y).shape[1]
    if d < (params.K + 2) * params.alpha:
        raise ValueError(f"stream of {d} frames is shorter than (K + 2) alpha = {(params.K + 2) * params.alpha}")


def track_norst(Y, P0_hat, params):
    """Full online NORST pass with change detection."""
    _check_length(Y, params)
    return run(init_from_estimate(P0_hat, params, "norst"), Y)


def track_norst_nodet(Y, P0_hat, params):
    """NORST without detection: r-SVD on the last ``alpha`` frames every ``alpha`` frames."""
    _check_length(Y, params)
    return run(init_from_estimate(P0_hat, params, "nodet"), Y)


def static_rpca_mode(Y, P0_hat, params):
    """NORST for a fixed subspace: ``K`` updates, then the estimate is frozen."""
    _check_length(Y, params)
    return run(init_from_estimate(P0_hat, params, "static"), Y)


def track_st_missing(Y_masked, missing_mask, P0_hat, params):
    """Subspace tracking with missing entries at known locations.

    Missing entries of ``Y_masked`` must be zero-filled. The l1 and
    thresholding stages are skipped: LS runs on the known missing set.
    ``P0_hat`` may be any basis, e.g. a random one.
    """
    _check_length(Y_masked, params)
    Y = np.where(missing_mask, 0.0, np.asarray(Y_masked, dtype=float))
    return run(init_from_estimate(P0_hat, params, "st_missing"), Y, known_mask=np.asarray(missing_mask, bool))


def smoothing_windows(result, Y, params=None):
    """Basis to use for each frame in the smoothing pass.

    Returns ``(bases, index)`` where ``index[t]`` points into ``bases``.

    * frames within ``2 alpha`` before a detection use
      ``basis([P_final_{j-1}, P_final_j])``;
    * frames of an update block use the segment's final estimate when it
      explains the block (the block reprocessed with that estimate leaves a
      detection statistic of at most ``omega_evals``), otherwise the
      estimate computed from that block itself. This covers changes that
      fall inside an update stretch, where the final estimate no longer fits
      early frames;
    * remaining frames keep the estimate the online pass used.

    Unions are only formed across a detected change, and keep only the
    directions in which the two estimates differ by more than ``eps``: two
    estimates of the same subspace differ by estimation error, which
    concentrates on outlier supports and would wreck the restricted isometry
    of the union.
    """
    p = params or result.params
    a, d = p.alpha, result.d
    est = result.estimates
    Y = np.asarray(Y, dtype=float)
    xi, omega_supp = p.resolved_xi(), p.resolved_omega_supp()
    index = result.used.copy()
    bases = list(est)
    omega = result.omega_evals

    starts = [0] + list(result.detections)
    finals = []
    for j, t_start in enumerate(starts):
        fin = result.final_estimates.get(j)
        if fin is None:
            # incomplete update stretch at the end of the stream
            later = [idx for t, idx in result.block_estimates.items() if t > t_start]
            fin = max(later) if later else int(result.after[min(t_start, d - 1)])
        finals.append(fin)

    for j, t_start in enumerate(starts):
        fin = finals[j]
        # the first update batch of a detected change starts at the detection frame
        for b in range(p.K):
            lo, hi = t_start + b * a, min(t_start + (b + 1) * a, d)
            if lo >= d:
                break
            if j >= 1 and b == 0:
                lo += 1  # the detection frame itself closes the previous detect block
            blk = result.block_estimates.get(hi - 1, fin)
            choice = fin
            if blk != fin and omega is not None:
                redo = projected_cs_block(Y[:, lo:hi], est[fin], xi, omega_supp, p.cs_config)
                stat = detection_statistic(redo.L_hat, est[fin])
                if stat > omega:
                    choice = blk
            index[lo:hi] = choice
        if j >= 1:
            prev_end = starts[j - 1] + p.K * a
            lo = max(prev_end, t_start - 2 * a + 1)
            if lo <= t_start:
                # directions in which the two estimates differ by less than eps are
                # estimation noise, not change; drop them
                union = np.column_stack([est[finals[j - 1]], est[fin]])
                bases.append(orthonormal_basis(union, rtol=p.eps))
                index[lo:t_start + 1] = len(bases) - 1
    return bases, index


def smoothing_pass(Y, result, params=None):
    """Offline re-estimation using union bases around changes.

    Re-runs the full projected CS step (l1, thresholding, LS) per frame
    with the basis chosen by :func:`smoothing_windows`. Returns a new
    TrackResult whose ``used``/``after`` index the smoothing bases.
    """
    if result.mode not in ("norst", "static"):
        raise ValueError("smoothing needs a NORST (or static) pass with update stretches")
    params = params or result.params
    Y = np.asarray(Y, dtype=float)
    n, d = Y.shape
    bases, index = smoothing_windows(result, Y, params)
    L_hat = np.empty_like(Y)
    X_hat = np.empty_like(Y)
    mask = np.zeros((n, d), dtype=bool)
    resid, conv, failed, suspect = np.empty(d), np.empty(d, bool), np.empty(d, bool), np.empty(d, bool)
    xi, omega = params.resolved_xi(), params.resolved_omega_supp()
    per_frame = np.zeros(d)
    for bi in np.unique(index):
        cols = np.flatnonzero(index == bi)
        clock = time.perf_counter()
        res: BlockResult = projected_cs_block(Y[:, cols], bases[bi], xi, omega, params.cs_config)
        L_hat[:, cols], X_hat[:, cols], mask[:, cols] = res.L_hat, res.X_hat, res.mask
        resid[cols], conv[cols], failed[cols], suspect[cols] = (
            res.residual_norm, res.cs_converged, res.ls_failed, res.suspect)
        per_frame[cols] = (time.perf_counter() - clock) * 1e3 / cols.size
    return replace(
        result, L_hat=L_hat, X_hat=X_hat, mask=mask, residual_norm=resid, cs_converged=conv,
        ls_failed=failed, suspect=suspect, estimates=bases, used=index, after=index.copy(),
        mode="smoothing", wall_ms=np.cumsum(per_frame),
    )

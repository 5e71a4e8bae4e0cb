"""Monte Carlo drivers, metrics and CSV output for the synthetic experiments.

Every trial draws its own seed from the experiment seed, so results do not
depend on how trials are scheduled across worker processes.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pca_sddn
from .config import ConfigError, bind_section, field_defaults, parse_text
from .datagen import (
    SceneConfig,
    assemble_scene,
    gen_support_bernoulli,
    perturbed_basis,
    rng_streams,
)
from .linalg import random_basis, sin_theta_max, top_r_singular_vectors
from .sparse_recovery import CsSolverConfig
from .tracker import (
    NorstParams,
    smoothing_pass,
    static_rpca_mode,
    track_norst,
    track_norst_nodet,
    track_st_missing,
)

log = logging.getLogger(__name__)

SCHEMA = 1
ALGOS = ("norst", "nodet", "smoothing", "static", "st_missing")
THREADS_ENV = "NORST_THREADS"
FRAME_COLUMNS = ("trial", "t", "sin_theta_err", "l_rel_err", "support_exact", "detect_stat", "wall_ms")


@dataclass
class PhaseConfig:
    b0_grid: tuple = (0.1, 0.2, 0.3, 0.4)
    r_grid: tuple = (5,)
    success_threshold: float = 0.5
    gamma_factor: float = 10.0
    train_rho: float = 0.02


@dataclass
class XminConfig:
    values: tuple = (0.5, 5.0, 10.0)


@dataclass
class SddnConfig:
    n: int = 200
    r: int = 3
    alphas: tuple = ()
    b: float = 0.01
    q: float = 0.1
    f: float = 2.0
    lambda_v: float = 0.0
    eps_ratio: float = 0.25
    C: float = 50.0
    operator: str = "norst"


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``params.r`` always equals ``scene.r``. ``init`` chooses the initial
    estimate: ``perturbed`` (at ``init_sin_theta`` from the truth),
    ``oracle`` or ``random``.
    """

    scene: SceneConfig
    params: NorstParams
    algo: str = "norst"
    trials: int = 1
    seed: int = 0
    output_dir: str = "out"
    init: str = "perturbed"
    init_sin_theta: float = 0.01
    missing_rho: float = 0.05
    alpha_c: float = 5.0
    phase: PhaseConfig = field(default_factory=PhaseConfig)
    xmin: XminConfig = field(default_factory=XminConfig)
    sddn: SddnConfig = field(default_factory=SddnConfig)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algo {self.algo!r}; expected one of {ALGOS}")
        if self.init not in ("perturbed", "oracle", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.params.r != self.scene.r:
            raise ValueError(f"params.r={self.params.r} differs from scene.r={self.scene.r}")

    def to_dict(self):
        return {
            "scene": self.scene.to_dict(),
            "params": self.params.to_dict(),
            "algo": self.algo, "trials": self.trials, "seed": self.seed,
            "output_dir": str(self.output_dir), "init": self.init,
            "init_sin_theta": self.init_sin_theta, "missing_rho": self.missing_rho,
            "alpha_c": self.alpha_c,
            "phase": dataclasses.asdict(self.phase),
            "xmin": dataclasses.asdict(self.xmin),
            "sddn": dataclasses.asdict(self.sddn),
        }

    def with_scene(self, **kw):
        """Copy with scene fields replaced; ``r`` changes re-derive ``alpha``."""
        scene = replace(self.scene, **kw)
        params = self.params
        if scene.r != params.r:
            params = replace(params, r=scene.r, alpha=default_alpha(scene.n, scene.r, self.alpha_c))
        return replace(self, scene=scene, params=params)


def default_alpha(n, r, C=5.0):
    """``round(C r ceil(log n))``; 150 for ``n = 200, r = 5``."""
    return int(round(C * r * math.ceil(math.log(n))))


def desk_config(**scene_kw):
    """Desk-scale defaults: n=200, d=2400, r=5, alpha=150, K=8, eps=1e-3."""
    scene = SceneConfig(**({"change_times": (600, 1600), "change_sizes": (0.015, 0.015)} | scene_kw))
    params = NorstParams(r=scene.r, alpha=default_alpha(scene.n, scene.r), eps=1e-3)
    return ExperimentConfig(scene=scene, params=params)


# --- configuration files -------------------------------------------------

_REQUIRED = {"scene": ("n", "d", "r")}


def load_config(text, source="<config>"):
    """Build an :class:`ExperimentConfig` from config-file text."""
    raw = parse_text(text, source)
    known = {"scene", "params", "cs", "experiment", "phase", "xmin", "sddn"}
    for name in raw:
        if name not in known:
            first = min((e.line for e in raw[name].values()), default=None)
            raise ConfigError(f"unknown section [{name}]", first, source)
    for name, keys in _REQUIRED.items():
        if name not in raw:
            raise ConfigError(f"missing required section [{name}] (field {name}.{keys[0]})", None, source)

    scene_vals = bind_section(raw["scene"], field_defaults(SceneConfig), "scene", source, _REQUIRED["scene"])
    exp_defaults = {k: v for k, v in field_defaults(ExperimentConfig).items()
                    if k not in ("scene", "params", "phase", "xmin", "sddn")}
    exp_vals = bind_section(raw.get("experiment", {}), exp_defaults, "experiment", source)
    param_defaults = field_defaults(NorstParams)
    param_defaults["alpha"] = None
    param_vals = bind_section(raw.get("params", {}), param_defaults, "params", source,
                              exclude=("r", "cs_config"))
    cs_vals = bind_section(raw.get("cs", {}), field_defaults(CsSolverConfig), "cs", source)
    sub = {}
    for name, cls in (("phase", PhaseConfig), ("xmin", XminConfig), ("sddn", SddnConfig)):
        sub[name] = bind_section(raw.get(name, {}), field_defaults(cls), name, source)

    def build(fn, section):
        try:
            return fn()
        except (TypeError, ValueError) as exc:
            entries = raw.get(section, {})
            first = min((e.line for e in entries.values()), default=None)
            raise ConfigError(f"invalid [{section}]: {exc}", first, source) from None

    scene = build(lambda: SceneConfig(**scene_vals), "scene")
    alpha_c = exp_vals.get("alpha_c", 5.0)
    if param_vals.get("alpha") is None:
        param_vals["alpha"] = default_alpha(scene.n, scene.r, alpha_c)
    cs = build(lambda: CsSolverConfig(**cs_vals), "cs")
    params = build(lambda: NorstParams(r=scene.r, cs_config=cs, **param_vals), "params")
    phase = build(lambda: PhaseConfig(**sub["phase"]), "phase")
    xmin = build(lambda: XminConfig(**sub["xmin"]), "xmin")
    sddn = build(lambda: SddnConfig(**sub["sddn"]), "sddn")
    return build(lambda: ExperimentConfig(
        scene=scene, params=params, phase=phase, xmin=xmin, sddn=sddn, **exp_vals), "experiment")


# --- trials ----------------------------------------------------------------

def trial_seeds(seed, trials):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(trials)]


@dataclass
class MetricsRow:
    """Per-frame metrics; ``wall_ms`` is cumulative time since the trial started."""

    t: int
    sin_theta_err: float
    l_rel_err: float
    support_exact: bool
    detect_stat: float | None
    wall_ms: float

    def __post_init__(self):
        if self.sin_theta_err < 0 or self.l_rel_err < 0:
            raise ValueError("errors must be >= 0")


@dataclass
class TrialOutput:
    trial: int
    seed: int
    sin_theta: np.ndarray
    l_rel: np.ndarray
    support_exact: np.ndarray
    detect_stat: np.ndarray
    wall_ms: np.ndarray
    rel_fro_err: float
    rel_fro_err_online: float
    detections: list
    change_times: tuple
    late_changes: list
    update_errors: list
    alpha: int

    def rows(self):
        for t in range(self.sin_theta.size):
            stat = self.detect_stat[t]
            yield MetricsRow(t, float(self.sin_theta[t]), float(self.l_rel[t]), bool(self.support_exact[t]),
                             None if np.isnan(stat) else float(stat), float(self.wall_ms[t]))


def initial_estimate(cfg, scene, rng):
    P0 = scene.P_seq[0]
    if cfg.init == "oracle":
        return P0.copy()
    if cfg.init == "random":
        return random_basis(scene.n, scene.config.r, rng)
    return perturbed_basis(P0, cfg.init_sin_theta, rng)


def rel_fro(L_hat, L):
    return float(np.linalg.norm(L_hat - L) / np.linalg.norm(L))


def frame_sin_theta(result, scene):
    """``sin theta(P_hat_(t), P_(t))`` with the estimate in force after frame ``t``."""
    seg = scene.segment_index()
    cache = {}
    out = np.empty(scene.d)
    for t in range(scene.d):
        key = (int(result.after[t]), int(seg[t]))
        if key not in cache:
            cache[key] = sin_theta_max(result.estimates[key[0]], scene.P_seq[key[1]])
        out[t] = cache[key]
    return out


def late_changes(change_times, detections, alpha, K):
    """True changes that fall inside an update stretch of the tracker."""
    stretches = [(th, th + K * alpha - 1) for th in [0] + list(detections)]
    return [tj for tj in change_times if any(a < tj <= b for a, b in stretches)]


def match_detections(change_times, detections, alpha, d):
    """Pair detections with changes in ``[t_j, t_j + 2 alpha]``.

    Returns ``(delays, false_alarms)``: ``delays[j]`` is ``t_hat - t_j`` or
    ``None`` when the change was missed; false alarms are detections that
    match no change.
    """
    delays, used = [], set()
    for tj in change_times:
        hit = next((th for th in detections if tj <= th <= tj + 2 * alpha and th not in used), None)
        if hit is None:
            delays.append(None)
        else:
            used.add(hit)
            delays.append(hit - tj)
    false = [th for th in detections if th not in used]
    return delays, false


def update_error_sequences(result, scene):
    """Per update stretch, ``[err_0, err_1, ..., err_k]`` against the truth.

    ``err_0`` is the error of the estimate entering the stretch; ``err_k``
    that of the k-th update, both measured against the subspace in force at
    the update time.
    """
    seqs = []
    current = None
    for t, j, k in result.updates:
        P_true = scene.subspace_at(t)
        if k == 1:
            current = [sin_theta_max(result.estimates[result.used[t]], P_true)]
            seqs.append(current)
        current.append(sin_theta_max(result.estimates[result.after[t]], P_true))
    return seqs


def run_algorithm(algo, Y, P0, params, missing=None):
    """Dispatch one algorithm; returns ``(result, online_result)``."""
    if algo == "norst":
        res = track_norst(Y, P0, params)
        return res, res
    if algo == "nodet":
        res = track_norst_nodet(Y, P0, params)
        return res, res
    if algo == "static":
        res = static_rpca_mode(Y, P0, params)
        return res, res
    if algo == "smoothing":
        online = track_norst(Y, P0, params)
        return smoothing_pass(Y, online, params), online
    if algo == "st_missing":
        res = track_st_missing(Y, missing, P0, params)
        return res, res
    raise ValueError(f"unknown algo {algo!r}")


def run_trial(cfg, trial, seed=None):
    """Generate the trial's scene, run ``cfg.algo`` and compute metrics."""
    seed = trial_seeds(cfg.seed, trial + 1)[trial] if seed is None else seed
    scene_cfg = replace(cfg.scene, seed=seed)
    missing = None
    if cfg.algo == "st_missing":
        scene_cfg = replace(scene_cfg, support_model="none")
    scene = assemble_scene(scene_cfg)
    streams = rng_streams(seed)
    Y = scene.Y
    if cfg.algo == "st_missing":
        missing = gen_support_bernoulli(scene.n, scene.d, cfg.missing_rho, streams["mask"])
        Y = np.where(missing, 0.0, scene.Y)
    P0 = initial_estimate(cfg, scene, streams["init"])
    result, online = run_algorithm(cfg.algo, Y, P0, cfg.params, missing)
    p = cfg.params
    late = late_changes(scene.change_times, online.detections, p.alpha, p.K) if cfg.algo != "nodet" else []
    for tj in late:
        log.info("trial %d: change at t=%d falls inside an update stretch; the (K+2) alpha "
                    "separation assumption is violated and the change is absorbed late", trial, tj)
    norms = np.linalg.norm(scene.L, axis=0)
    err = np.linalg.norm(result.L_hat - scene.L, axis=0)
    l_rel = np.where(norms > 0, err / np.where(norms > 0, norms, 1.0), err)
    true_mask = missing if missing is not None else scene.mask
    stats = np.full(scene.d, np.nan)
    for t, s in online.detection_stats:
        stats[t] = s
    return TrialOutput(
        trial=trial, seed=seed, sin_theta=frame_sin_theta(result, scene), l_rel=l_rel,
        support_exact=np.all(result.mask == true_mask, axis=0), detect_stat=stats,
        wall_ms=np.asarray(result.wall_ms), rel_fro_err=rel_fro(result.L_hat, scene.L),
        rel_fro_err_online=rel_fro(online.L_hat, scene.L), detections=list(online.detections),
        change_times=tuple(scene.change_times), late_changes=late,
        update_errors=update_error_sequences(online, scene), alpha=p.alpha,
    )


def _trial_task(args):
    cfg, trial, seed = args
    return run_trial(cfg, trial, seed)


def default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_trials(cfg, threads=None):
    """All trials of ``cfg`` in trial order, optionally over a process pool."""
    threads = default_threads() if threads is None else threads
    seeds = trial_seeds(cfg.seed, cfg.trials)
    tasks = [(cfg, i, s) for i, s in enumerate(seeds)]
    if threads <= 1 or cfg.trials == 1:
        return [_trial_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_trial_task, tasks))


# --- output ----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if v is None:
        return ""
    return v


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    """Rows of a schema-tagged CSV as dicts of strings."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema={SCHEMA}":
            raise ValueError(f"{path}: unsupported schema line {first!r}")
        return list(csv.DictReader(fh))


def versions():
    import scipy

    try:
        from importlib.metadata import version

        pkg = version("artifact")
    except Exception:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "norst": pkg}


def write_manifest(out_dir, command, cfg, outputs, wall_s, extra=None):
    manifest = {
        "schema": SCHEMA,
        "command": command,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "config": cfg.to_dict(),
        "versions": versions(),
        "outputs": sorted(str(Path(o).name) for o in outputs),
        "wall_time_s": wall_s,
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --- experiments -----------------------------------------------------------

@dataclass
class CurveResult:
    trials: list
    curve: list
    files: list


def sample_times(d, alpha):
    return list(range(alpha - 1, d, alpha))


def run_error_curve(cfg, out_dir=None, threads=None):
    """Per-frame metrics for every trial and the trial-mean curve at ``k alpha - 1``.

    Writes ``error_curve.csv``, ``frames.csv`` and ``trials.csv`` when
    ``out_dir`` is given.
    """
    outs = run_trials(cfg, threads)
    times = sample_times(cfg.scene.d, cfg.params.alpha)
    curve = [(t, float(np.mean([o.sin_theta[t] for o in outs])), float(np.mean([o.l_rel[t] for o in outs])))
             for t in times]
    files = []
    if out_dir is not None:
        out = Path(out_dir)
        files.append(write_csv(out / "error_curve.csv", ("t", "sin_theta_err", "l_rel_err"), curve))
        files.append(write_csv(out / "frames.csv", FRAME_COLUMNS, (
            (o.trial, r.t, r.sin_theta_err, r.l_rel_err, r.support_exact, r.detect_stat, r.wall_ms)
            for o in outs for r in o.rows())))
        files.append(write_csv(out / "trials.csv",
                               ("trial", "seed", "rel_fro_err", "rel_fro_err_online", "detections", "late_changes"),
                               ((o.trial, o.seed, o.rel_fro_err, o.rel_fro_err_online,
                                 ";".join(map(str, o.detections)), ";".join(map(str, o.late_changes)))
                                for o in outs)))
    return CurveResult(trials=outs, curve=curve, files=files)


def phase_transition_config(base, b0, r):
    """Bernoulli-model scene with larger subspace changes, run with smoothing."""
    ph = base.phase
    cfg = base.with_scene(r=int(r), support_model="bernoulli", rho=float(b0), train_rho=ph.train_rho,
                          change_sizes=tuple(ph.gamma_factor * g for g in base.scene.change_sizes))
    return replace(cfg, algo="smoothing")


def run_phase_transition(b0_grid, r_grid, trials, base_config, out_dir=None, threads=None):
    """Success fraction (relative error below threshold) for each ``(b0, r)``."""
    rows = []
    thr = base_config.phase.success_threshold
    for r in r_grid:
        for b0 in b0_grid:
            cfg = replace(phase_transition_config(base_config, b0, r), trials=int(trials))
            outs = run_trials(cfg, threads)
            ok = sum(o.rel_fro_err < thr for o in outs)
            rows.append((float(b0), int(r), len(outs), ok, ok / len(outs)))
    files = []
    if out_dir is not None:
        files.append(write_csv(Path(out_dir) / "phase_transition.csv",
                               ("b0", "r", "trials", "successes", "success_fraction"), rows))
    return rows, files


def batch_floor(scene, alpha, t):
    """Subspace error of r-SVD on the noiseless ``L + X`` batch ending at ``t``.

    What PCA achieves when outliers are left in the data, the reference
    level for outliers too small to detect.
    """
    lo = max(0, t - alpha + 1)
    U = top_r_singular_vectors(scene.L[:, lo:t + 1] + scene.X[:, lo:t + 1], scene.config.r)
    return sin_theta_max(U, scene.subspace_at(t))


def _xmin_trial(args):
    cfg, trial, seed = args
    out = run_trial(cfg, trial, seed)
    scene = assemble_scene(replace(cfg.scene, seed=seed))
    a = cfg.params.alpha
    floors = np.array([batch_floor(scene, a, t) for t in sample_times(scene.d, a)])
    return out, floors


def run_xmin_study(xmin_values, base_config, out_dir=None, threads=None):
    """Error curves with every outlier set to ``xmin``; algorithm thresholds stay fixed.

    Rows are ``(xmin, t, sin_theta_err, floor)`` with trial means at
    ``k alpha - 1``.
    """
    threads = default_threads() if threads is None else threads
    rows = []
    times = sample_times(base_config.scene.d, base_config.params.alpha)
    for xv in xmin_values:
        cfg = base_config.with_scene(xmin=float(xv), xmax=float(xv))
        tasks = [(cfg, i, s) for i, s in enumerate(trial_seeds(cfg.seed, cfg.trials))]
        if threads <= 1 or len(tasks) == 1:
            res = [_xmin_trial(t) for t in tasks]
        else:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                res = list(pool.map(_xmin_trial, tasks))
        for i, t in enumerate(times):
            err = float(np.mean([o.sin_theta[t] for o, _ in res]))
            floor = float(np.mean([f[i] for _, f in res]))
            rows.append((float(xv), t, err, floor))
    files = []
    if out_dir is not None:
        files.append(write_csv(Path(out_dir) / "xmin_study.csv", ("xmin", "t", "sin_theta_err", "floor"), rows))
    return rows, files


def run_st_missing(cfg, out_dir=None, threads=None):
    """Subspace error after every update for ST with known missing entries."""
    cfg = replace(cfg, algo="st_missing")
    outs = run_trials(cfg, threads)
    rows = []
    for o in outs:
        for seq in o.update_errors:
            for k, e in enumerate(seq):
                rows.append((o.trial, k, e))
    files = []
    if out_dir is not None:
        files.append(write_csv(Path(out_dir) / "st_missing.csv", ("trial", "k", "sin_theta_err"), rows))
    return outs, rows, files


def run_pca_sddn(cfg, out_dir=None):
    """PCA-SDDN Monte Carlo over the configured ``alphas`` (default: the corollary's)."""
    s = cfg.sddn
    alphas = s.alphas or (pca_sddn.required_alpha(s.n, s.r, s.q, s.f, s.eps_ratio * s.q,
                                                   g=0.0, C=s.C),)
    rep = pca_sddn.empirical_bound_check(s.n, s.r, [int(a) for a in alphas], s.b, s.q, s.f, s.lambda_v,
                                         trials=cfg.trials, seed=cfg.seed, operator=s.operator)
    files = []
    if out_dir is not None:
        path = Path(out_dir) / "pca_sddn.csv"
        files.append(write_csv(path, pca_sddn.REPORT_COLUMNS,
                               ([row[c] for c in pca_sddn.REPORT_COLUMNS] for row in rep.rows)))
    return rep, files


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0

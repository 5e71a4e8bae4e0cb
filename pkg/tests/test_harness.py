import dataclasses
import json

import numpy as np
import pytest

from norst import harness
from norst.config import ConfigError, coerce, parse_text
from norst.datagen import SceneConfig
from norst.harness import (
    ExperimentConfig,
    MetricsRow,
    late_changes,
    load_config,
    match_detections,
    read_csv,
    run_error_curve,
    run_trial,
    run_trials,
    trial_seeds,
    write_csv,
)
from norst.sparse_recovery import CsSolverConfig
from norst.tracker import NorstParams

SMALL = """\
# small scene for fast tests
[scene]
n = 60
d = 600
r = 2
change_times = 550
change_sizes = 0.01
s = 3
c0 = 0.3
tau = 50
train_c0 = 0.05

[params]
eps = 0.001

[experiment]
trials = 2
seed = 3
"""


def small_cfg(**kw):
    cfg = load_config(SMALL)
    return dataclasses.replace(cfg, **kw) if kw else cfg


# --- config files --------------------------------------------------------------------

def test_load_config_values():
    cfg = small_cfg()
    assert cfg.scene.n == 60 and cfg.scene.change_times == (550,)
    assert cfg.scene.change_sizes == (0.01,)
    assert cfg.params.r == 2
    assert cfg.params.alpha == harness.default_alpha(60, 2) == 50
    assert cfg.params.eps == 0.001
    assert (cfg.trials, cfg.seed) == (2, 3)


def test_load_config_explicit_alpha_and_cs():
    cfg = load_config(SMALL + "\n[cs]\nl1_tolerance = 1e-6\n")
    assert cfg.params.cs_config.l1_tolerance == 1e-6
    cfg = load_config(SMALL.replace("eps = 0.001", "eps = 0.001\nalpha = 60\nK = 4"))
    assert (cfg.params.alpha, cfg.params.K) == (60, 4)


def test_missing_required_field_named():
    text = SMALL.replace("d = 600\n", "")
    with pytest.raises(ConfigError, match=r"missing required field scene\.d"):
        load_config(text)


def test_missing_scene_section():
    with pytest.raises(ConfigError, match="scene"):
        load_config("[params]\neps = 0.1\n")


def test_unknown_key_reports_line():
    text = SMALL.replace("s = 3", "sz = 3")
    line = text.splitlines().index("sz = 3") + 1
    with pytest.raises(ConfigError) as exc:
        load_config(text, source="c.cfg")
    assert exc.value.line == line
    assert f"c.cfg:{line}:" in str(exc.value) and "'sz'" in str(exc.value)


def test_unknown_section_reports_line():
    with pytest.raises(ConfigError, match=r"<config>:\d+: unknown section \[extra\]"):
        load_config(SMALL + "[extra]\nfoo = 1\n")


def test_bad_value_reports_line():
    text = SMALL.replace("n = 60", "n = sixty")
    with pytest.raises(ConfigError, match=r":3: bad value for scene\.n"):
        load_config(text)


def test_invalid_combination_reported():
    with pytest.raises(ConfigError, match=r"invalid \[scene\]"):
        load_config(SMALL.replace("c0 = 0.3", "c0 = 0.3\nxmax = 1.0"))
    with pytest.raises(ConfigError, match=r"invalid \[experiment\]"):
        load_config(SMALL.replace("trials = 2", "trials = 0"))


def test_params_r_not_settable():
    with pytest.raises(ConfigError, match="'r'"):
        load_config(SMALL.replace("eps = 0.001", "eps = 0.001\nr = 3"))


@pytest.mark.parametrize("text,msg", [
    ("x = 1\n", "before any"),
    ("[a]\n[a]\n", "duplicate section"),
    ("[a]\nx = 1\nx = 2\n", "duplicate key"),
    ("[a]\njust words\n", "cannot parse"),
])
def test_parse_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_text(text)


def test_parse_comments_and_lines():
    raw = parse_text("# top\n\n[s]  # trailing\nk = v # note\n")
    assert raw["s"]["k"].value == "v" and raw["s"]["k"].line == 4


@pytest.mark.parametrize("text,default,expect", [
    ("true", False, True), ("3", 1, 3), ("2.5", 1.0, 2.5), ("1, 2.5, x", (), (1, 2.5, "x")),
    ("", (), ()), ("abc", "", "abc"), ("none", None, None), ("7", None, 7), ("0.1", None, 0.1),
])
def test_coerce(text, default, expect):
    assert coerce(text, default) == expect


def test_coerce_rejects_bad_bool():
    with pytest.raises(ValueError):
        coerce("yes", True)


def test_experiment_config_validation():
    scene = SceneConfig()
    p = NorstParams(r=5, alpha=150)
    with pytest.raises(ValueError):
        ExperimentConfig(scene=scene, params=p, algo="pcp")
    with pytest.raises(ValueError):
        ExperimentConfig(scene=scene, params=p, init="lucky")
    with pytest.raises(ValueError, match="differs"):
        ExperimentConfig(scene=scene, params=NorstParams(r=4, alpha=150))


def test_with_scene_rederives_alpha():
    cfg = harness.desk_config()
    assert cfg.params.alpha == 150
    cfg3 = cfg.with_scene(r=3)
    assert cfg3.params.r == 3 and cfg3.params.alpha == 90


# --- seeds, metrics --------------------------------------------------------------------

def test_trial_seeds_prefix_consistent():
    assert trial_seeds(5, 3) == trial_seeds(5, 10)[:3]
    assert trial_seeds(5, 3) != trial_seeds(6, 3)


def test_metrics_row_rejects_negative():
    with pytest.raises(ValueError):
        MetricsRow(0, -1.0, 0.0, True, None, 0.0)


def test_late_changes():
    # stretches [0, 1199] and [1649, 2848] for alpha=150, K=8
    assert late_changes((600, 1600), [1649], 150, 8) == [600]
    assert late_changes((1300,), [1349], 150, 8) == []


def test_match_detections():
    delays, false = match_detections((1300, 3000), [1349, 2000, 3148], 150, 4800)
    assert delays == [49, 148] and false == [2000]
    delays, false = match_detections((1300,), [], 150, 4800)
    assert delays == [None] and false == []


def test_run_trial_metrics():
    cfg = small_cfg()
    out = run_trial(cfg, 0)
    assert out.seed == trial_seeds(cfg.seed, 1)[0]
    assert out.sin_theta.shape == (600,)
    assert np.all(out.sin_theta >= 0) and np.all(out.l_rel >= 0)
    assert np.all(np.diff(out.wall_ms) >= 0) and out.wall_ms[0] >= 0
    rows = list(out.rows())
    assert rows[49].t == 49 and rows[0].sin_theta_err == pytest.approx(0.01)
    assert out.update_errors[0][0] == pytest.approx(0.01)


def test_run_trials_independent_of_workers():
    cfg = small_cfg()
    a = run_trials(cfg, threads=1)
    b = run_trials(cfg, threads=2)
    for x, y in zip(a, b):
        assert x.seed == y.seed
        np.testing.assert_array_equal(x.sin_theta, y.sin_theta)
        np.testing.assert_array_equal(x.l_rel, y.l_rel)


def test_default_threads_env(monkeypatch):
    monkeypatch.setenv(harness.THREADS_ENV, "3")
    assert harness.default_threads() == 3
    monkeypatch.setenv(harness.THREADS_ENV, "many")
    assert harness.default_threads() == 1


@pytest.mark.parametrize("algo", ["norst", "nodet", "smoothing", "static", "st_missing"])
def test_every_algo_runs(algo):
    out = run_trial(small_cfg(algo=algo, init="random" if algo == "st_missing" else "perturbed"), 0)
    assert np.isfinite(out.rel_fro_err)
    if algo == "smoothing":
        assert out.rel_fro_err < out.rel_fro_err_online


# --- experiment drivers ----------------------------------------------------------------------

def test_error_curve_files(tmp_path):
    res = run_error_curve(small_cfg(), tmp_path)
    names = sorted(p.name for p in res.files)
    assert names == ["error_curve.csv", "frames.csv", "trials.csv"]
    rows = read_csv(tmp_path / "error_curve.csv")
    assert [int(r["t"]) for r in rows] == list(range(49, 600, 50))
    frames = read_csv(tmp_path / "frames.csv")
    assert len(frames) == 2 * 600
    assert list(frames[0]) == list(harness.FRAME_COLUMNS)


def test_error_curve_flat_without_outliers():
    cfg = small_cfg(init="oracle")
    cfg = cfg.with_scene(support_model="none", change_times=(), change_sizes=())
    res = run_error_curve(cfg)
    assert max(e for _, e, _ in res.curve) <= cfg.params.eps


def test_error_curve_spike_then_decay():
    cfg = dataclasses.replace(harness.desk_config(), trials=1)
    cfg = cfg.with_scene(d=3000, change_times=(1400,), change_sizes=(0.015,))
    curve = {t: e for t, e, _ in run_error_curve(cfg).curve}
    before, spike = curve[1349], curve[1499]
    assert spike > 10 * before
    tail = [curve[t] for t in range(1649, 3000, 150)]
    assert tail[-1] < spike / 10
    assert all(b <= a * 1.05 for a, b in zip(tail, tail[1:]))


def test_csv_schema_and_floats(tmp_path):
    x = 0.1 + 0.2
    path = write_csv(tmp_path / "a.csv", ("a", "b", "c"), [(1, x, float("nan")), (2, True, None)])
    assert path.read_text().splitlines()[0] == "# schema=1"
    rows = read_csv(path)
    assert float(rows[0]["b"]) == x and rows[0]["c"] == "" and rows[1]["b"] == "1"
    (tmp_path / "b.csv").write_text("# schema=7\na\n1\n")
    with pytest.raises(ValueError, match="schema"):
        read_csv(tmp_path / "b.csv")


def test_manifest_complete(tmp_path):
    cfg = small_cfg()
    path = harness.write_manifest(tmp_path, "curve", cfg, [tmp_path / "x.csv"], 1.5, {"note": 1})
    m = json.loads(path.read_text())
    assert m["schema"] == 1 and m["command"] == "curve" and m["seed"] == 3 and m["wall_time_s"] == 1.5
    assert {"python", "numpy", "scipy", "norst"} <= set(m["versions"])
    assert m["outputs"] == ["x.csv"] and m["note"] == 1
    conf = m["config"]
    for cls, section in ((SceneConfig, conf["scene"]), (NorstParams, conf["params"]),
                         (CsSolverConfig, conf["params"]["cs_config"])):
        assert {f.name for f in dataclasses.fields(cls)} <= set(section)
    for f in dataclasses.fields(ExperimentConfig):
        assert f.name in conf


def test_phase_transition_easy_corner(tmp_path):
    base = small_cfg(trials=2)
    rows, files = harness.run_phase_transition((0.01,), (2,), 2, base, tmp_path)
    assert rows == [(0.01, 2, 2, 2, 1.0)]
    assert read_csv(files[0])[0]["success_fraction"] == "1.0"


def test_phase_transition_config():
    cfg = harness.phase_transition_config(harness.desk_config(), 0.4, 3)
    assert cfg.algo == "smoothing" and cfg.scene.support_model == "bernoulli"
    assert cfg.scene.rho == 0.4 and cfg.params.r == 3
    assert cfg.scene.change_sizes == pytest.approx((0.15, 0.15))


def test_xmin_study_rows(tmp_path):
    cfg = small_cfg(trials=1).with_scene(change_times=(), change_sizes=())
    rows, files = harness.run_xmin_study((10.0,), cfg, tmp_path)
    assert len(rows) == 12 and all(r_[0] == 10.0 for r_ in rows)
    assert rows[-1][2] <= 1e-3
    floors = [r_[3] for r_ in rows]
    assert all(0 <= f <= 1 for f in floors)
    assert files[0].name == "xmin_study.csv"


def test_st_missing_driver(tmp_path):
    cfg = small_cfg(init="random").with_scene(change_times=(), change_sizes=())
    outs, rows, files = harness.run_st_missing(cfg, tmp_path)
    by_k = {}
    for trial, k, e in rows:
        by_k.setdefault(k, []).append(e)
    assert max(by_k[cfg.params.K]) <= cfg.params.eps
    assert files[0].name == "st_missing.csv"


def test_pca_sddn_driver(tmp_path):
    cfg = small_cfg(trials=2)
    cfg = dataclasses.replace(cfg, sddn=dataclasses.replace(cfg.sddn, n=50, alphas=(100, 200)))
    rep, files = harness.run_pca_sddn(cfg, tmp_path)
    assert len(rep.rows) == 4 and set(rep.curve) == {100, 200}
    assert len(read_csv(files[0])) == 4

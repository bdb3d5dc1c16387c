import csv
import filecmp
import json

import numpy as np
import pytest

from gpcal import harness
from gpcal.config import config_from_dict


def small_cfg(**kw):
    base = {"robot": "planar2", "pool": {"kind": "grid", "resolution": 15}, "budget": 6,
            "seeds": [0], "strategies": ["gp-ucb"], "refit": {"restarts": 2}}
    base.update(kw)
    return config_from_dict(base)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_streams_distinct_and_stable():
    a = harness.run_streams(3)
    assert len(set(a)) == 3
    assert a == harness.run_streams(3)
    assert a != harness.run_streams(4)


def test_budget_one_single_row():
    recs = harness.run_experiment(small_cfg(budget=1))
    assert len(recs) == 1 and len(recs[0].rows) == 1
    assert recs[0].holdout is not None


def test_outputs_have_expected_rows(tmp_path):
    cfg = small_cfg(budget=30, pool={"kind": "grid", "resolution": 21})
    harness.run_experiment(cfg, tmp_path)
    rid = "gp-ucb_seed0"
    curve = read_csv(tmp_path / "curves" / f"{rid}.csv")
    assert len(curve) == 30
    assert list(curve[0]) == ["t", "chosen_q1", "chosen_q2", "err_norm", "best_so_far"]
    hold = read_csv(tmp_path / "holdout" / f"{rid}.csv")
    assert len(hold) == 50
    rec = json.loads((tmp_path / "runs" / f"{rid}.json").read_text())
    assert rec["schema_version"] == 1


def test_holdout_line_inside_limits():
    cfg = small_cfg()
    rb = cfg.resolve_robot()
    H = harness.holdout_points(cfg, rb)
    assert H.shape == (50, 2)
    np.testing.assert_allclose(H[0], [-2.4, -2.4])
    np.testing.assert_allclose(H[-1], [2.4, 2.4])


def test_rerun_byte_identical(tmp_path):
    cfg = small_cfg(strategies=["gp-ucb", "random", "linearized"], seeds=[0, 1])
    harness.run_experiment(cfg, tmp_path / "a")
    harness.run_experiment(cfg, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    stack = [cmp]
    while stack:
        c = stack.pop()
        assert not c.left_only and not c.right_only
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        assert not mismatch and not errors
        stack.extend(c.subdirs.values())


def test_emit_outputs_rewrites_identically(tmp_path):
    recs = harness.run_experiment(small_cfg(strategies=["random"], seeds=[2]))
    paths = harness.emit_outputs(recs, tmp_path)
    before = {p: p.read_bytes() for p in paths}
    harness.emit_outputs(recs, tmp_path)
    assert all(p.read_bytes() == b for p, b in before.items())


def test_aggregate_is_pointwise_median(tmp_path):
    cfg = small_cfg(strategies=["random"], seeds=[0, 1, 2])
    recs = harness.run_experiment(cfg, tmp_path)
    agg = [r for r in read_csv(tmp_path / "aggregate.csv") if r["strategy"] == "random"]
    err = np.array([[row.err_norm for row in r.rows] for r in recs])
    best = np.array([[row.best_so_far for row in r.rows] for r in recs])
    assert len(agg) == cfg.budget
    for t, row in enumerate(agg):
        assert float(row["err_norm_median"]) == np.median(err[:, t])
        assert float(row["best_median"]) == np.median(best[:, t])


def test_failure_is_isolated(tmp_path, monkeypatch):
    real = harness.run_one

    def flaky(cfg, strategy, seed, *a):
        if seed == 1:
            raise RuntimeError("sensor offline")
        return real(cfg, strategy, seed, *a)

    monkeypatch.setattr(harness, "run_one", flaky)
    recs = harness.run_experiment(small_cfg(seeds=[0, 1, 2]), tmp_path)
    assert [r.ok for r in recs] == [True, False, True]
    assert "sensor offline" in recs[1].error
    assert (tmp_path / "curves" / "gp-ucb_seed0.csv").exists()
    assert (tmp_path / "curves" / "gp-ucb_seed2.csv").exists()
    failed = json.loads((tmp_path / "runs" / "gp-ucb_seed1.json").read_text())
    assert "sensor offline" in failed["error"]


def test_linearized_strategy_record():
    rec = harness.run_one(small_cfg(strategies=["linearized"], budget=8), "linearized", 0)
    assert len(rec.rows) == 8 and rec.ok
    assert rec.extra["rank_deficient"]
    assert rec.final_holdout < rec.uncalibrated_holdout


def test_sweep_rows_per_seed():
    cfg = small_cfg(seeds=[0, 1])
    table = harness.sweep_perturbation(cfg, levels=[50])
    for m in ("gp-ucb", "linearized"):
        assert sum(1 for lv, mm, _, _ in table.rows if mm == m) == 2
    assert len(table.medians()) == 2


def test_sweep_level_zero_near_zero_error(tmp_path):
    table = harness.sweep_perturbation(small_cfg(), levels=[0], out_dir=tmp_path)
    assert table.median(0.0, "gp-ucb") < 1e-6
    assert table.median(0.0, "linearized") < 1e-6
    assert len(read_csv(tmp_path / "sweep.csv")) == 2


def test_histogram_zero_perturbation_centre_bin(tmp_path):
    cfg = small_cfg(perturbation={"percent": 0}, pool={"kind": "lhs", "size": 300})
    res = harness.residual_histogram(cfg, 100, out_dir=tmp_path)
    centre = cfg.histogram.bins // 2
    for a in res.axes:
        assert a.counts[centre] == 100 and a.counts.sum() == 100
    assert (tmp_path / "histogram.csv").exists()


def test_histogram_edges_independent_of_sample_count():
    cfg = config_from_dict({"robot": "lander6"})
    small = harness.residual_histogram(cfg, 100)
    large = harness.residual_histogram(cfg, 1500)
    for a, b in zip(small.axes, large.axes):
        np.testing.assert_array_equal(a.edges, b.edges)
        assert abs(a.mean - b.mean) <= 0.5 * b.std
        assert a.std == pytest.approx(b.std, rel=0.3)


def test_histogram_too_many_samples():
    cfg = small_cfg(pool={"kind": "lhs", "size": 200})
    with pytest.raises(ValueError, match="exceeds"):
        harness.residual_histogram(cfg, 500)


def test_auto_pool_grid_for_planar_lhs_otherwise():
    planar = config_from_dict({"robot": "planar2"})
    assert len(harness.build_pool(planar, planar.resolve_robot())) == 41 * 41
    wam = config_from_dict({"robot": "wam7"})
    pool = harness.build_pool(wam, wam.resolve_robot())
    assert len(pool) == 2000 and pool.generation.startswith("latin")

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpt import bench, net
from mpt import planners as pl
from mpt.bench import DatasetRecord, EvalRecord
from mpt.worldgen import Costmap, load_pgm


def sorted_oracle_quantile(values, q):
    v = sorted(values)
    n = len(v)
    for k in range(1, n + 1):  # smallest rank whose cumulative share reaches q
        if k / n >= q - 1e-12:
            return v[k - 1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.sampled_from(bench.QUANTILES))
def test_nearest_rank_matches_sort_oracle(values, q):
    assert bench.nearest_rank(values, q) == sorted_oracle_quantile(values, q)


def test_nearest_rank_small_cases():
    assert bench.nearest_rank([3, 1, 2], 0.5) == 2
    assert bench.nearest_rank([4, 1, 3, 2], 0.5) == 2
    assert bench.nearest_rank([4, 1, 3, 2], 0.95) == 4
    assert bench.nearest_rank([7], 0.05) == 7
    assert math.isnan(bench.nearest_rank([], 0.5))


def test_derive_seed_stable_and_distinct():
    assert bench.derive_seed(0, "eval", 1, 2) == bench.derive_seed(0, "eval", 1, 2)
    assert bench.derive_seed(0, "eval", 1, 2) != bench.derive_seed(0, "eval", 2, 1)
    assert bench.derive_seed(0, "eval", 1, 2) != bench.derive_seed(1, "eval", 1, 2)


def test_parse_planner():
    assert bench.parse_planner("rrtstar") == (None, "rrtstar")
    assert bench.parse_planner("mpt-sst") == ("mpt", "sst")
    assert bench.parse_planner("oracle-irrtstar") == ("oracle", "irrtstar")
    for bad in ("prm", "foo-rrtstar", ""):
        with pytest.raises(bench.ConfigError):
            bench.parse_planner(bad)


def test_summary_over_successes_only():
    recs = [EvalRecord(0, i, "rrtstar", i % 2 == 0, float(i), 0.0, 10 * i, 1.0, 1.0, 0) for i in range(6)]
    s = bench.summarize(recs)["rrtstar"]
    assert s["accuracy"] == 50.0 and s["problems"] == 6 and s["successes"] == 3
    assert s["time_s"]["p50"] == 2.0 and s["vertices"]["p95"] == 40


def test_desk_collect_maze(tmp_path):
    man = bench.collect_dataset(bench.PRESETS["maze-240"], tmp_path, seed=0)
    assert man["planned_records"] == 250
    assert man["records"] == 250
    maps, records = bench.load_dataset(tmp_path)
    assert len(records) == 250 and len(maps) == 50
    for r in records[:60]:
        path = np.asarray(r.path)
        assert abs(pl.path_length(path) - r.cost) < 1e-9
        assert pl.path_valid(maps[r.map_file], path)


def test_full_scale_preset_dry_run(tmp_path):
    plan = bench.collect_dataset(bench.PRESETS["full-forest-480"], tmp_path / "x", dry_run=True)
    assert plan["planned_records"] == 1750 * 25
    assert not (tmp_path / "x").exists()


def test_dubins_record_cost_is_arc_length(tmp_path):
    spec = dict(bench.PRESETS["dubins-forest-240"])
    maps_gen = [(0, bench.make_env(spec, 3))]
    bench.collect_on_maps(maps_gen, tmp_path, 2, "dubins", seed=1, time_limit=30)
    maps, records = bench.load_dataset(tmp_path)
    assert records
    for r in records:
        path = np.asarray(r.path)
        assert len(r.start) == 3 and path.shape[1] == 3
        assert abs(pl.path_length(path) - r.cost) < 1e-9
        robot = pl.RobotModel("dubins")
        np.testing.assert_allclose(pl.replay_controls(r.start, r.controls, robot)[-1], path[-1], atol=1e-6)


def test_collect_logs_unsolvable(tmp_path):
    occ = np.zeros((240, 240), dtype=bool)
    occ[:, 118:122] = True  # two halves; many pairs are unsolvable
    maps = [(0, Costmap(occ, 0.05))]
    man = bench.collect_on_maps(maps, tmp_path, 3, seed=0, max_retries=1, time_limit=0.2)
    log = [json.loads(l) for l in (tmp_path / "collect_log.jsonl").read_text().splitlines()]
    assert man["records"] <= 3
    if man["records"] < 3:
        assert any(e["event"] == "problem dropped" for e in log)


def test_oracle_mask_straight_corridor(empty_map):
    rec = DatasetRecord(0, 0, "m", [1.0, 6.0], [11.0, 6.0], [[1.0, 6.0], [11.0, 6.0]], 10.0, "point", 0)
    mg = bench.oracle_mask(rec, empty_map)
    rows = np.flatnonzero(mg.mask.any(axis=1))
    # anchors at y = 5.5 and 6.5 m (rows 5 and 6 of the grid) fall within 0.7 m
    assert rows.min() == 100 and rows.max() == 139
    assert mg.mask[100:140, 20:220].all()
    # path pixels lie inside the mask
    for x in np.linspace(1, 11, 50):
        assert mg.mask[int(6.0 / 0.05), int(x / 0.05)]


def test_infer_mask_untrained_zero_classifier(empty_map):
    model = net.MPTModel(net.ModelConfig.tiny(), seed=0)
    model.params["cls.weight"].data[:] = 0
    model.params["cls.bias"].data[:] = 0
    mg, probs, t = bench.infer_mask(model, empty_map, (1, 1), (11, 11), 0.5)
    assert mg.mask.all() and (probs == 128).all() and t > 0
    mg2, _, _ = bench.infer_mask(model, empty_map, (1, 1), (11, 11), 0.5)
    np.testing.assert_array_equal(mg.mask, mg2.mask)


def test_infer_mask_always_has_forced_patches(empty_map):
    model = net.MPTModel(net.ModelConfig.tiny(), seed=0)
    model.params["cls.bias"].data[:] = [10.0, -10.0]
    mg, _, _ = bench.infer_mask(model, empty_map, (1, 1), (11, 11), 0.5)
    assert len(mg.selected) == 0 and mg.popcount == 2 * 400


def _easy_records():
    cmap = Costmap(np.zeros((240, 240), dtype=bool), 0.05)
    recs = [DatasetRecord(0, i, "m.pgm", [1.0, 1.0 + 3 * i], [11.0, 1.0 + 3 * i],
                          [[1.0, 1.0 + 3 * i], [11.0, 1.0 + 3 * i]], 15.0, "point", 0) for i in range(3)]
    return {"m.pgm": cmap}, recs


def test_evaluate_easy_problems_and_resume(tmp_path):
    maps, recs = _easy_records()
    res, summary = bench.evaluate(maps, recs, ["rrtstar", "oracle-rrtstar"], seed=0, out_dir=tmp_path,
                                  time_limit=5)
    assert summary["rrtstar"]["accuracy"] == 100.0
    assert all(r.cost <= r.threshold for r in res if r.success)
    rows = list(csv.DictReader(open(tmp_path / "eval.csv")))
    assert list(rows[0]) == bench.CSV_FIELDS and len(rows) == 6
    first = (tmp_path / "eval.csv").read_bytes()
    # rerun skips existing keys: nothing is replanned, file is unchanged
    res2, _ = bench.evaluate(maps, recs, ["rrtstar", "oracle-rrtstar"], seed=0, out_dir=tmp_path, time_limit=5)
    assert (tmp_path / "eval.csv").read_bytes() == first
    saved = json.loads((tmp_path / "summary.json").read_text())
    assert saved["time_limit_s"] == [5] and "rrtstar" in saved["planners"]


def test_evaluate_threads_same_records(tmp_path):
    maps, recs = _easy_records()
    a, _ = bench.evaluate(maps, recs, ["rrtstar"], seed=0, threads=1, time_limit=5)
    b, _ = bench.evaluate(maps, recs, ["rrtstar"], seed=0, threads=3, time_limit=5)
    assert [(r.key, r.vertices, r.cost) for r in a] == [(r.key, r.vertices, r.cost) for r in b]


def test_evaluate_requires_model():
    maps, recs = _easy_records()
    with pytest.raises(bench.ConfigError):
        bench.evaluate(maps, recs, ["mpt-rrtstar"])


def test_render_palette_and_determinism():
    cmap = Costmap(np.zeros((20, 30), dtype=bool), 0.05)
    raw = bench.render(cmap)
    assert raw.startswith(b"P6\n30 20\n255\n")
    body = np.frombuffer(raw[len(b"P6\n30 20\n255\n"):], dtype=np.uint8)
    assert (body == 255).all() and body.size == 20 * 30 * 3
    occ = np.zeros((20, 30), dtype=bool)
    occ[0, 0] = True
    cmap = Costmap(occ, 0.05)
    mask = np.zeros_like(occ)
    mask[10:, :] = True
    path = [[0.1, 0.1], [1.4, 0.1]]
    a = bench.render(cmap, mask, path)
    assert a == bench.render(cmap, mask, path)
    img = np.frombuffer(a[len(b"P6\n30 20\n255\n"):], dtype=np.uint8).reshape(20, 30, 3)
    assert tuple(img[2, 10]) == (255, 0, 0)
    assert tuple(img[0, 0]) == (0, 0, 0)
    assert tuple(img[15, 15]) == (153, 233, 153)
    assert tuple(img[5, 5]) == (255, 255, 255)


def test_render_probability_heat():
    cmap = Costmap(np.zeros((4, 4), dtype=bool), 0.05)
    probs = np.full((4, 4), 255, dtype=np.uint8)
    img = np.frombuffer(bench.render(cmap, probs=probs)[len(b"P6\n4 4\n255\n"):], dtype=np.uint8)
    assert tuple(img[:3]) == (255, 128, 128)


def test_dataset_roundtrip_maps(tmp_path):
    bench.collect_dataset(bench.PRESETS["forest-240"], tmp_path, n_envs=2, paths_per_env=1, seed=4)
    maps, recs = bench.load_dataset(tmp_path)
    again = bench.make_env(bench.PRESETS["forest-240"], bench.derive_seed(4, "env", 0))
    np.testing.assert_array_equal(maps["envs/env_00000.pgm"].occupancy, again.occupancy)
    meta = json.loads((tmp_path / "envs/env_00000.json").read_text())
    assert meta["kind"] == "forest"

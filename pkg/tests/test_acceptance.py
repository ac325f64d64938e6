"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (about half an hour on
one CPU core; the training smoke test dominates).
"""
import math
import time
from collections import deque

import numpy as np
import pytest

from mpt import autodiff as ad
from mpt import bench, net
from mpt import planners as pl
from mpt import trainer as tr
from mpt import worldgen as wg
from mpt.autodiff import Tensor
from mpt.bench import EvalRecord

pytestmark = pytest.mark.slow

SEED = 0


def report(n, ok, detail, capsys=None):
    line = f"acceptance criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


# --- 1 -----------------------------------------------------------------------------

def test_c01_gradient_suite(capsys):
    t0 = time.perf_counter()
    results = {op: ad.gradcheck(op, trial_count=5, seed=SEED) for op in sorted(ad.GRADCHECK_REGISTRY)}
    elapsed = time.perf_counter() - t0
    worst_op = max(results, key=lambda k: results[k]["max_rel_err"])
    worst = results[worst_op]["max_rel_err"]
    blocks = {"msa_block", "mlp_block", "feature_extractor", "encoder_layer"}
    ok = worst < 1e-4 and elapsed < 120 and blocks <= set(results)
    report(1, ok, f"{len(results)} ops, worst {worst_op} {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 120 s)", capsys)


# --- 2 -----------------------------------------------------------------------------

def test_c02_shapes_and_locality(capsys):
    cfg = net.ModelConfig()
    model = net.MPTModel(cfg, seed=SEED)
    rng = np.random.default_rng(SEED)
    x = rng.normal(size=(2, 480, 480)).astype(np.float32)
    tokens, grid = net.extract_features(Tensor(x), model.params, cfg)
    logits, _ = model.forward(Tensor(x))
    shapes_ok = tokens.shape == (529, 512) and (grid.rows, grid.cols) == (23, 23) and logits.shape == (529, 2)
    rf, stride = net.receptive_field(cfg.feature_layers), net.total_stride(cfg.feature_layers)
    base = tokens.data.reshape(23, 23, 512)
    local_ok = True
    for _ in range(20):
        r, c = (int(v) for v in rng.integers(0, 480, size=2))
        x2 = x.copy()
        x2[:, r, c] += 3.0
        t2 = net.extract_features(Tensor(x2), model.params, cfg)[0].data.reshape(23, 23, 512)
        changed = np.abs(t2 - base).max(axis=-1) > 0
        rows = np.arange(23)
        in_r = (rows * stride <= r) & (r < rows * stride + rf)
        in_c = (rows * stride <= c) & (c < rows * stride + rf)
        window = in_r[:, None] & in_c[None, :]
        # nothing outside the receptive window may change; something inside must
        local_ok &= not (changed & ~window).any() and bool((changed & window).any())
    report(2, shapes_ok and local_ok,
           f"tokens {tokens.shape}, logits {logits.shape}, locality on 20 pixels {'holds' if local_ok else 'broken'}",
           capsys)


# --- 3 -----------------------------------------------------------------------------

def test_c03_transformer_invariants(capsys):
    cfg = net.ModelConfig.tiny(dropout_rate=0.1)
    params = net.init_params(cfg, seed=SEED)
    rng = np.random.default_rng(SEED)
    x = rng.normal(size=(49, 64))
    att = []
    net.encoder_forward(Tensor(x.astype(np.float32)), params, cfg, attn_out=att)
    row_err = max(float(np.abs(a.sum(-1) - 1).max()) for a in att)
    perm = rng.permutation(49)
    xt = Tensor(x, dtype=np.float64)
    xp = Tensor(x[perm], dtype=np.float64)
    y = net.encoder_forward(xt, params, cfg, use_positions=False).data
    yp = net.encoder_forward(xp, params, cfg, use_positions=False).data
    equi_err = float(np.abs(yp - y[perm]).max())
    y = net.encoder_forward(xt, params, cfg, use_positions=True).data
    yp = net.encoder_forward(xp, params, cfg, use_positions=True).data
    pe_diff = float(np.abs(yp - y[perm]).max())
    ok = row_err <= 1e-6 and equi_err <= 1e-5 and pe_diff > 1e-3
    report(3, ok, f"row-sum err {row_err:.1e}, no-PE equivariance err {equi_err:.1e}, with-PE diff {pe_diff:.3f}",
           capsys)


# --- 4 -----------------------------------------------------------------------------

def test_c04_training_smoke(tmp_path, capsys):
    t0 = time.perf_counter()
    bench.collect_dataset(bench.PRESETS["maze-160"], tmp_path, seed=SEED)
    maps, records = bench.load_dataset(tmp_path)
    problems = [tr.TrainingProblem(maps[r.map_file], r.start, r.goal, np.asarray(r.path)) for r in records]
    model = net.MPTModel(net.ModelConfig.tiny(patch_px=20), seed=SEED)
    cfg = tr.TrainConfig(steps=2000, eval_every=500, seed=SEED)
    out = tr.train(problems, model, cfg, log_path=tmp_path / "train_log.jsonl")
    elapsed = time.perf_counter() - t0
    log = out["log"]
    first, last = tr.smoothed_loss(log, 10), tr.smoothed_loss(log, 2000)
    reduction = 1 - last / first
    recall = [r for r in log if r.get("split") == "train" and r["step"] == 2000][0]["recall"]
    ok = len(problems) == 20 and reduction >= 0.5 and recall >= 0.8 and elapsed < 20 * 60
    report(4, ok, f"{len(problems)} problems, loss {first:.3f} -> {last:.4f} ({100 * reduction:.1f}% drop), "
                  f"train recall {recall:.3f}, {elapsed / 60:.1f} min", capsys)


# --- 5 / 6 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def validity_sets(tmp_path_factory):
    sets = []
    for preset in ("forest-240", "maze-240"):
        d = tmp_path_factory.mktemp(preset)
        bench.collect_dataset(bench.PRESETS[preset], d, n_envs=30, paths_per_env=5, seed=SEED)
        sets.append(bench.load_dataset(d))
    return sets


def _incumbents_monotone(res):
    costs = [c for _, c in res.incumbents]
    return all(b <= a for a, b in zip(costs, costs[1:]))


def test_c05_planner_validity(validity_sets, capsys):
    n_problems = n_success = bad = 0
    for maps, records in validity_sets:
        for rec in records:
            cmap = maps[rec.map_file]
            seed = bench.derive_seed(SEED, "validity", rec.env_id, rec.problem_id)
            term = pl.TerminationSpec(time_limit_s=10, cost_threshold=rec.cost)
            informed = rec.problem_id % 2 == 1
            res = pl.rrt_star(cmap, rec.start, rec.goal, term=term, seed=seed, informed=informed)
            n_problems += 1
            if not res.success:
                continue
            n_success += 1
            ok = (pl.path_valid(cmap, res.path) and res.cost <= term.target
                  and abs(pl.path_length(res.path) - res.cost) < 1e-9
                  and np.allclose(res.path[0], rec.start) and np.allclose(res.path[-1], rec.goal)
                  and _incumbents_monotone(res) and pl.audit_tree(res.tree))
            bad += not ok
    # SST: replaying stored controls reproduces stored states
    dub = bench.PRESETS["dubins-forest-240"]
    replay_err, n_sst = 0.0, 0
    for e in range(10):
        cmap = bench.make_env(dub, bench.derive_seed(SEED, "env", e))
        s, g = wg.sample_problem(cmap, np.random.default_rng(bench.derive_seed(SEED, "problems", e)))
        start = (s[0], s[1], float(np.random.default_rng(e).uniform(-math.pi, math.pi)))
        res = pl.sst(cmap, start, g, term=pl.TerminationSpec(time_limit_s=60), seed=e)
        if res.success:
            n_sst += 1
            replayed = pl.replay_controls(start, res.controls, pl.RobotModel("dubins"))
            replay_err = max(replay_err, float(np.abs(replayed - res.path).max()))
            bad += not wg.points_free(cmap, res.trajectory[:, :2]).all()
    ok = n_problems == 300 and bad == 0 and n_sst > 0 and replay_err <= 1e-6
    report(5, ok, f"{n_success}/{n_problems} successes, {bad} invalid; SST replay max err {replay_err:.1e} "
                  f"over {n_sst} runs", capsys)


@pytest.fixture(scope="module")
def forest100(tmp_path_factory):
    d = tmp_path_factory.mktemp("forest100")
    bench.collect_dataset(bench.PRESETS["forest-240"], d, n_envs=20, paths_per_env=5, seed=SEED)
    maps, records = bench.load_dataset(d)
    t0 = time.perf_counter()
    results, summary = bench.evaluate(maps, records, ["rrtstar", "irrtstar", "oracle-rrtstar"], seed=SEED,
                                      time_limit=10)
    return maps, records, summary, time.perf_counter() - t0


def test_c06_informed_set(forest100, capsys):
    maps, records, summary, _ = forest100
    n_samples = outside = 0
    for rec in records[:20]:
        cmap = maps[rec.map_file]
        term = pl.TerminationSpec(time_limit_s=10, cost_threshold=1e-3, max_iterations=1500)
        res = pl.informed_rrt_star(cmap, rec.start, rec.goal, term=term, seed=rec.problem_id,
                                   params=pl.RRTParams(record_samples=True))
        ell = pl.InformedSet(rec.start, rec.goal)
        n_samples += len(res.samples)
        outside += sum(not ell.contains((x, y), c) for x, y, c in res.samples)
    v_irrt = summary["irrtstar"]["vertices"]["p50"]
    v_rrt = summary["rrtstar"]["vertices"]["p50"]
    ok = n_samples > 0 and outside == 0 and v_irrt < v_rrt
    report(6, ok, f"{n_samples - outside}/{n_samples} samples inside ellipse; median vertices "
                  f"IRRT* {v_irrt:g} vs RRT* {v_rrt:g}", capsys)


# --- 7 -----------------------------------------------------------------------------

def test_c07_oracle_mask_speedup(forest100, capsys):
    _, records, summary, elapsed = forest100
    un, orc = summary["rrtstar"], summary["oracle-rrtstar"]
    ratio = orc["vertices"]["p50"] / un["vertices"]["p50"]
    t_un, t_or = un["time_s"]["p50"], orc["time_s"]["p50"]
    ok = len(records) == 100 and ratio <= 0.5 and t_or < t_un and elapsed < 30 * 60
    report(7, ok, f"median vertices {orc['vertices']['p50']:g} vs {un['vertices']['p50']:g} (ratio {ratio:.2f}, "
                  f"need <= 0.5); median time {t_or:.4f} s vs {t_un:.4f} s; accuracy {orc['accuracy']:.0f}% vs "
                  f"{un['accuracy']:.0f}%; {elapsed:.0f} s", capsys)


# --- 8 -----------------------------------------------------------------------------

def test_c08_dubins_direction(tmp_path, capsys):
    bench.collect_dataset(bench.PRESETS["dubins-forest-240"], tmp_path, seed=SEED)
    maps, records = bench.load_dataset(tmp_path)
    _, summary = bench.evaluate(maps, records, ["sst", "oracle-sst"], seed=SEED)
    un, orc = summary["sst"], summary["oracle-sst"]
    ok = len(records) == 20 and orc["time_s"]["p50"] < un["time_s"]["p50"]
    report(8, ok, f"median time oracle-SST {orc['time_s']['p50']:.3f} s vs SST {un['time_s']['p50']:.3f} s; "
                  f"accuracy {orc['accuracy']:.0f}% vs {un['accuracy']:.0f}%", capsys)


# --- 9 -----------------------------------------------------------------------------

def _connected(occ):
    free = np.argwhere(~occ)
    seen = np.zeros_like(occ)
    q = deque([tuple(free[0])])
    seen[q[0]] = True
    while q:
        r, c = q.popleft()
        for rr, cc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if 0 <= rr < occ.shape[0] and 0 <= cc < occ.shape[1] and not occ[rr, cc] and not seen[rr, cc]:
                seen[rr, cc] = True
                q.append((rr, cc))
    return int(seen.sum()) == len(free)


def test_c09_world_properties(tmp_path, capsys):
    maze_ok = 0
    for seed in range(50):
        m = wg.gen_maze_for_size(240, 240, seed)
        spec = m.provenance["spec"]
        n_pass = len(spec["passages"])
        maze_ok += _connected(m.occupancy) and n_pass == spec["rows"] * spec["cols"] - 1
    det_ok = True
    for i, make in enumerate((lambda: wg.gen_forest(240, 240, 20, 11), lambda: wg.gen_maze_for_size(240, 240, 11))):
        a, b = tmp_path / f"a{i}.pgm", tmp_path / f"b{i}.pgm"
        wg.save_pgm(make(), a)
        wg.save_pgm(make(), b)
        c = tmp_path / f"c{i}.pgm"
        wg.save_pgm(wg.load_pgm(a), c)
        det_ok &= a.read_bytes() == b.read_bytes() == c.read_bytes()
    ok = maze_ok == 50 and det_ok
    report(9, ok, f"{maze_ok}/50 mazes connected with rows*cols-1 passages; generation + PGM roundtrip "
                  f"{'byte-identical' if det_ok else 'differs'}", capsys)


# --- 10 ----------------------------------------------------------------------------

def test_c10_accounting_fixture(tmp_path, capsys):
    # a real empty proposal run: it must come back as a failure, never dropped
    cmap = wg.Costmap(np.zeros((100, 100), dtype=bool), 0.05)
    empty = pl.rrt_star(cmap, (0.5, 0.5), (4.5, 4.5), mask=np.zeros((100, 100), dtype=bool),
                        term=pl.TerminationSpec(time_limit_s=1, cost_threshold=10))
    rows = [  # planner, success, time, vertices
        (True, 0.5, 50), (True, 0.1, 10), (False, 10.0, 9000), (True, 0.9, 90), (True, 0.3, 30),
        (empty.success, empty.time_s, empty.vertices), (True, 0.7, 70), (False, 10.0, 8000),
        (True, 0.2, 20), (True, 0.4, 40),
    ]
    recs = [EvalRecord(0, i, "mpt-rrtstar", s, t, 0.01, v, 1.0 if s else math.inf, 1.0, 0)
            for i, (s, t, v) in enumerate(rows)]
    bench.write_eval_csv(tmp_path / "eval.csv", recs)
    back = bench.read_eval_csv(tmp_path / "eval.csv")
    s = bench.summarize(back)["mpt-rrtstar"]
    # by hand: 7 of 10 succeed; successful times sorted 0.1 0.2 0.3 0.4 0.5 0.7 0.9,
    # nearest rank k = ceil(q * 7) -> p5:1 p25:2 p50:4 p75:6 p95:7
    expect_t = {"p5": 0.1, "p25": 0.2, "p50": 0.4, "p75": 0.7, "p95": 0.9}
    expect_v = {"p5": 10, "p25": 20, "p50": 40, "p75": 70, "p95": 90}
    ok = (not empty.success and empty.reason == "empty proposal" and s["accuracy"] == 70.0
          and s["problems"] == 10 and s["successes"] == 7
          and all(math.isclose(s["time_s"][k], v) for k, v in expect_t.items())
          and all(s["vertices"][k] == v for k, v in expect_v.items()))
    report(10, ok, f"accuracy {s['accuracy']:.0f}% (expect 70), median time {s['time_s']['p50']} (expect 0.4), "
                   f"median vertices {s['vertices']['p50']:g} (expect 40)", capsys)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))

"""Dataset collection, mask inference, evaluation harness, summaries and images."""
import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import planners as pl
from .net import MaskGrid, ModelConfig, MPTModel, anchor_grid, build_mask, patch_mask, probability_image
from .trainer import label_anchors
from .worldgen import Costmap, gen_forest, gen_maze_for_size, load_pgm, points_free, sample_problem, save_metadata, save_pgm

logger = logging.getLogger(__name__)

PRESETS = {
    "forest-240": dict(kind="forest", width=240, height=240, obstacles=20, n_envs=50, paths=5, robot="point"),
    "maze-240": dict(kind="maze", width=240, height=240, n_envs=50, paths=5, robot="point"),
    "maze-160": dict(kind="maze", width=160, height=160, n_envs=20, paths=1, robot="point"),
    "dubins-forest-240": dict(kind="forest", width=240, height=240, obstacles=20, n_envs=20, paths=1, robot="dubins"),
    # full-scale settings; registered for dry runs, not executed by default
    "full-forest-480": dict(kind="forest", width=480, height=480, obstacles=100, n_envs=1750, paths=25,
                             robot="point", full_scale=True),
    "full-maze-480": dict(kind="maze", width=480, height=480, n_envs=1750, paths=25, robot="point", full_scale=True),
    "full-dubins-forest-480": dict(kind="forest", width=480, height=480, obstacles=100, n_envs=1000, paths=50,
                                    robot="dubins", full_scale=True),
}

DEFAULT_TIME_LIMIT = {"point": 10.0, "dubins": 60.0}
PLANNER_KINDS = ("rrtstar", "irrtstar", "sst")
AIDS = ("mpt", "oracle")
CSV_FIELDS = ["env_id", "problem_id", "planner", "success", "time_s", "inference_time_s",
              "vertices", "cost", "threshold", "seed"]


class ConfigError(ValueError):
    pass


def derive_seed(root: int, *keys) -> int:
    """Deterministic 32-bit sub-seed for a tuple of integer/string keys."""
    ints = [int(root)]
    for k in keys:
        if isinstance(k, str):
            ints.extend(k.encode())
        else:
            ints.append(int(k))
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def make_env(spec: dict, seed: int) -> Costmap:
    if spec["kind"] == "forest":
        return gen_forest(spec["width"], spec["height"], spec.get("obstacles", 20), seed)
    if spec["kind"] == "maze":
        return gen_maze_for_size(spec["width"], spec["height"], seed)
    raise ConfigError(f"unknown environment kind {spec['kind']!r}")


@dataclass
class DatasetRecord:
    env_id: int
    problem_id: int
    map_file: str
    start: List[float]
    goal: List[float]
    path: List[List[float]]
    cost: float
    robot: str
    seed: int
    controls: Optional[List[List[float]]] = None

    @property
    def key(self) -> Tuple[int, int]:
        return self.env_id, self.problem_id


# --- dataset collection -----------------------------------------------------------

def run_oracle(cmap: Costmap, start, goal, robot: str, seed: int, time_limit: float) -> pl.PlanResult:
    """First-solution planner run that defines the cost threshold."""
    term = pl.TerminationSpec(time_limit_s=time_limit)
    if robot == "point":
        return pl.rrt_star(cmap, start, goal, term=term, seed=seed)
    return pl.sst(cmap, start, goal, term=term, seed=seed)


def collect_dataset(spec: dict, out_dir, n_envs: Optional[int] = None, paths_per_env: Optional[int] = None,
                    seed: int = 0, max_retries: int = 5, dry_run: bool = False,
                    time_limit: Optional[float] = None) -> dict:
    """Generate environments from a preset spec, then collect oracle paths on them.

    With ``dry_run`` nothing is generated, planned or written; the returned
    manifest only states the planned record count.
    """
    n_envs = spec["n_envs"] if n_envs is None else n_envs
    paths_per_env = spec["paths"] if paths_per_env is None else paths_per_env
    robot = spec.get("robot", "point")
    if dry_run:
        return {"spec": spec, "n_envs": n_envs, "paths_per_env": paths_per_env, "robot": robot, "seed": seed,
                "planned_records": n_envs * paths_per_env, "dry_run": True}
    maps = ((e, make_env(spec, derive_seed(seed, "env", e))) for e in range(n_envs))
    manifest = collect_on_maps(maps, out_dir, paths_per_env, robot, seed, max_retries, time_limit)
    manifest["spec"] = spec
    _write_json(Path(out_dir) / "manifest.json", manifest)
    return manifest


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def collect_on_maps(maps: Iterable[Tuple[int, Costmap]], out_dir, paths_per_env: int, robot: str = "point",
                    seed: int = 0, max_retries: int = 5, time_limit: Optional[float] = None) -> dict:
    """Oracle paths (first solution) for ``paths_per_env`` random problems per map.

    Failed oracle runs are resampled up to ``max_retries`` times and logged.
    Writes envs/*.pgm, envs/*.json, records.jsonl, collect_log.jsonl, manifest.json.
    """
    if robot not in DEFAULT_TIME_LIMIT:
        raise ConfigError(f"unknown robot {robot!r}")
    time_limit = DEFAULT_TIME_LIMIT[robot] if time_limit is None else time_limit
    out = Path(out_dir)
    (out / "envs").mkdir(parents=True, exist_ok=True)
    records: List[DatasetRecord] = []
    log: List[dict] = []
    n_envs = 0
    for e, cmap in maps:
        n_envs += 1
        name = f"envs/env_{e:05d}.pgm"
        save_pgm(cmap, out / name)
        save_metadata(cmap, out / f"envs/env_{e:05d}.json")
        rng = np.random.default_rng(derive_seed(seed, "problems", e))
        env_records = []
        for p in range(paths_per_env):
            for attempt in range(max_retries + 1):
                s, g = sample_problem(cmap, rng)
                start = list(s) + ([float(rng.uniform(-math.pi, math.pi))] if robot == "dubins" else [])
                oseed = derive_seed(seed, "oracle", e, p, attempt)
                res = run_oracle(cmap, start, g, robot, oseed, time_limit)
                if res.success:
                    if robot == "dubins":
                        path = np.vstack([np.asarray(start)[None], res.trajectory])
                    else:
                        path = res.path
                    env_records.append(DatasetRecord(
                        e, p, name, [float(v) for v in start], [float(g[0]), float(g[1])],
                        np.asarray(path).tolist(), float(res.cost), robot, oseed,
                        None if res.controls is None else np.asarray(res.controls).tolist()))
                    break
                log.append({"env_id": e, "problem_id": p, "attempt": attempt, "event": "oracle failed",
                            "reason": res.reason})
            else:
                log.append({"env_id": e, "problem_id": p, "event": "problem dropped"})
        if not env_records:
            log.append({"env_id": e, "event": "env skipped: no oracle success"})
        records.extend(env_records)
    with open(out / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")
    with open(out / "collect_log.jsonl", "w") as fh:
        for r in log:
            fh.write(json.dumps(r) + "\n")
    manifest = {"n_envs": n_envs, "paths_per_env": paths_per_env, "robot": robot, "seed": seed,
                "planned_records": n_envs * paths_per_env, "records": len(records),
                "oracle_time_limit_s": time_limit, "max_retries": max_retries}
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset(data_dir) -> Tuple[Dict[str, Costmap], List[DatasetRecord]]:
    data_dir = Path(data_dir)
    records = []
    with open(data_dir / "records.jsonl") as fh:
        for line in fh:
            if line.strip():
                records.append(DatasetRecord(**json.loads(line)))
    maps = {name: load_pgm(data_dir / name) for name in sorted({r.map_file for r in records})}
    return maps, records


# --- masks -------------------------------------------------------------------------

def path_mask(cmap: Costmap, path, start, goal, radius_m: float = 0.7, p_px: int = 20,
              cfg: Optional[ModelConfig] = None) -> MaskGrid:
    """Mask a perfect proposal network would emit for a known path.

    Selects anchors within radius_m of the path, plus the anchors owning any
    pixel the path crosses, so the path always lies inside its own mask (the
    border strip beyond the last anchor row/col can be further than radius_m
    from every anchor centre).
    """
    cfg = cfg or ModelConfig(patch_px=p_px)
    grid = anchor_grid(cfg, cmap.height, cmap.width, cmap.resolution)
    path = np.asarray(path, dtype=float)[:, :2]
    labels = label_anchors(path, grid, radius_m)
    probs = np.zeros(grid.n_tokens)
    probs[labels.positives] = 1.0
    pts = [path[:1]]
    for a, b in zip(path[:-1], path[1:]):
        n = int(math.ceil(math.hypot(*(b - a)) / cmap.resolution * 2)) + 1
        pts.append(a + np.linspace(0, 1, n)[:, None] * (b - a))
    pts = np.concatenate(pts)
    r = np.clip(np.floor(pts[:, 1] / cmap.resolution).astype(int), 0, cmap.height - 1)
    c = np.clip(np.floor(pts[:, 0] / cmap.resolution).astype(int), 0, cmap.width - 1)
    probs[grid.pixel_tokens()[r, c]] = 1.0
    return build_mask(probs, grid, 0.5, start, goal, p_px)


def oracle_mask(record: DatasetRecord, cmap: Costmap, radius_m: float = 0.7, p_px: int = 20) -> MaskGrid:
    return path_mask(cmap, np.asarray(record.path), record.start, record.goal, radius_m, p_px)


def infer_mask(model: MPTModel, cmap: Costmap, start, goal, tau: float = 0.5):
    """Returns (MaskGrid, probability image uint8 HxW, inference seconds)."""
    t0 = time.perf_counter()
    probs, grid = model.predict(cmap, start[:2], goal[:2])
    mask = build_mask(probs, grid, tau, start, goal, model.cfg.patch_px)
    elapsed = time.perf_counter() - t0
    return mask, probability_image(probs, grid), elapsed


# --- evaluation --------------------------------------------------------------------

@dataclass
class EvalRecord:
    env_id: int
    problem_id: int
    planner: str
    success: bool
    time_s: float
    inference_time_s: float
    vertices: int
    cost: float
    threshold: float
    seed: int

    @property
    def key(self):
        return self.env_id, self.problem_id, self.planner, self.seed


def parse_planner(name: str) -> Tuple[Optional[str], str]:
    aid, _, kind = name.rpartition("-")
    if kind not in PLANNER_KINDS or (aid and aid not in AIDS):
        raise ConfigError(f"unknown planner {name!r}")
    return aid or None, kind


def run_planner(kind: str, cmap: Costmap, start, goal, mask, term: pl.TerminationSpec, seed: int) -> pl.PlanResult:
    if kind == "rrtstar":
        return pl.rrt_star(cmap, start[:2], goal, mask, term, seed)
    if kind == "irrtstar":
        return pl.informed_rrt_star(cmap, start[:2], goal, mask, term, seed)
    return pl.sst(cmap, start, goal, mask, term, seed)


def evaluate_one(rec: DatasetRecord, cmap: Costmap, planner: str, seed: int, model: Optional[MPTModel],
                 time_limit: float, multiplier: float = 1.0, tau: float = 0.5) -> EvalRecord:
    aid, kind = parse_planner(planner)
    mask, inf_t = None, 0.0
    if aid == "mpt":
        if model is None:
            raise ConfigError(f"planner {planner!r} needs a model")
        mg, _, inf_t = infer_mask(model, cmap, rec.start, rec.goal, tau)
        mask = mg.mask
    elif aid == "oracle":
        mask = oracle_mask(rec, cmap).mask
    term = pl.TerminationSpec(time_limit_s=time_limit, cost_threshold=rec.cost, threshold_multiplier=multiplier)
    res = run_planner(kind, cmap, rec.start, rec.goal, mask, term, seed)
    return EvalRecord(rec.env_id, rec.problem_id, planner, bool(res.success), float(res.time_s), float(inf_t),
                      int(res.vertices), float(res.cost), float(rec.cost), int(seed))


def read_eval_csv(path) -> List[EvalRecord]:
    out = []
    if not os.path.exists(path):
        return out
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalRecord(int(row["env_id"]), int(row["problem_id"]), row["planner"],
                                  row["success"] in ("1", "True", "true"), float(row["time_s"]),
                                  float(row["inference_time_s"]), int(row["vertices"]), float(row["cost"]),
                                  float(row["threshold"]), int(row["seed"])))
    return out


def write_eval_csv(path, records: Iterable[EvalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in sorted(records, key=lambda r: r.key):
            w.writerow([r.env_id, r.problem_id, r.planner, int(r.success), repr(r.time_s), repr(r.inference_time_s),
                        r.vertices, repr(r.cost), repr(r.threshold), r.seed])


def evaluate(maps: Dict[str, Costmap], records: Sequence[DatasetRecord], planners: Sequence[str],
             model: Optional[MPTModel] = None, seed: int = 0, out_dir=None, time_limit: Optional[float] = None,
             multiplier: float = 1.0, threads: int = 1, tau: float = 0.5) -> Tuple[List[EvalRecord], dict]:
    """Run every planner on every record. Resumable when ``out_dir`` holds a previous eval.csv."""
    for p in planners:
        aid, _ = parse_planner(p)
        if aid == "mpt" and model is None:
            raise ConfigError(f"planner {p!r} needs a model")
    done: Dict[tuple, EvalRecord] = {}
    csv_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        csv_path = Path(out_dir) / "eval.csv"
        done = {r.key: r for r in read_eval_csv(csv_path)}
    jobs = []
    for rec in records:
        s = derive_seed(seed, "eval", rec.env_id, rec.problem_id)
        for p in planners:
            if (rec.env_id, rec.problem_id, p, s) not in done:
                jobs.append((rec, p, s))

    def work(job):
        rec, p, s = job
        tl = time_limit if time_limit is not None else DEFAULT_TIME_LIMIT[rec.robot]
        return evaluate_one(rec, maps[rec.map_file], p, s, model, tl, multiplier, tau)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            new = list(ex.map(work, jobs))
    else:
        new = [work(j) for j in jobs]
    for r in new:
        done[r.key] = r
    results = sorted(done.values(), key=lambda r: r.key)
    summary = summarize(results)
    if out_dir is not None:
        write_eval_csv(csv_path, results)
        limits = sorted({time_limit if time_limit is not None else DEFAULT_TIME_LIMIT[r.robot] for r in records})
        _write_json(Path(out_dir) / "summary.json",
                    {"planners": summary, "time_limit_s": limits, "threshold_multiplier": multiplier,
                     "seed": seed, "tau": tau})
    return results, summary


# --- summaries ---------------------------------------------------------------------

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Nearest-rank quantile: the ceil(q*n)-th smallest value (1-based), q in (0, 1]."""
    if not values:
        return math.nan
    v = sorted(values)
    k = max(1, math.ceil(q * len(v)))
    return float(v[k - 1])


def summarize(records: Sequence[EvalRecord]) -> dict:
    """Accuracy over all problems; time/vertex quantiles over successes only."""
    out = {}
    for name in sorted({r.planner for r in records}):
        rs = [r for r in records if r.planner == name]
        ok = [r for r in rs if r.success]
        entry = {"problems": len(rs), "successes": len(ok), "accuracy": 100.0 * len(ok) / len(rs)}
        for metric in ("time_s", "vertices", "inference_time_s"):
            vals = [getattr(r, metric) for r in ok]
            entry[metric] = {f"p{int(round(q * 100))}": nearest_rank(vals, q) for q in QUANTILES}
        out[name] = entry
    return out


# --- images ------------------------------------------------------------------------

def _line_pixels(cmap: Costmap, a, b) -> Tuple[np.ndarray, np.ndarray]:
    n = int(math.ceil(math.hypot(b[0] - a[0], b[1] - a[1]) / cmap.resolution * 2)) + 1
    t = np.linspace(0, 1, n)
    xs = a[0] + t * (b[0] - a[0])
    ys = a[1] + t * (b[1] - a[1])
    c = np.clip(np.floor(xs / cmap.resolution).astype(int), 0, cmap.width - 1)
    r = np.clip(np.floor(ys / cmap.resolution).astype(int), 0, cmap.height - 1)
    return r, c


def render(cmap: Costmap, mask: Optional[np.ndarray] = None, path=None, probs: Optional[np.ndarray] = None) -> bytes:
    """P6 image bytes: obstacles black, free white, mask green tint, probability heat, path red."""
    img = np.where(cmap.occupancy[..., None], 0, 255).astype(np.float64) * np.ones(3)
    if probs is not None:
        p = np.asarray(probs, dtype=np.float64)
        p = p / 255.0 if p.max() > 1.0 else p
        heat = np.stack([np.full_like(p, 255.0), 255.0 * (1 - p), 255.0 * (1 - p)], axis=-1)
        img = np.where(cmap.occupancy[..., None], img, 0.5 * img + 0.5 * heat)
    if mask is not None:
        tint = np.array([0.0, 200.0, 0.0])
        m = np.asarray(mask, dtype=bool) & ~cmap.occupancy
        img[m] = 0.6 * img[m] + 0.4 * tint
    img = np.rint(img).astype(np.uint8)
    if path is not None and len(path) > 0:
        path = np.asarray(path, dtype=float)
        for i in range(max(len(path) - 1, 1)):
            a = path[i]
            b = path[i + 1] if len(path) > 1 else path[i]
            r, c = _line_pixels(cmap, a, b)
            img[r, c] = (255, 0, 0)
    return f"P6\n{cmap.width} {cmap.height}\n255\n".encode() + img.tobytes()


def write_ppm(path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)

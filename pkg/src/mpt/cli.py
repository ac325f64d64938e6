"""Command-line entry point.

Settings resolve as built-in defaults, then the JSON file given by --config,
then explicit flags. The resolved settings are written to run_config.json in
every output directory.

Exit codes: 0 success, 1 planning/evaluation failure present, 2 usage or
config error, 3 I/O or data corruption.
"""
import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autodiff, bench, net, planners, trainer, worldgen

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

# every key a subcommand accepts, with its default
DEFAULTS: Dict[str, dict] = {
    "envgen": {"kind": "forest", "size": "240x240", "count": 1, "obstacles": 20, "seed": 0,
               "resolution": 0.05, "out": None},
    "collect": {"envs": None, "paths": 5, "robot": "point", "seed": 0, "time_limit": None, "retries": 5,
                "out": None},
    "train": {"data": None, "out": None, "seed": 0, "model": {}, "train": {}, "tiny": False},
    "infer": {"model": None, "map": None, "start": None, "goal": None, "tau": 0.5, "out": None},
    "plan": {"planner": "rrtstar", "map": None, "start": None, "goal": None, "data": None, "problem": None,
             "mask": None, "model": None, "oracle_mask": False, "tau": 0.5, "time_limit": None,
             "threshold": None, "multiplier": 1.0, "seed": 0, "out": None},
    "bench": {"preset": None, "data": None, "planners": "rrtstar,irrtstar", "model": None, "envs": None,
              "paths": None, "seed": 0, "time_limit": None, "multiplier": 1.0, "tau": 0.5, "threads": None,
              "dry_run": False, "out": None},
    "gradcheck": {"trials": 5, "seed": 0, "ops": None},
    "render": {"map": None, "mask": None, "path": None, "probs": None, "out": None},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpt", description="Transformer region proposals for sampling-based planners")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=S)
        p.add_argument("--config", help="JSON file with settings for this subcommand")
        return p

    p = cmd("envgen", "generate forest or maze maps")
    p.add_argument("--kind", choices=["forest", "maze"])
    p.add_argument("--size", help="WxH in pixels")
    p.add_argument("--count", type=int)
    p.add_argument("--obstacles", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=float)
    p.add_argument("--out")

    p = cmd("collect", "oracle paths on generated maps")
    p.add_argument("--envs", help="directory of PGM maps")
    p.add_argument("--paths", type=int)
    p.add_argument("--robot", choices=["point", "dubins"])
    p.add_argument("--seed", type=int)
    p.add_argument("--time-limit", dest="time_limit", type=float)
    p.add_argument("--retries", type=int)
    p.add_argument("--out")

    p = cmd("train", "train a model on a collected dataset")
    p.add_argument("--data")
    p.add_argument("--out", help="checkpoint file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--tiny", action="store_true", help="small model for CPU runs")

    p = cmd("infer", "predict a sampling mask")
    p.add_argument("--model")
    p.add_argument("--map")
    p.add_argument("--start", help="x,y in metres")
    p.add_argument("--goal", help="x,y in metres")
    p.add_argument("--tau", type=float)
    p.add_argument("--out")

    p = cmd("plan", "run one planner on one problem")
    p.add_argument("--planner", choices=["rrtstar", "irrtstar", "sst"])
    p.add_argument("--map")
    p.add_argument("--start", help="x,y[,theta]")
    p.add_argument("--goal", help="x,y")
    p.add_argument("--data", help="dataset directory (with --problem)")
    p.add_argument("--problem", help="ENV:PROBLEM ids inside --data")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mask", help="PGM mask, non-zero = sample here")
    g.add_argument("--model", help="checkpoint to infer the mask from")
    g.add_argument("--oracle-mask", dest="oracle_mask", action="store_true")
    p.add_argument("--tau", type=float)
    p.add_argument("--time-limit", dest="time_limit", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--multiplier", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = cmd("bench", "collect (for a preset) and evaluate planners")
    p.add_argument("--preset", choices=sorted(bench.PRESETS))
    p.add_argument("--data")
    p.add_argument("--planners", help="comma list, e.g. rrtstar,mpt-rrtstar,oracle-rrtstar")
    p.add_argument("--model")
    p.add_argument("--envs", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--time-limit", dest="time_limit", type=float)
    p.add_argument("--multiplier", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--dry-run", dest="dry_run", action="store_true")
    p.add_argument("--out")

    p = cmd("gradcheck", "finite-difference check of every differentiable op")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ops", help="comma list of op ids (default: all)")

    p = cmd("render", "write a PPM overlay image")
    p.add_argument("--map")
    p.add_argument("--mask", help="PGM mask")
    p.add_argument("--path", help="JSON file with a 'states' or 'path' list")
    p.add_argument("--probs", help="PGM probability image")
    p.add_argument("--out", help="output .ppm file")
    return ap


def resolve(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- flags"""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except OSError as e:
            raise UsageError(f"config file {path}: {e.strerror}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        for k, v in loaded.items():
            if k not in cfg:
                raise UsageError(f"unknown config key {k!r} for {command}")
            cfg[k] = v
    if command == "train" and "steps" in flags:
        cfg["train"] = dict(cfg["train"], steps=flags.pop("steps"))
    cfg.update(flags)
    return cfg


def write_run_config(out_dir, command: str, cfg: dict) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "run_config.json", "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=1, sort_keys=True)


def _need(cfg: dict, *keys) -> None:
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"missing required setting {k!r}")


def _point(text, key: str, dims=(2,)) -> List[float]:
    try:
        vals = [float(v) for v in (text.split(",") if isinstance(text, str) else text)]
    except (TypeError, ValueError):
        raise UsageError(f"{key} must be comma-separated numbers, got {text!r}")
    if len(vals) not in dims:
        raise UsageError(f"{key} needs {' or '.join(map(str, dims))} values, got {len(vals)}")
    return vals


def _load_map(path) -> worldgen.Costmap:
    try:
        return worldgen.load_pgm(path)
    except FileNotFoundError:
        raise DataError(f"map file not found: {path}")
    except worldgen.MapFormatError as e:
        raise DataError(f"{path}: {e}")


def _load_model(path) -> net.MPTModel:
    try:
        cfg, params = net.load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"model file not found: {path}")
    except net.CheckpointError as e:
        raise DataError(f"{path}: {e}")
    return net.MPTModel(cfg, params)


def _load_mask(path, shape) -> np.ndarray:
    try:
        img, _ = worldgen.read_pgm_bytes(path)
    except FileNotFoundError:
        raise DataError(f"mask file not found: {path}")
    except worldgen.MapFormatError as e:
        raise DataError(f"{path}: {e}")
    if img.shape != shape:
        raise DataError(f"mask {path} has shape {img.shape}, map has {shape}")
    return img > 0


def _load_dataset(path):
    try:
        return bench.load_dataset(path)
    except FileNotFoundError as e:
        raise DataError(f"dataset incomplete: {e.filename}")
    except (json.JSONDecodeError, TypeError, KeyError) as e:
        raise DataError(f"dataset {path} is corrupt: {e}")
    except worldgen.MapFormatError as e:
        raise DataError(f"dataset {path}: {e}")


def _parse_size(text: str):
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like 240x240, got {text!r}")
    if w < 1 or h < 1:
        raise UsageError("size must be positive")
    return w, h


# --- subcommands -------------------------------------------------------------------

def cmd_envgen(cfg: dict) -> int:
    _need(cfg, "out")
    w, h = _parse_size(cfg["size"])
    out = Path(cfg["out"])
    write_run_config(out, "envgen", cfg)
    for i in range(int(cfg["count"])):
        seed = int(cfg["seed"]) + i
        if cfg["kind"] == "forest":
            cmap = worldgen.gen_forest(w, h, int(cfg["obstacles"]), seed, cfg["resolution"])
        elif cfg["kind"] == "maze":
            cmap = worldgen.gen_maze_for_size(w, h, seed)
        else:
            raise UsageError(f"unknown kind {cfg['kind']!r}")
        worldgen.save_pgm(cmap, out / f"env_{i:05d}.pgm")
        worldgen.save_metadata(cmap, out / f"env_{i:05d}.json")
    print(f"wrote {cfg['count']} maps to {out}")
    return EXIT_OK


def cmd_collect(cfg: dict) -> int:
    _need(cfg, "envs", "out")
    files = sorted(Path(cfg["envs"]).glob("*.pgm"))
    if not files:
        raise DataError(f"no .pgm maps in {cfg['envs']}")
    maps = [(i, _load_map(f)) for i, f in enumerate(files)]
    write_run_config(cfg["out"], "collect", cfg)
    man = bench.collect_on_maps(maps, cfg["out"], int(cfg["paths"]), cfg["robot"], int(cfg["seed"]),
                                int(cfg["retries"]), cfg["time_limit"])
    print(json.dumps(man, sort_keys=True))
    return EXIT_OK


def _problems_from(data_dir) -> List[trainer.TrainingProblem]:
    maps, records = _load_dataset(data_dir)
    return [trainer.TrainingProblem(maps[r.map_file], r.start[:2], r.goal, np.asarray(r.path)) for r in records]


def cmd_train(cfg: dict) -> int:
    _need(cfg, "data", "out")
    try:
        mcfg = net.ModelConfig.tiny(**cfg["model"]) if cfg["tiny"] else net.ModelConfig(**cfg["model"])
        tcfg = trainer.TrainConfig(**dict({"seed": cfg["seed"]}, **cfg["train"]))
    except TypeError as e:
        raise UsageError(f"bad model/train setting: {e}")
    except ValueError as e:
        raise UsageError(str(e))
    problems = _problems_from(cfg["data"])
    out = Path(cfg["out"])
    out_dir = out.parent if str(out.parent) else Path(".")
    cfg = dict(cfg, model=mcfg.to_dict(), train=vars(tcfg))
    write_run_config(out_dir, "train", cfg)
    model = net.MPTModel(mcfg, seed=tcfg.seed)
    try:
        result = trainer.train(problems, model, tcfg, log_path=out_dir / "train_log.jsonl")
    except trainer.TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_FAIL
    net.save_checkpoint(out, mcfg, model.params)
    last = [r for r in result["log"] if "loss" in r][-1:]
    print(json.dumps({"checkpoint": str(out), "final": last[0] if last else None}))
    return EXIT_OK


def cmd_infer(cfg: dict) -> int:
    _need(cfg, "model", "map", "start", "goal", "out")
    model = _load_model(cfg["model"])
    cmap = _load_map(cfg["map"])
    start, goal = _point(cfg["start"], "start", (2, 3)), _point(cfg["goal"], "goal")
    try:
        mg, probs, dt = bench.infer_mask(model, cmap, start, goal, float(cfg["tau"]))
    except (net.QueryError, net.CapacityError, ValueError) as e:
        raise UsageError(str(e))
    out = Path(cfg["out"])
    write_run_config(out, "infer", cfg)
    worldgen.write_pgm_bytes(out / "mask.pgm", mg.mask.astype(np.uint8) * 255)
    worldgen.write_pgm_bytes(out / "probs.pgm", probs)
    info = {"inference_time_s": dt, "tau": mg.tau, "selected_tokens": len(mg.selected),
            "mask_pixels": mg.popcount}
    with open(out / "infer.json", "w") as fh:
        json.dump(info, fh, indent=1)
    print(json.dumps(info))
    return EXIT_OK


def cmd_plan(cfg: dict) -> int:
    _need(cfg, "out")
    record = None
    if cfg["data"]:
        _need(cfg, "problem")
        try:
            env_id, prob_id = (int(v) for v in str(cfg["problem"]).split(":"))
        except ValueError:
            raise UsageError(f"problem must look like ENV:PROBLEM, got {cfg['problem']!r}")
        maps, records = _load_dataset(cfg["data"])
        found = [r for r in records if r.key == (env_id, prob_id)]
        if not found:
            raise UsageError(f"problem {cfg['problem']} not in {cfg['data']}")
        record = found[0]
        cmap = maps[record.map_file]
        start, goal = record.start, record.goal
    else:
        _need(cfg, "map", "start", "goal")
        cmap = _load_map(cfg["map"])
        start, goal = _point(cfg["start"], "start", (2, 3)), _point(cfg["goal"], "goal")
    kind = cfg["planner"]
    if kind not in bench.PLANNER_KINDS:
        raise UsageError(f"unknown planner {kind!r}")
    if kind == "sst" and len(start) == 2:
        start = list(start) + [0.0]
    mask, inf_t = None, 0.0
    if cfg["mask"]:
        mask = _load_mask(cfg["mask"], cmap.occupancy.shape)
    elif cfg["model"]:
        mg, _, inf_t = bench.infer_mask(_load_model(cfg["model"]), cmap, start, goal, float(cfg["tau"]))
        mask = mg.mask
    elif cfg["oracle_mask"]:
        if record is None:
            raise UsageError("oracle_mask needs --data and --problem")
        mask = bench.oracle_mask(record, cmap).mask
    threshold = cfg["threshold"]
    if threshold is None:
        threshold = record.cost if record is not None else math.inf
    robot = "dubins" if kind == "sst" else "point"
    limit = cfg["time_limit"] if cfg["time_limit"] is not None else bench.DEFAULT_TIME_LIMIT[robot]
    try:
        term = planners.TerminationSpec(time_limit_s=float(limit), cost_threshold=float(threshold),
                                        threshold_multiplier=float(cfg["multiplier"]))
    except ValueError as e:
        raise UsageError(str(e))
    out = Path(cfg["out"])
    write_run_config(out, "plan", cfg)
    try:
        res = bench.run_planner(kind, cmap, start, goal, mask, term, int(cfg["seed"]))
    except planners.PlannerInputError as e:
        res = planners.PlanResult(False, np.zeros((0, 2)), math.inf, 0, 0.0, reason=str(e))
    rec = dict(res.to_json(), planner=kind, inference_time_s=inf_t, time_limit_s=limit,
               threshold=None if math.isinf(threshold) else threshold)
    with open(out / "plan.json", "w") as fh:
        json.dump(rec, fh, indent=1)
    print(json.dumps({k: rec[k] for k in ("success", "cost", "vertices", "time_s", "reason")}))
    return EXIT_OK if res.success else EXIT_FAIL


def _threads(cfg: dict) -> int:
    if cfg.get("threads") is not None:
        n = int(cfg["threads"])
    else:
        env = os.environ.get("MPT_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"MPT_THREADS must be an integer, got {env!r}")
    if n < 1:
        raise UsageError("threads must be >= 1")
    return n


def cmd_bench(cfg: dict) -> int:
    if bool(cfg["preset"]) == bool(cfg["data"]):
        raise UsageError("give exactly one of preset or data")
    names = [p.strip() for p in str(cfg["planners"]).split(",") if p.strip()]
    try:
        for p in names:
            bench.parse_planner(p)
    except bench.ConfigError as e:
        raise UsageError(str(e))
    threads = _threads(cfg)
    if cfg["preset"]:
        spec = bench.PRESETS.get(cfg["preset"])
        if spec is None:
            raise UsageError(f"unknown preset {cfg['preset']!r}")
        if cfg["dry_run"] or spec.get("full_scale"):
            plan = bench.collect_dataset(spec, None, cfg["envs"], cfg["paths"], int(cfg["seed"]), dry_run=True)
            if cfg["out"]:
                write_run_config(Path(cfg["out"]), "bench", cfg)
            print(json.dumps(plan, sort_keys=True))
            return EXIT_OK
    model = _load_model(cfg["model"]) if cfg["model"] else None
    if any(bench.parse_planner(p)[0] == "mpt" for p in names) and model is None:
        raise UsageError("mpt-* planners need a model setting")
    _need(cfg, "out")
    out = Path(cfg["out"])
    write_run_config(out, "bench", dict(cfg, threads=threads))
    if cfg["preset"]:
        data = out / "data"
        if not (data / "records.jsonl").exists():
            bench.collect_dataset(bench.PRESETS[cfg["preset"]], data, cfg["envs"], cfg["paths"], int(cfg["seed"]))
    else:
        data = cfg["data"]
    maps, records = _load_dataset(data)
    results, summary = bench.evaluate(maps, records, names, model, int(cfg["seed"]), out, cfg["time_limit"],
                                      float(cfg["multiplier"]), threads, float(cfg["tau"]))
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK if all(r.success for r in results) else EXIT_FAIL


def cmd_gradcheck(cfg: dict) -> int:
    ops = sorted(autodiff.GRADCHECK_REGISTRY) if not cfg["ops"] else \
        [o.strip() for o in str(cfg["ops"]).split(",") if o.strip()]
    unknown = [o for o in ops if o not in autodiff.GRADCHECK_REGISTRY]
    if unknown:
        raise UsageError(f"unknown op ids: {', '.join(unknown)}")
    ok = True
    for op in ops:
        r = autodiff.gradcheck(op, trial_count=int(cfg["trials"]), seed=int(cfg["seed"]))
        ok &= r["passed"]
        print(f"{op:20s} max_rel_err={r['max_rel_err']:.3e} {'ok' if r['passed'] else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_render(cfg: dict) -> int:
    _need(cfg, "map", "out")
    cmap = _load_map(cfg["map"])
    mask = _load_mask(cfg["mask"], cmap.occupancy.shape) if cfg["mask"] else None
    probs = None
    if cfg["probs"]:
        try:
            probs, _ = worldgen.read_pgm_bytes(cfg["probs"])
        except (FileNotFoundError, worldgen.MapFormatError) as e:
            raise DataError(f"{cfg['probs']}: {e}")
    path = None
    if cfg["path"]:
        try:
            with open(cfg["path"]) as fh:
                obj = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"path file not found: {cfg['path']}")
        except json.JSONDecodeError as e:
            raise DataError(f"{cfg['path']}: {e}")
        path = obj.get("states", obj.get("path")) if isinstance(obj, dict) else obj
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    bench.write_ppm(cfg["out"], bench.render(cmap, mask, path, probs))
    return EXIT_OK


COMMANDS = {"envgen": cmd_envgen, "collect": cmd_collect, "train": cmd_train, "infer": cmd_infer,
            "plan": cmd_plan, "bench": cmd_bench, "gradcheck": cmd_gradcheck, "render": cmd_render}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

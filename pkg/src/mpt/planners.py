"""Sampling-based planners: RRT*, Informed-RRT* (point robot) and SST (Dubins car).

All planners sample from a region (whole map or a proposal mask) but collision
check against the original map. Termination is on a cost threshold or a time
limit, whichever comes first.
"""
import math
import random
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .worldgen import Costmap, is_motion_free, is_state_free, points_free


class PlannerInputError(ValueError):
    """Start or goal invalid; distinct from a planning failure."""


class EmptyProposalError(RuntimeError):
    pass


@dataclass
class RobotModel:
    kind: str = "point"
    wheelbase: float = 0.3
    v_max: float = 1.0
    steer_max: float = 0.6
    dt: float = 0.05

    def __post_init__(self):
        if self.kind not in ("point", "dubins"):
            raise ValueError(f"unknown robot kind {self.kind!r}")
        if self.dt <= 0 or self.v_max <= 0 or self.steer_max <= 0 or self.wheelbase <= 0:
            raise ValueError("robot bounds must be positive")


@dataclass
class TerminationSpec:
    time_limit_s: float = 10.0
    cost_threshold: float = math.inf
    threshold_multiplier: float = 1.0
    max_iterations: Optional[int] = None

    def __post_init__(self):
        if self.time_limit_s <= 0 or self.cost_threshold <= 0 or self.threshold_multiplier <= 0:
            raise ValueError("termination bounds must be positive")

    @property
    def target(self) -> float:
        return self.cost_threshold * self.threshold_multiplier


@dataclass
class RRTParams:
    step_m: float = 1.0
    goal_bias: float = 0.05
    record_samples: bool = False


@dataclass
class SSTParams:
    delta_bn: float = 0.5
    delta_s: float = 0.25
    goal_radius: float = 0.5
    goal_bias: float = 0.05
    duration: Tuple[float, float] = (0.5, 2.5)


@dataclass
class PlanResult:
    success: bool
    path: np.ndarray
    cost: float
    vertices: int
    time_s: float
    iterations: int = 0
    reason: str = ""
    controls: Optional[np.ndarray] = None
    trajectory: Optional[np.ndarray] = None
    incumbents: List[Tuple[int, float]] = field(default_factory=list)
    samples: List[Tuple[float, float, float]] = field(default_factory=list)  # (x, y, c_best)
    tree: Optional["PlanTree"] = None
    audit: dict = field(default_factory=dict)
    dt: float = 0.05

    def to_json(self) -> dict:
        out = {"success": bool(self.success), "states": np.asarray(self.path).tolist(),
               "cost": None if not math.isfinite(self.cost) else float(self.cost),
               "vertices": int(self.vertices), "time_s": float(self.time_s), "reason": self.reason}
        if self.controls is not None and len(self.controls):
            c = np.asarray(self.controls, dtype=float)
            # exported as (v, steering, duration_s)
            out["controls"] = np.column_stack([c[:, 0], c[:, 1], c[:, 2] * self.dt]).tolist()
        return out


class PlanTree:
    """Growable array-backed tree. Node 0 is the root with cost 0."""

    def __init__(self, root, capacity: int = 1024):
        root = np.asarray(root, dtype=float)
        self.dim = root.shape[0]
        self.states = np.zeros((capacity, self.dim))
        self.parent = np.full(capacity, -1, dtype=np.int64)
        self.cost = np.zeros(capacity)
        self.alive = np.zeros(capacity, dtype=bool)
        self.children: List[List[int]] = [[]]
        self.controls = {}
        self.states[0] = root
        self.alive[0] = True
        self.n = 1

    def __len__(self) -> int:
        return int(self.alive[:self.n].sum())

    def add(self, state, parent: int, cost: float, control=None) -> int:
        if self.n == len(self.cost):
            cap = 2 * self.n
            self.states = np.resize(self.states, (cap, self.dim))
            self.parent = np.resize(self.parent, cap)
            self.cost = np.resize(self.cost, cap)
            alive = np.zeros(cap, dtype=bool)
            alive[:self.n] = self.alive[:self.n]
            self.alive = alive
        i = self.n
        self.states[i] = state
        self.parent[i] = parent
        self.cost[i] = cost
        self.alive[i] = True
        self.children.append([])
        self.children[parent].append(i)
        if control is not None:
            self.controls[i] = control
        self.n += 1
        return i

    def remove_leaf(self, i: int) -> None:
        assert not self.children[i] and i != 0
        self.children[self.parent[i]].remove(i)
        self.alive[i] = False
        self.controls.pop(i, None)

    def path_to(self, i: int) -> List[int]:
        out = []
        while i >= 0:
            out.append(i)
            i = int(self.parent[i])
        return out[::-1]


# --- sampling regions ---------------------------------------------------------

class PixelRegion:
    """Uniform sampling over a set of pixels, jittered uniformly inside each pixel."""

    def __init__(self, cmap: Costmap, mask: Optional[np.ndarray] = None):
        self.cmap = cmap
        self.res = cmap.resolution
        self.mask = mask
        if mask is None:
            self.index = None
            self.count = cmap.height * cmap.width
        else:
            if mask.shape != cmap.occupancy.shape:
                raise ValueError(f"mask shape {mask.shape} != map shape {cmap.occupancy.shape}")
            self.index = np.flatnonzero(mask)
            self.count = len(self.index)
            if self.count == 0:
                raise EmptyProposalError("empty proposal")

    def sample(self, rng: random.Random) -> Tuple[float, float]:
        k = int(rng.random() * self.count)
        if self.index is not None:
            k = int(self.index[k])
        r, c = divmod(k, self.cmap.width)
        return (c + rng.random()) * self.res, (r + rng.random()) * self.res

    def contains(self, p) -> bool:
        c = math.floor(p[0] / self.res)
        r = math.floor(p[1] / self.res)
        if r < 0 or c < 0 or r >= self.cmap.height or c >= self.cmap.width:
            return False
        return self.mask is None or bool(self.mask[r, c])


def masked_sampler(cmap: Costmap, mask: np.ndarray, rng: random.Random) -> Tuple[float, float]:
    return PixelRegion(cmap, mask).sample(rng)


class InformedSet:
    """Prolate ellipse with foci start/goal and transverse diameter c_best."""

    def __init__(self, start, goal):
        self.start = np.asarray(start, dtype=float)
        self.goal = np.asarray(goal, dtype=float)
        self.center = (self.start + self.goal) / 2
        d = self.goal - self.start
        self.c_min = float(np.hypot(*d))
        ang = math.atan2(d[1], d[0])
        self.cos, self.sin = math.cos(ang), math.sin(ang)

    def sample(self, rng: random.Random, c_best: float) -> Tuple[float, float]:
        rad = math.sqrt(rng.random())
        th = 2 * math.pi * rng.random()
        a = c_best / 2
        b = math.sqrt(max(c_best * c_best - self.c_min * self.c_min, 0.0)) / 2
        u, v = a * rad * math.cos(th), b * rad * math.sin(th)
        return (self.center[0] + self.cos * u - self.sin * v,
                self.center[1] + self.sin * u + self.cos * v)

    def contains(self, p, c_best: float) -> bool:
        return (math.hypot(p[0] - self.start[0], p[1] - self.start[1])
                + math.hypot(p[0] - self.goal[0], p[1] - self.goal[1])) <= c_best + 1e-9


def _informed_sample(rng, region: PixelRegion, ell: InformedSet, c_best: float):
    """Uniform sample from region ∩ ellipse by alternating rejection schemes."""
    while True:
        for _ in range(20):
            p = ell.sample(rng, c_best)
            if region.contains(p):
                return p
        for _ in range(50):
            p = region.sample(rng)
            if ell.contains(p, c_best):
                return p


# --- RRT* / Informed-RRT* -----------------------------------------------------

def _check_endpoints(cmap: Costmap, start, goal):
    for name, p in (("start", start), ("goal", goal)):
        if not is_state_free(cmap, p[:2]):
            raise PlannerInputError(f"{name} {tuple(p)} is in collision or out of bounds")


def _fail(reason: str, t0: float, vertices: int = 1, dim: int = 2) -> PlanResult:
    return PlanResult(False, np.zeros((0, dim)), math.inf, vertices, time.perf_counter() - t0, reason=reason)


def rrt_star(cmap: Costmap, start, goal, mask: Optional[np.ndarray] = None,
             term: Optional[TerminationSpec] = None, seed: int = 0,
             params: Optional[RRTParams] = None, informed: bool = False) -> PlanResult:
    """RRT* (or Informed-RRT* with ``informed=True``) for a point robot in R^2."""
    term = term or TerminationSpec()
    params = params or RRTParams()
    start = (float(start[0]), float(start[1]))
    goal = (float(goal[0]), float(goal[1]))
    _check_endpoints(cmap, start, goal)
    t0 = time.perf_counter()
    try:
        region = PixelRegion(cmap, mask)
    except EmptyProposalError:
        return _fail("empty proposal", t0)
    rng = random.Random(seed)
    eta = params.step_m
    gamma = 2.0 * math.sqrt(3.0 * cmap.free_area_m2() / math.pi)
    ell = InformedSet(start, goal)
    tree = PlanTree(start)
    gx, gy = goal
    goal_parents: List[int] = []
    goal_dist: List[float] = []
    best, best_i = math.inf, -1
    incumbents: List[Tuple[int, float]] = []
    samples: List[Tuple[float, float, float]] = []
    it = 0
    target = term.target

    while True:
        if term.max_iterations is not None and it >= term.max_iterations:
            break
        if time.perf_counter() - t0 > term.time_limit_s:
            break
        it += 1
        if rng.random() < params.goal_bias:
            xr = goal
        elif informed and best < math.inf:
            xr = _informed_sample(rng, region, ell, best)
        else:
            xr = region.sample(rng)
        if informed and best < math.inf and params.record_samples:
            samples.append((xr[0], xr[1], best))
        n = tree.n
        pts = tree.states[:n]
        dx = pts[:, 0] - xr[0]
        dy = pts[:, 1] - xr[1]
        d2 = dx * dx + dy * dy
        i_near = int(np.argmin(d2))
        dn = math.sqrt(d2[i_near])
        px, py = pts[i_near]
        if dn <= eta:
            xn = (float(xr[0]), float(xr[1]))
        else:
            xn = (px + (xr[0] - px) * eta / dn, py + (xr[1] - py) * eta / dn)
        if not region.contains(xn) or not is_state_free(cmap, xn):
            continue
        if not is_motion_free(cmap, (px, py), xn):
            continue
        radius = min(gamma * math.sqrt(math.log(n + 1) / (n + 1)), eta)
        dist = np.hypot(pts[:, 0] - xn[0], pts[:, 1] - xn[1])
        near = np.flatnonzero(dist <= radius)
        # choose parent: cheapest feasible connection
        parent, pcost = i_near, tree.cost[i_near] + dist[i_near]
        if len(near):
            cand = tree.cost[near] + dist[near]
            for j in near[np.argsort(cand, kind="stable")]:
                cj = tree.cost[j] + dist[j]
                if cj >= pcost:
                    break
                if is_motion_free(cmap, tree.states[j], xn):
                    parent, pcost = int(j), cj
                    break
        new = tree.add(xn, parent, pcost)
        # rewire
        for j in near:
            j = int(j)
            if j == parent:
                continue
            c = pcost + dist[j]
            if c < tree.cost[j] - 1e-12 and is_motion_free(cmap, xn, tree.states[j]):
                _reparent(tree, j, new)
        dg = math.hypot(xn[0] - gx, xn[1] - gy)
        if dg <= eta and is_motion_free(cmap, xn, goal):
            goal_parents.append(new)
            goal_dist.append(dg)
        if goal_parents:
            totals = tree.cost[goal_parents] + np.asarray(goal_dist)
            k = int(np.argmin(totals))
            if totals[k] < best - 1e-12:
                best, best_i = float(totals[k]), goal_parents[k]
                incumbents.append((it, best))
        if best < math.inf and best <= target:
            break

    elapsed = time.perf_counter() - t0
    if best_i < 0:
        res = PlanResult(False, np.zeros((0, 2)), math.inf, tree.n, elapsed, it, "no solution")
    else:
        best = float(tree.cost[best_i] + math.hypot(tree.states[best_i][0] - gx, tree.states[best_i][1] - gy))
        path = np.vstack([tree.states[tree.path_to(best_i)], [goal]])
        ok = best <= target
        res = PlanResult(ok, path, best, tree.n, elapsed, it, "" if ok else "threshold not reached")
    if elapsed > term.time_limit_s and res.success:
        res.success, res.reason = False, "time limit"
    res.incumbents = incumbents
    res.samples = samples
    res.tree = tree
    return res


def informed_rrt_star(cmap: Costmap, start, goal, mask=None, term=None, seed: int = 0, params=None) -> PlanResult:
    return rrt_star(cmap, start, goal, mask, term, seed, params, informed=True)


def _reparent(tree: PlanTree, j: int, new_parent: int) -> None:
    old = int(tree.parent[j])
    tree.children[old].remove(j)
    tree.children[new_parent].append(j)
    tree.parent[j] = new_parent
    stack = [j]
    while stack:
        i = stack.pop()
        p = int(tree.parent[i])
        tree.cost[i] = tree.cost[p] + math.hypot(tree.states[i][0] - tree.states[p][0],
                                                 tree.states[i][1] - tree.states[p][1])
        stack.extend(tree.children[i])


# --- Dubins car / SST ----------------------------------------------------------

def propagate(state, v: float, phi: float, steps: int, robot: RobotModel) -> np.ndarray:
    """Euler-integrate a constant control; returns the (steps, 3) states after each step."""
    x0, y0, th0 = float(state[0]), float(state[1]), float(state[2])
    dt = robot.dt
    omega = v / robot.wheelbase * math.tan(phi)
    ths = th0 + dt * omega * np.arange(steps + 1)
    out = np.empty((steps, 3))
    out[:, 0] = x0 + np.cumsum(dt * v * np.cos(ths[:-1]))
    out[:, 1] = y0 + np.cumsum(dt * v * np.sin(ths[:-1]))
    out[:, 2] = ths[1:]
    return out


def replay_controls(start, controls, robot: RobotModel) -> np.ndarray:
    """States at the end of each control segment, starting from ``start``."""
    s = np.asarray(start, dtype=float)
    out = [s]
    for v, phi, steps in controls:
        s = propagate(s, v, phi, int(steps), robot)[-1]
        out.append(s)
    return np.vstack(out)


def sst(cmap: Costmap, start, goal, mask: Optional[np.ndarray] = None,
        term: Optional[TerminationSpec] = None, seed: int = 0,
        params: Optional[SSTParams] = None, robot: Optional[RobotModel] = None) -> PlanResult:
    """Stable Sparse RRT in the control space of a Dubins car.

    ``start`` is (x, y, theta); ``goal`` is a position (heading ignored).
    Controls are stored as (v, steering, n_steps) with duration n_steps * dt.
    """
    term = term or TerminationSpec(time_limit_s=60.0)
    params = params or SSTParams()
    robot = robot or RobotModel(kind="dubins")
    s0 = np.array([float(start[0]), float(start[1]), float(start[2]) if len(start) > 2 else 0.0])
    goal = (float(goal[0]), float(goal[1]))
    _check_endpoints(cmap, s0, goal)
    t0 = time.perf_counter()
    try:
        region = PixelRegion(cmap, mask)
    except EmptyProposalError:
        return _fail("empty proposal", t0, dim=3)
    rng = random.Random(seed)
    tree = PlanTree(s0)
    active = [True]
    witness_of = [0]
    witnesses = [s0[:2].copy()]
    wit_rep = [0]
    wit_pts = np.zeros((64, 2))
    wit_pts[0] = s0[:2]
    traj = {0: s0[None, :]}
    gx, gy = goal
    gr2 = params.goal_radius ** 2
    best, best_path = math.inf, None
    target = term.target
    it = 0
    d_lo, d_hi = params.duration
    incumbents = []

    while True:
        if term.max_iterations is not None and it >= term.max_iterations:
            break
        if time.perf_counter() - t0 > term.time_limit_s:
            break
        it += 1
        xr = goal if rng.random() < params.goal_bias else region.sample(rng)
        n = tree.n
        act = np.flatnonzero(np.asarray(active[:n]))
        ap = tree.states[act, :2]
        d2 = (ap[:, 0] - xr[0]) ** 2 + (ap[:, 1] - xr[1]) ** 2
        within = np.flatnonzero(d2 <= params.delta_bn ** 2)
        if len(within):
            sel = int(act[within[np.argmin(tree.cost[act[within]])]])
        else:
            sel = int(act[np.argmin(d2)])
        v = robot.v_max * (1.0 - rng.random())
        phi = robot.steer_max * (2 * rng.random() - 1)
        steps = max(1, int(round((d_lo + (d_hi - d_lo) * rng.random()) / robot.dt)))
        seg = propagate(tree.states[sel], v, phi, steps, robot)
        if not points_free(cmap, seg[:, :2]).all():
            continue
        in_goal = np.flatnonzero((seg[:, 0] - gx) ** 2 + (seg[:, 1] - gy) ** 2 <= gr2)
        if len(in_goal):
            steps = int(in_goal[0]) + 1
            seg = seg[:steps]
        xn = seg[-1]
        if not region.contains(xn):
            continue
        cost = tree.cost[sel] + v * robot.dt * steps
        # locally best?
        nw = len(witnesses)
        wd2 = (wit_pts[:nw, 0] - xn[0]) ** 2 + (wit_pts[:nw, 1] - xn[1]) ** 2
        w = int(np.argmin(wd2))
        if wd2[w] > params.delta_s ** 2:
            w = nw
            witnesses.append(xn[:2].copy())
            wit_rep.append(-1)
            if nw == len(wit_pts):
                wit_pts = np.resize(wit_pts, (2 * nw, 2))
            wit_pts[nw] = xn[:2]
        peer = wit_rep[w]
        if peer >= 0 and tree.cost[peer] <= cost:
            continue
        new = tree.add(xn, sel, cost, (v, phi, steps))
        traj[new] = seg
        active.append(True)
        witness_of.append(w)
        wit_rep[w] = new
        if peer >= 0:
            active[peer] = False
            while peer > 0 and not active[peer] and not tree.children[peer] and tree.alive[peer]:
                parent = int(tree.parent[peer])
                tree.remove_leaf(peer)
                traj.pop(peer, None)
                peer = parent
        if len(in_goal) and cost < best:
            best = cost
            idx = tree.path_to(new)
            best_path = (tree.states[idx].copy(),
                         np.array([tree.controls[i] for i in idx[1:]], dtype=float),
                         np.vstack([traj[i] for i in idx]))
            incumbents.append((it, best))
        if best < math.inf and best <= target:
            break

    elapsed = time.perf_counter() - t0
    if best_path is None:
        res = PlanResult(False, np.zeros((0, 3)), math.inf, len(tree), elapsed, it, "no solution")
    else:
        ok = best <= target and elapsed <= term.time_limit_s
        reason = "" if ok else ("threshold not reached" if best > target else "time limit")
        res = PlanResult(ok, best_path[0], best, len(tree), elapsed, it, reason,
                         controls=best_path[1], trajectory=best_path[2])
    res.incumbents = incumbents
    res.tree = tree
    res.dt = robot.dt
    res.audit = {"active": np.asarray(active[:tree.n]), "witness_of": np.asarray(witness_of),
                     "witnesses": np.asarray(witnesses), "rep": np.asarray(wit_rep)}
    return res


def audit_tree(tree: PlanTree, tol: float = 1e-9) -> bool:
    """Root-walk cost recomputation for RRT* trees (Euclidean edges)."""
    for i in range(1, tree.n):
        if not tree.alive[i]:
            continue
        p = int(tree.parent[i])
        edge = math.hypot(tree.states[i][0] - tree.states[p][0], tree.states[i][1] - tree.states[p][1])
        if abs(tree.cost[p] + edge - tree.cost[i]) > tol:
            return False
    return True


def path_valid(cmap: Costmap, path: np.ndarray) -> bool:
    if len(path) == 0:
        return False
    return all(is_motion_free(cmap, path[i, :2], path[i + 1, :2]) for i in range(len(path) - 1)) \
        and is_state_free(cmap, path[0, :2])


def path_length(path: np.ndarray) -> float:
    p = np.asarray(path)[:, :2]
    return float(np.hypot(*np.diff(p, axis=0).T).sum()) if len(p) > 1 else 0.0

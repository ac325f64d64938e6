"""Anchor labelling, balanced sampling, Adam with warm-up, and the training loop."""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor, register_gradcheck
from .net import AnchorGrid, MPTModel, anchor_grid, encode_query, softmax_np
from .worldgen import Costmap

logger = logging.getLogger(__name__)


class LabelingError(ValueError):
    pass


class NoPositives(Exception):
    """Problem has no positive anchors; the caller should skip it."""


class TrainingError(RuntimeError):
    pass


@dataclass
class AnchorLabels:
    positives: np.ndarray
    negatives: np.ndarray


@dataclass
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 3200
    problems_per_step: int = 8
    max_positives: int = 32
    steps: int = 2000
    seed: int = 0
    radius_m: float = 0.7
    holdout_frac: float = 0.1
    eval_every: int = 500
    tau: float = 0.5
    lr_scale: float = 1.0

    def __post_init__(self):
        if self.warmup_steps < 1 or self.problems_per_step < 1 or self.max_positives < 1:
            raise ValueError("warmup, problems_per_step and max_positives must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class TrainingProblem:
    cmap: Costmap
    start: tuple
    goal: tuple
    path: np.ndarray  # (n, >=2) metric states; only x, y are used


def _point_segment_dist(pts: np.ndarray, path: np.ndarray) -> np.ndarray:
    """Min distance from each point (n, 2) to the polyline (m, 2)."""
    if len(path) == 1:
        return np.hypot(pts[:, 0] - path[0, 0], pts[:, 1] - path[0, 1])
    a = path[:-1][None]
    b = path[1:][None]
    p = pts[:, None]
    ab = b - a
    denom = (ab ** 2).sum(-1)
    t = np.where(denom > 0, ((p - a) * ab).sum(-1) / np.where(denom > 0, denom, 1), 0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.sqrt(((p - proj) ** 2).sum(-1)).min(axis=1)


def label_anchors(path, grid: AnchorGrid, radius_m: float = 0.7) -> AnchorLabels:
    """Anchor is positive iff its centre lies within radius_m of any path segment."""
    path = np.asarray(path, dtype=float)
    if path.ndim != 2 or len(path) == 0:
        raise LabelingError("empty path")
    d = _point_segment_dist(grid.centers_m(), path[:, :2])
    pos = d <= radius_m + 1e-9
    return AnchorLabels(np.flatnonzero(pos), np.flatnonzero(~pos))


def sample_batch(labels: AnchorLabels, rng: np.random.Generator, max_pos: int = 32):
    """Token ids and targets with exactly twice as many negatives as positives.

    Returns (ids, targets, replaced) where ``replaced`` flags negatives drawn
    with replacement because too few exist.
    """
    if len(labels.positives) == 0:
        raise NoPositives("no positive anchors")
    if len(labels.negatives) == 0:
        raise NoPositives("no negative anchors")
    n_pos = min(len(labels.positives), max_pos)
    pos = rng.choice(labels.positives, size=n_pos, replace=False)
    replaced = len(labels.negatives) < 2 * n_pos
    neg = rng.choice(labels.negatives, size=2 * n_pos, replace=replaced)
    ids = np.concatenate([pos, neg])
    targets = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(2 * n_pos, dtype=np.int64)])
    return ids, targets, replaced


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of -log softmax(logits)[target]; default weights give the mean."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if n < 1:
        raise ValueError("cross_entropy needs at least one row")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    w = w.astype(logits.dtype)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(w * logp[np.arange(n), targets]).sum()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (g * w[:, None] * p,)

    return ad._wrap(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


@register_gradcheck("cross_entropy")
def _gc_ce(rng):
    targets = rng.integers(0, 2, size=6)
    return [rng.normal(size=(6, 2))], (lambda x: cross_entropy(x, targets))


def lr_at(step: int, d_model: int, warmup: int) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def adam_step(params: Dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
    """Bias-corrected Adam, in place. Missing gradients count as zero."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        upd = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        p.data = p.data - upd


@dataclass
class _Prepared:
    x: np.ndarray
    grid: AnchorGrid
    labels: AnchorLabels


def prepare(problems: Sequence[TrainingProblem], model: MPTModel, radius_m: float) -> List[_Prepared]:
    out = []
    for pb in problems:
        x = encode_query(pb.cmap, pb.start, pb.goal, model.cfg.patch_px)
        grid = anchor_grid(model.cfg, pb.cmap.height, pb.cmap.width, pb.cmap.resolution)
        out.append(_Prepared(x, grid, label_anchors(pb.path, grid, radius_m)))
    return out


def evaluate_anchors(model: MPTModel, prepared: Sequence[_Prepared], tau: float = 0.5) -> dict:
    """Pooled anchor precision/recall over all anchors of the given problems."""
    tp = fp = fn = 0
    for pr in prepared:
        logits, _ = model.forward(Tensor(pr.x), training=False, resolution=pr.grid.resolution)
        pred = softmax_np(logits.data.astype(np.float64))[:, 1] >= tau
        truth = np.zeros(pr.grid.n_tokens, dtype=bool)
        truth[pr.labels.positives] = True
        tp += int((pred & truth).sum())
        fp += int((pred & ~truth).sum())
        fn += int((~pred & truth).sum())
    return {"precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0, "tau": tau}


def split_problems(n: int, frac: float, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    k = int(round(frac * n))
    return np.sort(order[k:]), np.sort(order[:k])


def train(problems: Sequence[TrainingProblem], model: MPTModel, cfg: TrainConfig,
          log_path=None) -> dict:
    """Train in place; returns {"log": [...], "train_idx", "holdout_idx"}.

    Each optimizer step draws ``problems_per_step`` problems; each contributes
    the mean cross-entropy over its own balanced anchor sample and the step
    loss is the mean over problems. Problems sharing a map size are batched in
    one forward pass.
    """
    if not problems:
        raise TrainingError("empty dataset")
    prepared = prepare(problems, model, cfg.radius_m)
    usable = [i for i, p in enumerate(prepared) if len(p.labels.positives) and len(p.labels.negatives)]
    train_idx, hold_idx = split_problems(len(problems), cfg.holdout_frac, cfg.seed)
    train_idx = np.array([i for i in train_idx if i in set(usable)], dtype=np.int64)
    if len(train_idx) == 0:
        raise TrainingError("no training problem has positive and negative anchors")
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState()
    log: List[dict] = []
    fh = open(log_path, "w") if log_path else None
    order, cursor = rng.permutation(train_idx), 0
    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            chosen = []
            for _ in range(cfg.problems_per_step):
                if cursor == len(order):
                    order, cursor = rng.permutation(train_idx), 0
                chosen.append(int(order[cursor]))
                cursor += 1
            for p in model.params.values():
                p.zero_grad()
            groups: Dict[tuple, List[int]] = {}
            for i in chosen:
                groups.setdefault(prepared[i].x.shape, []).append(i)
            total = 0.0
            for shape in sorted(groups):
                members = groups[shape]
                rows, targets, weights = [], [], []
                n_tok = prepared[members[0]].grid.n_tokens
                for b, i in enumerate(members):
                    ids, tg, _ = sample_batch(prepared[i].labels, rng, cfg.max_positives)
                    rows.append(b * n_tok + ids)
                    targets.append(tg)
                    weights.append(np.full(len(ids), 1.0 / (len(ids) * len(chosen))))
                x = Tensor(np.stack([prepared[i].x for i in members]))
                with GradTape() as tape:
                    logits, _ = model.forward(x, training=True, rng=rng)
                    flat = ad.reshape(logits, (len(members) * n_tok, 2))
                    loss = cross_entropy(ad.take_rows(flat, np.concatenate(rows)),
                                         np.concatenate(targets), np.concatenate(weights))
                tape.backward(loss)
                total += float(loss.data)
            if not math.isfinite(total):
                raise TrainingError(f"non-finite loss at step {step}")
            lr = cfg.lr_scale * lr_at(step, model.cfg.d_model, cfg.warmup_steps)
            adam_step(model.params, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            rec = {"step": step, "lr": lr, "loss": total, "wall_ms": 1000 * (time.perf_counter() - t0)}
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
                for split, idx in (("train", train_idx), ("holdout", hold_idx)):
                    if len(idx) == 0:
                        continue
                    ev = {"step": step, "split": split,
                          **evaluate_anchors(model, [prepared[i] for i in idx], cfg.tau)}
                    log.append(ev)
                    if fh:
                        fh.write(json.dumps(ev) + "\n")
                logger.info("step %d loss %.4f", step, total)
    finally:
        if fh:
            fh.close()
    return {"log": log, "train_idx": train_idx.tolist(), "holdout_idx": hold_idx.tolist(),
            "prepared": prepared, "adam": state}


def smoothed_loss(log: Sequence[dict], step: int, window: int = 20) -> float:
    """Trailing mean of the per-step loss over up to ``window`` steps ending at ``step``."""
    vals = [r["loss"] for r in log if "loss" in r and step - window < r["step"] <= step]
    return float(np.mean(vals))

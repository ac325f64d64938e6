import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpt import net
from mpt import trainer as tr
from mpt.autodiff import GradTape, Tensor
from mpt.worldgen import Costmap


def brute_dist(p, path):
    best = math.inf
    for a, b in zip(path[:-1], path[1:]):
        ab = b - a
        L2 = ab @ ab
        t = 0.0 if L2 == 0 else min(1.0, max(0.0, (p - a) @ ab / L2))
        best = min(best, float(np.linalg.norm(p - (a + t * ab))))
    return best


def grid160():
    return net.anchor_grid(net.ModelConfig.tiny(), 160, 160, 0.05)


def test_label_straight_path_band():
    g = grid160()
    path = np.array([[0.5, 3.5], [7.5, 3.5]])
    lab = tr.label_anchors(path, g, 0.7)
    centres = g.centers_m()
    expect = np.flatnonzero(np.array([brute_dist(c, path) <= 0.7 for c in centres]))
    np.testing.assert_array_equal(lab.positives, expect)
    # anchors at y = 3.5 (row 3) are within range; rows 2 and 4 are 1.0 m away
    rows = {g.cell(t)[0] for t in lab.positives}
    assert rows == {3}
    assert len(lab.positives) + len(lab.negatives) == 49


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 8), st.floats(0, 8)), min_size=1, max_size=5), st.floats(0.1, 2.0))
def test_label_matches_brute_force(points, radius):
    g = grid160()
    path = np.array(points, dtype=float)
    lab = tr.label_anchors(path, g, radius)
    for t, c in enumerate(g.centers_m()):
        d = brute_dist(c, path) if len(path) > 1 else float(np.linalg.norm(c - path[0]))
        if abs(d - radius) > 1e-7:
            assert (t in set(lab.positives)) == (d <= radius)


def test_label_empty_path_rejected():
    with pytest.raises(tr.LabelingError):
        tr.label_anchors(np.zeros((0, 2)), grid160())


def test_sample_batch_ratio_and_cap(rng):
    lab = tr.AnchorLabels(np.arange(50), np.arange(50, 500))
    ids, targets, replaced = tr.sample_batch(lab, rng, 32)
    assert len(ids) == 96 and targets.sum() == 32 and not replaced
    assert set(ids[:32]) <= set(range(50)) and len(set(ids[:32])) == 32
    assert set(ids[32:]) <= set(range(50, 500))
    lab = tr.AnchorLabels(np.arange(5), np.arange(5, 12))
    ids, targets, replaced = tr.sample_batch(lab, rng, 32)
    assert len(ids) == 15 and targets.sum() == 5 and replaced
    with pytest.raises(tr.NoPositives):
        tr.sample_batch(tr.AnchorLabels(np.array([], int), np.arange(3)), rng)


def test_cross_entropy_value_and_grad():
    logits = np.array([[2.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    t = np.array([0, 1, 0])
    x = Tensor(logits, requires_grad=True, dtype=np.float64)
    with GradTape() as tape:
        loss = tr.cross_entropy(x, t)
    tape.backward(loss)
    expect = -np.mean([2 - np.log(np.exp(2) + 1), 1 - np.log(1 + np.e), -np.log(2)])
    assert abs(float(loss.data) - expect) < 1e-12
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    p[np.arange(3), t] -= 1
    np.testing.assert_allclose(x.grad, p / 3, atol=1e-12)


def test_lr_schedule_shape():
    d, w = 512, 3200
    assert tr.lr_at(w, d, w) == pytest.approx(d ** -0.5 * w ** -0.5)
    assert tr.lr_at(1, d, w) == pytest.approx(d ** -0.5 * w ** -1.5)
    assert tr.lr_at(100, d, w) < tr.lr_at(200, d, w)
    assert tr.lr_at(4 * w, d, w) == pytest.approx(tr.lr_at(w, d, w) / 2)
    with pytest.raises(ValueError):
        tr.lr_at(0, d, w)


def test_adam_first_steps_by_hand():
    p = {"w": Tensor(np.array([1.0, -2.0]), dtype=np.float64)}
    st_ = tr.AdamState()
    p["w"].grad = np.array([0.5, -4.0])
    tr.adam_step(p, st_, lr=0.1, beta1=0.9, beta2=0.98, eps=1e-9)
    # bias-corrected first step is lr * g / |g|
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9], atol=1e-8)
    p["w"].grad = np.array([0.5, 0.0])
    tr.adam_step(p, st_, lr=0.1, beta1=0.9, beta2=0.98, eps=1e-9)
    m = np.array([0.9 * 0.05 + 0.05, 0.9 * -0.4])
    v = np.array([0.98 * 0.02 * 0.25 + 0.02 * 0.25, 0.98 * 0.02 * 16])
    mh, vh = m / (1 - 0.81), v / (1 - 0.98 ** 2)
    np.testing.assert_allclose(p["w"].data, np.array([0.9, -1.9]) - 0.1 * mh / (np.sqrt(vh) + 1e-9), atol=1e-10)


def test_split_is_deterministic_and_disjoint():
    a, b = tr.split_problems(50, 0.1, seed=3)
    a2, b2 = tr.split_problems(50, 0.1, seed=3)
    np.testing.assert_array_equal(a, a2)
    assert len(b) == 5 and not set(a) & set(b) and len(a) + len(b) == 50


def _toy_problems(n=4):
    out = []
    for i in range(n):
        occ = np.zeros((160, 160), dtype=bool)
        occ[40 + 10 * i:60 + 10 * i, 100:120] = True
        y = 1.0 + 1.5 * i
        out.append(tr.TrainingProblem(Costmap(occ, 0.05), (0.5, y), (7.5, y), np.array([[0.5, y], [7.5, y]])))
    return out


def test_train_loop_reduces_loss_and_logs(tmp_path):
    model = net.MPTModel(net.ModelConfig.tiny(d_model=16, d_k=16, d_v=16), seed=0)
    cfg = tr.TrainConfig(steps=60, eval_every=30, problems_per_step=4, warmup_steps=20, holdout_frac=0.0)
    log_path = tmp_path / "log.jsonl"
    out = tr.train(_toy_problems(), model, cfg, log_path)
    losses = [r["loss"] for r in out["log"] if "loss" in r]
    assert len(losses) == 60 and all(math.isfinite(v) for v in losses)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    lines = log_path.read_text().strip().splitlines()
    assert len(lines) == 60 + 2
    assert {"step", "lr", "loss", "wall_ms"} <= set(__import__("json").loads(lines[0]))


def test_train_is_reproducible():
    cfg = tr.TrainConfig(steps=5, eval_every=0, problems_per_step=2, holdout_frac=0.0)
    runs = []
    for _ in range(2):
        model = net.MPTModel(net.ModelConfig.tiny(d_model=16, d_k=16, d_v=16), seed=0)
        runs.append([r["loss"] for r in tr.train(_toy_problems(2), model, cfg)["log"]])
    assert runs[0] == runs[1]


def test_train_rejects_empty():
    model = net.MPTModel(net.ModelConfig.tiny(), seed=0)
    with pytest.raises(tr.TrainingError):
        tr.train([], model, tr.TrainConfig(steps=1))


def test_smoothed_loss_trailing_mean():
    log = [{"step": i, "loss": float(i)} for i in range(1, 41)] + [{"step": 40, "split": "train", "recall": 1}]
    assert tr.smoothed_loss(log, 40) == pytest.approx(np.mean(range(21, 41)))
    assert tr.smoothed_loss(log, 5) == pytest.approx(3.0)


@pytest.mark.parametrize("op", ["cross_entropy"])
def test_cross_entropy_gradcheck(op):
    from mpt import autodiff
    assert autodiff.gradcheck(op, trial_count=3)["passed"]

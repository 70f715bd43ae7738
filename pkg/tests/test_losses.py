import math
from itertools import product

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from _numerics import check_gradients
from seda.denoiser import classify, predict_clean
from seda.exceptions import InvalidArgumentError
from seda.losses import (
    StagedLossConfig,
    class_centers,
    cross_entropy_loss,
    reconstruction_mse,
    staged_loss,
    structural_consistency_loss,
)

D = torch.float64


def _brute_center(features, member_rows):
    return sum(features[r] for r in member_rows) / len(member_rows)


def test_class_center_basic_cases():
    v = torch.tensor([[3.0, -1.0]] * 4, dtype=D)
    c = class_centers(v, torch.zeros(4, dtype=torch.long), 1)
    assert torch.equal(c.centers[0], v[0])
    c = class_centers(torch.tensor([[0.0, 0.0], [2.0, 2.0]], dtype=D), torch.tensor([0, 0]), 3)
    assert c.classes.tolist() == [0]
    assert c.centers.tolist() == [[1.0, 1.0]]


def test_class_centers_multi_label_against_enumeration():
    labels = torch.tensor([[1, 1, 0], [0, 1, 0], [1, 0, 1], [0, 0, 1], [1, 1, 1]], dtype=torch.bool)
    feats = torch.arange(10, dtype=D).reshape(5, 2) ** 1.5
    c = class_centers(feats, labels, 3)
    for j, cls in enumerate(c.classes.tolist()):
        rows = [r for r in range(5) if labels[r, cls]]
        torch.testing.assert_close(c.centers[j], _brute_center(feats, rows))
        assert c.counts[j] == len(rows)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_class_centers_invariant_to_batch_order(seed):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(12, 3, generator=g, dtype=D)
    labels = torch.randint(0, 4, (12,), generator=g)
    perm = torch.randperm(12, generator=g)
    a, b = class_centers(feats, labels, 4), class_centers(feats[perm], labels[perm], 4)
    assert torch.equal(a.classes, b.classes)
    torch.testing.assert_close(a.centers, b.centers, rtol=1e-12, atol=1e-12)


def test_structural_consistency_hand_values():
    x = torch.randn(5, 4, dtype=D)
    assert float(structural_consistency_loss(x, x.clone(), torch.tensor([0, 1, 1, 2, 0]), 3)) == 0.0
    val = structural_consistency_loss(torch.tensor([[0.0, 0.0]], dtype=D), torch.tensor([[1.0, 0.0]], dtype=D), torch.tensor([0]), 1)
    assert float(val) == pytest.approx(2.0)


def test_structural_consistency_matches_loop_oracle():
    g = torch.Generator().manual_seed(3)
    pred, vis = torch.randn(9, 4, generator=g, dtype=D), torch.randn(9, 4, generator=g, dtype=D)
    labels = torch.tensor([0, 0, 1, 3, 3, 3, 1, 0, 3])
    expected = 0.0
    for c in range(4):
        rows = [r for r in range(9) if labels[r] == c]
        if rows:
            expected += float(torch.linalg.vector_norm(_brute_center(pred, rows) - _brute_center(vis, rows)))
    for r in range(9):
        expected += sum(abs(float(pred[r, j] - vis[r, j])) for j in range(4))
    assert float(structural_consistency_loss(pred, vis, labels, 4)) == pytest.approx(expected, rel=1e-12)


def test_mse_cases():
    x = torch.randn(3, 4, dtype=D)
    assert float(reconstruction_mse(x, x)) == 0.0
    assert float(reconstruction_mse(torch.zeros(1, 2, dtype=D), torch.ones(1, 2, dtype=D))) == 2.0
    y = torch.randn(3, 4, dtype=D)
    assert float(reconstruction_mse(x + 3 * (y - x), x)) == pytest.approx(9 * float(reconstruction_mse(y, x)))


def test_cross_entropy_cases():
    labels = torch.tensor([0, 2, 1])
    assert float(cross_entropy_loss(torch.zeros(3, 5, dtype=D), labels)) == pytest.approx(math.log(5))
    confident = F.one_hot(labels, 5).to(D) * 200
    assert float(cross_entropy_loss(confident, labels)) < 1e-12
    multi = torch.tensor([[1, 0, 1], [0, 1, 0]], dtype=torch.bool)
    assert float(cross_entropy_loss(torch.zeros(2, 3, dtype=D), multi, "multi")) == pytest.approx(math.log(2))


def test_cross_entropy_multi_label_matches_formula():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(4, 3, generator=g, dtype=D)
    y = torch.tensor([[1, 0, 1], [0, 1, 0], [1, 1, 1], [0, 0, 1]], dtype=D)
    p = 1 / (1 + torch.exp(-logits))
    expected = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()
    assert float(cross_entropy_loss(logits, y.bool(), "multi")) == pytest.approx(float(expected), rel=1e-12)


def _parts(config, step, x_pred, x_vis, x_txt, logits, labels, c):
    """Brute force: evaluate each branch over exactly its own samples."""
    steps = torch.as_tensor(step)
    sem = [b for b in range(len(steps)) if (steps[b] <= config.staged_step) == (config.stage_order == "as-written")]
    txt = [b for b in range(len(steps)) if b not in sem]
    total = 0.0
    if sem:
        idx = torch.tensor(sem)
        total += config.alpha1 * float(structural_consistency_loss(x_pred[idx], x_vis[idx], labels[idx], c))
        total += config.beta * float(cross_entropy_loss(logits[idx], labels[idx], config.label_mode))
    if txt:
        idx = torch.tensor(txt)
        sq = [float(((x_txt[b] - x_pred[b]) ** 2).sum()) for b in txt]
        total += config.alpha2 * sum(sq) / len(sq)
        total += config.gamma * float(cross_entropy_loss(logits[idx], labels[idx], config.label_mode))
    return total


def _random_batch(g, n, d=4, c=3, multi=False):
    x_pred, x_vis, x_txt = (torch.randn(n, d, generator=g, dtype=D) for _ in range(3))
    logits = torch.randn(n, c, generator=g, dtype=D)
    if multi:
        labels = torch.rand(n, c, generator=g) < 0.5
        labels[torch.arange(n), torch.randint(0, c, (n,), generator=g)] = True
    else:
        labels = torch.randint(0, c, (n,), generator=g)
    return x_pred, x_vis, x_txt, logits, labels


def test_single_branch_batches():
    cfg = StagedLossConfig(alpha1=0.7, alpha2=1.3, beta=0.5, gamma=2.0, staged_step=10)
    g = torch.Generator().manual_seed(1)
    xp, xv, xt, lo, lab = _random_batch(g, 6)
    low = staged_loss(cfg, [1, 2, 3, 10, 10, 4], xp, xv, xt, lo, lab)
    assert float(low.total) == pytest.approx(
        0.7 * float(structural_consistency_loss(xp, xv, lab, 3)) + 0.5 * float(cross_entropy_loss(lo, lab)), rel=1e-14
    )
    assert low.n_textual == 0 and float(low.mse) == 0.0
    high = staged_loss(cfg, [11] * 6, xp, xv, xt, lo, lab)
    assert float(high.total) == pytest.approx(1.3 * float(reconstruction_mse(xp, xt)) + 2.0 * float(cross_entropy_loss(lo, lab)), rel=1e-14)


def test_mixed_six_sample_batch_and_reversed_order():
    g = torch.Generator().manual_seed(2)
    batch = _random_batch(g, 6)
    steps = [5, 80, 50, 51, 1, 200]
    for order in ("as-written", "reversed"):
        cfg = StagedLossConfig(staged_step=50, stage_order=order)
        res = staged_loss(cfg, steps, *batch)
        assert (res.n_semantic, res.n_textual) == (3, 3)
        assert float(res.total) == pytest.approx(_parts(cfg, steps, *batch, 3), abs=1e-9)


def test_threshold_anchors():
    g = torch.Generator().manual_seed(5)
    xp, xv, xt, lo, lab = _random_batch(g, 8)
    steps = torch.randint(1, 101, (8,), generator=g)
    none = staged_loss(StagedLossConfig(staged_step=0), steps, xp, xv, xt, lo, lab)
    assert float(none.total) == pytest.approx(float(reconstruction_mse(xp, xt) + 1.5 * cross_entropy_loss(lo, lab)), rel=1e-14)
    full = staged_loss(StagedLossConfig(staged_step=100), steps, xp, xv, xt, lo, lab)
    assert float(full.total) == pytest.approx(
        float(structural_consistency_loss(xp, xv, lab, 3) + 1.5 * cross_entropy_loss(lo, lab)), rel=1e-14
    )


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 12), multi=st.booleans(), t=st.integers(0, 20))
def test_losses_finite_and_nonnegative(seed, n, multi, t):
    g = torch.Generator().manual_seed(seed)
    xp, xv, xt, lo, lab = _random_batch(g, n, multi=multi)
    cfg = StagedLossConfig(staged_step=t, label_mode="multi" if multi else "single")
    res = staged_loss(cfg, torch.randint(1, 21, (n,), generator=g), xp, xv, xt, lo, lab)
    for v in res.as_floats().values():
        assert math.isfinite(v) and v >= 0
    parts = cfg.alpha1 * res.structural + cfg.beta * res.ce_semantic + cfg.alpha2 * res.mse + cfg.gamma * res.ce_textual
    assert abs(float(parts - res.total)) <= 1e-9


@pytest.mark.parametrize("multi", [False, True])
def test_loss_gradients_wrt_inputs(multi):
    g = torch.Generator().manual_seed(7)
    xp, xv, xt, lo, lab = _random_batch(g, 4, d=8, multi=multi)
    xp.requires_grad_(True)
    lo.requires_grad_(True)
    mode = "multi" if multi else "single"
    assert check_gradients(lambda: structural_consistency_loss(xp, xv, lab, 3), [xp]) <= 1e-4
    assert check_gradients(lambda: reconstruction_mse(xp, xt), [xp]) <= 1e-4
    assert check_gradients(lambda: cross_entropy_loss(lo, lab, mode), [lo]) <= 1e-4
    cfg = StagedLossConfig(staged_step=10, label_mode=mode)
    steps = [3, 12, 9, 40]
    assert check_gradients(lambda: staged_loss(cfg, steps, xp, xv, xt, lo, lab).total, [xp, lo]) <= 1e-4


def test_staged_loss_validation():
    g = torch.Generator().manual_seed(0)
    xp, xv, xt, lo, lab = _random_batch(g, 3)
    cfg = StagedLossConfig(staged_step=5)
    with pytest.raises(InvalidArgumentError):
        staged_loss(cfg, [1, 2], xp, xv, xt, lo, lab)
    with pytest.raises(InvalidArgumentError):
        staged_loss(cfg, [9, 9, 9], xp, xv, None, lo, lab)
    with pytest.raises(InvalidArgumentError):
        StagedLossConfig(alpha1=-1)
    with pytest.raises(InvalidArgumentError):
        StagedLossConfig(stage_order="sideways")
    with pytest.raises(InvalidArgumentError):
        cross_entropy_loss(lo, torch.tensor([0, 1, 3]))

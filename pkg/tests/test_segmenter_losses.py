import math
from itertools import permutations

import numpy as np
import pytest
import torch

from turnkit.segmenter import (
    CosFaceLoss,
    js_consistency_loss,
    peel_diversity_loss,
    pit_bce_loss,
    supcon_loss,
    triplet_consistency_loss,
)


# --- PIT BCE -------------------------------------------------------------------


def bce(p, m, eps=1e-7):
    p = np.clip(p, eps, 1 - eps)
    return -(m * np.log(p) + (1 - m) * np.log(1 - p))


def test_pit_zero_on_exact_match():
    masks = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    loss, perm = pit_bce_loss(masks, masks)
    assert perm == (0, 1)
    assert loss.item() < 1e-5


def test_pit_permutation_invariance_exact():
    preds = torch.rand(3, 6)
    masks = (torch.rand(3, 6) > 0.5).float()
    base, _ = pit_bce_loss(preds, masks)
    for perm in permutations(range(3)):
        swapped, _ = pit_bce_loss(preds, masks[list(perm)])
        assert swapped.item() == pytest.approx(base.item(), abs=0)


def test_pit_matches_enumeration_oracle(rng):
    preds = torch.from_numpy(rng.uniform(0.05, 0.95, (2, 10)).astype(np.float32))
    masks = torch.from_numpy((rng.uniform(size=(2, 10)) > 0.5).astype(np.float32))
    loss, perm = pit_bce_loss(preds, masks)
    p, m = preds.numpy(), masks.numpy()
    identity = np.mean([bce(p[0], m[0]), bce(p[1], m[1])])
    swapped = np.mean([bce(p[0], m[1]), bce(p[1], m[0])])
    expected = min(identity, swapped)
    assert loss.item() == pytest.approx(expected, abs=1e-6)
    assert perm == ((0, 1) if identity <= swapped else (1, 0))


def test_pit_factorial_guard():
    big = torch.rand(5, 4)
    with pytest.raises(ValueError):
        pit_bce_loss(big, big)


# --- CosFace --------------------------------------------------------------------


def test_cosface_degenerates_to_softmax_ce():
    loss_fn = CosFaceLoss(8, 4, margin=0.0, scale=1.0)
    emb = torch.randn(6, 8)
    labels = torch.tensor([0, 1, 2, 3, 0, 1])
    got = loss_fn(emb, labels)
    w = torch.nn.functional.normalize(loss_fn.weight, dim=-1)
    cos = torch.nn.functional.normalize(emb, dim=-1) @ w.t()
    expected = torch.nn.functional.cross_entropy(cos, labels)
    assert got.item() == pytest.approx(expected.item(), abs=1e-6)


def test_cosface_two_class_closed_form():
    loss_fn = CosFaceLoss(2, 2, margin=0.35, scale=30.0)
    with torch.no_grad():
        loss_fn.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
    emb = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    labels = torch.tensor([0, 1])
    got = loss_fn(emb, labels)
    expected = math.log1p(math.exp(-30.0 * (1.0 - 0.35)))  # ~3.4e-9
    assert got.item() == pytest.approx(expected, abs=1e-6)


def test_cosface_loss_increases_with_margin():
    emb = torch.randn(8, 4)
    labels = torch.tensor([0, 1, 0, 1, 0, 1, 0, 1])
    prev = -1.0
    torch.manual_seed(7)
    weight = torch.randn(2, 4)
    for margin in (0.0, 0.2, 0.4):
        loss_fn = CosFaceLoss(4, 2, margin=margin, scale=10.0)
        with torch.no_grad():
            loss_fn.weight.copy_(weight)
        value = loss_fn(emb, labels).item()
        assert value > prev
        prev = value


def test_cosface_single_class_rejected():
    loss_fn = CosFaceLoss(4, 3)
    with pytest.raises(ValueError):
        loss_fn(torch.randn(4, 4), torch.zeros(4, dtype=torch.long))


# --- supervised contrastive --------------------------------------------------------


def supcon_oracle(emb, labels, tau):
    """Direct summation over anchors and positives."""
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    n = len(emb)
    losses = []
    for i in range(n):
        positives = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not positives:
            continue
        denom = sum(math.exp(np.dot(emb[i], emb[a]) / tau)
                    for a in range(n) if a != i)
        terms = [math.log(math.exp(np.dot(emb[i], emb[p]) / tau) / denom)
                 for p in positives]
        losses.append(-sum(terms) / len(positives))
    return float(np.mean(losses))


def test_supcon_two_identical_positives_two_orthogonal_negatives():
    # anchor plus two identical positives, two orthogonal singleton negatives;
    # per anchor: -log(e / (2e + 2)) = log(2 + 2/e)
    emb = torch.tensor([
        [1.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ])
    labels = torch.tensor([0, 0, 0, 1, 2])
    got = supcon_loss(emb, labels, temperature=1.0)
    closed_form = math.log(2.0 + 2.0 / math.e)
    assert got.item() == pytest.approx(closed_form, rel=1e-6)
    oracle = supcon_oracle(emb.numpy(), labels.numpy(), 1.0)
    assert got.item() == pytest.approx(oracle, rel=1e-6)


def test_supcon_matches_direct_summation(rng):
    emb = torch.from_numpy(rng.standard_normal((10, 6)).astype(np.float32))
    labels = torch.from_numpy(rng.integers(0, 3, 10))
    got = supcon_loss(emb, labels, temperature=0.3)
    oracle = supcon_oracle(emb.numpy().astype(np.float64), labels.numpy(), 0.3)
    assert got.item() == pytest.approx(oracle, rel=1e-4)


def test_supcon_all_identical(rng):
    emb = torch.ones(6, 4)
    labels = torch.tensor([0, 0, 0, 1, 1, 1])
    got = supcon_loss(emb, labels, temperature=1.0)
    oracle = supcon_oracle(emb.numpy(), labels.numpy(), 1.0)
    assert got.item() == pytest.approx(oracle, rel=1e-6)


def test_supcon_scale_invariance(rng):
    emb = torch.from_numpy(rng.standard_normal((8, 5)).astype(np.float32))
    labels = torch.from_numpy(rng.integers(0, 2, 8))
    a = supcon_loss(emb, labels, 0.5)
    b = supcon_loss(5.0 * emb, labels, 0.5)
    assert a.item() == pytest.approx(b.item(), rel=1e-5)


# --- triplet consistency -------------------------------------------------------------


def test_triplet_perfect_anchor():
    t = 6
    anchor = torch.zeros(t, 4)
    anchor[:, 0] = 1.0
    negative = torch.zeros(t, 4)
    negative[:, 1] = 1.0
    loss, count = triplet_consistency_loss(anchor, anchor.clone(), negative,
                                           torch.ones(t), margin=0.2)
    assert count == t
    assert loss.item() == pytest.approx(0.0, abs=1e-7)


def test_triplet_equidistant_gives_margin():
    t = 4
    anchor = torch.zeros(t, 4)
    anchor[:, 0] = 1.0
    other = torch.zeros(t, 4)
    other[:, 1] = 1.0
    third = torch.zeros(t, 4)
    third[:, 2] = 1.0
    loss, _ = triplet_consistency_loss(anchor, other, third, torch.ones(t), 0.2)
    assert loss.item() == pytest.approx(0.2, abs=1e-6)


def test_triplet_masked_out():
    anchor = torch.randn(5, 4)
    loss, count = triplet_consistency_loss(anchor, torch.randn(5, 4),
                                           torch.randn(5, 4), torch.zeros(5), 0.2)
    assert count == 0
    assert loss.item() == 0.0


# --- peel diversity ----------------------------------------------------------------


def test_diversity_orthogonal_is_zero():
    z = torch.zeros(2, 4, 3)
    z[0, :, 0] = 1.0
    z[1, :, 1] = 1.0
    assert peel_diversity_loss(z).item() == pytest.approx(0.0, abs=1e-7)


def test_diversity_identical_is_one():
    z = torch.ones(2, 5, 3)
    assert peel_diversity_loss(z).item() == pytest.approx(1.0, rel=1e-6)


def test_diversity_matches_enumeration(rng):
    z = torch.from_numpy(rng.standard_normal((3, 7, 4)).astype(np.float32))
    z[0, 2] = 0.0  # a zero frame is excluded for pairs that touch it
    got = peel_diversity_loss(z).item()
    zn = z.numpy().astype(np.float64)
    terms = []
    for i in range(3):
        for j in range(i + 1, 3):
            for t in range(7):
                ni, nj = np.linalg.norm(zn[i, t]), np.linalg.norm(zn[j, t])
                if ni > 0 and nj > 0:
                    c = np.dot(zn[i, t], zn[j, t]) / (ni * nj)
                    terms.append(max(0.0, c) ** 2)
    assert got == pytest.approx(np.mean(terms), rel=1e-5)


def test_diversity_needs_two_peels():
    with pytest.raises(ValueError):
        peel_diversity_loss(torch.ones(1, 3, 2))


# --- JS consistency -------------------------------------------------------------------


def test_js_identical_distributions():
    p = torch.softmax(torch.randn(6, 4), dim=-1)
    assert js_consistency_loss(p, p.clone(), p.clone()).item() == pytest.approx(0.0, abs=1e-7)


def test_js_disjoint_one_hots_reach_log3():
    a = torch.tensor([[1.0, 0.0, 0.0]])
    b = torch.tensor([[0.0, 1.0, 0.0]])
    c = torch.tensor([[0.0, 0.0, 1.0]])
    assert js_consistency_loss(a, b, c).item() == pytest.approx(math.log(3.0), rel=1e-5)


def test_js_bounded(rng):
    for _ in range(1000):
        p = torch.softmax(torch.from_numpy(
            rng.standard_normal((3, 3, 5)).astype(np.float32) * 3), dim=-1)
        v = js_consistency_loss(p[0], p[1], p[2]).item()
        assert -1e-7 <= v <= math.log(3.0) + 1e-6


def test_js_renormalizes_defensively():
    bad = torch.tensor([[2.0, 2.0, 0.0]])
    ok = torch.tensor([[0.5, 0.5, 0.0]])
    v = js_consistency_loss(bad, ok.clone(), ok.clone()).item()
    assert v == pytest.approx(0.0, abs=1e-6)


def test_all_losses_nonnegative(rng):
    preds = torch.rand(2, 8)
    masks = (torch.rand(2, 8) > 0.5).float()
    assert pit_bce_loss(preds, masks)[0].item() >= 0
    emb = torch.from_numpy(rng.standard_normal((8, 4)).astype(np.float32))
    labels = torch.from_numpy(rng.integers(0, 2, 8))
    assert supcon_loss(emb, labels).item() >= -1e-6
    z = torch.from_numpy(rng.standard_normal((2, 6, 4)).astype(np.float32))
    assert peel_diversity_loss(z).item() >= 0

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neokd import losses
from neokd import tensor as T
from neokd.errors import ConfigError
from neokd.losses import DistillConfig

from .helpers import random_batch, random_logits, random_net


def softmax64(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_distill_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(alpha=-1)
    with pytest.raises(ConfigError):
        DistillConfig(gamma=(1, 0, 1))
    with pytest.raises(ConfigError):
        DistillConfig(nkd_ensemble="odd")
    with pytest.raises(ConfigError):
        DistillConfig(gamma=(1, 1)).validate_for(3)


# ------------------------------------------------------------------- NKD


def test_nkd_teacher_arithmetic():
    a, b, c = [[0.7, 0.3]], [[0.5, 0.5]], [[0.1, 0.9]]
    probs = [np.array(v) for v in (a, b, c)]
    t2 = losses.nkd_teacher(probs, 2)
    exact = [float(Fraction(13, 30)), float(Fraction(17, 30))]
    np.testing.assert_allclose(t2, [exact], atol=1e-7)
    np.testing.assert_allclose(losses.nkd_teacher(probs, 1), [[0.6, 0.4]], atol=1e-7)
    np.testing.assert_allclose(losses.nkd_teacher(probs, 3), [[0.3, 0.7]], atol=1e-7)


def test_nkd_identical_exits():
    u = np.array([[0.2, 0.3, 0.5]])
    for i in (1, 2, 3, 4):
        np.testing.assert_allclose(losses.nkd_teacher([u] * 4, i), u, atol=1e-7)


def test_nkd_two_exits_share_teacher():
    probs = [softmax64(z.data) for z in random_logits(2, 5, 4, seed=1)]
    t = losses.nkd_teachers(probs).rows
    np.testing.assert_array_equal(t[0], t[1])
    np.testing.assert_allclose(t[0], (probs[0] + probs[1]) / 2, atol=1e-7)


def test_nkd_ensemble_modes():
    probs = [softmax64(z.data) for z in random_logits(4, 3, 5, seed=2)]
    np.testing.assert_allclose(losses.nkd_teacher(probs, 2, "none"), probs[1], atol=1e-7)
    np.testing.assert_allclose(losses.nkd_teacher(probs, 2, "all"), np.mean(probs, axis=0), atol=1e-7)


def test_nkd_loss_direct_formula():
    clean = random_logits(3, 6, 4, seed=3)
    adv = random_logits(3, 6, 4, seed=4)
    probs = [softmax64(z.data) for z in clean]
    neighbors = [[0, 1], [0, 1, 2], [1, 2]]
    got = [t.item() for t in losses.nkd_loss(adv, probs)]
    for i, members in enumerate(neighbors):
        teacher = np.mean([probs[k] for k in members], axis=0)
        logp = np.log(softmax64(adv[i].data))
        assert got[i] == pytest.approx(-np.mean(np.sum(teacher * logp, axis=1)), rel=1e-5)


def test_nkd_loss_at_teacher_is_entropy():
    probs = [softmax64(z.data) for z in random_logits(3, 4, 3, seed=5)]
    teachers = losses.nkd_teachers(probs).rows
    adv = [T.Tensor(np.log(t.astype(np.float64))) for t in teachers]
    for v, t in zip(losses.nkd_loss(adv, probs), teachers):
        t = t.astype(np.float64)
        assert v.item() == pytest.approx(-np.mean(np.sum(t * np.log(t), axis=1)), rel=1e-5)


# ------------------------------------------------------------------ EOKD


def test_assignment_c4_l3_mask_pattern():
    # every exit keeps the ground truth plus exactly one distinct other class
    for seed in range(5):
        a = losses.orthogonal_assignment(4, 3, epoch=0, seed=seed)
        for y in range(4):
            subsets = a.subsets(y)
            assert [len(s) for s in subsets] == [1, 1, 1]
            assert sorted(c for s in subsets for c in s) == sorted(set(range(4)) - {y})
            masks = a.keep_table()[y].astype(int)
            # each row has a 1 at y and one further 1; together the rows cover all classes
            assert np.all(masks[:, y] == 1) and np.all(masks.sum(axis=1) == 2)
            assert np.all(masks.sum(axis=0)[[c for c in range(4) if c != y]] == 1)


def test_assignment_single_exit_keeps_everything():
    a = losses.orthogonal_assignment(3, 1, epoch=0, seed=0)
    for y in range(3):
        assert sorted(a.subsets(y)[0]) == sorted(set(range(3)) - {y})


def test_assignment_c10_l3_brute_force():
    a = losses.orthogonal_assignment(10, 3, epoch=2, seed=9)
    for y in range(10):
        subsets = [set(s) for s in a.subsets(y)]
        assert all(len(s) == 3 for s in subsets)
        assert len(set.union(*subsets)) == 9 and y not in set.union(*subsets)
        assert a.unassigned(y) == ()


def test_assignment_changes_with_epoch_and_is_deterministic():
    a = losses.orthogonal_assignment(10, 3, 0, 1)
    assert np.array_equal(a.permutation, losses.orthogonal_assignment(10, 3, 0, 1).permutation)
    perms = {tuple(losses.orthogonal_assignment(10, 3, e, 1).permutation) for e in range(5)}
    assert len(perms) > 1


@settings(max_examples=200, deadline=None)
@given(c=st.integers(2, 40), l=st.integers(1, 12), seed=st.integers(0, 2**31), data=st.data())
def test_assignment_invariants(c, l, seed, data):
    a = losses.orthogonal_assignment(c, l, epoch=data.draw(st.integers(0, 50)), seed=seed)
    y = data.draw(st.integers(0, c - 1))
    k = (c - 1) // l
    subsets = a.subsets(y)
    assert len(subsets) == l and all(len(s) == k for s in subsets)
    flat = [x for s in subsets for x in s]
    assert len(set(flat)) == len(flat) == l * k
    assert y not in flat
    assert len(a.unassigned(y)) == (c - 1) % l
    assert set(flat) | set(a.unassigned(y)) | {y} == set(range(c))


def test_eokd_target_exit1_example():
    a = losses.OrthogonalAssignment(0, np.array([2, 1, 3, 0]), 3)
    # label 1: rest of the permutation is [2, 3, 0]; exit 1 keeps {1, 2}
    assert a.subsets(1) == [(2,), (3,), (0,)]
    p = np.array([[0.1, 0.2, 0.3, 0.4]])
    t = losses.eokd_target(p, [1], a, 1)
    np.testing.assert_allclose(t, [[0, 0.2 / 0.5, 0.3 / 0.5, 0]], atol=1e-7)


def test_eokd_target_empty_selection_is_onehot():
    a = losses.orthogonal_assignment(3, 4, 0, 0)
    p = softmax64(np.random.default_rng(0).standard_normal((2, 3)))
    np.testing.assert_allclose(losses.eokd_target(p, [2, 0], a, 1), [[0, 0, 1], [1, 0, 0]], atol=1e-7)


def test_eokd_target_underflow_falls_back_to_onehot():
    a = losses.orthogonal_assignment(4, 3, 0, 0)
    y = 0
    kept = a.subsets(y)[0][0]
    p = np.zeros((1, 4))
    p[0, [c for c in range(4) if c not in (y, kept)]] = 0.5
    np.testing.assert_allclose(losses.eokd_target(p, [y], a, 1), [[1, 0, 0, 0]])


def test_eokd_target_random_oracle():
    rng = np.random.default_rng(4)
    a = losses.orthogonal_assignment(7, 2, 3, 5)
    p = rng.dirichlet(np.ones(7), size=10)
    y = rng.integers(0, 7, 10)
    for i in (1, 2):
        t = losses.eokd_target(p, y, a, i)
        for r in range(10):
            keep = [y[r], *a.subsets(int(y[r]))[i - 1]]
            expected = np.zeros(7)
            expected[keep] = p[r, keep] / p[r, keep].sum()
            np.testing.assert_allclose(t[r], expected, atol=1e-6)


def test_eokd_loss_direct_formula():
    clean = random_logits(2, 5, 6, seed=6)
    adv = random_logits(2, 5, 6, seed=7)
    probs = [softmax64(z.data) for z in clean]
    y = np.array([0, 5, 2, 2, 1])
    a = losses.orthogonal_assignment(6, 2, 0, 0)
    got = [v.item() for v in losses.eokd_loss(adv, probs, y, a)]
    for i in range(2):
        t = losses.eokd_target(probs[i], y, a, i + 1).astype(np.float64)
        logp = np.log(softmax64(adv[i].data))
        assert got[i] == pytest.approx(-np.mean(np.sum(t * logp, axis=1)), rel=1e-5)


# ---------------------------------------------------------------- totals


@pytest.mark.parametrize("seed", range(4))
def test_zero_weights_match_baseline(seed):
    clean = random_logits(3, 8, 5, seed=seed, requires_grad=True)
    adv = random_logits(3, 8, 5, seed=seed + 10, requires_grad=True)
    y = np.random.default_rng(seed).integers(0, 5, 8)
    a = losses.orthogonal_assignment(5, 3, 0, seed)
    total, _ = losses.neokd_total(clean, adv, y, a, DistillConfig(alpha=0, beta=0, gamma=(1, 1, 1)))
    base, _ = losses.baseline_loss(clean, adv, y)
    assert abs(total.item() - base.item()) <= 1e-12
    g1 = T.grad(total, clean + adv)
    g2 = T.grad(base, clean + adv)
    for u, v in zip(g1, g2):
        assert u.tobytes() == v.tobytes()


def test_baseline_formula():
    clean = random_logits(2, 4, 3, seed=1)
    adv = random_logits(2, 4, 3, seed=2)
    y = np.array([0, 1, 2, 0])
    total, parts = losses.baseline_loss(clean, adv, y)
    expected = sum(T.cross_entropy(z, y).item() for z in clean + adv)
    assert total.item() == pytest.approx(expected, rel=1e-6)
    assert len(parts.clean) == len(parts.adv) == 2


def test_gamma_scales_only_distillation():
    clean = random_logits(3, 6, 4, seed=3)
    adv = random_logits(3, 6, 4, seed=4)
    y = np.array([0, 1, 2, 3, 0, 1])
    a = losses.orthogonal_assignment(4, 3, 1, 2)
    base = losses.baseline_loss(clean, adv, y)[0].item()
    g = (1.0, 0.5, 2.0)
    t1 = losses.neokd_total(clean, adv, y, a, DistillConfig(3, 1, g))[0].item()
    t2 = losses.neokd_total(clean, adv, y, a, DistillConfig(3, 1, tuple(2 * x for x in g)))[0].item()
    assert t2 - base == pytest.approx(2 * (t1 - base), rel=1e-5)


def test_total_matches_weighted_sum():
    clean = random_logits(3, 6, 4, seed=5)
    adv = random_logits(3, 6, 4, seed=6)
    y = np.array([3, 1, 2, 3, 0, 1])
    a = losses.orthogonal_assignment(4, 3, 0, 0)
    dcfg = DistillConfig(3, 1, (1.0, 1.0, 1.5))
    total, parts = losses.neokd_total(clean, adv, y, a, dcfg)
    expected = sum(
        parts.clean[i] + parts.adv[i] + dcfg.gamma[i] * (3 * parts.nkd[i] + 1 * parts.eokd[i]) for i in range(3)
    )
    assert total.item() == pytest.approx(expected, rel=1e-5)
    assert parts.total == pytest.approx(total.item())


def test_eokd_needs_assignment():
    clean = random_logits(2, 3, 3)
    with pytest.raises(ConfigError):
        losses.neokd_total(clean, clean, [0, 1, 2], None, DistillConfig(3, 1, (1, 1)))
    total, parts = losses.neokd_total(clean, clean, [0, 1, 2], None, DistillConfig(3, 0, (1, 1)))
    assert parts.eokd == [0.0, 0.0]


def test_teachers_are_distributions_without_gradient():
    net = random_net(seed=2)
    x, y = random_batch(12, 6, 4, seed=2)
    x_adv = np.clip(x + 0.1, 0, 1)
    a = losses.orthogonal_assignment(4, 3, 0, 0)
    dcfg = DistillConfig(3, 1, (1, 1, 1))

    def grads(teacher_net):
        clean = teacher_net.forward(x)
        for rows in losses.nkd_teachers(losses.probs_of(clean)).rows + losses.eokd_teachers(losses.probs_of(clean), y, a).rows:
            np.testing.assert_allclose(rows.astype(np.float64).sum(axis=1), 1.0, atol=1e-6)
        adv = net.forward(x_adv)
        probs = losses.probs_of(clean)
        kd = losses._sum(losses.nkd_loss(adv, probs) + losses.eokd_loss(adv, probs, y, a))
        return T.grad(kd, net.parameters())

    # teachers from the trained net itself or from an identical copy give the same gradient:
    # nothing flows back through the teacher side
    for g, h in zip(grads(net), grads(net.copy())):
        assert g.tobytes() == h.tobytes()


def test_skd_single_exit_is_baseline():
    clean = random_logits(1, 5, 3, seed=8)
    adv = random_logits(1, 5, 3, seed=9)
    y = np.array([0, 1, 2, 1, 0])
    assert losses.skd_loss(clean, adv, y)[0].item() == losses.baseline_loss(clean, adv, y)[0].item()


def test_skd_direct_formula():
    clean = random_logits(3, 5, 3, seed=10)
    adv = random_logits(3, 5, 3, seed=11)
    y = np.array([0, 1, 2, 1, 0])
    total, parts = losses.skd_loss(clean, adv, y)
    lc, la = softmax64(clean[2].data), softmax64(adv[2].data)
    expected = losses.baseline_loss(clean, adv, y)[0].item()
    for i in range(2):
        expected += -np.mean(np.sum(lc * np.log(softmax64(clean[i].data)), axis=1))
        expected += -np.mean(np.sum(la * np.log(softmax64(adv[i].data)), axis=1))
    assert total.item() == pytest.approx(expected, rel=1e-5)
    assert parts.distill[2] == 0.0


def test_ard_on_clean_inputs_is_entropy():
    clean = random_logits(3, 5, 4, seed=12)
    y = np.array([0, 1, 2, 3, 0])
    _, parts = losses.ard_loss(clean, clean, y)
    p = softmax64(clean[2].data)
    assert parts.distill[2] == pytest.approx(-np.mean(np.sum(p * np.log(p), axis=1)), rel=1e-5)
    assert parts.distill[:2] == [0.0, 0.0]


def test_ard_direct_formula():
    clean = random_logits(3, 5, 4, seed=13)
    adv = random_logits(3, 5, 4, seed=14)
    y = np.array([0, 1, 2, 3, 0])
    total, _ = losses.ard_loss(clean, adv, y, weight=2.0)
    p = softmax64(clean[2].data)
    kd = -np.mean(np.sum(p * np.log(softmax64(adv[2].data)), axis=1))
    assert total.item() == pytest.approx(losses.baseline_loss(clean, adv, y)[0].item() + 2.0 * kd, rel=1e-5)

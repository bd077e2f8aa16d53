import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdcl import losses, oracles
from sdcl import tensor as T


def random_probs(rng, b=1, k=2, shape=(4, 4, 4), sharp=1.0):
    z = rng.normal(size=(b, k) + shape) * sharp
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def one_hot_probs(label, k):
    return losses.one_hot(label, k)


def test_perfect_prediction_has_zero_ce_and_tiny_dice():
    label = np.random.default_rng(0).integers(0, 3, size=(1, 4, 4, 4))
    probs = T.Tensor(one_hot_probs(label, 3))
    assert losses.ce_map(probs, label).data.max() == 0.0
    assert losses.soft_dice_loss(probs, label).item() <= 1e-6
    assert losses.region_seg_loss(probs, label).item() <= 1e-6


def test_ce_of_half_probability_is_ln2():
    probs = T.Tensor(np.full((1, 2, 1, 1, 1), 0.5))
    ce = losses.ce_map(probs, np.zeros((1, 1, 1, 1), dtype=int))
    assert ce.data.item() == pytest.approx(math.log(2), abs=1e-12)
    assert math.log(2) == pytest.approx(0.6931, abs=1e-4)


def test_seg_loss_map_matches_region_loss_and_oracle():
    rng = np.random.default_rng(1)
    p = random_probs(rng, k=3, shape=(4, 4, 1))
    label = rng.integers(0, 3, size=(1, 4, 4, 1))
    m = losses.seg_loss_map(T.Tensor(p), label)
    whole = losses.region_seg_loss(T.Tensor(p), label)
    assert m.data.mean() == pytest.approx(whole.item(), abs=1e-12)
    assert whole.item() == pytest.approx(oracles.region_loss_oracle(p, label, lambda v: 1.0), abs=1e-12)


def test_alpha_zero_ignores_noisy_region():
    rng = np.random.default_rng(2)
    label = rng.integers(0, 2, size=(1, 6, 6, 6))
    mask = np.zeros((6, 6, 6), dtype=np.uint8)
    mask[:3] = 1
    p = random_probs(rng, k=2, shape=(6, 6, 6))
    p[0, :, :3] = one_hot_probs(label, 2)[0, :, :3]  # perfect on the mask==1 region
    loss = losses.bcp_seg_loss(T.Tensor(p), label, mask, 0.0, "in")
    assert loss.item() <= 1e-6


def test_all_ones_mask_reduces_to_plain_seg_loss():
    rng = np.random.default_rng(3)
    p = T.Tensor(random_probs(rng, k=2))
    label = rng.integers(0, 2, size=(1, 4, 4, 4))
    ones = np.ones((4, 4, 4), dtype=np.uint8)
    assert losses.bcp_seg_loss(p, label, ones, 0.5, "in").item() == pytest.approx(
        losses.region_seg_loss(p, label).item(), abs=1e-12
    )


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([2, 4]), st.sampled_from(["in", "out"]), st.floats(0, 1))
def test_losses_match_voxel_loop_oracles(seed, k, direction, alpha):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, b=2, k=k, sharp=2.0)
    label = rng.integers(0, k, size=(2, 4, 4, 4))
    mask = (rng.random((4, 4, 4)) < 0.5).astype(np.uint8)
    gate = (rng.random((2, 4, 4, 4)) < 0.4).astype(np.uint8)
    pt = T.Tensor(p)
    assert losses.bcp_seg_loss(pt, label, mask, alpha, direction).item() == pytest.approx(
        oracles.bcp_seg_loss_oracle(p, label, mask, alpha, direction), abs=1e-9
    )
    assert losses.masked_mse_loss(pt, label, mask, gate, alpha, direction).item() == pytest.approx(
        oracles.mse_loss_oracle(p, label, mask, gate, alpha, direction), abs=1e-9
    )
    assert losses.masked_kl_uniform_loss(pt, mask, gate, alpha, direction, k).item() == pytest.approx(
        oracles.kl_loss_oracle(p, mask, gate, alpha, direction), abs=1e-9
    )


def test_mse_examples():
    rng = np.random.default_rng(4)
    p = T.Tensor(random_probs(rng))
    label = rng.integers(0, 2, size=(1, 4, 4, 4))
    mask = np.ones((4, 4, 4), dtype=np.uint8)
    assert losses.masked_mse_loss(p, label, mask, np.zeros((4, 4, 4)), 0.5, "in").item() == 0.0

    probs = np.zeros((1, 2, 2, 1, 1))
    probs[0, :, 0, 0, 0] = (0.9, 0.1)
    probs[0, :, 1, 0, 0] = (0.5, 0.5)
    label = np.zeros((1, 2, 1, 1), dtype=int)
    gate = np.array([1, 0]).reshape(2, 1, 1)
    se = losses.squared_error_map(T.Tensor(probs), label).data[0, 0, 0, 0]
    assert se == pytest.approx(0.02, abs=1e-15)
    m = np.ones((2, 1, 1), dtype=np.uint8)
    loss = losses.masked_mse_loss(T.Tensor(probs), label, m, gate, 0.5, "in").item()
    assert loss == pytest.approx(0.02 / (1 + losses.GATE_EPS), abs=1e-15)
    loss_alpha = losses.masked_mse_loss(T.Tensor(probs), label, m, gate, 0.5, "out").item()
    assert loss_alpha == pytest.approx(0.5 * 0.02 / (1 + losses.GATE_EPS), abs=1e-15)


def test_kl_examples():
    uniform = T.Tensor(np.full((1, 3, 2, 2, 2), 1 / 3))
    ones = np.ones((2, 2, 2), dtype=np.uint8)
    assert losses.masked_kl_uniform_loss(uniform, ones, ones, 0.5, "in").item() == pytest.approx(0.0, abs=1e-15)

    p = np.array([0.9, 0.1]).reshape(1, 2, 1, 1, 1)
    kl = losses.kl_uniform_map(T.Tensor(p)).data.item()
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert kl == pytest.approx(expected, abs=1e-12)
    assert kl == pytest.approx(0.5108, abs=1e-4)


def test_empty_differr_gives_zero_loss_and_zero_gradient():
    rng = np.random.default_rng(5)
    z = T.Tensor(rng.normal(size=(1, 2, 3, 3, 3)), requires_grad=True)
    probs = T.softmax(z, axis=1)
    empty = np.zeros((3, 3, 3), dtype=np.uint8)
    loss = losses.masked_kl_uniform_loss(probs, np.ones_like(empty), empty, 0.5, "in", 2)
    assert loss.item() == 0.0
    loss.backward()
    assert np.all(z.grad == 0.0)


def test_total_loss_examples():
    assert losses.total_loss(1, 1, 1, 1, 1, 1, 0.3, 0.1) == pytest.approx(2.8, abs=1e-12)
    assert losses.total_loss(0.7, 0.2, 5.0, 5.0, 9.0, 9.0, 0.0, 0.0) == pytest.approx(0.9, abs=1e-15)


def test_total_loss_gradient_suite():
    passed, failed, worst = oracles.suite_total_loss_gradients()
    assert failed == 0 and passed >= 100, worst


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([2, 3, 4]))
def test_kl_entropy_duality(seed, k):
    p = random_probs(np.random.default_rng(seed), k=k, shape=(3, 3, 3), sharp=3.0)
    kl = losses.kl_uniform_map(T.Tensor(p)).data
    direct = np.zeros(kl.shape)
    for idx in np.ndindex(kl.shape):
        b, rest = idx[0], idx[1:]
        direct[idx] = oracles.kl_uniform_oracle([p[(b, c) + rest] for c in range(k)])
    np.testing.assert_allclose(kl, direct, atol=1e-9)
    np.testing.assert_allclose(kl, -math.log(k) - np.log(p).mean(axis=1), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([2, 3, 4]), st.floats(1e-4, 1e-2))
def test_kl_step_raises_entropy_of_gated_voxel(seed, k, lr):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 1, 1, 1, 1))
    w0 = rng.normal(size=(k, 1, 1, 1, 1)) * 2.0
    ones = np.ones((1, 1, 1), dtype=np.uint8)

    def probs_of(w):
        return T.softmax(T.conv(T.Tensor(x), w), axis=1)

    w = T.Tensor(w0, requires_grad=True)
    p = probs_of(w)
    before = oracles.entropy_oracle(p.data.reshape(-1))
    losses.masked_kl_uniform_loss(p, ones, ones, 0.5, "in", k).backward()
    after = oracles.entropy_oracle(probs_of(T.Tensor(w0 - lr * w.grad)).data.reshape(-1))
    assert after > before


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["in", "out"]), st.floats(0.01, 0.5))
def test_seg_loss_non_increasing_in_correct_class_probability(seed, direction, step):
    rng = np.random.default_rng(seed)
    k = 3
    p = random_probs(rng, k=k, shape=(3, 3, 3))
    label = rng.integers(0, k, size=(1, 3, 3, 3))
    mask = (rng.random((3, 3, 3)) < 0.5).astype(np.uint8)
    v = tuple(int(i) for i in rng.integers(0, 3, size=3))
    t = int(label[(0,) + v])
    q = p.copy()
    col = q[(0, slice(None)) + v]
    new_t = col[t] + step * (1.0 - col[t])
    others = np.arange(k) != t
    col[others] *= (1.0 - new_t) / col[others].sum()
    col[t] = new_t
    q[(0, slice(None)) + v] = col
    before = losses.bcp_seg_loss(T.Tensor(p), label, mask, 0.5, direction).item()
    after = losses.bcp_seg_loss(T.Tensor(q), label, mask, 0.5, direction).item()
    assert after <= before + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([2, 4]))
def test_losses_are_nonnegative_and_finite(seed, k):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, k=k, sharp=5.0)
    p[0, 0, 0, 0, 0] = 0.0  # exercise the clamp
    p[0, :, 0, 0, 0] /= p[0, :, 0, 0, 0].sum()
    label = rng.integers(0, k, size=(1, 4, 4, 4))
    mask = (rng.random((4, 4, 4)) < 0.5).astype(np.uint8)
    gate = (rng.random((4, 4, 4)) < 0.5).astype(np.uint8)
    pt = T.Tensor(p)
    for value in (
        losses.bcp_seg_loss(pt, label, mask, 0.5, "in").item(),
        losses.masked_mse_loss(pt, label, mask, gate, 0.5, "out").item(),
        losses.masked_kl_uniform_loss(pt, mask, gate, 0.5, "in", k).item(),
    ):
        assert math.isfinite(value) and value >= -1e-12


def test_gated_losses_send_no_gradient_outside_the_gate():
    rng = np.random.default_rng(6)
    p = T.Tensor(random_probs(rng, k=3), requires_grad=True)
    label = rng.integers(0, 3, size=(1, 4, 4, 4))
    mask = (rng.random((4, 4, 4)) < 0.5).astype(np.uint8)
    gate = (rng.random((4, 4, 4)) < 0.3).astype(np.uint8)
    total = losses.masked_mse_loss(p, label, mask, gate, 0.5, "in") + losses.masked_kl_uniform_loss(
        p, mask, gate, 0.5, "out", 3
    )
    total.backward()
    outside = np.broadcast_to(gate == 0, p.shape[:1] + p.shape[2:])
    assert np.all(p.grad.transpose(1, 0, 2, 3, 4)[:, outside] == 0.0)
    assert np.any(p.grad.transpose(1, 0, 2, 3, 4)[:, ~outside] != 0.0)


def test_loss_suite_passes():
    passed, failed, worst = oracles.suite_losses()
    assert failed == 0 and passed >= 200, worst


def test_loss_weights_validation():
    assert losses.LossWeights() == losses.LossWeights(0.5, 0.3, 0.1)
    with pytest.raises(ValueError):
        losses.LossWeights(gamma=-1.0)
    np.testing.assert_allclose(losses.uniform_target(4), 0.25)

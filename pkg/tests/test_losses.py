import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _numeric import central_difference, relative_error
from dsner.losses import (
    PROB_FLOOR,
    LossWeights,
    SoftLabelMemory,
    combine_losses,
    entity_cl_loss,
    gce_sr_loss,
    mfl_loss,
    smoothed_target,
    soft_cross_entropy,
    update_memory,
)

LABELS = ["O", "LOC", "PER"]


def _random_distributions(rng, n, k):
    x = rng.random((n, k)) + 1e-3
    return x / x.sum(axis=1, keepdims=True)


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.eta, w.alpha, w.gamma, w.tau, w.q, w.p) == (0.9, 0.5, 2.0, 0.05, 0.3, 0.5)

    @pytest.mark.parametrize("kwargs", [{"eta": 1.5}, {"gamma": -1}, {"tau": 0}, {"q": 0}, {"p": 1.2}])
    def test_out_of_range(self, kwargs):
        with pytest.raises(ValueError):
            LossWeights(**kwargs).validate()


class TestSoftLabelMemory:
    def test_starts_as_identity(self):
        mem = SoftLabelMemory(LABELS)
        np.testing.assert_array_equal(mem.current, np.eye(3))

    def test_mean_of_correct_predictions(self):
        mem = SoftLabelMemory(["PER", "LOC", "O"], outside="O")
        update_memory(mem, [("PER", [0.8, 0.2, 0.0], True), ("PER", [0.6, 0.4, 0.0], True),
                            ("PER", [0.1, 0.9, 0.0], False)])
        np.testing.assert_allclose(mem.current[0], [0.7, 0.3, 0.0])

    def test_no_correct_predictions_carries_forward(self):
        mem = SoftLabelMemory(LABELS)
        mem.update([("PER", [0.2, 0.3, 0.5], True)])
        before = mem.current.copy()
        mem.update([("PER", [0.9, 0.05, 0.05], False)])
        np.testing.assert_array_equal(mem.current, before)
        assert len(mem.history) == 3

    def test_vectorised_update_matches(self):
        rng = np.random.default_rng(0)
        o = _random_distributions(rng, 50, 3)
        y = rng.integers(1, 3, size=50)
        a, b = SoftLabelMemory(LABELS), SoftLabelMemory(LABELS)
        a.update((int(yy), oo, int(oo.argmax()) == yy) for yy, oo in zip(y, o))
        b.update_arrays(y, o)
        np.testing.assert_allclose(a.current, b.current, atol=1e-12)

    def test_hard_label_limit(self):
        mem = SoftLabelMemory(LABELS, lam=1.0)
        mem.update([("PER", [0.2, 0.1, 0.7], True)])
        np.testing.assert_array_equal(smoothed_target(mem, "PER"), [0, 0, 1])

    def test_identity_memory(self):
        mem = SoftLabelMemory(LABELS, window=1, lam=0.8)
        np.testing.assert_array_equal(mem.smoothed_target("LOC", t=1), [0, 1, 0])

    def test_hand_arithmetic(self):
        mem = SoftLabelMemory(["PER", "LOC", "O"], window=1, lam=0.8)
        mem.update([("PER", [0.9, 0.1, 0.0], True)])
        np.testing.assert_allclose(mem.smoothed_target("PER", t=2), [0.98, 0.02, 0.0])

    def test_window_average(self):
        mem = SoftLabelMemory(LABELS, window=2, lam=0.5)
        mem.update([("PER", [0.0, 0.0, 1.0], True)])
        mem.update([("PER", [0.2, 0.0, 0.8], True)])
        # epoch 3 averages the matrices of epochs 1 and 2
        np.testing.assert_allclose(mem.smoothed_target("PER", t=3), 0.5 * np.array([0, 0, 1]) + 0.5 * np.array([0.1, 0, 0.9]))
        # epoch 2 sees only one earlier matrix
        np.testing.assert_allclose(mem.smoothed_target("PER", t=2), [0, 0, 1])

    def test_outside_label_rejected(self):
        with pytest.raises(ValueError):
            SoftLabelMemory(LABELS).smoothed_target("O")

    def test_future_epoch_rejected(self):
        with pytest.raises(ValueError):
            SoftLabelMemory(LABELS).targets(t=3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.floats(0, 1))
    def test_rows_stay_distributions(self, seed, window, lam):
        rng = np.random.default_rng(seed)
        mem = SoftLabelMemory(LABELS, window=window, lam=lam)
        for _ in range(6):
            o = _random_distributions(rng, 30, 3)
            mem.update_arrays(rng.integers(1, 3, size=30), o)
            np.testing.assert_allclose(mem.current.sum(axis=1), 1.0, atol=1e-6)
            np.testing.assert_allclose(mem.targets().sum(axis=1), 1.0, atol=1e-6)


class TestMFL:
    def test_reduces_to_cross_entropy(self):
        rng = np.random.default_rng(1)
        o = _random_distributions(rng, 100, 4)
        y = rng.integers(0, 4, size=100)
        target = np.eye(4)[y]
        got = mfl_loss(o, target, alpha=1.0, gamma=0.0).numpy()
        np.testing.assert_allclose(got, -np.log(o[np.arange(100), y]), atol=1e-6)

    def test_perfect_prediction(self):
        assert float(mfl_loss([[0.0, 1.0, 0.0]], [[0.0, 1.0, 0.0]], 0.5, 2.0)[0]) == 0.0

    def test_scalar_oracle(self):
        got = float(mfl_loss([[0.05, 0.9, 0.05]], [[0.0, 1.0, 0.0]], 0.5, 2.0)[0])
        np.testing.assert_allclose(got, 0.5 * 0.1**2 * -math.log(0.9), rtol=1e-12)
        np.testing.assert_allclose(got, 5.268e-4, rtol=1e-3)

    def test_zero_probability_is_finite(self):
        assert np.isfinite(float(mfl_loss([[1.0, 0.0]], [[0.5, 0.5]], 0.5, 0.0)[0]))
        np.testing.assert_allclose(float(mfl_loss([[1.0, 0.0]], [[0.0, 1.0]], 1.0, 0.0)[0]), -math.log(PROB_FLOOR))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.floats(0, 5))
    def test_monotone_in_true_class(self, p, dp, gamma):
        hi = mfl_loss([[p + dp, 1 - p - dp]], [[1.0, 0.0]], 0.5, gamma)
        lo = mfl_loss([[p, 1 - p]], [[1.0, 0.0]], 0.5, gamma)
        assert float(lo[0]) > float(hi[0]) >= 0.0


class TestContrastive:
    def test_lone_identical_pair(self):
        r = torch.tensor([[1.0, 2.0], [1.0, 2.0]])
        np.testing.assert_allclose(float(entity_cl_loss(r, [1, 1], tau=0.05)), 0.0, atol=1e-6)

    def test_orthonormal_single_class(self):
        got = float(entity_cl_loss(torch.eye(3), [2, 2, 2], tau=1.0))
        np.testing.assert_allclose(got, 3 * math.log(2), rtol=1e-6)

    def test_brute_force(self):
        rng = np.random.default_rng(3)
        for denominator in ("all", "different-label"):
            r = rng.normal(size=(7, 5))
            y = np.array([1, 1, 2, 2, 2, 3, 1])
            u = r / np.linalg.norm(r, axis=1, keepdims=True)
            sim = u @ u.T / 0.3
            total = 0.0
            for a in range(7):
                pos = [b for b in range(7) if b != a and y[b] == y[a]]
                den = [b for b in range(7) if b != a and (denominator == "all" or y[b] != y[a])]
                if not pos:
                    continue
                log_z = np.log(sum(np.exp(sim[a, b]) for b in den))
                total += np.mean([log_z - sim[a, b] for b in pos])
            got = float(entity_cl_loss(torch.tensor(r), y, tau=0.3, denominator=denominator))
            np.testing.assert_allclose(got, total, rtol=1e-10)

    def test_scale_invariance(self):
        r = torch.randn(6, 4, dtype=torch.float64)
        y = [1, 1, 2, 2, 3, 3]
        base = entity_cl_loss(r, y, 0.05)
        scaled = entity_cl_loss(r * torch.tensor([[0.1], [3.0], [7.0], [1.0], [0.5], [20.0]], dtype=torch.float64), y, 0.05)
        np.testing.assert_allclose(float(scaled), float(base), atol=1e-6)

    def test_permutation_invariance(self):
        r = torch.randn(6, 4, dtype=torch.float64)
        y = torch.tensor([1, 1, 2, 2, 3, 3])
        perm = torch.randperm(6)
        np.testing.assert_allclose(float(entity_cl_loss(r[perm], y[perm], 0.1)), float(entity_cl_loss(r, y, 0.1)))

    def test_no_positive_pairs(self):
        assert float(entity_cl_loss(torch.eye(3), [1, 2, 3], 0.05)) == 0.0

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            entity_cl_loss(torch.zeros(2, 3), [1, 1], 0.05)

    def test_unknown_denominator(self):
        with pytest.raises(ValueError):
            entity_cl_loss(torch.eye(2), [1, 1], 0.05, denominator="same")


class TestGceSr:
    def test_outside_onehot(self):
        np.testing.assert_allclose(float(gce_sr_loss([1.0, 0.0, 0.0], 0, 0.3, 0.5)), 1.0, atol=1e-5)

    def test_mae_form(self):
        o = torch.tensor([[0.7, 0.2, 0.1], [0.3, 0.3, 0.4]], dtype=torch.float64)
        got = gce_sr_loss(o, 0, q=1.0, p=0.5, sr_weight=0.0)
        np.testing.assert_array_equal(got.numpy(), 1.0 - o[:, 0].numpy())

    def test_log_limit(self):
        o_out = np.linspace(0.1, 0.99, 50)
        o = np.stack([o_out, 1 - o_out], axis=1)
        got = gce_sr_loss(o, 0, q=1e-4, p=0.5, sr_weight=0.0).numpy()
        np.testing.assert_allclose(got, -np.log(o_out), atol=1e-3)

    def test_scalar_oracle(self):
        got = float(gce_sr_loss([0.7, 0.2, 0.1], 0, 0.3, 0.5))
        expected = (1 - 0.7**0.3) / 0.3 + (math.sqrt(0.7) + math.sqrt(0.2) + math.sqrt(0.1))
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_zero_probability_clamped(self):
        assert np.isfinite(float(gce_sr_loss([0.0, 1.0], 0, 0.3, 0.5)))


class TestCombine:
    def test_hand_arithmetic(self):
        np.testing.assert_allclose(combine_losses(2.0, 4.0, 1.0, 0.5, eta=0.9), 3.7)

    def test_boundary_weights(self):
        assert combine_losses(2.0, 4.0, 0.0, 0.0, eta=1.0) == 2.0
        assert combine_losses(2.0, 4.0, 0.0, 0.0, eta=0.0) == 4.0

    def test_mix_weight(self):
        np.testing.assert_allclose(combine_losses(0.0, 0.0, 0.0, 0.5, eta=0.5, mix_weight=0.0), 0.0)

    def test_eta_range(self):
        with pytest.raises(ValueError):
            combine_losses(1.0, 1.0, 1.0, 1.0, eta=1.1)


class TestSoftCrossEntropy:
    def test_scalar_oracle(self):
        got = soft_cross_entropy(torch.log(torch.tensor([[0.5, 0.5, 1e-30]], dtype=torch.float64)),
                                 torch.tensor([[0.7, 0.3, 0.0]], dtype=torch.float64))
        np.testing.assert_allclose(float(got[0]), math.log(2), rtol=1e-9)


def _check(fn, x, points=5, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(points):
        x.data = torch.as_tensor(rng.uniform(0.05, 0.95, size=x.shape))
        if x.grad is not None:
            x.grad = None
        fn().backward()
        numeric = central_difference(fn, x, 1e-4)
        assert relative_error(x.grad.view(-1), numeric) < 1e-3


class TestGradients:
    def test_mfl(self):
        o = torch.zeros(4, 3, dtype=torch.float64, requires_grad=True)
        target = torch.tensor([[0.1, 0.8, 0.1], [0, 0, 1], [0.2, 0.0, 0.8], [0, 1, 0]], dtype=torch.float64)
        _check(lambda: mfl_loss(o, target, 0.5, 2.0).sum(), o)

    def test_gce_sr(self):
        o = torch.zeros(4, 3, dtype=torch.float64, requires_grad=True)
        _check(lambda: gce_sr_loss(o, 0, 0.3, 0.5).sum(), o)

    def test_contrastive(self):
        r = torch.zeros(6, 4, dtype=torch.float64, requires_grad=True)
        y = [1, 1, 2, 2, 2, 3]
        _check(lambda: entity_cl_loss(r, y, 0.05), r)

    def test_soft_cross_entropy(self):
        logits = torch.zeros(4, 3, dtype=torch.float64, requires_grad=True)
        target = torch.tensor([[0.7, 0.3, 0.0], [0.9, 0.0, 0.1], [0.5, 0.5, 0.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
        _check(lambda: soft_cross_entropy(logits, target).sum(), logits)

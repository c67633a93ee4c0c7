"""Margin-softmax objective and cosine scoring."""

import math

import numpy as np
import pytest

from stacksv import autodiff as ad
from stacksv.objectives import aam_softmax_loss, cosine_score


class TestCosine:
    def test_identical_vectors(self, rng):
        v = rng.standard_normal(16)
        assert cosine_score(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_vectors(self):
        assert cosine_score([1.0, 0.0], [0.0, 2.0]) == pytest.approx(0.0)

    def test_positive_scale_invariance(self, rng):
        a = rng.standard_normal(8)
        b = rng.standard_normal(8)
        assert cosine_score(3.0 * a, b) == pytest.approx(cosine_score(a, b),
                                                         abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            cosine_score(np.zeros(4), np.ones(4))


class TestMarginSoftmax:
    def softmax_ce(self, logits, labels):
        mx = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - mx).sum(axis=1)) + mx[:, 0]
        return float(np.mean(lse - logits[np.arange(len(labels)), labels]))

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_margin_reduces_to_scaled_softmax(self, seed):
        rng = np.random.default_rng(seed)
        B, R, S = 6, 12, 7
        emb = ad.Tensor(rng.standard_normal((B, R)))
        w = ad.Tensor(rng.standard_normal((S, R)))
        labels = rng.integers(0, S, B)
        loss = aam_softmax_loss(emb, labels, w, scale=30.0, margin=0.0)
        e = emb.data / np.linalg.norm(emb.data, axis=1, keepdims=True)
        wn = w.data / np.linalg.norm(w.data, axis=1, keepdims=True)
        logits = 30.0 * np.clip(e @ wn.T, -1 + 1e-7, 1 - 1e-7)
        assert abs(float(loss.data) - self.softmax_ce(logits, labels)) < 1e-10

    def test_single_trial_closed_form(self):
        # one sample aligned with class 0, orthogonal to class 1:
        # loss = -log(e^{s cos(0 + m)} / (e^{s cos m} + e^{0}))
        emb = ad.Tensor(np.array([[1.0, 0.0]]))
        w = ad.Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        loss = aam_softmax_loss(emb, np.array([0]), w, scale=30.0, margin=0.2)
        # the implementation clamps cos into [-1+1e-7, 1-1e-7] before the
        # angle shift; fold the same clamp into the hand evaluation
        c = 1.0 - 1e-7
        phi = c * math.cos(0.2) - math.sqrt(1 - c * c) * math.sin(0.2)
        expected = -math.log(math.exp(30 * phi)
                             / (math.exp(30 * phi) + math.exp(0.0)))
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)
        # and the clamp-free ideal value is indistinguishable at 1e-9
        ideal = -math.log(math.exp(30 * math.cos(0.2))
                          / (math.exp(30 * math.cos(0.2)) + 1.0))
        assert float(loss.data) == pytest.approx(ideal, abs=1e-9)

    def test_label_out_of_range_rejected(self, rng):
        emb = ad.Tensor(rng.standard_normal((2, 4)))
        w = ad.Tensor(rng.standard_normal((3, 4)))
        with pytest.raises(ValueError, match="label out of range"):
            aam_softmax_loss(emb, np.array([0, 3]), w)
        with pytest.raises(ValueError, match="label"):
            aam_softmax_loss(emb, np.array([[0], [1]]), w)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        ps = ad.ParamStore()
        emb = ps.register("emb", rng.standard_normal((4, 8)))
        w = ps.register("w", rng.standard_normal((5, 8)))
        labels = rng.integers(0, 5, 4)
        err = ad.grad_check(lambda: aam_softmax_loss(emb, labels, w), ps,
                            eps=1e-5)
        assert err < 1e-4

    def test_margin_raises_target_loss(self, rng):
        emb = ad.Tensor(rng.standard_normal((8, 16)))
        w = ad.Tensor(rng.standard_normal((4, 16)))
        labels = rng.integers(0, 4, 8)
        plain = float(aam_softmax_loss(emb, labels, w, margin=0.0).data)
        margined = float(aam_softmax_loss(emb, labels, w, margin=0.2).data)
        assert margined > plain

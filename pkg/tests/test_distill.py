"""Training loop and distillation losses."""

import numpy as np
import pytest

import edgeai.tensor as T
from edgeai.data import ShapesConfig, gen_shapes
from edgeai.distill import (KdHyper, TrainHyper, at_loss, evaluate, kd_loss,
                            train_kd, train_supervised)
from edgeai.tensor import Tape, Tensor
from edgeai.zoo import build_model, conv_trunk_spec


@pytest.fixture(scope="module")
def tiny_ds():
    return gen_shapes(ShapesConfig(num_classes=3, image_size=16, per_class=30,
                                   noise=0.03, seed=5, class_offset=5))


@pytest.fixture(scope="module")
def tiny_spec():
    return conv_trunk_spec([8, 16], [2, 2], 3, (3, 16, 16))


def _softmax(z, tau=1.0):
    z = np.asarray(z, dtype=np.float64) / tau
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestKdLoss:
    def test_zero_when_distributions_match(self):
        s = Tensor([[1.0, -2.0, 0.5]], requires_grad=True, dtype=np.float64)
        loss = kd_loss(s, np.array([[1.0, -2.0, 0.5]]), [0], KdHyper(alpha=1.0))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_alpha_zero_reduces_to_cross_entropy(self):
        logits = np.array([[0.3, -1.2], [2.0, 0.1]])
        s = Tensor(logits, dtype=np.float64)
        loss = kd_loss(s, np.zeros((2, 2)), [0, 1], KdHyper(alpha=0.0))
        ce = T.softmax_cross_entropy(Tensor(logits, dtype=np.float64), [0, 1])
        assert loss.item() == pytest.approx(ce.item(), rel=1e-12)

    def test_closed_form_value(self):
        # teacher [2,0], student [0,0], tau=1, alpha=1:
        # p_t = softmax([2,0]); KL(p_t || uniform) computed in closed form
        p_t = _softmax([2.0, 0.0])
        expected = float((p_t * (np.log(p_t) - np.log([0.5, 0.5]))).sum())
        s = Tensor([[0.0, 0.0]], dtype=np.float64)
        loss = kd_loss(s, np.array([[2.0, 0.0]]), [0], KdHyper(temperature=1.0, alpha=1.0))
        assert loss.item() == pytest.approx(expected, rel=1e-10)

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = Tensor(rng.standard_normal((4, 5)), dtype=np.float64)
            t = rng.standard_normal((4, 5))
            labels = rng.integers(0, 5, 4)
            h = KdHyper(temperature=rng.uniform(0.5, 8), alpha=rng.uniform(0, 1))
            assert kd_loss(s, t, labels, h).item() >= -1e-12

    def test_invalid_temperature(self):
        with pytest.raises(ValueError, match="temperature"):
            kd_loss(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), [0], KdHyper(temperature=0))

    def test_gradient_vs_finite_differences(self):
        from tests.test_tensor import finite_difference_grad

        rng = np.random.default_rng(1)
        s0 = rng.standard_normal((3, 4))
        t = rng.standard_normal((3, 4))
        labels = rng.integers(0, 4, 3)
        h = KdHyper(temperature=3.0, alpha=0.7)
        s = Tensor(s0, requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = kd_loss(s, t, labels, h)
            T.backward(tape, loss)
        fd = finite_difference_grad(
            lambda a: kd_loss(Tensor(a, dtype=np.float64), t, labels, h).item(), s0.copy())
        assert np.abs(s.grad - fd).max() / max(np.abs(fd).max(), 1e-8) < 1e-4


class TestAtLoss:
    def test_identical_maps_zero(self):
        m = np.random.default_rng(0).random((2, 4, 3, 3))
        assert at_loss(m, Tensor(m.copy(), dtype=np.float64)).item() == 0.0

    def test_sign_invariance(self):
        m = np.random.default_rng(1).standard_normal((2, 4, 3, 3))
        assert at_loss(m, Tensor(-m, dtype=np.float64)).item() == pytest.approx(0.0, abs=1e-12)

    def test_channel_permutation_invariance(self):
        rng = np.random.default_rng(2)
        t = rng.standard_normal((2, 5, 4, 4))
        s = rng.standard_normal((2, 3, 4, 4))
        base = at_loss(t, Tensor(s, dtype=np.float64)).item()
        perm = at_loss(t[:, rng.permutation(5)], Tensor(s[:, [2, 0, 1]], dtype=np.float64)).item()
        assert perm == pytest.approx(base, rel=1e-10)

    def test_orthogonal_attention_hand_value(self):
        # teacher attention concentrated on pixel 0, student on pixel 1:
        # normalized maps are e0 and e1, distance sqrt(2)
        t = np.zeros((1, 1, 1, 2))
        t[0, 0, 0, 0] = 3.0
        s = np.zeros((1, 1, 1, 2))
        s[0, 0, 0, 1] = 7.0
        val = at_loss(t, Tensor(s, dtype=np.float64)).item()
        assert val == pytest.approx(np.sqrt(2.0), rel=1e-12)

    def test_all_zero_maps_defined(self):
        z = np.zeros((2, 3, 4, 4))
        assert at_loss(z, Tensor(z.copy(), dtype=np.float64)).item() == 0.0

    def test_gradient_vs_finite_differences(self):
        from tests.test_tensor import finite_difference_grad

        rng = np.random.default_rng(3)
        t = rng.standard_normal((2, 3, 3, 3))
        s0 = rng.standard_normal((2, 2, 3, 3))
        s = Tensor(s0, requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = at_loss(t, s)
            T.backward(tape, loss)
        fd = finite_difference_grad(
            lambda a: at_loss(t, Tensor(a, dtype=np.float64)).item(), s0.copy())
        assert np.abs(s.grad - fd).max() / max(np.abs(fd).max(), 1e-8) < 1e-4


class TestTrainSupervised:
    def test_lr_zero_keeps_params(self, tiny_ds, tiny_spec):
        m = build_model(tiny_spec, seed=0)
        before = m.param_hash()
        acc0 = evaluate(m, tiny_ds)
        m, hist = train_supervised(m, tiny_ds, TrainHyper(epochs=2, batch_size=16, lr=0.0,
                                                          momentum=0.0, weight_decay=0.0, seed=0))
        assert m.param_hash() == before
        assert evaluate(m, tiny_ds) == acc0

    def test_same_seed_identical_history(self, tiny_ds, tiny_spec):
        h = TrainHyper(epochs=2, batch_size=16, lr=0.05, seed=7)
        _, hist1 = train_supervised(build_model(tiny_spec, seed=1), tiny_ds, h)
        _, hist2 = train_supervised(build_model(tiny_spec, seed=1), tiny_ds, h)
        assert hist1 == hist2

    def test_learns_above_chance(self, tiny_ds, tiny_spec):
        m = build_model(tiny_spec, seed=2)
        m, hist = train_supervised(m, tiny_ds, TrainHyper(epochs=10, batch_size=16,
                                                          lr=0.05, seed=0))
        assert hist[-1]["accuracy"] > 0.6


class TestTrainKd:
    def test_unlabeled_mode_runs_and_beta_at(self, tiny_ds, tiny_spec):
        teacher = build_model(tiny_spec, seed=0)
        student = build_model(conv_trunk_spec([4, 8], [2, 2], 3, (3, 16, 16)), seed=1)
        res = train_kd(teacher, student, tiny_ds,
                       TrainHyper(epochs=1, batch_size=16, lr=0.01, seed=0),
                       KdHyper(alpha=0.5, beta=10.0), labeled=False)
        assert len(res.history) == 1

    def test_teacher_frozen(self, tiny_ds, tiny_spec):
        teacher = build_model(tiny_spec, seed=0)
        before = teacher.param_hash()
        student = build_model(tiny_spec, seed=1)
        train_kd(teacher, student, tiny_ds,
                 TrainHyper(epochs=1, batch_size=16, lr=0.05, seed=0), KdHyper())
        assert teacher.param_hash() == before

    def test_beta0_alpha0_matches_supervised(self, tiny_ds, tiny_spec):
        h = TrainHyper(epochs=2, batch_size=16, lr=0.05, seed=3)
        teacher = build_model(tiny_spec, seed=9)
        sup, hist_sup = train_supervised(build_model(tiny_spec, seed=4), tiny_ds, h)
        res = train_kd(teacher, build_model(tiny_spec, seed=4), tiny_ds, h,
                       KdHyper(alpha=0.0, beta=0.0))
        accs_kd = [r["accuracy"] for r in res.history]
        accs_sup = [r["accuracy"] for r in hist_sup]
        assert accs_kd == accs_sup
        assert sup.param_hash() == res.student.param_hash()

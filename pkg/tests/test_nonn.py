"""Network-of-networks student: construction, training, isolation."""

import numpy as np
import pytest

from edgeai.data import ShapesConfig, gen_shapes
from edgeai.distill import KdHyper, TrainHyper
from edgeai.fan import balance_partitions, build_fan, detect_communities
from edgeai.nonn import (BudgetError, NoNNHyper, NoNNModel, TrunkTemplate,
                         build_nonn, check_trunk_isolation, evaluate_nonn,
                         infer_nonn, train_nonn)
from edgeai.zoo import build_model, conv_trunk_spec


@pytest.fixture(scope="module")
def setup():
    ds = gen_shapes(ShapesConfig(num_classes=3, image_size=16, per_class=40,
                                 noise=0.03, seed=6, class_offset=5))
    teacher = build_model(conv_trunk_spec([8, 12], [2, 2], 3, (3, 16, 16)), seed=3)
    g = build_fan(teacher, ds)
    part = balance_partitions(g, detect_communities(g, seed=0), k_devices=2,
                              budget_filters=len(g.nodes))
    return ds, teacher, g, part


@pytest.fixture(scope="module")
def nonn(setup):
    _, teacher, _, part = setup
    return build_nonn(teacher, part,
                      NoNNHyper(TrunkTemplate((8,), (2,), final_stride=2)), seed=0)


class TestBuild:
    def test_one_trunk_per_group_with_matching_width(self, setup, nonn):
        _, _, _, part = setup
        assert nonn.k == len(part.communities)
        for s, comm in enumerate(part.communities):
            _, feats = infer_nonn(nonn, np.zeros((1, 3, 16, 16), dtype=np.float32))
            assert feats[s].shape == (1, len(comm))

    def test_logits_shape(self, nonn):
        logits, _ = infer_nonn(nonn, np.zeros((2, 3, 16, 16), dtype=np.float32))
        assert logits.shape == (2, 3)

    def test_budget_enforced(self, setup):
        _, teacher, _, part = setup
        with pytest.raises(BudgetError):
            build_nonn(teacher, part, NoNNHyper(budget_params=10), seed=0)

    def test_trunk_param_count_excludes_dense_stub(self, nonn):
        for s in range(nonn.k):
            full = nonn.trunks[s].num_params()
            counted = nonn.trunk_param_count(s)
            width = nonn.feature_widths[s]
            stub = width * 3 + 3  # dense stub weight + bias
            assert counted == full - stub

    def test_invalid_gamma(self):
        with pytest.raises(ValueError):
            NoNNHyper(gamma=-1).validate()


class TestForward:
    def test_trunk_order_invariant(self, nonn):
        x = np.random.default_rng(0).random((4, 3, 16, 16)).astype(np.float32)
        a, _ = infer_nonn(nonn, x, trunk_order=list(range(nonn.k)))
        b, _ = infer_nonn(nonn, x, trunk_order=list(range(nonn.k))[::-1])
        assert np.array_equal(a, b)

    def test_zero_out_one_trunk_changes_only_its_features(self, setup):
        _, teacher, _, part = setup
        m = build_nonn(teacher, part, NoNNHyper(TrunkTemplate((8,), (2,))), seed=1)
        x = np.random.default_rng(1).random((2, 3, 16, 16)).astype(np.float32)
        _, feats_before = infer_nonn(m, x)
        for p in m.trunk_params(0):
            p.data = np.zeros_like(p.data)
        _, feats_after = infer_nonn(m, x)
        assert not np.array_equal(feats_before[0], feats_after[0])
        for s in range(1, m.k):
            assert np.array_equal(feats_before[s], feats_after[s])


class TestIsolation:
    def test_isolation_holds(self, nonn):
        assert check_trunk_isolation(nonn) is True

    def test_cross_wiring_detected(self, setup):
        # a "student" whose head reads a hidden tensor from trunk 0 as well as
        # the concatenated features must fail the structural check
        _, teacher, _, part = setup
        m = build_nonn(teacher, part, NoNNHyper(TrunkTemplate((8,), (2,))), seed=2)

        class Wired(NoNNModel):
            def forward(self, batch, trunk_order=None):
                import edgeai.tensor as T
                from edgeai.nonn import _trunk_forward
                from edgeai.tensor import Tensor
                if not isinstance(batch, Tensor):
                    batch = Tensor(batch)
                recs = [_trunk_forward(t, batch) for t in self.trunks]
                feats = [r[1] for r in recs]
                leak = T.tsum(recs[0][0], axis=(2, 3))  # trunk-0 map leaks in
                joint = T.concat([feats[0] + leak * 0.01] + feats[1:], axis=1)
                logits = T.dense(joint, self.head_w, self.head_b)
                return logits, feats, [r[0] for r in recs]

        wired = Wired(m.trunks, m.head_w, m.head_b, m.partition)
        assert check_trunk_isolation(wired) is False


class TestTrain:
    def test_joint_training_improves_on_teacher_signal(self, setup):
        ds, teacher, _, part = setup
        m = build_nonn(teacher, part, NoNNHyper(TrunkTemplate((8,), (2,))), seed=4)
        acc0 = evaluate_nonn(m, ds)
        m, hist = train_nonn(teacher, m, ds,
                             TrainHyper(epochs=3, batch_size=20, lr=0.05, seed=0),
                             KdHyper(alpha=0.5), gamma=10.0)
        assert hist[-1]["accuracy"] >= acc0 - 0.05
        assert len(hist) == 3

    def test_teacher_untouched_by_training(self, setup):
        ds, teacher, _, part = setup
        before = teacher.param_hash()
        m = build_nonn(teacher, part, NoNNHyper(TrunkTemplate((8,), (2,))), seed=5)
        train_nonn(teacher, m, ds, TrainHyper(epochs=1, batch_size=20, lr=0.05, seed=0),
                   KdHyper(), gamma=1.0)
        assert teacher.param_hash() == before

    def test_deterministic_per_seed(self, setup):
        ds, teacher, _, part = setup
        outs = []
        for _ in range(2):
            m = build_nonn(teacher, part, NoNNHyper(TrunkTemplate((8,), (2,))), seed=6)
            m, hist = train_nonn(teacher, m, ds,
                                 TrainHyper(epochs=1, batch_size=20, lr=0.05, seed=1),
                                 KdHyper(), gamma=1.0)
            outs.append(hist)
        assert outs[0] == outs[1]


class TestSerialization:
    def test_save_load_round_trip(self, setup, nonn, tmp_path):
        nonn.save(tmp_path / "nonn")
        back = NoNNModel.load(tmp_path / "nonn")
        x = np.random.default_rng(2).random((3, 3, 16, 16)).astype(np.float32)
        a, _ = infer_nonn(nonn, x)
        b, _ = infer_nonn(back, x)
        assert np.array_equal(a, b)
        assert back.feature_widths == nonn.feature_widths

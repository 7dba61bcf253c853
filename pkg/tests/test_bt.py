import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffpref import bt_baseline as bt
from diffpref.prefdata import LabeledPrefDataset, PreferencePair, Segment
from diffpref.tensor_core import Rng, init_mlp, tree_flatten, value_and_grad

from oracles import central_fd, max_rel_err


def net(seed=0, d=3, hidden=(8,)):
    return bt.BtRewardNet(init_mlp(d, hidden, 1, Rng(seed)), np.zeros(d), np.ones(d), d - 1, 1)


def const_net(value, d=3):
    """Reward net that outputs ``value`` on every step."""
    n = net(d=d, hidden=())
    n.mlp.weights = [np.zeros((d, 1))]
    n.mlp.biases = [np.array([value])]
    return n


def linear_net(w, d=3):
    n = net(d=d, hidden=())
    n.mlp.weights = [np.asarray(w, float).reshape(d, 1)]
    n.mlp.biases = [np.zeros(1)]
    return n


def rand_seg(seed, H=4, tid=0):
    r = Rng(seed)
    return Segment(tid, 0, r.normal((H, 2)), r.normal((H, 1)))


class TestBtProb:
    def test_equal_returns(self):
        assert bt.bt_prob(const_net(0.7), rand_seg(0), rand_seg(1)) == 0.5

    def test_unit_return_gap(self):
        # reward = first state coordinate; returns 1 and 0
        a = Segment(0, 0, np.array([[1.0, 0.0]]), np.zeros((1, 1)))
        b = Segment(1, 0, np.array([[0.0, 0.0]]), np.zeros((1, 1)))
        p = bt.bt_prob(linear_net([1.0, 0.0, 0.0]), a, b)
        assert p == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)
        assert p == pytest.approx(0.7311, abs=1e-4)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 1000), st.integers(1, 6))
    def test_antisymmetric(self, seed, H):
        n = net(seed % 5)
        a, b = rand_seg(seed, H), rand_seg(seed + 1, H)
        assert bt.bt_prob(n, a, b) + bt.bt_prob(n, b, a) == pytest.approx(1.0, abs=1e-15)

    def test_no_overflow_on_huge_returns(self):
        a = Segment(0, 0, np.full((5, 2), 1e3), np.zeros((5, 1)))
        b = Segment(1, 0, np.full((5, 2), -1e3), np.zeros((5, 1)))
        p = bt.bt_prob(linear_net([1.0, 1.0, 0.0]), a, b)
        assert p == 1.0 or 0.0 < p <= 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 1000), st.floats(-50, 50))
    def test_shift_invariance(self, seed, kappa):
        n = net(seed % 5)
        a, b = rand_seg(seed), rand_seg(seed + 7)
        p = bt.bt_prob(n, a, b)
        n.mlp.biases[-1] = n.mlp.biases[-1] + kappa
        assert abs(bt.bt_prob(n, a, b) - p) < 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bt.bt_prob(net(), rand_seg(0, 3), rand_seg(1, 4))


class TestBtLoss:
    def test_preferred_half_probability(self):
        pair = PreferencePair(rand_seg(0), rand_seg(1), 1.0)
        assert float(bt.bt_loss(const_net(0.3), [pair])) == pytest.approx(math.log(2), abs=1e-15)

    def test_tie_half_probability(self):
        pair = PreferencePair(rand_seg(0), rand_seg(1), 0.5)
        assert float(bt.bt_loss(const_net(-1.0), [pair])) == pytest.approx(math.log(2), abs=1e-15)

    def test_tie_weights_both_terms(self):
        a = Segment(0, 0, np.array([[1.0, 0.0]]), np.zeros((1, 1)))
        b = Segment(1, 0, np.array([[0.0, 0.0]]), np.zeros((1, 1)))
        n = linear_net([2.0, 0.0, 0.0])
        s = 1 / (1 + math.exp(-2.0))
        want = -(0.5 * math.log(s) + 0.5 * math.log(1 - s))
        assert float(bt.bt_loss(n, [PreferencePair(a, b, 0.5)])) == pytest.approx(want, abs=1e-14)

    def test_clamped_at_p_min(self):
        a = Segment(0, 0, np.full((1, 2), 100.0), np.zeros((1, 1)))
        b = Segment(1, 0, np.zeros((1, 2)), np.zeros((1, 1)))
        loss = float(bt.bt_loss(linear_net([1.0, 0.0, 0.0]), [PreferencePair(a, b, 1.0)]))
        assert loss == pytest.approx(-math.log(bt.P_MIN), rel=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="empty"):
            bt.bt_loss(net(), [])

    def test_gradient_matches_finite_differences(self):
        n = net(3, hidden=(8, 8))
        pairs = [PreferencePair(rand_seg(i), rand_seg(i + 50), y) for i, y in enumerate([1.0, 0.0, 0.5, 1.0])]
        _, g = value_and_grad(lambda m: bt.bt_loss(n, pairs, mlp=m), n.mlp)
        leaves = tree_flatten(n.mlp)[0]
        num = central_fd(lambda: float(bt.bt_loss(n, pairs)), leaves)
        assert max_rel_err(tree_flatten(g)[0], num) < 1e-4


def separable_pairs(n=60, H=5, seed=0):
    r = Rng(seed)
    pairs = []
    for i in range(n):
        good = Segment(2 * i, 0, r.normal((H, 2), 1.0, 0.3), r.normal((H, 1), 1.0, 0.3))
        bad = Segment(2 * i + 1, 0, r.normal((H, 2), -1.0, 0.3), r.normal((H, 1), -1.0, 0.3))
        pairs.append(PreferencePair(bad, good, 1.0))
    return LabeledPrefDataset(pairs, H)


class TestTrainBt:
    def cfg(self, **kw):
        base = dict(hidden=(16, 16), batch_size=16, epochs=5, lr=3e-3)
        base.update(kw)
        return bt.BtTrainConfig(**base)

    def test_smoke(self):
        m = bt.train_bt(separable_pairs(4), self.cfg(), Rng(0))
        assert len(m.loss_curve) == 5 and np.isfinite(m.loss_curve[-1])

    def test_separable_accuracy(self):
        data = separable_pairs(80)
        m = bt.train_bt(data, self.cfg(epochs=40), Rng(1))
        assert bt.pair_accuracy(m, data) >= 0.95

    def test_accepts_raw_labeled_pairs(self):
        pairs = [PreferencePair(rand_seg(i), rand_seg(i + 9), y) for i, y in enumerate([0.0, 0.5, 1.0])]
        m = bt.train_bt(pairs, self.cfg(epochs=2), Rng(0))
        assert np.isfinite(m.loss_curve).all()

    def test_determinism(self):
        a = bt.train_bt(separable_pairs(10), self.cfg(), Rng(4))
        b = bt.train_bt(separable_pairs(10), self.cfg(), Rng(4))
        for x, y in zip(tree_flatten(a.mlp)[0], tree_flatten(b.mlp)[0]):
            assert x.tobytes() == y.tobytes()

    def test_divergence_aborts(self, monkeypatch):
        from diffpref.tensor_core import autodiff as ad

        monkeypatch.setattr(bt, "_bt_loss_arrays", lambda *a, **k: ad.mul(ad.sum_(a[1].biases[0]), float("nan")))
        with pytest.raises(bt.TrainingDiverged, match="epoch 0"):
            bt.train_bt(separable_pairs(4), self.cfg(), Rng(0))

    def test_checkpoint_round_trip(self, tmp_path):
        m = bt.train_bt(separable_pairs(4), self.cfg(epochs=2), Rng(0))
        bt.save_bt(tmp_path / "bt.npz", m)
        back = bt.load_bt(tmp_path / "bt.npz")
        sa = Rng(2).normal((6, 3))
        assert m.rewards(sa[:, :2], sa[:, 2:]).tobytes() == back.rewards(sa[:, :2], sa[:, 2:]).tobytes()

    def test_load_rejects_diffusion_checkpoint(self, tmp_path):
        from diffpref.tensor_core import save_checkpoint

        save_checkpoint(tmp_path / "x.npz", {}, {"kind": "dpr"})
        with pytest.raises(ValueError, match="Bradley-Terry"):
            bt.load_bt(tmp_path / "x.npz")

    def test_annotate_uses_step_reward(self):
        from diffpref.diffusion_reward import annotate_dataset
        from diffpref.prefdata import Trajectory, UnlabeledDataset

        n = linear_net([1.0, -1.0, 0.5])
        s = Rng(0).normal((4, 2))
        a = Rng(1).normal((4, 1))
        ds = UnlabeledDataset([Trajectory(0, s, a, s, np.zeros(4, bool))], 2, 1)
        out = annotate_dataset(n, ds, Rng(0))
        np.testing.assert_allclose(out.trajectories[0].rewards, s[:, 0] - s[:, 1] + 0.5 * a[:, 0], rtol=1e-14)

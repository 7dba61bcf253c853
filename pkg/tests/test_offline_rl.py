import numpy as np
import pytest

from diffpref import offline_rl as orl
from diffpref.diffusion_reward import TrainingDiverged
from diffpref.envs import PointMassEnv, ScoreAnchors, estimate_anchors, generate_offline_dataset
from diffpref.tensor_core import Rng, init_mlp, tree_flatten, value_and_grad
from diffpref.tensor_core import autodiff as ad


@pytest.fixture(scope="module")
def env():
    return PointMassEnv()


@pytest.fixture(scope="module")
def anchors(env):
    return estimate_anchors(env, Rng(0))


def labeled(env, quality, n, seed=1):
    ds, tr = generate_offline_dataset(env, quality, n, Rng(seed))
    return ds.with_rewards([tr[t.id] for t in ds.trajectories])


def small_cfg(algo="td3bc", **kw):
    base = dict(algo=algo, steps=500, batch_size=64, hidden=(32, 32), eval_interval=0, log_interval=100)
    base.update(kw)
    return orl.RlConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = orl.RlConfig()
        assert (c.alpha, c.gamma, c.batch_size, c.lr, c.polyak) == (2.5, 0.99, 256, 3e-4, 0.005)
        assert (c.expectile, c.beta_awr, c.w_max, c.steps) == (0.7, 3.0, 100.0, 50_000)

    @pytest.mark.parametrize("gamma", [0.0, -0.1, 1.5])
    def test_gamma_range(self, gamma):
        with pytest.raises(ValueError, match="gamma"):
            orl.RlConfig(gamma=gamma)

    def test_gamma_one_allowed(self):
        orl.RlConfig(gamma=1.0)

    @pytest.mark.parametrize("tau", [0.5, 1.0, 0.3])
    def test_iql_expectile_range(self, tau):
        with pytest.raises(ValueError, match="expectile"):
            orl.RlConfig(algo="iql", expectile=tau)

    def test_beta_positive(self):
        with pytest.raises(ValueError, match="beta"):
            orl.RlConfig(beta_awr=0.0)

    def test_unknown_algo(self, env):
        with pytest.raises(ValueError, match="td3bc"):
            orl.train_policy(labeled(env, "expert", 2), orl.RlConfig(algo="cql", steps=1))


class TestPieces:
    def test_polyak_matches_scalar_loop(self):
        rho, n = 0.005, 300
        target = {"w": np.array([0.0])}
        online = {"w": np.array([1.0])}
        t = 0.0
        for _ in range(n):
            target = orl.polyak_update(target, online, rho)
            t = (1.0 - rho) * t + rho * 1.0
        assert target["w"][0] == t
        assert target["w"][0] == pytest.approx(1 - (1 - rho) ** n, rel=1e-12)

    def test_polyak_on_mlp_tree(self):
        a, b = init_mlp(3, (4,), 1, Rng(0)), init_mlp(3, (4,), 1, Rng(1))
        mid = orl.polyak_update(a, b, 0.5)
        for x, y, m in zip(tree_flatten(a)[0], tree_flatten(b)[0], tree_flatten(mid)[0]):
            np.testing.assert_array_equal(m, 0.5 * x + 0.5 * y)

    def test_expectile_half_is_half_mse(self):
        u = np.array([-2.0, -0.5, 0.0, 0.25, 3.0])
        assert float(orl.expectile_loss(u, 0.5)) == 0.5 * float(np.mean(u ** 2))

    def test_expectile_weights(self):
        u = np.array([-1.0, 2.0])
        want = (0.3 * 1.0 + 0.7 * 4.0) / 2
        assert float(orl.expectile_loss(u, 0.7)) == pytest.approx(want, abs=1e-15)

    def test_lambda_normalization(self):
        for seed in range(20):
            q = Rng(seed).normal(50) * 10 ** (seed % 6 - 2)
            lam = orl.td3bc_lambda(q, 2.5)
            prod = lam * float(np.abs(q).mean())
            assert abs(prod - 2.5) <= np.spacing(2.5)

    def test_actor_gradient_invariant_to_critic_scale(self):
        # scaling Q by c > 0 rescales mean|Q| by c, so lambda * Q is unchanged
        r = Rng(0)
        s, a = r.normal((32, 4)), r.uniform(-1, 1, (32, 2))
        critic = init_mlp(6, (16,), 1, r.child(1))
        actor = orl.Actor(init_mlp(4, (16,), 2, r.child(2)), np.zeros(4), np.ones(4), -np.ones(2), np.ones(2))

        def grad_for(q_params):
            def loss(mlp):
                pi = actor.forward(s, mlp)
                q = orl._q(q_params, s, pi)
                lam = orl.td3bc_lambda(q, 2.5)
                return ad.add(ad.mul(-lam, ad.mean(q)), ad.mean(ad.square(ad.sub(pi, a))))
            return np.concatenate([g.ravel() for g in tree_flatten(value_and_grad(loss, actor.mlp)[1])[0]])

        scaled = orl.tree_map(lambda x: x, critic)
        scaled.weights[-1] = critic.weights[-1] * 37.0
        scaled.biases[-1] = critic.biases[-1] * 37.0
        g0, g1 = grad_for(critic), grad_for(scaled)
        np.testing.assert_allclose(g1, g0, rtol=1e-9, atol=1e-12)

    def test_actor_outputs_within_bounds(self):
        low, high = np.array([-1.0, -0.5]), np.array([1.0, 2.0])
        actor = orl.Actor(init_mlp(4, (16,), 2, Rng(3)), np.zeros(4), np.full(4, 1e-3), low, high)
        for scale in (1e-3, 1.0, 1e3, 1e8):
            out = actor(Rng(4).normal((500, 4)) * scale)
            assert (out >= low).all() and (out <= high).all()


class TestTd3bc:
    def test_smoke(self, env):
        actor = orl.train_td3bc(labeled(env, "medium", 10), small_cfg(), rng=Rng(0))
        assert len(actor.metrics) == 5
        for m in actor.metrics:
            assert np.isfinite(m["critic_loss"]) and np.isfinite(m["actor_loss"])

    def test_needs_rewards(self, env):
        ds, _ = generate_offline_dataset(env, "expert", 2, Rng(0))
        with pytest.raises(ValueError, match="annotate"):
            orl.train_td3bc(ds, small_cfg(steps=1))

    def test_seed_determinism(self, env, anchors):
        ds = labeled(env, "mixed", 6)
        cfg = small_cfg(steps=200, eval_interval=100, eval_episodes=3)
        a = orl.train_td3bc(ds, cfg, env, anchors, Rng(5))
        b = orl.train_td3bc(ds, cfg, env, anchors, Rng(5))
        assert repr(a.metrics) == repr(b.metrics)
        ra = orl.evaluate_policy(a, env, anchors, 10, Rng(1))
        rb = orl.evaluate_policy(b, env, anchors, 10, Rng(1))
        assert ra.scores.tobytes() == rb.scores.tobytes()

    def test_nan_aborts_with_step(self, env, monkeypatch):
        monkeypatch.setattr(orl, "td3bc_lambda", lambda q, alpha: float("nan"))
        with pytest.raises(TrainingDiverged, match="step 2"):
            orl.train_td3bc(labeled(env, "expert", 2), small_cfg(steps=10), rng=Rng(0))

    def test_eval_scores_logged(self, env, anchors):
        cfg = small_cfg(steps=200, log_interval=50, eval_interval=100, eval_episodes=2)
        actor = orl.train_td3bc(labeled(env, "expert", 4), cfg, env, anchors, Rng(0))
        scores = [m["eval_score"] for m in actor.metrics]
        assert np.isnan(scores[0]) and np.isnan(scores[2])
        assert np.isfinite(scores[1]) and np.isfinite(scores[3])

    @pytest.mark.slow
    def test_oracle_reward_expert_data(self, env, anchors):
        ds = labeled(env, "expert", 200)
        actor = orl.train_td3bc(ds, orl.RlConfig(), rng=Rng(0))
        score = orl.evaluate_policy(actor, env, anchors, 50, Rng(9)).mean
        assert score >= 80


class TestIql:
    def test_smoke(self, env):
        actor = orl.train_iql(labeled(env, "medium", 10), small_cfg("iql"), rng=Rng(0))
        assert len(actor.metrics) == 5
        assert all(np.isfinite([m["critic_loss"], m["actor_loss"]]).all() for m in actor.metrics)

    def test_nan_aborts_with_step(self, env, monkeypatch):
        monkeypatch.setattr(orl, "expectile_loss", lambda u, tau: ad.mul(ad.mean(u), float("nan")))
        with pytest.raises(TrainingDiverged, match="iql diverged at step 1"):
            orl.train_iql(labeled(env, "expert", 2), small_cfg("iql", steps=5), rng=Rng(0))

    def test_determinism(self, env):
        ds = labeled(env, "mixed", 4)
        a = orl.train_iql(ds, small_cfg("iql", steps=100), rng=Rng(2))
        b = orl.train_iql(ds, small_cfg("iql", steps=100), rng=Rng(2))
        assert repr(a.metrics) == repr(b.metrics)

    @pytest.mark.slow
    def test_oracle_reward_expert_data(self, env, anchors):
        ds = labeled(env, "expert", 200)
        actor = orl.train_iql(ds, orl.RlConfig(algo="iql", steps=20_000), rng=Rng(0))
        score = orl.evaluate_policy(actor, env, anchors, 50, Rng(9)).mean
        assert score >= 70


class TestEvaluatePolicy:
    def test_expert_controller_near_100(self, env, anchors):
        res = orl.evaluate_policy(env.expert_policy(), env, anchors, 100, Rng(123))
        assert abs(res.mean - 100) < 5

    def test_random_policy_near_0(self, env, anchors):
        res = orl.evaluate_policy(env.random_policy(), env, anchors, 100, Rng(123))
        assert abs(res.mean) < 10

    def test_episode_count(self, env, anchors):
        res = orl.evaluate_policy(env.expert_policy(), env, anchors, 10, Rng(0))
        assert res.scores.shape == (10,)
        assert res.mean == pytest.approx(res.scores.mean())


class TestPersistence:
    def test_actor_round_trip(self, env, tmp_path):
        actor = orl.train_td3bc(labeled(env, "expert", 2), small_cfg(steps=4), rng=Rng(0))
        orl.save_actor(tmp_path / "actor.npz", actor)
        back = orl.load_actor(tmp_path / "actor.npz")
        s = Rng(1).normal((10, 4))
        assert actor(s).tobytes() == back(s).tobytes()

    def test_rejects_other_checkpoint(self, tmp_path):
        from diffpref.tensor_core import save_checkpoint

        save_checkpoint(tmp_path / "bt.npz", {}, {"kind": "bt"})
        with pytest.raises(ValueError, match="policy"):
            orl.load_actor(tmp_path / "bt.npz")

    def test_metrics_csv(self, tmp_path):
        rows = [{"step": 1, "critic_loss": 0.5, "actor_loss": float("nan"), "eval_score": 12.25}]
        text = orl.write_metrics_csv(tmp_path / "m.csv", rows).read_text()
        assert text == "step,critic_loss,actor_loss,eval_score\n1,0.5,nan,12.25\n"

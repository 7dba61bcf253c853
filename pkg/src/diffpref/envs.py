"""Toy control environments, behavior-policy datasets and normalized scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .prefdata import Trajectory, UnlabeledDataset
from .tensor_core import Rng

QUALITIES = ("random", "medium", "expert", "mixed")

# policy(states (n, ds), rng) -> actions (n, da)
Policy = Callable[[np.ndarray, Rng], np.ndarray]


@dataclass(frozen=True)
class PointMassEnv:
    """Planar double integrator that should be steered to the origin.

    State is ``(x, y, vx, vy)``, action is a bounded acceleration.  Per step
    ``v' = clip(v + dt * a)`` then ``p' = clip(p + dt * v')``; the reward for
    taking ``a`` in ``s`` is ``-|p| - 0.1 * |a|``.  Initial positions are
    uniform in ``[-init_range, init_range]^2`` with zero velocity.
    """

    horizon: int = 100
    dt: float = 0.1
    action_bound: float = 1.0
    pos_limit: float = 3.0
    vel_limit: float = 2.0
    init_range: float = 1.0
    action_cost: float = 0.1
    gamma: float = 0.99
    name: str = "pointmass"

    state_dim = 4
    action_dim = 2

    @property
    def action_low(self) -> np.ndarray:
        return np.full(self.action_dim, -self.action_bound)

    @property
    def action_high(self) -> np.ndarray:
        return np.full(self.action_dim, self.action_bound)

    def reset(self, rng: Rng, n: int = 1) -> np.ndarray:
        pos = rng.uniform(-self.init_range, self.init_range, (n, 2))
        return np.concatenate([pos, np.zeros((n, 2))], axis=1)

    def reward(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states, actions = np.atleast_2d(states), np.atleast_2d(actions)
        return -np.linalg.norm(states[:, :2], axis=1) - self.action_cost * np.linalg.norm(actions, axis=1)

    def step(self, states: np.ndarray, actions: np.ndarray):
        """Vectorized transition; returns ``(next_states, rewards)``."""
        states, actions = np.atleast_2d(states), np.atleast_2d(actions)
        if (np.abs(actions) > self.action_bound + 1e-12).any():
            raise ValueError("action outside bounds")
        vel = np.clip(states[:, 2:] + self.dt * actions, -self.vel_limit, self.vel_limit)
        pos = np.clip(states[:, :2] + self.dt * vel, -self.pos_limit, self.pos_limit)
        return np.concatenate([pos, vel], axis=1), self.reward(states, actions)

    # scripted behavior policies

    def expert_policy(self, kp: float = 2.0, kd: float = 2.8) -> Policy:
        def policy(states, rng=None):
            a = -kp * states[:, :2] - kd * states[:, 2:]
            return np.clip(a, -self.action_bound, self.action_bound)
        return policy

    def random_policy(self) -> Policy:
        def policy(states, rng):
            return rng.uniform(-self.action_bound, self.action_bound, (len(states), self.action_dim))
        return policy

    def noisy_policy(self, base: Policy, noise_scale: float = 0.5) -> Policy:
        """``base`` plus Gaussian noise with std ``noise_scale`` x action range, clipped."""
        sigma = noise_scale * 2.0 * self.action_bound

        def policy(states, rng):
            a = base(states, rng) + rng.normal((len(states), self.action_dim)) * sigma
            return np.clip(a, -self.action_bound, self.action_bound)
        return policy


ENVS = {"pointmass": PointMassEnv}


def make_env(name: str = "pointmass", **kwargs) -> PointMassEnv:
    if name not in ENVS:
        raise ValueError(f"unknown environment {name!r}; available: {sorted(ENVS)}")
    return ENVS[name](**kwargs)


@dataclass(frozen=True)
class RolloutStats:
    mean: float
    std: float
    returns: np.ndarray


def _run_episodes(env, policy: Policy, rng: Rng, episodes: int, initial_states=None):
    s = env.reset(rng, episodes) if initial_states is None else np.array(initial_states, dtype=np.float64)
    S, A, S2, R = [], [], [], []
    for _ in range(env.horizon):
        a = np.asarray(policy(s, rng), dtype=np.float64)
        s2, r = env.step(s, a)
        S.append(s), A.append(a), S2.append(s2), R.append(r)
        s = s2
    # (episodes, horizon, dim)
    return tuple(np.stack(x, axis=1) for x in (S, A, S2, R))


def rollout(env, policy: Policy, rng: Rng, episodes: int, initial_states=None) -> RolloutStats:
    """Undiscounted return statistics over ``episodes`` independent episodes.

    Episodes run in lockstep; initial states are drawn first, then one
    policy call per step for the whole batch.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    returns = _run_episodes(env, policy, rng, episodes, initial_states)[3].sum(axis=1)
    return RolloutStats(float(returns.mean()), float(returns.std()), returns)


def behavior_policy(env, quality: str, noise_scale: float = 0.5) -> Policy:
    if quality == "random":
        return env.random_policy()
    if quality == "expert":
        return env.expert_policy()
    if quality == "medium":
        return env.noisy_policy(env.expert_policy(), noise_scale)
    raise ValueError(f"quality must be one of {QUALITIES}, got {quality!r}")


def generate_offline_dataset(env, quality: str, n_traj: int, rng: Rng, noise_scale: float = 0.5):
    """Roll out a behavior policy and package the result.

    Returns ``(dataset, true_rewards)``: the dataset carries no rewards;
    ``true_rewards`` maps trajectory id -> per-step ground-truth reward and
    is meant for scripted labeling and evaluation only.  ``mixed`` is an
    even split of random and expert trajectories.
    """
    if quality not in QUALITIES:
        raise ValueError(f"quality must be one of {QUALITIES}, got {quality!r}")
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if quality == "mixed":
        n_expert = n_traj // 2
        plan = [("random", n_traj - n_expert), ("expert", n_expert)]
    else:
        plan = [(quality, n_traj)]
    trajs, rewards = [], {}
    next_id = 0
    for q, n in plan:
        if n == 0:
            continue
        S, A, S2, R = _run_episodes(env, behavior_policy(env, q, noise_scale), rng, n)
        for i in range(n):
            trajs.append(Trajectory(next_id, S[i], A[i], S2[i], np.zeros(env.horizon, dtype=bool)))
            rewards[next_id] = R[i]
            next_id += 1
    meta = {"behavior": quality, "noise_scale": noise_scale, "seed": rng.seed, "horizon": env.horizon,
            "action_low": env.action_low.tolist(), "action_high": env.action_high.tolist()}
    ds = UnlabeledDataset(trajs, env.state_dim, env.action_dim, env.name, meta)
    return ds, rewards


@dataclass(frozen=True)
class ScoreAnchors:
    random: float
    expert: float

    def __post_init__(self):
        if not self.expert > self.random:
            raise ValueError(f"expert anchor {self.expert} must exceed random anchor {self.random}")

    def to_dict(self) -> dict:
        return {"random": self.random, "expert": self.expert}


def estimate_anchors(env, rng: Rng, episodes: int = 100) -> ScoreAnchors:
    rand = rollout(env, env.random_policy(), rng.child(0), episodes).mean
    expert = rollout(env, env.expert_policy(), rng.child(1), episodes).mean
    return ScoreAnchors(rand, expert)


def normalized_score(raw, anchors: ScoreAnchors):
    span = anchors.expert - anchors.random
    if span == 0:
        raise ValueError("degenerate anchors: expert score equals random score")
    out = (np.asarray(raw, dtype=np.float64) - anchors.random) / span * 100.0
    return float(out) if out.ndim == 0 else out

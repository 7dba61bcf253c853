"""Offline policy learning on reward-annotated datasets: TD3+BC and IQL."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion_reward import TrainingDiverged
from .envs import ScoreAnchors, normalized_score, rollout
from .prefdata import UnlabeledDataset
from .tensor_core import (
    MlpParams,
    NonFiniteError,
    Rng,
    adam_init,
    adam_step,
    init_mlp,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
    tree_map,
    value_and_grad,
)
from .tensor_core import autodiff as ad

log = logging.getLogger(__name__)


@dataclass
class RlConfig:
    algo: str = "td3bc"
    gamma: float = 0.99
    batch_size: int = 256
    steps: int = 50_000
    lr: float = 3e-4
    hidden: tuple = (64, 64)
    activation: str = "relu"
    polyak: float = 0.005
    # TD3+BC
    alpha: float = 2.5
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_freq: int = 2
    # IQL
    expectile: float = 0.7
    beta_awr: float = 3.0
    w_max: float = 100.0
    normalize_states: bool = True
    normalize_rewards: bool = True
    eval_interval: int = 5000
    eval_episodes: int = 10
    log_interval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.5 < self.expectile < 1.0 and self.algo == "iql":
            raise ValueError(f"expectile must lie in (0.5, 1), got {self.expectile}")
        if self.beta_awr <= 0:
            raise ValueError("beta_awr must be positive")


@dataclass
class Actor:
    """Deterministic policy ``low + (tanh(mlp(s_norm)) + 1) / 2 * (high - low)``."""

    mlp: MlpParams
    obs_mean: np.ndarray
    obs_std: np.ndarray
    low: np.ndarray
    high: np.ndarray
    metrics: list = field(default_factory=list)

    def forward(self, s_norm, mlp=None):
        out = ad.tanh(mlp_forward(self.mlp if mlp is None else mlp, s_norm))
        half = (self.high - self.low) / 2.0
        return ad.add(ad.mul(out, half), self.low + half)

    def __call__(self, states, rng=None) -> np.ndarray:
        s = (np.atleast_2d(states) - self.obs_mean) / self.obs_std
        return np.clip(self.forward(s), self.low, self.high)


def polyak_update(target, online, rho: float):
    """``target <- (1 - rho) * target + rho * online`` on every leaf."""
    return tree_map(lambda t, o: (1.0 - rho) * t + rho * o, target, online)


def td3bc_lambda(q, alpha: float) -> float:
    """Q-term weight ``alpha / mean|Q|`` treated as a constant."""
    return alpha / float(np.abs(ad.value(q)).mean())


def expectile_loss(u, tau: float):
    """Mean of ``|tau - 1{u < 0}| * u^2``."""
    w = np.where(ad.value(u) < 0, 1.0 - tau, tau)
    return ad.mean(ad.mul(w, ad.square(u)))


class _Batches:
    def __init__(self, dataset: UnlabeledDataset, config: RlConfig):
        flat = dataset.flat()
        if flat["rewards"] is None:
            raise ValueError("every transition needs a reward; annotate the dataset first")
        self.s, self.a, self.s2 = flat["states"], flat["actions"], flat["next_states"]
        self.not_done = 1.0 - flat["dones"].astype(np.float64)
        r = flat["rewards"]
        self.reward_stats = (float(r.mean()), float(r.std()))
        if config.normalize_rewards:
            mu, sd = self.reward_stats
            r = (r - mu) / sd if sd > 0 else r - mu
        self.r = r
        if config.normalize_states:
            self.obs_mean = self.s.mean(axis=0)
            std = self.s.std(axis=0)
            self.obs_std = np.where(std > 1e-6, std, 1.0)
        else:
            self.obs_mean = np.zeros(self.s.shape[1])
            self.obs_std = np.ones(self.s.shape[1])
        self.sn = (self.s - self.obs_mean) / self.obs_std
        self.s2n = (self.s2 - self.obs_mean) / self.obs_std
        self.n = len(self.s)

    def sample(self, rng: Rng, size: int):
        i = rng.integers(0, self.n, size=size)
        return self.sn[i], self.a[i], self.r[i], self.s2n[i], self.not_done[i]


def _bounds(dataset: UnlabeledDataset):
    low = dataset.metadata.get("action_low")
    high = dataset.metadata.get("action_high")
    if low is None or high is None:
        flat = dataset.flat()
        return flat["actions"].min(axis=0), flat["actions"].max(axis=0)
    return np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)


def _q(params, s, a):
    out = mlp_forward(params, ad.concat([s, a], axis=1))
    return ad.reshape(out, (ad.value(out).shape[0],))


class _Evaluator:
    def __init__(self, env, anchors, config: RlConfig, rng: Rng):
        self.env, self.anchors, self.config, self.rng = env, anchors, config, rng

    def __call__(self, actor: Actor, step: int):
        if self.env is None or self.anchors is None:
            return float("nan")
        c = self.config
        if c.eval_interval <= 0 or (step % c.eval_interval != 0 and step != c.steps):
            return float("nan")
        stats = rollout(self.env, actor, self.rng.child(step), c.eval_episodes)
        return float(normalized_score(stats.mean, self.anchors))


def _log_row(actor, step, critic, actor_loss, score):
    actor.metrics.append({"step": step, "critic_loss": critic, "actor_loss": actor_loss, "eval_score": score})


def train_td3bc(dataset: UnlabeledDataset, config: RlConfig | None = None, env=None,
                anchors: ScoreAnchors | None = None, rng: Rng | None = None) -> Actor:
    """TD3+BC: twin critics, target policy smoothing, delayed actor updates.

    Actor loss is ``-lambda * mean Q1(s, pi(s)) + mean (pi(s) - a)^2`` with
    ``lambda = alpha / mean|Q1|``.  If ``env`` and ``anchors`` are given the
    greedy policy is evaluated every ``eval_interval`` steps.
    """
    c = config or RlConfig()
    rng = rng or Rng(c.seed)
    data = _Batches(dataset, c)
    low, high = _bounds(dataset)
    ds, da = dataset.state_dim, dataset.action_dim
    half = (high - low) / 2.0
    actor = Actor(init_mlp(ds, c.hidden, da, rng.child(0), c.activation), data.obs_mean, data.obs_std, low, high)
    critics = [init_mlp(ds + da, c.hidden, 1, rng.child(1, i), c.activation) for i in range(2)]
    actor_t, critics_t = actor.mlp, critics
    a_opt, c_opt = adam_init(actor.mlp, lr=c.lr), adam_init(critics, lr=c.lr)
    batch_rng, noise_rng = rng.child(2), rng.child(3)
    evaluate = _Evaluator(env, anchors, c, rng.child(4))
    last_actor_loss = float("nan")
    c_losses = []
    for step in range(1, c.steps + 1):
        s, a, r, s2, nd = data.sample(batch_rng, c.batch_size)
        noise = np.clip(noise_rng.normal(a.shape) * c.policy_noise, -c.noise_clip, c.noise_clip) * half
        a2 = np.clip(actor.forward(s2, actor_t) + noise, low, high)
        q_next = np.minimum(_q(critics_t[0], s2, a2), _q(critics_t[1], s2, a2))
        y = r + c.gamma * nd * q_next

        def critic_loss(qs):
            return ad.add(ad.mean(ad.square(ad.sub(_q(qs[0], s, a), y))),
                          ad.mean(ad.square(ad.sub(_q(qs[1], s, a), y))))

        try:
            cl, g = value_and_grad(critic_loss, critics)
            critics, c_opt = adam_step(critics, g, c_opt)
            c_losses.append(cl)
            if step % c.policy_freq == 0:
                q1 = critics[0]

                def actor_loss(mlp):
                    pi = actor.forward(s, mlp)
                    q = _q(q1, s, pi)
                    lam = td3bc_lambda(q, c.alpha)
                    return ad.add(ad.mul(-lam, ad.mean(q)), ad.mean(ad.square(ad.sub(pi, a))))

                last_actor_loss, g = value_and_grad(actor_loss, actor.mlp)
                actor.mlp, a_opt = adam_step(actor.mlp, g, a_opt)
                actor_t = polyak_update(actor_t, actor.mlp, c.polyak)
                critics_t = polyak_update(critics_t, critics, c.polyak)
        except NonFiniteError as e:
            raise TrainingDiverged(f"td3bc diverged at step {step}: {e}") from e
        if step % c.log_interval == 0 or step == c.steps:
            score = evaluate(actor, step)
            _log_row(actor, step, float(np.mean(c_losses)), last_actor_loss, score)
            c_losses = []
            log.debug("td3bc step %d critic %.4f actor %.4f score %.2f", step, *list(actor.metrics[-1].values())[1:])
    return actor


def train_iql(dataset: UnlabeledDataset, config: RlConfig | None = None, env=None,
              anchors: ScoreAnchors | None = None, rng: Rng | None = None) -> Actor:
    """IQL with a deterministic advantage-weighted actor.

    V regresses the ``expectile`` of min target-Q; Q regresses
    ``r + gamma V(s')``; the actor minimizes
    ``mean min(exp(beta (Q - V)), w_max) * |pi(s) - a|^2``.
    """
    c = config or RlConfig(algo="iql")
    if not 0.5 < c.expectile < 1.0:
        raise ValueError(f"expectile must lie in (0.5, 1), got {c.expectile}")
    rng = rng or Rng(c.seed)
    data = _Batches(dataset, c)
    low, high = _bounds(dataset)
    ds, da = dataset.state_dim, dataset.action_dim
    actor = Actor(init_mlp(ds, c.hidden, da, rng.child(0), c.activation), data.obs_mean, data.obs_std, low, high)
    critics = [init_mlp(ds + da, c.hidden, 1, rng.child(1, i), c.activation) for i in range(2)]
    value = init_mlp(ds, c.hidden, 1, rng.child(5), c.activation)
    critics_t = critics
    a_opt, c_opt, v_opt = adam_init(actor.mlp, lr=c.lr), adam_init(critics, lr=c.lr), adam_init(value, lr=c.lr)
    batch_rng = rng.child(2)
    evaluate = _Evaluator(env, anchors, c, rng.child(4))
    c_losses, a_losses = [], []
    v_of = lambda params, s: ad.reshape(mlp_forward(params, s), (ad.value(s).shape[0],))
    for step in range(1, c.steps + 1):
        s, a, r, s2, nd = data.sample(batch_rng, c.batch_size)
        q_t = np.minimum(_q(critics_t[0], s, a), _q(critics_t[1], s, a))
        try:
            _, g = value_and_grad(lambda v: expectile_loss(ad.sub(q_t, v_of(v, s)), c.expectile), value)
            value, v_opt = adam_step(value, g, v_opt)
            y = r + c.gamma * nd * v_of(value, s2)

            def critic_loss(qs):
                return ad.add(ad.mean(ad.square(ad.sub(_q(qs[0], s, a), y))),
                              ad.mean(ad.square(ad.sub(_q(qs[1], s, a), y))))

            cl, g = value_and_grad(critic_loss, critics)
            critics, c_opt = adam_step(critics, g, c_opt)
            w = np.minimum(np.exp(c.beta_awr * (q_t - v_of(value, s))), c.w_max)

            def actor_loss(mlp):
                err = ad.sum_(ad.square(ad.sub(actor.forward(s, mlp), a)), axis=1)
                return ad.mean(ad.mul(w, err))

            al, g = value_and_grad(actor_loss, actor.mlp)
            actor.mlp, a_opt = adam_step(actor.mlp, g, a_opt)
            critics_t = polyak_update(critics_t, critics, c.polyak)
        except NonFiniteError as e:
            raise TrainingDiverged(f"iql diverged at step {step}: {e}") from e
        c_losses.append(cl), a_losses.append(al)
        if step % c.log_interval == 0 or step == c.steps:
            _log_row(actor, step, float(np.mean(c_losses)), float(np.mean(a_losses)), evaluate(actor, step))
            c_losses, a_losses = [], []
    return actor


def train_policy(dataset, config: RlConfig, env=None, anchors=None, rng=None) -> Actor:
    if config.algo == "td3bc":
        return train_td3bc(dataset, config, env, anchors, rng)
    if config.algo == "iql":
        return train_iql(dataset, config, env, anchors, rng)
    raise ValueError(f"unknown offline RL algorithm {config.algo!r}; choose 'td3bc' or 'iql'")


@dataclass(frozen=True)
class EvalResult:
    mean: float
    std: float
    scores: np.ndarray
    raw_mean: float


def evaluate_policy(policy, env, anchors: ScoreAnchors, episodes: int, rng: Rng) -> EvalResult:
    """Normalized score statistics over ``episodes`` rollouts of any policy callable."""
    stats = rollout(env, policy, rng, episodes)
    scores = normalized_score(stats.returns, anchors)
    return EvalResult(float(scores.mean()), float(scores.std()), scores, stats.mean)


# --- persistence ---------------------------------------------------------

def save_actor(path, actor: Actor, meta: dict | None = None) -> Path:
    arrays = {**actor.mlp.to_arrays("actor/"), "obs_mean": actor.obs_mean, "obs_std": actor.obs_std,
              "low": actor.low, "high": actor.high}
    return save_checkpoint(path, arrays, {"kind": "actor", "mlp": actor.mlp.arch(), **(meta or {})})


def load_actor(path) -> Actor:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "actor":
        raise ValueError(f"{path}: not a policy checkpoint")
    mlp = MlpParams.from_arrays(meta["mlp"], arrays, "actor/")
    return Actor(mlp, arrays["obs_mean"], arrays["obs_std"], arrays["low"], arrays["high"])


def write_metrics_csv(path, metrics: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "critic_loss", "actor_loss", "eval_score"])
        for m in metrics:
            w.writerow([m["step"], repr(float(m["critic_loss"])), repr(float(m["actor_loss"])),
                        repr(float(m["eval_score"]))])
    return path

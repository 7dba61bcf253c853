"""Diffusion-classifier rewards learned from trajectory preferences.

A denoiser ``eps(x_t, t[, c])`` is trained on preference pairs so that its
denoising error is small on steps from preferred segments and large on
steps from rejected ones.  The exponentiated negative error then acts as a
per-step classifier score:

* DPR scores a step with ``exp(-E||eps - eps_hat||^2)`` directly.
* C-DPR conditions the denoiser on a preference class ``c`` and scores with
  the two-way posterior ``D(c=1) / (D(c=1) + D(c=0))``.

At annotation time the reward is ``-mean_t log(1 - D_t)`` where ``D_t`` is
the score at a fixed diffusion step ``t``, swept over all ``t``.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .prefdata import LabeledPrefDataset, Segment, UnlabeledDataset
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
    value_and_grad,
)
from .tensor_core import autodiff as ad

log = logging.getLogger(__name__)

P_MIN = 1e-6
C_POS, C_NEG = 1, 0
_CHUNK_ROWS = 16384


class TrainingDiverged(RuntimeError):
    pass


# --- noise schedule ------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by ``t - 1`` for diffusion steps ``t = 1..T``."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    bar_alphas: np.ndarray
    beta_start: float
    beta_end: float


def make_linear_schedule(T: int = 10, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas), beta_start, beta_end)


def forward_noise(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one step per row."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = np.asarray(t)
    if (t < 1).any() or (t > schedule.T).any():
        raise ValueError(f"diffusion step must lie in [1, {schedule.T}], got {t}")
    ab = schedule.bar_alphas[t - 1]
    if ab.ndim == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# --- denoiser ------------------------------------------------------------

@dataclass
class DenoiserNet:
    """MLP over ``concat(x_t, time_table[t], cond_table[c])``."""

    mlp: MlpParams
    time_table: object
    cond_table: object = None
    data_dim: int = 0
    conditional: bool = False

    _tree_fields = ("mlp", "time_table", "cond_table")

    @property
    def T(self) -> int:
        return ad.value(self.time_table).shape[0]

    def _embed(self, table, idx, n_rows):
        if isinstance(table, ad.Tensor):
            onehot = np.zeros((len(idx), table.shape[0]))
            onehot[np.arange(len(idx)), idx] = 1.0
            return ad.matmul(onehot, table)
        return table[idx]

    def predict(self, x_t, t, cond=None):
        """Predicted noise for rows ``x_t`` at 1-based steps ``t`` (and classes ``cond``)."""
        n = ad.value(x_t).shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        parts = [x_t, self._embed(self.time_table, t - 1, n)]
        if self.conditional:
            if cond is None:
                raise ValueError("conditional denoiser needs a condition")
            c = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
            parts.append(self._embed(self.cond_table, c, n))
        elif cond is not None:
            raise ValueError("unconditional denoiser got a condition")
        return mlp_forward(self.mlp, ad.concat(parts, axis=1))


def init_denoiser(data_dim: int, T: int, rng: Rng, hidden=(128, 128, 128, 128), time_dim: int = 16,
                  conditional: bool = False, cond_dim: int = 10, activation: str = "silu") -> DenoiserNet:
    in_dim = data_dim + time_dim + (cond_dim if conditional else 0)
    mlp = init_mlp(in_dim, hidden, data_dim, rng.child(0), activation)
    time_table = rng.child(1).normal((T, time_dim))
    cond_table = rng.child(2).normal((2, cond_dim)) if conditional else None
    return DenoiserNet(mlp, time_table, cond_table, data_dim, conditional)


def denoise_error(denoiser, schedule: NoiseSchedule, x0, t, eps, cond=None):
    """Per-row squared error ``||eps - eps_hat(x_t, t)||^2``."""
    x_t = forward_noise(x0, t, eps, schedule)
    diff = ad.sub(eps, denoiser.predict(x_t, t, cond))
    return ad.sum_(ad.square(diff), axis=1)


def _bank_errors(denoiser, schedule, x, ts, eps, cond=None) -> np.ndarray:
    """Errors for every input row under every shared draw; shape (N, K).

    ``ts`` (K,) and ``eps`` (K, d) are common to all rows of ``x``.
    """
    n, d = x.shape
    k = len(ts)
    out = np.empty((n, k))
    per = max(1, _CHUNK_ROWS // max(k, 1))
    for lo in range(0, n, per):
        xb = x[lo:lo + per]
        m = len(xb)
        x0 = np.repeat(xb, k, axis=0)
        tt = np.tile(ts, m)
        ee = np.tile(eps, (m, 1))
        out[lo:lo + m] = ad.value(denoise_error(denoiser, schedule, x0, tt, ee, cond)).reshape(m, k)
    return out


# --- reward models -------------------------------------------------------

@dataclass
class _DiffusionModel:
    denoiser: DenoiserNet
    schedule: NoiseSchedule
    norm_mean: np.ndarray
    norm_std: np.ndarray
    state_dim: int
    action_dim: int
    mc_samples: int = 4
    p_min: float = P_MIN
    loss_curve: list = field(default_factory=list)

    kind = "diffusion"

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if not (np.isfinite(self.norm_mean).all() and np.isfinite(self.norm_std).all()):
            raise ValueError("normalization statistics must be finite")

    @property
    def data_dim(self) -> int:
        return self.state_dim + self.action_dim

    def normalize(self, sa) -> np.ndarray:
        sa = np.atleast_2d(np.asarray(sa, dtype=np.float64))
        if sa.shape[-1] != self.data_dim:
            raise ValueError(f"(s, a) has dim {sa.shape[-1]}, model expects {self.data_dim}")
        return (sa - self.norm_mean) / self.norm_std

    def rewards(self, states, actions, rng: Rng) -> np.ndarray:
        return reward(self, np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1), rng)

    def step_scores(self, sa, rng: Rng) -> np.ndarray:
        raise NotImplementedError


@dataclass
class DprModel(_DiffusionModel):
    kind = "dpr"

    def step_scores(self, sa, rng):
        return elbo_score(self, sa, rng)


@dataclass
class CdprModel(_DiffusionModel):
    kind = "cdpr"

    def step_scores(self, sa, rng):
        return conditional_prob(self, sa, rng)


def _draw_bank(model, rng: Rng):
    ts = rng.integers(1, model.schedule.T + 1, size=model.mc_samples)
    eps = rng.normal((model.mc_samples, model.data_dim))
    return ts, eps


def elbo_score(model: DprModel, sa, rng: Rng) -> np.ndarray:
    """``exp(-mean denoising error)`` over ``mc_samples`` shared ``(t, eps)`` draws; in (0, 1]."""
    x = model.normalize(sa)
    ts, eps = _draw_bank(model, rng)
    m = _bank_errors(model.denoiser, model.schedule, x, ts, eps).mean(axis=1)
    return np.maximum(np.exp(-m), np.finfo(np.float64).tiny)


def conditional_probs(model: CdprModel, sa, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Posterior of ``c+`` and ``c-`` from paired draws; the two sum to one."""
    x = model.normalize(sa)
    ts, eps = _draw_bank(model, rng)
    m_pos = _bank_errors(model.denoiser, model.schedule, x, ts, eps, C_POS).mean(axis=1)
    m_neg = _bank_errors(model.denoiser, model.schedule, x, ts, eps, C_NEG).mean(axis=1)
    return ad.sigmoid(m_neg - m_pos), ad.sigmoid(m_pos - m_neg)


def conditional_prob(model: CdprModel, sa, rng: Rng) -> np.ndarray:
    return conditional_probs(model, sa, rng)[0]


def trajectory_score(model, seg: Segment, rng: Rng) -> float:
    """Mean step score over a segment."""
    return float(np.mean(model.step_scores(seg.sa, rng)))


def reward(model, sa, rng: Rng) -> np.ndarray:
    """Step reward ``-mean_t log(1 - D_t)`` with ``D_t`` clamped to ``[p_min, 1 - p_min]``.

    Every diffusion step ``t = 1..T`` is visited; at each one the error is
    averaged over ``mc_samples`` noise draws shared by all inputs, so the
    reward is a deterministic function of ``(s, a)`` for a given ``rng``.
    """
    x = model.normalize(sa)
    T, k = model.schedule.T, model.mc_samples
    ts = np.repeat(np.arange(1, T + 1), k)
    eps = rng.normal((T * k, model.data_dim))
    if isinstance(model, CdprModel):
        m_pos = _bank_errors(model.denoiser, model.schedule, x, ts, eps, C_POS).reshape(len(x), T, k).mean(axis=2)
        m_neg = _bank_errors(model.denoiser, model.schedule, x, ts, eps, C_NEG).reshape(len(x), T, k).mean(axis=2)
        d = ad.sigmoid(m_neg - m_pos)
    else:
        m = _bank_errors(model.denoiser, model.schedule, x, ts, eps).reshape(len(x), T, k).mean(axis=2)
        d = np.exp(-m)
    d = np.clip(d, model.p_min, 1.0 - model.p_min)
    return -np.log1p(-d).mean(axis=1)


def annotate_dataset(model, dataset: UnlabeledDataset, rng: Rng, standardize: bool = False,
                     workers: int = 1) -> UnlabeledDataset:
    """Fill every transition's reward with ``model.rewards``.

    All trajectories share the same noise draws (taken from ``rng`` once),
    so the result does not depend on ``workers`` or trajectory order.
    ``standardize`` z-scores the rewards and records the statistics in
    the metadata.
    """
    model_dim = getattr(model, "data_dim", None)
    if model_dim is not None and model_dim != dataset.state_dim + dataset.action_dim:
        raise ValueError(f"model expects (s, a) dim {model_dim}, dataset has "
                         f"{dataset.state_dim} + {dataset.action_dim}")
    if not dataset.trajectories:
        return replace(dataset, metadata=dict(dataset.metadata))
    def one(traj):
        return np.asarray(model.rewards(traj.states, traj.actions, rng.copy()), dtype=np.float64)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rewards = list(pool.map(one, dataset.trajectories))
    else:
        rewards = [one(t) for t in dataset.trajectories]
    meta = {"reward_source": getattr(model, "kind", type(model).__name__)}
    if standardize:
        flat = np.concatenate(rewards)
        mu, sd = float(flat.mean()), float(flat.std())
        sd = sd if sd > 0 else 1.0
        rewards = [(r - mu) / sd for r in rewards]
        meta["reward_standardization"] = {"mean": mu, "std": sd}
    return dataset.with_rewards(rewards, **meta)


# --- training objectives -------------------------------------------------

def _pair_arrays(model, batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, LabeledPrefDataset):
        batch = batch.pairs
    if not batch:
        raise ValueError("empty batch")
    x1 = np.concatenate([p.seg1.sa for p in batch])
    x0 = np.concatenate([p.seg0.sa for p in batch])
    return model.normalize(x1), model.normalize(x0)


def _draw_training(rng: Rng, n_rows: int, T: int, d: int):
    return rng.integers(1, T + 1, size=n_rows), rng.normal((n_rows, d))


def _classifier_loss(p_pref, p_rej, p_min):
    lp = ad.log(ad.clip(p_pref, p_min, 1.0 - p_min))
    ln = ad.log(ad.sub(1.0, ad.clip(p_rej, p_min, 1.0 - p_min)))
    return ad.neg(ad.add(ad.mean(lp), ad.mean(ln)))


def _dpr_loss_arrays(denoiser, schedule, x1, x0, rng: Rng, p_min=P_MIN):
    n1 = len(x1)
    x = np.concatenate([x1, x0])
    t, eps = _draw_training(rng, len(x), schedule.T, x.shape[1])
    d = ad.exp(ad.neg(denoise_error(denoiser, schedule, x, t, eps)))
    return _classifier_loss(d[:n1], d[n1:], p_min)


def _cdpr_loss_arrays(denoiser, schedule, x1, x0, rng: Rng, p_min=P_MIN):
    n1, n = len(x1), len(x1) + len(x0)
    x = np.concatenate([x1, x0])
    t, eps = _draw_training(rng, n, schedule.T, x.shape[1])
    # one forward pass over [c+ rows; c- rows] with identical (t, eps)
    cond = np.repeat([C_POS, C_NEG], n)
    err = denoise_error(denoiser, schedule, np.concatenate([x, x]), np.tile(t, 2), np.tile(eps, (2, 1)), cond)
    p = ad.sigmoid(ad.sub(err[n:], err[:n]))
    return _classifier_loss(p[:n1], p[n1:], p_min)


def dpr_loss(model: DprModel, batch, rng: Rng):
    """Negated DPR objective on a canonical batch (preferred segment second).

    One ``(t, eps)`` draw per step.  Differentiable w.r.t. ``model.denoiser``
    when its leaves are Tensors.
    """
    x1, x0 = _pair_arrays(model, batch)
    return _dpr_loss_arrays(model.denoiser, model.schedule, x1, x0, rng, model.p_min)


def cdpr_loss(model: CdprModel, batch, rng: Rng):
    """Negated C-DPR objective; both conditions see the same draws."""
    x1, x0 = _pair_arrays(model, batch)
    return _cdpr_loss_arrays(model.denoiser, model.schedule, x1, x0, rng, model.p_min)


@dataclass
class RewardTrainConfig:
    method: str = "dpr"
    hidden: tuple = (128, 128, 128, 128)
    activation: str = "silu"
    T: int = 10
    beta_start: float = 1e-4
    beta_end: float = 0.02
    time_dim: int = 16
    cond_dim: int = 10
    batch_size: int = 256
    lr: float = 3e-4
    epochs: int = 500
    mc_samples: int = 4
    p_min: float = P_MIN
    seed: int = 0


def fit_normalizer(x: np.ndarray, floor: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > floor, std, 1.0)


def train_reward_model(pairs: LabeledPrefDataset, config: RewardTrainConfig | None = None,
                       rng: Rng | None = None):
    """Minibatch Adam on the DPR or C-DPR objective.

    Normalization statistics come from every step in ``pairs``.  The
    returned model carries its per-epoch mean loss in ``loss_curve``.
    """
    config = config or RewardTrainConfig()
    if config.method not in ("dpr", "cdpr"):
        raise ValueError(f"method must be 'dpr' or 'cdpr', got {config.method!r}")
    if len(pairs) == 0:
        raise ValueError("empty preference dataset")
    rng = rng or Rng(config.seed)
    x1, x0 = pairs.arrays()
    n, H, d = x1.shape
    mean, std = fit_normalizer(np.concatenate([x1, x0]).reshape(-1, d))
    conditional = config.method == "cdpr"
    denoiser = init_denoiser(d, config.T, rng.child(0), config.hidden, config.time_dim, conditional,
                             config.cond_dim, config.activation)
    cls = CdprModel if conditional else DprModel
    ds = pairs.pairs[0].seg0.states.shape[1]
    model = cls(denoiser, make_linear_schedule(config.T, config.beta_start, config.beta_end), mean, std,
                ds, d - ds, config.mc_samples, config.p_min)
    x1n = ((x1 - mean) / std)
    x0n = ((x0 - mean) / std)
    loss_arrays = _cdpr_loss_arrays if conditional else _dpr_loss_arrays
    opt = adam_init(denoiser, lr=config.lr)
    shuffle_rng, noise_rng = rng.child(1), rng.child(2)
    curve = []
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            b1 = x1n[idx].reshape(-1, d)
            b0 = x0n[idx].reshape(-1, d)
            try:
                loss, grads = value_and_grad(
                    lambda den: loss_arrays(den, model.schedule, b1, b0, noise_rng, config.p_min), denoiser)
            except NonFiniteError as e:
                raise TrainingDiverged(f"{config.method} diverged at epoch {epoch}, batch {lo // config.batch_size}: {e}") from e
            denoiser, opt = adam_step(denoiser, grads, opt)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.info("%s epoch %d loss %.5f", config.method, epoch, curve[-1])
    model.denoiser = denoiser
    model.loss_curve = curve
    return model


# --- persistence ---------------------------------------------------------

def save_reward_model(path, model: _DiffusionModel) -> Path:
    den = model.denoiser
    arrays = {**den.mlp.to_arrays("mlp/"), "time_table": den.time_table, "norm_mean": model.norm_mean,
              "norm_std": model.norm_std, "betas": model.schedule.betas}
    if den.conditional:
        arrays["cond_table"] = den.cond_table
    meta = {"kind": model.kind, "conditional": den.conditional, "mlp": den.mlp.arch(),
            "T": model.schedule.T, "beta_start": model.schedule.beta_start, "beta_end": model.schedule.beta_end,
            "state_dim": model.state_dim, "action_dim": model.action_dim, "mc_samples": model.mc_samples,
            "p_min": model.p_min}
    return save_checkpoint(path, arrays, meta)


def model_from_checkpoint(arrays: dict, meta: dict) -> _DiffusionModel:
    mlp = MlpParams.from_arrays(meta["mlp"], arrays, "mlp/")
    d = meta["state_dim"] + meta["action_dim"]
    den = DenoiserNet(mlp, arrays["time_table"], arrays.get("cond_table"), d, meta["conditional"])
    betas = arrays["betas"]
    alphas = 1.0 - betas
    sched = NoiseSchedule(meta["T"], betas, alphas, np.cumprod(alphas), meta["beta_start"], meta["beta_end"])
    cls = CdprModel if meta["kind"] == "cdpr" else DprModel
    return cls(den, sched, arrays["norm_mean"], arrays["norm_std"], meta["state_dim"], meta["action_dim"],
               meta["mc_samples"], meta["p_min"])


def load_reward_model(path) -> _DiffusionModel:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") not in ("dpr", "cdpr"):
        raise ValueError(f"{path}: not a diffusion reward checkpoint (kind={meta.get('kind')!r})")
    return model_from_checkpoint(arrays, meta)


def write_loss_csv(path, curve) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])
    return path

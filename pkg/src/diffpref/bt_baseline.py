"""Bradley-Terry reward model: a Markovian MLP reward fit with pairwise cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion_reward import P_MIN, TrainingDiverged, fit_normalizer
from .prefdata import LabeledPrefDataset, Segment
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


@dataclass
class BtRewardNet:
    mlp: MlpParams
    norm_mean: np.ndarray
    norm_std: np.ndarray
    state_dim: int
    action_dim: int
    loss_curve: list = field(default_factory=list)

    kind = "bt"

    @property
    def data_dim(self) -> int:
        return self.state_dim + self.action_dim

    def step_reward(self, sa, mlp=None):
        sa = np.atleast_2d(np.asarray(sa, dtype=np.float64))
        if sa.shape[-1] != self.data_dim:
            raise ValueError(f"(s, a) has dim {sa.shape[-1]}, model expects {self.data_dim}")
        out = mlp_forward(self.mlp if mlp is None else mlp, (sa - self.norm_mean) / self.norm_std)
        return ad.reshape(out, (len(sa),))

    def rewards(self, states, actions, rng=None) -> np.ndarray:
        return self.step_reward(np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1))


def segment_returns(net: BtRewardNet, segs: np.ndarray, mlp=None):
    """Summed predicted reward of each segment; ``segs`` has shape (N, H, d)."""
    n, H, d = segs.shape
    r = net.step_reward(segs.reshape(n * H, d), mlp)
    return ad.sum_(ad.reshape(r, (n, H)), axis=1)


def bt_prob(net: BtRewardNet, seg_a: Segment, seg_b: Segment) -> float:
    """P[a preferred over b] = sigmoid(R(a) - R(b)), which is the stable form of the softmax."""
    if seg_a.sa.shape != seg_b.sa.shape:
        raise ValueError("segments must share length and dimensions")
    ra, rb = segment_returns(net, np.stack([seg_a.sa, seg_b.sa]))
    return float(ad.sigmoid(ra - rb))


def _bt_loss_arrays(net, mlp, x0, x1, y, p_min=P_MIN):
    diff = ad.sub(segment_returns(net, x1, mlp), segment_returns(net, x0, mlp))  # R1 - R0
    p1 = ad.clip(ad.sigmoid(diff), p_min, 1.0)
    p0 = ad.clip(ad.sigmoid(ad.neg(diff)), p_min, 1.0)
    ll = ad.add(ad.mul(1.0 - y, ad.log(p0)), ad.mul(y, ad.log(p1)))
    return ad.neg(ad.mean(ll))


def bt_loss(net: BtRewardNet, batch, mlp=None, p_min: float = P_MIN):
    """Binary cross-entropy of the Bradley-Terry model; labels may be 0, 0.5 or 1.

    Pass Tensor-leaved ``mlp`` to differentiate.
    """
    if isinstance(batch, LabeledPrefDataset):
        batch = batch.pairs
    if not batch:
        raise ValueError("empty batch")
    x0 = np.stack([p.seg0.sa for p in batch])
    x1 = np.stack([p.seg1.sa for p in batch])
    y = np.array([p.label for p in batch], dtype=np.float64)
    return _bt_loss_arrays(net, net.mlp if mlp is None else mlp, x0, x1, y, p_min)


@dataclass
class BtTrainConfig:
    hidden: tuple = (128, 128, 128, 128)
    activation: str = "silu"
    batch_size: int = 256
    lr: float = 3e-4
    epochs: int = 500
    p_min: float = P_MIN
    seed: int = 0


def train_bt(pairs, config: BtTrainConfig | None = None, rng: Rng | None = None) -> BtRewardNet:
    """Fit the reward MLP with Adam; accepts canonical datasets or raw labeled pairs."""
    config = config or BtTrainConfig()
    rng = rng or Rng(config.seed)
    pair_list = pairs.pairs if isinstance(pairs, LabeledPrefDataset) else list(pairs)
    if not pair_list:
        raise ValueError("empty preference dataset")
    x0 = np.stack([p.seg0.sa for p in pair_list])
    x1 = np.stack([p.seg1.sa for p in pair_list])
    y = np.array([p.label for p in pair_list], dtype=np.float64)
    n, H, d = x0.shape
    mean, std = fit_normalizer(np.concatenate([x0, x1]).reshape(-1, d))
    ds = pair_list[0].seg0.states.shape[1]
    mlp = init_mlp(d, config.hidden, 1, rng.child(0), config.activation)
    net = BtRewardNet(mlp, mean, std, ds, d - ds)
    opt = adam_init(mlp, lr=config.lr)
    shuffle_rng = rng.child(1)
    curve = []
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            try:
                loss, grads = value_and_grad(
                    lambda m: _bt_loss_arrays(net, m, x0[idx], x1[idx], y[idx], config.p_min), mlp)
            except NonFiniteError as e:
                raise TrainingDiverged(f"bt diverged at epoch {epoch}: {e}") from e
            mlp, opt = adam_step(mlp, grads, opt)
            net.mlp = mlp
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.info("bt epoch %d loss %.5f", epoch, curve[-1])
    net.loss_curve = curve
    return net


def pair_accuracy(net: BtRewardNet, pairs) -> float:
    """Fraction of strict-preference pairs whose predicted ordering matches the label."""
    pair_list = pairs.pairs if isinstance(pairs, LabeledPrefDataset) else list(pairs)
    strict = [p for p in pair_list if p.label != 0.5]
    r0 = segment_returns(net, np.stack([p.seg0.sa for p in strict]))
    r1 = segment_returns(net, np.stack([p.seg1.sa for p in strict]))
    y = np.array([p.label for p in strict])
    return float(np.mean((r1 > r0) == (y == 1.0)))


def save_bt(path, net: BtRewardNet) -> Path:
    arrays = {**net.mlp.to_arrays("mlp/"), "norm_mean": net.norm_mean, "norm_std": net.norm_std}
    meta = {"kind": "bt", "conditional": False, "mlp": net.mlp.arch(), "state_dim": net.state_dim,
            "action_dim": net.action_dim}
    return save_checkpoint(path, arrays, meta)


def bt_from_checkpoint(arrays: dict, meta: dict) -> BtRewardNet:
    mlp = MlpParams.from_arrays(meta["mlp"], arrays, "mlp/")
    return BtRewardNet(mlp, arrays["norm_mean"], arrays["norm_std"], meta["state_dim"], meta["action_dim"])


def load_bt(path) -> BtRewardNet:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "bt":
        raise ValueError(f"{path}: not a Bradley-Terry checkpoint (kind={meta.get('kind')!r})")
    return bt_from_checkpoint(arrays, meta)

"""
Diffusion models as preference classifiers
==========================================

Two Gaussian blobs stand in for "preferred" and "rejected" behavior.  We fit
the unconditional (dpr) and conditional (cdpr) reward models on segment
pairs and look at how they score held-out steps.
"""

import numpy as np

from diffpref import diffusion_reward as dm
from diffpref.prefdata import LabeledPrefDataset, PreferencePair, Segment
from diffpref.tensor_core import Rng

# preferred steps sit around +1, rejected around -1, in 4 dims (2 state + 2 action)
g = np.random.default_rng(0)


def blobs(n_pairs, H=5):
    pairs = []
    for i in range(n_pairs):
        pos = g.normal(1.0, np.sqrt(0.1), (H, 4))
        neg = g.normal(-1.0, np.sqrt(0.1), (H, 4))
        pairs.append(PreferencePair(Segment(2 * i, 0, neg[:, :2], neg[:, 2:]),
                                    Segment(2 * i + 1, 0, pos[:, :2], pos[:, 2:]), 1.0))
    return LabeledPrefDataset(pairs, H)


train, test = blobs(200), blobs(50)

# a smaller net than the default keeps this demo under a minute
cfg = dict(hidden=(64, 64), epochs=200)
dpr = dm.train_reward_model(train, dm.RewardTrainConfig(method="dpr", **cfg), Rng(0))
cdpr = dm.train_reward_model(train, dm.RewardTrainConfig(method="cdpr", **cfg), Rng(0))
print("final training loss  dpr %.4f  cdpr %.4f" % (dpr.loss_curve[-1], cdpr.loss_curve[-1]))

pos, neg = (x.reshape(-1, 4) for x in test.arrays())

# %%
# Step scores.  dpr scores with exp(-denoising error), which stays small
# even on preferred steps because a noise draw is never fully predictable.
# cdpr compares the errors under the two condition embeddings, which
# gives a proper posterior in (0, 1).
for name, model in (("dpr", dpr), ("cdpr", cdpr)):
    sp, sn = model.step_scores(pos, Rng(1)), model.step_scores(neg, Rng(1))
    print(f"{name:5s} score  preferred {sp.mean():.3f}  rejected {sn.mean():.3g}")

# %%
# Rewards are -mean_t log(1 - D_t); both models rank every preferred step
# above every rejected one.
for name, model in (("dpr", dpr), ("cdpr", cdpr)):
    rp, rn = dm.reward(model, pos, Rng(2)), dm.reward(model, neg, Rng(2))
    print(f"{name:5s} reward preferred {rp.mean():.3f} (min {rp.min():.3f})  "
          f"rejected {rn.mean():.3g} (max {rn.max():.3g})")

# %%
# Averaging step probabilities over a segment bounds the mean log probability
# from above (log is concave).
seg = test.pairs[0].seg1
steps = dpr.step_scores(seg.sa, Rng(3))
print("log trajectory score %.4f >= mean step log-score %.4f"
      % (np.log(dm.trajectory_score(dpr, seg, Rng(3))), np.log(steps).mean()))

# %%
# One call shares a handful of noise draws across all inputs, so a single
# call's average is noisy; averaging calls estimates the expected score.
banks = [dpr.step_scores(pos, Rng(k)).mean() for k in range(50)]
print("dpr preferred score over 50 noise banks: mean %.3f, range %.3f to %.3f"
      % (np.mean(banks), np.min(banks), np.max(banks)))

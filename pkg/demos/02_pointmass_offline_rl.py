"""
From preferences to a policy on PointMass
=========================================

A planar point mass has to be steered to the origin.  We

1. roll out a half random, half expert behavior mix,
2. label segment pairs with a scripted teacher that knows the true reward,
3. fit a dpr reward model on those pairs only,
4. relabel every transition with the learned reward,
5. train TD3+BC and compare against true-reward and constant-reward runs.

Sizes are cut down so this runs in a few minutes; the CLI ``pipeline``
command does the same at full size.
"""

import numpy as np

from diffpref import diffusion_reward as dm
from diffpref import envs, offline_rl, prefdata
from diffpref.tensor_core import Rng

env = envs.make_env("pointmass")
anchors = envs.estimate_anchors(env, Rng(0, (2,)))
print("anchors: random %.1f  expert %.1f" % (anchors.random, anchors.expert))

data, truth = envs.generate_offline_dataset(env, "mixed", 60, Rng(0, (1,)))
print(len(data), "trajectories,", data.n_transitions, "transitions, rewards hidden:", not data.has_rewards)

# %%
# Scripted teacher: the segment with the larger true return wins, ties are dropped.
raw = prefdata.label_pairs(data, 25, 300, prefdata.sidecar_oracle(data, truth), Rng(0, (3,)))
prefs = prefdata.canonicalize(raw, "drop")
print(len(prefs), "canonical pairs from", len(raw), "raw")

model = dm.train_reward_model(prefs, dm.RewardTrainConfig(method="dpr", hidden=(64, 64), epochs=300), Rng(0, (4,)))
annotated = dm.annotate_dataset(model, data, Rng(0, (5,)))

# how well does the learned reward track the hidden one?
learned = np.concatenate([t.rewards for t in annotated.trajectories])
true = np.concatenate([truth[t.id] for t in data.trajectories])
print("corr(learned, true) per step: %.3f" % np.corrcoef(learned, true)[0, 1])

# %%
# Offline RL on three versions of the same transitions.  All runs share one
# rng stream so they see identical minibatches.  At this data size the
# per-episode spread is wide; the full-size pipeline is much tighter.
variants = {
    "dpr": annotated,
    "oracle": data.with_rewards([truth[t.id] for t in data.trajectories]),
    "constant": data.with_rewards([np.ones(len(t)) for t in data.trajectories]),
}
cfg = offline_rl.RlConfig(steps=15000, eval_interval=0)
for name, ds in variants.items():
    actor = offline_rl.train_td3bc(ds, cfg, rng=Rng(0, (6,)))
    res = offline_rl.evaluate_policy(actor, env, anchors, 20, Rng(0, (7,)))
    print(f"{name:9s} normalized score {res.mean:6.1f} +- {res.std:.1f}")

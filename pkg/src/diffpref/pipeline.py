"""End-to-end preference reward pipeline.

Stages run in order and talk to each other only through files under one
run directory::

    <out_dir>/
        data/dataset.jsonl          unlabeled trajectories
        data/true_rewards.jsonl     hidden ground-truth sidecar
        data/anchors.json           random / expert return anchors
        labels/preferences.jsonl    canonical scripted-teacher pairs
        reward/<method>/            model.npz, loss.csv
        annotated/<method>/         dataset.jsonl, summary.json
        policy/<method>/            actor.npz, metrics.csv
        eval/<method>/              report.json, report.csv
        comparison.csv, comparison.json
        manifest.json

Every random draw comes from ``Rng(seed)`` children with fixed keys per
stage, so rerunning a stage with the same config rewrites identical bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import bt_baseline as bt_mod
from . import diffusion_reward as diffusion
from . import envs, offline_rl, prefdata
from .tensor_core import Rng, load_checkpoint

log = logging.getLogger(__name__)

METHODS = ("dpr", "cdpr", "bt", "oracle", "constant")
TRAINABLE = ("dpr", "cdpr", "bt")
# stable per-method stream keys; never reorder
_METHOD_KEY = {m: i for i, m in enumerate(METHODS)}
_STAGE_KEY = {"gen-data": 1, "anchors": 2, "label": 3, "train-reward": 4, "annotate": 5,
              "train-policy": 6, "evaluate": 7}


class PipelineError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(PipelineError):
    category = "config"
    exit_code = 2


class MissingArtifactError(PipelineError):
    category = "missing-artifact"
    exit_code = 3


class UnsupportedError(PipelineError):
    category = "unsupported"
    exit_code = 4


class OutputDirError(PipelineError):
    category = "output"
    exit_code = 5


class StageFailed(PipelineError):
    category = "stage-failed"
    exit_code = 6


# --- configuration -------------------------------------------------------

@dataclass
class EnvSection:
    name: str = "pointmass"
    horizon: int = 100
    dt: float = 0.1
    action_bound: float = 1.0
    init_range: float = 1.0


@dataclass
class DataSection:
    quality: str = "mixed"
    n_traj: int = 200
    noise_scale: float = 0.5
    anchor_episodes: int = 100


@dataclass
class LabelSection:
    H: int = 25
    n_pairs: int = 500
    tie_policy: str = "drop"


@dataclass
class DiffusionSection:
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
    p_min: float = diffusion.P_MIN


@dataclass
class BtSection:
    hidden: tuple = (128, 128, 128, 128)
    activation: str = "silu"
    batch_size: int = 256
    lr: float = 3e-4
    epochs: int = 500


@dataclass
class RlSection:
    algo: str = "td3bc"
    gamma: float = 0.99
    batch_size: int = 256
    steps: int = 50_000
    lr: float = 3e-4
    hidden: tuple = (64, 64)
    activation: str = "relu"
    polyak: float = 0.005
    alpha: float = 2.5
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_freq: int = 2
    expectile: float = 0.7
    beta_awr: float = 3.0
    w_max: float = 100.0
    normalize_states: bool = True
    normalize_rewards: bool = True
    eval_interval: int = 5000
    eval_episodes: int = 10
    log_interval: int = 1000


@dataclass
class EvalSection:
    seeds: int = 5
    episodes: int = 10


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    methods: tuple = ("dpr",)
    env: EnvSection = field(default_factory=EnvSection)
    data: DataSection = field(default_factory=DataSection)
    label: LabelSection = field(default_factory=LabelSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    bt: BtSection = field(default_factory=BtSection)
    rl: RlSection = field(default_factory=RlSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def validate(self) -> "PipelineConfig":
        errs = []

        def check(ok, msg):
            if not ok:
                errs.append(msg)

        check(isinstance(self.seed, int) and self.seed >= 0, f"seed must be a non-negative integer, got {self.seed!r}")
        check(len(self.methods) > 0, "methods must list at least one method")
        for m in self.methods:
            check(m in METHODS, f"methods: unknown method {m!r}; choose from {list(METHODS)}")
        check(len(set(self.methods)) == len(self.methods), "methods: duplicate entries")
        check(self.env.name in envs.ENVS, f"env.name: unknown environment {self.env.name!r}")
        check(self.env.horizon >= 1, "env.horizon must be >= 1")
        check(self.env.dt > 0, "env.dt must be positive")
        check(self.env.action_bound > 0, "env.action_bound must be positive")
        check(self.env.init_range >= 0, "env.init_range must be >= 0")
        check(self.data.quality in envs.QUALITIES, f"data.quality must be one of {list(envs.QUALITIES)}")
        check(self.data.n_traj >= 1, f"data.n_traj must be >= 1, got {self.data.n_traj}")
        check(self.data.noise_scale >= 0, "data.noise_scale must be >= 0")
        check(self.data.anchor_episodes >= 1, "data.anchor_episodes must be >= 1")
        check(self.label.H >= 1, "label.H must be >= 1")
        check(self.label.n_pairs >= 1, "label.n_pairs must be >= 1")
        check(self.label.tie_policy in prefdata.TIE_POLICIES,
              f"label.tie_policy must be one of {list(prefdata.TIE_POLICIES)}")
        d = self.diffusion
        check(d.T >= 1, "diffusion.T must be >= 1")
        check(0 < d.beta_start <= d.beta_end < 1, "diffusion betas need 0 < beta_start <= beta_end < 1")
        check(0 < d.p_min < 0.5, "diffusion.p_min must lie in (0, 0.5)")
        for name, sec in (("diffusion", d), ("bt", self.bt)):
            check(sec.epochs >= 1, f"{name}.epochs must be >= 1")
            check(sec.batch_size >= 1, f"{name}.batch_size must be >= 1")
            check(sec.lr > 0, f"{name}.lr must be positive")
            check(len(sec.hidden) >= 1 and all(h >= 1 for h in sec.hidden), f"{name}.hidden must be positive widths")
        check(d.mc_samples >= 1, "diffusion.mc_samples must be >= 1")
        r = self.rl
        check(r.algo in ("td3bc", "iql"), f"rl.algo must be 'td3bc' or 'iql', got {r.algo!r}")
        check(0 < r.gamma <= 1, "rl.gamma must lie in (0, 1]")
        check(r.steps >= 1, "rl.steps must be >= 1")
        check(r.batch_size >= 1, "rl.batch_size must be >= 1")
        check(0 < r.polyak <= 1, "rl.polyak must lie in (0, 1]")
        check(0.5 < r.expectile < 1, "rl.expectile must lie in (0.5, 1)")
        check(r.eval_interval >= 0 and r.log_interval >= 1, "rl.eval_interval must be >= 0 and rl.log_interval >= 1")
        check(self.eval.seeds >= 1 and self.eval.episodes >= 1, "eval.seeds and eval.episodes must be >= 1")
        for sec in (d, self.bt, r):
            check(sec.activation in ("silu", "tanh", "relu"), f"unknown activation {sec.activation!r}")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    # derived configs for the library calls
    def env_obj(self):
        e = self.env
        return envs.make_env(e.name, horizon=e.horizon, dt=e.dt, action_bound=e.action_bound,
                             init_range=e.init_range)

    def reward_config(self, method: str) -> diffusion.RewardTrainConfig:
        return diffusion.RewardTrainConfig(method=method, seed=self.seed, **asdict(self.diffusion))

    def bt_config(self) -> bt_mod.BtTrainConfig:
        return bt_mod.BtTrainConfig(p_min=self.diffusion.p_min, seed=self.seed, **asdict(self.bt))

    def rl_config(self) -> offline_rl.RlConfig:
        return offline_rl.RlConfig(seed=self.seed, **asdict(self.rl))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals such as 1e-06 as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(_coerce(v, default[0], f"{where}[{i}]") if default else v for i, v in enumerate(value))
    return value


def _from_dict(cls, raw, where=""):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    obj = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    for k, v in raw.items():
        default = getattr(obj, k)
        path = f"{where}.{k}" if where else k
        if dataclasses.is_dataclass(default):
            setattr(obj, k, _from_dict(type(default), v, path))
        else:
            setattr(obj, k, _coerce(v, default, path))
    return obj


def config_from_dict(raw: dict) -> PipelineConfig:
    """Build and validate a config; a run manifest is accepted too."""
    if isinstance(raw, dict) and "config" in raw and "artifacts" in raw:
        raw = raw["config"]
    return _from_dict(PipelineConfig, raw or {}).validate()


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read a YAML or JSON config (or manifest), then apply non-None overrides."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML/JSON: {e}") from None
        if isinstance(raw, dict) and "config" in raw and "artifacts" in raw:
            raw = raw["config"]
    raw = dict(raw)
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v
    return config_from_dict(raw)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# --- run directory -------------------------------------------------------

class RunPaths:
    def __init__(self, out_dir):
        self.root = Path(out_dir)

    dataset = property(lambda self: self.root / "data" / "dataset.jsonl")
    sidecar = property(lambda self: self.root / "data" / "true_rewards.jsonl")
    anchors = property(lambda self: self.root / "data" / "anchors.json")
    preferences = property(lambda self: self.root / "labels" / "preferences.jsonl")
    manifest = property(lambda self: self.root / "manifest.json")
    comparison_csv = property(lambda self: self.root / "comparison.csv")
    comparison_json = property(lambda self: self.root / "comparison.json")

    def reward_model(self, m):
        return self.root / "reward" / m / "model.npz"

    def loss_csv(self, m):
        return self.root / "reward" / m / "loss.csv"

    def annotated(self, m):
        return self.root / "annotated" / m / "dataset.jsonl"

    def annotate_summary(self, m):
        return self.root / "annotated" / m / "summary.json"

    def actor(self, m):
        return self.root / "policy" / m / "actor.npz"

    def metrics_csv(self, m):
        return self.root / "policy" / m / "metrics.csv"

    def report_json(self, m):
        return self.root / "eval" / m / "report.json"

    def report_csv(self, m):
        return self.root / "eval" / m / "report.csv"


def ensure_writable(out_dir) -> Path:
    """Fail fast, before any computation, when the run directory cannot be written."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        fd, probe = tempfile.mkstemp(dir=root, prefix=".probe")
        os.close(fd)
        os.unlink(probe)
    except OSError as e:
        raise OutputDirError(f"output directory {root} is not writable: {e.strerror or e}") from None
    return root


def _require(path: Path, stage: str, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {what} at {path}; run the '{stage}' stage first")
    return path


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def _rng(cfg: PipelineConfig, stage: str, method: str | None = None) -> Rng:
    key = (_STAGE_KEY[stage],) if method is None else (_STAGE_KEY[stage], _METHOD_KEY[method])
    return Rng(cfg.seed, key)


def _load_anchors(paths: RunPaths) -> envs.ScoreAnchors:
    raw = json.loads(_require(paths.anchors, "gen-data", "score anchors").read_text())
    return envs.ScoreAnchors(raw["random"], raw["expert"])


def _load_dataset(paths: RunPaths) -> prefdata.UnlabeledDataset:
    return prefdata.load_dataset(_require(paths.dataset, "gen-data", "unlabeled dataset"))


# --- stages --------------------------------------------------------------

def cmd_gen_data(cfg: PipelineConfig) -> dict:
    """Roll out the behavior policy and write dataset, reward sidecar and anchors."""
    paths = RunPaths(ensure_writable(cfg.out_dir))
    env = cfg.env_obj()
    ds, rewards = envs.generate_offline_dataset(env, cfg.data.quality, cfg.data.n_traj, _rng(cfg, "gen-data"),
                                                noise_scale=cfg.data.noise_scale)
    anchors = envs.estimate_anchors(env, _rng(cfg, "anchors"), cfg.data.anchor_episodes)
    prefdata.save_dataset(ds, paths.dataset)
    prefdata.save_rewards(rewards, paths.sidecar)
    _write_json(paths.anchors, anchors.to_dict())
    log.info("gen-data: %d trajectories, %d transitions; anchors random=%.3f expert=%.3f",
             len(ds.trajectories), ds.n_transitions, anchors.random, anchors.expert)
    return {"dataset": str(paths.dataset), "sidecar": str(paths.sidecar), "anchors": str(paths.anchors)}


def cmd_label(cfg: PipelineConfig) -> dict:
    """Label random segment pairs with the scripted teacher and write canonical pairs."""
    paths = RunPaths(ensure_writable(cfg.out_dir))
    ds = _load_dataset(paths)
    if not paths.sidecar.exists():
        raise MissingArtifactError(
            f"no ground-truth reward sidecar at {paths.sidecar}; only scripted-teacher labels are "
            "supported (human labeling is out of scope), so run 'gen-data' to produce the sidecar")
    rewards = prefdata.load_rewards(paths.sidecar)
    try:
        raw = prefdata.label_pairs(ds, cfg.label.H, cfg.label.n_pairs, prefdata.sidecar_oracle(ds, rewards),
                                   _rng(cfg, "label"))
        prefs = prefdata.canonicalize(raw, cfg.label.tie_policy, provenance="scripted")
    except ValueError as e:
        raise StageFailed(f"label: {e}") from e
    prefdata.save_preferences(prefs, paths.preferences)
    n_ties = sum(p.label == 0.5 for p in raw)
    log.info("label: %d raw pairs (%d ties), %d canonical pairs written", len(raw), n_ties, len(prefs.pairs))
    return {"preferences": str(paths.preferences), "n_pairs": len(prefs.pairs), "n_ties": n_ties}


def _check_method(method: str):
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {list(METHODS)}")


def load_reward(paths: RunPaths, method: str):
    path = _require(paths.reward_model(method), "train-reward", f"{method} reward model")
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") == "bt":
        return bt_mod.bt_from_checkpoint(arrays, meta)
    return diffusion.model_from_checkpoint(arrays, meta)


def cmd_train_reward(cfg: PipelineConfig, method: str) -> dict:
    """Fit the chosen reward model on the canonical preference file."""
    _check_method(method)
    if method not in TRAINABLE:
        raise UnsupportedError(f"method {method!r} has no reward model to train; "
                               f"train-reward supports {list(TRAINABLE)}")
    paths = RunPaths(ensure_writable(cfg.out_dir))
    ds = _load_dataset(paths)
    prefs = prefdata.load_preferences(_require(paths.preferences, "label", "preference file"), ds)
    rng = _rng(cfg, "train-reward", method)
    try:
        if method == "bt":
            model = bt_mod.train_bt(prefs, cfg.bt_config(), rng)
            bt_mod.save_bt(paths.reward_model(method), model)
        else:
            model = diffusion.train_reward_model(prefs, cfg.reward_config(method), rng)
            diffusion.save_reward_model(paths.reward_model(method), model)
    except diffusion.TrainingDiverged as e:
        raise StageFailed(f"train-reward ({method}): {e}") from e
    diffusion.write_loss_csv(paths.loss_csv(method), model.loss_curve)
    log.info("train-reward %s: final loss %.5f", method, model.loss_curve[-1])
    return {"model": str(paths.reward_model(method)), "loss_csv": str(paths.loss_csv(method)),
            "final_loss": float(model.loss_curve[-1])}


def cmd_annotate(cfg: PipelineConfig, method: str) -> dict:
    """Write the dataset with per-transition rewards from the chosen source.

    ``oracle`` copies the ground-truth sidecar, ``constant`` writes ones.
    Rewards are stored unstandardized; the RL stage rescales them.
    """
    _check_method(method)
    paths = RunPaths(ensure_writable(cfg.out_dir))
    ds = _load_dataset(paths)
    if method == "oracle":
        sidecar = prefdata.load_rewards(_require(paths.sidecar, "gen-data", "ground-truth reward sidecar"))
        out = ds.with_rewards([sidecar[t.id] for t in ds.trajectories], reward_source="oracle")
    elif method == "constant":
        out = ds.with_rewards([np.ones(len(t)) for t in ds.trajectories], reward_source="constant")
    else:
        model = load_reward(paths, method)
        try:
            out = diffusion.annotate_dataset(model, ds, _rng(cfg, "annotate", method))
        except ValueError as e:
            raise StageFailed(f"annotate ({method}): {e}") from e
    prefdata.save_dataset(out, paths.annotated(method))
    flat = np.concatenate([t.rewards for t in out.trajectories])
    summary = {"method": method, "min": float(flat.min()), "mean": float(flat.mean()), "max": float(flat.max()),
               "n_transitions": int(flat.size)}
    _write_json(paths.annotate_summary(method), summary)
    msg = f"annotate {method}: reward min {summary['min']:.6g} mean {summary['mean']:.6g} max {summary['max']:.6g}"
    log.info(msg)
    print(msg)
    return {"dataset": str(paths.annotated(method)), "summary": str(paths.annotate_summary(method)), **summary}


def cmd_train_policy(cfg: PipelineConfig, method: str) -> dict:
    """Train the offline policy on the annotated dataset of ``method``."""
    _check_method(method)
    paths = RunPaths(ensure_writable(cfg.out_dir))
    ds = prefdata.load_dataset(_require(paths.annotated(method), "annotate", f"{method}-annotated dataset"))
    anchors = _load_anchors(paths)
    # one stream shared by all methods: every method sees the same minibatches and noise
    rng = _rng(cfg, "train-policy")
    try:
        actor = offline_rl.train_policy(ds, cfg.rl_config(), cfg.env_obj(), anchors, rng)
    except diffusion.TrainingDiverged as e:
        raise StageFailed(f"train-policy ({method}): {e}") from e
    offline_rl.save_actor(paths.actor(method), actor, {"method": method, "algo": cfg.rl.algo})
    offline_rl.write_metrics_csv(paths.metrics_csv(method), actor.metrics)
    return {"actor": str(paths.actor(method)), "metrics_csv": str(paths.metrics_csv(method))}


def cmd_evaluate(cfg: PipelineConfig, method: str) -> dict:
    """Normalized score over ``eval.seeds`` seeds x ``eval.episodes`` episodes."""
    _check_method(method)
    paths = RunPaths(ensure_writable(cfg.out_dir))
    actor = offline_rl.load_actor(_require(paths.actor(method), "train-policy", f"{method} policy"))
    anchors = _load_anchors(paths)
    env = cfg.env_obj()
    per_seed, raw, episodes = [], [], []
    for i in range(cfg.eval.seeds):
        res = offline_rl.evaluate_policy(actor, env, anchors, cfg.eval.episodes, Rng(cfg.seed, (_STAGE_KEY["evaluate"], i)))
        per_seed.append(res.mean)
        raw.append(res.raw_mean)
        episodes.append([float(s) for s in res.scores])
    report = {"method": method, "algo": cfg.rl.algo, "seeds": list(range(cfg.eval.seeds)),
              "episodes_per_seed": cfg.eval.episodes, "per_seed": per_seed, "raw_per_seed": raw,
              "episode_scores": episodes, "mean": float(np.mean(per_seed)), "std": float(np.std(per_seed))}
    _write_json(paths.report_json(method), report)
    paths.report_csv(method).parent.mkdir(parents=True, exist_ok=True)
    with open(paths.report_csv(method), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "normalized_score", "raw_return"])
        for i, (s, r) in enumerate(zip(per_seed, raw)):
            w.writerow([i, repr(s), repr(r)])
    log.info("evaluate %s: %.2f +- %.2f", method, report["mean"], report["std"])
    return {"report_json": str(paths.report_json(method)), "report_csv": str(paths.report_csv(method)),
            "mean": report["mean"], "std": report["std"]}


def write_comparison(cfg: PipelineConfig, methods) -> dict:
    """Collect per-method reports into one table (one row per method)."""
    paths = RunPaths(cfg.out_dir)
    rows = []
    for m in methods:
        rep = json.loads(_require(paths.report_json(m), "evaluate", f"{m} evaluation report").read_text())
        rows.append({"method": m, "mean": rep["mean"], "std": rep["std"], "per_seed": rep["per_seed"]})
    table = {"algo": cfg.rl.algo, "rows": rows}
    by = {r["method"]: r["mean"] for r in rows}
    if "dpr" in by and "bt" in by:
        # reported for information only
        table["dpr_minus_bt"] = by["dpr"] - by["bt"]
    _write_json(paths.comparison_json, table)
    with open(paths.comparison_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "mean", "std"] + [f"seed_{i}" for i in range(cfg.eval.seeds)])
        for r in rows:
            w.writerow([r["method"], repr(r["mean"]), repr(r["std"])] + [repr(s) for s in r["per_seed"]])
    return {"comparison_csv": str(paths.comparison_csv), "comparison_json": str(paths.comparison_json)}


def cmd_pipeline(cfg: PipelineConfig, methods=None) -> dict:
    """Run every stage in order for each method and write the comparison table."""
    methods = list(methods or cfg.methods)
    for m in methods:
        _check_method(m)
    ensure_writable(cfg.out_dir)
    stages = {}
    timings = {}

    def run(name, fn, *args):
        t0 = time.perf_counter()
        stages[name] = fn(cfg, *args)
        timings[name] = time.perf_counter() - t0

    run("gen-data", cmd_gen_data)
    run("label", cmd_label)
    for m in methods:
        if m in TRAINABLE:
            run(f"train-reward/{m}", cmd_train_reward, m)
        run(f"annotate/{m}", cmd_annotate, m)
        run(f"train-policy/{m}", cmd_train_policy, m)
        run(f"evaluate/{m}", cmd_evaluate, m)
    t0 = time.perf_counter()
    stages["comparison"] = write_comparison(cfg, methods)
    timings["comparison"] = time.perf_counter() - t0
    write_manifest(cfg, stages, timings)
    return stages


# --- manifest ------------------------------------------------------------

def _git_stamp() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def write_manifest(cfg: PipelineConfig, stages: dict, timings: dict) -> Path:
    """Merge this command's outputs into ``manifest.json`` atomically.

    Only paths that exist are recorded.  Timings and the version stamp live
    here so that every other artifact stays byte-reproducible.
    """
    paths = RunPaths(cfg.out_dir)
    old = {}
    if paths.manifest.exists():
        try:
            old = json.loads(paths.manifest.read_text())
        except json.JSONDecodeError:
            old = {}
    if old.get("config") != cfg.to_dict():
        old = {}  # a different config invalidates earlier entries
    artifacts = dict(old.get("artifacts", {}))
    for name, out in stages.items():
        files = {k: v for k, v in out.items() if isinstance(v, str) and Path(v).exists()}
        artifacts[name] = files
    manifest = {
        "config": cfg.to_dict(),
        "artifacts": artifacts,
        "timings_s": {**old.get("timings_s", {}), **{k: round(v, 3) for k, v in timings.items()}},
        "version": __version__,
        "git": _git_stamp(),
    }
    return _write_json(paths.manifest, manifest)

import numpy as np
import pytest

from diffpref import pipeline as pl
from diffpref.prefdata import LabeledPrefDataset, PreferencePair, Segment

TINY = {
    "seed": 3,
    "methods": ["dpr", "cdpr", "bt", "oracle"],
    "env": {"horizon": 30},
    "data": {"n_traj": 8, "anchor_episodes": 10},
    "label": {"H": 10, "n_pairs": 30},
    "diffusion": {"hidden": [16, 16], "epochs": 3, "batch_size": 64, "mc_samples": 2},
    "bt": {"hidden": [16], "epochs": 3, "batch_size": 64},
    "rl": {"steps": 40, "batch_size": 32, "hidden": [16, 16], "eval_interval": 20, "log_interval": 20,
           "eval_episodes": 2},
    "eval": {"seeds": 2, "episodes": 3},
}


def tiny_dict(out_dir, **sections):
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    raw["out_dir"] = str(out_dir)
    for k, v in sections.items():
        if isinstance(v, dict):
            raw[k] = {**raw.get(k, {}), **v}
        else:
            raw[k] = v
    return raw


@pytest.fixture
def tiny_cfg(tmp_path):
    """Factory for a seconds-scale pipeline config rooted in a temp directory."""
    def make(sub="run", **sections):
        return pl.config_from_dict(tiny_dict(tmp_path / sub, **sections))
    return make


def separable_pairs(n_pairs=200, H=5, seed=0, d=4, ds=2):
    """Preferred steps ~ N(+1, 0.1 I), rejected ~ N(-1, 0.1 I) in ``d`` dims (``ds`` state dims)."""
    g = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        pos = g.normal(1.0, np.sqrt(0.1), (H, d))
        neg = g.normal(-1.0, np.sqrt(0.1), (H, d))
        pairs.append(PreferencePair(Segment(2 * i, 0, neg[:, :ds], neg[:, ds:]),
                                    Segment(2 * i + 1, 0, pos[:, :ds], pos[:, ds:]), 1.0))
    return LabeledPrefDataset(pairs, H)


# --- acceptance report -----------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")
    config._acceptance_rows = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        item.config._acceptance_rows.append((mark.args[0], item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = sorted(getattr(config, "_acceptance_rows", []))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n, name, ok, detail in rows:
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())

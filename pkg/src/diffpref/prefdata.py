"""Offline transitions, fixed-length segments and preference pairs.

File formats
------------
All files are JSON Lines (UTF-8, one JSON object per line).  Floats are
written with Python's shortest round-trip repr, so a save/load cycle is
bit-exact.

Trajectory dataset (``*.jsonl``)::

    line 1  {"format": "diffpref.trajectories", "version": 1, "env": str,
             "state_dim": int, "action_dim": int, "n_trajectories": int,
             "has_rewards": bool, "metadata": {...}}
    line k  {"id": int, "states": [[...], ...], "actions": [[...], ...],
             "next_states": [[...], ...], "dones": [bool, ...],
             "rewards": [float, ...]}        # "rewards" only if has_rewards

Preference file::

    line 1  {"format": "diffpref.preferences", "version": 1, "H": int,
             "provenance": "scripted" | "external", "n_pairs": int}
    line k  {"traj_id0": int, "start0": int, "traj_id1": int, "start1": int,
             "H": int, "y": float}

Ground-truth reward sidecar::

    line 1  {"format": "diffpref.rewards", "version": 1, "n_trajectories": int}
    line k  {"id": int, "rewards": [float, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .tensor_core import Rng

FORMAT_VERSION = 1
TIE_TOLERANCE = 1e-9
TIE_POLICIES = ("drop", "both")


class DataFormatError(ValueError):
    """A dataset or preference file violates its schema."""


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float | None
    next_state: np.ndarray
    done: bool


@dataclass
class Trajectory:
    id: int
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    rewards: np.ndarray | None = None

    def __len__(self):
        return len(self.states)

    def __eq__(self, other):
        if not isinstance(other, Trajectory) or self.id != other.id:
            return False
        if (self.rewards is None) != (other.rewards is None):
            return False
        names = ("states", "actions", "next_states", "dones") + (("rewards",) if self.rewards is not None else ())
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)

    __hash__ = None

    def transitions(self) -> Iterator[Transition]:
        for i in range(len(self)):
            r = None if self.rewards is None else float(self.rewards[i])
            yield Transition(self.states[i], self.actions[i], r, self.next_states[i], bool(self.dones[i]))


@dataclass
class UnlabeledDataset:
    trajectories: list[Trajectory]
    state_dim: int
    action_dim: int
    env: str = "unknown"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_dataset(self)

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def has_rewards(self) -> bool:
        return bool(self.trajectories) and all(t.rewards is not None for t in self.trajectories)

    def by_id(self, traj_id: int) -> Trajectory:
        index = self._index()
        if traj_id not in index:
            raise KeyError(f"no trajectory with id {traj_id}")
        return index[traj_id]

    def _index(self):
        # rebuilt lazily; datasets are treated as immutable after construction
        if getattr(self, "_id_index", None) is None or len(self._id_index) != len(self.trajectories):
            object.__setattr__(self, "_id_index", {t.id: t for t in self.trajectories})
        return self._id_index

    def flat(self) -> dict[str, np.ndarray]:
        """Concatenate all trajectories into transition-major arrays."""
        if not self.trajectories:
            ds, da = self.state_dim, self.action_dim
            return {"states": np.zeros((0, ds)), "actions": np.zeros((0, da)),
                    "next_states": np.zeros((0, ds)), "dones": np.zeros(0, bool), "rewards": None}
        cat = lambda name: np.concatenate([getattr(t, name) for t in self.trajectories])
        return {"states": cat("states"), "actions": cat("actions"), "next_states": cat("next_states"),
                "dones": cat("dones"), "rewards": cat("rewards") if self.has_rewards else None}

    def without_rewards(self) -> "UnlabeledDataset":
        return replace(self, trajectories=[replace(t, rewards=None) for t in self.trajectories],
                       metadata=dict(self.metadata))

    def with_rewards(self, rewards: Sequence[np.ndarray], **meta) -> "UnlabeledDataset":
        if len(rewards) != len(self.trajectories):
            raise ValueError(f"got {len(rewards)} reward arrays for {len(self.trajectories)} trajectories")
        trajs = []
        for t, r in zip(self.trajectories, rewards):
            r = np.asarray(r, dtype=np.float64)
            if r.shape != (len(t),):
                raise ValueError(f"trajectory {t.id}: reward shape {r.shape} != ({len(t)},)")
            trajs.append(replace(t, rewards=r))
        return replace(self, trajectories=trajs, metadata={**self.metadata, **meta})


def validate_dataset(ds: UnlabeledDataset) -> None:
    low = ds.metadata.get("action_low")
    high = ds.metadata.get("action_high")
    for name, b in (("action_low", low), ("action_high", high)):
        if b is not None and np.shape(b) != (ds.action_dim,):
            raise DataFormatError(f"metadata {name} has {np.size(b)} entries, header declares action dim "
                                  f"{ds.action_dim}")
    for k, t in enumerate(ds.trajectories):
        n = len(t.states)
        if n == 0:
            raise DataFormatError(f"trajectory record {k} (id {t.id}) is empty")
        for name, arr, dim in (("states", t.states, ds.state_dim), ("actions", t.actions, ds.action_dim),
                               ("next_states", t.next_states, ds.state_dim)):
            if arr.ndim != 2 or arr.shape[1] != dim:
                raise DataFormatError(f"trajectory record {k} (id {t.id}): {name} has shape "
                                      f"{arr.shape}, header declares dim {dim}")
            if arr.shape[0] != n:
                raise DataFormatError(f"trajectory record {k} (id {t.id}): {name} length {arr.shape[0]} != {n}")
        if t.dones.shape != (n,):
            raise DataFormatError(f"trajectory record {k} (id {t.id}): dones length {t.dones.shape} != ({n},)")
        if t.rewards is not None and t.rewards.shape != (n,):
            raise DataFormatError(f"trajectory record {k} (id {t.id}): rewards length {t.rewards.shape} != ({n},)")
        if low is not None and (t.actions < np.asarray(low) - 1e-12).any():
            raise DataFormatError(f"trajectory record {k} (id {t.id}): action below declared bound")
        if high is not None and (t.actions > np.asarray(high) + 1e-12).any():
            raise DataFormatError(f"trajectory record {k} (id {t.id}): action above declared bound")


@dataclass(frozen=True)
class Segment:
    traj_id: int
    start: int
    states: np.ndarray
    actions: np.ndarray

    @property
    def H(self) -> int:
        return len(self.states)

    @property
    def sa(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions], axis=1)

    def __eq__(self, other):
        return (isinstance(other, Segment) and self.traj_id == other.traj_id and self.start == other.start
                and np.array_equal(self.states, other.states) and np.array_equal(self.actions, other.actions))

    __hash__ = None


@dataclass(frozen=True)
class PreferencePair:
    seg0: Segment
    seg1: Segment
    label: float

    def __post_init__(self):
        if self.label not in (0.0, 0.5, 1.0):
            raise ValueError(f"preference label must be 0, 0.5 or 1, got {self.label!r}")
        if self.seg0.H != self.seg1.H or self.seg0.sa.shape[1] != self.seg1.sa.shape[1]:
            raise ValueError("segments of a pair must share length and dimensions")


@dataclass
class LabeledPrefDataset:
    pairs: list[PreferencePair]
    H: int
    provenance: str = "scripted"

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("a labeled preference dataset needs at least one pair")
        if self.provenance not in ("scripted", "external"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for i, p in enumerate(self.pairs):
            if p.label != 1.0:
                raise ValueError(f"pair {i} is not canonical (label {p.label})")
            if p.seg0.H != self.H:
                raise ValueError(f"pair {i} has segment length {p.seg0.H}, dataset H={self.H}")

    def __len__(self):
        return len(self.pairs)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """``(preferred, rejected)`` stacked (s, a) arrays of shape (N, H, ds + da)."""
        return (np.stack([p.seg1.sa for p in self.pairs]), np.stack([p.seg0.sa for p in self.pairs]))


# --- segment sampling and labeling ---------------------------------------

def segment_at(dataset: UnlabeledDataset, traj_id: int, start: int, H: int) -> Segment:
    t = dataset.by_id(traj_id)
    if start < 0 or start + H > len(t):
        raise ValueError(f"window [{start}, {start + H}) outside trajectory {traj_id} of length {len(t)}")
    return Segment(traj_id, start, t.states[start:start + H], t.actions[start:start + H])


def sample_segments(dataset: UnlabeledDataset, H: int, count: int, rng: Rng) -> list[Segment]:
    """Draw ``count`` windows of length ``H``, uniform over every valid (trajectory, start)."""
    if H < 1:
        raise ValueError(f"segment length must be >= 1, got {H}")
    lengths = np.array([len(t) for t in dataset.trajectories])
    n_windows = np.maximum(lengths - H + 1, 0)
    if n_windows.sum() == 0:
        longest = int(lengths.max()) if len(lengths) else 0
        raise ValueError(f"no trajectory is long enough for H={H} (max available length {longest})")
    offsets = np.concatenate([[0], np.cumsum(n_windows)])
    flat = rng.integers(0, offsets[-1], size=count)
    which = np.searchsorted(offsets, flat, side="right") - 1
    out = []
    for k, pos in zip(which, flat):
        t = dataset.trajectories[k]
        start = int(pos - offsets[k])
        out.append(Segment(t.id, start, t.states[start:start + H], t.actions[start:start + H]))
    return out


def scripted_teacher_label(seg0: Segment, seg1: Segment, true_reward: Callable[[Segment], np.ndarray],
                           tol: float = TIE_TOLERANCE) -> float:
    """1 if seg1 earns more true reward, 0 if less, 0.5 within ``tol``."""
    r0 = float(np.sum(true_reward(seg0)))
    r1 = float(np.sum(true_reward(seg1)))
    if abs(r1 - r0) <= tol:
        return 0.5
    return 1.0 if r1 > r0 else 0.0


def sidecar_oracle(dataset: UnlabeledDataset, rewards: dict[int, np.ndarray]) -> Callable[[Segment], np.ndarray]:
    """Per-step ground truth looked up from a reward sidecar keyed by trajectory id."""
    def oracle(seg: Segment) -> np.ndarray:
        return rewards[seg.traj_id][seg.start:seg.start + seg.H]
    return oracle


def canonicalize(pairs, tie_policy: str = "drop", provenance: str | None = None) -> LabeledPrefDataset:
    """Reorder every pair so the preferred segment is second and the label is 1.

    Ties are dropped by default; ``tie_policy="both"`` keeps each tie as
    two canonical pairs, one per ordering.
    """
    if tie_policy not in TIE_POLICIES:
        raise ValueError(f"tie_policy must be one of {TIE_POLICIES}, got {tie_policy!r}")
    if isinstance(pairs, LabeledPrefDataset):
        provenance = provenance or pairs.provenance
        pairs = pairs.pairs
    out = []
    for i, p in enumerate(pairs):
        if p.label == 1.0:
            out.append(p)
        elif p.label == 0.0:
            out.append(PreferencePair(p.seg1, p.seg0, 1.0))
        elif p.label == 0.5:
            if tie_policy == "both":
                out.append(PreferencePair(p.seg0, p.seg1, 1.0))
                out.append(PreferencePair(p.seg1, p.seg0, 1.0))
        else:
            raise ValueError(f"pair {i}: invalid label {p.label!r}")
    if not out:
        raise ValueError("no pairs left after canonicalization")
    return LabeledPrefDataset(out, out[0].seg0.H, provenance or "scripted")


def label_pairs(dataset: UnlabeledDataset, H: int, n_pairs: int, oracle, rng: Rng,
                tol: float = TIE_TOLERANCE) -> list[PreferencePair]:
    segs = sample_segments(dataset, H, 2 * n_pairs, rng)
    return [PreferencePair(a, b, scripted_teacher_label(a, b, oracle, tol)) for a, b in zip(segs[0::2], segs[1::2])]


# --- serialization -------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def _write_lines(path, lines: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def _read_lines(path, fmt: str):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not raw:
        raise DataFormatError(f"{path}: empty file")
    records = []
    for lineno, ln in enumerate(raw, start=1):
        try:
            records.append(json.loads(ln))
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
    header = records[0]
    if not isinstance(header, dict) or header.get("format") != fmt:
        raise DataFormatError(f"{path}:1: expected a {fmt!r} header")
    if header.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"{path}:1: unsupported format version {header.get('version')!r}")
    return header, records[1:]


def _tolist(a: np.ndarray):
    return a.tolist()


def save_dataset(dataset: UnlabeledDataset, path) -> Path:
    has_rewards = dataset.has_rewards
    header = {"format": "diffpref.trajectories", "version": FORMAT_VERSION, "env": dataset.env,
              "state_dim": dataset.state_dim, "action_dim": dataset.action_dim,
              "n_trajectories": len(dataset), "has_rewards": has_rewards, "metadata": dataset.metadata}
    lines = [_dump(header)]
    for t in dataset.trajectories:
        rec = {"id": t.id, "states": _tolist(t.states), "actions": _tolist(t.actions),
               "next_states": _tolist(t.next_states), "dones": [bool(d) for d in t.dones]}
        if has_rewards:
            rec["rewards"] = _tolist(t.rewards)
        lines.append(_dump(rec))
    return _write_lines(path, lines)


def _matrix(rec, key, dim, where):
    if key not in rec:
        raise DataFormatError(f"{where}: missing field {key!r}")
    arr = np.asarray(rec[key], dtype=np.float64)
    if arr.size == 0:
        raise DataFormatError(f"{where}: empty trajectory")
    if arr.ndim != 2 or arr.shape[1] != dim:
        got = arr.shape[1] if arr.ndim == 2 else "ragged"
        raise DataFormatError(f"{where}: {key} dim {got} does not match header dim {dim}")
    return arr


def load_dataset(path) -> UnlabeledDataset:
    header, records = _read_lines(path, "diffpref.trajectories")
    ds, da = header["state_dim"], header["action_dim"]
    if header.get("n_trajectories", len(records)) != len(records):
        raise DataFormatError(f"{path}: header declares {header['n_trajectories']} trajectories, "
                              f"file has {len(records)}")
    trajs = []
    for idx, rec in enumerate(records):
        where = f"{path}: record {idx} (line {idx + 2})"
        try:
            states = _matrix(rec, "states", ds, where)
            actions = _matrix(rec, "actions", da, where)
            next_states = _matrix(rec, "next_states", ds, where)
            dones = np.asarray(rec["dones"], dtype=bool)
            rewards = np.asarray(rec["rewards"], dtype=np.float64) if header["has_rewards"] else None
            trajs.append(Trajectory(int(rec["id"]), states, actions, next_states, dones, rewards))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, DataFormatError):
                raise
            raise DataFormatError(f"{where}: {e}") from None
    try:
        return UnlabeledDataset(trajs, ds, da, header.get("env", "unknown"), header.get("metadata", {}))
    except DataFormatError as e:
        raise DataFormatError(f"{path}: {e}") from None


def save_preferences(prefs: LabeledPrefDataset, path) -> Path:
    header = {"format": "diffpref.preferences", "version": FORMAT_VERSION, "H": prefs.H,
              "provenance": prefs.provenance, "n_pairs": len(prefs)}
    lines = [_dump(header)]
    for p in prefs.pairs:
        lines.append(_dump({"traj_id0": p.seg0.traj_id, "start0": p.seg0.start, "traj_id1": p.seg1.traj_id,
                            "start1": p.seg1.start, "H": p.seg0.H, "y": p.label}))
    return _write_lines(path, lines)


def load_preferences(path, dataset: UnlabeledDataset) -> LabeledPrefDataset:
    """Load a preference file, resolving segment windows against ``dataset``."""
    header, records = _read_lines(path, "diffpref.preferences")
    pairs = []
    for idx, rec in enumerate(records):
        where = f"{path}: record {idx} (line {idx + 2})"
        try:
            H = int(rec["H"])
            if H != header["H"]:
                raise DataFormatError(f"{where}: H={H} differs from header H={header['H']}")
            s0 = segment_at(dataset, int(rec["traj_id0"]), int(rec["start0"]), H)
            s1 = segment_at(dataset, int(rec["traj_id1"]), int(rec["start1"]), H)
            pairs.append(PreferencePair(s0, s1, float(rec["y"])))
        except DataFormatError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{where}: {e}") from None
    return LabeledPrefDataset(pairs, header["H"], header.get("provenance", "external"))


def save_rewards(rewards: dict[int, np.ndarray], path) -> Path:
    lines = [_dump({"format": "diffpref.rewards", "version": FORMAT_VERSION, "n_trajectories": len(rewards)})]
    for k in sorted(rewards):
        lines.append(_dump({"id": int(k), "rewards": _tolist(np.asarray(rewards[k], dtype=np.float64))}))
    return _write_lines(path, lines)


def load_rewards(path) -> dict[int, np.ndarray]:
    _, records = _read_lines(path, "diffpref.rewards")
    out = {}
    for idx, rec in enumerate(records):
        try:
            out[int(rec["id"])] = np.asarray(rec["rewards"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{path}: record {idx} (line {idx + 2}): {e}") from None
    return out

"""Multi-layer perceptrons and parameter checkpoints."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .rng import Rng

ACTIVATIONS = {
    "silu": ad.silu,
    "tanh": ad.tanh,
    "relu": ad.relu,
}

DEFAULT_ACTIVATION = "silu"


@dataclass
class MlpParams:
    """Weights and biases of a fully connected network.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; the activation follows
    every layer except the last.  Leaves may be ndarrays or Tensors.
    """

    in_dim: int
    hidden: tuple
    out_dim: int
    activation: str = DEFAULT_ACTIVATION
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    _tree_fields = ("weights", "biases")

    @property
    def layer_dims(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.out_dim]

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum((d[i] + 1) * d[i + 1] for i in range(len(d) - 1))

    def arch(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": list(self.hidden), "out_dim": self.out_dim,
                "activation": self.activation}

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = ad.value(w)
            out[f"{prefix}b{i}"] = ad.value(b)
        return out

    @classmethod
    def from_arrays(cls, arch: dict, arrays: dict, prefix: str = "") -> "MlpParams":
        n_layers = len(arch["hidden"]) + 1
        p = cls(arch["in_dim"], tuple(arch["hidden"]), arch["out_dim"], arch["activation"],
                [arrays[f"{prefix}W{i}"] for i in range(n_layers)],
                [arrays[f"{prefix}b{i}"] for i in range(n_layers)])
        p.validate()
        return p

    def validate(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")
        dims = self.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError(f"expected {len(dims) - 1} layers, got {len(self.weights)} weights")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (dims[i], dims[i + 1])
            if tuple(w.shape) != want or tuple(b.shape) != (dims[i + 1],):
                raise ValueError(f"layer {i}: weight {tuple(w.shape)} / bias {tuple(b.shape)} "
                                 f"do not match expected {want}")


def init_mlp(in_dim: int, hidden, out_dim: int, rng: Rng, activation: str = DEFAULT_ACTIVATION,
             out_scale: float = 1.0) -> MlpParams:
    """Fan-in scaled uniform init: every weight and bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    ``out_scale`` shrinks the last layer, which keeps initial outputs
    near zero for value heads and denoisers.
    """
    dims = [in_dim, *hidden, out_dim]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[i])
        if i == len(dims) - 2:
            bound *= out_scale
        weights.append(rng.uniform(-bound, bound, (dims[i], dims[i + 1])))
        biases.append(rng.uniform(-bound, bound, (dims[i + 1],)))
    p = MlpParams(in_dim, tuple(hidden), out_dim, activation, weights, biases)
    p.validate()
    return p


def mlp_forward(params: MlpParams, x):
    """Apply the network to a batch ``x`` of shape ``(batch, in_dim)``.

    Works on plain arrays (returns an array) or Tensors (returns a Tensor).
    """
    shape = ad.value(x).shape
    if len(shape) == 1:
        x = ad.reshape(x, (1, shape[0]))
        shape = (1, shape[0])
    if shape[-1] != params.in_dim:
        raise ValueError(f"layer 0: input has last dimension {shape[-1]}, expected {params.in_dim}")
    act = ACTIVATIONS[params.activation]
    n = len(params.weights)
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        w_shape = ad.value(w).shape
        if ad.value(h).shape[-1] != w_shape[0]:
            raise ValueError(f"layer {i}: input width {ad.value(h).shape[-1]} does not match "
                             f"weight shape {w_shape}")
        h = ad.affine(h, w, b)
        if i < n - 1:
            h = act(h)
    if not isinstance(h, ad.Tensor) and not np.isfinite(h).all():
        raise ad.NonFiniteError("network output is not finite")
    return h


# --- checkpoints ---------------------------------------------------------
# Layout: a numpy .npz archive.  Every parameter array is stored under its
# name as float64; the JSON metadata (architecture, config, stats) is stored
# as a uint8 array under "__meta__".  No pickling.

META_KEY = "__meta__"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    payload = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in sorted(arrays.items())}
    tmp = path.with_name(path.name + ".tmp")
    # np.savez stamps members with the wall clock; a fixed date keeps files byte-identical
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in [(META_KEY, blob), *payload.items()]:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        if META_KEY not in z.files:
            raise ValueError(f"{path}: not a checkpoint (missing {META_KEY})")
        meta = json.loads(z[META_KEY].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != META_KEY}
    return arrays, meta


def save_mlp(path, params: MlpParams, meta: dict | None = None) -> Path:
    return save_checkpoint(path, params.to_arrays(), {"mlp": params.arch(), **(meta or {})})


def load_mlp(path) -> tuple[MlpParams, dict]:
    arrays, meta = load_checkpoint(path)
    return MlpParams.from_arrays(meta["mlp"], arrays), meta

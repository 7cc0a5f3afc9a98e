"""Parameter containers, MLPs, an LSTM cell, Adam, and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractViolation, DimensionError

CHECKPOINT_MAGIC = b"ADAPTKF-CKPT"
CHECKPOINT_VERSION = 1


class ParamSet(dict):
    """Name -> Tensor map; iteration is always in sorted-name order."""

    def __setitem__(self, name, value):
        if not isinstance(value, Tensor):
            raise TypeError(f"parameter {name!r} must be a Tensor")
        super().__setitem__(name, value)

    def __iter__(self):
        return iter(sorted(super().keys()))

    def keys(self):
        return list(iter(self))

    def items(self):
        return [(k, dict.__getitem__(self, k)) for k in self]

    def values(self):
        return [dict.__getitem__(self, k) for k in self]

    def merged(self, other: "ParamSet", prefix: str) -> "ParamSet":
        """Add ``other``'s tensors under ``prefix.``; returns self."""
        for k, v in other.items():
            name = f"{prefix}.{k}"
            if name in self:
                raise ConfigurationError(f"duplicate parameter name {name!r}")
            self[name] = v
        return self

    def subset(self, prefix: str) -> "ParamSet":
        out = ParamSet()
        cut = len(prefix) + 1
        for k, v in self.items():
            if k.startswith(prefix + "."):
                out[k[cut:]] = v
        return out

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.values()))


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigurationError("layer_sizes needs at least input and output sizes")
        # a zero-width input is allowed (e.g. action-free tasks feed only part of a concat)
        if any(s < 1 for s in sizes[1:]) or sizes[0] < 0:
            raise ConfigurationError(f"layer sizes must be >= 1, got {sizes}")
        if self.hidden_activation != "tanh" or self.output_activation != "identity":
            raise ConfigurationError("only tanh hidden / identity output activations are supported")

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


def init_params(cfg: MlpConfig, seed: int) -> ParamSet:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for i, (fan_in, fan_out) in enumerate(zip(cfg.layer_sizes[:-1], cfg.layer_sizes[1:])):
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        params[f"layer{i}.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True
        )
        params[f"layer{i}.bias"] = Tensor(np.zeros((1, fan_out)), requires_grad=True)
    return params


def _get(params: ParamSet, name: str, shape: tuple[int, int]) -> Tensor:
    try:
        t = dict.__getitem__(params, name)
    except KeyError:
        raise ConfigurationError(f"missing parameter {name!r}") from None
    if t.shape != shape:
        raise ConfigurationError(f"parameter {name!r} has shape {t.shape}, expected {shape}")
    return t


def mlp_forward(cfg: MlpConfig, params: ParamSet, x: Tensor) -> Tensor:
    """Affine layers with tanh between them. ``x`` may hold one sample per row."""
    if x.shape[1] != cfg.d_in:
        raise DimensionError(f"mlp input has width {x.shape[1]}, config expects {cfg.d_in}")
    h = x
    last = cfg.n_layers - 1
    for i, (fan_in, fan_out) in enumerate(zip(cfg.layer_sizes[:-1], cfg.layer_sizes[1:])):
        w = _get(params, f"layer{i}.weight", (fan_in, fan_out))
        b = _get(params, f"layer{i}.bias", (1, fan_out))
        h = ad.add_bias(ad.matmul(h, w), b)
        if i != last:
            h = ad.tanh(h)
    return h


# ---------------------------------------------------------------- LSTM


@dataclass
class LstmCellState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, d_hidden: int) -> "LstmCellState":
        return cls(Tensor(np.zeros((1, d_hidden))), Tensor(np.zeros((1, d_hidden))))


def init_lstm_params(d_in: int, d_hidden: int, seed: int) -> ParamSet:
    """Gate blocks are ordered (input, forget, candidate, output) along columns."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d_hidden)
    p = ParamSet()
    p["w_x"] = Tensor(rng.uniform(-bound, bound, size=(d_in, 4 * d_hidden)), requires_grad=True)
    p["w_h"] = Tensor(rng.uniform(-bound, bound, size=(d_hidden, 4 * d_hidden)), requires_grad=True)
    p["bias"] = Tensor(np.zeros((1, 4 * d_hidden)), requires_grad=True)
    return p


def lstm_gates(params: ParamSet, state: LstmCellState, x_proj: Tensor) -> tuple[LstmCellState, Tensor]:
    """One LSTM step given the already-projected input ``x @ w_x``."""
    d = state.h.shape[1]
    pre = ad.add_bias(ad.add(x_proj, ad.matmul(state.h, _get(params, "w_h", (d, 4 * d)))),
                      _get(params, "bias", (1, 4 * d)))
    i = ad.sigmoid(ad.slice_cols(pre, 0, d))
    f = ad.sigmoid(ad.slice_cols(pre, d, 2 * d))
    g = ad.tanh(ad.slice_cols(pre, 2 * d, 3 * d))
    o = ad.sigmoid(ad.slice_cols(pre, 3 * d, 4 * d))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return LstmCellState(h, c), h


def lstm_step(params: ParamSet, state: LstmCellState, x: Tensor) -> tuple[LstmCellState, Tensor]:
    w_x = dict.get(params, "w_x")
    if w_x is None:
        raise ConfigurationError("missing parameter 'w_x'")
    if x.shape != (1, w_x.shape[0]):
        raise DimensionError(f"lstm input shape {x.shape}, expected (1, {w_x.shape[0]})")
    if state.h.shape != (1, w_x.shape[1] // 4) or state.c.shape != state.h.shape:
        raise DimensionError(f"lstm state shapes {state.h.shape}/{state.c.shape} do not match params")
    return lstm_gates(params, state, ad.matmul(x, w_x))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values()
                                   if p.grad is not None))
    if max_norm is not None and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def adam_update(opt: AdamState, params: ParamSet) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise ContractViolation(f"no gradient for parameter {name!r}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = p.grad
        m = opt.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            opt.v[name] = np.zeros_like(g)
        m = b1 * m + (1 - b1) * g
        v = b2 * opt.v[name] + (1 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        p.set_data(p.data - opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.eps))
        p.grad = None


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict) -> None:
    """Write ``arrays`` as raw little-endian float64 after a JSON header line.

    Layout::

        ADAPTKF-CKPT <version>\\n
        <json header, sorted keys>\\n
        <concatenated array bytes in sorted-name order>
    """
    names = sorted(arrays)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    meta = {"format_version": CHECKPOINT_VERSION, "header": header, "arrays": index}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" " + str(CHECKPOINT_VERSION).encode() + b"\n")
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    first, rest = raw.split(b"\n", 1)
    magic, _, version = first.partition(b" ")
    if magic != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path} is not a checkpoint file")
    if int(version) != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {int(version)}")
    meta_line, payload = rest.split(b"\n", 1)
    meta = json.loads(meta_line)
    arrays = {}
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 8
        buf = payload[entry["offset"]:entry["offset"] + n]
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return meta["header"], arrays


def paramset_from_arrays(arrays: dict[str, np.ndarray]) -> ParamSet:
    p = ParamSet()
    for k, v in arrays.items():
        p[k] = Tensor(v, requires_grad=True)
    return p

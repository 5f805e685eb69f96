"""Fully connected layers, MLPs, Adam, and the binary checkpoint format.

Checkpoint layout (all integers unsigned little-endian)::

    bytes 0..7    magic b"UDAQACKP"
    uint32        format version (currently 1)
    uint32        header length H in bytes
    H bytes       UTF-8 JSON: {"params": [[name, [dim, ...]], ...]}
    remainder     float64 little-endian values, each parameter row-major,
                  in the header's declaration order

A ``LinearLayer`` contributes ``<prefix>.weight`` ([out, in]) then
``<prefix>.bias`` ([out]).
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, MutableMapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"UDAQACKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; update aborted")
        self.name = name


@dataclass
class LinearLayer:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    """Linear layers with relu between them and identity after the last."""

    layers: list[LinearLayer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_width != b.in_width:
                raise ValueError(f"layer widths do not chain: {a.out_width} -> {b.in_width}")

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].in_width] + [l.out_width for l in self.layers]

    def named_arrays(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            yield f"{prefix}.{i}.weight", layer.weight
            yield f"{prefix}.{i}.bias", layer.bias


def init_params(widths: Sequence[int], rng: np.random.Generator | int) -> list[LinearLayer]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if len(widths) < 2:
        raise ValueError("need at least an input and an output width")
    if any(int(w) <= 0 for w in widths):
        raise ValueError(f"widths must be positive, got {list(widths)}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(LinearLayer(w, np.zeros(fan_out)))
    return layers


def linear_forward(layer_w: Tensor, layer_b: Tensor, x: Tensor) -> Tensor:
    if x.shape[-1] != layer_w.shape[1]:
        raise ad.ShapeError(f"linear: input width {x.shape[-1]} does not match layer in-width "
                            f"{layer_w.shape[1]} (input shape {x.shape})")
    h = x
    squeeze = h.data.ndim == 1
    if squeeze:
        h = ad.apply("reshape", h, shape=(1, -1))
    out = ad.matmul(h, ad.apply("transpose", layer_w)) + layer_b
    if squeeze:
        out = ad.apply("reshape", out, shape=(-1,))
    return out


def mlp_forward(net: Mlp | Sequence[tuple[Tensor, Tensor]], x: Tensor) -> Tensor:
    """Apply ``net`` along the last axis of ``x``.

    ``net`` is either an :class:`Mlp` (treated as constants) or a sequence
    of (weight, bias) Tensor pairs bound for differentiation.
    """
    pairs = bind(net) if isinstance(net, Mlp) else list(net)
    x = ad.as_tensor(x)
    for i, (w, b) in enumerate(pairs):
        x = linear_forward(w, b, x)
        if i < len(pairs) - 1:
            x = ad.relu(x)
    return x


def bind(net: Mlp, leaves: Mapping[int, Tensor] | None = None) -> list[tuple[Tensor, Tensor]]:
    """(weight, bias) Tensor pairs for ``net``, reusing ``leaves`` keyed by array id."""
    def get(arr):
        if leaves is not None and id(arr) in leaves:
            return leaves[id(arr)]
        return Tensor(arr)
    return [(get(l.weight), get(l.bias)) for l in net.layers]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> tuple[MutableMapping[str, np.ndarray], AdamState]:
    """One Adam update with bias correction, in place.

    Weight decay is coupled: ``weight_decay * theta`` is added to the
    gradient before the moment updates. Every gradient is checked before any
    parameter is touched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters {missing}")
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, theta in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def save_checkpoint(path: str | os.PathLike, arrays: Sequence[tuple[str, np.ndarray]]) -> None:
    header = json.dumps({"params": [[name, list(a.shape)] for name, a in arrays]}).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + payload
    atomic_write_bytes(path, blob)


def load_checkpoint(path: str | os.PathLike) -> list[tuple[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16:16 + hlen].decode())
        specs = [(str(name), [int(d) for d in shape]) for name, shape in header["params"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    offset = 16 + hlen
    out = []
    for name, shape in specs:
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated at parameter {name!r}")
        out.append((name, np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)))
        offset += 8 * n
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return out


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

"""Layers, the grouped parameter registry, and the split processing functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

GROUPS = ("disjoint_pre", "f_t", "precoder", "postcoder", "f_r", "heads", "keys", "unbind")
ADAPT_GROUPS = ("precoder", "postcoder", "keys", "unbind")


class ModelParams:
    """Named parameters partitioned into groups, each with a trainable flag."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._group: dict[str, str] = {}
        self.trainable: dict[str, bool] = {g: True for g in GROUPS}

    def register(self, name: str, tensor: Tensor, group: str) -> Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor
        self._group[name] = group
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def group_of(self, name: str) -> str:
        return self._group[name]

    def in_group(self, group: str) -> list[Tensor]:
        return [t for n, t in self._params.items() if self._group[n] == group]

    def trainable_params(self) -> list[Tensor]:
        return [t for n, t in self._params.items() if self.trainable[self._group[n]]]

    def set_mode(self, mode: str) -> None:
        """``train`` unfreezes every group; ``adapt`` keeps only the adaptation groups trainable."""
        if mode == "train":
            for g in GROUPS:
                self.trainable[g] = True
        elif mode == "adapt":
            for g in GROUPS:
                self.trainable[g] = g in ADAPT_GROUPS
        else:
            raise ValueError(f"unknown mode {mode!r}")

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters: {sorted(missing)}")
        for n, t in self._params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {n}: stored shape {arr.shape} != {t.shape}")
            t.data[...] = arr


# ---------------------------------------------------------------------------
# layers


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Linear:
    kind = "linear"

    def __init__(self, params: ModelParams, name: str, group: str, n_in: int, n_out: int,
                 rng: np.random.Generator, bias: bool = True, weight: np.ndarray | None = None):
        w = _he(rng, (n_in, n_out), n_in) if weight is None else np.array(weight, dtype=np.float64)
        self.w = params.register(f"{name}.w", dc.tensor(w), group)
        self.b = params.register(f"{name}.b", dc.tensor(np.zeros(n_out)), group) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"linear: input {x.shape} does not end in {self.n_in}")
        y = x @ self.w
        return y + self.b if self.b is not None else y


class Conv2d:
    kind = "conv2d"

    def __init__(self, params: ModelParams, name: str, group: str, c_in: int, c_out: int, k: int,
                 rng: np.random.Generator, weight: np.ndarray | None = None):
        fan_in = c_in * k * k
        w = _he(rng, (c_out, c_in, k, k), fan_in) if weight is None else np.array(weight, dtype=np.float64)
        self.w = params.register(f"{name}.w", dc.tensor(w), group)
        self.b = params.register(f"{name}.b", dc.tensor(np.zeros(c_out)), group)
        self.padding = k // 2
        self.c_in, self.c_out = c_in, c_out

    def __call__(self, x: Tensor) -> Tensor:
        return dc.conv2d(x, self.w, self.b, padding=self.padding)


class ReLU:
    kind = "relu"

    def __call__(self, x: Tensor) -> Tensor:
        return dc.relu(x)


class AvgPool:
    kind = "avgpool"

    def __init__(self, k: int):
        self.k = k

    def __call__(self, x: Tensor) -> Tensor:
        return dc.avgpool2d(x, self.k) if self.k > 1 else x


class Flatten:
    kind = "flatten"

    def __call__(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], -1)


class LayerStack:
    def __init__(self, layers=()):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self) -> int:
        return len(self.layers)


# ---------------------------------------------------------------------------
# the split processing functions


@dataclass(frozen=True)
class ArchConfig:
    n_comp: int = 2
    in_channels: int = 1
    image_size: int = 16
    n_classes: int = 8
    key_dim: int = 32  # channels after disjoint preprocessing, also the binding key length
    packets: int = 2
    k_used: int = 64
    n_tx: int = 2
    n_rx: int = 2
    rx_hidden: int = 256
    out_dim: int = 64  # receiver feature length D, side of the unbinding matrices
    precoder_init: str = "matched"  # precoder CSI mixer starts at H^H ("matched") or at I ("identity")

    @property
    def t_len(self) -> int:
        return 2 * self.packets * self.k_used * self.n_tx

    @property
    def r_len(self) -> int:
        return 2 * self.packets * self.k_used * self.n_rx

    def validate(self) -> None:
        if self.image_size % 4:
            raise ValueError(f"image_size {self.image_size} must be divisible by 4")
        for name in ("n_comp", "in_channels", "n_classes", "key_dim", "packets", "k_used", "n_tx", "n_rx",
                     "rx_hidden", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.precoder_init not in ("matched", "identity"):
            raise ValueError(f"precoder_init must be 'matched' or 'identity', got {self.precoder_init!r}")
        if self.precoder_init == "matched" and self.n_tx != self.n_rx:
            raise ValueError("precoder_init 'matched' needs n_tx == n_rx; use 'identity'")


class DisjointPre:
    """One cloned 3x3 convolution per computation channel; clones start identical."""

    def __init__(self, params: ModelParams, arch: ArchConfig, rng: np.random.Generator):
        w0 = _he(rng, (arch.key_dim, arch.in_channels, 3, 3), arch.in_channels * 9)
        self.convs = [Conv2d(params, f"pre{i}", "disjoint_pre", arch.in_channels, arch.key_dim, 3, rng, weight=w0)
                      for i in range(arch.n_comp)]

    def __call__(self, inputs: list[Tensor]) -> list[Tensor]:
        if len(inputs) != len(self.convs):
            raise ValueError(f"disjoint_preprocess: {len(inputs)} inputs for {len(self.convs)} clones")
        return [conv(x) for conv, x in zip(self.convs, inputs)]


def build_f_t(params: ModelParams, arch: ArchConfig, rng: np.random.Generator) -> LayerStack:
    c, s = arch.key_dim, arch.image_size // 4
    return LayerStack([
        AvgPool(2),
        Conv2d(params, "ft.conv", "f_t", c, c, 3, rng),
        ReLU(),
        AvgPool(2),
        Flatten(),
        Linear(params, "ft.proj", "f_t", c * s * s, arch.t_len, rng,
               weight=rng.standard_normal((c * s * s, arch.t_len)) / np.sqrt(c * s * s)),
    ])


def build_f_r(params: ModelParams, arch: ArchConfig, rng: np.random.Generator) -> LayerStack:
    return LayerStack([
        Linear(params, "fr.l1", "f_r", arch.r_len, arch.rx_hidden, rng),
        ReLU(),
        Linear(params, "fr.l2", "f_r", arch.rx_hidden, arch.out_dim, rng),
    ])


HEAD_INIT_SCALE = 0.01


class Heads:
    """Duplicated classifier layers, one per unbound output.

    Weights start small so an untrained model predicts near-uniform classes.
    """

    def __init__(self, params: ModelParams, arch: ArchConfig, rng: np.random.Generator):
        w = HEAD_INIT_SCALE * rng.standard_normal((arch.out_dim, arch.n_classes)) / np.sqrt(arch.out_dim)
        self.layers = [Linear(params, f"head{i}", "heads", arch.out_dim, arch.n_classes, rng, weight=w)
                       for i in range(arch.n_comp)]

    def __call__(self, unbound: list[Tensor]) -> list[Tensor]:
        if len(unbound) != len(self.layers):
            raise ValueError(f"classify_heads: {len(unbound)} outputs for {len(self.layers)} heads")
        return [head(u) for head, u in zip(self.layers, unbound)]

"""Binding algebra for the computation channels.

Inputs are bound to per-channel keys with circular convolution along the
feature-map axis (holographic reduced representations), summed into one
tensor, and separated again at the receiver by per-channel learned matrices
(matrix binding of additive terms).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor


@dataclass
class BindingKeySet:
    keys: list[Tensor]

    @property
    def n_channels(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.keys[0].shape[0]

    def as_array(self) -> np.ndarray:
        return np.stack([k.data for k in self.keys])


@dataclass
class UnbindSet:
    matrices: list[Tensor]

    @property
    def n_channels(self) -> int:
        return len(self.matrices)

    @property
    def dim(self) -> int:
        return self.matrices[0].shape[0]


def init_keys(n_channels: int, dim: int, rng: np.random.Generator) -> BindingKeySet:
    """Draw ``n_channels`` Gaussian keys with entry variance ``1/dim``."""
    if dim < 2 or n_channels < 1:
        raise ValueError(f"init_keys: need dim >= 2 and n_channels >= 1, got {dim}, {n_channels}")
    if dim < n_channels:
        warnings.warn(f"key dim {dim} is below channel count {n_channels}; keys cannot be near-orthogonal",
                      stacklevel=2)
    raw = rng.standard_normal((n_channels, dim)) / np.sqrt(dim)
    return BindingKeySet([dc.parameter(k, name=f"key{i}") for i, k in enumerate(raw)])


def init_unbind(n_channels: int, dim: int, rng: np.random.Generator) -> UnbindSet:
    raw = rng.standard_normal((n_channels, dim, dim)) / np.sqrt(dim)
    return UnbindSet([dc.parameter(m, name=f"unbind{i}") for i, m in enumerate(raw)])


def bind(features: Tensor, key: Tensor, method: str = "auto") -> Tensor:
    """Circularly convolve every channel fiber of ``[B, C, H, W]`` features with ``key``."""
    if features.ndim < 2:
        raise ShapeError(f"bind: features must be [B, C, ...], got {features.shape}")
    if key.shape != (features.shape[1],):
        raise ShapeError(f"bind: key shape {key.shape} does not match channel axis {features.shape[1]}")
    return dc.circular_conv(features, key, axis=1, method=method)


def superpose(bound: list[Tensor]) -> Tensor:
    if not bound:
        raise ValueError("superpose: nothing to sum")
    shape = bound[0].shape
    for b in bound[1:]:
        if b.shape != shape:
            raise ShapeError(f"superpose: shape {b.shape} differs from {shape}")
    out = bound[0]
    for b in bound[1:]:
        out = out + b
    return out


def unbind(features: Tensor, matrix: Tensor) -> Tensor:
    """Apply ``matrix`` to the feature fiber (axis 1) of ``[B, D, ...]`` features."""
    d = matrix.shape[0]
    if matrix.shape != (d, d) or features.ndim < 2 or features.shape[1] != d:
        raise ShapeError(f"unbind: matrix {matrix.shape} cannot act on features {features.shape}")
    if features.ndim == 2:
        return features @ matrix.T
    moved = dc.transpose(features, (0, *range(2, features.ndim), 1))
    out = moved @ matrix.T
    return dc.transpose(out, (0, features.ndim - 1, *range(1, features.ndim - 1)))


def cross_talk(keys: BindingKeySet | np.ndarray) -> np.ndarray:
    """Absolute cosine similarity between every pair of keys."""
    k = keys.as_array() if isinstance(keys, BindingKeySet) else np.asarray(keys, dtype=np.float64)
    if k.shape[0] < 2:
        raise ValueError("cross_talk: need at least two keys")
    unit = k / np.linalg.norm(k, axis=1, keepdims=True)
    sim = np.abs(unit @ unit.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def mean_cross_talk(keys: BindingKeySet | np.ndarray) -> float:
    sim = cross_talk(keys)
    n = sim.shape[0]
    return float((sim.sum() - n) / (n * (n - 1)))

"""OFDM modulation and demodulation with guard bands and peak-power normalization."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor


@dataclass(frozen=True)
class OfdmConfig:
    fft_size: int = 1024
    used_subcarriers: int = 800

    def __post_init__(self):
        n = self.fft_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if not 1 <= self.used_subcarriers < n:
            raise ValueError(f"used_subcarriers must be in [1, {n}), got {self.used_subcarriers}")

    def used_indices(self) -> np.ndarray:
        """FFT bins carrying data: a block above DC and a block below it.

        DC stays empty.  For an odd count the extra bin goes above DC.
        """
        k = self.used_subcarriers
        upper = (k + 1) // 2
        lower = k - upper
        pos = np.arange(1, upper + 1)
        neg = np.arange(self.fft_size - lower, self.fft_size)
        return np.concatenate([pos, neg])

    def guard_indices(self) -> np.ndarray:
        mask = np.ones(self.fft_size, dtype=bool)
        mask[self.used_indices()] = False
        return np.flatnonzero(mask)


@dataclass
class Waveform:
    """Time-domain samples ``[..., P, fft_size, n_antennas]``.

    ``scale`` is the factor applied to reach unit peak magnitude, one value per
    leading item (shape ``samples.shape[:-3]``), so ``peak * scale == 1``.
    """

    samples: Tensor
    scale: np.ndarray
    peak: np.ndarray


def _check_latent(z: Tensor, cfg: OfdmConfig) -> None:
    if z.ndim < 3 or z.shape[-2] != cfg.used_subcarriers:
        raise ShapeError(f"modulate: latent {z.shape} does not have {cfg.used_subcarriers} subcarriers on axis -2")


def peak_scale(z: np.ndarray, cfg: OfdmConfig) -> tuple[np.ndarray, np.ndarray]:
    """Normalization scale and peak for latents ``[..., P, K, N_t]`` without touching any tape."""
    full = np.zeros(z.shape[:-2] + (cfg.fft_size, z.shape[-1]), dtype=np.complex128)
    full[..., cfg.used_indices(), :] = z
    x = np.fft.ifft(full, axis=-2, norm="ortho")
    peak = np.abs(x).max(axis=(-3, -2, -1))
    scale = np.where(peak > 0, 1.0 / np.where(peak > 0, peak, 1.0), 1.0)
    return scale, peak


def modulate(z: Tensor, cfg: OfdmConfig) -> Waveform:
    """Map latents ``[..., P, K_used, N_t]`` onto subcarriers, inverse-FFT and peak-normalize.

    The normalization factor is a constant for differentiation.
    """
    _check_latent(z, cfg)
    if not z.is_complex:
        z = dc.make_complex(z, dc.tensor(np.zeros(z.shape)))
    full = dc.embed(z, cfg.used_indices(), cfg.fft_size, axis=-2)
    x = dc.ifft(full, axis=-2)
    peak = np.abs(x.data).max(axis=(-3, -2, -1))
    scale = np.where(peak > 0, 1.0 / np.where(peak > 0, peak, 1.0), 1.0)
    samples = x * scale.reshape(scale.shape + (1, 1, 1))
    return Waveform(samples=samples, scale=scale, peak=peak)


def demodulate(w: Waveform, cfg: OfdmConfig) -> Tensor:
    """FFT each packet/antenna, keep the used bins and undo the transmit scale."""
    if w.samples.ndim < 3 or w.samples.shape[-2] != cfg.fft_size:
        raise ShapeError(f"demodulate: waveform {w.samples.shape} does not have {cfg.fft_size} samples on axis -2")
    spec = dc.fft(w.samples, axis=-2)
    used = spec[..., cfg.used_indices(), :]
    inv = 1.0 / w.scale
    return used * inv.reshape(inv.shape + (1, 1, 1))


def guard_spectrum(w: Waveform, cfg: OfdmConfig) -> np.ndarray:
    """Unscaled received energy in the guard bins (noise-only under this channel model)."""
    spec = np.fft.fft(w.samples.data, axis=-2, norm="ortho")
    return spec[..., cfg.guard_indices(), :]


def write_iq(path: str | Path, w: Waveform) -> None:
    """Write samples as interleaved little-endian float32 I/Q pairs in C order."""
    data = np.asarray(w.samples.data, dtype=np.complex128)
    iq = np.empty(data.shape + (2,), dtype="<f4")
    iq[..., 0] = data.real
    iq[..., 1] = data.imag
    Path(path).write_bytes(iq.tobytes())


def read_iq(path: str | Path, shape: tuple[int, ...]) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size != 2 * int(np.prod(shape)):
        raise ValueError(f"read_iq: {raw.size // 2} complex samples in file, expected shape {shape}")
    return (raw[0::2] + 1j * raw[1::2]).astype(np.complex128).reshape(shape)

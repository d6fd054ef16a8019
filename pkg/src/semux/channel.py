"""Frequency-selective MIMO fading channel with AWGN and pilot-based CSI estimation.

The time-domain channel is a circular convolution with the tap matrices, so
after a unitary FFT each used subcarrier sees exactly ``H_k z_k`` with
``H_k = sum_l h_l exp(-2j*pi*k*l/N)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .modem import OfdmConfig, Waveform, demodulate, guard_spectrum, modulate


@dataclass(frozen=True)
class ChannelModel:
    n_tx: int = 2
    n_rx: int = 2
    n_taps: int = 8
    fading: str = "rayleigh"
    k_factor_db: float = 10.0
    decay_db: float = 20.0
    snr_db: float = 20.0
    aod_deg: float = 20.0
    aoa_deg: float = -35.0

    def __post_init__(self):
        if self.n_taps < 1 or self.n_tx < 1 or self.n_rx < 1:
            raise ValueError("ChannelModel: n_taps, n_tx and n_rx must be >= 1")
        if self.fading not in ("rayleigh", "rician"):
            raise ValueError(f"ChannelModel: unknown fading {self.fading!r}")

    @property
    def sigma2(self) -> float:
        return snr_to_sigma2(self.snr_db)

    def power_delay_profile(self) -> np.ndarray:
        """Exponentially decaying tap powers, last tap ``decay_db`` below the first, summing to one."""
        if self.n_taps == 1:
            return np.ones(1)
        rel_db = -self.decay_db * np.arange(self.n_taps) / (self.n_taps - 1)
        p = 10.0 ** (rel_db / 10.0)
        return p / p.sum()

    def los_matrix(self) -> np.ndarray:
        """Unit-modulus rank-one array response of half-wavelength linear arrays."""
        at = np.exp(1j * np.pi * np.arange(self.n_tx) * np.sin(np.deg2rad(self.aod_deg)))
        ar = np.exp(1j * np.pi * np.arange(self.n_rx) * np.sin(np.deg2rad(self.aoa_deg)))
        return np.outer(ar, at.conj())


def snr_to_sigma2(snr_db: float) -> float:
    """Noise variance for unit peak transmit power."""
    return 10.0 ** (-snr_db / 10.0)


@dataclass
class ChannelRealization:
    taps: np.ndarray  # [L, N_r, N_t] complex

    def cfr(self, cfg: OfdmConfig) -> np.ndarray:
        """Per-used-subcarrier channel matrices ``[K_used, N_r, N_t]``."""
        n = cfg.fft_size
        if self.taps.shape[0] > n:
            raise ShapeError(f"cfr: {self.taps.shape[0]} taps exceed fft size {n}")
        full = np.fft.fft(self.taps, n=n, axis=0)
        return full[cfg.used_indices()]

    @property
    def n_rx(self) -> int:
        return self.taps.shape[1]

    @property
    def n_tx(self) -> int:
        return self.taps.shape[2]


@dataclass
class Csi:
    H: np.ndarray  # [K_used, N_r, N_t]
    sigma2_noise: np.ndarray  # [K_used]

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.complex128)
        self.sigma2_noise = np.broadcast_to(np.asarray(self.sigma2_noise, dtype=np.float64),
                                            (self.H.shape[0],)).copy()
        if self.H.ndim != 3:
            raise ShapeError(f"Csi: H must be [K, N_r, N_t], got {self.H.shape}")
        if not (np.all(np.isfinite(self.H)) and np.all(np.isfinite(self.sigma2_noise))):
            raise ValueError("Csi: non-finite entries")
        if np.any(self.sigma2_noise <= 0):
            raise ValueError("Csi: noise variance must be positive")

    def features(self) -> np.ndarray:
        """Per-subcarrier real features: interleaved (re, im) of ``H_k`` then ``sigma2_k``."""
        k = self.H.shape[0]
        flat = self.H.reshape(k, -1)
        inter = np.stack([flat.real, flat.imag], axis=-1).reshape(k, -1)
        return np.concatenate([inter, self.sigma2_noise[:, None]], axis=1)


def genie_csi(realization: ChannelRealization, cfg: OfdmConfig, sigma2: float) -> Csi:
    H = realization.cfr(cfg)
    return Csi(H, np.full(H.shape[0], sigma2))


def _cn(rng: np.random.Generator, shape, var=1.0) -> np.ndarray:
    s = np.sqrt(np.asarray(var) / 2.0)
    return s * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def sample_realization(model: ChannelModel, rng: np.random.Generator) -> ChannelRealization:
    pdp = model.power_delay_profile()
    shape = (model.n_taps, model.n_rx, model.n_tx)
    taps = _cn(rng, shape) * np.sqrt(pdp)[:, None, None]
    if model.fading == "rician":
        k = 10.0 ** (model.k_factor_db / 10.0)
        if np.isinf(k):
            taps[0] = np.sqrt(pdp[0]) * model.los_matrix()
        else:
            taps[0] = (np.sqrt(pdp[0] * k / (k + 1)) * model.los_matrix()
                       + np.sqrt(1.0 / (k + 1)) * taps[0])
    return ChannelRealization(taps)


def freq_noise(rng: np.random.Generator, shape, sigma2) -> np.ndarray:
    """Complex Gaussian noise ``[..., K, N_r]`` with per-subcarrier variance ``sigma2``."""
    var = np.asarray(sigma2, dtype=np.float64)
    if var.ndim == 1:
        var = var[:, None]
    return _cn(rng, shape, var)


def apply_freq(z: Tensor, H: np.ndarray | ChannelRealization, sigma2, rng: np.random.Generator | None = None,
               cfg: OfdmConfig | None = None, noise: np.ndarray | None = None) -> Tensor:
    """``z_hat[..., p, k] = H_k z[..., p, k] + n`` for latents ``[..., P, K, N_t]``.

    ``H`` and the noise are constants on the tape.  Pass ``noise`` to reuse a
    specific draw; otherwise it is sampled from ``rng`` (none when
    ``sigma2 == 0``).
    """
    if isinstance(H, ChannelRealization):
        if cfg is None:
            raise ValueError("apply_freq: cfg required with a ChannelRealization")
        H = H.cfr(cfg)
    if z.ndim < 2 or z.shape[-2:] != (H.shape[0], H.shape[2]):
        raise ShapeError(f"apply_freq: latent {z.shape} does not match channel {H.shape}")
    out_shape = z.shape[:-1] + (H.shape[1],)
    zc = z.reshape(z.shape + (1,))
    y = dc.matmul(dc.tensor(H), zc)
    y = y.reshape(out_shape)
    if noise is None and np.any(np.asarray(sigma2) > 0):
        if rng is None:
            raise ValueError("apply_freq: rng required for noisy channel")
        noise = freq_noise(rng, out_shape, sigma2)
    if noise is not None:
        y = y + noise
    return y


def apply_time(w: Waveform, realization: ChannelRealization, sigma2: float,
               rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> Waveform:
    """Circularly convolve each transmit stream with the taps, sum per receive antenna, add AWGN.

    Computed directly in the time domain; the scale bookkeeping of ``w`` is kept
    so the receiver can undo the transmit normalization.
    """
    x = w.samples
    taps = realization.taps
    n = x.shape[-2]
    if x.shape[-1] != taps.shape[2]:
        raise ShapeError(f"apply_time: waveform has {x.shape[-1]} streams, channel expects {taps.shape[2]}")
    y = None
    for l in range(taps.shape[0]):
        shifted = x[..., (np.arange(n) - l) % n, :]
        term = shifted @ dc.tensor(taps[l].T)
        y = term if y is None else y + term
    if noise is None and sigma2 > 0:
        if rng is None:
            raise ValueError("apply_time: rng required for noisy channel")
        noise = _cn(rng, y.shape, sigma2)
    if noise is not None:
        y = y + noise
    return Waveform(samples=y, scale=w.scale, peak=w.peak)


def pilot_symbols(n: int) -> np.ndarray:
    """Unit-modulus chirp pilots (low peak-to-average power once modulated)."""
    k = np.arange(n)
    return np.exp(-1j * np.pi * k * k / n)


def estimate_csi(model: ChannelModel, realization: ChannelRealization, cfg: OfdmConfig,
                 rng: np.random.Generator, pilots: np.ndarray | None = None,
                 sigma2: float | None = None) -> Csi:
    """Least-squares CSI from one pilot packet per transmit antenna.

    Packet ``i`` drives only antenna ``i``.  The noise variance comes from the
    energy in the guard bins, which only noise reaches.
    """
    k_used = cfg.used_subcarriers
    x = pilot_symbols(k_used) if pilots is None else np.asarray(pilots, dtype=np.complex128)
    if x.shape != (k_used,):
        raise ShapeError(f"estimate_csi: pilots shape {x.shape}, expected ({k_used},)")
    if np.any(x == 0):
        raise ValueError("estimate_csi: zero pilot symbol")
    n_t = realization.n_tx
    sigma2 = model.sigma2 if sigma2 is None else sigma2
    z = np.zeros((n_t, k_used, n_t), dtype=np.complex128)
    for i in range(n_t):
        z[i, :, i] = x
    w = modulate(dc.tensor(z), cfg)
    rx = apply_time(w, realization, sigma2, rng)
    y = demodulate(rx, cfg).data  # [N_t(packets), K, N_r]
    H_hat = np.empty((k_used, realization.n_rx, n_t), dtype=np.complex128)
    for i in range(n_t):
        H_hat[:, :, i] = y[i] / x[:, None]
    guard = guard_spectrum(rx, cfg)
    s2 = float(np.mean(np.abs(guard) ** 2))
    s2 = max(s2, np.finfo(float).tiny)
    return Csi(H_hat, np.full(k_used, s2))

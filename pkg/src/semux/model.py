"""End-to-end model: transmitter, channel link, receiver."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import diffcore as dc
from . import vsa
from .channel import ChannelRealization, Csi, apply_freq, apply_time
from .codec import LatentDistribution, Postcoder, Precoder, sample_latent
from .diffcore import Tensor
from .modem import OfdmConfig, demodulate, modulate, peak_scale
from .nets import ArchConfig, DisjointPre, Heads, ModelParams, build_f_r, build_f_t

Link = Callable[[Tensor], Tensor]


def freq_link(H: np.ndarray, sigma2, ofdm: OfdmConfig, rng: np.random.Generator | None,
              normalize: bool = True, noise: np.ndarray | None = None, scale: np.ndarray | None = None) -> Link:
    """Frequency-domain channel with the transmitter's unit-peak normalization.

    Latents are scaled to unit peak waveform magnitude (constant for
    differentiation), sent through ``H`` plus noise, and scaled back.  A fixed
    ``noise`` draw and ``scale`` may be given to make the link deterministic.
    """

    def link(z: Tensor) -> Tensor:
        if not normalize:
            return apply_freq(z, H, sigma2, rng, noise=noise)
        s = peak_scale(z.data, ofdm)[0] if scale is None else np.asarray(scale, dtype=np.float64)
        shp = s.shape + (1, 1, 1)
        y = apply_freq(z * s.reshape(shp), H, sigma2, rng, noise=noise)
        return y * (1.0 / s).reshape(shp)

    return link


def time_link(realization: ChannelRealization, sigma2: float, ofdm: OfdmConfig,
              rng: np.random.Generator | None) -> Link:
    """Full waveform path: OFDM modulation, time-domain channel, demodulation."""

    def link(z: Tensor) -> Tensor:
        return demodulate(apply_time(modulate(z, ofdm), realization, sigma2, rng), ofdm)

    return link


class SemanticMux:
    def __init__(self, arch: ArchConfig, rng: np.random.Generator, ofdm: OfdmConfig | None = None):
        arch.validate()
        self.arch = arch
        self.ofdm = ofdm or OfdmConfig(fft_size=1024, used_subcarriers=arch.k_used)
        if self.ofdm.used_subcarriers != arch.k_used:
            raise ValueError(f"ofdm uses {self.ofdm.used_subcarriers} subcarriers, arch expects {arch.k_used}")
        p = self.params = ModelParams()
        self.pre = DisjointPre(p, arch, rng)
        self.keys = vsa.init_keys(arch.n_comp, arch.key_dim, rng)
        for k in self.keys.keys:
            p.register(k.name, k, "keys")
        self.f_t = build_f_t(p, arch, rng)
        self.precoder = Precoder(p, arch, rng)
        self.postcoder = Postcoder(p, arch, rng)
        self.f_r = build_f_r(p, arch, rng)
        self.unbinders = vsa.init_unbind(arch.n_comp, arch.out_dim, rng)
        for m in self.unbinders.matrices:
            p.register(m.name, m, "unbind")
        self.heads = Heads(p, arch, rng)

    # transmitter -----------------------------------------------------------
    def encode(self, inputs: list[np.ndarray | Tensor]) -> Tensor:
        """disjoint preprocessing -> bind -> superpose -> f_t."""
        xs = [x if isinstance(x, Tensor) else dc.tensor(x) for x in inputs]
        feats = self.pre(xs)
        bound = [vsa.bind(f, k) for f, k in zip(feats, self.keys.keys)]
        return self.f_t(vsa.superpose(bound))

    def latent(self, t: Tensor, csi: Csi) -> LatentDistribution:
        return self.precoder(t, csi)

    # receiver ----------------------------------------------------------------
    def decode(self, z_hat: Tensor, csi: Csi) -> list[Tensor]:
        """postcoder -> f_r -> unbind -> classifier heads."""
        feats = self.f_r(self.postcoder(z_hat, csi))
        unbound = [vsa.unbind(feats, m) for m in self.unbinders.matrices]
        return self.heads(unbound)

    def forward(self, inputs, csi: Csi, link: Link | None, rng: np.random.Generator | None = None,
                sample: bool = False, eps: np.ndarray | None = None, csi_rx: Csi | None = None):
        """Full pass; returns ``(logits per task, latent distribution)``.

        ``link`` of ``None`` bypasses the channel.  With ``sample`` false the
        latent mean is transmitted.  ``csi_rx`` lets the receiver use different
        CSI than the transmitter (defaults to ``csi``).
        """
        t = self.encode(inputs)
        dist = self.latent(t, csi)
        z = sample_latent(dist, rng, eps) if (sample or eps is not None) else dist.mu
        z_hat = z if link is None else link(z)
        return self.decode(z_hat, csi_rx or csi), dist

    def predict(self, inputs, csi: Csi, link: Link | None, **kw) -> np.ndarray:
        """Argmax class per task, shape ``[n_comp, B]``."""
        logits, _ = self.forward(inputs, csi, link, **kw)
        return np.stack([lg.data.argmax(axis=1) for lg in logits])

"""CSI-conditioned stochastic precoder and deterministic postcoder.

Both sides turn the per-subcarrier CSI into one complex stream-mixing matrix
per (packet, subcarrier) with a shared linear layer and a ReLU, then apply it
to the latent symbols.  The precoder adds a mean head and a variance head;
the postcoder a complex linear layer before flattening to real features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .channel import Csi
from .diffcore import ShapeError, Tensor
from .nets import ArchConfig, ModelParams

SIGMA2_FLOOR = 1e-6


@dataclass
class LatentDistribution:
    mu: Tensor  # complex [..., P, K, N_t]
    sigma2: Tensor  # real, same shape, > 0


MIXER_INITS = ("matched", "identity")


def _pair_index(packets: int, n: int) -> np.ndarray:
    """Output column of each (packet, row, col, re/im, ReLU pair) unit."""
    return np.arange(packets * n * n * 4).reshape(packets, n, n, 2, 2)


class _CsiMixer:
    """CSI features ``[K, F]`` -> ReLU(linear) -> complex matrices ``[P, K, n, n]``.

    Each real or imaginary tensor entry is the difference of two ReLU units so
    the entries can take either sign.  ``init="matched"`` starts every matrix
    at ``H_k^H`` (exactly, since ``relu(x) - relu(-x) = x``); ``"identity"``
    starts at ``I`` with small random CSI weights.
    """

    def __init__(self, params: ModelParams, name: str, group: str, n_feat: int, packets: int, n: int,
                 rng: np.random.Generator, init: str = "matched", init_scale: float = 0.05):
        if init not in MIXER_INITS:
            raise ValueError(f"mixer init must be one of {MIXER_INITS}, got {init!r}")
        self.packets, self.n = packets, n
        col = _pair_index(packets, n)
        w = rng.standard_normal((n_feat, col.size)) * init_scale
        b = np.zeros(col.size)
        if init == "identity":
            b[col[:, np.arange(n), np.arange(n), 0, 0].ravel()] = 1.0
        else:
            w[:] = 0.0
            for i in range(n):
                for j in range(n):
                    # entry (i, j) of H^H is conj(H[j, i]); feature 2*(j*n + i) is its real part
                    re_f, im_f = 2 * (j * n + i), 2 * (j * n + i) + 1
                    for part, feat, sign in ((0, re_f, 1.0), (1, im_f, -1.0)):
                        w[feat, col[:, i, j, part, 0]] = sign
                        w[feat, col[:, i, j, part, 1]] = -sign
        self.w = params.register(f"{name}.w", dc.tensor(w), group)
        self.b = params.register(f"{name}.b", dc.tensor(b), group)

    def __call__(self, feats: np.ndarray) -> Tensor:
        k = feats.shape[0]
        h = dc.relu(dc.tensor(feats) @ self.w + self.b)
        h = h.reshape(k, self.packets, self.n, self.n, 2, 2)
        signed = h[..., 0] - h[..., 1]
        m = dc.make_complex(signed[..., 0], signed[..., 1])
        return dc.transpose(m, (1, 0, 2, 3))


class _ComplexLinear:
    """``y = x @ A^T + c`` over the last (stream) axis with complex ``A``, ``c``."""

    def __init__(self, params: ModelParams, name: str, group: str, n: int, rng: np.random.Generator,
                 init_noise: float = 0.05):
        self.w_re = params.register(f"{name}.w_re", dc.tensor(np.eye(n) + init_noise * rng.standard_normal((n, n))),
                                    group)
        self.w_im = params.register(f"{name}.w_im", dc.tensor(init_noise * rng.standard_normal((n, n))), group)
        self.b_re = params.register(f"{name}.b_re", dc.tensor(np.zeros(n)), group)
        self.b_im = params.register(f"{name}.b_im", dc.tensor(np.zeros(n)), group)

    def __call__(self, x: Tensor) -> Tensor:
        a = dc.make_complex(self.w_re, self.w_im)
        c = dc.make_complex(self.b_re, self.b_im)
        return x @ a.T + c


def _apply_mixing(m: Tensor, x: Tensor) -> Tensor:
    """Per (packet, subcarrier) matrix-vector product; ``x: [..., P, K, n]``."""
    y = m @ x.reshape(x.shape + (1,))
    return y.reshape(x.shape[:-1] + (m.shape[-2],))


def check_csi(s: Csi, arch: ArchConfig) -> None:
    if s.H.shape != (arch.k_used, arch.n_rx, arch.n_tx):
        raise ShapeError(f"CSI H shape {s.H.shape}, expected {(arch.k_used, arch.n_rx, arch.n_tx)}")


class Precoder:
    def __init__(self, params: ModelParams, arch: ArchConfig, rng: np.random.Generator, sigma2_init: float = 0.05):
        self.arch = arch
        n_feat = 2 * arch.n_rx * arch.n_tx + 1
        self.mixer = _CsiMixer(params, "pre.csi", "precoder", n_feat, arch.packets, arch.n_tx, rng,
                              init=arch.precoder_init)
        self.mu_head = _ComplexLinear(params, "pre.mu", "precoder", arch.n_tx, rng)
        raw0 = np.log(np.expm1(sigma2_init))
        self.sig_w = params.register("pre.sig.w", dc.tensor(0.01 * rng.standard_normal((2 * arch.n_tx, arch.n_tx))),
                                     "precoder")
        self.sig_b = params.register("pre.sig.b", dc.tensor(np.full(arch.n_tx, raw0)), "precoder")

    def __call__(self, t: Tensor, s: Csi) -> LatentDistribution:
        return precode(self, t, s)


def to_complex_packets(t: Tensor, arch: ArchConfig) -> Tensor:
    """First half of ``t`` is the real part, second half the imaginary part; reshape to ``[B, P, K, N_t]``."""
    if t.shape[-1] != arch.t_len:
        raise ShapeError(f"precode: t length {t.shape[-1]} != 2*P*K*N_t = {arch.t_len}")
    half = arch.t_len // 2
    z = dc.make_complex(t[..., :half], t[..., half:])
    return z.reshape(t.shape[:-1] + (arch.packets, arch.k_used, arch.n_tx))


def precode(pre: Precoder, t: Tensor, s: Csi) -> LatentDistribution:
    arch = pre.arch
    check_csi(s, arch)
    x = to_complex_packets(t, arch)
    u = _apply_mixing(pre.mixer(s.features()), x)
    mu = pre.mu_head(u)
    feats = dc.relu(dc.concat([dc.real(u), dc.imag(u)], axis=-1))
    raw = feats @ pre.sig_w + pre.sig_b
    sigma2 = dc.softplus(raw) + SIGMA2_FLOOR
    return LatentDistribution(mu=mu, sigma2=sigma2)


def sample_latent(dist: LatentDistribution, rng: np.random.Generator | None = None,
                  eps: np.ndarray | None = None) -> Tensor:
    """Reparameterized draw ``mu + sqrt(sigma2/2) * (e_re + 1j*e_im)``.

    ``eps`` (complex, standard parts) may be supplied to freeze the noise.
    """
    shape = dist.mu.shape
    if eps is None:
        eps = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    std = dc.sqrt(dist.sigma2 * 0.5)
    noise = dc.make_complex(std * eps.real, std * eps.imag)
    return dist.mu + noise


class Postcoder:
    def __init__(self, params: ModelParams, arch: ArchConfig, rng: np.random.Generator):
        self.arch = arch
        n_feat = 2 * arch.n_rx * arch.n_tx + 1
        self.mixer = _CsiMixer(params, "post.csi", "postcoder", n_feat, arch.packets, arch.n_rx, rng,
                              init="identity")
        self.lin = _ComplexLinear(params, "post.lin", "postcoder", arch.n_rx, rng)

    def __call__(self, z_hat: Tensor, s: Csi) -> Tensor:
        return postcode(self, z_hat, s)


def postcode(post: Postcoder, z_hat: Tensor, s: Csi) -> Tensor:
    arch = post.arch
    check_csi(s, arch)
    if z_hat.shape[-3:] != (arch.packets, arch.k_used, arch.n_rx):
        raise ShapeError(f"postcode: z_hat {z_hat.shape}, expected [..., {arch.packets}, {arch.k_used}, {arch.n_rx}]")
    u = _apply_mixing(post.mixer(s.features()), z_hat)
    v = post.lin(u)
    lead = v.shape[:-3]
    flat = v.reshape(lead + (-1,))
    return dc.concat([dc.real(flat), dc.imag(flat)], axis=-1)

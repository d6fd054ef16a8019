"""Variational information-bottleneck objective and its Monte Carlo estimate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .channel import Csi, sample_realization
from .codec import LatentDistribution, sample_latent
from .diffcore import Tensor
from .model import freq_link


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1e-4
    n_mc: int = 1

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.n_mc < 1:
            raise ValueError(f"n_mc must be >= 1, got {self.n_mc}")


def kl_to_standard(dist: LatentDistribution) -> Tensor:
    """KL(CN(mu, diag sigma2) || CN(0, I)) summed over every complex dimension.

    Circularly-symmetric convention: ``sigma2 + |mu|^2 - 1 - ln sigma2`` per entry.
    """
    if np.any(dist.sigma2.data <= 0):
        raise ValueError("kl_to_standard: non-positive variance")
    per = dist.sigma2 + dc.abs2(dist.mu) - 1.0 - dc.log(dist.sigma2)
    return per.sum()


def kl_numeric(mu: complex, sigma2: float, n: int = 801, span: float = 10.0) -> float:
    """Reference KL by 2-D trapezoid quadrature of ``p log(p/q)`` over the complex plane."""
    s = np.sqrt(max(sigma2, 1.0))
    lim = span * s + abs(mu)
    grid = np.linspace(-lim, lim, n)
    xr, xi = np.meshgrid(grid, grid, indexing="ij")
    d2 = (xr - mu.real) ** 2 + (xi - mu.imag) ** 2
    logp = -d2 / sigma2 - np.log(np.pi * sigma2)
    logq = -(xr ** 2 + xi ** 2) - np.log(np.pi)
    f = np.exp(logp) * (logp - logq)
    return float(np.trapezoid(np.trapezoid(f, grid, axis=1), grid))


def nll_term(logits: list[Tensor], labels: list[np.ndarray]) -> Tensor:
    """Softmax cross-entropy averaged over the batch and over the task heads."""
    if len(logits) != len(labels):
        raise ValueError(f"nll_term: {len(logits)} heads but {len(labels)} label sets")
    total = None
    for lg, y in zip(logits, labels):
        ce = dc.softmax_cross_entropy(lg, y)
        total = ce if total is None else total + ce
    return total * (1.0 / len(logits))


def nll_direct(logits: np.ndarray, labels: np.ndarray) -> float:
    """Plain ``-sum y log softmax`` with one-hot ``y``, averaged over rows."""
    onehot = np.eye(logits.shape[1])[labels]
    m = logits.max(axis=1, keepdims=True)
    log_softmax = logits - m - np.log(np.sum(np.exp(logits - m), axis=1, keepdims=True))
    return float(-(onehot * log_softmax).sum(axis=1).mean())


@dataclass
class LossParts:
    loss: Tensor
    nll: float
    kl: float  # mean per item of the summed KL


@dataclass
class McDraw:
    """One frozen Monte Carlo draw: channel, latent noise, channel noise, transmit scale."""

    realization: object
    eps: np.ndarray | None = None
    noise: np.ndarray | None = None
    scale: np.ndarray | None = None


def vib_loss_mc(batch, model, channel_model, cfg: LossConfig, rng: np.random.Generator,
                draws: list[McDraw] | None = None) -> LossParts:
    """Monte Carlo estimate of the VIB loss for one mini-batch.

    For each of ``cfg.n_mc`` draws a channel realization, latent sample and
    channel noise are drawn; the CSI seen by the precoder and postcoder is the
    true one.  Returns the differentiable loss plus its two parts as floats.
    """
    n_mb = batch.size
    t = model.encode(batch.inputs)
    sigma2 = channel_model.sigma2
    total = None
    nll_acc = kl_acc = 0.0
    for m in range(cfg.n_mc):
        draw = draws[m] if draws is not None else McDraw(sample_realization(channel_model, rng))
        H = draw.realization.cfr(model.ofdm)
        csi = Csi(H, np.full(H.shape[0], sigma2))
        dist = model.latent(t, csi)
        z = sample_latent(dist, rng, draw.eps)
        link = freq_link(H, sigma2, model.ofdm, rng, noise=draw.noise, scale=draw.scale)
        logits = model.decode(link(z), csi)
        nll = nll_term(logits, batch.labels)
        if cfg.beta > 0:
            kl = kl_to_standard(dist) * (1.0 / n_mb)
            term = nll + kl * cfg.beta
            kl_val = kl.item()
        else:
            # keep the KL off the tape so the loss is the NLL alone
            term = nll
            kl_val = kl_to_standard(LatentDistribution(dist.mu.detach(), dist.sigma2.detach())).item() / n_mb
        total = term if total is None else total + term
        nll_acc += nll.item()
        kl_acc += kl_val
    loss = total * (1.0 / cfg.n_mc) if cfg.n_mc > 1 else total
    return LossParts(loss=loss, nll=nll_acc / cfg.n_mc, kl=kl_acc / cfg.n_mc)

"""Fast property checks shared by the ``selftest`` command and the acceptance suite.

Each check returns a :class:`CheckResult` with the measured value next to the
limit it is held to.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import vsa
from .channel import ChannelModel, apply_freq, apply_time, genie_csi, sample_realization
from .codec import sample_latent
from .modem import OfdmConfig, demodulate, modulate
from .model import SemanticMux, freq_link
from .nets import HEAD_INIT_SCALE, ArchConfig
from .pipeline import TaskBatch
from .vibloss import LatentDistribution, LossConfig, McDraw, kl_numeric, kl_to_standard, nll_term, vib_loss_mc


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.detail or f'{self.value:.3g} (limit {self.limit:.3g})'}"


TINY_ARCH = ArchConfig(n_comp=2, in_channels=1, image_size=4, n_classes=3, key_dim=4, packets=1, k_used=4,
                       n_tx=2, n_rx=2, rx_hidden=6, out_dim=4)
TINY_OFDM = OfdmConfig(fft_size=8, used_subcarriers=4)


def tiny_model(seed: int = 0) -> SemanticMux:
    return SemanticMux(TINY_ARCH, np.random.default_rng(seed), ofdm=TINY_OFDM)


def tiny_batch(rng: np.random.Generator, size: int = 3, arch: ArchConfig = TINY_ARCH) -> TaskBatch:
    shape = (size, arch.in_channels, arch.image_size, arch.image_size)
    return TaskBatch([rng.random(shape) for _ in range(arch.n_comp)],
                     [rng.integers(0, arch.n_classes, size) for _ in range(arch.n_comp)])


def composed_paths(seed: int = 0) -> dict[str, tuple]:
    """Deterministic scalar functions through each composed path, with the parameters to probe.

    Every random quantity (latent noise, channel noise, transmit scale) is
    drawn once and frozen so central differences see a smooth function.
    """
    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    for head in model.heads.layers:
        # unit-scale heads, as after training, so upstream gradients are not damped
        head.w.data /= HEAD_INIT_SCALE
    arch, ofdm = model.arch, model.ofdm
    batch = tiny_batch(rng)
    cm = ChannelModel(n_tx=arch.n_tx, n_rx=arch.n_rx, n_taps=3, snr_db=20.0)
    real = sample_realization(cm, rng)
    csi = genie_csi(real, ofdm, cm.sigma2)
    H = real.cfr(ofdm)
    lat_shape = (batch.size, arch.packets, arch.k_used, arch.n_tx)
    eps = rng.standard_normal(lat_shape) + 1j * rng.standard_normal(lat_shape)
    noise = np.sqrt(cm.sigma2 / 2) * (rng.standard_normal(lat_shape) + 1j * rng.standard_normal(lat_shape))
    p = model.params
    w_probe = dc.tensor(rng.standard_normal((arch.packets * arch.k_used * arch.n_tx, 1)))
    z_probe = dc.parameter(rng.standard_normal(lat_shape))
    z_probe_im = dc.parameter(rng.standard_normal(lat_shape))
    feats = [dc.parameter(rng.standard_normal((2, arch.key_dim, 3, 3))) for _ in range(arch.n_comp)]
    t_in = dc.parameter(rng.standard_normal((batch.size, arch.t_len)))

    def bind_path():
        bound = [vsa.bind(f, k) for f, k in zip(feats, model.keys.keys)]
        return (dc.abs2(vsa.superpose(bound)) * 0.5).sum()

    def precode_path():
        dist = model.latent(t_in, csi)
        z = sample_latent(dist, eps=eps)
        return dc.abs2(z).sum() * 0.1 + (dc.real(z).reshape(batch.size, -1) @ w_probe).sum()

    def apply_freq_path():
        z = dc.make_complex(z_probe, z_probe_im)
        y = apply_freq(z, H, cm.sigma2, noise=noise)
        return dc.abs2(y).sum() + dc.real(y).sum()

    def postcode_path():
        z = dc.make_complex(z_probe, z_probe_im)
        out = model.postcoder(z, csi)
        return (dc.relu(out) * out).sum()

    draw = McDraw(real, eps=eps, noise=noise, scale=np.ones(batch.size))

    def loss_path():
        return vib_loss_mc(batch, model, cm, LossConfig(beta=1e-2), rng, draws=[draw]).loss

    return {
        "bind": (bind_path, list(feats) + list(model.keys.keys)),
        "precode (frozen noise)": (precode_path, [t_in] + p.in_group("precoder")),
        "apply_freq": (apply_freq_path, [z_probe, z_probe_im]),
        "postcode": (postcode_path, [z_probe, z_probe_im] + p.in_group("postcoder")),
        "vib_loss_mc": (loss_path, p.trainable_params()),
    }


def check_gradients(limit: float = 1e-4, max_entries: int = 8, seed: int = 0) -> list[CheckResult]:
    out = []
    for name, (f, params) in composed_paths(seed).items():
        err = dc.grad_check(f, params, max_entries=max_entries, rng=np.random.default_rng(seed))
        out.append(CheckResult(f"grad {name}", err < limit, err, limit))
    return out


def check_modem_channel(pairs: int = 100, limit: float = 1e-9, seed: int = 0) -> list[CheckResult]:
    """Time-domain path against the frequency-domain model, and the OFDM round trip."""
    rng = np.random.default_rng(seed)
    cfg = OfdmConfig(fft_size=64, used_subcarriers=40)
    worst_link = worst_rt = 0.0
    for i in range(pairs):
        n_t, n_r = (2, 2) if i % 2 == 0 else (2, 3)
        cm = ChannelModel(n_tx=n_t, n_rx=n_r, n_taps=1 + i % 8, fading="rician" if i % 3 == 0 else "rayleigh")
        real = sample_realization(cm, rng)
        shape = (2, cfg.used_subcarriers, n_t)
        z = dc.tensor(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        w = modulate(z, cfg)
        via_time = demodulate(apply_time(w, real, 0.0), cfg).data
        via_freq = apply_freq(z, real.cfr(cfg), 0.0).data
        worst_link = max(worst_link, float(np.abs(via_time - via_freq).max()))
        worst_rt = max(worst_rt, float(np.abs(demodulate(w, cfg).data - z.data).max()))
    return [CheckResult("time path == frequency path (noiseless)", worst_link < limit, worst_link, limit),
            CheckResult("OFDM round trip", worst_rt < limit, worst_rt, limit)]


def check_kl(cases: int = 20, limit: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        mu = complex(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5))
        s2 = float(rng.uniform(0.3, 2.5))
        closed = kl_to_standard(LatentDistribution(dc.tensor(np.array([mu])), dc.tensor(np.array([s2])))).item()
        worst = max(worst, abs(closed - kl_numeric(mu, s2)))
    zero = kl_to_standard(LatentDistribution(dc.tensor(np.zeros(1, dtype=complex)), dc.tensor(np.ones(1)))).item()

    model = tiny_model(seed)
    batch = tiny_batch(rng)
    cm = ChannelModel(n_taps=3)
    draw = McDraw(sample_realization(cm, rng))
    loss = vib_loss_mc(batch, model, cm, LossConfig(beta=0.0), np.random.default_rng(1), draws=[draw]).loss.item()
    logits, _ = _replay_logits(model, batch, cm, draw)
    nll = nll_term(logits, batch.labels).item()
    return [CheckResult("closed-form KL vs quadrature", worst < limit, worst, limit),
            CheckResult("KL at (mu=0, sigma2=1)", zero == 0.0, zero, 0.0, f"{zero!r} (must be exactly 0)"),
            CheckResult("beta=0 loss == NLL", loss == nll, abs(loss - nll), 0.0,
                        f"loss {loss!r} vs nll {nll!r} (must match bit for bit)")]


def _replay_logits(model, batch, cm, draw):
    """The beta=0 loss path rebuilt by hand with the same random stream."""
    rng = np.random.default_rng(1)
    t = model.encode(batch.inputs)
    H = draw.realization.cfr(model.ofdm)
    csi = genie_csi(draw.realization, model.ofdm, cm.sigma2)
    dist = model.latent(t, csi)
    z = sample_latent(dist, rng)
    link = freq_link(H, cm.sigma2, model.ofdm, rng)
    return model.decode(link(z), csi), dist


def key_cross_talk(dims=(64, 128, 256, 512, 1024), n_keys: int = 4, seeds: int = 100) -> dict[int, float]:
    """Mean off-diagonal |cos| between random keys, averaged over ``seeds`` draws per dimension."""
    out = {}
    for d in dims:
        vals = [vsa.mean_cross_talk(vsa.init_keys(n_keys, d, np.random.default_rng(s))) for s in range(seeds)]
        out[d] = float(np.mean(vals))
    return out


def check_keys(limit: float = 0.1) -> list[CheckResult]:
    ct = key_cross_talk()
    vals = [ct[d] for d in sorted(ct)]
    monotone = all(b < a for a, b in zip(vals, vals[1:]))
    trend = ", ".join(f"{d}:{ct[d]:.4f}" for d in sorted(ct))
    return [CheckResult("key cross-talk at dim 1024", ct[1024] < limit, ct[1024], limit),
            CheckResult("key cross-talk falls with dimension", monotone, float(monotone), 1.0, trend)]


def run_all(log=print) -> bool:
    ok = True
    for check in (check_gradients, check_modem_channel, check_kl, check_keys):
        t0 = time.perf_counter()
        for res in check():
            log(f"{res.line()}  [{time.perf_counter() - t0:.1f} s]")
            ok &= res.passed
    return ok

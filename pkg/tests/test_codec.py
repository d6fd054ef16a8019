import numpy as np
import pytest

from semux import diffcore as dc
from semux.channel import ChannelModel, Csi, genie_csi, sample_realization
from semux.codec import (SIGMA2_FLOOR, LatentDistribution, Postcoder, Precoder, postcode, precode, sample_latent,
                         to_complex_packets)
from semux.modem import OfdmConfig
from semux.nets import ArchConfig, ModelParams

ARCH = ArchConfig(n_comp=1, packets=2, k_used=8, n_tx=2, n_rx=2, precoder_init="identity")


def random_csi(arch, rng, sigma2=0.01):
    h = rng.standard_normal((arch.k_used, arch.n_rx, arch.n_tx)) + 1j * rng.standard_normal(
        (arch.k_used, arch.n_rx, arch.n_tx))
    return Csi(h, np.full(arch.k_used, sigma2))


def identity_csi(arch):
    return Csi(np.broadcast_to(np.eye(arch.n_rx, arch.n_tx), (arch.k_used, arch.n_rx, arch.n_tx)),
               np.full(arch.k_used, 1e-3))


def identity_precoder(arch, rng):
    pre = Precoder(ModelParams(), arch, rng)
    pre.mixer.w.data[:] = 0.0  # precoding tensor reduces to its bias, the identity
    pre.mu_head.w_re.data[:] = np.eye(arch.n_tx)
    pre.mu_head.w_im.data[:] = 0.0
    pre.sig_w.data[:] = 0.0
    pre.sig_b.data[:] = -60.0  # softplus(-60) ~ 1e-26, so sigma2 sits on the floor
    return pre


def identity_postcoder(arch, rng):
    post = Postcoder(ModelParams(), arch, rng)
    post.mixer.w.data[:] = 0.0
    post.lin.w_re.data[:] = np.eye(arch.n_rx)
    post.lin.w_im.data[:] = 0.0
    return post


def test_identity_precoder_passes_complexified_t(rng):
    pre = identity_precoder(ARCH, rng)
    t = dc.tensor(rng.standard_normal((3, ARCH.t_len)))
    dist = precode(pre, t, random_csi(ARCH, rng))
    np.testing.assert_allclose(dist.mu.data, to_complex_packets(t, ARCH).data, atol=1e-12)
    np.testing.assert_allclose(dist.sigma2.data, SIGMA2_FLOOR, rtol=1e-9)
    half = ARCH.t_len // 2
    np.testing.assert_array_equal(dist.mu.data.reshape(3, -1).real, t.data[:, :half])
    np.testing.assert_array_equal(dist.mu.data.reshape(3, -1).imag, t.data[:, half:])


def test_precoder_output_shape(rng):
    arch = ArchConfig(n_comp=1, packets=2, k_used=64, n_tx=4, n_rx=4)
    pre = Precoder(ModelParams(), arch, rng)
    dist = pre(dc.tensor(rng.standard_normal((1, arch.t_len))), random_csi(arch, rng))
    assert dist.mu.shape == dist.sigma2.shape == (1, 2, 64, 4)
    assert np.all(dist.sigma2.data > 0)


def test_precoder_is_conditioned_on_csi(rng):
    for init in ("matched", "identity"):
        pre = Precoder(ModelParams(), ArchConfig(n_comp=1, packets=2, k_used=8, precoder_init=init), rng)
        t = dc.tensor(rng.standard_normal((2, ARCH.t_len)))
        a = pre(t, random_csi(ARCH, rng)).mu.data
        b = pre(t, random_csi(ARCH, rng)).mu.data
        assert np.linalg.norm(a - b) > 0


def test_matched_precoder_starts_at_conjugate_transpose(rng):
    pre = Precoder(ModelParams(), ArchConfig(n_comp=1, packets=2, k_used=8, precoder_init="matched"), rng)
    csi = random_csi(ARCH, rng)
    m = pre.mixer(csi.features()).data
    assert m.shape == (2, 8, 2, 2)
    for p in range(2):
        np.testing.assert_allclose(m[p], np.conj(np.swapaxes(csi.H, 1, 2)), atol=1e-12)


def test_precode_shape_errors(rng):
    pre = Precoder(ModelParams(), ARCH, rng)
    with pytest.raises(dc.ShapeError, match="t length"):
        pre(dc.tensor(np.zeros((1, ARCH.t_len + 2))), random_csi(ARCH, rng))
    bad = Csi(np.zeros((ARCH.k_used + 1, 2, 2)), np.ones(ARCH.k_used + 1))
    with pytest.raises(dc.ShapeError, match="CSI"):
        pre(dc.tensor(np.zeros((1, ARCH.t_len))), bad)


def test_csi_rejects_non_finite_and_nonpositive_noise():
    with pytest.raises(ValueError, match="non-finite"):
        Csi(np.full((2, 2, 2), np.nan), np.ones(2))
    with pytest.raises(ValueError, match="positive"):
        Csi(np.ones((2, 2, 2)), np.zeros(2))


def test_sampling_degenerates_to_mean(rng):
    mu = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    z = sample_latent(LatentDistribution(dc.tensor(mu), dc.tensor(np.full((2, 3), 1e-30))), rng)
    np.testing.assert_allclose(z.data, mu, atol=1e-14)


def test_sampling_moments(rng):
    n = 100_000
    mu = np.array([0.3 - 0.7j, -1.2 + 0.1j])
    s2 = np.array([0.5, 2.0])
    dist = LatentDistribution(dc.tensor(np.broadcast_to(mu, (n, 2)).copy()),
                              dc.tensor(np.broadcast_to(s2, (n, 2)).copy()))
    z = sample_latent(dist, rng).data
    err = np.abs(z.mean(axis=0) - mu)
    assert np.all(err < 3 * np.sqrt(s2 / n))
    np.testing.assert_allclose(np.mean(np.abs(z - mu) ** 2, axis=0), s2, rtol=0.05)


def test_sampling_gradient_with_frozen_noise(rng):
    mu_re, mu_im = dc.parameter(rng.standard_normal((2, 3))), dc.parameter(rng.standard_normal((2, 3)))
    s2 = dc.parameter(rng.uniform(0.2, 2.0, (2, 3)))
    eps = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    probe = dc.tensor(rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3)))

    def f():
        z = sample_latent(LatentDistribution(dc.make_complex(mu_re, mu_im), s2), eps=eps)
        return dc.real(z * probe).sum() + dc.abs2(z).sum()

    assert dc.grad_check(f, [mu_re, mu_im, s2]) < 1e-4


def test_sampling_is_deterministic_under_seed(rng):
    dist = LatentDistribution(dc.tensor(np.zeros((4, 2), dtype=complex)), dc.tensor(np.ones((4, 2))))
    a = sample_latent(dist, np.random.default_rng(9)).data
    b = sample_latent(dist, np.random.default_rng(9)).data
    np.testing.assert_array_equal(a, b)


def test_identity_postcoder_outputs_real_then_imaginary(rng):
    post = identity_postcoder(ARCH, rng)
    z = rng.standard_normal((3, 2, 8, 2)) + 1j * rng.standard_normal((3, 2, 8, 2))
    out = postcode(post, dc.tensor(z), random_csi(ARCH, rng)).data
    assert out.shape == (3, 2 * ARCH.packets * ARCH.k_used * ARCH.n_rx)
    flat = z.reshape(3, -1)
    np.testing.assert_allclose(out, np.concatenate([flat.real, flat.imag], axis=1), atol=1e-12)


def test_postcode_shape_error(rng):
    post = Postcoder(ModelParams(), ARCH, rng)
    with pytest.raises(dc.ShapeError, match="postcode"):
        post(dc.tensor(np.zeros((1, 2, 8, 3), dtype=complex)), random_csi(ARCH, rng))


def test_postcoder_csi_weights_receive_gradient(rng):
    post = Postcoder(ModelParams(), ARCH, rng)
    z = dc.tensor(rng.standard_normal((3, 2, 8, 2)) + 1j * rng.standard_normal((3, 2, 8, 2)))
    labels = rng.integers(0, 4, 3)
    head = dc.tensor(rng.standard_normal((ARCH.r_len, 4)))
    with dc.Tape() as tape:
        loss = dc.softmax_cross_entropy(post(z, random_csi(ARCH, rng)) @ head, labels)
    g = tape.backward(loss, [post.mixer.w])
    assert np.linalg.norm(g[post.mixer.w]) > 0


def test_ideal_channel_round_trip(rng):
    from semux.channel import apply_freq

    pre, post = identity_precoder(ARCH, rng), identity_postcoder(ARCH, rng)
    csi = identity_csi(ARCH)
    t = dc.tensor(rng.standard_normal((4, ARCH.t_len)))
    dist = pre(t, csi)
    # inference transmits the latent mean
    rec = post(apply_freq(dist.mu, csi.H, 0.0), csi).data
    assert np.linalg.norm(rec - t.data) / np.linalg.norm(t.data) < 1e-6
    # a sampled latent deviates by the floor noise, sqrt(floor / 2) per quadrature
    rec = post(apply_freq(sample_latent(dist, rng), csi.H, 0.0), csi).data
    rms = np.sqrt(np.mean((rec - t.data) ** 2))
    assert rms == pytest.approx(np.sqrt(SIGMA2_FLOOR / 2), rel=0.1)


def test_precoder_outputs_finite_for_extreme_inputs(rng):
    pre = Precoder(ModelParams(), ARCH, rng)
    dist = pre(dc.tensor(1e6 * rng.standard_normal((2, ARCH.t_len))), random_csi(ARCH, rng))
    assert np.all(np.isfinite(dist.mu.data)) and np.all(np.isfinite(dist.sigma2.data))
    assert np.all(dist.sigma2.data >= SIGMA2_FLOOR)


def test_precoder_gradient_through_genie_csi(rng):
    arch = ArchConfig(n_comp=1, packets=1, k_used=4, precoder_init="matched")
    params = ModelParams()
    pre = Precoder(params, arch, rng)
    ofdm = OfdmConfig(8, 4)
    csi = genie_csi(sample_realization(ChannelModel(n_taps=2), rng), ofdm, 0.01)
    t = dc.parameter(rng.standard_normal((2, arch.t_len)))
    eps = rng.standard_normal((2, 1, 4, 2)) + 1j * rng.standard_normal((2, 1, 4, 2))

    def f():
        z = sample_latent(pre(t, csi), eps=eps)
        return dc.abs2(z).sum() + dc.imag(z).sum()

    assert dc.grad_check(f, [t] + params.in_group("precoder")) < 1e-4

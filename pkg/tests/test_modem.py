import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semux import diffcore as dc
from semux.modem import OfdmConfig, Waveform, demodulate, guard_spectrum, modulate, peak_scale, read_iq, write_iq

CFG = OfdmConfig(fft_size=64, used_subcarriers=40)


def random_latent(rng, shape):
    return dc.tensor(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def test_defaults_mirror_the_reference_numerology():
    cfg = OfdmConfig()
    assert (cfg.fft_size, cfg.used_subcarriers) == (1024, 800)
    used = cfg.used_indices()
    assert len(used) == 800 and len(set(used)) == 800 and 0 not in used
    assert len(cfg.guard_indices()) == 224
    # symmetric split around DC
    assert np.sum(used < 512) == np.sum(used > 512) == 400


def test_config_validation():
    with pytest.raises(ValueError, match="power of two"):
        OfdmConfig(fft_size=1000)
    with pytest.raises(ValueError, match="used_subcarriers"):
        OfdmConfig(fft_size=64, used_subcarriers=64)


def test_zero_latent_gives_zero_waveform():
    w = modulate(dc.tensor(np.zeros((2, 40, 2), dtype=complex)), CFG)
    np.testing.assert_array_equal(w.samples.data, 0)
    assert w.scale == 1.0


def test_single_tone_has_constant_magnitude():
    z = np.zeros((1, 40, 1), dtype=complex)
    z[0, 5, 0] = 0.7 - 0.2j
    mag = np.abs(modulate(dc.tensor(z), CFG).samples.data[0, :, 0])
    np.testing.assert_allclose(mag, mag[0], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), lead=st.sampled_from([(), (3,)]), p=st.integers(1, 3),
       n=st.integers(1, 4))
def test_unit_peak_and_round_trip(seed, lead, p, n):
    rng = np.random.default_rng(seed)
    z = random_latent(rng, lead + (p, 40, n))
    w = modulate(z, CFG)
    peaks = np.abs(w.samples.data).max(axis=(-3, -2, -1))
    np.testing.assert_allclose(peaks, 1.0, atol=1e-12)
    np.testing.assert_allclose(w.peak * w.scale, 1.0, rtol=1e-12)
    np.testing.assert_allclose(demodulate(w, CFG).data, z.data, atol=1e-9)


def test_guard_bins_carry_no_energy(rng):
    w = modulate(random_latent(rng, (2, 40, 2)), CFG)
    assert np.abs(guard_spectrum(w, CFG)).max() < 1e-12


def test_parseval_before_normalization(rng):
    z = random_latent(rng, (2, 40, 2))
    w = modulate(z, CFG)
    time_energy = np.sum(np.abs(w.samples.data / w.scale) ** 2)
    assert time_energy == pytest.approx(np.sum(np.abs(z.data) ** 2), rel=1e-12)


def test_peak_scale_matches_modulate(rng):
    z = random_latent(rng, (3, 2, 40, 2))
    scale, peak = peak_scale(z.data, CFG)
    w = modulate(z, CFG)
    np.testing.assert_allclose(scale, w.scale, rtol=1e-12)
    np.testing.assert_allclose(peak, w.peak, rtol=1e-12)


def test_real_latent_is_accepted(rng):
    z = dc.tensor(rng.standard_normal((1, 40, 2)))
    np.testing.assert_allclose(demodulate(modulate(z, CFG), CFG).data, z.data, atol=1e-9)


def test_shape_errors(rng):
    with pytest.raises(dc.ShapeError, match="modulate"):
        modulate(random_latent(rng, (1, 39, 2)), CFG)
    bad = Waveform(samples=random_latent(rng, (1, 32, 2)), scale=np.ones(()), peak=np.ones(()))
    with pytest.raises(dc.ShapeError, match="demodulate"):
        demodulate(bad, CFG)


def test_gradient_through_modem_with_constant_scale(rng):
    re, im = dc.parameter(rng.standard_normal((1, 40, 2))), dc.parameter(rng.standard_normal((1, 40, 2)))
    probe = random_latent(rng, (1, 64, 2))
    scale = modulate(dc.make_complex(re, im), CFG).scale

    def f():
        w = modulate(dc.make_complex(re, im), CFG)
        # the scale depends on the input; fixing it outside matches the stop-gradient
        w = Waveform(w.samples * (scale / w.scale), scale, w.peak)
        return dc.real(w.samples * probe).sum() + dc.abs2(demodulate(w, CFG)).sum()

    assert dc.grad_check(f, [re, im]) < 1e-6


def test_iq_export_is_interleaved_little_endian_float32(tmp_path, rng):
    w = modulate(random_latent(rng, (1, 40, 2)), CFG)
    path = tmp_path / "wave.iq"
    write_iq(path, w)
    raw = path.read_bytes()
    assert len(raw) == 64 * 2 * 2 * 4
    first = np.frombuffer(raw[:8], dtype="<f4")
    s0 = w.samples.data.reshape(-1)[0]
    np.testing.assert_allclose(first, [s0.real, s0.imag], rtol=1e-6)
    back = read_iq(path, w.samples.shape)
    np.testing.assert_allclose(back, w.samples.data, atol=1e-6)
    with pytest.raises(ValueError, match="expected shape"):
        read_iq(path, (1, 64, 3))

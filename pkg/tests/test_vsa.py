import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semux import diffcore as dc
from semux import vsa
from semux.diffcore import ShapeError


def circulant(key):
    """Matrix C with (C v) == circular_conv(v, key)."""
    n = len(key)
    return np.array([[key[(j - i) % n] for i in range(n)] for j in range(n)])


def test_init_keys_have_unit_expected_norm():
    keys = vsa.init_keys(4, 64, np.random.default_rng(0))
    norms = np.linalg.norm(keys.as_array(), axis=1)
    assert keys.n_channels == 4 and keys.dim == 64
    assert np.all(np.abs(norms - 1.0) <= 0.3)


def test_key_norm_concentration_over_seeds():
    norms = np.concatenate([np.linalg.norm(vsa.init_keys(4, 64, np.random.default_rng(s)).as_array(), axis=1)
                            for s in range(1000)])
    # chi(64)/8 has standard deviation ~0.088, so +-0.3 is ~3.4 sigma
    assert np.mean(np.abs(norms - 1.0) <= 0.3) > 0.998
    assert abs(norms.mean() - 1.0) < 0.01


def test_single_key_and_determinism():
    one = vsa.init_keys(1, 8, np.random.default_rng(3))
    x = dc.tensor(np.random.default_rng(4).standard_normal((2, 8, 2, 2)))
    assert vsa.bind(x, one.keys[0]).shape == x.shape
    again = vsa.init_keys(1, 8, np.random.default_rng(3))
    np.testing.assert_array_equal(one.as_array(), again.as_array())


def test_init_keys_validation_and_capacity_warning():
    with pytest.raises(ValueError):
        vsa.init_keys(2, 1, np.random.default_rng(0))
    with pytest.warns(UserWarning, match="below channel count"):
        vsa.init_keys(8, 4, np.random.default_rng(0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        vsa.init_keys(4, 4, np.random.default_rng(0))


def test_init_unbind_variance():
    u = vsa.init_unbind(3, 64, np.random.default_rng(0))
    entries = np.stack([m.data for m in u.matrices])
    assert u.n_channels == 3 and u.dim == 64
    assert entries.var() == pytest.approx(1 / 64, rel=0.05)


def test_bind_delta_key_is_identity(rng):
    x = rng.standard_normal((2, 16, 3, 3))
    delta = np.zeros(16)
    delta[0] = 1
    np.testing.assert_allclose(vsa.bind(dc.tensor(x), dc.tensor(delta)).data, x, atol=1e-12)


def test_bind_fiber_example():
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)
    out = vsa.bind(dc.tensor(x), dc.tensor(np.array([0.0, 1.0, 0.0]))).data.ravel()
    np.testing.assert_allclose(out, [3.0, 1.0, 2.0], atol=1e-12)


def test_bind_translation_equivariance(rng):
    x = rng.standard_normal((2, 8, 5, 5))
    k = dc.tensor(rng.standard_normal(8))
    shifted = np.roll(x, shift=(2, -1), axis=(2, 3))
    lhs = vsa.bind(dc.tensor(shifted), k).data
    rhs = np.roll(vsa.bind(dc.tensor(x), k).data, shift=(2, -1), axis=(2, 3))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), dim=st.sampled_from([3, 8, 33, 64]),
       a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_bind_is_linear_in_features(seed, dim, a, b):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, dim, 2, 2)), r.standard_normal((2, dim, 2, 2))
    k = dc.tensor(r.standard_normal(dim))
    lhs = vsa.bind(dc.tensor(a * x + b * y), k).data
    rhs = a * vsa.bind(dc.tensor(x), k).data + b * vsa.bind(dc.tensor(y), k).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_bind_rejects_length_mismatch(rng):
    with pytest.raises(ShapeError, match="bind"):
        vsa.bind(dc.tensor(rng.standard_normal((1, 4, 2, 2))), dc.tensor(np.ones(5)))


def test_bind_gradients_reach_features_and_key(rng):
    x = dc.parameter(rng.standard_normal((2, 8, 2, 2)))
    k = dc.parameter(rng.standard_normal(8))
    probe = dc.tensor(rng.standard_normal((2, 8, 2, 2)))
    assert dc.grad_check(lambda: (vsa.bind(x, k) * probe).sum(), [x, k]) < 1e-6


def test_superpose(rng):
    x = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(vsa.superpose([dc.tensor(x)]).data, x)
    np.testing.assert_array_equal(vsa.superpose([dc.tensor(x), dc.tensor(-x)]).data, np.zeros_like(x))
    parts = [rng.standard_normal((2, 3)) for _ in range(4)]
    fwd = vsa.superpose([dc.tensor(p) for p in parts]).data
    rev = vsa.superpose([dc.tensor(p) for p in reversed(parts)]).data
    np.testing.assert_allclose(fwd, rev, atol=1e-12)
    with pytest.raises(ShapeError):
        vsa.superpose([dc.tensor(x), dc.tensor(np.ones(3))])
    with pytest.raises(ValueError):
        vsa.superpose([])


def test_unbind_identity_and_zero(rng):
    x = rng.standard_normal((2, 6, 3))
    np.testing.assert_allclose(vsa.unbind(dc.tensor(x), dc.tensor(np.eye(6))).data, x, atol=1e-15)
    np.testing.assert_array_equal(vsa.unbind(dc.tensor(x), dc.tensor(np.zeros((6, 6)))).data, np.zeros_like(x))
    with pytest.raises(ShapeError, match="unbind"):
        vsa.unbind(dc.tensor(x), dc.tensor(np.eye(5)))


def test_unbind_acts_on_fiber_axis(rng):
    x = rng.standard_normal((2, 5, 3, 4))
    m = rng.standard_normal((5, 5))
    np.testing.assert_allclose(vsa.unbind(dc.tensor(x), dc.tensor(m)).data, np.einsum("ij,bjhw->bihw", m, x),
                               atol=1e-12)


def test_least_squares_unbind_recovers_value(rng):
    dim = 32
    key = rng.standard_normal(dim)
    assert np.abs(np.fft.fft(key)).min() > 1e-3
    value = rng.standard_normal((4, dim))
    bound = vsa.bind(dc.tensor(value.reshape(4, dim, 1, 1)), dc.tensor(key)).data.reshape(4, dim)
    inverse = np.linalg.lstsq(circulant(key), np.eye(dim), rcond=None)[0]
    recovered = vsa.unbind(dc.tensor(bound), dc.tensor(inverse)).data
    assert np.linalg.norm(recovered - value) / np.linalg.norm(value) < 1e-6


def test_cross_talk_examples():
    k = np.random.default_rng(0).standard_normal(16)
    same = vsa.cross_talk(np.stack([k, k, k]))
    np.testing.assert_allclose(same, np.ones((3, 3)), atol=1e-12)
    ortho = vsa.cross_talk(np.eye(4))
    np.testing.assert_array_equal(ortho, np.eye(4))
    with pytest.raises(ValueError):
        vsa.cross_talk(np.ones((1, 4)))


def test_cross_talk_random_keys_dim_1024():
    vals = [vsa.mean_cross_talk(vsa.init_keys(8, 1024, np.random.default_rng(s))) for s in range(100)]
    assert np.mean(vals) < 0.1
    assert np.mean(vals) == pytest.approx(np.sqrt(2 / (np.pi * 1024)), rel=0.1)


def test_cross_talk_is_symmetric_with_unit_diagonal(rng):
    sim = vsa.cross_talk(rng.standard_normal((5, 12)))
    np.testing.assert_allclose(sim, sim.T, atol=1e-15)
    np.testing.assert_array_equal(np.diag(sim), np.ones(5))

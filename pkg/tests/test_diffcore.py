import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semux import diffcore as dc
from semux.diffcore import ShapeError, Tape


def grad_of(f, *params):
    with Tape() as tape:
        loss = f()
    return tape.backward(loss, list(params))


# ---------------------------------------------------------------- primitives

def test_relu_definition():
    np.testing.assert_array_equal(dc.relu(dc.tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 3))
    np.testing.assert_array_equal((dc.tensor(np.eye(3)) @ dc.tensor(a)).data, a)


def test_circular_conv_matches_direct_sum():
    a = np.array([1.0, 2.0, 3.0])
    k = np.array([0.0, 1.0, 0.0])
    oracle = [sum(a[i] * k[(j - i) % 3] for i in range(3)) for j in range(3)]
    for method in ("direct", "fft"):
        out = dc.circular_conv(dc.tensor(a), dc.tensor(k), method=method).data
        np.testing.assert_allclose(out, [3.0, 1.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(out, oracle, atol=1e-12)


def test_circular_conv_delta_key_is_identity(rng):
    a = rng.standard_normal((2, 16, 3))
    delta = np.zeros(16)
    delta[0] = 1.0
    out = dc.circular_conv(dc.tensor(a), dc.tensor(delta), axis=1).data
    np.testing.assert_allclose(out, a, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(n=st.sampled_from([2, 4, 8, 32, 64, 128]), seed=st.integers(0, 10_000))
def test_circular_conv_fft_and_direct_agree(n, seed):
    r = np.random.default_rng(seed)
    a, k = r.standard_normal((3, n)), r.standard_normal(n)
    d = dc.circular_conv(dc.tensor(a), dc.tensor(k), method="direct").data
    f = dc.circular_conv(dc.tensor(a), dc.tensor(k), method="fft").data
    np.testing.assert_allclose(d, f, atol=1e-9)


def test_fft_of_delta_is_flat():
    np.testing.assert_allclose(dc.fft(dc.tensor(np.array([1.0, 0, 0, 0], dtype=complex))).data, [0.5] * 4,
                               atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(n=st.sampled_from([1, 2, 4, 16, 256]), seed=st.integers(0, 10_000))
def test_fft_round_trip_and_parseval(n, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((3, n)) + 1j * r.standard_normal((3, n))
    X = dc.fft(dc.tensor(x))
    np.testing.assert_allclose(dc.ifft(X).data, x, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(X.data), np.linalg.norm(x), rtol=0, atol=1e-9)


def test_fft_rejects_non_power_of_two():
    with pytest.raises(ShapeError, match="power of two"):
        dc.fft(dc.tensor(np.ones(6, dtype=complex)))


def test_shape_errors_name_the_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        dc.tensor(np.ones((2, 3))) @ dc.tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        dc.tensor(np.ones(3)) + dc.tensor(np.ones(4))


# ---------------------------------------------------------------- backward

def test_square_gradient_at_three():
    x = dc.parameter(3.0)
    assert grad_of(lambda: x * x, x)[x] == pytest.approx(6.0)


def test_gradient_of_constant_is_zero():
    x = dc.parameter(np.ones(4))
    g = grad_of(lambda: dc.tensor(5.0) + dc.tensor(0.0) * 1.0, x)[x]
    np.testing.assert_array_equal(g, np.zeros(4))


def test_fan_out_accumulates_both_paths():
    x = dc.parameter(np.array([1.5, -2.0]))
    g_both = grad_of(lambda: (x * 3.0).sum() + (x * x).sum(), x)[x]
    g1 = grad_of(lambda: (x * 3.0).sum(), x)[x]
    g2 = grad_of(lambda: (x * x).sum(), x)[x]
    np.testing.assert_array_equal(g_both, g1 + g2)


def test_backward_rejects_non_scalar_and_complex():
    x = dc.parameter(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)
    with Tape() as tape:
        z = dc.make_complex(x, x).sum()
    with pytest.raises(ValueError, match="real"):
        tape.backward(z)


def test_grad_check_square():
    x = dc.parameter(2.0)
    assert dc.grad_check(lambda: x * x, [x]) < 1e-8


def test_grad_check_linear_relu_cross_entropy(rng):
    w = dc.parameter(rng.standard_normal((5, 4)))
    b = dc.parameter(rng.standard_normal(4))
    x = dc.tensor(rng.standard_normal((6, 5)))
    y = rng.integers(0, 4, 6)
    assert dc.grad_check(lambda: dc.softmax_cross_entropy(dc.relu(x @ w + b), y), [w, b]) < 1e-6


def _complex_probe(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


PRIMITIVE_CASES = {
    "mul broadcast": lambda r, p: (p[0] * p[1]).sum(),
    "matmul batched": lambda r, p: dc.abs2(dc.make_complex(p[0], p[1]) @ dc.tensor(_complex_probe(r, (4, 2)))).sum(),
    "exp/log/softplus/sqrt": lambda r, p: (dc.log(dc.softplus(p[0]) + 1.0) + dc.exp(p[1] * 0.1)
                                          + dc.sqrt(dc.abs2(p[0]) + 1.0)).sum(),
    "fft/ifft": lambda r, p: dc.real(dc.fft(dc.make_complex(p[0], p[1]), axis=-1)
                                     * dc.tensor(_complex_probe(r, (4, 4)))).sum()
    + dc.imag(dc.ifft(dc.make_complex(p[1], p[0]), axis=0)).sum(),
    "conj/abs2/stack/concat": lambda r, p: (dc.abs2(dc.conj(dc.make_complex(p[0], p[1])) * 2.0).sum()
                                           + dc.concat([p[0], p[1]], axis=1).mean()
                                           + (dc.stack([p[0], p[1]], axis=0) * 0.5).sum()),
    "getitem/reshape/transpose": lambda r, p: (p[0][1:, ::2].reshape(-1) * p[1].T[0, :3].reshape(-1)[:1]).sum(),
    "embed": lambda r, p: dc.abs2(dc.embed(dc.make_complex(p[0], p[1]), np.array([0, 2, 5, 7]), 8, axis=0)
                                  * dc.tensor(_complex_probe(r, (8, 4)))).sum(),
}


@pytest.mark.parametrize("case", sorted(PRIMITIVE_CASES))
def test_primitive_backward_matches_finite_differences(case):
    r = np.random.default_rng(7)
    p = [dc.parameter(r.standard_normal((4, 4))), dc.parameter(r.standard_normal((4, 4)))]
    probe_rng_state = r.bit_generator.state

    def f():
        r.bit_generator.state = probe_rng_state
        return PRIMITIVE_CASES[case](r, p)

    assert dc.grad_check(f, p) < 1e-6


def test_conv_and_pool_backward(rng):
    x = dc.parameter(rng.standard_normal((2, 3, 6, 6)))
    w = dc.parameter(rng.standard_normal((4, 3, 3, 3)))
    b = dc.parameter(rng.standard_normal(4))
    probe = dc.tensor(rng.standard_normal((2, 4, 3, 3)))
    err = dc.grad_check(lambda: (dc.avgpool2d(dc.conv2d(x, w, b, padding=1), 2) * probe).sum(), [x, w, b],
                        max_entries=20)
    assert err < 1e-6


def test_circular_conv_backward_both_methods(rng):
    a = dc.parameter(rng.standard_normal((2, 8, 3)))
    k = dc.parameter(rng.standard_normal(8))
    probe = dc.tensor(rng.standard_normal((2, 8, 3)))
    for method in ("direct", "fft"):
        err = dc.grad_check(lambda: (dc.circular_conv(a, k, axis=1, method=method) * probe).sum(), [a, k])
        assert err < 1e-6, method


def test_unreachable_parameter_gets_zero_gradient():
    x, unused = dc.parameter(np.ones(2)), dc.parameter(np.ones((3, 3)))
    g = grad_of(lambda: (x * 2.0).sum(), x, unused)
    np.testing.assert_array_equal(g[unused], np.zeros((3, 3)))


def test_tapes_are_isolated_per_thread():
    import threading

    results = {}

    def work(i):
        x = dc.parameter(float(i))
        with Tape() as tape:
            loss = x * x * float(i)
        results[i] = tape.backward(loss, [x])[x]

    threads = [threading.Thread(target=work, args=(i,)) for i in range(1, 6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {i: pytest.approx(2.0 * i * i) for i in range(1, 6)}

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nelson_lab import kernels
from nelson_lab.kernels import _pure

BOTH = kernels.available_backends()
needs_compiled = pytest.mark.skipif(len(BOTH) < 2, reason="compiled kernels not built")


def numpy_philox(seed, traj, step, domain):
    """One Philox4x64-10 block from numpy's independent implementation (step >= 1)."""
    # numpy increments the counter before producing a block, so start one below
    ctr = np.array([step - 1, domain, 0, 0], dtype=np.uint64)
    bg = np.random.Philox(key=np.array([seed, traj], dtype=np.uint64), counter=ctr)
    return bg.random_raw(4)


@pytest.mark.parametrize("seed,traj,step,domain", [
    (0, 0, 1, 0),
    (12345, 7, 99, 1),
    (2**63 + 5, 2**40, 3, 0),
    (2**64 - 1, 2**64 - 1, 2**40, 1),
])
def test_philox_matches_numpy(backend, seed, traj, step, domain):
    mod = kernels.get_backend(backend)
    got = mod.philox_block(seed, np.array([traj], dtype=np.uint64), np.array([step], dtype=np.uint64), domain)
    np.testing.assert_array_equal(np.asarray(got).reshape(4), numpy_philox(seed, traj, step, domain))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), traj=st.integers(0, 2**64 - 1), step=st.integers(1, 2**62))
def test_philox_property_matches_numpy(seed, traj, step):
    got = _pure.philox_block(seed, traj, step, 0)
    np.testing.assert_array_equal(got, numpy_philox(seed, traj, step, 0))


@needs_compiled
def test_normal_pairs_backends_agree():
    traj = np.arange(64, dtype=np.uint64)
    step = np.arange(64, dtype=np.uint64)
    a = kernels.get_backend("compiled").normal_pairs(9, traj, step, 1)
    b = _pure.normal_pairs(9, traj, step, 1)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(bits=st.lists(st.integers(0, 2**64 - 1), min_size=1, max_size=50))
def test_uniform_is_open_interval(bits):
    u = kernels.to_uniform(np.array(bits, dtype=np.uint64))
    assert np.all((u > 0) & (u < 1))


def test_normals_are_standard():
    z = kernels.normal_pairs(3, np.arange(50_000, dtype=np.uint64), 5, 0).ravel()
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1) < 4 * np.sqrt(2 / z.size)


def test_step_and_path_normals_share_slots():
    d = 2
    path = kernels.path_normals(11, 4, 0, 6, d)
    for step in range(6):
        np.testing.assert_array_equal(kernels.step_normals(11, [4], step, d)[0], path[step])


def test_domains_are_independent_streams():
    a = kernels.normal_pairs(1, np.arange(10, dtype=np.uint64), 0, kernels.DOMAIN_INCREMENT)
    b = kernels.normal_pairs(1, np.arange(10, dtype=np.uint64), 0, kernels.DOMAIN_INITIAL)
    assert not np.any(a == b)


def _linear_inputs(n=40, d=2, k=3, steps=25, seed=0):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(n, d))
    params = rng.normal(size=(n, k))
    A = -np.eye(d)[None] + 0.1 * rng.normal(size=(steps, d, d))
    B = 0.1 * rng.normal(size=(steps, d, k))
    c = 0.1 * rng.normal(size=(steps, d))
    dts = np.full(steps, 0.01)
    return x0, params, np.arange(n, dtype=np.uint64), dts, A, B, c, np.full(d, 1.0)


@needs_compiled
def test_em_linear_backends_agree():
    x0, p, traj, dts, A, B, c, ns = _linear_inputs()
    rec = np.array([0, 10, 25])
    out = [kernels.get_backend(b).em_linear(x0, p, traj, 5, 7, dts, A, B, c, ns, rec) for b in BOTH]
    np.testing.assert_allclose(out[0][0], out[1][0], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(out[0][2], out[1][2])


def test_em_linear_first_step_by_hand(backend):
    x0, p, traj, dts, A, B, c, ns = _linear_inputs(n=3, steps=1)
    _, final, _ = kernels.get_backend(backend).em_linear(x0, p, traj, 5, 7, dts, A, B, c, ns, np.array([1]))
    z = kernels.step_normals(5, traj, 7, 2)
    want = x0 + (x0 @ A[0].T + p @ B[0].T + c[0]) * dts[0] + ns * np.sqrt(dts[0]) * z
    np.testing.assert_allclose(final, want, rtol=0, atol=1e-14)


def test_em_linear_reports_failure(backend):
    x0, p, traj, dts, A, B, c, ns = _linear_inputs(n=4, steps=5)
    c = c.copy()
    c[2, 0] = np.inf
    _, final, fail = kernels.get_backend(backend).em_linear(x0, p, traj, 0, 0, dts, A, B, c, ns, np.array([5]))
    assert np.all(fail == 2)
    assert np.all(np.isnan(final))


def _mixture_inputs(n=30, steps=20):
    # two 1D branches at +-1.5 with a relative phase
    q = np.full((steps, 2, 1, 1), -0.5 + 0.1j)
    lin = np.stack([np.full((steps, 1), 1.5 + 0.2j), np.full((steps, 1), -1.5 - 0.3j)], axis=1)
    const = np.zeros((steps, 2), dtype=complex)
    const[:, 1] = 0.4j
    rng = np.random.default_rng(1)
    x0 = rng.normal(scale=2.0, size=(n, 1))
    mask = np.ones((n, 2), dtype=np.uint8)
    mask[::3, 1] = 0
    return (x0, np.arange(n, dtype=np.uint64), 2, 3, np.full(steps, 0.01), q.real.copy(), q.imag.copy(),
            lin.real.copy(), lin.imag.copy(), const.real.copy(), const.imag.copy(), np.full(steps, -60.0),
            mask, np.array([1.0]), np.array([1.0]), 1e4, np.array([0, 20]))


@needs_compiled
def test_em_mixture_backends_agree():
    args = _mixture_inputs()
    out = [kernels.get_backend(b).em_mixture(*args) for b in BOTH]
    np.testing.assert_allclose(out[0][0], out[1][0], rtol=0, atol=1e-11)
    np.testing.assert_array_equal(out[0][3], out[1][3])


def test_mixture_drift_single_branch_is_affine():
    q = np.array([[[-0.5 + 0.2j]]])
    lin = np.array([[0.3 - 0.1j]])
    x = np.linspace(-2, 2, 9)[:, None]
    b, hit = _pure.mixture_drift(x, q.real, q.imag, lin.real, lin.imag, np.zeros(1), np.zeros(1), -60.0,
                                 np.ones((9, 1), dtype=bool), np.array([1.0]), 1e4)
    grad = 2 * q[0, 0, 0] * x[:, 0] + lin[0, 0]
    np.testing.assert_allclose(b[:, 0], grad.real + grad.imag, atol=1e-14)
    assert not hit.any()


def test_mixture_drift_clamps(backend):
    args = list(_mixture_inputs(n=4, steps=1))
    args[15] = 1e-3  # b_max
    *_, clamped = kernels.get_backend(backend).em_mixture(*args[:16], np.array([1]))
    assert np.all(clamped == 1)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("gpu")

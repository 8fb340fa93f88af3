import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from nelson_lab import wavefunction as wf
from nelson_lab.measurement import point_collapse_drift


def mehler_kernel(x, xp, t, m=1.0, omega=1.0, hbar=1.0):
    """Oscillator propagator written out directly, for 0 < omega t < pi."""
    s, c = np.sin(omega * t), np.cos(omega * t)
    pref = np.sqrt(m * omega / (2j * np.pi * hbar * s))
    return pref * np.exp(1j * m * omega / (2 * hbar) * ((x**2 + xp**2) * c - 2 * x * xp) / s)


def free_kernel(x, xp, t, m=1.0, hbar=1.0):
    return np.sqrt(m / (2j * np.pi * hbar * t)) * np.exp(1j * m * (x - xp) ** 2 / (2 * hbar * t))


def quadrature_propagate(psi, x, kernel, t, half_width=12.0, n=40001):
    xp = np.linspace(-half_width, half_width, n)
    vals = wf.evaluate(psi, xp)
    k = kernel(x[:, None], xp[None, :], t)
    return np.trapezoid(k * vals[None, :], xp, axis=1)


# -- construction ------------------------------------------------------------


def test_ground_state_values():
    psi = wf.make_ground_state()
    assert wf.evaluate(psi, [0.0]) == pytest.approx(np.pi ** -0.25, abs=1e-15)
    assert psi.norm() == pytest.approx(1.0, abs=1e-14)
    x = np.array([[1.0]])
    assert wf.velocity(psi, x, "b")[0, 0] == pytest.approx(-1.0, abs=1e-14)
    assert wf.velocity(psi, x, "u")[0, 0] == pytest.approx(-1.0, abs=1e-14)
    assert wf.velocity(psi, x, "v")[0, 0] == pytest.approx(0.0, abs=1e-14)
    assert wf.velocity(psi, x, "b*")[0, 0] == pytest.approx(1.0, abs=1e-14)


def test_ground_state_units():
    psi = wf.make_ground_state(mass=2.0, omega=3.0, hbar=0.5)
    _, cov = psi.branches[0].density_params()
    assert cov[0, 0] == pytest.approx(0.5 / (2 * 2.0 * 3.0))
    # b = -omega x for the ground state in any units
    assert wf.velocity(psi, np.array([[0.7]]), "b")[0, 0] == pytest.approx(-3.0 * 0.7)


def test_collapsed_state_density():
    psi = wf.make_collapsed_state([0.3], 0.1)
    mean, cov = psi.branches[0].density_params()
    assert mean[0] == pytest.approx(0.3)
    assert cov[0, 0] == pytest.approx(0.01)
    assert psi.norm() == pytest.approx(1.0, abs=1e-13)


def test_double_slit_labels_and_norm():
    psi = wf.make_double_slit_state(4.0, 0.5)
    assert psi.labels() == ["U", "L"]
    assert psi.norm() == pytest.approx(1.0, abs=1e-13)


def test_invalid_inputs():
    with pytest.raises(wf.WavefunctionError):
        wf.make_collapsed_state([0.0], 0.0)
    with pytest.raises(wf.WavefunctionError):
        wf.make_correlated_pair(r=1.0)
    with pytest.raises(wf.WavefunctionError):
        wf.GaussianBranch(quad=[[0.1]], lin=[0.0])
    with pytest.raises(wf.WavefunctionError):
        wf.make_ground_state(omega=0.0)
    with pytest.raises(wf.WavefunctionError):
        wf.propagate(wf.make_ground_state(), -1.0)


def test_overflow_is_reported():
    psi = wf.make_collapsed_state([0.0], 1e-3)
    with pytest.raises(wf.ExponentOverflowError):
        wf.evaluate(wf.Wavefunction(
            (wf.GaussianBranch([[-1e-3]], [50.0]),), psi.physics), [40.0])


def test_near_node_policy():
    psi = wf.make_double_slit_state(4.0, 1.0, weights=(1.0, -1.0))
    x = np.array([[0.0], [1.0]])
    with pytest.raises(wf.NearNodeError) as info:
        wf.velocity(psi, x, "b")
    assert info.value.mask.tolist() == [True, False]
    out = wf.velocity(psi, x, "b", on_node="nan")
    assert np.isnan(out[0, 0]) and np.isfinite(out[1, 0])


# -- propagation --------------------------------------------------------------


@pytest.mark.parametrize("t", [0.3, 1.2, 2.5])
def test_propagator_matches_kernel_quadrature(t):
    psi = wf.gaussian_branch([0.4], [[0.2]], momentum=[0.7])
    psi = wf.Wavefunction((psi,), wf.Physics.uniform(1))
    x = np.linspace(-2, 2, 9)
    want = quadrature_propagate(psi, x, mehler_kernel, t)
    got = wf.evaluate(wf.propagate(psi, t), x)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_free_propagator_matches_kernel_quadrature():
    physics = wf.Physics(np.array([1.0]), np.array([0.0]))
    psi = wf.make_double_slit_state(3.0, 0.6, physics)
    x = np.linspace(-3, 3, 7)
    want = quadrature_propagate(psi, x, free_kernel, 0.8)
    np.testing.assert_allclose(wf.evaluate(wf.propagate(psi, 0.8), x), want, atol=1e-9)


def test_ground_state_phase():
    psi = wf.make_ground_state()
    x = np.linspace(-2, 2, 5)
    for t in (0.4, np.pi, 2 * np.pi, 7.0):
        ratio = wf.evaluate(wf.propagate(psi, t), x) / wf.evaluate(psi, x)
        np.testing.assert_allclose(ratio, np.exp(-0.5j * t), atol=1e-12)


def test_half_period_mirror_and_phase():
    psi = wf.make_collapsed_state([1.0], 0.3)
    x = np.linspace(-2, 2, 9)
    for n in (1, 2, 3):
        moved = wf.evaluate(wf.propagate(psi, n * np.pi), x)
        base = wf.evaluate(psi, (-1) ** n * x)
        np.testing.assert_allclose(moved, base * np.exp(-0.5j * np.pi * n), atol=1e-12)


def test_collapsed_drift_approaches_point_formula():
    x = np.linspace(-2, 2, 20)
    for t in (0.3, 1.0, 2.0):
        errs = []
        for w in (0.02, 0.01):
            psi = wf.propagate(wf.make_collapsed_state([0.5], w), t)
            errs.append(np.max(np.abs(wf.velocity(psi, x[:, None], "b")[:, 0] - point_collapse_drift(x, t, 0.5))))
        assert 3.5 < errs[0] / errs[1] < 4.5


@pytest.mark.parametrize("omega", [1.0, 0.0])
def test_log_det_follows_continuous_branch(omega):
    physics = wf.Physics(np.array([1.0]), np.array([omega]))
    quad = wf.make_collapsed_state([0.0], 0.05).branches[0].quad
    t = np.linspace(0.0, 4 * np.pi, 200_001)
    det = np.linalg.det(wf._z_matrices(quad, physics, t))
    want = np.log(np.abs(det)) + 1j * np.unwrap(np.angle(det))
    np.testing.assert_allclose(wf.log_det_z(quad, physics, t[::1000]), want[::1000], atol=1e-9)


def test_log_det_mixed_coordinates():
    physics = wf.Physics(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    quad = np.diag([-1.0 / (4 * 0.1**2), -1.0 / (4 * 0.2**2)]).astype(complex)
    t = np.array([0.5, 3.0, 7.0])
    want = (wf.log_det_z(quad[:1, :1], wf.Physics(np.array([1.0]), np.array([1.0])), t)
            + wf.log_det_z(quad[1:, 1:], wf.Physics(np.array([1.0]), np.array([0.0])), t))
    np.testing.assert_allclose(wf.log_det_z(quad, physics, t), want, atol=1e-9)


def test_two_coordinate_propagation_factorizes():
    physics = wf.Physics(np.array([1.0, 2.0]), np.array([1.0, 0.5]))
    b = wf.gaussian_branch([0.2, -0.4], np.diag([0.3, 0.6]), momentum=[0.1, -0.2])
    psi = wf.Wavefunction((b,), physics)
    p1 = wf.Wavefunction((wf.gaussian_branch([0.2], [[0.3]], momentum=[0.1]),), wf.Physics(np.array([1.0]), np.array([1.0])))
    p2 = wf.Wavefunction((wf.gaussian_branch([-0.4], [[0.6]], momentum=[-0.2]),), wf.Physics(np.array([2.0]), np.array([0.5])))
    x = np.array([[0.3, -0.1], [-1.0, 0.8]])
    t = 1.7
    got = wf.evaluate(wf.propagate(psi, t), x)
    want = wf.evaluate(wf.propagate(p1, t), x[:, 0]) * wf.evaluate(wf.propagate(p2, t), x[:, 1])
    np.testing.assert_allclose(got, want, atol=1e-13)


gauss = st.tuples(
    st.floats(-2, 2), st.floats(0.05, 2.0), st.floats(-2, 2),
)


@settings(max_examples=40, deadline=None)
@given(params=gauss, t=st.floats(0.0, 20.0), omega=st.sampled_from([0.0, 0.5, 1.0, 3.0]))
def test_norm_is_conserved(params, t, omega):
    mean, var, p = params
    physics = wf.Physics(np.array([1.0]), np.array([omega]))
    psi = wf.Wavefunction((wf.gaussian_branch([mean], [[var]], momentum=[p]),), physics)
    assert wf.propagate(psi, t).norm() == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(params=gauss, t1=st.floats(0.01, 5.0), t2=st.floats(0.01, 5.0))
def test_evolution_composes(params, t1, t2):
    mean, var, p = params
    psi = wf.make_superposition([wf.gaussian_branch([mean], [[var]], momentum=[p]),
                                 wf.gaussian_branch([-mean], [[var]])], wf.Physics.uniform(1))
    x = np.linspace(-2, 2, 7)
    a = wf.log_evaluate(wf.evolve(wf.evolve(psi, t1), t2), x)
    b = wf.log_evaluate(wf.evolve(psi, t1 + t2), x)
    assert np.allclose(a.real, b.real, atol=1e-8)
    assert np.allclose(np.exp(1j * (a.imag - b.imag)), 1.0, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(params=gauss, t=st.floats(0.01, 5.0))
def test_evolution_reverses(params, t):
    mean, var, p = params
    psi = wf.Wavefunction((wf.gaussian_branch([mean], [[var]], momentum=[p]),), wf.Physics.uniform(1))
    x = np.linspace(-2, 2, 7)
    np.testing.assert_allclose(wf.evaluate(wf.evolve(wf.evolve(psi, t), -t), x), wf.evaluate(psi, x), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(params=gauss, t=st.floats(0.0, 5.0), x=st.floats(-3, 3))
def test_velocity_identities(params, t, x):
    mean, var, p = params
    psi = wf.propagate(wf.make_superposition([wf.gaussian_branch([mean], [[var]], momentum=[p]),
                                              wf.gaussian_branch([mean + 1.0], [[var]])], wf.Physics.uniform(1)), t)
    pt = np.array([[x]])
    rel = wf.log_derivatives(psi, pt)[3]
    assume(rel[0] > -50)
    b, bs, v, u = (wf.velocity(psi, pt, k) for k in ("b", "b*", "v", "u"))
    np.testing.assert_allclose(b, v + u, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(bs, v - u, rtol=1e-12, atol=1e-12)


def test_drift_field_callable():
    psi = wf.make_ground_state()
    field = wf.drift_field(psi, "b")
    np.testing.assert_allclose(field(np.array([[2.0]])), [[-2.0]])


def test_clamped_drift():
    psi = wf.make_collapsed_state([0.0], 0.01)
    b, hit = wf.clamped_drift(psi, np.array([[0.5], [0.0]]), 100.0)
    assert hit.tolist() == [True, False]
    assert b[0, 0] == -100.0


# -- residuals -------------------------------------------------------------------


def test_hjm_residual_ground_state():
    psi = wf.make_ground_state()
    assert wf.hjm_residual(psi, np.linspace(-5, 5, 101)[:, None]).max() < 1e-8


def test_hjm_residual_second_order():
    psi = wf.make_collapsed_state([1.0], 0.1)
    x = np.linspace(-2, 2, 41)[:, None]
    errs = [wf.hjm_residual(psi, x, t=0.4, dt_res=h).max() for h in (2e-3, 1e-3, 5e-4)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((orders > 1.8) & (orders < 2.2))

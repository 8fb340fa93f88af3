import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nelson_lab import dynamics as dy
from nelson_lab import kernels
from nelson_lab import wavefunction as wf
from nelson_lab.measurement import make_preset, run_experiment, run_reference


def small_cfg(**kw):
    base = dict(dt=1e-2, t_end=1.0, n_traj=2000, seed=5)
    base.update(kw)
    return dy.SdeConfig(**base)


# -- configuration and grids ---------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(dt=-1.0), dict(t_end=0.0), dict(n_traj=0),
                                dict(seed=-1), dict(b_max=0.0), dict(threads=0), dict(stiffness=0.0),
                                dict(nu=-1.0)])
def test_config_validation(kw):
    with pytest.raises(dy.ConfigurationError):
        small_cfg(**kw)


def test_time_grid_hits_breakpoints():
    grid = dy.make_time_grid(0.0, 2 * np.pi, 1e-2, [np.pi, 1.0])
    for t in (0.0, 1.0, np.pi, 2 * np.pi):
        assert dy._time_index(grid, t) >= 0
    assert np.diff(grid).max() <= 1e-2 + 1e-15
    assert grid[-1] == 2 * np.pi


@settings(max_examples=40, deadline=None)
@given(t_end=st.floats(0.05, 10.0), dt=st.floats(1e-3, 0.5), b=st.lists(st.floats(0.0, 1.0), max_size=4))
def test_time_grid_properties(t_end, dt, b):
    grid = dy.make_time_grid(0.0, t_end, dt, [x * t_end for x in b])
    assert grid[0] == 0.0 and grid[-1] == t_end
    assert np.all(np.diff(grid) > 0)
    assert np.diff(grid).max() <= dt * (1 + 1e-9)


def test_time_grid_rejects_outside_breakpoint():
    with pytest.raises(dy.ConfigurationError):
        dy.make_time_grid(0.0, 1.0, 0.1, [2.0])


def test_off_grid_lookup():
    with pytest.raises(dy.OffGridError):
        dy._time_index(np.array([0.0, 0.1]), 0.05)


def test_refine_grid_bounds_stiff_steps():
    psi = wf.make_collapsed_state([0.0], 0.01)
    g = dy.LinearGuidance.from_wavefunction(psi)
    grid = dy.refine_grid(dy.make_time_grid(0.0, 1.0, 1e-2), g, (), 0.25)
    a = g.coefficients(grid[:-1])[0][:, 0, 0]
    assert np.all(np.abs(a) * np.diff(grid) <= 0.25 + 1e-9)
    assert grid.size > 101


# -- sampling --------------------------------------------------------------------------


def test_initial_samples_follow_density():
    psi = wf.make_ground_state()
    x = dy.sample_initial(psi, 20_000, 1)[:, 0]
    assert stats.kstest(x, stats.norm(scale=np.sqrt(0.5)).cdf).statistic < 1.36 / np.sqrt(x.size)


def test_rejection_sampling_superposition():
    psi = wf.make_superposition([wf.gaussian_branch([-0.7], [[0.25]]), wf.gaussian_branch([0.7], [[0.25]])],
                                wf.Physics.uniform(1))
    x = dy.sample_initial(psi, 20_000, 2)[:, 0]
    grid = np.linspace(-4, 4, 20001)
    rho = wf.density(psi, grid)
    cdf = np.cumsum(rho) * (grid[1] - grid[0])
    assert stats.kstest(x, lambda v: np.interp(v, grid, cdf / cdf[-1])).statistic < 1.63 / np.sqrt(x.size)


def test_sampling_depends_only_on_trajectory_id():
    psi = wf.make_double_slit_state(2.0, 0.5)
    full = dy.sample_initial(psi, 50, 3)
    part = dy.sample_initial(psi, 0, 3, traj_ids=[7, 31])
    np.testing.assert_array_equal(part, full[[7, 31]])


def test_rejection_sampling_refuses_hopeless_envelope():
    # nearly cancelling overlapping branches leave almost no norm
    b1 = wf.gaussian_branch([0.0], [[1.0]])
    b2 = wf.gaussian_branch([1e-4], [[1.0]], log_weight=1j * np.pi)
    psi = wf.Wavefunction((b1, b2), wf.Physics.uniform(1))
    with pytest.raises(dy.ConfigurationError):
        dy.sample_initial(psi, 10, 0)


# -- integration ---------------------------------------------------------------------


def test_integrate_matches_engine(backend):
    psi = wf.make_ground_state()
    cfg = small_cfg(n_traj=6)
    grid = dy.make_time_grid(0.0, 1.0, cfg.dt)
    x0 = dy.sample_initial(psi, cfg.n_traj, cfg.seed)
    ens = dy.simulate(dy.LinearGuidance.from_wavefunction(psi), x0, cfg, grid, [1.0], backend=backend)
    for i in range(cfg.n_traj):
        tr = dy.integrate(dy.WavefunctionDrift(psi), x0[i], cfg, i, times=grid, physics=psi.physics)
        np.testing.assert_allclose(tr.at(1.0), ens.at(1.0)[i], atol=1e-12)


def test_integrate_aborts_with_location():
    cfg = small_cfg()

    def drift(x, t):
        return np.array([np.inf]) if t > 0.3 else -x

    with pytest.raises(dy.TrajectoryAborted) as info:
        dy.integrate(drift, [0.0], cfg, 17)
    assert info.value.traj_id == 17
    assert info.value.step == 31


def test_threads_do_not_change_results():
    psi = wf.make_ground_state()
    out = []
    for threads in (1, 3):
        cfg = small_cfg(n_traj=3000, threads=threads, chunk_size=700)
        out.append(dy.equilibrium_ensemble(psi, cfg, record_times=[0.5, 1.0]).positions)
    np.testing.assert_array_equal(out[0], out[1])


def test_backends_agree_on_ensemble():
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    preset = make_preset("double-slit", lags=[0.0, 0.5])
    cfg = small_cfg(n_traj=300)
    a = run_experiment(preset, cfg, backend="compiled")
    b = run_experiment(preset, cfg, backend="pure")
    np.testing.assert_allclose(a.positions, b.positions, atol=1e-10)


@pytest.mark.parametrize("name", ["oscillator-measured-at-0", "entangled-pair-measured", "double-slit",
                                  "entangled-pair-unmeasured"])
def test_engine_matches_reference(name):
    preset = make_preset(name)
    preset = preset.with_lags([t for t in preset.lags if t <= np.pi])
    cfg = small_cfg(n_traj=64, t_end=preset.t_end)
    ens = run_experiment(preset, cfg)
    ids = [0, 13, 63]
    rec, paths, _ = run_reference(preset, cfg, ids)
    for k, i in enumerate(ids):
        for t in rec:
            np.testing.assert_allclose(paths[k][list(rec).index(t)], ens.at(t)[i], atol=1e-9)


def test_quadrature_ou_matches_em_at_small_step():
    times = np.linspace(0.0, 1.0, 10_001)
    dw = dy.wiener_increments(4, np.arange(200), times)[..., 0]
    x0 = np.linspace(-1, 1, 200)
    exact = dy.quadrature_ou_path(x0, dw, 1.0, times)
    x = x0.copy()
    for k in range(times.size - 1):
        x = x - x * (times[k + 1] - times[k]) + dw[:, k]
    assert np.sqrt(np.mean((x - exact) ** 2)) < 1e-3


def test_ou_quadrature_without_noise_is_exponential():
    times = np.linspace(0, 2, 11)
    out = dy.quadrature_ou_path(1.5, np.zeros(10), 0.7, times)
    assert out == pytest.approx(1.5 * np.exp(-1.4))


@settings(max_examples=40, deadline=None)
@given(x0=st.floats(-3, 3), n=st.integers(1, 4), seed=st.integers(0, 2**32))
def test_collapsed_quadrature_exact_at_half_periods(x0, n, seed):
    times = np.linspace(0.05, n * np.pi, 400)
    dw = np.random.default_rng(seed).normal(scale=0.05, size=(3, times.size - 1))
    res = dy.quadrature_collapsed_path(np.full(3, x0), np.full(3, x0), dw, 1.0, times)
    np.testing.assert_array_equal(res.position, (-1.0) ** n * x0)


def test_collapsed_quadrature_identity_at_start():
    times = np.array([0.5, 0.5])
    res = dy.quadrature_collapsed_path(0.2, 0.4, np.zeros((1,)), 1.0, times)
    assert res.position == pytest.approx(0.4)


# -- estimators --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def stationary():
    psi = wf.make_ground_state()
    cfg = dy.SdeConfig(dt=1e-3, t_end=1.2, n_traj=40_000, seed=11)
    return psi, dy.equilibrium_ensemble(psi, cfg, record_times=[0.48, 0.49, 0.5, 0.51, 0.52])


def test_forward_and_backward_drift_estimates(stationary):
    _, ens = stationary
    fwd = dy.estimate_mean_derivative(ens, 0.5, 0.01, "forward", n_bins=10)
    bwd = dy.estimate_mean_derivative(ens, 0.5, 0.01, "backward", n_bins=10)
    assert np.all(np.abs(fwd.estimate + fwd.centers) < 4 * fwd.stderr)
    assert np.all(np.abs(bwd.estimate - bwd.centers) < 4 * bwd.stderr)
    assert fwd(np.array([100.0]))[0] == fwd.estimate[-1]


def test_underpopulated_bins(stationary):
    _, ens = stationary
    with pytest.raises(dy.UnderpopulatedBinError):
        dy.estimate_mean_derivative(ens, 0.5, 0.01, "forward", n_bins=10, min_count=10_000)


def test_unknown_direction(stationary):
    _, ens = stationary
    with pytest.raises(ValueError):
        dy.estimate_mean_derivative(ens, 0.5, 0.01, "sideways")


def test_generator_closed_form_ground_state():
    psi = wf.make_ground_state()
    x = np.linspace(-2, 2, 5)[:, None]
    np.testing.assert_allclose(dy.generator_closed_form(psi, x, "Db"), x, atol=1e-9)
    np.testing.assert_allclose(dy.generator_closed_form(psi, x, "D*b*"), x, atol=1e-9)


@pytest.mark.parametrize("direction", ["Db", "D*b*"])
def test_drift_derivative_estimate_matches_generator(direction):
    # a spreading, moving packet, so b depends on time as well as position
    psi = wf.make_collapsed_state([0.5], 0.3)
    times = [0.48, 0.49, 0.5, 0.51, 0.52]
    ens = dy.equilibrium_ensemble(psi, dy.SdeConfig(dt=1e-3, t_end=0.6, n_traj=40_000, seed=3), times)
    est = dy.estimate_mean_derivative(ens, 0.5, 0.01, direction, n_bins=10)
    want = dy.generator_closed_form(wf.propagate(psi, 0.5), est.centers[:, None], direction)[:, 0]
    assert np.all(np.abs(est.estimate - want) < 4 * est.stderr)


@pytest.mark.parametrize("name", ["oscillator-measured-at-0", "double-slit"])
def test_ensemble_velocity_uses_own_guidance(name):
    preset = make_preset(name)
    ens = run_experiment(preset, small_cfg(n_traj=50, t_end=preset.t_end))
    t = float(ens.times[ens.times > 0][0])
    got = ens.velocity(t, "b*")
    for i in (0, 7, 31):
        want = wf.velocity(ens.conditional_wavefunction(i, t), ens.positions[i, ens.time_index(t)], "b*")
        np.testing.assert_allclose(got[i], want, rtol=1e-9, atol=1e-12)


def test_linear_guidance_round_trip():
    psi = wf.propagate(wf.make_correlated_pair(), 0.3)
    g = dy.LinearGuidance.from_wavefunction(psi)
    x = np.array([[0.2, -0.1], [1.0, 0.4]])
    a, b, c = g.coefficients([psi.time + 0.5])
    np.testing.assert_allclose(x @ a[0].T + c[0], wf.velocity(wf.propagate(psi, 0.5), x, "b"), atol=1e-12)
    # the conditional wavefunction is defined up to a global phase
    np.testing.assert_allclose(wf.density(g.wavefunction([], psi.time + 0.5), x),
                               wf.density(wf.propagate(psi, 0.5), x), atol=1e-12)

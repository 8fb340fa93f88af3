import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nelson_lab import correlators as co
from nelson_lab import dynamics as dy
from nelson_lab import wavefunction as wf
from nelson_lab.measurement import make_preset, run_experiment

LAGS = np.array([0.0, 0.5, 1.0, 2.0, np.pi, 2 * np.pi])


def test_unmeasured_oscillator_reference():
    p = make_preset("oscillator-unmeasured", lags=LAGS)
    np.testing.assert_allclose(co.sm_reference(p, LAGS), 0.5 * np.exp(-LAGS), atol=1e-9)


def test_collapsed_reference_is_cosine():
    p = make_preset("oscillator-measured-at-0", lags=LAGS)
    np.testing.assert_allclose(co.sm_reference(p, LAGS), 0.5 * np.cos(LAGS), atol=1e-8)


def test_unmeasured_pair_reference_matches_modes():
    p = make_preset("entangled-pair-unmeasured", lags=LAGS)
    np.testing.assert_allclose(co.sm_reference(p, LAGS), co.sm_pair_unmeasured(0.5, 0.99, 1.0, LAGS), atol=1e-9)


def test_unmeasured_pair_decays_at_half_periods():
    vals = co.sm_pair_unmeasured(0.5, 0.99, 1.0, np.array([0.0, np.pi, 2 * np.pi]))
    assert vals[1] == pytest.approx(0.5 * 0.99 * np.exp(-np.pi), rel=0.05)
    assert abs(vals[2]) < abs(vals[1]) < vals[0]


def test_double_slit_reference():
    p = make_preset("double-slit", lags=LAGS[:4])
    a = 10 * np.sqrt(0.5)
    np.testing.assert_allclose(co.sm_reference(p, LAGS[:4]), co.sm_double_slit(a, 0.5, LAGS[:4]), atol=1e-8)


def test_mode_response_free_limit():
    # a free Gaussian of variance s2 has E[Y(t)|Y0] = Y0 (|z| e^{-arg z}) with z = 1 + i t / 2 s2
    z = 1 + 1j * 0.7 / (2 * 0.3)
    assert co.gaussian_mode_response(0.3, 0.0, 0.7) == pytest.approx(abs(z) * np.exp(-np.angle(z)))


@settings(max_examples=12, deadline=None)
@given(s2=st.floats(0.1, 3.0), t=st.floats(0.0, 7.0))
def test_mode_response_matches_drift_ode(s2, t):
    psi = wf.Wavefunction((wf.gaussian_branch([0.0], [[s2]]),), wf.Physics.uniform(1))
    m = co._mean_response(dy.LinearGuidance.from_wavefunction(psi), (), np.array([t]))
    assert m[0, 0, 0] == pytest.approx(co.gaussian_mode_response(s2, 1.0, t), rel=1e-6, abs=1e-9)


def test_ground_state_mode_response_is_exponential():
    t = np.linspace(0, 10, 21)
    np.testing.assert_allclose(co.gaussian_mode_response(0.5, 1.0, t), np.exp(-t), rtol=1e-12)


def test_qm_references():
    np.testing.assert_allclose(co.qm_oscillator_correlator(0.5, 1.0, [0.0, np.pi]), [0.5, -0.5], atol=1e-15)
    assert co.qm_pair_correlator(wf.make_correlated_pair(0.5, 0.99), 1.0, np.pi) == pytest.approx(-0.495)
    assert co.qm_pair_correlator(0.3, 2.0, np.pi / 2) == pytest.approx(-0.3)
    p = make_preset("double-slit")
    assert np.all(np.isnan(co.qm_reference(p, [0.0, 1.0])))


def test_commuting_times():
    assert co.commuting(1.0, [0.0, np.pi, 2 * np.pi, 1.0]).tolist() == [True, True, True, False]
    assert co.commuting(2.0, [np.pi / 2]).tolist() == [True]


def _report(est, se, sm, qm, collapse, allowance=0.0, lags=(0.0, np.pi)):
    return co.CorrelationReport("x", np.array(lags), np.array(est), np.array(se), np.array(sm),
                                np.array(qm, dtype=complex), co.commuting(1.0, lags), collapse, allowance, 10, "h")


def test_compare_unmeasured_judged_against_sm():
    rows = co.compare(_report([0.5, 0.02], [0.002, 0.002], [0.5, 0.0216], [0.5, -0.5], False))
    assert [r.verdict for r in rows] == ["PASS", "PASS"]
    assert [r.verdict_qm for r in rows] == ["PASS", "FAIL"]
    assert rows[1].z_qm == pytest.approx(260.0)
    assert co.all_pass(rows)


def test_compare_measured_judged_against_qm_with_allowance():
    rows = co.compare(_report([0.5, -0.485], [0.002, 0.002], [0.5, -0.5], [0.5, -0.5], True, 0.01))
    assert rows[1].verdict == "PASS"
    rows = co.compare(_report([0.5, -0.47], [0.002, 0.002], [0.5, -0.5], [0.5, -0.5], True, 0.01))
    assert rows[1].verdict == "FAIL"
    assert not co.all_pass(rows)


def test_compare_marks_non_commuting_measured_lags_na():
    rows = co.compare(_report([0.5, 0.3], [0.002, 0.002], [0.5, 0.27], [0.5, 0.27], True, lags=(0.0, 1.0)))
    assert rows[1].verdict == "NA" and rows[1].reference == "none"


def test_report_rejects_zero_stderr():
    with pytest.raises(ValueError):
        _report([0.5, 0.1], [0.0, 0.1], [0.5, 0.1], [0.5, 0.1], False)


def test_fit_decay_rate_recovers_rate(rng):
    t = np.array([0.0, 1.0, 2.0, np.pi])
    se = np.full(t.size, 1e-3)
    y = 0.5 * np.exp(-1.3 * t) + rng.normal(scale=1e-3, size=t.size)
    k, err = co.fit_decay_rate(t, y, se)
    assert abs(k - 1.3) < 5 * err
    k2, _ = co.fit_decay_rate(t, y, se, amplitude=0.5)
    assert k2 == pytest.approx(1.3, rel=0.05)


def test_mc_two_time_and_report():
    preset = make_preset("oscillator-unmeasured", lags=[0.0, 0.5])
    ens = run_experiment(preset, dy.SdeConfig(dt=1e-2, t_end=0.5, n_traj=4000, seed=1))
    est, se = co.mc_two_time(ens, 0.0, 0.0)
    x = ens.at(0.0, 0)
    assert est == pytest.approx(np.mean(x * x))
    assert se == pytest.approx(np.std(x * x, ddof=1) / np.sqrt(x.size))
    rep = co.correlation_report(ens, preset)
    assert rep.n_traj == 4000 and rep.lags.tolist() == [0.0, 0.5]
    assert co.config_hash(ens.config, preset) == rep.cfg_hash
    with pytest.raises(dy.OffGridError):
        co.mc_two_time(ens, 0.0, 0.25)


def test_collapse_width_error_is_zero_for_exact_paths():
    preset = make_preset("oscillator-measured-at-0", lags=[0.0, np.pi])
    ens = run_experiment(preset, dy.SdeConfig(dt=1e-2, t_end=np.pi, n_traj=200, seed=1))
    ens.positions[:, ens.time_index(np.pi)] = -ens.positions[:, ens.time_index(0.0)]
    d, r = co.collapse_width_error(ens, 1)
    assert d == 0.0 and r == 0.0


def test_config_hash_sensitivity():
    p = make_preset("oscillator-unmeasured")
    a = co.config_hash(dy.SdeConfig(seed=1), p)
    assert a == co.config_hash(dy.SdeConfig(seed=1, threads=4), p)
    assert a != co.config_hash(dy.SdeConfig(seed=2), p)

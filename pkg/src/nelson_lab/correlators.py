"""Two-time correlators: Monte Carlo estimates and analytic references.

References come in two families. Stochastic-mechanics (SM) values are
expectations of the simulated process itself; quantum-mechanical (QM) values
are Heisenberg-picture expectations, which are real and directly comparable
only at times where the position operators commute (multiples of the half
period).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import curve_fit

from .dynamics import Ensemble, LinearGuidance, SdeConfig
from .measurement import BranchSelectionEvent, ExperimentPreset, PositionMeasurement

Z_THRESHOLD = 3.0


# -- Monte Carlo -----------------------------------------------------------------


def mc_two_time(ens: Ensemble, t1, t2, coords=(0, 0)):
    """Sample mean of ``X_a(t1) X_b(t2)`` and its standard error.

    Both times must be recorded grid times; nothing is interpolated.
    """
    ens.raise_on_failure()
    a, b = coords
    prod = ens.at(t1, a) * ens.at(t2, b)
    n = prod.size
    if n < 2:
        raise ValueError("need at least two trajectories for a standard error")
    return float(prod.mean()), float(prod.std(ddof=1) / math.sqrt(n))


# -- quantum references ----------------------------------------------------------------


def qm_oscillator_correlator(sigma2, omega, t):
    """``<x(0) x(t)>`` in the oscillator ground state: ``sigma^2 exp(i omega t)``."""
    return sigma2 * np.exp(1j * omega * np.asarray(t, dtype=float))


def pair_cross_covariance(psi):
    """Initial ``<x_1 x_2>`` of a real single-branch two-coordinate state."""
    br = psi.branches[0]
    mean, cov = br.density_params()
    return float(cov[0, 1] + mean[0] * mean[1])


def qm_pair_correlator(state, omega, t):
    """``<x_1(0) x_2(t)> = C12 cos(omega t)`` for a real Gaussian pair state.

    ``state`` is the cross covariance ``C12`` or the pair wavefunction.
    """
    c12 = pair_cross_covariance(state) if hasattr(state, "branches") else float(state)
    return c12 * np.cos(omega * np.asarray(t, dtype=float))


def commuting(omega, t, tol=1e-9):
    """True where ``omega t`` is a multiple of pi (position operators commute)."""
    ratio = omega * np.asarray(t, dtype=float) / np.pi
    return np.abs(ratio - np.round(ratio)) <= tol * np.maximum(1.0, np.abs(ratio))


# -- stochastic-mechanics references ---------------------------------------------------


def sm_oscillator_unmeasured(sigma2, omega, t):
    """Ground-state OU process: ``sigma^2 exp(-omega t)``."""
    return sigma2 * np.exp(-omega * np.asarray(t, dtype=float))


def sm_oscillator_collapsed(sigma2, omega, t):
    """Collapse on the particle's own position at t=0: ``sigma^2 cos(omega t)``.

    The conditional mean of a real Gaussian collapsed at ``X0`` is
    ``X0 cos(omega t)`` for every width, so this holds for any ``w``.
    """
    return sigma2 * np.cos(omega * np.asarray(t, dtype=float))


def gaussian_mode_response(s2, omega, t, kappa=1.0):
    """``E[Y(t) | Y(0)] / Y(0)`` for a real centred Gaussian of variance ``s2``.

    With ``z = cos(omega t) + i kappa sin(omega t) / (2 s2 omega)`` (``z = 1 +
    i kappa t / 2 s2`` when free) the response is ``|z| exp(-arg z)`` with
    ``arg z`` continuous from 0.
    """
    t = np.asarray(t, dtype=float)
    lam = 1j * kappa / (2.0 * s2 * omega) if omega > 0 else None
    if omega > 0:
        theta = omega * t
        n = np.floor(theta / np.pi)
        rem = theta - n * np.pi
        z = np.cos(theta) + lam * np.sin(theta)
        arg = np.angle(np.cos(rem) + lam * np.sin(rem)) + n * np.pi
    else:
        z = 1.0 + 1j * kappa * t / (2.0 * s2)
        arg = np.angle(z)
    return np.abs(z) * np.exp(-arg)


def sm_pair_unmeasured(sigma2, r, omega, t, kappa=1.0):
    """Cross correlator of the unmeasured pair with covariance ``sigma2 [[1, r], [r, 1]]``.

    The normal modes ``(x1 +- x2)/sqrt 2`` have variances ``sigma2 (1 +- r)``
    and evolve independently.
    """
    sp, sm = sigma2 * (1 + r), sigma2 * (1 - r)
    return 0.5 * (sp * gaussian_mode_response(sp, omega, t, kappa)
                  - sm * gaussian_mode_response(sm, omega, t, kappa))


def sm_double_slit(half_separation, s2, t, kappa=1.0):
    """Free slit branches at ``+-a`` after branch selection: ``a^2 + s^2 Phi(t)``."""
    return half_separation**2 + s2 * gaussian_mode_response(s2, 0.0, t, kappa)


def _mean_response(guidance: LinearGuidance, events, times, rtol=1e-10, atol=1e-13):
    """Sensitivities of ``E[X(t) | X(0)]`` to the initial position.

    Returns ``M`` (K, d, d+1): ``E[X(t)|X0] = M[:, :, :d] X0 + M[:, :, d]``.
    Solved as a linear ODE through the guidance sequence, independently of the
    stochastic integrator. Measurement outcomes enter through their own
    conditional means.
    """
    d = guidance.physics.dim
    times = np.asarray(times, dtype=float)
    t0 = guidance.t0
    cols = d + 1
    m = np.zeros((d, cols))
    m[:, :d] = np.eye(d)
    p = np.zeros((0, cols))
    g = guidance
    out = np.full((times.size, d, cols), np.nan)
    out[times <= t0 + 1e-15] = m
    bounds = sorted({ev.time for ev in events} | {t0, float(times.max())})
    pending = sorted(events, key=lambda ev: ev.time)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        while pending and pending[0].time <= lo + 1e-15:
            ev = pending.pop(0)
            if isinstance(ev, PositionMeasurement):
                p = np.concatenate([p, m[list(ev.coords)]], axis=0)
            g = ev.update_guidance(g)
        k = g.n_params
        p = p[:k]

        def rhs(t, y, g=g, k=k):
            a, b, c = g.coefficients([t])
            mm = y[: d * cols].reshape(d, cols)
            pp = y[d * cols :].reshape(k, cols)
            dm = a[0] @ mm + b[0] @ pp
            dm[:, d] += c[0]
            return np.concatenate([dm.ravel(), np.zeros(k * cols)])

        y0 = np.concatenate([m.ravel(), p.ravel()])
        sol = solve_ivp(rhs, (lo, hi), y0, method="Radau", dense_output=True, rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(f"mean-response ODE failed: {sol.message}")
        sel = (times > lo + 1e-15) & (times <= hi + 1e-15)
        if sel.any():
            vals = sol.sol(np.clip(times[sel], lo, hi))
            out[sel] = vals[: d * cols].T.reshape(-1, d, cols)
        m = sol.y[: d * cols, -1].reshape(d, cols)
    return out


def sm_reference(preset: ExperimentPreset, lags):
    """SM value of ``E[X_a(0) X_b(t)]`` at each lag for any built-in preset.

    Single-branch presets use the mean-response ODE. Superpositions with a
    branch selection at the start are treated branch by branch, which is
    exact for non-overlapping branches.
    """
    psi = preset.psi
    a, b = preset.pair
    t = psi.time + np.asarray(lags, dtype=float)
    if len(psi) == 1:
        parts = [(1.0, psi, preset.events)]
    elif preset.events and isinstance(preset.events[0], BranchSelectionEvent) \
            and preset.events[0].time <= psi.time:
        from .wavefunction import Wavefunction

        rest = preset.events[1:]
        weights = np.array([br.log_norm() for br in psi.branches])
        weights = np.exp(weights - np.logaddexp.reduce(weights))
        parts = [
            (wj, Wavefunction((br,), psi.physics, psi.time).normalized(), rest)
            for wj, br in zip(weights, psi.branches)
        ]
    else:
        raise NotImplementedError("no SM reference for overlapping superpositions")
    total = np.zeros(t.size)
    for wj, part, events in parts:
        mean, cov = part.branches[0].density_params()
        second = cov + np.outer(mean, mean)
        resp = _mean_response(LinearGuidance.from_wavefunction(part), events, t)
        total += wj * (resp[:, b, : part.dim] @ second[:, a] + resp[:, b, part.dim] * mean[a])
    return total


def qm_reference(preset: ExperimentPreset, lags):
    """Complex QM correlator per lag, or NaN where the preset has none."""
    lags = np.asarray(lags, dtype=float)
    omega = preset.params.get("omega", 1.0)
    if preset.qm_kind == "oscillator":
        return qm_oscillator_correlator(preset.params["sigma2"], omega, lags)
    if preset.qm_kind == "pair":
        return qm_pair_correlator(preset.psi, omega, lags).astype(complex)
    return np.full(lags.size, np.nan + 1j * np.nan)


# -- reports -------------------------------------------------------------------------


def config_hash(cfg: SdeConfig, preset: ExperimentPreset | None = None):
    parts = [f"{k}={getattr(cfg, k)!r}" for k in ("dt", "t_end", "n_traj", "seed", "b_max", "nu",
                                                 "stiffness")]
    if preset is not None:
        parts.append(f"preset={preset.name}")
        parts.extend(f"{k}={v!r}" for k, v in sorted(preset.params.items()))
        parts.append(f"lags={preset.lags!r}")
    return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]


@dataclass
class CorrelationReport:
    """Correlator estimates with references, one entry per lag."""

    preset: str
    lags: np.ndarray
    mc_estimate: np.ndarray
    stderr: np.ndarray
    sm_analytic: np.ndarray
    qm_analytic: np.ndarray
    commuting: np.ndarray
    collapse: bool
    allowance: float
    n_traj: int
    cfg_hash: str

    def __post_init__(self):
        if np.any(~(self.stderr > 0)):
            raise ValueError("standard errors must be positive")


def correlation_report(ens: Ensemble, preset: ExperimentPreset, lags=None):
    lags = np.asarray(preset.lags if lags is None else lags, dtype=float)
    t0 = preset.psi.time
    est = np.empty(lags.size)
    err = np.empty(lags.size)
    for i, lag in enumerate(lags):
        est[i], err[i] = mc_two_time(ens, t0, t0 + lag, preset.pair)
    try:
        sm = sm_reference(preset, lags)
    except NotImplementedError:
        sm = np.full(lags.size, np.nan)
    omega = preset.params.get("omega", 1.0)
    return CorrelationReport(
        preset=preset.name,
        lags=lags,
        mc_estimate=est,
        stderr=err,
        sm_analytic=sm,
        qm_analytic=qm_reference(preset, lags),
        commuting=commuting(omega, lags),
        collapse=preset.collapse,
        allowance=preset.allowance,
        n_traj=ens.n_traj,
        cfg_hash=config_hash(ens.config, preset),
    )


@dataclass(frozen=True)
class ComparisonRow:
    t: float
    estimate: float
    stderr: float
    sm_reference: float
    qm_reference_re: float
    qm_reference_im: float
    z_sm: float
    z_qm: float
    verdict: str
    verdict_sm: str
    verdict_qm: str
    reference: str


def _verdict(diff, se, allowance):
    if not np.isfinite(diff):
        return "NA"
    return "PASS" if abs(diff) <= Z_THRESHOLD * se + allowance else "FAIL"


def compare(report: CorrelationReport):
    """Per-lag z-scores against both references and the applicable verdict.

    Measured (collapse) presets are judged against QM at commuting times,
    with the preset's collapse-width allowance; their other lags have no
    applicable reference ("NA"). Unmeasured presets are judged against SM.
    The QM verdict at commuting times is always reported alongside.
    """
    rows = []
    for i, t in enumerate(report.lags):
        est, se = report.mc_estimate[i], report.stderr[i]
        sm = report.sm_analytic[i]
        qm = report.qm_analytic[i]
        z_sm = (est - sm) / se if np.isfinite(sm) else np.nan
        qm_ok = np.isfinite(qm.real) and report.commuting[i]
        z_qm = (est - qm.real) / se if np.isfinite(qm.real) else np.nan
        v_sm = _verdict(est - sm, se, 0.0)
        v_qm = _verdict(est - qm.real, se, report.allowance) if qm_ok else "NA"
        if report.collapse:
            verdict, ref = v_qm, ("qm" if qm_ok else "none")
        else:
            verdict, ref = v_sm, ("sm" if np.isfinite(sm) else "none")
        rows.append(ComparisonRow(float(t), float(est), float(se), float(sm), float(qm.real),
                                  float(qm.imag), float(z_sm), float(z_qm), verdict, v_sm, v_qm, ref))
    return rows


def all_pass(rows):
    return all(r.verdict in ("PASS", "NA") for r in rows)


def fit_decay_rate(t, y, stderr, amplitude=None):
    """Weighted least-squares rate ``k`` of ``y ~ C exp(-k t)``; returns ``(k, k_err)``.

    ``amplitude`` fixes ``C``; otherwise it is fitted too.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    stderr = np.asarray(stderr, dtype=float)
    if amplitude is None:
        popt, pcov = curve_fit(lambda s, c, k: c * np.exp(-k * s), t, y, p0=(y[0], 1.0),
                               sigma=stderr, absolute_sigma=True)
        return float(popt[1]), float(np.sqrt(pcov[1, 1]))
    popt, pcov = curve_fit(lambda s, k: amplitude * np.exp(-k * s), t, y, p0=(1.0,),
                           sigma=stderr, absolute_sigma=True)
    return float(popt[0]), float(np.sqrt(pcov[0, 0]))


def collapse_width_error(ens: Ensemble, n, omega=1.0, coord=0):
    """Collapse-width part of the measured correlator at ``t = n pi / omega``.

    In the delta limit ``X(n pi) = (-1)^n X(0)`` exactly, so on the same
    samples the correlator would be ``(-1)^n mean(X0^2)``. Returns the signed
    deviation ``D = mean(X0 xi)`` with ``xi = X(n pi) - (-1)^n X0``, and its
    root-mean-square scale ``sqrt(mean((X0 xi)^2) / n_traj)``, which is
    proportional to the collapse width.
    """
    t0 = ens.times[0]
    x0 = ens.at(t0, coord)
    xi = ens.at(t0 + n * np.pi / omega, coord) - (-1) ** n * x0
    prod = x0 * xi
    return float(prod.mean()), float(np.sqrt(np.mean(prod**2) / prod.size))

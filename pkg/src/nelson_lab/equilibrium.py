"""Checks of the hydrodynamic identities behind quantum equilibrium.

Residuals use exact spatial derivatives from the branch parameters and a
central difference in time. ``rho = |psi|^2`` throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import ndtr

from .dynamics import Ensemble
from .wavefunction import (
    Wavefunction,
    at_time,
    density_time_derivative,
    divergence_terms,
    log_evaluate,
    velocity,
)

GRID_POINTS = 401
GRID_HALF_WIDTH = 5.0


@dataclass
class DensityDiagnostic:
    """KS distance and binned comparison of an ensemble marginal with |psi|^2."""

    time: float
    ks_statistic: float
    p_value: float
    n: int
    edges: np.ndarray
    counts: np.ndarray
    reference_mass: np.ndarray

    def ks_bound(self, factor=4.0):
        return factor / np.sqrt(self.n)


def _reference_scale(psi: Wavefunction, coord):
    var = psi.physics.ground_variance()[coord]
    if np.isfinite(var):
        return float(np.sqrt(var))
    _, cov = psi.branches[0].density_params()
    return float(np.sqrt(cov[coord, coord]))


def marginal_cdf(psi: Wavefunction, coord=0, n_grid=8001):
    """CDF of the ``coord`` marginal of |psi|^2 as a callable."""
    if len(psi) == 1:
        mean, cov = psi.branches[0].density_params()
        mu, sd = mean[coord], np.sqrt(cov[coord, coord])
        return lambda x: ndtr((np.asarray(x) - mu) / sd)
    if psi.dim != 1:
        raise NotImplementedError("superposition marginals are implemented for one coordinate")
    means, sds = [], []
    for br in psi.branches:
        m, c = br.density_params()
        means.append(m[0])
        sds.append(np.sqrt(c[0, 0]))
    lo = min(m - 12 * s for m, s in zip(means, sds))
    hi = max(m + 12 * s for m, s in zip(means, sds))
    x = np.linspace(lo, hi, n_grid)
    rho = np.exp(2.0 * log_evaluate(psi, x).real)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(x))])
    cdf /= cdf[-1]
    return lambda v: np.interp(v, x, cdf, left=0.0, right=1.0)


def conditional_mixture_cdf(ens: Ensemble, t, coord=0, n_grid=8001):
    """CDF of the average of the trajectories' conditional |psi_i(t)|^2 marginals."""
    g = ens.guidance_at(t)
    if g.kind == "linear":
        q, h, l0 = g.parameters([t])
        cov = np.linalg.inv(-4.0 * q[0].real)
        k = g.n_params
        lin = ens.params[:, :k] @ h[0].T + l0[0]
        means = (2.0 * lin.real) @ cov.T
        mu = means[:, coord]
        sd = float(np.sqrt(cov[coord, coord]))
        # bin the conditional means finely and convolve with the common width
        width = sd / 20.0
        lo, hi = mu.min() - 10 * sd, mu.max() + 10 * sd
        nb = int(np.ceil((hi - lo) / width)) + 1
        centres = lo + width * (np.arange(nb) + 0.5)
        hist = np.bincount(np.clip(((mu - lo) / width).astype(int), 0, nb - 1), minlength=nb)
        weights = hist / hist.sum()
        x = np.linspace(lo, hi, n_grid)
        keep = weights > 0
        cdf = ndtr((x[:, None] - centres[None, keep]) / sd) @ weights[keep]
        return lambda v: np.interp(v, x, cdf, left=0.0, right=1.0)
    patterns, counts = np.unique(ens.mask, axis=0, return_counts=True)
    cdfs = [(c / counts.sum(), marginal_cdf(g.wavefunction(p, t), coord, n_grid))
            for p, c in zip(patterns, counts)]
    return lambda v: sum(w * f(v) for w, f in cdfs)


def density_check(ens: Ensemble, psi: Wavefunction | None, t, coord=0, n_bins=40):
    """Compare the ensemble marginal at ``t`` with |psi(t)|^2.

    With ``psi=None`` the reference is the mixture of the trajectories'
    conditional wavefunctions (the right reference after measurements).
    """
    x = ens.at(t, coord)
    if psi is None:
        cdf = conditional_mixture_cdf(ens, t, coord)
    else:
        cdf = marginal_cdf(at_time(psi, t), coord)
    res = stats.kstest(x, cdf)
    edges = np.linspace(x.min(), x.max(), n_bins + 1)
    counts, _ = np.histogram(x, edges)
    outer = edges.copy()
    outer[0], outer[-1] = -np.inf, np.inf
    mass = np.diff(np.array([cdf(e) if np.isfinite(e) else float(e > 0) for e in outer], dtype=float))
    return DensityDiagnostic(float(t), float(res.statistic), float(res.pvalue), x.size, edges,
                             counts, mass)


# -- residuals ------------------------------------------------------------------------


def residual_grid(psi: Wavefunction, n=GRID_POINTS, half_width=GRID_HALF_WIDTH):
    """Tensor grid of ``n`` points per coordinate over ``[-5 sigma, 5 sigma]``."""
    axes = [np.linspace(-half_width * s, half_width * s, n)
            for s in (_reference_scale(psi, c) for c in range(psi.dim))]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _finish(value, signed):
    return value if signed else np.abs(value)


def continuity_residual(psi: Wavefunction, x, t=None, dt_res=None, signed=False, on_node="raise"):
    """``d rho/dt + div(v rho)``; absolute value unless ``signed``."""
    t = psi.time if t is None else float(t)
    terms = divergence_terms(psi, x, t, on_node=on_node)
    return _finish(density_time_derivative(psi, x, t, dt_res) + terms["div_v"], signed)


def fokker_planck_residual(psi: Wavefunction, x, t=None, direction="forward", dt_res=None,
                           signed=False, on_node="raise"):
    """Forward ``d rho/dt + div(b rho) - nu lap rho`` or backward ``... div(b* rho) + nu lap rho``."""
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    t = psi.time if t is None else float(t)
    terms = divergence_terms(psi, x, t, on_node=on_node)
    drho = density_time_derivative(psi, x, t, dt_res)
    if direction == "forward":
        value = drho + terms["div_b"] - terms["nu_lap"]
    else:
        value = drho + terms["div_b_star"] + terms["nu_lap"]
    return _finish(value, signed)


def density_gradient(psi: Wavefunction, x):
    """``grad rho / rho`` from ``2 Re(conj(psi) grad psi) / |psi|^2``, summed branch by branch."""
    x = np.asarray(x, dtype=float)
    if psi.dim == 1 and x.shape[-1:] != (1,):
        x = x[..., None]
    logs = np.stack([br.log_amplitude(x) for br in psi.branches], axis=-1)
    top = logs.real.max(axis=-1, keepdims=True)
    amps = np.exp(logs - top)
    grads = np.stack([br.grad_log(x) for br in psi.branches], axis=-2)
    value = amps.sum(axis=-1)
    grad = np.einsum("...j,...ja->...a", amps, grads)
    return 2.0 * (np.conj(value)[..., None] * grad).real / (np.abs(value) ** 2)[..., None]


def osmotic_residual(psi: Wavefunction, x, on_node="raise"):
    """``u - (hbar/2m) grad rho / rho`` pointwise (should vanish identically)."""
    u = velocity(psi, x, "u", on_node=on_node)
    return u - psi.physics.nu * density_gradient(psi, x)


def velocity_identity_residual(psi: Wavefunction, x, on_node="raise"):
    """Largest deviation from ``b = v + u`` and ``b* = v - u`` at each point."""
    b = velocity(psi, x, "b", on_node=on_node)
    bs = velocity(psi, x, "b*", on_node=on_node)
    v = velocity(psi, x, "v", on_node=on_node)
    u = velocity(psi, x, "u", on_node=on_node)
    return np.maximum(np.abs(b - (v + u)).max(axis=-1), np.abs(bs - (v - u)).max(axis=-1))


def convergence_order(residual_fn, steps):
    """Observed order of ``max |residual(h)|`` over successive step sizes."""
    steps = np.asarray(steps, dtype=float)
    errs = np.array([np.max(np.abs(residual_fn(h))) for h in steps])
    orders = np.log(errs[:-1] / errs[1:]) / np.log(steps[:-1] / steps[1:])
    return errs, orders

"""Fast invariant suite behind ``nelson-lab check``.

Each check returns ``(name, passed, detail)``. The tolerances are those the
test suite uses; the density check runs a small ensemble so the whole suite
finishes in seconds.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .dynamics import (
    LinearGuidance,
    SdeConfig,
    equilibrium_ensemble,
    make_time_grid,
    quadrature_collapsed_path,
    sample_initial,
    simulate,
    wiener_increments,
)
from .equilibrium import (
    continuity_residual,
    convergence_order,
    density_check,
    fokker_planck_residual,
    osmotic_residual,
    residual_grid,
    velocity_identity_residual,
)
from .wavefunction import (
    density,
    evaluate,
    hjm_residual,
    make_collapsed_state,
    make_correlated_pair,
    make_double_slit_state,
    make_ground_state,
    propagate,
)

MACHINE_TOL = 1e-12
ZERO_TOL = 1e-8


def _check(name, ok, detail):
    return name, bool(ok), detail


def check_ground_state():
    psi = make_ground_state()
    value = evaluate(psi, [0.0])
    err = abs(value - np.pi ** -0.25)
    return _check("ground-state amplitude", err < MACHINE_TOL, f"|psi(0) - pi^-1/4| = {err:.2e}")


def check_mirror():
    psi = make_collapsed_state([1.0], 0.2)
    x = np.linspace(-3, 3, 61)
    moved = density(propagate(psi, np.pi), x)
    want = density(psi, -x)
    err = np.max(np.abs(moved - want)) / np.max(want)
    return _check("half-period mirror", err < 1e-10, f"max rel |rho(x, pi) - rho(-x, 0)| = {err:.2e}")


def check_norm():
    psi = make_double_slit_state(3.0, 1.0)
    errs = [abs(propagate(psi, t).norm() - 1.0) for t in (0.5, 1.7, 4.0)]
    return _check("norm conservation", max(errs) < 1e-10, f"max |norm - 1| = {max(errs):.2e}")


def check_stationary_residuals():
    psi = make_ground_state()
    x = residual_grid(psi)
    worst = max(hjm_residual(psi, x).max(), continuity_residual(psi, x).max(),
                fokker_planck_residual(psi, x).max(),
                fokker_planck_residual(psi, x, direction="backward").max())
    return _check("ground-state residuals", worst < ZERO_TOL, f"max residual = {worst:.2e}")


def check_residual_orders():
    psi = make_collapsed_state([1.0], 0.1)
    x = np.linspace(-2, 2, 41)[:, None]
    steps = [2e-3, 1e-3, 5e-4]
    _, hjm = convergence_order(lambda h: hjm_residual(psi, x, t=0.4, dt_res=h), steps)
    _, cont = convergence_order(lambda h: continuity_residual(psi, x, t=0.4, dt_res=h), steps)
    orders = np.concatenate([hjm, cont])
    ok = np.all((orders > 1.8) & (orders < 2.2))
    return _check("residual convergence order", ok, f"orders {np.round(orders, 3).tolist()}")


def check_identities():
    rng = np.random.default_rng(7)
    worst = 0.0
    states = [(make_ground_state(), 1), (propagate(make_double_slit_state(3.0, 1.0), 0.7), 1),
              (propagate(make_correlated_pair(), 0.3), 2)]
    for psi, d in states:
        x = rng.normal(size=(100, d))
        worst = max(worst, np.abs(osmotic_residual(psi, x, on_node="ignore")).max(),
                    velocity_identity_residual(psi, x, on_node="ignore").max())
        grid = residual_grid(psi, n=401 if d == 1 else 41)
        fw = fokker_planck_residual(psi, grid, signed=True, on_node="ignore")
        bw = fokker_planck_residual(psi, grid, direction="backward", signed=True, on_node="ignore")
        co = continuity_residual(psi, grid, signed=True, on_node="ignore")
        worst = max(worst, np.abs(fw + bw - 2.0 * co).max())
    return _check("velocity, osmotic and Fokker-Planck identities", worst < MACHINE_TOL,
                  f"max deviation = {worst:.2e}")


def check_collapsed_quadrature():
    rng = np.random.default_rng(3)
    times = np.linspace(0.1, 2 * np.pi, 200)
    x_meas = rng.normal(size=50)
    dw = rng.normal(scale=0.1, size=(50, times.size - 1))
    ok = True
    for n, t_end in ((1, np.pi), (2, 2 * np.pi)):
        grid = times[times <= t_end + 1e-12]
        grid[-1] = t_end
        res = quadrature_collapsed_path(x_meas, x_meas, dw[:, : grid.size - 1], 1.0, grid)
        ok &= np.array_equal(res.position, (-1.0) ** n * x_meas)
    return _check("collapsed quadrature at half periods", ok, "exact (-1)^n X0" if ok else "mismatch")


def check_density(n_traj=20_000, seed=0):
    psi = make_ground_state()
    cfg = SdeConfig(dt=1e-3, t_end=2.0, n_traj=n_traj, seed=seed)
    ens = equilibrium_ensemble(psi, cfg, record_times=[0.0, 1.0, 2.0])
    diags = [density_check(ens, psi, t) for t in (0.0, 1.0, 2.0)]
    worst = max(d.ks_statistic for d in diags)
    bound = diags[0].ks_bound()
    return _check("equilibrium density (KS)", worst < bound, f"max KS = {worst:.4f} < {bound:.4f}")


def check_backends(seed=0):
    names = kernels.available_backends()
    if len(names) < 2:
        return _check("kernel backends agree", True, "only the pure backend is built")
    psi = make_ground_state()
    cfg = SdeConfig(dt=1e-2, t_end=1.0, n_traj=256, seed=seed)
    grid = make_time_grid(0.0, 1.0, cfg.dt)
    x0 = sample_initial(psi, cfg.n_traj, seed)
    g = LinearGuidance.from_wavefunction(psi)
    out = [simulate(g, x0, cfg, grid, [1.0], backend=b).positions for b in names]
    err = np.max(np.abs(out[0] - out[1]))
    dw = wiener_increments(seed, [0, 1], grid)
    return _check("kernel backends agree", err < 1e-12 and np.all(np.isfinite(dw)),
                  f"max |compiled - pure| = {err:.1e}")


def run_invariant_suite(n_traj=20_000, seed=0):
    return [
        check_ground_state(),
        check_mirror(),
        check_norm(),
        check_stationary_residuals(),
        check_residual_orders(),
        check_identities(),
        check_collapsed_quadrature(),
        check_density(n_traj, seed),
        check_backends(seed),
    ]

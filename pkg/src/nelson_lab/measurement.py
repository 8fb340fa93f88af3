"""Effective collapse: position measurements, branch selection and experiment presets.

A measurement outcome is the measured trajectory's own position. After it,
the trajectory is guided by its private conditional wavefunction:

* full measurement - a real Gaussian of width ``w`` centred on the outcome;
* partial measurement - the current wavefunction multiplied by a width-``w``
  Gaussian in the measured coordinates, then renormalized.

Branch selection discards superposition components that carry (almost) no
density at the particle's position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dynamics import (
    Ensemble,
    LinearGuidance,
    MixtureGuidance,
    SdeConfig,
    WavefunctionDrift,
    integrate,
    make_time_grid,
    refine_grid,
    sample_initial,
    simulate,
)
from .wavefunction import (
    GaussianBranch,
    Physics,
    Wavefunction,
    WavefunctionError,
    at_time,
    make_collapsed_state,
    make_correlated_pair,
    make_double_slit_state,
    make_ground_state,
)

DEFAULT_EPSILON = 1e-8
DEFAULT_WIDTH_FACTOR = 0.05


@dataclass(frozen=True, eq=False)
class MeasurementEvent:
    t_m: float
    coordinates: tuple
    outcome: np.ndarray
    w: float
    replaced_psi: Wavefunction


def _coords(coords, d):
    if coords is None:
        return tuple(range(d))
    coords = tuple(sorted(set(int(c) for c in np.atleast_1d(coords))))
    if not coords or coords[0] < 0 or coords[-1] >= d:
        raise ValueError(f"coordinates must be a non-empty subset of 0..{d - 1}")
    return coords


def _position(traj, t_m):
    if hasattr(traj, "at"):
        return np.asarray(traj.at(t_m), dtype=float)
    return np.atleast_1d(np.asarray(traj, dtype=float))


def localize(psi: Wavefunction, coords, outcome, w):
    """Multiply every branch by ``exp(-(x_c - outcome)^2 / 4w^2)`` on ``coords`` and renormalize."""
    d = psi.dim
    coords = _coords(coords, d)
    outcome = np.broadcast_to(np.asarray(outcome, dtype=float), (len(coords),))
    sel = np.zeros(d)
    sel[list(coords)] = 1.0
    centre = np.zeros(d)
    centre[list(coords)] = outcome
    k = 1.0 / (4.0 * w * w)
    branches = []
    for br in psi.branches:
        try:
            branches.append(
                GaussianBranch(
                    quad=br.quad - k * np.diag(sel),
                    lin=br.lin + 2.0 * k * centre,
                    const=br.const - k * centre @ centre,
                    log_weight=br.log_weight,
                    label=br.label,
                )
            )
        except WavefunctionError as exc:  # defensive: cannot happen for valid branches
            raise WavefunctionError("localized branch is not normalizable") from exc
    out = Wavefunction(tuple(branches), psi.physics, psi.time)
    log_norm = out.log_norm()
    if not np.isfinite(log_norm):
        raise WavefunctionError("localized wavefunction has zero norm")
    return out.normalized()


def apply_position_measurement(psi: Wavefunction, traj, t_m, coords=None, w=None):
    """Collapse ``psi`` on the trajectory's position at ``t_m``.

    ``traj`` is a :class:`Trajectory` or a position vector. ``coords=None``
    measures every coordinate. ``w`` defaults to 0.05 of the ground-state
    width of the first measured coordinate. Returns ``(event, replaced_psi)``.
    """
    d = psi.dim
    coords = _coords(coords, d)
    if w is None:
        w = DEFAULT_WIDTH_FACTOR * float(np.sqrt(psi.physics.ground_variance()[coords[0]]))
    if not w > 0 or not np.isfinite(w):
        raise WavefunctionError("collapse width must be positive and finite")
    x = _position(traj, t_m)
    if x.shape != (d,):
        raise ValueError("trajectory position has the wrong dimension")
    outcome = x[list(coords)].copy()
    if len(coords) == d:
        new = make_collapsed_state(x, w, psi.physics, time=t_m)
    else:
        new = localize(at_time(psi, t_m), coords, outcome, w)
    return MeasurementEvent(float(t_m), coords, outcome, float(w), new), new


def point_collapse_drift(x, t, outcome, omega=1.0):
    """Forward drift ``omega (x cot(omega t) - X0 / sin(omega t))`` after an ideal point collapse.

    The limit ``w -> 0`` of the drift of a width-``w`` collapse at ``X0``
    made at time 0, for an oscillator of frequency ``omega``. Undefined at
    multiples of the half period.
    """
    s = np.sin(omega * np.asarray(t, dtype=float))
    if np.any(np.abs(s) < 1e-12):
        raise WavefunctionError("point-collapse drift is singular at multiples of the half period")
    return omega * (np.asarray(x, dtype=float) * np.cos(omega * t) - outcome) / s


def branch_fractions(psi: Wavefunction, x):
    """Share of ``sum_j |psi_j(x)|^2`` carried by each branch."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    logs = np.array([2.0 * br.log_amplitude(x).real for br in psi.branches])
    return np.exp(logs - np.logaddexp.reduce(logs))


class BranchSelection(NamedTuple):
    wavefunction: Wavefunction
    index: int | None
    label: str | None
    overlapping: bool
    fractions: np.ndarray


def select_branch(psi: Wavefunction, x, eps=DEFAULT_EPSILON):
    """Keep only the branch carrying at least ``1 - eps`` of the density at ``x``.

    When no branch dominates, ``psi`` is returned unchanged with
    ``overlapping`` set.
    """
    fr = branch_fractions(psi, x)
    j = int(np.argmax(fr))
    if len(psi.branches) == 1 or fr[j] < 1.0 - eps:
        return BranchSelection(psi, None, None, len(psi.branches) > 1, fr)
    br = psi.branches[j]
    kept = Wavefunction((br,), psi.physics, psi.time).normalized()
    return BranchSelection(kept, j, br.label, False, fr)


def select_label(psi: Wavefunction, label):
    """Keep the branches tagged ``label`` (e.g. an abstract apparatus reading)."""
    kept = tuple(br for br in psi.branches if br.label == label)
    if not kept:
        raise ValueError(f"no branch labelled {label!r}")
    return Wavefunction(kept, psi.physics, psi.time).normalized()


# -- events for the ensemble engine -------------------------------------------------


@dataclass(frozen=True)
class PositionMeasurement:
    """Scheduled measurement of ``coords`` with collapse width ``w``."""

    time: float
    coords: tuple
    w: float

    def update_guidance(self, guidance):
        if guidance.kind != "linear":
            raise NotImplementedError("position measurements need single-branch guidance")
        return guidance.measured(self.time, self.coords, self.w)

    def update_state(self, old, new, x, params, mask):
        return np.concatenate([params, x[:, list(self.coords)]], axis=1), mask

    def apply(self, psi, x):
        return apply_position_measurement(psi, x, self.time, self.coords, self.w)

    def materialize(self, ens: Ensemble, i, old, new):
        k0 = old.n_params
        outcome = ens.params[i, k0 : k0 + len(self.coords)].copy()
        psi = new.wavefunction(ens.params[i, : new.n_params], self.time)
        return MeasurementEvent(self.time, tuple(self.coords), outcome, self.w, psi)


@dataclass(frozen=True)
class SelectionRecord:
    t: float
    index: int | None
    label: str | None
    overlapping: bool


@dataclass(frozen=True)
class BranchSelectionEvent:
    """Scheduled effective collapse onto the branch at each trajectory's position."""

    time: float
    eps: float = DEFAULT_EPSILON

    def update_guidance(self, guidance):
        return guidance

    def update_state(self, old, new, x, params, mask):
        if old.kind != "mixture":
            return params, mask
        q, lin, const, _ = old.arrays([self.time])
        logs = (
            np.einsum("na,jab,nb->nj", x, q[0], x) + x @ lin[0].T + const[0]
        ).real * 2.0
        logs = np.where(mask, logs, -np.inf)
        with np.errstate(invalid="ignore"):
            frac = np.exp(logs - np.logaddexp.reduce(logs, axis=1, keepdims=True))
        best = np.argmax(frac, axis=1)
        chosen = frac[np.arange(x.shape[0]), best] >= 1.0 - self.eps
        new_mask = mask.copy()
        new_mask[chosen] = False
        new_mask[chosen, best[chosen]] = True
        return params, new_mask

    def apply(self, psi, x):
        sel = select_branch(psi, x, self.eps)
        return SelectionRecord(self.time, sel.index, sel.label, sel.overlapping), sel.wavefunction

    def materialize(self, ens: Ensemble, i, old, new):
        if ens.mask is None:
            return SelectionRecord(self.time, None, None, False)
        row = ens.mask[i]
        if row.sum() == 1:
            j = int(np.flatnonzero(row)[0])
            return SelectionRecord(self.time, j, old.psi.branches[j].label, False)
        return SelectionRecord(self.time, None, None, True)


# -- presets --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExperimentPreset:
    """Initial state, scheduled events and correlation lags of a scenario.

    ``pair`` names the coordinates ``(a, b)`` of the correlator
    ``E[X_a(0) X_b(t)]``. ``qm_kind`` selects the quantum reference
    ("oscillator", "pair" or None) and ``collapse`` tells whether the
    quantum reference applies (measured runs at commuting times).
    """

    name: str
    psi: Wavefunction
    events: tuple
    lags: tuple
    pair: tuple = (0, 0)
    qm_kind: str | None = None
    collapse: bool = False
    allowance: float = 0.0
    description: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        times = [ev.time for ev in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("measurement times must be strictly increasing")
        if any(t < self.psi.time for t in times):
            raise ValueError("measurement before the initial time")
        if not self.lags:
            raise ValueError("a preset needs at least one lag")

    @property
    def t_end(self):
        return max(max(self.lags), max((ev.time for ev in self.events), default=0.0))

    def with_lags(self, lags):
        return ExperimentPreset(
            self.name, self.psi, self.events, tuple(float(t) for t in lags), self.pair,
            self.qm_kind, self.collapse, self.allowance, self.description, self.params,
        )


PRESET_NAMES = (
    "oscillator-unmeasured",
    "oscillator-measured-at-0",
    "double-slit",
    "entangled-pair-unmeasured",
    "entangled-pair-measured",
)

_DESCRIPTIONS = {
    "oscillator-unmeasured": "ground-state oscillator, no measurement; correlator decays",
    "oscillator-measured-at-0": "ground-state oscillator collapsed on its own position at t=0",
    "double-slit": "free two-slit superposition with branch selection at t=0",
    "entangled-pair-unmeasured": "two correlated oscillators, no measurement",
    "entangled-pair-measured": "two correlated oscillators, coordinate 1 measured at t=0",
}


def make_preset(name, mass=1.0, omega=1.0, hbar=1.0, collapse_width=None, r=0.99, lags=None):
    """Build a named preset. ``collapse_width`` defaults to 0.05 sigma."""
    if name not in PRESET_NAMES:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    if not (mass > 0 and omega > 0 and hbar > 0):
        raise ValueError("mass, omega and hbar must be positive")
    sigma2 = hbar / (2.0 * mass * omega)
    sigma = np.sqrt(sigma2)
    w = DEFAULT_WIDTH_FACTOR * sigma if collapse_width is None else float(collapse_width)
    if not w > 0:
        raise ValueError("collapse width must be positive")
    half = np.pi / omega
    params = {"sigma2": sigma2, "w": w, "omega": omega, "mass": mass, "hbar": hbar}
    if name == "oscillator-unmeasured":
        psi = make_ground_state(mass, omega, hbar)
        default = (0.0, 0.5 / omega, 1.0 / omega, 2.0 / omega, half)
        preset = ExperimentPreset(name, psi, (), default, (0, 0), "oscillator", False, 0.0)
    elif name == "oscillator-measured-at-0":
        psi = make_ground_state(mass, omega, hbar)
        events = (PositionMeasurement(0.0, (0,), w),)
        default = (0.0, half, 2 * half)
        preset = ExperimentPreset(name, psi, events, default, (0, 0), "oscillator", True, 0.01)
    elif name == "double-slit":
        physics = Physics(np.array([mass]), np.array([0.0]), hbar)
        psi = make_double_slit_state(20.0 * sigma, sigma, physics)
        events = (BranchSelectionEvent(0.0),)
        default = (0.0, 0.5 / omega, 1.0 / omega, 2.0 / omega)
        params.update(separation=20.0 * sigma, slit_width=sigma)
        preset = ExperimentPreset(name, psi, events, default, (0, 0), None, False, 0.0)
    else:
        if not -1 < r < 1:
            raise ValueError("correlation must lie strictly between -1 and 1")
        physics = Physics.uniform(2, mass, omega, hbar)
        psi = make_correlated_pair(sigma2, r, physics)
        default = (0.0, 1.0 / omega, 2.0 / omega, half, 2 * half)
        params.update(r=r, c12=r * sigma2)
        if name == "entangled-pair-unmeasured":
            preset = ExperimentPreset(name, psi, (), default, (0, 1), "pair", False, 0.0)
        else:
            events = (PositionMeasurement(0.0, (0,), w),)
            preset = ExperimentPreset(name, psi, events, default, (0, 1), "pair", True, 0.02)
    preset = ExperimentPreset(
        preset.name, preset.psi, preset.events, preset.lags, preset.pair, preset.qm_kind,
        preset.collapse, preset.allowance, _DESCRIPTIONS[name], params,
    )
    if lags is not None:
        preset = preset.with_lags(lags)
    if any(t < 0 for t in preset.lags):
        raise ValueError("lags must be non-negative")
    return preset


def _initial_guidance(psi):
    return LinearGuidance.from_wavefunction(psi) if len(psi) == 1 else MixtureGuidance(psi)


def experiment_grid(preset, cfg: SdeConfig):
    t0 = preset.psi.time
    if cfg.t_end < preset.t_end - 1e-12:
        raise ValueError(f"t_end={cfg.t_end} is shorter than the largest lag {preset.t_end}")
    breaks = [t0 + t for t in preset.lags] + [ev.time for ev in preset.events]
    grid = make_time_grid(t0, t0 + cfg.t_end, cfg.dt, breaks)
    if cfg.stiffness is not None:
        grid = refine_grid(grid, _initial_guidance(preset.psi), preset.events, cfg.stiffness)
    return grid


def record_times(preset, extra=()):
    t0 = preset.psi.time
    return sorted({t0, *(t0 + t for t in preset.lags), *(ev.time for ev in preset.events), *extra})


def run_experiment(preset: ExperimentPreset, cfg: SdeConfig, extra_times=(), backend=None) -> Ensemble:
    """Sample the initial equilibrium ensemble and integrate it through the schedule.

    Every trajectory collapses on its own position at each measurement and is
    guided by its conditional wavefunction afterwards. Positions are recorded
    at the initial time, the lags, the event times and ``extra_times``.
    """
    grid = experiment_grid(preset, cfg)
    x0 = sample_initial(preset.psi, cfg.n_traj, cfg.seed)
    return simulate(
        _initial_guidance(preset.psi), x0, cfg, grid, record_times(preset, extra_times),
        events=preset.events, name=preset.name, backend=backend,
    )


def run_reference(preset: ExperimentPreset, cfg: SdeConfig, traj_ids):
    """Trajectory-by-trajectory reference for :func:`run_experiment`.

    Uses the explicit wavefunction operations at every step instead of
    precomputed drift coefficients; positions come out at the same recorded
    times, with the same random streams.
    """
    grid = experiment_grid(preset, cfg)
    rec = record_times(preset)
    traj_ids = np.atleast_1d(np.asarray(traj_ids, dtype=np.uint64))
    x0 = sample_initial(preset.psi, cfg.n_traj, cfg.seed, traj_ids=traj_ids)
    event_at = {}
    for ev in preset.events:
        j = int(np.argmin(np.abs(grid - ev.time)))
        event_at.setdefault(j, []).append(ev)
    cuts = sorted(set(event_at) | {0, grid.size - 1})
    out = []
    for n, tid in enumerate(traj_ids):
        psi = preset.psi
        x = x0[n]
        times = [grid[0]]
        path = [x]
        events = []
        for j0, j1 in zip(cuts[:-1], cuts[1:]):
            for ev in event_at.get(j0, []):
                record, psi = ev.apply(psi, x)
                events.append(record)
            tr = integrate(WavefunctionDrift(psi, cfg.b_max), x, cfg, int(tid), times=grid[j0 : j1 + 1],
                           step0=j0, physics=psi.physics)
            times.extend(tr.times[1:])
            path.extend(tr.positions[1:])
            x = tr.positions[-1]
        times = np.asarray(times)
        path = np.asarray(path)
        idx = [int(np.argmin(np.abs(times - t))) for t in rec]
        out.append((path[idx], events))
    return np.asarray(rec), np.stack([p for p, _ in out]), [e for _, e in out]

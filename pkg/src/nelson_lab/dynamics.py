"""Euler-Maruyama integration of the forward diffusion and its exact oracles.

The forward process is ``dX = b(X, t) dt + dW`` with ``E[dW dW^T] = 2 nu dt``
per coordinate. Two execution paths share one random stream:

* :func:`integrate` walks a single trajectory in Python with any drift
  callable; it is the readable reference.
* :func:`simulate` runs whole ensembles through the compiled kernels. The
  drift comes from a *guidance* object: :class:`LinearGuidance` for single
  Gaussian branches (drift affine in position and in per-trajectory
  measurement outcomes) and :class:`MixtureGuidance` for superpositions.

Wiener increments of trajectory ``traj_id`` at global step ``j`` are drawn from
Philox4x64 with key ``(seed, traj_id)``, so results do not depend on how
trajectories are split across chunks or threads.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .wavefunction import (
    NODE_FLOOR,
    GaussianBranch,
    Physics,
    VelocityKind,
    Wavefunction,
    WavefunctionError,
    at_time,
    clamped_drift,
    evolve_branch_arrays,
    propagate_parameters,
    velocity,
)

log = logging.getLogger(__name__)

_TIME_TOL = 1e-9


class ConfigurationError(ValueError):
    pass


class TrajectoryAborted(RuntimeError):
    """A trajectory produced a non-finite position."""

    def __init__(self, traj_id, step, time=None):
        where = f" (t={time:.6g})" if time is not None else ""
        super().__init__(f"trajectory {traj_id} produced a non-finite position at step {step}{where}")
        self.traj_id = int(traj_id)
        self.step = int(step)
        self.time = time


class OffGridError(ValueError):
    pass


class UnderpopulatedBinError(ValueError):
    pass


@dataclass(frozen=True)
class SdeConfig:
    """Integration settings.

    ``nu`` defaults to hbar / 2m of the physics being simulated. ``threads``
    only affects speed; ``chunk_size`` trajectories form one work item.
    ``stiffness`` bounds ``rate * step`` for affine drifts: a step is
    subdivided where the drift's relaxation rate would make it larger (for
    example right after a narrow collapse). ``None`` keeps the plain grid.
    """

    dt: float = 1e-3
    t_end: float = 1.0
    n_traj: int = 100_000
    seed: int = 0
    b_max: float = 1e4
    nu: tuple | None = None
    threads: int | None = None
    chunk_size: int = 8192
    backend: str | None = None
    stiffness: float | None = 0.25

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigurationError("dt must be positive")
        if not (self.t_end > 0 and math.isfinite(self.t_end)):
            raise ConfigurationError("t_end must be positive")
        if int(self.n_traj) != self.n_traj or self.n_traj < 1:
            raise ConfigurationError("n_traj must be a positive integer")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in 64 unsigned bits")
        if not self.b_max > 0:
            raise ConfigurationError("b_max must be positive")
        if self.nu is not None:
            nu = tuple(float(v) for v in np.atleast_1d(self.nu))
            if not all(v > 0 for v in nu):
                raise ConfigurationError("diffusion coefficients must be positive")
            object.__setattr__(self, "nu", nu)
        if self.threads is not None and self.threads < 1:
            raise ConfigurationError("threads must be at least 1")
        if self.chunk_size < 1:
            raise ConfigurationError("chunk_size must be at least 1")
        if self.stiffness is not None and not self.stiffness > 0:
            raise ConfigurationError("stiffness bound must be positive")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "n_traj", int(self.n_traj))

    def diffusion(self, physics):
        if self.nu is None:
            return physics.nu.copy()
        nu = np.broadcast_to(np.asarray(self.nu, dtype=float), (physics.dim,))
        return nu.copy()

    def workers(self):
        return self.threads or os.cpu_count() or 1


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray
    traj_id: int
    events: list = field(default_factory=list)
    clamped: int = 0

    def __post_init__(self):
        if len(self.times) != len(self.positions):
            raise ValueError("times and positions differ in length")

    def at(self, t):
        return self.positions[_time_index(self.times, t)]


def _time_index(times, t):
    times = np.asarray(times)
    i = int(np.searchsorted(times, t))
    for j in (i - 1, i):
        if 0 <= j < times.size and abs(times[j] - t) <= _TIME_TOL * max(1.0, abs(t)):
            return j
    raise OffGridError(f"time {t!r} is not on the recorded grid")


def make_time_grid(t0, t_end, dt, breakpoints=()):
    """Uniform steps of at most ``dt`` that land exactly on every breakpoint."""
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    if not t_end > t0:
        raise ConfigurationError("t_end must exceed the start time")
    pts = {float(t0), float(t_end)}
    for b in breakpoints:
        b = float(b)
        if b < t0 - _TIME_TOL or b > t_end + _TIME_TOL * max(1.0, abs(t_end)):
            raise ConfigurationError(f"breakpoint {b!r} outside [{t0}, {t_end}]")
        pts.add(min(max(b, t0), t_end))
    pts = sorted(pts)
    merged = [pts[0]]
    for p in pts[1:]:
        if p - merged[-1] > _TIME_TOL * max(1.0, abs(p)):
            merged.append(p)
    merged[-1] = float(t_end)
    pieces = [np.array([merged[0]])]
    for a, b in zip(merged[:-1], merged[1:]):
        n = max(1, math.ceil((b - a) / dt - 1e-9))
        seg = a + (b - a) * np.arange(1, n + 1) / n
        seg[-1] = b
        pieces.append(seg)
    return np.concatenate(pieces)


def refine_grid(grid, guidance, events, bound):
    """Subdivide steps so that ``rate * step <= bound`` for affine guidance.

    ``rate`` is the spectral radius of the drift matrix at the step's ends
    and midpoint under the guidance in force (events applied at their
    times). Steps under mixture guidance are left alone.
    """
    grid = np.asarray(grid, dtype=float)
    cuts = sorted((_time_index(grid, ev.time), i) for i, ev in enumerate(events))
    g = guidance
    pieces = [grid[:1]]
    j = 0
    k_ev = 0
    while j < grid.size - 1:
        while k_ev < len(cuts) and cuts[k_ev][0] <= j:
            g = events[cuts[k_ev][1]].update_guidance(g)
            k_ev += 1
        j1 = cuts[k_ev][0] if k_ev < len(cuts) else grid.size - 1
        a, b = grid[j:j1], grid[j + 1 : j1 + 1]
        if g.kind == "linear":
            pts = np.stack([a, 0.5 * (a + b), b], axis=1)
            mats = g.coefficients(pts.ravel())[0]
            rate = np.abs(np.linalg.eigvals(mats)).max(axis=1).reshape(pts.shape).max(axis=1)
            n_sub = np.maximum(1, np.ceil((b - a) * rate / bound - 1e-12)).astype(int)
        else:
            n_sub = np.ones(a.size, dtype=int)
        for lo, hi, m in zip(a, b, n_sub):
            if m == 1:
                pieces.append(np.array([hi]))
            else:
                sub = lo + (hi - lo) * np.arange(1, m + 1) / m
                sub[-1] = hi
                pieces.append(sub)
        j = j1
    return np.concatenate(pieces)


# -- initial conditions -----------------------------------------------------------


def _branch_sampler(br):
    mean, cov = br.density_params()
    return mean, np.linalg.cholesky(cov)


def sample_initial(psi: Wavefunction, n, seed, traj_ids=None, max_rounds=100_000):
    """Draw ``n`` positions from |psi|^2, one independent stream per trajectory.

    A single branch is sampled exactly. Superpositions use rejection against
    the mixture of branch densities, which bounds |sum psi_j|^2 by
    ``J * sum |psi_j|^2``; the expected acceptance rate is computed in closed
    form first and rates below 1e-3 raise :class:`ConfigurationError`.
    """
    d = psi.dim
    if traj_ids is None:
        traj_ids = np.arange(n, dtype=np.uint64)
    traj_ids = np.asarray(traj_ids, dtype=np.uint64)
    n = traj_ids.size
    samplers = [_branch_sampler(br) for br in psi.branches]
    log_norms = np.array([br.log_norm() for br in psi.branches])
    n_br = len(samplers)
    if n_br == 1:
        z = kernels.normal_pairs(seed, traj_ids, 0, kernels.DOMAIN_INITIAL)[:, :d]
        mean, chol = samplers[0]
        return mean + z @ chol.T
    log_env = np.logaddexp.reduce(log_norms)
    accept_rate = np.exp(psi.log_norm() - np.log(n_br) - log_env)
    if accept_rate < 1e-3:
        raise ConfigurationError(f"rejection-sampling acceptance rate {accept_rate:.2e} is below 1e-3")
    cum = np.cumsum(np.exp(log_norms - log_env))
    means = np.array([m for m, _ in samplers])
    chols = np.array([c for _, c in samplers])
    out = np.full((n, d), np.nan)
    pending = np.arange(n)
    attempt = 0
    while pending.size:
        if attempt >= max_rounds:
            raise ConfigurationError("rejection sampling did not terminate")
        ids = traj_ids[pending]
        z = kernels.normal_pairs(seed, ids, attempt, kernels.DOMAIN_INITIAL)[:, :d]
        bits = kernels.philox_block(seed, ids, attempt, kernels.DOMAIN_INITIAL)
        u_comp = kernels.to_uniform(bits[:, 2])
        u_acc = kernels.to_uniform(bits[:, 3])
        comp = np.minimum(np.searchsorted(cum, u_comp * cum[-1]), n_br - 1)
        x = means[comp] + np.einsum("nab,nb->na", chols[comp], z)
        logs = np.stack([br.log_amplitude(x) for br in psi.branches], axis=-1)
        top = logs.real.max(axis=-1, keepdims=True)
        target = np.abs(np.exp(logs - top).sum(axis=-1)) ** 2
        envelope = n_br * (np.abs(np.exp(logs - top)) ** 2).sum(axis=-1)
        ok = u_acc * envelope <= target
        out[pending[ok]] = x[ok]
        pending = pending[~ok]
        attempt += 1
    return out


# -- single-trajectory reference integrator -----------------------------------------


class WavefunctionDrift:
    """Forward drift of a wavefunction evolved to each requested time."""

    def __init__(self, psi: Wavefunction, b_max=np.inf):
        self.psi = psi
        self.b_max = b_max
        self._cache_t = None
        self._cache = None

    @property
    def dim(self):
        return self.psi.dim

    def state(self, t):
        if self._cache_t != t:
            self._cache = at_time(self.psi, t)
            self._cache_t = t
        return self._cache

    def __call__(self, x, t):
        return clamped_drift(self.state(t), x, self.b_max)


def _call_drift(drift, x, t):
    out = drift(x, t)
    if isinstance(out, tuple):
        b, hit = out
        return np.asarray(b, dtype=float), bool(np.any(hit))
    return np.asarray(out, dtype=float), False


def integrate(drift, x0, cfg: SdeConfig, traj_id, times=None, step0=0, nu=None, physics=None):
    """Integrate one trajectory with Euler-Maruyama.

    ``drift(x, t)`` returns the forward drift for a position of shape (d,),
    optionally as ``(b, clamped)``. ``times`` defaults to the uniform grid on
    ``[0, cfg.t_end]``; step ``k`` of the grid consumes random step
    ``step0 + k``. Raises :class:`TrajectoryAborted` on a non-finite position.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    d = x.size
    if times is None:
        times = make_time_grid(0.0, cfg.t_end, cfg.dt)
    times = np.asarray(times, dtype=float)
    if nu is None:
        nu = cfg.diffusion(physics) if physics is not None else (
            np.asarray(cfg.nu, dtype=float) if cfg.nu is not None else np.full(d, 0.5)
        )
    scale = np.sqrt(2.0 * np.broadcast_to(np.asarray(nu, dtype=float), (d,)))
    z = kernels.path_normals(cfg.seed, traj_id, step0, times.size - 1, d)
    positions = np.empty((times.size, d))
    positions[0] = x
    clamped = 0
    for k in range(times.size - 1):
        h = times[k + 1] - times[k]
        b, hit = _call_drift(drift, x, times[k])
        clamped += hit
        x = x + b * h + scale * math.sqrt(h) * z[k]
        if not np.all(np.isfinite(x)):
            raise TrajectoryAborted(traj_id, step0 + k, times[k + 1])
        positions[k + 1] = x
    if clamped:
        log.info("trajectory %d: %d near-node drift clamps", traj_id, clamped)
    return Trajectory(times=times, positions=positions, traj_id=int(traj_id), clamped=clamped)


def wiener_increments(seed, traj_ids, times, nu=0.5, step0=0, d=1):
    """The increments ``dW`` the integrators use, shape (n, K, d)."""
    traj_ids = np.atleast_1d(np.asarray(traj_ids, dtype=np.uint64))
    h = np.diff(np.asarray(times, dtype=float))
    scale = np.sqrt(2.0 * np.broadcast_to(np.asarray(nu, dtype=float), (d,)))
    z = np.stack([kernels.path_normals(seed, t, step0, h.size, d) for t in traj_ids])
    return z * np.sqrt(h)[None, :, None] * scale


# -- quadrature oracles -----------------------------------------------------------


def quadrature_ou_path(x0, dw, omega, times, full=False):
    """Closed-form OU solution driven by discrete increments.

    Evaluates ``X(t) = exp(-omega t)[X(0) + sum_k exp(omega t_k) dW_k]`` with
    left-point weights, where ``dW_k`` is the increment on
    ``[t_k, t_{k+1}]``. ``dw`` has the time axis last. Returns the value at
    ``times[-1]`` or, with ``full``, the whole path (time axis last).
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    times = np.asarray(times, dtype=float)
    dw = np.asarray(dw, dtype=float)
    if dw.shape[-1] != times.size - 1:
        raise ValueError("need one increment per grid step")
    decay = np.exp(-omega * np.diff(times))
    x = np.asarray(x0, dtype=float) * np.ones(dw.shape[:-1])
    path = [x]
    for k in range(decay.size):
        x = decay[k] * (x + dw[..., k])
        if full:
            path.append(x)
    with np.errstate(over="raise"):
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("quadrature overflowed")
    return np.stack(path, axis=-1) if full else x


class CollapsedQuadrature(NamedTuple):
    position: np.ndarray
    near_singular: bool


def quadrature_collapsed_path(x_meas, x_s, dw, omega, times):
    """Exact path of the delta-collapsed oscillator from ``s = times[0]`` to ``t = times[-1]``.

    ``X(t) = [cos wt - sin wt cot ws] X0 + sin wt / sin ws X(s)
    + sin wt sum_k dW_k / sin(w z_k)`` with left points ``z_k``. When ``t`` is a
    multiple of the half period the result is exactly ``(-1)^n X0``.
    ``near_singular`` is set when some ``z_k`` lies within one step of a
    multiple of the half period.
    """
    times = np.asarray(times, dtype=float)
    s, t = times[0], times[-1]
    if not (0 < s <= t):
        raise ValueError("need 0 < s <= t")
    dw = np.asarray(dw, dtype=float)
    if dw.shape[-1] != times.size - 1:
        raise ValueError("need one increment per grid step")
    x_meas = np.asarray(x_meas, dtype=float)
    x_s = np.asarray(x_s, dtype=float)
    z = times[:-1]
    h = np.diff(times)
    phase = omega * z / np.pi
    near = bool(np.any(np.abs(phase - np.round(phase)) * np.pi < omega * h))
    n = round(omega * t / np.pi)
    if n >= 1 and abs(omega * t / np.pi - n) <= 1e-12 * max(1, n):
        sign = 1.0 if n % 2 == 0 else -1.0
        return CollapsedQuadrature(sign * x_meas * np.ones(dw.shape[:-1]), near)
    if t == s:
        return CollapsedQuadrature(x_s * np.ones(dw.shape[:-1]), near)
    st, ct, ss = np.sin(omega * t), np.cos(omega * t), np.sin(omega * s)
    noise = st * np.sum(dw / np.sin(omega * z), axis=-1)
    value = (ct - st * np.cos(omega * s) / ss) * x_meas + st / ss * x_s + noise
    return CollapsedQuadrature(value, near)


# -- guidance for the ensemble engine ---------------------------------------------------


class LinearGuidance:
    """A single Gaussian branch whose linear coefficient depends on outcomes.

    The branch at the reference time ``t0`` is ``x.Q.x + (H p + L0).x`` where
    ``p`` holds a trajectory's measurement outcomes. Its forward drift is
    ``A x + B p + c`` at every later time.
    """

    kind = "linear"

    def __init__(self, physics: Physics, quad, hmat, lin0, t0=0.0):
        self.physics = physics
        d = physics.dim
        self.quad = np.asarray(quad, dtype=complex).reshape(d, d)
        self.hmat = np.asarray(hmat, dtype=complex).reshape(d, -1)
        self.lin0 = np.asarray(lin0, dtype=complex).reshape(d)
        self.t0 = float(t0)

    @classmethod
    def from_wavefunction(cls, psi: Wavefunction):
        if len(psi.branches) != 1:
            raise ValueError("linear guidance needs a single-branch wavefunction")
        br = psi.branches[0]
        return cls(psi.physics, br.quad, np.zeros((psi.dim, 0)), br.lin, psi.time)

    @property
    def n_params(self):
        return self.hmat.shape[1]

    def parameters(self, times):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        cols = np.concatenate([self.lin0[:, None], self.hmat], axis=1)
        q, lins, _ = propagate_parameters(self.quad, cols, self.physics, times - self.t0)
        return q, lins[..., 1:], lins[..., 0]

    def coefficients(self, times):
        """Drift coefficients ``A`` (K, d, d), ``B`` (K, d, k), ``c`` (K, d)."""
        q, h, l0 = self.parameters(times)
        kappa = self.physics.kappa
        a = kappa[None, :, None] * 2.0 * (q.real + q.imag)
        b = kappa[None, :, None] * (h.real + h.imag)
        c = kappa[None, :] * (l0.real + l0.imag)
        return a, b, c

    def measured(self, t_m, coords, w):
        """Guidance after a width-``w`` position measurement of ``coords`` at ``t_m``.

        The outcomes are appended to each trajectory's parameters.
        """
        d = self.physics.dim
        coords = sorted(set(int(c) for c in coords))
        q, h, l0 = self.parameters([t_m])
        sel = np.zeros((d, len(coords)))
        for j, c in enumerate(coords):
            sel[c, j] = 1.0 / (2.0 * w * w)
        mask = np.zeros(d)
        mask[coords] = 1.0
        if len(coords) == d:
            quad = -np.eye(d) / (4.0 * w * w)
            hmat = np.concatenate([np.zeros_like(h[0]), sel], axis=1)
            lin0 = np.zeros(d)
        else:
            quad = q[0] - np.diag(mask) / (4.0 * w * w)
            hmat = np.concatenate([h[0], sel], axis=1)
            lin0 = l0[0]
        return LinearGuidance(self.physics, quad, hmat, lin0, t_m)

    def wavefunction(self, params, t=None):
        """The normalized conditional wavefunction for outcome vector ``params``."""
        t = self.t0 if t is None else float(t)
        params = np.asarray(params, dtype=float).reshape(self.n_params)
        branch = GaussianBranch(quad=self.quad, lin=self.hmat @ params + self.lin0, const=0.0)
        psi = Wavefunction((branch,), self.physics, self.t0).normalized()
        return at_time(psi, t)


class MixtureGuidance:
    """A superposition of branches; trajectories may be restricted to a subset."""

    kind = "mixture"

    def __init__(self, psi: Wavefunction):
        self.psi = psi
        self.physics = psi.physics
        self.t0 = psi.time

    @property
    def n_branches(self):
        return len(self.psi.branches)

    def arrays(self, times):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        qs, ls, cs = [], [], []
        for br in self.psi.branches:
            q, l, c = evolve_branch_arrays(br, self.physics, times - self.t0)
            qs.append(q)
            ls.append(l)
            cs.append(c)
        q = np.stack(qs, axis=1)
        lin = np.stack(ls, axis=1)
        const = np.stack(cs, axis=1)
        # peak of |psi|^2 approximated by the largest branch peak
        cov = np.linalg.inv(-4.0 * q.real)
        mean = np.einsum("kjab,kjb->kja", cov, 2.0 * lin.real)
        peak = 2.0 * (
            np.einsum("kja,kjab,kjb->kj", mean, q.real, mean)
            + np.einsum("kja,kja->kj", mean, lin.real)
            + const.real
        )
        log_floor = peak.max(axis=1) + np.log(NODE_FLOOR)
        return q, lin, const, log_floor

    def wavefunction(self, mask_row, t=None):
        t = self.t0 if t is None else float(t)
        mask_row = np.asarray(mask_row, dtype=bool)
        branches = tuple(br for br, keep in zip(self.psi.branches, mask_row) if keep)
        psi = Wavefunction(branches, self.physics, self.t0)
        psi = psi.normalized() if len(branches) < self.n_branches else psi
        return at_time(psi, t)


# -- ensemble engine -----------------------------------------------------------------


@dataclass
class Ensemble:
    """Trajectories on a shared grid, stored at a set of recorded times.

    ``positions`` has shape (n_traj, len(times), d). ``segments`` lists the
    guidance in force from each start time, ``params`` the per-trajectory
    outcome parameters and ``mask`` the per-trajectory branch selection.
    """

    times: np.ndarray
    positions: np.ndarray
    traj_ids: np.ndarray
    config: SdeConfig
    grid: np.ndarray
    physics: Physics
    segments: list
    params: np.ndarray
    mask: np.ndarray | None
    clamped: np.ndarray
    failed_step: np.ndarray
    event_log: list = field(default_factory=list)
    name: str = ""

    @property
    def n_traj(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[2]

    def time_index(self, t):
        return _time_index(self.times, t)

    def at(self, t, coord=None):
        x = self.positions[:, self.time_index(t)]
        return x if coord is None else x[:, coord]

    def failures(self):
        idx = np.flatnonzero(self.failed_step >= 0)
        return [(int(self.traj_ids[i]), int(self.failed_step[i])) for i in idx]

    def raise_on_failure(self):
        bad = self.failures()
        if bad:
            traj, step = bad[0]
            t = self.grid[step + 1] if step + 1 < self.grid.size else None
            raise TrajectoryAborted(traj, step, t)

    def trajectory(self, i):
        """Recorded path of trajectory index ``i`` with its measurement events."""
        events = [ev.materialize(self, i, old, new) for ev, old, new in self.event_log]
        return Trajectory(
            times=self.times.copy(),
            positions=self.positions[i].copy(),
            traj_id=int(self.traj_ids[i]),
            events=events,
            clamped=int(self.clamped[i]),
        )

    def guidance_at(self, t):
        current = self.segments[0][1]
        for start, g in self.segments:
            if start <= t + _TIME_TOL * max(1.0, abs(t)):
                current = g
        return current

    def conditional_wavefunction(self, i, t):
        """Wavefunction guiding trajectory index ``i`` at time ``t``."""
        g = self.guidance_at(t)
        if g.kind == "linear":
            return g.wavefunction(self.params[i, : g.n_params], t)
        return g.wavefunction(self.mask[i], t)

    def velocity(self, t, kind=VelocityKind.FORWARD):
        """Velocity ``kind`` of every trajectory's own guidance, at its recorded position.

        Returns shape (n_traj, d); nodes give NaN.
        """
        kind = VelocityKind(kind)
        x = self.at(t)
        g = self.guidance_at(t)
        if g.kind == "linear":
            q, h, l0 = g.parameters([t])
            grad = 2.0 * x @ q[0].T + self.params[:, : g.n_params] @ h[0].T + l0[0]
            kappa = self.physics.kappa
            cur, osm = kappa * grad.imag, kappa * grad.real
            return {
                VelocityKind.FORWARD: cur + osm,
                VelocityKind.BACKWARD: cur - osm,
                VelocityKind.CURRENT: cur,
                VelocityKind.OSMOTIC: osm,
            }[kind]
        out = np.empty_like(x)
        rows, inverse = np.unique(self.mask, axis=0, return_inverse=True)
        for j, row in enumerate(rows):
            sel = inverse.reshape(-1) == j
            out[sel] = velocity(g.wavefunction(row, t), x[sel], kind, on_node="nan")
        return out

    def total_clamped(self):
        return int(self.clamped.sum())


def _segment_plan(grid, events):
    """Split the grid at event times; return [(j0, j1, event_or_None)]."""
    cuts = []
    for ev in events:
        cuts.append((_time_index(grid, ev.time), ev))
    cuts.sort(key=lambda c: c[0])
    plan = []
    j0 = 0
    pending = []
    for j, ev in cuts:
        if j > j0:
            plan.append((j0, j, tuple(pending)))
            pending = []
            j0 = j
        pending.append(ev)
    plan.append((j0, grid.size - 1, tuple(pending)))
    return plan


def simulate(guidance, x0, cfg: SdeConfig, grid, record_times, events=(), traj_ids=None,
             name="", backend=None):
    """Integrate an ensemble from positions ``x0`` (n, d) over ``grid``.

    ``events`` are applied at their ``time`` (which must be on the grid, and
    strictly after the start) in order; each provides
    ``update_guidance(guidance)`` and ``update_state(old, new, positions,
    params, mask) -> (params, mask)``. An event at the grid start is applied
    before the first step.
    """
    x0 = np.asarray(x0, dtype=float)
    n, d = x0.shape
    if traj_ids is None:
        traj_ids = np.arange(n, dtype=np.uint64)
    traj_ids = np.asarray(traj_ids, dtype=np.uint64)
    grid = np.asarray(grid, dtype=float)
    physics = guidance.physics
    noise = np.sqrt(2.0 * cfg.diffusion(physics))
    record_idx = np.array(sorted({_time_index(grid, t) for t in record_times}), dtype=np.int64)
    kern = kernels.get_backend(backend or cfg.backend)
    dts = np.diff(grid)

    plan = _segment_plan(grid, events)
    # guidance sequence and per-segment drift data are shared by all chunks
    stages = []
    g = guidance
    segments = []
    for j0, j1, evs in plan:
        transitions = []
        for ev in evs:
            new = ev.update_guidance(g)
            transitions.append((ev, g, new))
            g = new
        segments.append((float(grid[j0]), g))
        if g.kind == "linear":
            data = g.coefficients(grid[j0:j1])
        else:
            q, lin, const, floor = g.arrays(grid[j0:j1])
            data = (q.real.copy(), q.imag.copy(), lin.real.copy(), lin.imag.copy(),
                    const.real.copy(), const.imag.copy(), floor)
        local_rec = record_idx[(record_idx > j0) & (record_idx <= j1)] - j0
        if j0 == 0:
            local_rec = np.concatenate([record_idx[record_idx == 0], local_rec])
        stages.append((j0, j1, transitions, g, data, local_rec))
    final_guidance = g

    def run_chunk(lo, hi):
        x = x0[lo:hi].copy()
        ids = traj_ids[lo:hi]
        m = hi - lo
        params = np.zeros((m, 0))
        mask = np.ones((m, guidance.n_branches), dtype=bool) if guidance.kind == "mixture" else None
        fail = np.full(m, -1, dtype=np.int64)
        clamped = np.zeros(m, dtype=np.int64)
        rec = []
        for j0, j1, transitions, g_seg, data, local_rec in stages:
            for ev, old, new in transitions:
                params, mask = ev.update_state(old, new, x, params, mask)
            if j1 == j0:
                if local_rec.size:
                    rec.append(np.repeat(x[:, None, :], local_rec.size, axis=1))
                continue
            if g_seg.kind == "linear":
                a, b, c = data
                paths, x, f = kern.em_linear(x, params, ids, cfg.seed, j0, dts[j0:j1], a, b, c,
                                             noise, local_rec)
            else:
                paths, x, f, hits = kern.em_mixture(x, ids, cfg.seed, j0, dts[j0:j1], *data[:6],
                                                    data[6], mask, physics.kappa, noise, cfg.b_max,
                                                    local_rec)
                clamped += hits
            fail = np.where(fail >= 0, fail, f)
            rec.append(paths)
        return np.concatenate(rec, axis=1), params, mask, fail, clamped

    chunks = [(lo, min(lo + cfg.chunk_size, n)) for lo in range(0, n, cfg.chunk_size)]
    workers = min(cfg.workers(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: run_chunk(*c), chunks))
    else:
        results = [run_chunk(*c) for c in chunks]

    positions = np.concatenate([r[0] for r in results], axis=0)
    params = np.concatenate([r[1] for r in results], axis=0)
    mask = None if results[0][2] is None else np.concatenate([r[2] for r in results], axis=0)
    fail = np.concatenate([r[3] for r in results])
    clamped = np.concatenate([r[4] for r in results])
    if clamped.any():
        log.info("%d near-node drift clamps across %d trajectories", clamped.sum(), (clamped > 0).sum())
    return Ensemble(
        times=grid[record_idx],
        positions=positions,
        traj_ids=traj_ids,
        config=cfg,
        grid=grid,
        physics=physics,
        segments=segments,
        params=params,
        mask=mask,
        clamped=clamped,
        failed_step=fail,
        event_log=[tr for stage in stages for tr in stage[2]],
        name=name,
    )


def equilibrium_ensemble(psi: Wavefunction, cfg: SdeConfig, record_times=None, breakpoints=(),
                         backend=None):
    """Sample |psi|^2 and integrate with the drift of ``psi`` itself."""
    grid = make_time_grid(psi.time, psi.time + cfg.t_end, cfg.dt, breakpoints)
    guidance = LinearGuidance.from_wavefunction(psi) if len(psi) == 1 else MixtureGuidance(psi)
    if cfg.stiffness is not None:
        grid = refine_grid(grid, guidance, (), cfg.stiffness)
    record_times = grid if record_times is None else record_times
    x0 = sample_initial(psi, cfg.n_traj, cfg.seed)
    return simulate(guidance, x0, cfg, grid, record_times, backend=backend)


# -- mean forward/backward derivatives -----------------------------------------------


DIRECTIONS = ("forward", "backward", "Db", "D*b*")


@dataclass
class MeanDerivativeEstimate:
    """Binned conditional mean derivative at time ``t``; callable on positions."""

    t: float
    lag: float
    direction: str
    edges: np.ndarray
    centers: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    counts: np.ndarray

    def __call__(self, x):
        i = np.clip(np.searchsorted(self.edges, x, side="right") - 1, 0, self.centers.size - 1)
        return self.estimate[i]


def _bin_stats(x, y, n_bins, min_count):
    edges = np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1))
    edges[0], edges[-1] = -np.inf, np.inf
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    if counts.min() < min_count:
        raise UnderpopulatedBinError(f"bin populations {counts.min()} below the minimum {min_count}")
    sums = np.bincount(idx, weights=y, minlength=n_bins)
    sq = np.bincount(idx, weights=y * y, minlength=n_bins)
    xs = np.bincount(idx, weights=x, minlength=n_bins)
    mean = sums / counts
    var = (sq - counts * mean**2) / (counts - 1)
    return edges, xs / counts, mean, np.sqrt(np.maximum(var, 0.0) / counts), counts


def estimate_mean_derivative(ens: Ensemble, t, lag, direction="forward", n_bins=20, min_count=50,
                             coord=0):
    """Estimate a mean derivative of the process conditioned on ``X(t)``.

    ``forward`` gives ``E[(X(t+lag) - X(t))/lag | X(t)]`` and ``backward``
    ``E[(X(t) - X(t-lag))/lag | X(t)]``. ``Db`` is the forward mean
    derivative of the process ``b(X(t), t)``,
    ``E[(b(X(t+lag), t+lag) - b(X(t), t))/lag | X(t)]``, with ``b`` taken
    from each trajectory's own guidance; ``D*b*`` is the backward one of
    ``b*``. Bins hold equal numbers of trajectories; the estimate in each
    bin comes with its standard error.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    x0 = ens.at(t, coord)
    if direction == "forward":
        y = (ens.at(t + lag, coord) - x0) / lag
    elif direction == "backward":
        y = (x0 - ens.at(t - lag, coord)) / lag
    elif direction == "Db":
        y = (ens.velocity(t + lag, "b")[:, coord] - ens.velocity(t, "b")[:, coord]) / lag
    else:
        y = (ens.velocity(t, "b*")[:, coord] - ens.velocity(t - lag, "b*")[:, coord]) / lag
    if not np.all(np.isfinite(y)):
        raise ValueError("ensemble contains failed trajectories")
    edges, centers, mean, err, counts = _bin_stats(x0, y, n_bins, min_count)
    return MeanDerivativeEstimate(float(t), float(lag), direction, edges, centers, mean, err, counts)


def generator_closed_form(psi: Wavefunction, x, direction="Db", dt_res=1e-4):
    """``[d/dt + b.grad + nu lap] b`` (``Db``) or ``[d/dt + b*.grad - nu lap] b*`` (``D*b*``).

    Exact for single-branch states, whose drifts are affine in position so
    the Laplacian term vanishes; the time derivative is a central difference.
    """
    if len(psi) != 1:
        raise ValueError("closed-form generator needs a single-branch state")
    if direction not in ("Db", "D*b*"):
        raise ValueError("direction must be 'Db' or 'D*b*'")
    sign = 1.0 if direction == "Db" else -1.0
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if psi.dim == 1 and x.shape[-1] != 1:
        x = x.reshape(-1, 1)
    g = LinearGuidance.from_wavefunction(psi)
    q, _, l0 = g.parameters([psi.time - dt_res, psi.time, psi.time + dt_res])
    kappa = psi.physics.kappa

    # b = kappa (Re + Im) grad log psi and b* = kappa (Im - Re) grad log psi
    def coeffs(qk, lk):
        a = kappa[:, None] * 2.0 * (sign * qk.real + qk.imag)
        c = kappa * (sign * lk.real + lk.imag)
        return a, c

    a_m, c_m = coeffs(q[0], l0[0])
    a_0, c_0 = coeffs(q[1], l0[1])
    a_p, c_p = coeffs(q[2], l0[2])
    b = x @ a_0.T + c_0
    db_dt = (x @ (a_p - a_m).T + (c_p - c_m)) / (2.0 * dt_res)
    return db_dt + b @ a_0.T

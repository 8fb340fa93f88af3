"""Closed-form Gaussian wavefunctions and the velocity fields they induce.

A branch is ``exp(x.Q.x + L.x + c + log_weight)`` with complex symmetric ``Q``
(negative definite real part), complex ``L`` and complex constants. Branches
stay in this family under free and harmonic evolution, and under
multiplication by a Gaussian in any subset of coordinates, so every state the
simulator needs is a finite sum of them.

Harmonic propagation uses the phase-space (ABCD) form of the Gaussian integral
against the oscillator kernel, which has no singularity at half periods::

    Z   = C - 2i Q kappa S
    Q'  = Z^-1 (Q C - (i/2) omega sin(omega t) / kappa)
    L'  = Z^-1 L
    c'  = c + (i/2) L^T kappa S Z^-1 L - (1/2) log det Z

with ``C = cos(omega t)``, ``S = sin(omega t)/omega`` (``t`` for free
coordinates) and ``kappa = hbar/m``, all diagonal. ``log det Z`` is tracked on
a continuous branch so relative phases between branches survive many periods.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

#: ``|psi|^2 / peak`` below this counts as a node.
NODE_FLOOR = 1e-30
_LOG_NODE_FLOOR = np.log(NODE_FLOOR)
_MAX_LOG = 709.0


class WavefunctionError(ValueError):
    pass


class SingularTimeError(WavefunctionError):
    """Propagation hit a time where the Gaussian integral degenerates."""


class NearNodeError(WavefunctionError):
    """Velocity fields requested where the amplitude is effectively zero."""

    def __init__(self, message, mask=None):
        super().__init__(message)
        self.mask = mask


class ExponentOverflowError(OverflowError):
    pass


class VelocityKind(enum.Enum):
    FORWARD = "b"
    BACKWARD = "b*"
    CURRENT = "v"
    OSMOTIC = "u"


@dataclass(frozen=True, eq=False)
class Physics:
    """Masses, frequencies (zero for a free coordinate) and hbar."""

    mass: np.ndarray
    omega: np.ndarray
    hbar: float = 1.0

    def __post_init__(self):
        mass = np.atleast_1d(np.asarray(self.mass, dtype=float))
        omega = np.broadcast_to(np.asarray(self.omega, dtype=float), mass.shape).copy()
        if not (mass > 0).all() or not np.isfinite(mass).all():
            raise WavefunctionError("masses must be positive")
        if not (omega >= 0).all() or not np.isfinite(omega).all():
            raise WavefunctionError("frequencies must be non-negative")
        if not self.hbar > 0:
            raise WavefunctionError("hbar must be positive")
        mass.setflags(write=False)
        omega.setflags(write=False)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "hbar", float(self.hbar))

    @classmethod
    def uniform(cls, d, mass=1.0, omega=1.0, hbar=1.0):
        return cls(np.full(d, float(mass)), np.full(d, float(omega)), hbar)

    @property
    def dim(self):
        return self.mass.size

    @property
    def kappa(self):
        """hbar / m per coordinate."""
        return self.hbar / self.mass

    @property
    def nu(self):
        """Diffusion coefficient hbar / 2m per coordinate."""
        return 0.5 * self.hbar / self.mass

    def ground_variance(self):
        """sigma^2 = hbar / (2 m omega) per harmonic coordinate (inf for free ones)."""
        with np.errstate(divide="ignore"):
            return np.where(self.omega > 0, self.hbar / (2 * self.mass * self.omega), np.inf)

    def same_as(self, other):
        return (
            np.array_equal(self.mass, other.mass)
            and np.array_equal(self.omega, other.omega)
            and self.hbar == other.hbar
        )

    def canonical(self):
        return {"mass": self.mass.tolist(), "omega": self.omega.tolist(), "hbar": self.hbar}


@dataclass(frozen=True, eq=False)
class GaussianBranch:
    quad: np.ndarray
    lin: np.ndarray
    const: complex = 0.0
    log_weight: complex = 0.0
    label: str | None = None

    def __post_init__(self):
        quad = np.atleast_2d(np.asarray(self.quad, dtype=complex))
        quad = 0.5 * (quad + quad.T)
        lin = np.atleast_1d(np.asarray(self.lin, dtype=complex))
        d = lin.size
        if quad.shape != (d, d) or d not in (1, 2):
            raise WavefunctionError(f"branch dimension mismatch: quad {quad.shape}, lin {lin.shape}")
        if np.linalg.eigvalsh(quad.real).max() >= 0:
            raise WavefunctionError("branch is not normalizable: Re(quad) must be negative definite")
        quad.setflags(write=False)
        lin.setflags(write=False)
        object.__setattr__(self, "quad", quad)
        object.__setattr__(self, "lin", lin)
        object.__setattr__(self, "const", complex(self.const))
        object.__setattr__(self, "log_weight", complex(self.log_weight))

    @property
    def dim(self):
        return self.lin.size

    @property
    def weight(self):
        return np.exp(self.log_weight)

    def log_amplitude(self, x):
        x = np.asarray(x, dtype=float)
        return (
            np.einsum("...a,ab,...b->...", x, self.quad, x)
            + x @ self.lin
            + self.const
            + self.log_weight
        )

    def grad_log(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 * x @ self.quad.T + self.lin

    def density_params(self):
        """Mean and covariance of |branch|^2 as a normal density."""
        cov = np.linalg.inv(-4.0 * self.quad.real)
        mean = cov @ (2.0 * self.lin.real)
        return mean, cov

    def log_norm(self):
        """log of the integral of |branch|^2 over all space."""
        a = -2.0 * self.quad.real
        b = 2.0 * self.lin.real
        d = self.dim
        return (
            2.0 * (self.const.real + self.log_weight.real)
            + 0.5 * (d * np.log(np.pi) - np.log(np.linalg.det(a)))
            + 0.25 * b @ np.linalg.solve(a, b)
        )

    def log_peak_density(self):
        mean, _ = self.density_params()
        return 2.0 * self.log_amplitude(mean).real

    def with_log_weight(self, log_weight):
        return replace(self, log_weight=complex(log_weight))


def _log_overlap(bra: GaussianBranch, ket: GaussianBranch):
    """log of <bra|ket> (complex), closed form."""
    m = -(bra.quad.conj() + ket.quad)
    j = bra.lin.conj() + ket.lin
    eig = np.linalg.eigvals(m)
    log_sqrt_det = 0.5 * np.sum(np.log(eig))
    d = bra.dim
    return (
        np.conj(bra.const + bra.log_weight)
        + ket.const
        + ket.log_weight
        + 0.5 * d * np.log(np.pi)
        - log_sqrt_det
        + 0.25 * j @ np.linalg.solve(m, j)
    )


@dataclass(frozen=True, eq=False)
class Wavefunction:
    branches: tuple
    physics: Physics
    time: float = 0.0

    def __post_init__(self):
        branches = tuple(self.branches)
        if not branches:
            raise WavefunctionError("a wavefunction needs at least one branch")
        d = self.physics.dim
        for br in branches:
            if br.dim != d:
                raise WavefunctionError("branch dimension does not match physics")
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "time", float(self.time))

    @property
    def dim(self):
        return self.physics.dim

    def __len__(self):
        return len(self.branches)

    def labels(self):
        return [br.label for br in self.branches]

    def log_norm(self):
        """log of the integral of |psi|^2, exact for any number of branches."""
        if len(self.branches) == 1:
            return float(self.branches[0].log_norm())
        logs = np.array([[_log_overlap(a, b) for b in self.branches] for a in self.branches])
        top = logs.real.max()
        total = np.exp(logs - top).sum()
        return float(top + np.log(total.real))

    def norm(self):
        return float(np.exp(self.log_norm()))

    def normalized(self):
        shift = -0.5 * self.log_norm()
        return Wavefunction(
            tuple(replace(br, const=br.const + shift) for br in self.branches), self.physics, self.time
        )

    def log_peak_density(self):
        return max(br.log_peak_density() for br in self.branches)


def _as_physics(physics, d):
    if physics is None:
        return Physics.uniform(d)
    if physics.dim != d:
        raise WavefunctionError("physics dimension mismatch")
    return physics


def make_ground_state(mass=1.0, omega=1.0, hbar=1.0):
    """Harmonic-oscillator ground state of one coordinate, variance hbar/(2 m omega)."""
    if not (mass > 0 and omega > 0 and hbar > 0):
        raise WavefunctionError("mass, omega and hbar must be positive")
    physics = Physics(np.array([mass]), np.array([omega]), hbar)
    sigma2 = hbar / (2.0 * mass * omega)
    branch = GaussianBranch(
        quad=[[-1.0 / (4.0 * sigma2)]], lin=[0.0], const=-0.25 * np.log(2.0 * np.pi * sigma2)
    )
    return Wavefunction((branch,), physics, 0.0)


def gaussian_branch(mean, cov, momentum=None, hbar=1.0, label=None, log_weight=0.0):
    """Normalized real-envelope Gaussian with density N(mean, cov) and mean momentum."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    prec = np.linalg.inv(cov)
    lin = 0.5 * prec @ mean
    if momentum is not None:
        lin = lin + 1j * np.atleast_1d(np.asarray(momentum, dtype=float)) / hbar
    d = mean.size
    const = -0.25 * mean @ prec @ mean - 0.25 * (d * np.log(2 * np.pi) + np.log(np.linalg.det(cov)))
    if momentum is not None:
        const = const - 1j * (lin.imag @ mean)
    return GaussianBranch(quad=-0.25 * prec, lin=lin, const=const, log_weight=log_weight, label=label)


def make_collapsed_state(x0, w, physics=None, time=0.0):
    """Normalized real Gaussian centred at ``x0`` with position standard deviation ``w``."""
    if not w > 0:
        raise WavefunctionError("collapse width must be positive; the delta limit is not representable")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    physics = _as_physics(physics, x0.size)
    branch = gaussian_branch(x0, np.eye(x0.size) * w * w)
    return Wavefunction((branch,), physics, time)


def make_correlated_pair(sigma2=0.5, r=0.99, physics=None):
    """Real bivariate Gaussian, equal variances ``sigma2`` and correlation ``r``."""
    if not -1 < r < 1:
        raise WavefunctionError("correlation must lie strictly between -1 and 1")
    cov = sigma2 * np.array([[1.0, r], [r, 1.0]])
    physics = _as_physics(physics, 2)
    return Wavefunction((gaussian_branch(np.zeros(2), cov),), physics, 0.0)


def make_superposition(branches, physics, time=0.0, normalize=True):
    psi = Wavefunction(tuple(branches), physics, time)
    return psi.normalized() if normalize else psi


def make_double_slit_state(separation, width, physics=None, weights=(1.0, 1.0)):
    """Two non-overlapping slit Gaussians at +-separation/2, labelled "U" and "L"."""
    physics = physics if physics is not None else Physics(np.array([1.0]), np.array([0.0]), 1.0)
    half = 0.5 * separation
    upper = gaussian_branch([half], [[width**2]], label="U", log_weight=np.log(complex(weights[0])))
    lower = gaussian_branch([-half], [[width**2]], label="L", log_weight=np.log(complex(weights[1])))
    return make_superposition((upper, lower), physics)


# -- propagation ---------------------------------------------------------------


def _trig(physics, t):
    """cos, sin/omega and omega*sin per coordinate; ``t`` of shape (K,) gives (K, d)."""
    om = physics.omega
    t = np.asarray(t, dtype=float)[..., None]
    theta = om * t
    harmonic = om > 0
    safe = np.where(harmonic, om, 1.0)
    c = np.where(harmonic, np.cos(theta), 1.0)
    s = np.where(harmonic, np.sin(theta) / safe, t)
    om_sin = np.where(harmonic, om * np.sin(theta), 0.0)
    return c, s, om_sin


def _ellipse_log(lam, theta):
    """Continuous log of cos(theta) + lam sin(theta) for Im(lam) > 0."""
    n = np.floor(theta / np.pi)
    rem = theta - n * np.pi
    z = np.cos(rem) + lam * np.sin(rem)
    return np.log(np.abs(np.cos(theta) + lam * np.sin(theta))) + 1j * (np.angle(z) + n * np.pi)


def _z_matrices(quad, physics, t):
    c, s, _ = _trig(physics, t)
    eye = np.eye(physics.dim)
    return c[..., None, :] * eye - 2j * quad * (physics.kappa * s)[..., None, :]


def log_det_z(quad, physics, t):
    """Continuous-branch log det(C - 2i Q kappa S) along [0, t], vectorised over ``t``."""
    t = np.asarray(t, dtype=float)
    kappa = physics.kappa
    om = physics.omega
    root = np.sqrt(kappa)
    sym = root[:, None] * np.asarray(quad) * root[None, :]
    if np.all(om == om[0]):
        if om[0] > 0:
            lam = np.linalg.eigvals(-2j * sym / om[0])
            return np.sum(_ellipse_log(lam, om[0] * t[..., None]), axis=-1)
        mu = np.linalg.eigvals(-2j * sym)
        return np.sum(np.log(1.0 + mu * t[..., None]), axis=-1)
    # mixed free/harmonic coordinates: unwrap det along a refined path
    flat = np.atleast_1d(t).ravel()
    out = np.empty(flat.shape, dtype=complex)
    for i, ti in enumerate(flat):
        n = 64
        while True:
            taus = np.linspace(0.0, ti, n + 1)
            dets = np.linalg.det(_z_matrices(quad, physics, taus))
            phase = np.unwrap(np.angle(dets))
            if np.abs(np.diff(phase)).max(initial=0.0) < np.pi / 8 or n > 2**16:
                out[i] = np.log(np.abs(dets[-1])) + 1j * phase[-1]
                break
            n *= 4
    return out.reshape(t.shape)


def propagate_parameters(quad, lins, physics, t):
    """Propagate a shared quadratic form and several linear coefficients.

    ``lins`` has shape (d, m); each column is propagated as a branch ``lin``.
    Returns ``quad(t)`` (K, d, d), ``lins(t)`` (K, d, m) and the matrices
    ``Z(t)`` for ``t`` of shape (K,).
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    quad = np.asarray(quad, dtype=complex)
    lins = np.asarray(lins, dtype=complex).reshape(physics.dim, -1)
    c, s, om_sin = _trig(physics, t)
    kappa = physics.kappa
    z = _z_matrices(quad, physics, t)
    det = np.abs(np.linalg.det(z))
    if not np.all(np.isfinite(z)) or np.any(det < 1e-300):
        raise SingularTimeError("Gaussian integral degenerates on the requested times")
    eye = np.eye(physics.dim)
    rhs = quad * c[:, None, :] - 0.5j * (om_sin / kappa)[:, :, None] * eye
    q_t = np.linalg.solve(z, rhs)
    q_t = 0.5 * (q_t + np.swapaxes(q_t, -1, -2))
    l_t = np.linalg.solve(z, np.broadcast_to(lins, (t.size,) + lins.shape))
    return q_t, l_t, z


def evolve_branch_arrays(branch, physics, t):
    """Branch parameters at each of the times ``t`` (relative), as arrays."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    q_t, l_t, _ = propagate_parameters(branch.quad, branch.lin[:, None], physics, t)
    l_t = l_t[..., 0]
    _, s, _ = _trig(physics, t)
    const = (
        branch.const
        + branch.log_weight
        + 0.5j * np.einsum("a,ka,ka->k", branch.lin, physics.kappa * s, l_t)
        - 0.5 * log_det_z(branch.quad, physics, t)
    )
    return q_t, l_t, const


def _evolve_branch(branch, physics, t):
    q_t, l_t, const = evolve_branch_arrays(branch, physics, [t])
    return GaussianBranch(
        quad=q_t[0], lin=l_t[0], const=const[0] - branch.log_weight,
        log_weight=branch.log_weight, label=branch.label,
    )


def evolve(psi: Wavefunction, t: float) -> Wavefunction:
    """Unitary evolution by ``t`` (any sign) under the free/harmonic Hamiltonian."""
    t = float(t)
    if t == 0.0:
        return psi
    branches = tuple(_evolve_branch(br, psi.physics, t) for br in psi.branches)
    return Wavefunction(branches, psi.physics, psi.time + t)


def propagate(psi: Wavefunction, t: float) -> Wavefunction:
    """Propagate forward by a duration ``t >= 0``."""
    if not t >= 0:
        raise WavefunctionError("propagation duration must be non-negative")
    return evolve(psi, t)


def at_time(psi: Wavefunction, t: float) -> Wavefunction:
    return evolve(psi, t - psi.time)


# -- evaluation -----------------------------------------------------------------


def _branch_logs(psi, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (psi.dim,):
        if psi.dim == 1:
            x = x[..., None]
        else:
            raise WavefunctionError(f"positions must have trailing dimension {psi.dim}")
    logs = np.stack([br.log_amplitude(x) for br in psi.branches], axis=-1)
    return x, logs


def log_evaluate(psi: Wavefunction, x) -> np.ndarray:
    """Complex log of psi at ``x`` (shape (..., d), or (...) for d = 1)."""
    _, logs = _branch_logs(psi, x)
    top = logs.real.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    total = np.exp(logs - top).sum(axis=-1)
    with np.errstate(divide="ignore"):
        return top[..., 0] + np.log(total)


def evaluate(psi: Wavefunction, x) -> np.ndarray:
    """Complex amplitude of psi at ``x``."""
    x_arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x_arr)):
        raise WavefunctionError("positions must be finite")
    logs = log_evaluate(psi, x_arr)
    if np.any(logs.real > _MAX_LOG):
        raise ExponentOverflowError("amplitude exponent overflows double precision")
    return np.exp(logs)


def density(psi: Wavefunction, x) -> np.ndarray:
    return np.abs(evaluate(psi, x)) ** 2


def log_derivatives(psi: Wavefunction, x):
    """Exact gradient and Hessian of log psi at ``x``.

    Returns ``(log_psi, grad, hess, log_rho_rel)`` where ``log_rho_rel`` is
    log(|psi|^2 / peak density) used for node detection.
    """
    x, logs = _branch_logs(psi, x)
    top = logs.real.max(axis=-1, keepdims=True)
    w = np.exp(logs - top)
    den = w.sum(axis=-1)
    grads = np.stack([br.grad_log(x) for br in psi.branches], axis=-2)
    quads = np.stack([br.quad for br in psi.branches])
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.einsum("...j,...ja->...a", w, grads) / den[..., None]
        second = np.einsum("...j,...ja,...jb->...ab", w, grads, grads) + 2.0 * np.einsum(
            "...j,jab->...ab", w, quads
        )
        hess = second / den[..., None, None] - g[..., :, None] * g[..., None, :]
        log_psi = top[..., 0] + np.log(den)
    log_rho_rel = 2.0 * log_psi.real - psi.log_peak_density()
    return log_psi, g, hess, log_rho_rel


_ON_NODE = ("raise", "nan", "ignore")


def _check_nodes(log_rho_rel, on_node):
    if on_node not in _ON_NODE:
        raise ValueError(f"on_node must be one of {_ON_NODE}")
    node = ~(log_rho_rel >= _LOG_NODE_FLOOR)
    if np.any(node) and on_node == "raise":
        raise NearNodeError(f"{int(np.sum(node))} point(s) within the near-node floor", mask=node)
    return node


def velocity(psi: Wavefunction, x, kind=VelocityKind.FORWARD, on_node="raise"):
    """Velocity field ``kind`` of ``psi`` evaluated at ``x`` (shape (..., d))."""
    kind = VelocityKind(kind)
    _, g, _, rel = log_derivatives(psi, x)
    node = _check_nodes(rel, on_node)
    kappa = psi.physics.kappa
    cur = kappa * g.imag
    osm = kappa * g.real
    out = {
        VelocityKind.FORWARD: cur + osm,
        VelocityKind.BACKWARD: cur - osm,
        VelocityKind.CURRENT: cur,
        VelocityKind.OSMOTIC: osm,
    }[kind]
    if on_node == "nan" and np.any(node):
        out = np.where(node[..., None], np.nan, out)
    return out


def drift_field(psi: Wavefunction, kind=VelocityKind.FORWARD, on_node="raise") -> Callable:
    """Return ``x -> velocity`` for the requested kind at the wavefunction's time."""

    def field(x):
        return velocity(psi, x, kind, on_node=on_node)

    field.kind = VelocityKind(kind)
    field.time = psi.time
    return field


def clamped_drift(psi: Wavefunction, x, b_max):
    """Forward drift with the integrator's near-node policy.

    Returns ``(b, hit)``: non-finite drift at a node is replaced by zero, every
    component is clipped to ``[-b_max, b_max]``, and ``hit`` marks points that
    were at a node or needed clipping.
    """
    _, g, _, rel = log_derivatives(psi, x)
    node = _check_nodes(rel, "ignore")
    with np.errstate(invalid="ignore"):
        b = psi.physics.kappa * (g.real + g.imag)
    finite = np.isfinite(b)
    hit = node | ~finite.all(axis=-1) | (np.abs(np.where(finite, b, 0.0)) > b_max).any(axis=-1)
    b = np.where(node[..., None] & ~finite, 0.0, b)
    return np.clip(b, -b_max, b_max), hit


# -- residuals of the hydrodynamic equations ---------------------------------------


def _default_dt_res(physics):
    om = physics.omega.max()
    return 1e-4 / om if om > 0 else 1e-4


def _time_slices(psi, t, h):
    centre = at_time(psi, t)
    return centre, evolve(centre, h), evolve(centre, -h)


def hjm_residual(psi: Wavefunction, x, t=None, dt_res=None, on_node="raise"):
    """Absolute residual of the quantum Hamilton-Jacobi equation at (x, t).

    Spatial derivatives are exact; dS/dt is a central difference with step
    ``dt_res``. Potentials are the harmonic ones of the physics, no vector
    potential.
    """
    t = psi.time if t is None else float(t)
    h = _default_dt_res(psi.physics) if dt_res is None else float(dt_res)
    phys = psi.physics
    centre, plus, minus = _time_slices(psi, t, h)
    _, g, hess, rel = log_derivatives(centre, x)
    _check_nodes(rel, on_node)
    dphase = np.angle(np.exp(1j * (log_evaluate(plus, x).imag - log_evaluate(minus, x).imag)))
    ds_dt = phys.hbar * dphase / (2.0 * h)
    xx = np.asarray(x, dtype=float)
    if phys.dim == 1 and xx.shape[-1:] != (1,):
        xx = xx[..., None]
    grad_s = phys.hbar * g.imag
    kinetic = np.sum(grad_s**2 / (2.0 * phys.mass), axis=-1)
    potential = np.sum(0.5 * phys.mass * phys.omega**2 * xx**2, axis=-1)
    lap_sqrt_rho = np.diagonal(hess.real, axis1=-2, axis2=-1) + g.real**2
    quantum = -np.sum(phys.hbar**2 / (2.0 * phys.mass) * lap_sqrt_rho, axis=-1)
    return np.abs(ds_dt + kinetic + potential + quantum)


def _flux_terms(psi, x, on_node):
    _, g, hess, rel = log_derivatives(psi, x)
    _check_nodes(rel, on_node)
    kappa = psi.physics.kappa
    hdiag = np.diagonal(hess, axis1=-2, axis2=-1)
    return g, hdiag, kappa


def density_time_derivative(psi: Wavefunction, x, t=None, dt_res=None):
    t = psi.time if t is None else float(t)
    h = _default_dt_res(psi.physics) if dt_res is None else float(dt_res)
    _, plus, minus = _time_slices(psi, t, h)
    rho_p = np.exp(2.0 * log_evaluate(plus, x).real)
    rho_m = np.exp(2.0 * log_evaluate(minus, x).real)
    return (rho_p - rho_m) / (2.0 * h)


def divergence_terms(psi: Wavefunction, x, t=None, on_node="raise"):
    """Exact spatial terms: rho, div(v rho), div(b rho), div(b* rho), nu lap(rho)."""
    t = psi.time if t is None else float(t)
    centre = at_time(psi, t)
    g, hdiag, kappa = _flux_terms(centre, x, on_node)
    rho = np.exp(2.0 * log_evaluate(centre, x).real)
    dlog_rho = 2.0 * g.real
    v = kappa * g.imag
    u = kappa * g.real
    dv = kappa * hdiag.imag
    du = kappa * hdiag.real
    div_v = rho * np.sum(dv + v * dlog_rho, axis=-1)
    div_u = rho * np.sum(du + u * dlog_rho, axis=-1)
    nu = centre.physics.nu
    lap = rho * np.sum(nu * (2.0 * hdiag.real + dlog_rho**2), axis=-1)
    return {
        "rho": rho,
        "div_v": div_v,
        "div_b": div_v + div_u,
        "div_b_star": div_v - div_u,
        "nu_lap": lap,
    }

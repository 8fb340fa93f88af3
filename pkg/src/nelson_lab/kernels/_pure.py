"""Pure numpy implementation of the hot kernels.

Every function here has a twin in ``_core.pyx`` with the same signature and
the same random stream; the compiled one loops per trajectory, this one is
vectorised across trajectories and loops over time steps.
"""

import numpy as np

_M32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_PHILOX_M0 = np.uint64(0xD2E7470EE14C6C93)
_PHILOX_M1 = np.uint64(0xCA5A826395121157)
_PHILOX_W0 = np.uint64(0x9E3779B97F4A7C15)
_PHILOX_W1 = np.uint64(0xBB67AE8584CAA73B)
_TWO_PI = 6.283185307179586
_INV_2_53 = 1.1102230246251565e-16


def _mulhilo(a, b):
    a0 = a & _M32
    a1 = a >> _S32
    b0 = b & _M32
    b1 = b >> _S32
    p00 = a0 * b0
    p01 = a0 * b1
    p10 = a1 * b0
    p11 = a1 * b1
    mid = (p00 >> _S32) + (p01 & _M32) + (p10 & _M32)
    hi = p11 + (p01 >> _S32) + (p10 >> _S32) + (mid >> _S32)
    return hi, a * b


def philox_block(seed, traj, step, domain):
    """Philox4x64-10 output for key ``(seed, traj)`` and counter ``(step, domain, 0, 0)``.

    ``traj`` and ``step`` broadcast against each other. Returns a uint64 array
    with a trailing axis of length 4.
    """
    traj = np.asarray(traj, dtype=np.uint64)
    step = np.asarray(step, dtype=np.uint64)
    traj, step = np.broadcast_arrays(traj, step)
    with np.errstate(over="ignore"):
        c0 = step.copy()
        c1 = np.full(step.shape, domain, dtype=np.uint64)
        c2 = np.zeros(step.shape, dtype=np.uint64)
        c3 = np.zeros(step.shape, dtype=np.uint64)
        k0 = np.uint64(seed)
        k1 = traj.copy()
        for r in range(10):
            if r > 0:
                k0 = k0 + _PHILOX_W0
                k1 = k1 + _PHILOX_W1
            hi0, lo0 = _mulhilo(_PHILOX_M0, c0)
            hi1, lo1 = _mulhilo(_PHILOX_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1)


def to_uniform(bits):
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def normal_pairs(seed, traj, step, domain):
    block = philox_block(seed, traj, step, domain)
    r = np.sqrt(-2.0 * np.log(to_uniform(block[..., 0])))
    a = _TWO_PI * to_uniform(block[..., 1])
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)


def step_normals(seed, traj, step, d, domain=0):
    """Standard normals for one time step, shape (n, d).

    Normal number ``m = step * d + q`` of a trajectory is slot ``m % 2`` of the
    Box-Muller pair at counter ``m // 2``.
    """
    traj = np.asarray(traj, dtype=np.uint64)
    out = np.empty((traj.size, d))
    for q in range(d):
        m = step * d + q
        out[:, q] = normal_pairs(seed, traj, m // 2, domain)[:, m % 2]
    return out


def path_normals(seed, traj, step0, n_steps, d, domain=0):
    """Normals for ``n_steps`` consecutive steps of one trajectory, shape (n_steps, d)."""
    m = (step0 + np.arange(n_steps))[:, None] * d + np.arange(d)[None, :]
    pairs = normal_pairs(seed, traj, m // 2, domain)
    return np.take_along_axis(pairs, (m % 2)[..., None], axis=-1)[..., 0]


def _check_finite(x, fail, step, alive):
    bad = alive & ~np.isfinite(x).all(axis=1)
    if bad.any():
        fail[bad] = step
        alive &= ~bad
        x[bad] = np.nan


def em_linear(x0, params, traj, seed, step0, dts, A, B, c, noise_scale, record, domain=0):
    x = np.array(x0, dtype=np.float64, copy=True)
    n, d = x.shape
    params = np.asarray(params, dtype=np.float64)
    traj = np.asarray(traj, dtype=np.uint64)
    record = np.asarray(record, dtype=np.int64)
    paths = np.full((n, record.size, d), np.nan)
    fail = np.full(n, -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    r = 0
    while r < record.size and record[r] == 0:
        paths[:, r] = x
        r += 1
    for j, dt in enumerate(dts):
        z = step_normals(seed, traj, step0 + j, d, domain)
        drift = x @ A[j].T + params @ B[j].T + c[j]
        x = x + drift * dt + noise_scale * np.sqrt(dt) * z
        x[~alive] = np.nan
        _check_finite(x, fail, step0 + j, alive)
        while r < record.size and record[r] == j + 1:
            paths[:, r] = x
            r += 1
    return paths, x, fail


def mixture_drift(x, q_re, q_im, l_re, l_im, c_re, c_im, log_floor, mask, kappa, b_max):
    """Forward drift of a Gaussian superposition at positions ``x`` (n, d).

    Branch parameters are for a single time; ``mask`` (n, J) selects the
    branches each trajectory is guided by. Returns the drift and a boolean
    array marking clamped evaluations.
    """
    q = q_re + 1j * q_im
    lin = l_re + 1j * l_im
    const = c_re + 1j * c_im
    qx = np.einsum("jab,nb->nja", q, x)
    logs = np.einsum("na,nja->nj", x, qx) + x @ lin.T + const
    grads = 2.0 * qx + lin
    active = mask.astype(bool)
    re = np.where(active, logs.real, -np.inf)
    top = re.max(axis=1)
    w = np.where(active, np.exp(re - top[:, None]) * np.exp(1j * logs.imag), 0.0)
    den = w.sum(axis=1)
    num = np.einsum("nj,nja->na", w, grads)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = num / den[:, None]
        log_rho = 2.0 * (top + np.log(np.abs(den)))
    b = kappa * (g.real + g.imag)
    node = ~(log_rho >= log_floor)
    clamp = node[:, None] | (np.abs(b) > b_max) | ~np.isfinite(b)
    b = np.where(node[:, None] & ~np.isfinite(b), 0.0, b)
    b = np.clip(b, -b_max, b_max)
    return b, clamp.any(axis=1)


def em_mixture(x0, traj, seed, step0, dts, q_re, q_im, l_re, l_im, c_re, c_im,
               log_floor, mask, kappa, noise_scale, b_max, record, domain=0):
    x = np.array(x0, dtype=np.float64, copy=True)
    n, d = x.shape
    traj = np.asarray(traj, dtype=np.uint64)
    record = np.asarray(record, dtype=np.int64)
    paths = np.full((n, record.size, d), np.nan)
    fail = np.full(n, -1, dtype=np.int64)
    clamped = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    r = 0
    while r < record.size and record[r] == 0:
        paths[:, r] = x
        r += 1
    for j, dt in enumerate(dts):
        z = step_normals(seed, traj, step0 + j, d, domain)
        drift, hit = mixture_drift(x, q_re[j], q_im[j], l_re[j], l_im[j], c_re[j], c_im[j],
                                   log_floor[j], mask, kappa, b_max)
        clamped += hit & alive
        x = x + drift * dt + noise_scale * np.sqrt(dt) * z
        x[~alive] = np.nan
        _check_finite(x, fail, step0 + j, alive)
        while r < record.size and record[r] == j + 1:
            paths[:, r] = x
            r += 1
    return paths, x, fail, clamped

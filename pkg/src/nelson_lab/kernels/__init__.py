"""Hot loops of the ensemble engine.

The compiled extension ``_core`` is used when it imports; otherwise the numpy
implementation in ``_pure`` is. Set ``NELSON_LAB_PURE=1`` to force the
fallback. Both backends draw the same Philox4x64 stream, so results agree to
floating-point rounding.

Random streams are addressed by key ``(seed, trajectory id)`` and counter
``(step, domain)``; ``DOMAIN_INCREMENT`` feeds Wiener increments and
``DOMAIN_INITIAL`` feeds initial-position sampling.
"""

import importlib
import os

import numpy as np

from . import _pure

DOMAIN_INCREMENT = 0
DOMAIN_INITIAL = 1

_core = None
if os.environ.get("NELSON_LAB_PURE", "") not in ("1", "true", "yes"):
    try:
        _core = importlib.import_module(".kernels._core", "nelson_lab")
    except ImportError:  # extension not built
        _core = None

BACKEND = "compiled" if _core is not None else "pure"


def get_backend(name=None):
    """Return the kernel module called ``name`` ("compiled", "pure") or the default."""
    if name is None:
        name = BACKEND
    if name == "pure":
        return _pure
    if name == "compiled":
        if _core is None:
            raise RuntimeError("compiled kernels are not available; build the extension first")
        return _core
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    return ["compiled", "pure"] if _core is not None else ["pure"]


_default = get_backend()
philox_block = _default.philox_block
normal_pairs = _default.normal_pairs
em_linear = _default.em_linear
em_mixture = _default.em_mixture
to_uniform = _pure.to_uniform


def step_normals(seed, traj, step, d, domain=DOMAIN_INCREMENT):
    """Standard normals for one time step of each trajectory in ``traj``, shape (n, d).

    Normal number ``m = step * d + q`` of a trajectory is slot ``m % 2`` of the
    Box-Muller pair at counter ``m // 2``; the kernels consume the same stream.
    """
    traj = np.atleast_1d(np.asarray(traj, dtype=np.uint64))
    m = step * d + np.arange(d)
    pairs = normal_pairs(seed, traj[:, None], (m // 2)[None, :], domain)
    return np.take_along_axis(pairs, np.broadcast_to((m % 2)[None, :, None], pairs.shape[:2] + (1,)), axis=-1)[..., 0]


def path_normals(seed, traj, step0, n_steps, d, domain=DOMAIN_INCREMENT):
    """Normals for ``n_steps`` consecutive steps of a single trajectory, shape (n_steps, d)."""
    m = (step0 + np.arange(n_steps))[:, None] * d + np.arange(d)[None, :]
    pairs = normal_pairs(seed, np.uint64(traj), m // 2, domain)
    return np.take_along_axis(pairs, (m % 2)[..., None], axis=-1)[..., 0]

__all__ = [
    "BACKEND",
    "DOMAIN_INCREMENT",
    "DOMAIN_INITIAL",
    "available_backends",
    "em_linear",
    "em_mixture",
    "get_backend",
    "normal_pairs",
    "path_normals",
    "philox_block",
    "step_normals",
    "to_uniform",
]

"""Compare the compiled and pure-numpy kernel backends.

Times the Philox normal generator and full ensemble runs for a single-branch
(linear) and a two-branch (mixture) guidance, and checks that both backends
produce the same numbers.

    python3 benchmarks/bench_kernels.py --n-traj 20000 --repeat 3
"""

import argparse
import time

import numpy as np

from nelson_lab import dynamics as dy
from nelson_lab import kernels
from nelson_lab import wavefunction as wf


def best_of(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(n_traj, n_steps):
    ids = np.arange(n_traj, dtype=np.uint64)

    def normals(backend):
        mod = kernels.get_backend(backend)
        return lambda: np.stack([mod.normal_pairs(7, ids, s, 0) for s in range(n_steps // 10)])

    def ensemble(psi):
        t_end = n_steps * 1e-3
        cfg = dy.SdeConfig(dt=1e-3, t_end=t_end, n_traj=n_traj, seed=7)
        grid = dy.make_time_grid(0.0, t_end, cfg.dt)
        x0 = dy.sample_initial(psi, n_traj, cfg.seed)
        g = (dy.LinearGuidance.from_wavefunction(psi) if len(psi) == 1 else dy.MixtureGuidance(psi))

        def run(backend):
            return lambda: dy.simulate(g, x0, cfg, grid, [t_end], backend=backend).positions
        return run

    return [
        (f"philox normals ({n_steps // 10} steps)", normals),
        (f"linear ensemble ({n_steps} steps)", ensemble(wf.make_ground_state())),
        (f"mixture ensemble ({n_steps} steps)", ensemble(wf.make_double_slit_state(3.0, 1.0))),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-traj", type=int, default=20_000)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels not built; timing the pure backend only")
    print(f"n_traj={args.n_traj}  steps={args.steps}  best of {args.repeat}")
    print(f"{'case':34s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speedup':>10s}{'max diff':>11s}")
    for name, make in cases(args.n_traj, args.steps):
        res = [best_of(make(b), args.repeat) for b in backends]
        row = f"{name:34s}" + "".join(f"{t:11.3f}s" for t, _ in res)
        if len(res) == 2:
            diff = np.max(np.abs(res[0][1] - res[1][1]))
            row += f"{res[1][0] / res[0][0]:9.1f}x{diff:11.1e}"
        print(row)


if __name__ == "__main__":
    main()

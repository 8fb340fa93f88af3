"""Command-line runner for the correlation experiments.

Commands
--------
``run <preset>``
    Simulate a preset, write the CSV report and print the verdict table.
``list-presets``
    Show the available presets and their default lags.
``check``
    Run the invariant suite (residuals, identities, propagator, sampler).

CSV schema
----------
A first line ``# config: key=value;...`` echoes the resolved configuration in
canonical order (worker count and output path excluded: neither changes the
numbers). An optional ``# generated: <UTC time>`` line follows unless
``--no-timestamp`` is given. Then the header
``t,estimate,stderr,sm_reference,qm_reference_re,qm_reference_im,z_sm,z_qm,verdict``
and one row per lag, floats written with ``repr`` so equal runs give equal bytes.

Config files hold flat ``key = value`` lines with ``#`` comments. Keys are the
long flag names (``n-traj`` or ``n_traj``); unknown keys are errors and flags
override file values. ``NELSON_LAB_SEED`` supplies the seed when neither does.

Exit status: 0 when every applicable row passes, 1 when some row fails,
2 for invalid configuration, 3 for I/O errors, 4 for numerical aborts.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import io
import math
import os
import re
import sys
from dataclasses import dataclass

import numpy as np

from . import kernels
from .correlators import all_pass, compare, correlation_report, sm_pair_unmeasured
from .dynamics import ConfigurationError, SdeConfig, TrajectoryAborted
from .measurement import PRESET_NAMES, make_preset, run_experiment

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_ABORT = 0, 1, 2, 3, 4
SEED_ENV = "NELSON_LAB_SEED"
CSV_COLUMNS = ("t", "estimate", "stderr", "sm_reference", "qm_reference_re", "qm_reference_im",
               "z_sm", "z_qm", "verdict")

_LAG_TOKEN = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)?\s*\*?\s*pi\s*(?:/\s*(\d+\.?\d*))?\s*$")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending flag."""


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings of one ``run``."""

    preset: str
    mass: float = 1.0
    omega: float = 1.0
    hbar: float = 1.0
    n_traj: int = 100_000
    dt: float = 1e-3
    t_end: float | None = None
    seed: int = 0
    collapse_width: float | None = None
    lags: tuple | None = None
    r: float = 0.99
    b_max: float = 1e4
    backend: str | None = None
    threads: int | None = None
    out: str | None = None
    timestamp: bool = True
    verbose: int = 0

    def sde_config(self, t_end):
        return SdeConfig(dt=self.dt, t_end=t_end, n_traj=self.n_traj, seed=self.seed,
                         b_max=self.b_max, threads=self.threads, backend=self.backend)


# -- parsing --------------------------------------------------------------------------


def parse_lags(text, omega=1.0):
    """Comma-separated lags; ``pi``-tokens (``pi``, ``2pi``, ``pi/2``) are scaled by 1/omega."""
    lags = []
    for token in str(text).split(","):
        token = token.strip()
        if not token:
            continue
        m = _LAG_TOKEN.match(token.lower())
        if m:
            factor = float(m.group(1)) if m.group(1) else 1.0
            div = float(m.group(2)) if m.group(2) else 1.0
            if div == 0:
                raise ConfigError(f"--lags: division by zero in {token!r}")
            lags.append(factor * math.pi / div / omega)
            continue
        try:
            lags.append(float(token))
        except ValueError:
            raise ConfigError(f"--lags: cannot read {token!r} as a time") from None
    if not lags:
        raise ConfigError("--lags: no lags given")
    if any(not (math.isfinite(t) and t >= 0) for t in lags):
        raise ConfigError("--lags: lags must be finite and non-negative")
    return tuple(lags)


def read_config_file(path):
    """Parse a flat ``key = value`` file into a dict with hyphenated keys."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    values = {}
    for num, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in _FILE_KEYS:
            raise ConfigError(f"{path}:{num}: unknown key {key!r}")
        values[key] = value
    return values


_FILE_KEYS = {
    "preset", "mass", "omega", "hbar", "n-traj", "dt", "t-end", "seed", "collapse-width", "lags",
    "r", "b-max", "backend", "threads", "out", "timestamp", "verbose",
}


def _number(flag, value, kind=float):
    try:
        if kind is int:
            if isinstance(value, int) or re.fullmatch(r"\s*[-+]?\d+\s*", str(value)):
                return int(value)
            v = float(value)
            if not v.is_integer():
                raise ValueError
            return int(v)
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"--{flag}: expected a number, got {value!r}") from None


def _boolean(flag, value):
    if isinstance(value, bool):
        return value
    s = str(value).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"--{flag}: expected true or false, got {value!r}")


def _positive(flag, value):
    if not (math.isfinite(value) and value > 0):
        raise ConfigError(f"--{flag} must be positive, got {value!r}")
    return value


def resolve_config(args, environ=None) -> RunConfig:
    """Merge config file, flags and environment into a validated :class:`RunConfig`."""
    environ = os.environ if environ is None else environ
    merged = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key in _FILE_KEYS:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            merged[key] = value
    if "seed" not in merged and environ.get(SEED_ENV):
        merged["seed"] = environ[SEED_ENV]

    preset = merged.get("preset")
    if not preset:
        raise ConfigError("missing preset: give it as 'run <preset>' or 'preset = ...' in the file")
    if preset not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESET_NAMES)}")

    kw = {"preset": preset}
    for flag in ("mass", "omega", "hbar", "dt", "b-max"):
        if flag in merged:
            kw[flag.replace("-", "_")] = _positive(flag, _number(flag, merged[flag]))
    if "t-end" in merged:
        kw["t_end"] = _positive("t-end", _number("t-end", merged["t-end"]))
    if "collapse-width" in merged:
        kw["collapse_width"] = _positive("collapse-width", _number("collapse-width", merged["collapse-width"]))
    if "n-traj" in merged:
        n = _number("n-traj", merged["n-traj"], int)
        if n < 2:
            raise ConfigError("--n-traj must be at least 2")
        kw["n_traj"] = n
    if "seed" in merged:
        seed = _number("seed", merged["seed"], int)
        if not 0 <= seed < 2**64:
            raise ConfigError("--seed must lie in [0, 2**64)")
        kw["seed"] = seed
    if "threads" in merged:
        threads = _number("threads", merged["threads"], int)
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        kw["threads"] = threads
    if "r" in merged:
        r = _number("r", merged["r"])
        if not -1 < r < 1:
            raise ConfigError("--r must lie strictly between -1 and 1")
        kw["r"] = r
    if "backend" in merged:
        if merged["backend"] not in kernels.available_backends():
            raise ConfigError(f"--backend: {merged['backend']!r} is not available "
                              f"(have {', '.join(kernels.available_backends())})")
        kw["backend"] = merged["backend"]
    if "verbose" in merged:
        kw["verbose"] = _number("verbose", merged["verbose"], int)
    if "timestamp" in merged:
        kw["timestamp"] = _boolean("timestamp", merged["timestamp"])
    if "out" in merged:
        kw["out"] = str(merged["out"])
    if "lags" in merged:
        lags = merged["lags"]
        kw["lags"] = lags if isinstance(lags, tuple) else parse_lags(lags, kw.get("omega", 1.0))

    cfg = RunConfig(**kw)
    t_end = run_t_end(cfg)
    if cfg.dt >= t_end:
        raise ConfigError(f"--dt ({cfg.dt!r}) must be smaller than --t-end ({t_end!r})")
    if cfg.t_end is not None and cfg.t_end < max(build_preset(cfg).lags) - 1e-12:
        raise ConfigError(f"--t-end ({cfg.t_end!r}) is shorter than the largest lag")
    return cfg


def build_preset(cfg: RunConfig):
    return make_preset(cfg.preset, cfg.mass, cfg.omega, cfg.hbar, cfg.collapse_width, cfg.r, cfg.lags)


def run_t_end(cfg: RunConfig):
    return cfg.t_end if cfg.t_end is not None else build_preset(cfg).t_end


def canonical_config(cfg: RunConfig, preset=None):
    """``key=value`` pairs that determine the numbers of a run, in fixed order."""
    preset = build_preset(cfg) if preset is None else preset
    pairs = [
        ("preset", cfg.preset),
        ("mass", cfg.mass),
        ("omega", cfg.omega),
        ("hbar", cfg.hbar),
        ("n_traj", cfg.n_traj),
        ("dt", cfg.dt),
        ("t_end", run_t_end(cfg)),
        ("seed", cfg.seed),
        ("collapse_width", float(preset.params["w"])),
        ("lags", "|".join(repr(float(t)) for t in preset.lags)),
        ("b_max", cfg.b_max),
        ("backend", cfg.backend or kernels.BACKEND),
    ]
    if "r" in preset.params:
        pairs.append(("r", cfg.r))
    return ";".join(f"{k}={float(v)!r}" if isinstance(v, float) else f"{k}={v}" for k, v in pairs)


# -- output ---------------------------------------------------------------------------


def _fmt(value):
    return repr(float(value))


def render_csv(cfg: RunConfig, rows, preset=None, now=None):
    buf = io.StringIO()
    buf.write(f"# config: {canonical_config(cfg, preset)}\n")
    if cfg.timestamp:
        now = now or datetime.datetime.now(datetime.timezone.utc)
        buf.write(f"# generated: {now.isoformat(timespec='seconds')}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.t), _fmt(row.estimate), _fmt(row.stderr), _fmt(row.sm_reference),
                         _fmt(row.qm_reference_re), _fmt(row.qm_reference_im), _fmt(row.z_sm),
                         _fmt(row.z_qm), row.verdict])
    return buf.getvalue()


def write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def verdict_table(rows):
    head = f"{'t':>9} {'estimate':>11} {'stderr':>9} {'SM ref':>10} {'z_sm':>8} {'QM ref':>10} {'z_qm':>9}  {'vs SM':<5} {'vs QM':<5} verdict"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.t:9.4f} {r.estimate:11.5f} {r.stderr:9.2e} {r.sm_reference:10.5f} {r.z_sm:8.2f} "
                     f"{r.qm_reference_re:10.5f} {r.z_qm:9.2f}  {r.verdict_sm:<5} {r.verdict_qm:<5} {r.verdict}")
    return "\n".join(lines)


def discrepancy_summary(preset, rows):
    """One line on how far the ensemble sits from the quantum prediction at commuting times."""
    applicable = [r for r in rows if r.verdict_qm != "NA"]
    if not applicable:
        return None
    worst = max(applicable, key=lambda r: abs(r.estimate - r.qm_reference_re))
    gap = abs(worst.estimate - worst.qm_reference_re)
    if preset.qm_kind == "pair":
        what = "cross-correlator gap |E[X1(0)X2(t)] - C12 cos(omega t)|"
    else:
        what = "gap |E[X(0)X(t)] - QM|"
    state = "measured" if preset.collapse else "unmeasured"
    line = (f"{state} {what}: max {gap:.4g} at t={worst.t:.4g} "
            f"(|z|={abs(worst.z_qm):.1f}, verdict vs QM {worst.verdict_qm})")
    if preset.qm_kind == "pair":
        p = preset.params
        lags = np.array([r.t for r in rows])
        est = np.array([r.estimate for r in rows])
        free = sm_pair_unmeasured(p["sigma2"], p["r"], p["omega"], lags, p["hbar"] / p["mass"])
        i = int(np.argmax(np.abs(est - free)))
        line += (f"\nmeasured-vs-unmeasured discrepancy |E - E_unmeasured|: max {abs(est[i] - free[i]):.4g} "
                 f"at t={lags[i]:.4g}")
    return line


# -- commands -------------------------------------------------------------------------


def execute(cfg: RunConfig, stdout=None):
    """Run one experiment; returns ``(exit_code, csv_text, rows)``."""
    stdout = sys.stdout if stdout is None else stdout
    preset = build_preset(cfg)
    sde = cfg.sde_config(run_t_end(cfg))
    if cfg.verbose:
        print(f"running {preset.name}: {preset.description}", file=stdout)
        print(f"  n_traj={sde.n_traj} dt={sde.dt} t_end={sde.t_end} seed={sde.seed} "
              f"workers={sde.workers()} backend={cfg.backend or kernels.BACKEND}", file=stdout)
    ens = run_experiment(preset, sde, backend=cfg.backend)
    ens.raise_on_failure()
    rows = compare(correlation_report(ens, preset))
    text = render_csv(cfg, rows, preset)
    if cfg.out:
        write_text(cfg.out, text)
    print(verdict_table(rows), file=stdout)
    summary = discrepancy_summary(preset, rows)
    if summary:
        print(summary, file=stdout)
    if ens.total_clamped():
        print(f"note: drift clamped at |b| = {cfg.b_max:g} on {ens.total_clamped()} steps", file=stdout)
    ok = all_pass(rows)
    print(f"overall: {'PASS' if ok else 'FAIL'}", file=stdout)
    if cfg.out:
        print(f"wrote {cfg.out}", file=stdout)
    return (EXIT_OK if ok else EXIT_FAIL), text, rows


def cmd_run(args):
    try:
        cfg = resolve_config(args)
    except (ConfigError, ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        code, text, _ = execute(cfg)
    except TrajectoryAborted as exc:
        print(f"error: numerical abort in trajectory {exc.traj_id} at step {exc.step}: {exc}",
              file=sys.stderr)
        return EXIT_ABORT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not cfg.out:
        sys.stdout.write(text)
    return code


def cmd_list_presets(args):
    for name in PRESET_NAMES:
        p = make_preset(name)
        lags = ", ".join(f"{t:.4g}" for t in p.lags)
        print(f"{name:28s} {p.description}\n{'':28s} default lags: {lags}")
    return EXIT_OK


def cmd_check(args):
    from .invariants import run_invariant_suite

    results = run_invariant_suite(n_traj=args.n_traj, seed=args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(prog="nelson-lab", description="Stochastic-mechanics correlation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a preset and write its correlation report")
    run.add_argument("preset", nargs="?", help=f"one of: {', '.join(PRESET_NAMES)}")
    run.add_argument("--config", help="flat key = value file; flags override it")
    run.add_argument("--omega")
    run.add_argument("--mass")
    run.add_argument("--hbar")
    run.add_argument("--n-traj")
    run.add_argument("--dt")
    run.add_argument("--t-end", help="default: the largest lag")
    run.add_argument("--seed", help=f"default: ${SEED_ENV}, then 0")
    run.add_argument("--collapse-width", help="absolute width w; default 0.05 sigma")
    run.add_argument("--lags", help="comma list; pi-tokens like pi, 2pi, pi/2 are scaled by 1/omega")
    run.add_argument("--r", "--pair-correlation", dest="r", help="pair correlation (entangled presets)")
    run.add_argument("--b-max", help="drift clamp magnitude")
    run.add_argument("--backend", help="kernel backend: compiled or pure")
    run.add_argument("--threads", help="worker threads; results do not depend on it")
    run.add_argument("--out", help="CSV path; printed to stdout when omitted")
    run.add_argument("--no-timestamp", dest="timestamp", action="store_const", const=False, default=None)
    run.add_argument("-v", "--verbose", action="count", default=None)
    run.set_defaults(func=cmd_run)

    lst = sub.add_parser("list-presets", help="show the presets")
    lst.set_defaults(func=cmd_list_presets)

    chk = sub.add_parser("check", help="run the invariant suite")
    chk.add_argument("--n-traj", type=int, default=20_000, help="ensemble size for the density check")
    chk.add_argument("--seed", type=int, default=None)
    chk.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

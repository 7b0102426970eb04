"""Command line driver: ``rotorwave levels|static|dynamics|scaling``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort (norm
drift or top-shell leakage), 4 state-count guard exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_GUARD = 4


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


class Outputs:
    """Serialized writer for one run directory; every CSV carries the config hash."""

    def __init__(self, directory, config_hash):
        self.directory = directory
        self.config_hash = config_hash
        self.files = []

    def csv(self, name, header, rows):
        os.makedirs(self.directory, exist_ok=True)
        path = os.path.join(self.directory, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# config_sha256={self.config_hash}\r\n")
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.files.append(name)
        return path

    def trace(self, name, tr):
        rows = zip(tr.times.tolist(), tr.orientation.tolist(), tr.alignment.tolist())
        return self.csv(name, ["time_ps", "orientation", "alignment"], rows)

    def manifest(self, cfg, command, timings, warnings, extra=None):
        from . import __version__
        from .constants import CONSTANTS_VERSION, table
        os.makedirs(self.directory, exist_ok=True)
        doc = {
            "command": command,
            "config_sha256": self.config_hash,
            "config": cfg.as_dict(),
            "constants": table(),
            "constants_version": CONSTANTS_VERSION,
            "tool_version": __version__,
            "wall_time_s": sum(timings.values()),
            "stage_timings_s": timings,
            "warnings": warnings,
            "files": sorted(self.files),
        }
        if extra:
            doc.update(extra)
        path = os.path.join(self.directory, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


class _Timer:
    def __init__(self):
        self.timings = {}

    def stage(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = timer.timings.get(name, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


# ---------------------------------------------------------------------------
# commands


def cmd_levels(cfg, out, timer):
    from .analysis import linear_fit, loglog_fit
    from .constants import kT
    from .thermal import count_states, mean_energy, partition_function

    rc = cfg.rotor()
    Ts = list(cfg["levels.temperatures_K"])
    crit, thr = cfg["ensemble.count_criterion"], cfg["ensemble.count_threshold"]
    rows = []
    with timer.stage("levels"):
        counts = count_states(rc, Ts, cfg["ensemble.population_cutoff"], crit, thr, cfg["ensemble.jmax_ceiling"])
        for T, lc in zip(Ts, counts):
            Z = partition_function(rc, T, jmax_ceiling=max(cfg["ensemble.jmax_ceiling"], 200))
            E = mean_energy(rc, T, jmax_ceiling=max(cfg["ensemble.jmax_ceiling"], 200))
            rows.append((T, lc.N_E, Z, E, 1.5 * kT(T) - E))
    out.csv("levels.csv", ["temperature_K", "N_E", "Z", "mean_energy_cm1", "delta_classical_cm1"], rows)
    fits = []
    lo, hi = cfg["levels.fit_range_K"]
    sel = [r for r in rows if lo <= r[0] <= hi]
    if len(sel) >= 3:
        f = loglog_fit([r[0] for r in sel], [r[1] for r in sel])
        fits.append(("N_E_vs_T_loglog", f.slope, f.intercept, f.r_squared, len(sel)))
    lo, hi = cfg["levels.energy_fit_range_K"]
    sel = [r for r in rows if lo <= r[0] <= hi]
    if len(sel) >= 3:
        f = linear_fit([1.0 / r[0] for r in sel], [r[4] for r in sel])
        fits.append(("delta_vs_inverse_T", f.slope, f.intercept, f.r_squared, len(sel)))
    out.csv("levels_fit.csv", ["quantity", "slope", "intercept", "r_squared", "n_points"], fits)
    return {}


def cmd_static(cfg, out, timer):
    import numpy as np

    from .rpwf import StaticOperators, static_realizations, static_thermal
    from .thermal import boltzmann_ensemble, thermal_energy

    rc = cfg.rotor()
    N, B, seed = cfg["rpwf.n_realizations"], cfg["rpwf.batches"], cfg["rpwf.master_seed"]
    exact_rows, batch_rows = [], []
    for T in cfg["static.temperatures_K"]:
        with timer.stage(f"static_T{T:g}"):
            ens = boltzmann_ensemble(rc, T, cfg["ensemble.population_cutoff"], cfg["ensemble.jmax_ceiling"])
            c1, c2 = static_thermal(ens)
            E = thermal_energy(ens)
            exact_rows.append((T, ens.n_states, c1, c2, E, ens.discarded_population))
            if N > 0:
                ops = StaticOperators(ens)
                e1, e2, en = static_realizations(ens, seed, np.arange(B * N), ops)
                for b in range(B):
                    s = slice(b * N, (b + 1) * N)
                    batch_rows.append((T, b, N, float(e1[s].mean()), float(e2[s].mean()), float(en[s].mean()),
                                       float(np.max(np.abs(en[s] - E)))))
    out.csv("static_exact.csv", ["temperature_K", "n_states", "orientation", "alignment", "energy_cm1",
                                 "discarded_population"], exact_rows)
    out.csv("static_rpwf.csv", ["temperature_K", "batch", "N_r", "orientation", "alignment", "energy_cm1",
                                "max_abs_energy_deviation_cm1"], batch_rows)
    return {}


def cmd_dynamics(cfg, out, timer):
    import numpy as np

    from .analysis import baseline_flatness, error_epsilon, peak_abs
    from .dynamics import RpwfSet, ensemble_dynamics, exact_ensemble_run, rpwf_direct
    from .thermal import boltzmann_ensemble

    rc = cfg.rotor()
    pulse = cfg.pulse()
    pc = cfg.propagation()
    T = cfg["ensemble.temperature_K"]
    N, seed, mode = cfg["rpwf.n_realizations"], cfg["rpwf.master_seed"], cfg["rpwf.mode"]
    with timer.stage("ensemble"):
        ens = boltzmann_ensemble(rc, T, cfg["ensemble.population_cutoff"], cfg["ensemble.jmax_ceiling"])
    run_exact = cfg["dynamics.run_exact"]
    exact = rp = None
    extra = {"n_states": ens.n_states, "peak_field_MV_cm": pulse.E0, "peak_field_realized_MV_cm": pulse.realized_peak()}
    fits_exact = ens.n_states <= pc.max_exact_states
    if mode == "auto":
        mode = "superposition" if fits_exact and (run_exact or N > 0) else "direct"
    if mode == "superposition" and (run_exact or N > 0):
        sets = [RpwfSet(seed, np.arange(N))] if N > 0 else []
        with timer.stage("propagation"):
            dyn = ensemble_dynamics(ens, pulse, pc, sets)
        exact = dyn.exact if run_exact else None
        rp = dyn.rpwf[0] if sets else None
        extra["diagnostics"] = _json_safe(dyn.diagnostics)
    else:
        if run_exact:
            with timer.stage("exact"):
                exact = exact_ensemble_run(ens, pulse, pc)
        if N > 0:
            with timer.stage("rpwf"):
                rp = rpwf_direct(ens, pulse, pc, seed, np.arange(N)).trace
    if exact is not None:
        out.trace("trace_exact.csv", exact)
    if rp is not None:
        out.trace("trace_rpwf.csv", rp)
    if exact is not None and rp is not None:
        T_rev, t0 = cfg["dynamics.T_rev_ps"], cfg["dynamics.epsilon_start_ps"]
        eps_o = error_epsilon(rp, exact, T_rev, t0)
        eps_a = error_epsilon(rp, exact, T_rev, t0, observable="alignment")
        out.csv("epsilon.csv", ["temperature_K", "N_r", "seed", "T_rev_ps", "epsilon_orientation", "epsilon_alignment"],
                [(T, N, seed, T_rev, eps_o, eps_a)])
    flat = cfg["dynamics.flatness_windows_ps"]
    if flat:
        windows = list(zip(flat[::2], flat[1::2]))
        rows = [(name, baseline_flatness(tr, windows), peak_abs(tr, t_lo=pulse.t_center))
                for name, tr in (("exact", exact), ("rpwf", rp)) if tr is not None]
        out.csv("flatness.csv", ["trace", "baseline_flatness", "peak_abs_orientation"], rows)
    return extra


def cmd_scaling(cfg, out, timer):
    import numpy as np

    from .analysis import error_epsilon, loglog_fit, static_error_scan
    from .dynamics import RpwfSet, ensemble_dynamics
    from .thermal import boltzmann_ensemble

    rc = cfg.rotor()
    seed = cfg["rpwf.master_seed"]
    with timer.stage("static_scan"):
        scan = static_error_scan(rc, cfg["scaling.temperatures_K"], cfg["scaling.n_realizations"],
                                 cfg["rpwf.batches"], seed, cfg["ensemble.population_cutoff"],
                                 cfg["ensemble.jmax_ceiling"])
    out.csv("scaling_static.csv",
            ["temperature_K", "N_r", "batches", "n_states", "inv_mean_sq_err_orientation", "mean_inv_sq_err_orientation",
             "inv_mean_sq_err_alignment", "mean_inv_sq_err_alignment"],
            [(r.temperature, r.N_r, r.batches, r.n_states, r.inv_mean_sq_orientation, r.mean_inv_sq_orientation,
              r.inv_mean_sq_alignment, r.mean_inv_sq_alignment) for r in scan.rows])
    fit_rows = []
    for T in cfg["scaling.temperatures_K"]:
        if T in scan.alpha_orientation:
            fit_rows.append(("alpha_orientation_vs_N_r", T, scan.alpha_orientation[T], "", scan.linearity_r2_orientation[T]))
            fit_rows.append(("alpha_alignment_vs_N_r", T, scan.alpha_alignment[T], "", scan.linearity_r2_alignment[T]))
    for name, f in (("ln_alpha_orientation_vs_ln_T", scan.temperature_fit_orientation),
                    ("ln_alpha_alignment_vs_ln_T", scan.temperature_fit_alignment)):
        if f is not None:
            fit_rows.append((name, "", f.slope, f.intercept, f.r_squared))
    out.csv("scaling_static_fits.csv", ["quantity", "temperature_K", "slope", "intercept", "r_squared"], fit_rows)

    if not cfg["scaling.dynamic"]:
        return {}
    pulse = cfg.pulse()
    pc = cfg.propagation()
    n_list = sorted(cfg["scaling.dynamic_n_realizations"])
    n_fix = cfg["scaling.dynamic_fixed_n_realizations"]
    n_all = sorted(set(n_list) | {n_fix})
    seeds = [seed + i for i in range(cfg["scaling.dynamic_seeds"])]
    T_rev, t0 = cfg["dynamics.T_rev_ps"], cfg["dynamics.epsilon_start_ps"]
    eps_rows, dyn_fits = [], []
    mean_eps = {}
    for T in cfg["scaling.dynamic_temperatures_K"]:
        with timer.stage(f"dynamic_T{T:g}"):
            ens = boltzmann_ensemble(rc, T, cfg["ensemble.population_cutoff"], cfg["ensemble.jmax_ceiling"])
            sets = [RpwfSet(s, np.arange(n)) for s in seeds for n in n_all]
            dyn = ensemble_dynamics(ens, pulse, pc, sets)
        per_n = {}
        for s, tr in zip(sets, dyn.rpwf):
            e = error_epsilon(tr, dyn.exact, T_rev, t0)
            per_n.setdefault(s.N_r, []).append(e)
            eps_rows.append((T, s.N_r, s.master_seed, e))
        for n in n_all:
            mean_eps[(T, n)] = float(np.mean(per_n[n]))
        if len(n_list) >= 3:
            f = loglog_fit(n_list, [mean_eps[(T, n)] for n in n_list])
            dyn_fits.append(("epsilon_vs_N_r_loglog", T, "", f.slope, f.intercept, f.r_squared))
    Ts = cfg["scaling.dynamic_temperatures_K"]
    if len(Ts) >= 3:
        f = loglog_fit(Ts, [mean_eps[(T, n_fix)] for T in Ts])
        dyn_fits.append(("epsilon_vs_T_loglog", "", n_fix, f.slope, f.intercept, f.r_squared))
    out.csv("scaling_dynamic.csv", ["temperature_K", "N_r", "seed", "epsilon_orientation"], eps_rows)
    out.csv("scaling_dynamic_fits.csv", ["quantity", "temperature_K", "N_r", "slope", "intercept", "r_squared"], dyn_fits)
    return {}


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "orientation"):
        return None
    return obj


COMMANDS = {"levels": cmd_levels, "static": cmd_static, "dynamics": cmd_dynamics, "scaling": cmd_scaling}


def _parser():
    p = argparse.ArgumentParser(prog="rotorwave", description="THz-driven asymmetric-top rotational dynamics")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="flat 'section.key = value' config file")
    p.add_argument("--seed", type=int, default=None, help="override rpwf.master_seed (unsigned 64-bit)")
    p.add_argument("--out", default=None, help="override output.directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: $ROTORWAVE_THREADS)")
    return p


def _set_threads(n):
    # must run before numpy is imported to take effect
    if n is None:
        env = os.environ.get("ROTORWAVE_THREADS")
        n = int(env) if env and env.strip().isdigit() else None
    if n is None:
        return None
    if n < 1:
        raise ValueError("threads must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    return n


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        threads = _set_threads(args.threads)
    except ValueError as err:
        print(f"rotorwave: --threads: {err}", file=sys.stderr)
        return EXIT_CONFIG

    from .config import ConfigError, load_config
    from .dynamics import GuardError, PropagationError

    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["rpwf.master_seed"] = args.seed
        if args.out is not None:
            overrides["output.directory"] = args.out
        if overrides:
            cfg = cfg.with_overrides(overrides)
        # build the physics objects once so that every validation error surfaces before any output
        cfg.rotor()
        cfg.pulse()
        cfg.propagation()
    except ConfigError as err:
        print(f"rotorwave: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"rotorwave: cannot read config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:
        print(f"rotorwave: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    out = Outputs(cfg["output.directory"], cfg.hash())
    timer = _Timer()
    warnings = []
    try:
        extra = COMMANDS[args.command](cfg, out, timer) or {}
    except GuardError as err:
        print(f"rotorwave: guard exceeded: {err}", file=sys.stderr)
        return EXIT_GUARD
    except PropagationError as err:
        print(f"rotorwave: numerical abort ({err.kind}): {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    extra["threads"] = threads
    diag = extra.get("diagnostics") or {}
    if diag.get("leakage", 0.0) > 0.01 * cfg["propagation.leakage_tolerance"]:
        warnings.append(f"top-shell population {diag['leakage']:.3e} is within 100x of the tolerance")
    out.manifest(cfg, args.command, timer.timings, warnings, extra)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

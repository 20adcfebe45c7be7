"""Command-line interface: run simulations, persist runs, analyze them.

Run directories are plain files with frozen layouts (column orders are part
of the interface; floats are written with repr() so re-parsing recovers the
exact float64 bits):

  config.txt        resolved configuration, one ``key = value`` per line
  moments.csv       t, tau, n, u_1..u_d, T, m1, m3,
                    sigma_n, sigma_T, sigma_m1, sigma_E, count
  coefficients.csv  tau, a, b, A, B, Bv_1..Bv_d, stderr_a, stderr_b
  snapshots.csv     snapshot, t, tau, count, n, T, entropy, sigma_entropy,
                    exp_weight, exp_moment, sigma_exp_moment, m_<s>...
  histograms.csv    snapshot, t, tau, bin, r_mid, density, stderr
  batch_moments.csv snapshot, batch, m_<s>...
  profile.csv       r_mid, density, stderr
  meta.json         termination reason and event counters
  checkpoint.bin    final simulation state (resume / exact-replay)

Exit codes: 0 success (and all requested checks passed), 1 a check failed,
2 configuration or usage error, 3 runtime failure.
"""

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields as dc_fields

import numpy as np

from . import diagnostics
from . import dsmc
from . import profile as profile_mod
from .collision import (
    alpha_star,
    maxwellian_coefficients,
    povzner_rho,
    povzner_rho_closed,
)
from .core import (
    CoefficientSet,
    ConfigError,
    MomentRecord,
    MomentSigma,
    RadialHistogram,
    SimConfig,
    Snapshot,
    Trajectory,
)
from .rescale import reconstruct_moments

THREADS_ENV = "ANNIHILATION_KINETICS_THREADS"

_CONFIG_HELP = {
    "dim": "velocity-space dimension (>= 2)",
    "alpha": "annihilation probability per accepted collision, in [0, 1)",
    "particles": "initial simulation particle count",
    "seed": "master RNG seed (splits into ic / collision / analysis streams)",
    "shards": "collision RNG stream count (fixed per run; part of the seed identity)",
    "ic": "initial condition: maxwellian | uniform_ball | bimodal | anisotropic",
    "n0": "initial number density",
    "T0": "initial temperature",
    "u0": "initial bulk velocity, comma-separated; empty = rest frame",
    "bimodal_temp_ratio": "bimodal ic: hot/cold temperature ratio",
    "bimodal_mass_split": "bimodal ic: mass fraction in the hot component",
    "anisotropy_ratio": "anisotropic ic: first-axis temperature over the others",
    "dt_policy": "accepted-target (adaptive) | fixed",
    "dt_fixed": "step size under the fixed policy",
    "accepted_fraction": "accepted-target policy: accepted pairs per step / count",
    "majorant_pad": "additive pad on the relative-speed majorant",
    "t_end": "stop when t reaches this",
    "tau_end": "stop when rescaled time tau reaches this",
    "max_steps": "stop after this many steps",
    "n_floor_fraction": "stop when density falls to this fraction of n0 (0 = off)",
    "min_particles": "stop when fewer particles than this survive",
    "record_interval": "steps between moment records",
    "snapshot_tau_interval": "tau spacing of rescaled-frame snapshots",
    "batches": "batch count for batch-means error bars (2..255)",
    "hist_bins": "radial histogram bin count",
    "hist_rmax": "radial histogram upper edge",
    "tail_weight": "exponent a of the exp(a|xi|) tail moment",
    "pair_samples": "pair budget for coefficient estimation (exact below it)",
    "moment_grid_max": "half-integer moment table covers [0, this]",
    "checkpoint_interval": "steps between mid-run checkpoints (0 = final only)",
}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _field_types():
    return {f.name: f.type for f in dc_fields(SimConfig)}


def _parse_value(name, text):
    types = _field_types()
    if name not in types:
        raise ConfigError("unknown config key %r" % name)
    text = text.strip()
    if name == "u0":
        if not text:
            return ()
        return tuple(float(x) for x in text.split(","))
    ftype = types[name]
    try:
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError("bad value for %s: %s" % (name, exc)) from None
    return text


def _format_value(name, value):
    if name == "u0":
        return ",".join(repr(float(x)) for x in value)
    if isinstance(value, bool):  # pragma: no cover - no bool fields today
        return str(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path):
    """Parse a ``key = value`` config file (#-comments, blank lines ok)."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("%s:%d: expected key = value" % (path, lineno))
            key, text = line.split("=", 1)
            key = key.strip()
            out[key] = _parse_value(key, text)
    return out


def parse_overrides(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError("override %r is not of the form key=value" % pair)
        key, text = pair.split("=", 1)
        key = key.strip()
        out[key] = _parse_value(key, text)
    return out


def build_config(args):
    """Defaults <- config file <- key=value overrides <- --seed/--shards."""
    data = SimConfig().as_dict()
    if getattr(args, "config", None):
        data.update(read_config_file(args.config))
    data.update(parse_overrides(getattr(args, "overrides", []) or []))
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "shards", None) is not None:
        data["shards"] = args.shards
    cfg = SimConfig.from_dict(data)
    cfg.validate()
    return cfg


def config_help():
    lines = ["configuration keys (key=value on the command line or in --config):", ""]
    defaults = SimConfig()
    for f in dc_fields(SimConfig):
        default = _format_value(f.name, getattr(defaults, f.name))
        lines.append("  %-22s %-8s default %-12s %s"
                     % (f.name, f.type.__name__, default or "''",
                        _CONFIG_HELP.get(f.name, "")))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run directory writer / reader
# ---------------------------------------------------------------------------

def _r(x):
    return repr(float(x))


def _moment_columns(grid):
    return ["m_%s" % repr(float(s)) for s in grid]


def write_run(out_dir, traj, state=None):
    """Persist a Trajectory (and final state) to a run directory."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = traj.config
    d = cfg.dim

    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        for key, val in cfg.as_dict().items():
            f.write("%s = %s\n" % (key, _format_value(key, tuple(val) if key == "u0" else val)))

    weight = cfg.n0 / cfg.particles
    with open(os.path.join(out_dir, "moments.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["t", "tau", "n"] + ["u_%d" % (i + 1) for i in range(d)]
                   + ["T", "m1", "m3", "sigma_n", "sigma_T", "sigma_m1",
                      "sigma_E", "count"])
        for rec, sig in zip(traj.records, traj.record_sigmas):
            w.writerow([_r(rec.t), _r(rec.tau), _r(rec.n)]
                       + [_r(u) for u in rec.u]
                       + [_r(rec.T), _r(rec.m1), _r(rec.m3), _r(sig.n),
                          _r(sig.T), _r(sig.m1), _r(sig.E),
                          str(int(round(rec.n / weight)))])

    with open(os.path.join(out_dir, "coefficients.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["tau", "a", "b", "A", "B"]
                   + ["Bv_%d" % (i + 1) for i in range(d)]
                   + ["stderr_a", "stderr_b"])
        for s in traj.snapshots:
            c = s.coeffs
            w.writerow([_r(s.tau), _r(c.a), _r(c.b), _r(c.A), _r(c.B)]
                       + [_r(x) for x in c.Bv]
                       + [_r(c.stderr_a), _r(c.stderr_b)])

    if traj.snapshots:
        grid = traj.snapshots[0].moment_grid
        mcols = _moment_columns(grid)
        with open(os.path.join(out_dir, "snapshots.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["snapshot", "t", "tau", "count", "n", "T", "entropy",
                        "sigma_entropy", "exp_weight", "exp_moment",
                        "sigma_exp_moment"] + mcols)
            for k, s in enumerate(traj.snapshots):
                w.writerow([str(k), _r(s.t), _r(s.tau), str(s.count), _r(s.n),
                            _r(s.T), _r(s.entropy), _r(s.entropy_sigma),
                            _r(s.exp_weight), _r(s.exp_moment),
                            _r(s.exp_moment_sigma)]
                           + [_r(m) for m in s.moments])

        with open(os.path.join(out_dir, "histograms.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["snapshot", "t", "tau", "bin", "r_mid", "density", "stderr"])
            for k, s in enumerate(traj.snapshots):
                r_mid = s.hist.r_mid
                err = s.hist.stderr
                for b in range(s.hist.density.size):
                    w.writerow([str(k), _r(s.t), _r(s.tau), str(b), _r(r_mid[b]),
                                _r(s.hist.density[b]),
                                _r(err[b] if err is not None else 0.0)])

        with open(os.path.join(out_dir, "batch_moments.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["snapshot", "batch"] + mcols)
            for k, s in enumerate(traj.snapshots):
                for b in range(s.batch_moments.shape[0]):
                    w.writerow([str(k), str(b)]
                               + [_r(m) for m in s.batch_moments[b]])

        try:
            prof = profile_mod.extract_profile(traj.snapshots)
        except ValueError:
            prof = None
        if prof is not None:
            write_profile_csv(os.path.join(out_dir, "profile.csv"), prof)

    meta = {"termination": traj.termination, "steps": traj.steps,
            "collisions": traj.collisions, "annihilations": traj.annihilations,
            "have_numba": dsmc.HAVE_NUMBA}
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")

    if state is not None:
        dsmc.save_checkpoint(state, os.path.join(out_dir, "checkpoint.bin"))


def write_profile_csv(path, hist):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["r_mid", "density", "stderr"])
        err = hist.stderr if hist.stderr is not None else np.zeros_like(hist.density)
        for r, rho, e in zip(hist.r_mid, hist.density, err):
            w.writerow([_r(r), _r(rho), _r(e)])


def _read_csv(path):
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [row for row in reader]
    return header, rows


def load_run(out_dir):
    """Rebuild a Trajectory from a run directory written by write_run.

    Floats round-trip exactly (repr writing), so analyses over a loaded run
    agree bit for bit with analyses over the in-memory trajectory.
    """
    cfg = SimConfig.from_dict(
        {**SimConfig().as_dict(), **read_config_file(os.path.join(out_dir, "config.txt"))})
    d = cfg.dim
    traj = Trajectory(config=cfg)

    header, rows = _read_csv(os.path.join(out_dir, "moments.csv"))
    col = {name: k for k, name in enumerate(header)}
    for row in rows:
        u = np.array([float(row[col["u_%d" % (i + 1)]]) for i in range(d)])
        traj.records.append(MomentRecord(
            t=float(row[col["t"]]), tau=float(row[col["tau"]]),
            n=float(row[col["n"]]), u=u, T=float(row[col["T"]]),
            m1=float(row[col["m1"]]), m3=float(row[col["m3"]])))
        traj.record_sigmas.append(MomentSigma(
            n=float(row[col["sigma_n"]]), T=float(row[col["sigma_T"]]),
            m1=float(row[col["sigma_m1"]]), E=float(row[col["sigma_E"]])))

    snap_path = os.path.join(out_dir, "snapshots.csv")
    if os.path.exists(snap_path):
        header, rows = _read_csv(snap_path)
        col = {name: k for k, name in enumerate(header)}
        mcols = [name for name in header if name.startswith("m_")]
        grid = np.array([float(name[2:]) for name in mcols])

        hheader, hrows = _read_csv(os.path.join(out_dir, "histograms.csv"))
        hcol = {name: k for k, name in enumerate(hheader)}
        edges = np.linspace(0.0, cfg.hist_rmax, cfg.hist_bins + 1)
        dens = {}
        errs = {}
        for row in hrows:
            k = int(row[hcol["snapshot"]])
            dens.setdefault(k, []).append(float(row[hcol["density"]]))
            errs.setdefault(k, []).append(float(row[hcol["stderr"]]))

        cheader, crows = _read_csv(os.path.join(out_dir, "coefficients.csv"))
        ccol = {name: k for k, name in enumerate(cheader)}

        bheader, brows = _read_csv(os.path.join(out_dir, "batch_moments.csv"))
        bcol = {name: k for k, name in enumerate(bheader)}
        batches = {}
        for row in brows:
            k = int(row[bcol["snapshot"]])
            batches.setdefault(k, []).append(
                [float(row[bcol[name]]) for name in mcols])

        for k, row in enumerate(rows):
            crow = crows[k]
            coeffs = CoefficientSet(
                A=float(crow[ccol["A"]]), B=float(crow[ccol["B"]]),
                Bv=np.array([float(crow[ccol["Bv_%d" % (i + 1)]]) for i in range(d)]),
                a=float(crow[ccol["a"]]), b=float(crow[ccol["b"]]),
                alpha=cfg.alpha,
                stderr_a=float(crow[ccol["stderr_a"]]),
                stderr_b=float(crow[ccol["stderr_b"]]))
            hist = RadialHistogram(dim=d, edges=edges,
                                   density=np.array(dens[k]),
                                   stderr=np.array(errs[k]))
            traj.snapshots.append(Snapshot(
                t=float(row[col["t"]]), tau=float(row[col["tau"]]),
                count=int(row[col["count"]]), n=float(row[col["n"]]),
                T=float(row[col["T"]]), hist=hist, coeffs=coeffs,
                entropy=float(row[col["entropy"]]),
                entropy_sigma=float(row[col["sigma_entropy"]]),
                exp_weight=float(row[col["exp_weight"]]),
                exp_moment=float(row[col["exp_moment"]]),
                exp_moment_sigma=float(row[col["sigma_exp_moment"]]),
                moment_grid=grid,
                moments=np.array([float(row[col[name]]) for name in mcols]),
                batch_moments=np.array(batches[k])))

    meta_path = os.path.join(out_dir, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        traj.termination = meta.get("termination", "")
        traj.steps = meta.get("steps", 0)
        traj.collisions = meta.get("collisions", 0)
        traj.annihilations = meta.get("annihilations", 0)
    return traj


# ---------------------------------------------------------------------------
# SVG plotting (self-contained; no plotting dependency)
# ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _axis_ticks(lo, hi, log):
    if log:
        first = math.ceil(lo - 1e-9)
        last = math.floor(hi + 1e-9)
        if last >= first:
            return [(v, "1e%d" % v) for v in range(first, last + 1)]
        return [(lo, "%.3g" % 10 ** lo), (hi, "%.3g" % 10 ** hi)]
    ticks = np.linspace(lo, hi, 5)
    return [(v, "%.3g" % v) for v in ticks]


def svg_plot(path, series, title, xlabel, ylabel, logx=False, logy=False):
    """Write a minimal line plot; series is a list of (name, x, y)."""
    width, height = 720, 480
    ml, mr, mt, mb = 72, 24, 40, 52
    pts = []
    for _, x, y in series:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        keep = np.isfinite(x) & np.isfinite(y)
        if logx:
            keep &= x > 0
        if logy:
            keep &= y > 0
        x, y = x[keep], y[keep]
        pts.append((np.log10(x) if logx else x, np.log10(y) if logy else y))
    xs = np.concatenate([p[0] for p in pts if p[0].size])
    ys = np.concatenate([p[1] for p in pts if p[1].size])
    if xs.size == 0:
        raise ValueError("nothing to plot")
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    padx, pady = 0.03 * (x1 - x0), 0.06 * (y1 - y0)
    x0, x1, y0, y1 = x0 - padx, x1 + padx, y0 - pady, y1 + pady

    def px(v):
        return ml + (v - x0) / (x1 - x0) * (width - ml - mr)

    def py(v):
        return height - mb - (v - y0) / (y1 - y0) * (height - mt - mb)

    out = ['<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
           'font-family="sans-serif" font-size="12">' % (width, height),
           '<rect width="%d" height="%d" fill="white"/>' % (width, height),
           '<text x="%d" y="24" font-size="15" text-anchor="middle">%s</text>'
           % (width // 2, title)]
    for v, lab in _axis_ticks(x0, x1, logx):
        out.append('<line x1="%.1f" y1="%d" x2="%.1f" y2="%d" stroke="#ddd"/>'
                   % (px(v), mt, px(v), height - mb))
        out.append('<text x="%.1f" y="%d" text-anchor="middle">%s</text>'
                   % (px(v), height - mb + 16, lab))
    for v, lab in _axis_ticks(y0, y1, logy):
        out.append('<line x1="%d" y1="%.1f" x2="%d" y2="%.1f" stroke="#ddd"/>'
                   % (ml, py(v), width - mr, py(v)))
        out.append('<text x="%d" y="%.1f" text-anchor="end">%s</text>'
                   % (ml - 6, py(v) + 4, lab))
    out.append('<rect x="%d" y="%d" width="%d" height="%d" fill="none" stroke="#333"/>'
               % (ml, mt, width - ml - mr, height - mt - mb))
    out.append('<text x="%d" y="%d" text-anchor="middle">%s</text>'
               % (width // 2, height - 12, xlabel))
    out.append('<text x="16" y="%d" text-anchor="middle" transform="rotate(-90 16 %d)">%s</text>'
               % (height // 2, height // 2, ylabel))
    for k, ((name, _, _), (xv, yv)) in enumerate(zip(series, pts)):
        color = _COLORS[k % len(_COLORS)]
        coords = " ".join("%.2f,%.2f" % (px(a), py(b)) for a, b in zip(xv, yv))
        out.append('<polyline points="%s" fill="none" stroke="%s" stroke-width="1.5"/>'
                   % (coords, color))
        out.append('<text x="%d" y="%d" fill="%s">%s</text>'
                   % (width - mr - 150, mt + 18 + 16 * k, color, name))
    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _simulate_svgs(out_dir, traj):
    recs = traj.records
    t = np.array([r.t for r in recs])
    n = np.array([r.n for r in recs])
    temp = np.array([r.T for r in recs])
    svg_plot(os.path.join(out_dir, "moments.svg"),
             [("density n(t)", t, n), ("temperature T(t)", t, temp)],
             "moment decay", "t", "n, T", logx=True, logy=True)
    if traj.snapshots:
        last = traj.snapshots[-1]
        ref = profile_mod.binned_maxwellian(last.hist.dim, last.hist.edges)
        svg_plot(os.path.join(out_dir, "profile.svg"),
                 [("rescaled profile", last.hist.r_mid, last.hist.density),
                  ("gaussian", last.hist.r_mid, ref)],
                 "rescaled velocity profile (tau = %.2f)" % last.tau,
                 "|xi|", "density")


def cmd_simulate(args):
    cfg = build_config(args)
    out_dir = args.out_dir
    state = dsmc.init_state(cfg)
    ckpt = os.path.join(out_dir, "checkpoint.bin") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    traj = dsmc.run(state=state, checkpoint_path=ckpt)
    if out_dir:
        write_run(out_dir, traj, state=state)
        if args.svg:
            _simulate_svgs(out_dir, traj)
    last = traj.records[-1]
    print("terminated: %s after %d steps (%d collisions, %d annihilated)"
          % (traj.termination, traj.steps, traj.collisions, traj.annihilations))
    print("final: t = %.6g, tau = %.6g, n = %.6g, T = %.6g, count = %d"
          % (last.t, last.tau, last.n, last.T, state.count))
    if out_dir:
        print("run written to %s" % out_dir)
    return 0


_RESUMABLE = {"t_end", "tau_end", "max_steps", "n_floor_fraction",
              "min_particles", "record_interval", "snapshot_tau_interval",
              "checkpoint_interval"}


def cmd_resume(args):
    state = dsmc.load_checkpoint(args.checkpoint)
    overrides = parse_overrides(args.overrides or [])
    bad = set(overrides) - _RESUMABLE
    if bad:
        raise ConfigError("cannot change %s on resume (allowed: %s)"
                          % (", ".join(sorted(bad)), ", ".join(sorted(_RESUMABLE))))
    dsmc.resume_config(state, **overrides)
    out_dir = args.out_dir
    ckpt = os.path.join(out_dir, "checkpoint.bin") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    traj = dsmc.run(state=state, checkpoint_path=ckpt)
    if out_dir:
        write_run(out_dir, traj, state=state)
        if args.svg and traj.records:
            _simulate_svgs(out_dir, traj)
    print("resumed run terminated: %s at t = %.6g (steps %d)"
          % (traj.termination, state.t, state.steps))
    if out_dir:
        print("post-resume records written to %s" % out_dir)
    return 0


def cmd_rates(args):
    traj = load_run(args.out_dir)
    cfg = traj.config
    d = cfg.dim
    t = np.array([r.t for r in traj.records])
    n = np.array([r.n for r in traj.records])
    temp = np.array([r.T for r in traj.records])
    window = None
    if args.window:
        lo, hi = (float(x) for x in args.window.split(","))
        window = (lo, hi)
    fit_n = diagnostics.fit_power_law(t, n, window=window)
    fit_t = diagnostics.fit_power_law(t, temp, window=window)

    limit_n = -4.0 * d / (4.0 * d + 1.0)
    limit_t = -2.0 / (4.0 * d + 1.0)

    prof = profile_mod.extract_profile(traj.snapshots, burn_in_tau=args.burn_in_tau)
    coeffs = profile_mod.profile_coefficients(prof, cfg.alpha)
    pred = profile_mod.predicted_rates(coeffs)

    rows = [
        ("density", fit_n["slope"], fit_n["stderr"], -pred["density_exp"],
         limit_n, args.tol_density, args.tol_profile),
        ("temperature", fit_t["slope"], fit_t["stderr"], -pred["temperature_exp"],
         limit_t, args.tol_temperature, args.tol_profile),
    ]
    print("fit window: t in [%.4g, %.4g] (%d / %d points)"
          % (fit_n["window"][0], fit_n["window"][1], fit_n["npoints"], t.size))
    print("profile coefficients: a = %.6f, b = %.6f (alpha = %g)"
          % (coeffs.a, coeffs.b, cfg.alpha))
    print("%-12s %10s %8s %10s %10s  %s" % ("quantity", "measured", "stderr",
                                            "profile", "universal", "verdict"))
    ok = True
    for name, slope, err, prof_pred, limit, tol_lim, tol_prof in rows:
        pass_lim = abs(slope - limit) <= tol_lim
        pass_prof = abs(slope - prof_pred) <= tol_prof
        ok &= pass_lim and pass_prof
        verdict = "PASS" if (pass_lim and pass_prof) else \
            "FAIL (|d-universal| = %.3f vs %.3f, |d-profile| = %.3f vs %.3f)" \
            % (abs(slope - limit), tol_lim, abs(slope - prof_pred), tol_prof)
        print("%-12s %10.4f %8.4f %10.4f %10.4f  %s"
              % (name, slope, err, prof_pred, limit, verdict))
    print("tau growth prefactor (from profile): %.4f" % pred["tau_prefactor"])
    return 0 if ok else 1


def _sweep_worker(cfg_dict):
    cfg = SimConfig.from_dict(cfg_dict)
    traj = dsmc.run(config=cfg)
    taus = [s.tau for s in traj.snapshots]
    dists = [profile_mod.profile_distance(s.hist, "maxwellian")
             for s in traj.snapshots]
    return {"alpha": cfg.alpha, "seed": cfg.seed, "taus": taus,
            "dists": dists, "termination": traj.termination}


def sweep_seeds(master_seed, k):
    """Per-run seeds for a k-point sweep: spawn k children off the master
    seed sequence and take one 64-bit word from each.  Documented so sweeps
    are reproducible from (master seed, alpha list order) alone."""
    children = np.random.SeedSequence(master_seed).spawn(k)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def cmd_sweep(args):
    alphas = [float(x) for x in args.alphas.split(",")]
    if len(alphas) < 2 or len(set(alphas)) < 2:
        raise ConfigError("sweep needs at least two distinct alpha values "
                          "(got %r); a single-point sweep cannot compare rates"
                          % args.alphas)
    base = build_config(args)
    seeds = sweep_seeds(base.seed, len(alphas))
    payloads = []
    for alpha, seed in zip(alphas, seeds):
        data = base.as_dict()
        data["alpha"] = alpha
        data["seed"] = seed
        cfg = SimConfig.from_dict(data)
        cfg.validate()
        payloads.append(cfg.as_dict())

    workers = min(len(alphas), os.cpu_count() or 1)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            workers = max(1, min(workers, int(env)))
        except ValueError:
            print("warning: ignoring non-integer %s=%r" % (THREADS_ENV, env),
                  file=sys.stderr)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker, payloads))
    else:
        results = [_sweep_worker(p) for p in payloads]

    out_dir = args.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="",
                  encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["alpha", "snapshot", "tau", "distance"])
            for res in results:
                for k, (tau, dist) in enumerate(zip(res["taus"], res["dists"])):
                    w.writerow([_r(res["alpha"]), str(k), _r(tau), _r(dist)])

    fits = []
    ok = True
    for res in results:
        try:
            fit = diagnostics.fit_exp_decay(np.array(res["taus"]),
                                            np.array(res["dists"]))
        except ValueError as exc:
            print("alpha = %g: fit failed (%s)" % (res["alpha"], exc))
            ok = False
            continue
        fits.append((res["alpha"], res["seed"], fit))
        print("alpha = %-6g rate = %.4f +- %.4f  knee tau = %.2f%s"
              % (res["alpha"], fit["rate"], fit["stderr"], fit["knee_tau"],
                 "  (floored)" if fit["floored"] else ""))

    if out_dir and fits:
        with open(os.path.join(out_dir, "sweep_rates.csv"), "w", newline="",
                  encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["alpha", "seed", "rate", "stderr", "knee_tau",
                        "floored", "npoints"])
            for alpha, seed, fit in fits:
                w.writerow([_r(alpha), str(seed), _r(fit["rate"]),
                            _r(fit["stderr"]), _r(fit["knee_tau"]),
                            str(int(fit["floored"])), str(fit["npoints"])])

    for i in range(len(fits)):
        for j in range(i + 1, len(fits)):
            ri, rj = fits[i][2]["rate"], fits[j][2]["rate"]
            if ri <= 0.0 or rj <= 0.0:
                print("alpha pair (%g, %g): non-decaying rate" % (fits[i][0], fits[j][0]))
                ok = False
                continue
            ratio = max(ri / rj, rj / ri)
            within = ratio <= args.rate_factor
            ok &= within
            print("alpha pair (%g, %g): rate ratio %.3f %s"
                  % (fits[i][0], fits[j][0], ratio,
                     "ok" if within else "EXCEEDS factor %.1f" % args.rate_factor))
    return 0 if ok else 1


def cmd_verify_constants(args):
    dims = [int(x) for x in args.dims.split(",")]
    ks = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0)
    tol = 1e-10
    ok = True

    def check(label, got, want, tolerance):
        nonlocal ok
        delta = abs(got - want)
        good = delta <= tolerance
        ok &= good
        print("  %-42s %.15g  (delta %.2e)  %s"
              % (label, got, delta, "ok" if good else "MISMATCH"))

    for d in dims:
        print("dimension %d:" % d)
        for k in ks:
            check("rho(%g) quadrature vs closed form" % k,
                  povzner_rho(k, d), povzner_rho_closed(k, d), tol)
        check("rho(0) = 2", povzner_rho(0.0, d), 2.0, tol)
        check("rho(1) = 1", povzner_rho(1.0, d), 1.0, tol)
        if d == 3:
            for k in ks:
                check("rho(%g) = 2/(k+1)" % k, povzner_rho(k, 3),
                      2.0 / (k + 1.0), tol)
            check("threshold alpha = 1/7", alpha_star(3), 1.0 / 7.0, tol)
        if d == 2:
            check("threshold alpha = (4-pi)/(4+pi)", alpha_star(2),
                  (4.0 - math.pi) / (4.0 + math.pi), tol)
        mc = maxwellian_coefficients(d)
        if d == 3:
            check("gaussian a0 = 2 sqrt(2/pi)", mc["a0"],
                  2.0 * math.sqrt(2.0 / math.pi), tol)
        check("b0/a0 = (2d+1)/(2d)", mc["b0"] / mc["a0"],
              (2.0 * d + 1.0) / (2.0 * d), 1e-12)
        check("2 a0/(a0+b0) = 4d/(4d+1)",
              2.0 * mc["a0"] / (mc["a0"] + mc["b0"]),
              4.0 * d / (4.0 * d + 1.0), 1e-12)
    print("constants: %s" % ("all ok" if ok else "MISMATCH"))
    return 0 if ok else 1


def cmd_profile(args):
    traj = load_run(args.out_dir)
    prof = profile_mod.extract_profile(traj.snapshots, burn_in_tau=args.burn_in_tau)
    write_profile_csv(os.path.join(args.out_dir, "profile.csv"), prof)
    dist = profile_mod.profile_distance(prof, "maxwellian")
    print("tail-averaged profile over %d snapshots past tau = %g"
          % (sum(1 for s in traj.snapshots if s.tau >= args.burn_in_tau),
             args.burn_in_tau))
    print("L1 distance to gaussian: %.6f (mass %.6f)" % (dist, prof.mass()))
    if traj.config.alpha > 0.0:
        coeffs = profile_mod.profile_coefficients(prof, traj.config.alpha)
        pred = profile_mod.predicted_rates(coeffs)
        print("profile coefficients: a = %.6f, b = %.6f" % (coeffs.a, coeffs.b))
        print("predicted decay: n ~ t^-%.4f, T ~ t^-%.4f"
              % (pred["density_exp"], pred["temperature_exp"]))
    if args.svg:
        ref = profile_mod.binned_maxwellian(prof.dim, prof.edges)
        svg_plot(os.path.join(args.out_dir, "profile.svg"),
                 [("tail-averaged profile", prof.r_mid, prof.density),
                  ("gaussian", prof.r_mid, ref)],
                 "rescaled velocity profile", "|xi|", "density")
    return 0


def _diagnose_checks(traj, state, r_max, appmom_sp):
    checks = []

    def add(name, status, margin, tolerance, details):
        checks.append({"name": name, "status": status,
                       "margin": None if margin is None else float(margin),
                       "tolerance": None if tolerance is None else float(tolerance),
                       "details": details})

    rep = diagnostics.product_bound_check(traj)
    add("product-envelope", "pass" if rep["ok"] else "fail",
        rep["worst_margin_sigma"], -3.0,
        {"violations": rep["violations"], "records": len(traj.records),
         "c0": rep["c0"], "c1": rep["c1"]})

    rep = diagnostics.m1_bound_check(traj)
    add("m1-envelope", "pass" if rep["ok"] else "fail",
        rep["worst_margin_sigma"], -3.0,
        {"violations": rep["violations"], "records": len(traj.records)})
    add("cauchy-schwarz", "pass" if rep["cs_ok"] else "fail",
        rep["cs_min_margin"], 0.0, {})

    taus = dsmc.tau_accumulate(traj.records)
    stored = np.array([r.tau for r in traj.records])
    exact = bool(np.array_equal(taus, stored))
    add("tau-consistency", "pass" if exact else "fail",
        float(np.max(np.abs(taus - stored))) if taus.size else 0.0, 0.0, {})

    if len(traj.snapshots) >= 2:
        s0 = traj.snapshots[0]
        recon_tau, recon_n, recon_t = reconstruct_moments(
            traj.snapshots, s0.n, s0.T)
        rel = []
        for k, s in enumerate(traj.snapshots):
            rel.append(abs(recon_n[k] - s.n) / s.n)
            rel.append(abs(recon_t[k] - s.T) / s.T)
        worst = float(np.max(rel))
        add("reconstruction", "pass" if worst <= 0.05 else "fail",
            worst, 0.05, {"snapshots": len(traj.snapshots)})

        floors = [s.entropy - diagnostics.entropy_floor(s.hist)
                  for s in traj.snapshots]
        worst = float(np.min(floors))
        add("entropy-floor", "pass" if worst >= -1e-9 else "fail",
            worst, 0.0, {})

        rep = diagnostics.entropy_production_residual(traj.snapshots)
        use = ~rep["coarse"]
        slack = rep["residual"][use] - (rep["alpha"] + 3.0 * rep["sigma"][use])
        worst = float(slack.max()) if slack.size else 0.0
        add("entropy-production", "pass" if worst <= 0.0 else "fail",
            worst, 0.0,
            {"intervals": int(use.sum()), "coarse_skipped": int(rep["coarse"].sum())})

        scan = diagnostics.lower_bound_scan(traj.snapshots[-1].hist, r_max=r_max)
        add("profile-positivity", "pass" if scan["ok"] else "fail",
            scan["positive_radius"], r_max,
            {"first_zero_bin": scan["first_zero_bin"]})

        dim = traj.config.dim
        ref = diagnostics.maxwellian_exp_moment(traj.snapshots[0].exp_weight, dim)
        late = [s for s in traj.snapshots if s.t >= 1.0]
        if late:
            worst = float(max(s.exp_moment for s in late))
            add("exp-moment", "pass" if worst < 2.0 * ref else "fail",
                worst, 2.0 * ref, {"snapshots": len(late), "gaussian": ref})
        else:
            add("exp-moment", "skip", None, None,
                {"reason": "no snapshots at t >= 1"})

        s_exp, p_exp = appmom_sp
        grid_max = float(np.max(traj.snapshots[0].moment_grid))
        if s_exp * p_exp + 1.0 <= grid_max + 1e-9:
            rep = diagnostics.appmom_inequality_check(traj.snapshots, s_exp, p_exp)
            worst = float(np.min(rep["margin"] + 3.0 * rep["sigma"]))
            add("moment-inequality", "pass" if rep["ok"] else "fail",
                worst, 0.0, {"s": s_exp, "p": p_exp, "K1": rep["K1"],
                             "K2": rep["K2"]})
        else:
            add("moment-inequality", "skip", None, None,
                {"reason": "moment grid too short for s*p+1 = %g"
                           % (s_exp * p_exp + 1.0)})

    if state is not None:
        from .core import jensen_check
        ratio = jensen_check(state.ensemble)
        add("jensen-ratio", "pass" if ratio >= 1.0 - 1e-12 else "fail",
            ratio - 1.0, 0.0, {"count": state.count})
    else:
        add("jensen-ratio", "skip", None, None, {"reason": "no checkpoint"})

    return checks


def cmd_diagnose(args):
    traj = load_run(args.out_dir)
    ckpt = os.path.join(args.out_dir, "checkpoint.bin")
    state = dsmc.load_checkpoint(ckpt) if os.path.exists(ckpt) else None
    s_exp, p_exp = (float(x) for x in args.appmom.split(","))
    checks = _diagnose_checks(traj, state, args.r_max, (s_exp, int(p_exp)))
    ok = all(c["status"] != "fail" for c in checks)
    report = {"out_dir": args.out_dir, "ok": ok, "checks": checks}
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_config_args(p, with_out=True):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="override the RNG seed")
    p.add_argument("--shards", type=int, help="override the collision stream count")
    if with_out:
        p.add_argument("--out-dir", help="run directory to write")
    p.add_argument("--help-config", action="store_true",
                   help="list configuration keys and exit")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="configuration overrides")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="annkin",
        description="Particle simulator and analysis toolkit for a "
                    "hard-sphere gas with pairwise annihilation.")
    parser.add_argument("--help-config", action="store_true",
                        help="list configuration keys and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="run a simulation and write a run directory")
    _add_config_args(p)
    p.add_argument("--svg", action="store_true", help="also write SVG plots")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("resume", help="continue a run from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint.bin to load")
    p.add_argument("--out-dir", help="run directory for the continued segment")
    p.add_argument("--svg", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="stopping-condition overrides (t_end=..., tau_end=...)")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("rates", help="fit decay exponents of a stored run")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--window", help="fit window LO,HI in t (default: last decade)")
    p.add_argument("--burn-in-tau", type=float, default=6.0)
    p.add_argument("--tol-density", type=float, default=0.08,
                   help="allowed |measured - universal| for the density slope")
    p.add_argument("--tol-temperature", type=float, default=0.05)
    p.add_argument("--tol-profile", type=float, default=0.05,
                   help="allowed |measured - profile prediction| for both slopes")
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("sweep", help="run several alphas, compare convergence rates")
    _add_config_args(p)
    p.add_argument("--alphas", required=True,
                   help="comma-separated annihilation probabilities (>= 2 distinct)")
    p.add_argument("--rate-factor", type=float, default=2.0,
                   help="allowed pairwise ratio of convergence rates")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-constants",
                       help="cross-check analytic constants against quadrature")
    p.add_argument("--dims", default="2,3,4")
    p.set_defaults(func=cmd_verify_constants)

    p = sub.add_parser("profile", help="tail-average the rescaled profile of a run")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--burn-in-tau", type=float, default=6.0)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("diagnose", help="consistency checks on a stored run")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--r-max", type=float, default=3.0,
                   help="radius up to which the profile must stay positive")
    p.add_argument("--appmom", default="1,3",
                   help="s,p for the moment-inequality audit")
    p.set_defaults(func=cmd_diagnose)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "help_config", False):
        print(config_help())
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except dsmc.MajorantViolationError as exc:
        print("runtime error: %s" % exc, file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

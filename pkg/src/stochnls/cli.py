"""Command-line front end.

Every subcommand reads a JSON run config (unknown keys are rejected), fills
defaults, echoes the resolved config into ``manifest.json`` and writes
fixed-name outputs under ``--out``. A manifest can be passed back through
``--config`` to reproduce a run.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .dynamics import NoiseForcing, evolve, rate_functional
from .io import write_field_binary, write_field_csv
from .noise import make_filter, sample_stream
from .spectral import FieldState, ModelParams, SpatialGrid, l2_norm_sq, soliton
from .transmission import (
    DecisionRule,
    compare_report,
    mc_blowup_time,
    mc_error_probs,
    mc_shift_tails,
    write_rows_csv,
)
from .variational import (
    BoundQuery,
    action_soliton_param,
    amplitude_problem,
    amplitude_solve,
    control_from_eta,
    full_param_solve,
    gamma_sweep,
    prop7_upper,
    prop8_lower,
    soliton_param_solution,
    write_sweep_csv,
)

COMMANDS = ("soliton-check", "simulate", "bounds", "cov-soliton", "cov-amplitude", "cov-full",
            "sweep-gamma", "mc-error", "mc-blowup", "mc-shift", "rate", "report")

DEFAULTS = {
    "grid": {"n_points": 1024, "half_width": 20.0 * np.pi},
    "params": {"sigma": 1.0, "lam": 1},
    "phi": {"profile": "near_identity", "k_max": 8.0, "rolloff": None, "bandwidth": None,
            "amplitude": 1.0},
    "u0": {"kind": "soliton", "eta": 1.0, "amplitude": 1.0},
    "eps": [0.01],
    "gamma": 0.5,
    "window_l": 5.0,
    "T": 2.0,
    "S": 0.2,
    "dt": 5e-3,
    "R": None,
    "R_grid": [0.5, 1.0, 2.0],
    "blowup_aware": False,
    "n_samples": 1000,
    "n_points_sweep": 50,
    "phi_op_norm": 1.0,
    "datum": "soliton",
    "master_seed": 0,
    "batch_size": 500,
    "snapshot_times": [],
}

# per-command defaults layered over DEFAULTS
COMMAND_DEFAULTS = {
    "soliton-check": {"T": 1.0, "dt": 1e-4},
    "simulate": {"eps": [0.0]},
    "bounds": {"T": 10.0},
    "cov-soliton": {"T": 10.0},
    "cov-amplitude": {"T": 10.0},
    "cov-full": {"T": 10.0},
    "sweep-gamma": {"T": 10.0},
    "mc-error": {"grid": {"n_points": 256, "half_width": 30.0}, "phi": {"k_max": 3.0}},
    "report": {"grid": {"n_points": 256, "half_width": 30.0}, "phi": {"k_max": 3.0},
               "eps": [0.02, 0.03, 0.05], "n_samples": 500},
    "mc-blowup": {"grid": {"n_points": 2048, "half_width": 10.0}, "params": {"sigma": 2.0},
                  "u0": {"kind": "sech", "amplitude": float(np.sqrt(2.0))},
                  "phi": {"k_max": 3.0}, "T": 0.45, "S": 0.3, "dt": 1e-4, "R": 50.0,
                  "n_samples": 20, "batch_size": 20},
    "mc-shift": {"grid": {"n_points": 256, "half_width": 30.0}, "phi": {"k_max": 3.0},
                 "eps": [0.01], "R_grid": [2.0, 5.0, 10.0], "n_samples": 500},
    "rate": {"T": 10.0, "grid": {"n_points": 1024, "half_width": 20.0 * np.pi}},
}

DATUMS = {"null": "null_datum", "soliton": "soliton_datum_2", "soliton-1": "soliton_datum_1"}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be an object")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def resolve_config(command: str, user: dict | None, overrides: dict | None = None) -> dict:
    cfg = _merge(DEFAULTS, COMMAND_DEFAULTS.get(command, {}))
    cfg = _merge(cfg, user or {})
    cfg = _merge(cfg, overrides or {})
    if isinstance(cfg["eps"], (int, float)):
        cfg["eps"] = [cfg["eps"]]
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path) -> tuple[dict, str | None]:
    """Config dict from a JSON file, unwrapping a run manifest if given one."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if "manifest_version" in data:
        return data["config"], data.get("command")
    return data, None


# ------------------------------------------------------------------ builders

def _grid(cfg):
    return SpatialGrid(int(cfg["grid"]["n_points"]), float(cfg["grid"]["half_width"]))


def _params(cfg):
    return ModelParams(float(cfg["params"]["sigma"]), int(cfg["params"]["lam"]))


def _phi(cfg, grid):
    p = cfg["phi"]
    return make_filter(p["profile"], grid, bandwidth=p["bandwidth"], k_max=p["k_max"],
                       rolloff=p["rolloff"], amplitude=p["amplitude"])


def _u0(cfg, grid):
    u = cfg["u0"]
    if u["kind"] == "soliton":
        return soliton(float(u["eta"]), 0.0, grid) * float(u["amplitude"])
    if u["kind"] == "sech":
        return FieldState(float(u["amplitude"]) / np.cosh(grid.x), grid)
    if u["kind"] == "zero":
        return FieldState.zeros(grid)
    raise ConfigError(f"unknown u0 kind {u['kind']!r}; expected soliton, sech or zero")


def _datum(cfg):
    try:
        return DATUMS[cfg["datum"]]
    except KeyError:
        raise ConfigError(f"unknown datum {cfg['datum']!r}; expected one of {sorted(DATUMS)}")


def _header(cmd, h):
    return f"command={cmd} config_sha256={h}"


def _write_kv(path, rows: dict, header: str):
    write_rows_csv([{k: v for k, v in rows.items()}], path, header)


# ---------------------------------------------------------------- commands

def cmd_soliton_check(cfg, out, h, threads):
    grid, params = _grid(cfg), _params(cfg)
    eta = float(cfg["u0"]["eta"])
    traj = evolve(soliton(eta, 0.0, grid), params, cfg["T"], cfg["dt"],
                  save_every=max(1, int(round(0.1 / cfg["dt"]))))
    errs = []
    for i, t in enumerate(traj.times):
        ref = soliton(eta, t, grid).values
        errs.append(float(np.sqrt(l2_norm_sq(traj.values[i] - ref, grid) / l2_norm_sq(ref, grid))))
    err = max(errs)
    ok = err <= 1e-6
    write_rows_csv([{"t": float(t), "rel_l2_error": e} for t, e in zip(traj.times, errs)],
                   out / "soliton_check.csv", _header("soliton-check", h))
    print(f"{'PASS' if ok else 'FAIL'} soliton L2 error {err:.3e} (T={cfg['T']}, dt={cfg['dt']})")
    return {"max_rel_l2_error": err, "pass": ok}


def cmd_simulate(cfg, out, h, threads):
    grid, params = _grid(cfg), _params(cfg)
    u0 = _u0(cfg, grid)
    eps = float(cfg["eps"][0])
    forcing = None
    if eps > 0:
        forcing = NoiseForcing(_phi(cfg, grid), eps, sample_stream(cfg["master_seed"], 0))
    traj = evolve(u0, params, cfg["T"], cfg["dt"], forcing=forcing, blowup_R=cfg["R"])
    traj.to_csv(out / "trajectory.csv", cfg["window_l"])
    write_field_csv(out / "final_field.csv", traj.final)
    write_field_binary(out / "final_field.bin", traj.final)
    for t in cfg["snapshot_times"]:
        i = int(np.argmin(np.abs(traj.times - t)))
        write_field_binary(out / f"snapshot_{i:06d}.bin", traj.state_at_index(i))
    t_cross = None if traj.blowup is None else traj.blowup.t_cross
    print(f"simulated to t={traj.times[-1]:.6g} in {traj.n_steps} steps; blow-up time {t_cross}")
    return {"t_end": float(traj.times[-1]), "t_cross": t_cross}


def cmd_bounds(cfg, out, h, threads):
    q = BoundQuery(cfg["gamma"], cfg["T"], cfg["phi_op_norm"])
    up, lo = prop7_upper(q), prop8_lower(q)
    row = {"gamma": q.gamma, "T": q.T, "phi_op_norm": q.phi_op_norm, "upper0": up.exp0,
           "upper1": up.exp1, "upper_max": up.worst, "lower0": lo.exp0, "lower1": lo.exp1,
           "lower_max": lo.worst}
    _write_kv(out / "bounds.csv", row, _header("bounds", h))
    print(f"upper exponents {up.exp0:.9g} {up.exp1:.9g} (max {up.worst:.9g})")
    print(f"lower exponents {lo.exp0:.9g} {lo.exp1:.9g} (max {lo.worst:.9g})")
    return row


def cmd_cov_soliton(cfg, out, h, threads):
    path = soliton_param_solution(_datum(cfg), cfg["gamma"], cfg["T"])
    act = action_soliton_param(path)
    t = np.linspace(0.0, path.T, 501)
    write_rows_csv([{"t": float(a), "eta": float(b), "deta": float(c)}
                    for a, b, c in zip(t, path.eta(t), path.deta(t))],
                   out / "eta_path.csv", _header("cov-soliton", h))
    row = {"kind": path.kind, "gamma": path.gamma, "T": path.T, "a": path.a, "b": path.b,
           "c": path.c, "action_quadrature": act.quadrature, "action_closed_form": act.closed_form,
           "exponent": -act.closed_form}
    _write_kv(out / "cov_soliton.csv", row, _header("cov-soliton", h))
    print(f"{path.kind}: action {act.closed_form:.9g} exponent {-act.closed_form:.9g}")
    return row


def cmd_cov_amplitude(cfg, out, h, threads):
    grid, params = _grid(cfg), _params(cfg)
    u0 = _u0(cfg, grid)
    f0 = 0.0 if cfg["datum"] == "null" else 1.0
    prob = amplitude_problem(u0, params, f0, float(np.sqrt(1.0 - cfg["gamma"])), cfg["T"])
    sol = amplitude_solve(prob)
    write_rows_csv([{"t": float(a), "f": float(b), "fp": float(c)}
                    for a, b, c in zip(sol.t, sol.f, sol.fp)],
                   out / "amplitude_path.csv", _header("cov-amplitude", h))
    row = {"gamma": cfg["gamma"], "T": cfg["T"], "f0": f0, "fT": prob.fT, "action": sol.action,
           "exponent": sol.exponent, "residual": sol.residual, "method": sol.method}
    _write_kv(out / "cov_amplitude.csv", row, _header("cov-amplitude", h))
    print(f"amplitude path ({sol.method}): action {sol.action:.9g} residual {sol.residual:.2e}")
    return row


def cmd_cov_full(cfg, out, h, threads):
    st = full_param_solve(cfg["gamma"], cfg["T"])
    write_rows_csv([{"t": float(a), "eta": float(b), "deta": float(c), "y": float(d),
                     "dy": float(e)} for a, b, c, d, e in zip(st.t, st.eta, st.deta, st.y, st.dy)],
                   out / "full_path.csv", _header("cov-full", h))
    row = {"gamma": st.gamma, "T": st.T, "action": st.action, "exponent": st.exponent,
           "sup_abs_dy": float(np.max(np.abs(st.dy)))}
    _write_kv(out / "cov_full.csv", row, _header("cov-full", h))
    print(f"full parametrization: action {st.action:.9g}, sup|y'| {row['sup_abs_dy']:.2e}")
    return row


def cmd_sweep_gamma(cfg, out, h, threads):
    n = int(cfg["n_points_sweep"])
    if n < 2:
        raise ConfigError("n_points_sweep must be at least 2")
    gammas = np.linspace(0.02, 0.98, n)
    chunks = [c for c in np.array_split(gammas, max(1, threads)) if c.size]
    grid = _grid(cfg)
    with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
        parts = list(ex.map(lambda c: gamma_sweep(cfg["T"], cfg["phi_op_norm"], gammas=c,
                                                  grid=grid), chunks))
    rows = [r for p in parts for r in p]
    write_sweep_csv(rows, out / "sweep.csv", _header("sweep-gamma", h))
    bad = sum(r["amp_status"] != "ok" for r in rows)
    print(f"swept {len(rows)} gamma values; {bad} amplitude failures")
    return {"n_rows": len(rows), "amp_failures": bad}


def _mc_rows(cfg, threads):
    grid, params = _grid(cfg), _params(cfg)
    phi = _phi(cfg, grid)
    rule = DecisionRule(cfg["gamma"], cfg["window_l"])
    ests = []
    for eps in cfg["eps"]:
        ests.append(mc_error_probs(rule, params, phi, float(eps), cfg["T"], int(cfg["n_samples"]),
                                   int(cfg["master_seed"]), dt=cfg["dt"],
                                   blowup_aware=bool(cfg["blowup_aware"]), R=cfg["R"],
                                   batch_size=int(cfg["batch_size"]), threads=threads))
    return ests


def cmd_mc_error(cfg, out, h, threads):
    ests = _mc_rows(cfg, threads)
    rows = []
    for est in ests:
        for key in ("est0", "est1"):
            d = est[key].as_dict()
            rows.append({"type": key[-1], **{k: (float(v) if isinstance(v, np.floating) else v)
                                             for k, v in d.items()}})
    write_rows_csv(rows, out / "mc_error.csv", _header("mc-error", h))
    for r in rows:
        print(f"eps={r['eps']:.4g} type {r['type']}: {r['successes']}/{r['n_samples']} "
              f"eps_log_p={r['eps_log_p']:.5g}{' (censored)' if r['censored'] else ''}")
    return {"n_rows": len(rows)}


def cmd_report(cfg, out, h, threads):
    ests = _mc_rows(cfg, threads)
    rep = compare_report(ests, cfg["gamma"], cfg["T"], cfg["phi_op_norm"])
    write_rows_csv(rep["rows"], out / "report.csv", _header("report", h))
    with open(out / "report.json", "w") as fh:
        json.dump({k: v for k, v in rep.items() if k != "rows"}, fh, indent=2, sort_keys=True,
                  default=float)
    for r in rep["rows"]:
        print(f"eps={r['eps']:.4g} p0={r['p0']:.4g} p1={r['p1']:.4g} risk={r['risk']:.4g}")
    return {"fits": rep["fits"]}


def cmd_mc_blowup(cfg, out, h, threads):
    grid, params = _grid(cfg), _params(cfg)
    if cfg["R"] is None:
        raise ConfigError("mc-blowup needs R")
    est = mc_blowup_time(params, _phi(cfg, grid), float(cfg["eps"][0]), float(cfg["R"]),
                         cfg["S"], cfg["T"], int(cfg["n_samples"]), int(cfg["master_seed"]),
                         _u0(cfg, grid), dt=cfg["dt"], batch_size=int(cfg["batch_size"]),
                         threads=threads)
    write_rows_csv([{"sample": i, "t_cross": float(t)} for i, t in enumerate(est.t_cross)],
                   out / "blowup_times.csv", _header("mc-blowup", h))
    row = {}
    for name in ("p_survive_T", "p_cross_T", "p_cross_S", "p_between"):
        e = getattr(est, name)
        row[name] = e["p_hat"]
        row[name + "_ci_lo"], row[name + "_ci_hi"] = e["ci"]
    _write_kv(out / "mc_blowup.csv", row, _header("mc-blowup", h))
    print(f"crossed R={cfg['R']} by T={cfg['T']}: {row['p_cross_T']:.4g}")
    return row


def cmd_mc_shift(cfg, out, h, threads):
    grid, params = _grid(cfg), _params(cfg)
    rows = mc_shift_tails(params, _phi(cfg, grid), float(cfg["eps"][0]), cfg["T"], cfg["R_grid"],
                          int(cfg["n_samples"]), int(cfg["master_seed"]), dt=cfg["dt"],
                          batch_size=int(cfg["batch_size"]), threads=threads)
    flat = []
    for r in rows:
        r = dict(r)
        r["ci_ge_lo"], r["ci_ge_hi"] = r.pop("ci_ge")
        r["ci_le_lo"], r["ci_le_hi"] = r.pop("ci_le")
        flat.append(r)
    write_rows_csv(flat, out / "mc_shift.csv", _header("mc-shift", h))
    for r in flat:
        print(f"R={r['R']:.4g}: P(Y>=R)={r['p_ge']:.4g} P(Y<=-R)={r['p_le']:.4g}")
    return {"n_rows": len(flat)}


def cmd_rate(cfg, out, h, threads):
    grid = _grid(cfg)
    path = soliton_param_solution(_datum(cfg), cfg["gamma"], cfg["T"])
    ctrl = control_from_eta(path, grid)
    rate = rate_functional(ctrl)
    act = action_soliton_param(path)
    row = {"kind": path.kind, "gamma": path.gamma, "T": path.T, "rate": rate,
           "action_closed_form": act.closed_form, "start_offset": ctrl.start}
    _write_kv(out / "rate.csv", row, _header("rate", h))
    print(f"rate of the {path.kind} control: {rate:.9g} (closed-form action {act.closed_form:.9g})")
    return row


HANDLERS = {
    "soliton-check": cmd_soliton_check, "simulate": cmd_simulate, "bounds": cmd_bounds,
    "cov-soliton": cmd_cov_soliton, "cov-amplitude": cmd_cov_amplitude, "cov-full": cmd_cov_full,
    "sweep-gamma": cmd_sweep_gamma, "mc-error": cmd_mc_error, "mc-blowup": cmd_mc_blowup,
    "mc-shift": cmd_mc_shift, "rate": cmd_rate, "report": cmd_report,
}


# ---------------------------------------------------------------- plumbing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochnls", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config or a previous manifest.json")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        if name in ("bounds", "cov-soliton", "cov-amplitude", "cov-full", "rate", "mc-error",
                    "report"):
            p.add_argument("--gamma", type=float)
        if name != "sweep-gamma":
            p.add_argument("--T", type=float)
        if name in ("bounds", "sweep-gamma", "report"):
            p.add_argument("--phi-norm", type=float, dest="phi_op_norm")
        if name in ("cov-soliton", "cov-amplitude", "rate"):
            p.add_argument("--datum", choices=sorted(DATUMS))
        if name.startswith("mc-") or name in ("simulate", "report"):
            p.add_argument("--eps", type=float, nargs="+")
            p.add_argument("--n-samples", type=int, dest="n_samples")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cmd = args.command
    user = {}
    if args.config:
        user, manifest_cmd = load_config(args.config)
        if manifest_cmd is not None and manifest_cmd != cmd:
            raise ConfigError(f"manifest was written by {manifest_cmd!r}, not {cmd!r}")
    over = {k: getattr(args, k) for k in ("gamma", "T", "phi_op_norm", "datum", "eps",
                                          "n_samples") if getattr(args, k, None) is not None}
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    cfg = resolve_config(cmd, user, over)
    h = config_hash(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    summary = HANDLERS[cmd](cfg, out, h, args.threads)
    manifest = {
        "manifest_version": 1,
        "command": cmd,
        "config": cfg,
        "config_sha256": h,
        "master_seed": cfg["master_seed"],
        "threads": args.threads,
        "wall_time_s": time.perf_counter() - t0,
        "versions": {"stochnls": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "summary": summary,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_jsonable)
    return 0


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def main(argv=None) -> int:
    try:
        return run(argv)
    except KeyboardInterrupt:
        print("Interrupted: run cancelled", file=sys.stderr)
        return 130
    except Exception as exc:  # single-line error for scripts
        detail = " ".join(str(exc).split())
        print(f"{type(exc).__name__}: {detail}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

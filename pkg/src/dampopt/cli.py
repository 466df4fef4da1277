"""Command-line entry points.

Subcommands: powerflow, modes, sens-oracle, estimate, optimize-step,
simulate, fault. All randomness is seeded; reruns with identical inputs
and seed produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import caseio
from .estimator import EstimatorConfig, naer_estimate, reduce_features
from .faultsim import FaultSpec, fault_simulate, trajectory_damping
from .loop import ScenarioAbort, run
from .network import NetworkCase, solve_power_flow
from .redispatch import build_lp, compute_bounds, solve_lp
from .smallsignal import (
    eigen_modes,
    linearize,
    min_damping_mode,
    perturbation_sensitivity,
)


def _fail(msg: str, code: int = 1) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_dispatch(case: NetworkCase, path: str | None, scenario_path: str | None):
    """Dispatch vector from a CSV (gen_id,p), a scenario's initial point,
    or a mid-range default."""
    if path:
        disp = np.zeros(case.n_gen)
        rows = [r for r in Path(path).read_text().splitlines() if r.strip()]
        for r in rows[1:] if rows and not rows[0][0].isdigit() else rows:
            gid, p = r.split(",")
            disp[int(gid) - 1] = float(p)
        return disp, None
    if scenario_path:
        sc = caseio.parse_scenario(scenario_path)
        return sc.initial_dispatch, sc.load_profile.value_at(0.0)
    disp = np.array(
        [0.5 * (g.p_min + g.p_max) if g.dispatchable else 0.0 for g in case.generators]
    )
    return disp, None


def _resolve_case(args) -> tuple[NetworkCase, np.ndarray, np.ndarray | None]:
    if args.scenario and not args.case:
        sc = caseio.parse_scenario(args.scenario)
        case = sc.case
    else:
        case = caseio.parse_case(args.case)
    disp, scale = _load_dispatch(case, getattr(args, "dispatch", None), args.scenario)
    if getattr(args, "load_scale", None) is not None:
        scale = np.full(len(case.loads), args.load_scale)
    return case, disp, scale


def cmd_powerflow(args) -> int:
    case, disp, scale = _resolve_case(args)
    op = solve_power_flow(case, disp, load_scale=scale)
    print(f"converged in {op.iterations} iterations, max mismatch {op.mismatch:.3e}")
    print(f"{'bus':>5s} {'V (pu)':>9s} {'angle (deg)':>12s} {'P inj':>9s} {'Q inj':>9s}")
    for k, b in enumerate(case.buses):
        print(
            f"{b.id:>5d} {op.vm[k]:9.5f} {np.degrees(op.va[k]):12.4f} "
            f"{op.p_inj[k]:9.4f} {op.q_inj[k]:9.4f}"
        )
    load_p = float(sum(ld.p for ld in case.loads)) if scale is None else float(
        np.dot([ld.p for ld in case.loads], np.atleast_1d(scale))
    )
    print(f"generation {op.total_generation:.4f}  load {load_p:.4f}  "
          f"losses {op.total_generation - load_p:.4f}")
    return 0


def cmd_modes(args) -> int:
    case, disp, scale = _resolve_case(args)
    op = solve_power_flow(case, disp, load_scale=scale)
    modes = eigen_modes(linearize(case, op, load_scale=scale), case)
    print(f"{'lambda':>22s} {'zeta':>8s} {'f (Hz)':>8s} {'class':>22s}  shape (rotor speeds)")
    for m in modes:
        sh = " ".join(
            f"{abs(v):.2f}@{np.degrees(np.angle(v)):+.0f}" for v in m.shape
        )
        print(
            f"{m.eigenvalue.real:+10.4f}{m.eigenvalue.imag:+10.4f}j "
            f"{m.zeta:8.4f} {m.freq_hz:8.4f} {m.classification:>22s}  {sh}"
        )
    mm = min_damping_mode(modes)
    print(f"minimum damping: zeta={mm.zeta:.4f} at {mm.freq_hz:.4f} Hz ({mm.classification})")
    return 0


def cmd_sens_oracle(args) -> int:
    case, disp, scale = _resolve_case(args)
    op = solve_power_flow(case, disp, load_scale=scale)
    modes = eigen_modes(linearize(case, op, load_scale=scale), case)
    mm = min_damping_mode(modes)
    feats = reduce_features(case, mm, op, args.features)
    psi = perturbation_sensitivity(
        case, op, [(f.id, f.generators) for f in feats],
        h=args.h, mode=mm, load_scale=scale,
    )
    print("feature_id,psi")
    for f, v in zip(feats, psi):
        print(f"{f.id},{float(v)!r}")
    if args.out:
        Path(args.out).write_text(
            "feature_id,psi\n"
            + "".join(f"{f.id},{float(v)!r}\n" for f, v in zip(feats, psi))
        )
    return 0


def cmd_estimate(args) -> int:
    win = caseio.read_window_csv(args.window)
    cfg = EstimatorConfig(
        ridge_k=args.ridge_k,
        forgetting=args.forgetting,
        ensemble=args.ensemble,
        noise_fraction=args.noise_fraction,
        seed=args.seed,
    )
    est = naer_estimate(win, cfg)
    print("feature_id,psi_hat,ensemble_std")
    for fid, v, s in zip(est.feature_ids, est.psi, est.spread):
        print(f"{fid},{float(v)!r},{float(s)!r}")
    print(f"n={est.n_samples} condition={est.condition:.4g} flagged={est.flagged}")
    if args.out:
        caseio.write_estimate(Path(args.out), est)
    return 0


def cmd_optimize_step(args) -> int:
    rows = [r for r in Path(args.psi).read_text().splitlines() if r.strip()]
    fids, psi = [], []
    for r in rows[1:]:
        parts = r.split(",")
        fids.append(parts[0])
        psi.append(float(parts[1]))
    brows = [r for r in Path(args.bounds).read_text().splitlines() if r.strip()]
    data = {}
    for r in brows[1:]:
        fid, x, xl, xu, ramp, planned = r.split(",")
        data[fid] = tuple(float(v) for v in (x, xl, xu, ramp, planned))
    missing = [f for f in fids if f not in data]
    if missing:
        return _fail(f"bounds file lacks features: {missing}", 2)
    x = np.array([data[f][0] for f in fids])
    xl = np.array([data[f][1] for f in fids])
    xu = np.array([data[f][2] for f in fids])
    rp = np.array([data[f][3] for f in fids])
    dxo = np.array([data[f][4] for f in fids])
    bounds = compute_bounds(x, xl, xu, rp, reserve=args.reserve,
                            capacity=xu, feature_ids=fids)
    lp = build_lp(np.array(psi), bounds, dxo, balance=args.balance)
    if args.debug_lp:
        print(lp.dump())
    sol = solve_lp(lp)
    print(f"status: {sol.status}")
    if sol.ok:
        print(f"delta: {sol.delta!r}")
        for fid, v in zip(sol.feature_ids, sol.dx_r):
            print(f"dx_R[{fid}] = {float(v)!r}")
        print("binding:", ", ".join(sol.binding))
    return 0 if sol.ok else 3


def cmd_simulate(args) -> int:
    sc = caseio.parse_scenario(args.scenario)
    for attr, val in [
        ("seed", args.seed), ("threshold", args.threshold), ("t1_s", args.t1),
        ("ridge_k", args.ridge_k), ("ensemble", args.ensemble),
        ("feature_budget", args.features), ("zeta_noise_std", args.noise_zeta),
    ]:
        if val is not None:
            setattr(sc, attr, val)
    if args.horizon_h is not None:
        sc.horizon_s = args.horizon_h * 3600.0
    if args.reserve:
        sc.reserve = True
    if args.balance is not None:
        sc.balance = args.balance == "on"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    status = 0
    try:
        log = run(sc)
    except ScenarioAbort as exc:
        log = exc.log
        print(f"scenario aborted: {exc}", file=sys.stderr)
        status = 4
    caseio.write_minutes_csv(out / "minutes.csv", log, sc.case)
    caseio.write_events_json(out / "events.json", log)
    summary = {
        "scenario": sc.name,
        "seed": sc.seed,
        "minutes": len(log.minutes),
        "triggers": len(log.triggers),
        "skips": len(log.skips),
        "final_zeta_true": log.minutes[-1].zeta_true if log.minutes else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary, indent=1))
    return status


def cmd_fault(args) -> int:
    case, disp, scale = _resolve_case(args)
    op = solve_power_flow(case, disp, load_scale=scale, check_limits=False)
    spec = FaultSpec(
        bus=args.fault_bus, t_start=args.start,
        t_clear=args.start + args.duration,
        horizon=args.horizon, step=args.step,
    )
    modes = eigen_modes(linearize(case, op, load_scale=scale), case)
    mm = min_damping_mode(modes)
    traj = fault_simulate(case, op, spec, load_scale=scale)
    if args.pair:
        i, j = (int(v) - 1 for v in args.pair.split(","))
    else:
        rel = np.real(mm.shape / mm.shape[np.argmax(np.abs(mm.shape))])
        i, j = int(np.argmax(rel)), int(np.argmin(rel))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        caseio.write_trajectory_csv(out / "trajectory.csv", traj)
    print(f"stable: {traj.stable}  pair: G{i+1}-G{j+1}")
    if not traj.stable:
        return 5
    skip = int(round((spec.t_clear + args.settle) / spec.step))
    series = traj.relative_angle(i, j)[skip:]
    zeta_hat = trajectory_damping(traj.t[skip:], series, mm.freq_hz)
    print(f"eigen zeta (dominant mode): {mm.zeta!r}")
    print(f"log-decrement zeta estimate: {zeta_hat!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dampopt",
        description="Oscillation-damping re-dispatch: analysis, identification "
                    "and closed-loop simulation tools.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_case_opts(sp, scenario_ok=True):
        sp.add_argument("--case", help="case file path")
        if scenario_ok:
            sp.add_argument("--scenario", help="scenario file (case + initial dispatch)")
        sp.add_argument("--dispatch", help="per-generator setpoint CSV: gen_id,p")
        sp.add_argument("--load-scale", type=float, help="uniform load scaling factor")

    sp = sub.add_parser("powerflow", help="solve the AC power flow and print the solution")
    add_case_opts(sp)
    sp.set_defaults(func=cmd_powerflow)

    sp = sub.add_parser("modes", help="eigenvalue table with damping and classification")
    add_case_opts(sp)
    sp.set_defaults(func=cmd_modes)

    sp = sub.add_parser("sens-oracle", help="model-based perturbation sensitivities")
    add_case_opts(sp)
    sp.add_argument("--h", type=float, default=0.01, help="perturbation step (pu)")
    sp.add_argument("--features", type=int, default=8, help="feature budget")
    sp.add_argument("--out", help="write CSV here as well")
    sp.set_defaults(func=cmd_sens_oracle)

    sp = sub.add_parser("estimate", help="NAER estimate from a recorded window CSV")
    sp.add_argument("--window", required=True, help="window CSV: t,dx_...,dzeta")
    sp.add_argument("--ridge-k", type=float, default=0.0)
    sp.add_argument("--ensemble", type=int, default=100)
    sp.add_argument("--noise-fraction", type=float, default=0.1)
    sp.add_argument("--forgetting", type=float, default=0.99)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="write estimate CSV + JSON sidecar here")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("optimize-step", help="one re-dispatch LP from psi/bounds files")
    sp.add_argument("--psi", required=True, help="CSV: feature_id,psi")
    sp.add_argument("--bounds", required=True,
                    help="CSV: feature_id,x,x_lower,x_upper,ramp,planned")
    sp.add_argument("--balance", type=lambda s: s == "on", default=True,
                    metavar="on|off")
    sp.add_argument("--reserve", action="store_true")
    sp.add_argument("--debug-lp", action="store_true", help="dump the LP rows")
    sp.set_defaults(func=cmd_optimize_step)

    sp = sub.add_parser("simulate", help="run the closed loop over a scenario")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--t1", type=float, help="dispatch interval (s)")
    sp.add_argument("--horizon-h", type=float, help="override horizon (hours)")
    sp.add_argument("--ridge-k", type=float)
    sp.add_argument("--ensemble", type=int)
    sp.add_argument("--features", type=int)
    sp.add_argument("--noise-zeta", type=float)
    sp.add_argument("--reserve", action="store_true")
    sp.add_argument("--balance", choices=["on", "off"])
    sp.add_argument("--debug-lp", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fault", help="three-phase fault run with damping estimate")
    add_case_opts(sp)
    sp.add_argument("--fault-bus", type=int, required=True)
    sp.add_argument("--start", type=float, default=0.5, help="fault start (s)")
    sp.add_argument("--duration", type=float, default=0.1, help="fault duration (s)")
    sp.add_argument("--horizon", type=float, default=20.0)
    sp.add_argument("--step", type=float, default=0.001)
    sp.add_argument("--settle", type=float, default=5.0,
                    help="seconds after clearing before the ring-down window")
    sp.add_argument("--pair", help="generator pair i,j for the relative angle")
    sp.add_argument("--out", help="output directory for trajectory.csv")
    sp.set_defaults(func=cmd_fault)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        return _fail(f"{args.command}: {exc}")


if __name__ == "__main__":
    sys.exit(main())

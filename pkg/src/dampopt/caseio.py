"""Plain-text file formats: case files, scenario files, profile and
window CSVs, and the simulation-log writers.

Case files are sectioned text with one whitespace-delimited record per
line and ``#`` comments:

    [SYSTEM]
    base_mva 100
    frequency_hz 60

    [BUS]     # id kind voltage(pu)
    [BRANCH]  # from to r x b in_service
    [GEN]     # bus H D xdp p_max p_min station dispatchable
    [LOAD]    # bus p q

All quantities are per-unit on the system base; H is in seconds on the
system base. The bus voltage field is the magnitude setpoint used for
slack/PV buses.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .estimator import SampleWindow, SensitivityEstimate
from .faultsim import Trajectory
from .loop import Profile, Scenario, SimulationLog
from .network import Branch, Bus, CaseError, Generator, Load, NetworkCase, validate_case

__all__ = [
    "CaseParseError",
    "parse_case",
    "parse_case_text",
    "serialize_case",
    "parse_scenario",
    "read_profile_csv",
    "write_window_csv",
    "read_window_csv",
    "write_estimate",
    "write_trajectory_csv",
    "write_minutes_csv",
    "write_events_json",
]


class CaseParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str = ""):
        loc = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(f"{loc}{message}")
        self.line = line


def _tokenize(text: str):
    """Yield (line_number, section, tokens) for each record line."""
    section = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().upper()
            continue
        yield ln, section, line.split()


def _as_bool(tok: str) -> bool:
    if tok in ("1", "true", "True", "yes", "on"):
        return True
    if tok in ("0", "false", "False", "no", "off"):
        return False
    raise ValueError(f"expected a boolean flag, got {tok!r}")


def parse_case_text(text: str, path: str = "<string>") -> NetworkCase:
    buses: list[Bus] = []
    branches: list[Branch] = []
    gens: list[Generator] = []
    loads: list[Load] = []
    base_mva, freq, name = 100.0, 60.0, ""
    slack_lines: list[int] = []
    bus_lines: dict[int, int] = {}

    for ln, section, tok in _tokenize(text):
        try:
            if section == "SYSTEM":
                key = tok[0].lower()
                if key == "base_mva":
                    base_mva = float(tok[1])
                elif key == "frequency_hz":
                    freq = float(tok[1])
                elif key == "name":
                    name = tok[1]
                else:
                    raise ValueError(f"unknown SYSTEM key {tok[0]!r}")
            elif section == "BUS":
                if len(tok) != 3:
                    raise ValueError(f"BUS record needs 3 fields, got {len(tok)}")
                b = Bus(id=int(tok[0]), kind=tok[1], voltage=float(tok[2]))
                if b.id in bus_lines:
                    raise ValueError(f"duplicate bus id {b.id} (first at line {bus_lines[b.id]})")
                bus_lines[b.id] = ln
                if b.kind == "slack":
                    slack_lines.append(ln)
                buses.append(b)
            elif section == "BRANCH":
                if len(tok) != 6:
                    raise ValueError(f"BRANCH record needs 6 fields, got {len(tok)}")
                branches.append(
                    Branch(
                        from_bus=int(tok[0]), to_bus=int(tok[1]),
                        r=float(tok[2]), x=float(tok[3]), b=float(tok[4]),
                        in_service=_as_bool(tok[5]),
                    )
                )
            elif section == "GEN":
                if len(tok) != 8:
                    raise ValueError(f"GEN record needs 8 fields, got {len(tok)}")
                gens.append(
                    Generator(
                        bus=int(tok[0]), h=float(tok[1]), d=float(tok[2]),
                        xdp=float(tok[3]), p_max=float(tok[4]), p_min=float(tok[5]),
                        station=tok[6], dispatchable=_as_bool(tok[7]),
                    )
                )
            elif section == "LOAD":
                if len(tok) != 3:
                    raise ValueError(f"LOAD record needs 3 fields, got {len(tok)}")
                loads.append(Load(bus=int(tok[0]), p=float(tok[1]), q=float(tok[2])))
            else:
                raise ValueError(f"record outside a known section: {' '.join(tok)}")
        except CaseParseError:
            raise
        except ValueError as exc:
            raise CaseParseError(str(exc), line=ln, path=path) from exc

    if len(slack_lines) > 1:
        raise CaseParseError(
            f"multiple slack buses declared at lines {slack_lines}", path=path
        )
    case = NetworkCase(
        buses=buses, branches=branches, generators=gens, loads=loads,
        base_mva=base_mva, frequency_hz=freq, name=name,
    )
    try:
        validate_case(case)
    except CaseError as exc:
        raise CaseParseError(str(exc), path=path) from exc
    return case


def parse_case(path) -> NetworkCase:
    p = Path(path)
    return parse_case_text(p.read_text(), path=str(p))


def serialize_case(case: NetworkCase) -> str:
    out = ["[SYSTEM]"]
    out.append(f"base_mva {case.base_mva!r}")
    out.append(f"frequency_hz {case.frequency_hz!r}")
    if case.name:
        out.append(f"name {case.name}")
    out.append("")
    out.append("[BUS]")
    for b in case.buses:
        out.append(f"{b.id} {b.kind} {b.voltage!r}")
    out.append("")
    out.append("[BRANCH]")
    for br in case.branches:
        out.append(
            f"{br.from_bus} {br.to_bus} {br.r!r} {br.x!r} {br.b!r} "
            f"{1 if br.in_service else 0}"
        )
    out.append("")
    out.append("[GEN]")
    for g in case.generators:
        out.append(
            f"{g.bus} {g.h!r} {g.d!r} {g.xdp!r} {g.p_max!r} {g.p_min!r} "
            f"{g.station} {1 if g.dispatchable else 0}"
        )
    out.append("")
    out.append("[LOAD]")
    for ld in case.loads:
        out.append(f"{ld.bus} {ld.p!r} {ld.q!r}")
    out.append("")
    return "\n".join(out)


def read_profile_csv(path, n_columns: int) -> Profile:
    p = Path(path)
    rows = [r.strip() for r in p.read_text().splitlines() if r.strip()]
    if not rows:
        raise CaseParseError("empty profile CSV", path=str(p))
    header = rows[0].split(",")
    if header[0].strip() != "t_min":
        raise CaseParseError("profile CSV must start with a t_min column", path=str(p))
    if len(header) - 1 != n_columns:
        raise CaseParseError(
            f"profile has {len(header) - 1} value columns, expected {n_columns}",
            path=str(p),
        )
    data = np.array(
        [[float(v) for v in r.split(",")] for r in rows[1:]], dtype=float
    )
    order = np.argsort(data[:, 0], kind="stable")
    data = data[order]
    return Profile(t_min=data[:, 0], values=data[:, 1:])


_SCALAR_FIELDS = {
    "t1_s": float,
    "horizon_s": float,
    "threshold": float,
    "sample_period_s": float,
    "zeta_noise_std": float,
    "load_fluct_std": float,
    "gen_fluct_std": float,
    "ramp_frac": float,
    "ramp_exec_fraction": float,
    "seed": int,
    "feature_budget": int,
    "ridge_k": float,
    "ensemble": int,
    "est_noise_fraction": float,
    "forgetting": float,
    "condition_cap": float,
}


def parse_scenario(path) -> Scenario:
    """Parse a scenario file; relative paths resolve against its directory."""
    p = Path(path)
    base = p.parent
    kv: dict[str, list[str]] = {}
    for ln, section, tok in _tokenize(p.read_text()):
        if section not in (None, "SCENARIO"):
            raise CaseParseError(f"unknown section [{section}]", line=ln, path=str(p))
        kv[tok[0].lower()] = tok[1:]

    if "case" not in kv:
        raise CaseParseError("scenario must name a case file", path=str(p))
    case = parse_case(base / kv.pop("case")[0])

    if "initial_dispatch" not in kv:
        raise CaseParseError("scenario must give initial_dispatch", path=str(p))
    x0 = np.array([float(v) for v in kv.pop("initial_dispatch")], dtype=float)
    if x0.shape != (case.n_gen,):
        raise CaseParseError(
            f"initial_dispatch has {len(x0)} entries for {case.n_gen} generators",
            path=str(p),
        )

    if "load_profile" in kv:
        load_profile = read_profile_csv(base / kv.pop("load_profile")[0], len(case.loads))
    else:
        load_profile = Profile.constant(np.ones(len(case.loads)))
    dispatch_profile = None
    if "dispatch_profile" in kv:
        dispatch_profile = read_profile_csv(
            base / kv.pop("dispatch_profile")[0], case.n_gen
        )

    sc = Scenario(
        case=case,
        initial_dispatch=x0,
        load_profile=load_profile,
        dispatch_profile=dispatch_profile,
        name=kv.pop("name", [p.stem])[0],
    )
    if "horizon_h" in kv:
        sc.horizon_s = float(kv.pop("horizon_h")[0]) * 3600.0
    for key, vals in kv.items():
        if key in ("reserve", "balance"):
            setattr(sc, key, _as_bool(vals[0]))
        elif key in _SCALAR_FIELDS:
            setattr(sc, key, _SCALAR_FIELDS[key](vals[0]))
        else:
            raise CaseParseError(f"unknown scenario key {key!r}", path=str(p))
    sc.validate()
    return sc


# ---------------------------------------------------------------------------
# CSV / JSON emitters. All floats are written with repr so output is
# byte-stable across runs.
# ---------------------------------------------------------------------------

def write_window_csv(path, window: SampleWindow) -> None:
    dx, dz, ts = window.matrices()
    lines = ["t," + ",".join(f"dx_{fid}" for fid in window.feature_ids) + ",dzeta"]
    for i in range(len(ts)):
        lines.append(
            f"{ts[i]!r}," + ",".join(repr(float(v)) for v in dx[i]) + f",{dz[i]!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_window_csv(path) -> SampleWindow:
    p = Path(path)
    rows = [r.strip() for r in p.read_text().splitlines() if r.strip()]
    header = rows[0].split(",")
    if header[0] != "t" or header[-1] != "dzeta":
        raise CaseParseError("window CSV must be t,dx_...,dzeta", path=str(p))
    fids = [h[3:] for h in header[1:-1]]
    win = SampleWindow(fids)
    for r in rows[1:]:
        vals = [float(v) for v in r.split(",")]
        win.push(np.array(vals[1:-1]), vals[-1], vals[0])
    return win


def write_estimate(csv_path, estimate: SensitivityEstimate) -> None:
    """Estimate table plus a JSON diagnostics sidecar next to it."""
    lines = ["feature_id,psi_hat,ensemble_std"]
    for fid, v, s in zip(estimate.feature_ids, estimate.psi, estimate.spread):
        lines.append(f"{fid},{float(v)!r},{float(s)!r}")
    csv_path = Path(csv_path)
    csv_path.write_text("\n".join(lines) + "\n")
    side = {
        "n_samples": estimate.n_samples,
        "condition": float(estimate.condition),
        "seed": estimate.seed,
        "flagged": estimate.flagged,
    }
    csv_path.with_suffix(".json").write_text(json.dumps(side, indent=1) + "\n")


def write_trajectory_csv(path, traj: Trajectory, resolution_s: float = 0.001) -> None:
    """Fixed-resolution trajectory dump (defaults to 1 ms timestamps)."""
    dt = float(traj.t[1] - traj.t[0]) if len(traj.t) > 1 else resolution_s
    stride = max(1, int(round(resolution_s / dt)))
    ng = traj.delta.shape[1]
    header = "t," + ",".join(f"gen_{i+1}_delta,gen_{i+1}_omega" for i in range(ng))
    lines = [header]
    for k in range(0, len(traj.t), stride):
        cells = [repr(round(float(traj.t[k]), 6))]  # exact ms-grid timestamps
        for i in range(ng):
            cells.append(repr(float(traj.delta[k, i])))
            cells.append(repr(float(traj.omega[k, i])))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_minutes_csv(path, log: SimulationLog, case: NetworkCase) -> None:
    ng = case.n_gen
    header = "t_min,zeta_true,zeta_est," + ",".join(f"gen_{i+1}" for i in range(ng))
    lines = [header]
    for rec in log.minutes:
        cells = [str(rec.t_min), repr(float(rec.zeta_true)), repr(float(rec.zeta_est))]
        cells += [repr(float(v)) for v in rec.gen_p]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_events_json(path, log: SimulationLog) -> None:
    Path(path).write_text(json.dumps(log.events, indent=1) + "\n")

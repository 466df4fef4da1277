"""Static network model and AC power flow.

Everything is per-unit on the system MVA base. Buses are identified by
integer ids; generators and loads reference buses. The power-flow solver
is a dense polar Newton-Raphson with full Jacobian refactorization, which
is more than fast enough for the system sizes this package targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Bus",
    "Branch",
    "Generator",
    "Load",
    "NetworkCase",
    "OperatingPoint",
    "CaseError",
    "TopologyError",
    "DispatchLimitError",
    "DivergenceError",
    "validate_case",
    "build_admittance",
    "solve_power_flow",
]


class CaseError(ValueError):
    """A NetworkCase violates one of its structural invariants."""


class TopologyError(CaseError):
    """The in-service branch graph does not connect all buses."""


class DispatchLimitError(ValueError):
    """A requested setpoint falls outside a generator's capacity window."""


class DivergenceError(RuntimeError):
    """Newton iteration failed to converge within the iteration cap."""

    def __init__(self, message: str, mismatch: float):
        super().__init__(message)
        self.mismatch = mismatch


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str  # "slack" | "PV" | "PQ"
    voltage: float  # magnitude setpoint (slack/PV) or flat-start guess, p.u.


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float  # series resistance, p.u.
    x: float  # series reactance, p.u.
    b: float  # total shunt (charging) susceptance, p.u.
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    h: float          # inertia constant, s (system base)
    d: float          # speed-damping torque coefficient, p.u./p.u.
    xdp: float        # transient reactance, p.u.
    p_max: float      # capacity, p.u.
    p_min: float      # minimum output, p.u.
    station: str      # station id; prefix before "_" names the area
    dispatchable: bool = True

    @property
    def area(self) -> str:
        return self.station.split("_", 1)[0]


@dataclass(frozen=True)
class Load:
    bus: int
    p: float  # base active power, p.u.
    q: float  # base reactive power, p.u. (negative = net capacitive)


@dataclass
class NetworkCase:
    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]
    loads: list[Load]
    base_mva: float = 100.0
    frequency_hz: float = 60.0
    name: str = ""

    # -- index helpers -------------------------------------------------
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def slack_bus(self) -> int:
        for b in self.buses:
            if b.kind == "slack":
                return b.id
        raise CaseError("case has no slack bus")

    @property
    def slack_gen(self) -> int:
        """Index of the generator sitting on the slack bus."""
        sb = self.slack_bus
        for i, g in enumerate(self.generators):
            if g.bus == sb:
                return i
        raise CaseError("no generator on the slack bus")

    @property
    def omega_s(self) -> float:
        return 2.0 * np.pi * self.frequency_hz

    def gen_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(g, attr) for g in self.generators], dtype=float)

    def with_branch_status(self, idx: int, in_service: bool) -> "NetworkCase":
        branches = list(self.branches)
        branches[idx] = replace(branches[idx], in_service=in_service)
        return replace(self, branches=branches)


def validate_case(case: NetworkCase) -> None:
    """Check all NetworkCase invariants; raise CaseError on the first violation."""
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseError("duplicate bus ids")
    slacks = [b.id for b in case.buses if b.kind == "slack"]
    if len(slacks) != 1:
        raise CaseError(f"expected exactly one slack bus, found {len(slacks)}: {slacks}")
    for b in case.buses:
        if b.kind not in ("slack", "PV", "PQ"):
            raise CaseError(f"bus {b.id}: unknown kind {b.kind!r}")
    known = set(ids)
    for br in case.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
    gen_buses = set()
    for g in case.generators:
        if g.bus not in known:
            raise CaseError(f"generator at bus {g.bus}: bus does not exist")
        if g.h <= 0:
            raise CaseError(f"generator at bus {g.bus}: H must be > 0")
        if g.xdp <= 0:
            raise CaseError(f"generator at bus {g.bus}: x_d' must be > 0")
        if not (g.p_max > g.p_min >= 0):
            raise CaseError(f"generator at bus {g.bus}: need P_max > P_min >= 0")
        gen_buses.add(g.bus)
    kinds = {b.id: b.kind for b in case.buses}
    for bid in gen_buses:
        if kinds[bid] == "PQ":
            raise CaseError(f"bus {bid} hosts a generator but is typed PQ")
    for b in case.buses:
        if b.kind in ("slack", "PV") and b.id not in gen_buses:
            raise CaseError(f"{b.kind} bus {b.id} has no generator")
    for ld in case.loads:
        if ld.bus not in known:
            raise CaseError(f"load at bus {ld.bus}: bus does not exist")
    if case.base_mva <= 0:
        raise CaseError("base MVA must be positive")
    _check_connected(case)


def _check_connected(case: NetworkCase) -> None:
    live = [br for br in case.branches if br.in_service]
    if not live and case.n_bus > 1:
        raise TopologyError("all branches out of service")
    adj: dict[int, set[int]] = {b.id: set() for b in case.buses}
    for br in live:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    seen = {case.buses[0].id}
    stack = [case.buses[0].id]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != case.n_bus:
        missing = sorted(set(adj) - seen)
        raise TopologyError(f"network is disconnected; unreachable buses: {missing}")


def build_admittance(case: NetworkCase) -> np.ndarray:
    """Assemble the bus admittance matrix from the branch pi-models.

    Out-of-service branches are skipped. Raises TopologyError if the
    in-service graph leaves any bus unreachable.
    """
    _check_connected(case)
    idx = case.bus_index()
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.in_service:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        y[i, i] += ys + 0.5j * br.b
        y[j, j] += ys + 0.5j * br.b
        y[i, j] -= ys
        y[j, i] -= ys
    return y


@dataclass
class OperatingPoint:
    """A converged power-flow solution: the injection vector plus voltages."""

    vm: np.ndarray          # bus voltage magnitudes, p.u.
    va: np.ndarray          # bus voltage angles, rad
    p_inj: np.ndarray       # net active injection per bus, p.u.
    q_inj: np.ndarray       # net reactive injection per bus, p.u.
    gen_p: np.ndarray       # actual active output per generator, p.u.
    timestamp: float = 0.0
    mismatch: float = 0.0   # final max |mismatch|
    iterations: int = 0

    @property
    def total_generation(self) -> float:
        return float(np.sum(self.gen_p))

    def losses(self, load_p: float) -> float:
        return self.total_generation - load_p


def _scaled_loads(case: NetworkCase, load_scale) -> tuple[np.ndarray, np.ndarray]:
    nl = len(case.loads)
    p = np.array([ld.p for ld in case.loads], dtype=float)
    q = np.array([ld.q for ld in case.loads], dtype=float)
    if load_scale is None:
        return p, q
    s = np.asarray(load_scale, dtype=float)
    if s.ndim == 0:
        s = np.full(nl, float(s))
    if s.shape == (nl,):
        return p * s, q * s
    if s.shape == (nl, 2):
        return p * s[:, 0], q * s[:, 1]
    raise ValueError(f"load_scale must be scalar, ({nl},) or ({nl},2); got {s.shape}")


def solve_power_flow(
    case: NetworkCase,
    dispatch,
    load_scale=None,
    v0: OperatingPoint | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    ybus: np.ndarray | None = None,
    timestamp: float = 0.0,
    check_limits: bool = True,
) -> OperatingPoint:
    """Solve the AC power flow for the given generator setpoints.

    ``dispatch`` is one active-power setpoint per generator (the slack
    generator's entry is ignored; it absorbs the residual imbalance).
    ``load_scale`` optionally scales each load's base P and Q. A previous
    OperatingPoint may be passed as ``v0`` to warm-start the iteration.

    Raises DispatchLimitError if a non-slack setpoint is outside its
    generator's capacity window, and DivergenceError (carrying the last
    mismatch norm) if Newton does not converge within ``max_iter``.
    """
    dispatch = np.asarray(dispatch, dtype=float)
    if dispatch.shape != (case.n_gen,):
        raise ValueError(f"dispatch must have shape ({case.n_gen},)")
    slack_g = case.slack_gen
    if check_limits:
        eps = 1e-9
        for i, g in enumerate(case.generators):
            if i == slack_g:
                continue
            if dispatch[i] > g.p_max + eps or dispatch[i] < g.p_min - eps:
                raise DispatchLimitError(
                    f"setpoint {dispatch[i]:.6g} for generator at bus {g.bus} "
                    f"outside [{g.p_min:.6g}, {g.p_max:.6g}]"
                )

    idx = case.bus_index()
    n = case.n_bus
    y = build_admittance(case) if ybus is None else ybus

    load_p, load_q = _scaled_loads(case, load_scale)
    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    for i, g in enumerate(case.generators):
        if i != slack_g:
            p_spec[idx[g.bus]] += dispatch[i]
    for k, ld in enumerate(case.loads):
        p_spec[idx[ld.bus]] -= load_p[k]
        q_spec[idx[ld.bus]] -= load_q[k]

    kinds = np.array([b.kind for b in case.buses])
    sl = int(np.flatnonzero(kinds == "slack")[0])
    pq = np.flatnonzero(kinds == "PQ")
    pvpq = np.flatnonzero(kinds != "slack")

    vset = np.array([b.voltage for b in case.buses], dtype=float)
    if v0 is not None:
        vm = v0.vm.copy()
        va = v0.va.copy()
        vm[kinds != "PQ"] = vset[kinds != "PQ"]
    else:
        vm = vset.copy()
        va = np.zeros(n)

    npvpq = len(pvpq)
    mism = np.inf
    for it in range(1, max_iter + 1):
        vc = vm * np.exp(1j * va)
        s = vc * np.conj(y @ vc)
        f = np.concatenate([(s.real - p_spec)[pvpq], (s.imag - q_spec)[pq]])
        mism = float(np.max(np.abs(f))) if f.size else 0.0
        if mism <= tol:
            break
        # dS/dVa, dS/dVm in complex form (standard polar NR blocks)
        ibus = y @ vc
        dv = np.diag(vc)
        di = np.diag(ibus)
        dvn = np.diag(vc / vm)
        ds_dva = 1j * dv @ np.conj(di - y @ dv)
        ds_dvm = dv @ np.conj(y @ dvn) + np.conj(di) @ dvn
        j11 = ds_dva.real[np.ix_(pvpq, pvpq)]
        j12 = ds_dvm.real[np.ix_(pvpq, pq)]
        j21 = ds_dva.imag[np.ix_(pq, pvpq)]
        j22 = ds_dvm.imag[np.ix_(pq, pq)]
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise DivergenceError(f"singular Jacobian at iteration {it}", mism) from exc
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
    else:
        raise DivergenceError(
            f"power flow did not converge in {max_iter} iterations "
            f"(max mismatch {mism:.3e})",
            mism,
        )

    vc = vm * np.exp(1j * va)
    s = vc * np.conj(y @ vc)

    # recover per-generator outputs; the slack generator picks up the
    # residual at its bus (injection plus local load)
    gen_p = dispatch.copy()
    sb = idx[case.slack_bus]
    local_load = 0.0
    for k, ld in enumerate(case.loads):
        if idx[ld.bus] == sb:
            local_load += load_p[k]
    others = sum(
        dispatch[i]
        for i, g in enumerate(case.generators)
        if i != slack_g and idx[g.bus] == sb
    )
    gen_p[slack_g] = s.real[sb] + local_load - others

    return OperatingPoint(
        vm=vm,
        va=va,
        p_inj=s.real,
        q_inj=s.imag,
        gen_p=gen_p,
        timestamp=timestamp,
        mismatch=mism,
        iterations=it,
    )

"""Closed-loop day simulation: measurement, damping estimation and
sequential re-dispatch.

The three parallel threads are modelled as one deterministic discrete
event loop. Thread 1 (measurement) is a simulated 1 Hz stream of bus
injections under ambient load fluctuation and generator output jitter;
thread 2 (damping monitoring) is a noisy eigenvalue oracle whose
per-minute output is the mean of its last minute of samples; thread 3
re-dispatches whenever the monitored damping ratio falls below the
trigger threshold: it reduces the feature set, identifies sensitivities
from the current window, assembles bounds (redistributing planned
increments off at-limit features) and commits the LP result for the next
interval, ramping it at the generator ramp rate.

All randomness flows from the scenario seed through per-purpose
substreams, so the entire log is a pure function of (scenario, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimator import (
    EstimationError,
    EstimatorConfig,
    Feature,
    FeatureReductionError,
    SampleWindow,
    naer_estimate,
    reduce_features,
)
from .network import (
    DivergenceError,
    NetworkCase,
    OperatingPoint,
    build_admittance,
    solve_power_flow,
)
from .redispatch import (
    BoundsError,
    DispatchBounds,
    RedistributionError,
    build_lp,
    compute_bounds,
    redistribute_planned,
    solve_lp,
)
from .smallsignal import (
    Mode,
    ModeClassificationError,
    eigen_modes,
    linearize,
    min_damping_mode,
)

__all__ = [
    "Profile",
    "Scenario",
    "MinuteRecord",
    "SimulationLog",
    "ScenarioAbort",
    "measure_damping",
    "generate_ambient",
    "LoopState",
    "step",
    "run",
    "collect_window",
]


class ScenarioAbort(RuntimeError):
    """Power flow diverged mid-scenario; carries the partial log."""

    def __init__(self, message: str, log: "SimulationLog"):
        super().__init__(message)
        self.log = log


@dataclass
class Profile:
    """Piecewise time series keyed in minutes, one column per element."""

    t_min: np.ndarray
    values: np.ndarray  # shape (n_points, n_columns)

    def value_at(self, t_s: float) -> np.ndarray:
        """Linear interpolation at time t (seconds), clamped at the ends."""
        tm = t_s / 60.0
        out = np.empty(self.values.shape[1])
        for c in range(self.values.shape[1]):
            out[c] = np.interp(tm, self.t_min, self.values[:, c])
        return out

    def increments_between(self, t0_s: float, t1_s: float) -> np.ndarray:
        """Sum of rows whose timestamp falls in (t0, t1] (seconds)."""
        sel = (self.t_min * 60.0 > t0_s + 1e-9) & (self.t_min * 60.0 <= t1_s + 1e-9)
        if not np.any(sel):
            return np.zeros(self.values.shape[1])
        return self.values[sel].sum(axis=0)

    @staticmethod
    def constant(value_row, t_end_min: float = 24 * 60.0) -> "Profile":
        row = np.asarray(value_row, dtype=float)
        return Profile(
            t_min=np.array([0.0, t_end_min]),
            values=np.vstack([row, row]),
        )


@dataclass
class Scenario:
    case: NetworkCase
    initial_dispatch: np.ndarray
    load_profile: Profile
    dispatch_profile: Profile | None = None  # planned per-generator increments
    t1_s: float = 900.0
    horizon_s: float = 86400.0
    threshold: float = 0.03
    sample_period_s: float = 1.0
    zeta_noise_std: float = 0.002
    load_fluct_std: float = 0.01
    gen_fluct_std: float = 0.005        # fraction of capacity
    ramp_frac: float = 0.05             # ramp limit per interval, fraction of capacity
    ramp_exec_fraction: float = 0.25    # fraction of T1 a full-ramp move takes
    reserve: bool = False
    balance: bool = True
    feature_budget: int = 8
    seed: int = 0
    ridge_k: float = 0.0
    ensemble: int = 100
    est_noise_fraction: float = 0.1
    forgetting: float = 0.99
    condition_cap: float = 1e8
    name: str = ""

    def validate(self) -> None:
        if self.t1_s <= 0:
            raise ValueError("T1 must be positive")
        if not (0.0 < self.threshold < 0.2):
            raise ValueError("trigger threshold must be in (0, 0.2)")
        n_int = self.horizon_s / self.t1_s
        if abs(n_int - round(n_int)) > 1e-9:
            raise ValueError("horizon must be a whole number of dispatch intervals")
        if self.initial_dispatch.shape != (self.case.n_gen,):
            raise ValueError("initial dispatch must cover every generator")
        if not (0.0 < self.ramp_exec_fraction <= 1.0):
            raise ValueError("ramp execution fraction must be in (0, 1]")

    def ramp_limits(self) -> np.ndarray:
        return self.ramp_frac * self.case.gen_array("p_max")

    def estimator_config(self, seed: int) -> EstimatorConfig:
        return EstimatorConfig(
            ridge_k=self.ridge_k,
            forgetting=self.forgetting,
            ensemble=self.ensemble,
            noise_fraction=self.est_noise_fraction,
            seed=seed,
            condition_cap=self.condition_cap,
        )


@dataclass
class MinuteRecord:
    t_min: int
    zeta_true: float
    zeta_est: float
    gen_p: np.ndarray      # setpoint trajectory value at this minute


@dataclass
class SimulationLog:
    minutes: list[MinuteRecord] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def add_event(self, t_s: float, kind: str, **payload) -> None:
        self.events.append({"t_s": float(t_s), "type": kind, **payload})

    def events_of(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["type"] == kind]

    @property
    def triggers(self) -> list[dict]:
        return self.events_of("trigger")

    @property
    def skips(self) -> list[dict]:
        return self.events_of("skip")


def measure_damping(modes: list[Mode], noise_std: float, rng) -> float:
    """Noisy observation of the system's minimum electromechanical damping."""
    true = min_damping_mode(modes).zeta
    z = true + (rng.normal(0.0, noise_std) if noise_std > 0 else 0.0)
    return float(np.clip(z, -0.999999, 0.999999))


def generate_ambient(scenario: Scenario, t_s: float, rng) -> np.ndarray:
    """Per-load instantaneous scaling (applied to both P and Q)."""
    base = scenario.load_profile.value_at(t_s)
    if scenario.load_fluct_std > 0:
        base = base * (1.0 + rng.normal(0.0, scenario.load_fluct_std, base.shape))
    return base


@dataclass
class LoopState:
    scenario: Scenario
    ybus: np.ndarray
    dispatchable: list[int]            # non-slack dispatchable generator indices
    window: SampleWindow
    x_set: np.ndarray                  # committed setpoints at interval start
    dx_interval: np.ndarray            # change being executed this interval
    t2_s: float                        # execution time of that change
    op: OperatingPoint
    modes: list[Mode]
    zeta_meas_hist: list[float]
    prev_feat_x: np.ndarray | None
    prev_zeta_meas: float
    interval: int = 0
    in_round: bool = False             # a sequential-optimization round is active
    rng_ambient: np.random.Generator = None
    rng_jitter: np.random.Generator = None
    rng_zeta: np.random.Generator = None
    log: SimulationLog = field(default_factory=SimulationLog)


def _gen_column_ids(dispatchable: list[int]) -> list[str]:
    return [f"gen{i}" for i in dispatchable]


def _init_state(scenario: Scenario) -> LoopState:
    scenario.validate()
    case = scenario.case
    ybus = build_admittance(case)
    slack = case.slack_gen
    dispatchable = [
        i for i, g in enumerate(case.generators) if g.dispatchable and i != slack
    ]
    x0 = scenario.initial_dispatch.astype(float).copy()
    scale0 = scenario.load_profile.value_at(0.0)
    op = solve_power_flow(case, x0, load_scale=scale0, ybus=ybus)
    modes = eigen_modes(linearize(case, op, load_scale=scale0, ybus=ybus), case)
    seed = scenario.seed
    state = LoopState(
        scenario=scenario,
        ybus=ybus,
        dispatchable=dispatchable,
        window=SampleWindow(_gen_column_ids(dispatchable)),
        x_set=x0,
        dx_interval=np.zeros(case.n_gen),
        t2_s=0.0,
        op=op,
        modes=modes,
        zeta_meas_hist=[],
        prev_feat_x=None,
        prev_zeta_meas=np.nan,
        rng_ambient=np.random.default_rng([seed, 1]),
        rng_jitter=np.random.default_rng([seed, 2]),
        rng_zeta=np.random.default_rng([seed, 3]),
    )
    return state


def _setpoint_at(state: LoopState, t_s: float) -> np.ndarray:
    """Ramped setpoint trajectory within the current interval."""
    t0 = state.interval * state.scenario.t1_s
    if state.t2_s <= 0.0 or t_s - t0 >= state.t2_s:
        return state.x_set + state.dx_interval
    frac = (t_s - t0) / state.t2_s
    return state.x_set + frac * state.dx_interval


def _sample(state: LoopState, t_s: float) -> None:
    """One 1 Hz measurement: ambient power flow, modes, damping sample."""
    sc = state.scenario
    case = sc.case
    setp = _setpoint_at(state, t_s)
    disp = setp.copy()
    if sc.gen_fluct_std > 0:
        cap = case.gen_array("p_max")[state.dispatchable]
        jitter = state.rng_jitter.normal(
            0.0, sc.gen_fluct_std, len(state.dispatchable)
        ) * cap
        lo = case.gen_array("p_min")[state.dispatchable]
        hi = case.gen_array("p_max")[state.dispatchable]
        if sc.reserve:
            hi = hi + 0.2 * cap
            lo = np.maximum(lo - 0.2 * cap, 0.0)
        disp[state.dispatchable] = np.clip(
            disp[state.dispatchable] + jitter, lo, hi
        )
    scale = generate_ambient(sc, t_s, state.rng_ambient)
    try:
        # legality is enforced by the loop itself (reserve-extended window),
        # so the solver's nominal-capacity check is bypassed here
        op = solve_power_flow(
            case, disp, load_scale=scale, v0=state.op, ybus=state.ybus,
            timestamp=t_s, check_limits=False,
        )
    except DivergenceError as exc:
        raise ScenarioAbort(f"power flow diverged at t={t_s:.0f}s: {exc}", state.log)
    modes = eigen_modes(
        linearize(case, op, load_scale=scale, ybus=state.ybus), case
    )
    zeta_meas = measure_damping(modes, sc.zeta_noise_std, state.rng_zeta)

    feat_x = op.gen_p[state.dispatchable]
    boundary = state.interval * sc.t1_s + state.t2_s
    if (
        state.prev_feat_x is not None
        and t_s - sc.sample_period_s >= boundary - 1e-9
    ):
        state.window.push(
            feat_x - state.prev_feat_x, zeta_meas - state.prev_zeta_meas, t_s
        )
    state.prev_feat_x = feat_x
    state.prev_zeta_meas = zeta_meas
    state.op = op
    state.modes = modes
    state.zeta_meas_hist.append(zeta_meas)


def _true_zeta(state: LoopState) -> float:
    return min_damping_mode(state.modes).zeta


def _estimated_zeta(state: LoopState) -> float:
    """Thread-2 output: mean of the last minute of damping samples."""
    hist = state.zeta_meas_hist
    n = max(1, int(round(60.0 / state.scenario.sample_period_s)))
    return float(np.mean(hist[-n:]))


def _feature_arrays(state: LoopState, features: list[Feature]):
    case = state.scenario.case
    p_min = case.gen_array("p_min")
    p_max = case.gen_array("p_max")
    ramp = state.scenario.ramp_limits()
    x_tgt = state.x_set + state.dx_interval
    x = np.array([sum(x_tgt[i] for i in f.generators) for f in features])
    xl = np.array([sum(p_min[i] for i in f.generators) for f in features])
    xu = np.array([sum(p_max[i] for i in f.generators) for f in features])
    rp = np.array([sum(ramp[i] for i in f.generators) for f in features])
    cap = np.array([sum(p_max[i] for i in f.generators) for f in features])
    return x, xl, xu, rp, cap


def _split_to_members(
    state: LoopState, features: list[Feature], dx_feat: np.ndarray
) -> np.ndarray:
    """Distribute a per-feature move onto member generators, proportional
    to each member's headroom in the move's direction."""
    case = state.scenario.case
    p_min = case.gen_array("p_min")
    p_max = case.gen_array("p_max")
    x_tgt = state.x_set + state.dx_interval
    out = np.zeros(case.n_gen)
    for f, dv in zip(features, dx_feat):
        if abs(dv) <= 1e-15:
            continue
        members = list(f.generators)
        if len(members) == 1:
            out[members[0]] = dv
            continue
        if dv > 0:
            head = np.array([p_max[i] - x_tgt[i] for i in members])
        else:
            head = np.array([x_tgt[i] - p_min[i] for i in members])
        head = np.clip(head, 0.0, None)
        tot = head.sum()
        if tot <= 0:
            continue
        for i, hd in zip(members, head):
            out[i] = dv * hd / tot
    return out


def _decide(state: LoopState, t_s: float) -> np.ndarray:
    """Thread-3 decision at a dispatch boundary; returns committed dx_R
    per generator (zeros when not triggered or skipped)."""
    sc = state.scenario
    case = sc.case
    zeros = np.zeros(case.n_gen)
    est = _estimated_zeta(state)
    if est >= sc.threshold:
        if state.in_round:
            state.log.add_event(t_s, "stop", zeta_est=est)
            state.in_round = False
        return zeros

    state.log.add_event(t_s, "trigger", zeta_est=est, zeta_true=_true_zeta(state))
    state.in_round = True

    try:
        target = min_damping_mode(state.modes)
        features = reduce_features(case, target, state.op, sc.feature_budget)
    except (FeatureReductionError, ModeClassificationError) as exc:
        state.log.add_event(t_s, "skip", reason="feature-reduction", detail=str(exc))
        return zeros

    col_of = {cid: k for k, cid in enumerate(state.window.feature_ids)}
    fwin = state.window.aggregated(features, col_of)
    naer_seed = (sc.seed * 1_000_003 + state.interval) % (2**63)
    try:
        estimate = naer_estimate(fwin, sc.estimator_config(naer_seed))
    except EstimationError as exc:
        state.log.add_event(t_s, "skip", reason="estimator-failed", detail=str(exc))
        return zeros
    state.log.add_event(t_s, "estimate", **estimate.as_dict())
    if estimate.flagged:
        state.log.add_event(
            t_s, "skip", reason="ill-conditioned", condition=estimate.condition
        )
        return zeros

    x, xl, xu, rp, cap = _feature_arrays(state, features)
    try:
        bounds = compute_bounds(
            x, xl, xu, rp, reserve=sc.reserve, capacity=cap,
            feature_ids=[f.id for f in features],
        )
    except BoundsError as exc:
        state.log.add_event(t_s, "skip", reason="bounds", detail=str(exc))
        return zeros

    plan = (
        sc.dispatch_profile.increments_between(t_s, t_s + sc.t1_s)
        if sc.dispatch_profile is not None
        else np.zeros(case.n_gen)
    )
    dx_o_feat = np.array([sum(plan[i] for i in f.generators) for f in features])
    if np.any(bounds.at_limit):
        try:
            dx_o_feat = redistribute_planned(dx_o_feat, bounds.at_limit, bounds)
        except RedistributionError as exc:
            state.log.add_event(t_s, "skip", reason="no-headroom", detail=str(exc))
            return zeros

    lp = build_lp(estimate, bounds, dx_o_feat, balance=sc.balance)
    sol = solve_lp(lp)
    state.log.add_event(
        t_s, "solution",
        status=sol.status,
        delta=None if not sol.ok else float(sol.delta),
        dx_r={} if not sol.ok else {
            fid: float(v) for fid, v in zip(sol.feature_ids, sol.dx_r)
        },
        binding=sol.binding,
    )
    if not sol.ok:
        state.log.add_event(t_s, "skip", reason="lp-infeasible")
        return zeros
    if float(np.max(np.abs(sol.dx_r))) <= 1e-9:
        state.log.add_event(t_s, "skip", reason="zero-capacity", delta=float(sol.delta))
        return zeros
    return _split_to_members(state, features, sol.dx_r)


def _apply_planned(state: LoopState, t_s: float, dx_r: np.ndarray) -> np.ndarray:
    """Planned + re-dispatch increments for the next interval, with
    capacity clipping (curtailment) on the planned part."""
    sc = state.scenario
    case = sc.case
    plan = (
        sc.dispatch_profile.increments_between(t_s, t_s + sc.t1_s)
        if sc.dispatch_profile is not None
        else np.zeros(case.n_gen)
    )
    p_min = case.gen_array("p_min")
    p_max = case.gen_array("p_max")
    if sc.reserve:
        cap = case.gen_array("p_max")
        p_max = p_max + 0.2 * cap
        p_min = np.maximum(p_min - 0.2 * cap, 0.0)
    slack = case.slack_gen
    x_now = state.x_set + state.dx_interval
    dx = plan + dx_r
    target = x_now + dx
    for i in range(case.n_gen):
        if i == slack:
            target[i] = x_now[i]  # the slack follows the power flow, not a setpoint
            continue
        clipped = float(np.clip(target[i], p_min[i], p_max[i]))
        if abs(clipped - target[i]) > 1e-9:
            state.log.add_event(
                t_s, "curtail", generator=i + 1,
                requested=float(target[i]), applied=clipped,
            )
        target[i] = clipped
    return target - x_now


def step(state: LoopState, t_s: float) -> LoopState:
    """Advance the loop across one dispatch interval ending at t_s + T1."""
    sc = state.scenario
    t_next = t_s + sc.t1_s
    n_samples = int(round(sc.t1_s / sc.sample_period_s))
    for k in range(1, n_samples + 1):
        ts = t_s + k * sc.sample_period_s
        _sample(state, ts)
        if abs(ts % 60.0) < 1e-9 or abs(ts % 60.0 - 60.0) < 1e-9:
            gen_p = _setpoint_at(state, ts).copy()
            slack = sc.case.slack_gen
            gen_p[slack] = state.op.gen_p[slack]  # the slack has no setpoint
            state.log.minutes.append(
                MinuteRecord(
                    t_min=int(round(ts / 60.0)),
                    zeta_true=_true_zeta(state),
                    zeta_est=_estimated_zeta(state),
                    gen_p=gen_p,
                )
            )

    dx_r = _decide(state, t_next)
    dx_total = _apply_planned(state, t_next, dx_r)

    state.x_set = state.x_set + state.dx_interval
    state.dx_interval = dx_total
    rate = state.scenario.ramp_limits() / (sc.ramp_exec_fraction * sc.t1_s)
    with np.errstate(divide="ignore", invalid="ignore"):
        times = np.where(rate > 0, np.abs(dx_total) / rate, 0.0)
    state.t2_s = float(np.max(times)) if len(times) else 0.0
    state.interval += 1
    state.window.set_boundary(state.interval * sc.t1_s + state.t2_s)
    return state


def run(scenario: Scenario) -> SimulationLog:
    """Run the closed loop over the whole horizon; the log is a pure
    function of (scenario, seed)."""
    if scenario.horizon_s <= 0:
        return SimulationLog()
    state = _init_state(scenario)
    gen_p0 = state.x_set.copy()
    gen_p0[scenario.case.slack_gen] = state.op.gen_p[scenario.case.slack_gen]
    state.log.minutes.append(
        MinuteRecord(
            t_min=0,
            zeta_true=_true_zeta(state),
            zeta_est=_true_zeta(state),
            gen_p=gen_p0,
        )
    )
    # first sample at t=0 so differencing can start at the first second
    _sample_initial(state)
    n_intervals = int(round(scenario.horizon_s / scenario.t1_s))
    for k in range(n_intervals):
        step(state, k * scenario.t1_s)
    return state.log


def _sample_initial(state: LoopState) -> None:
    state.prev_feat_x = state.op.gen_p[state.dispatchable]
    state.prev_zeta_meas = measure_damping(
        state.modes, state.scenario.zeta_noise_std, state.rng_zeta
    )
    state.zeta_meas_hist.append(state.prev_zeta_meas)


def collect_window(
    scenario: Scenario,
    duration_s: float,
    dispatch: np.ndarray | None = None,
) -> SampleWindow:
    """Collect a measurement window at a held operating point.

    Runs the 1 Hz sampling machinery (ambient fluctuation, generator
    jitter, noisy damping oracle) for ``duration_s`` seconds without any
    dispatch moves, and returns the per-generator sample window. Used to
    record estimation windows for offline study and tests.
    """
    state = _init_state(scenario)
    if dispatch is not None:
        state.x_set = np.asarray(dispatch, dtype=float).copy()
        scale0 = scenario.load_profile.value_at(0.0)
        state.op = solve_power_flow(
            scenario.case, state.x_set, load_scale=scale0, ybus=state.ybus
        )
        state.modes = eigen_modes(
            linearize(scenario.case, state.op, load_scale=scale0, ybus=state.ybus),
            scenario.case,
        )
    _sample_initial(state)
    n = int(round(duration_s / scenario.sample_period_s))
    for k in range(1, n + 1):
        _sample(state, k * scenario.sample_period_s)
    return state.window

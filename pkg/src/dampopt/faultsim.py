"""Nonlinear time-domain simulation of the classical model and
log-decrement damping estimation from ring-down trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkCase, OperatingPoint, build_admittance
from .smallsignal import ReducedModel, reduce_to_internal

__all__ = [
    "FaultSpec",
    "Trajectory",
    "DampingEstimationError",
    "fault_simulate",
    "trajectory_damping",
]

FAULT_SHUNT = 1e6 + 0j        # near-short admittance applied at the faulted bus
INSTABILITY_RAD = 10.0        # relative-angle excursion treated as blow-up


class DampingEstimationError(RuntimeError):
    """Trajectory unsuitable for log-decrement estimation."""


@dataclass(frozen=True)
class FaultSpec:
    bus: int
    t_start: float        # s
    t_clear: float        # s
    horizon: float        # s
    step: float = 0.001   # s

    def validate(self, case: NetworkCase) -> None:
        if self.bus not in {b.id for b in case.buses}:
            raise ValueError(f"fault bus {self.bus} does not exist")
        # duration 0 is the degenerate no-fault limit and is allowed
        dur = self.t_clear - self.t_start
        if not (0.0 <= dur <= 0.3):
            raise ValueError(f"fault duration must be in [0, 0.3] s, got {dur}")
        if self.step > 0.01 or self.step <= 0.0:
            raise ValueError("integration step must be in (0, 0.01] s")
        if self.horizon <= self.t_clear:
            raise ValueError("horizon must extend past the clearing time")


@dataclass
class Trajectory:
    t: np.ndarray          # sample times, s
    delta: np.ndarray      # rotor angles, rad (n_samples x n_gen)
    omega: np.ndarray      # speed deviation, p.u. (n_samples x n_gen)
    stable: bool

    def relative_angle(self, i: int, j: int, centered: bool = True,
                       normalized: bool = True) -> np.ndarray:
        """delta_i - delta_j, optionally centered on its pre-event value
        and scaled so the largest excursion is 1."""
        d = self.delta[:, i] - self.delta[:, j]
        if centered:
            d = d - d[0]
        if normalized:
            peak = np.max(np.abs(d))
            if peak > 0:
                d = d / peak
        return d


def _rk4_segment(model: ReducedModel, m2h: np.ndarray, dmp: np.ndarray,
                 omega_s: float, delta: np.ndarray, omega: np.ndarray,
                 n_steps: int, dt: float, out_d: list, out_w: list):
    def rhs(d, w):
        pe = model.electrical_power(d)
        return omega_s * w, (model.p_mech - pe - dmp * w) / m2h

    for _ in range(n_steps):
        k1d, k1w = rhs(delta, omega)
        k2d, k2w = rhs(delta + 0.5 * dt * k1d, omega + 0.5 * dt * k1w)
        k3d, k3w = rhs(delta + 0.5 * dt * k2d, omega + 0.5 * dt * k2w)
        k4d, k4w = rhs(delta + dt * k3d, omega + dt * k3w)
        delta = delta + dt / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d)
        omega = omega + dt / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
        out_d.append(delta)
        out_w.append(omega)
    return delta, omega


def fault_simulate(
    case: NetworkCase,
    op: OperatingPoint,
    fault: FaultSpec,
    load_scale=None,
) -> Trajectory:
    """Integrate the swing equations through a three-phase fault.

    The faulted bus receives a near-short shunt during [t_start, t_clear)
    and the pre-fault network is restored afterwards. Fixed-step RK4; the
    step grid is segmented at the switching instants so no step straddles
    a discontinuity. On blow-up (relative angle excursion beyond 10 rad)
    the trajectory is truncated and flagged unstable.
    """
    fault.validate(case)
    ybus = build_admittance(case)
    pre = reduce_to_internal(case, op, load_scale=load_scale, ybus=ybus)
    flt = reduce_to_internal(
        case, op, load_scale=load_scale, ybus=ybus,
        extra_shunt={fault.bus: FAULT_SHUNT},
    )
    flt.p_mech = pre.p_mech  # mechanical power frozen at the pre-fault value

    m2h = 2.0 * case.gen_array("h")
    dmp = case.gen_array("d")
    ws = case.omega_s
    dt = fault.step

    delta = pre.delta0.copy()
    omega = np.zeros(case.n_gen)
    out_d: list[np.ndarray] = [delta.copy()]
    out_w: list[np.ndarray] = [omega.copy()]

    segments = [
        (pre, fault.t_start),
        (flt, fault.t_clear - fault.t_start),
        (pre, fault.horizon - fault.t_clear),
    ]
    d0_rel = delta - delta[0]
    stable = True
    for model, length in segments:
        n_steps = int(round(length / dt))
        delta, omega = _rk4_segment(
            model, m2h, dmp, ws, delta, omega, n_steps, dt, out_d, out_w
        )
        rel = (delta - delta[0]) - d0_rel
        if np.max(np.abs(rel)) > INSTABILITY_RAD:
            stable = False
            break

    d = np.asarray(out_d)
    w = np.asarray(out_w)
    if not stable:
        # truncate at the first blow-up sample
        rel = (d - d[:, [0]]) - d0_rel[None, :]
        bad = np.flatnonzero(np.max(np.abs(rel), axis=1) > INSTABILITY_RAD)
        cut = int(bad[0]) + 1 if bad.size else d.shape[0]
        d, w = d[:cut], w[:cut]
    t = np.arange(d.shape[0]) * dt
    return Trajectory(t=t, delta=d, omega=w, stable=stable)


def trajectory_damping(
    t: np.ndarray,
    series: np.ndarray,
    freq_hint_hz: float,
) -> float:
    """Log-decrement damping ratio from successive positive peaks.

    The series should be a post-clearing oscillation (at least three
    cycles); the frequency hint sets the minimum peak spacing so that
    noise and higher-frequency ripple are not picked as peaks. For each
    adjacent positive-peak pair, zeta = ln(p_k/p_{k+1}) /
    sqrt(4 pi^2 + ln^2(p_k/p_{k+1})); the mean over pairs is returned.
    """
    series = np.asarray(series, dtype=float)
    if series.size < 8:
        raise DampingEstimationError("series too short")
    # remove any residual offset so peak amplitudes are swing amplitudes
    x = series - np.mean(series)

    dt = float(t[1] - t[0])
    min_gap = max(1, int(round(0.5 / freq_hint_hz / dt)))
    peaks: list[int] = []
    k = 1
    n = x.size
    while k < n - 1:
        if x[k] > 0 and x[k] >= x[k - 1] and x[k] > x[k + 1]:
            if peaks and k - peaks[-1] < min_gap:
                if x[k] > x[peaks[-1]]:
                    peaks[-1] = k
            else:
                peaks.append(k)
        k += 1
    # genuine oscillation peaks only; ignore flat tail ripple
    if peaks:
        ceiling = max(x[p] for p in peaks)
        peaks = [p for p in peaks if x[p] > 1e-6 * max(1.0, ceiling)]
    if len(peaks) < 2:
        raise DampingEstimationError(
            f"need at least 2 positive peaks, found {len(peaks)}"
        )
    zetas = []
    for a, b in zip(peaks[:-1], peaks[1:]):
        ratio = x[a] / x[b]
        if ratio <= 0:
            continue
        ln = np.log(ratio)
        zetas.append(ln / np.sqrt(4.0 * np.pi**2 + ln * ln))
    if not zetas:
        raise DampingEstimationError("no usable peak pairs")
    return float(np.mean(zetas))

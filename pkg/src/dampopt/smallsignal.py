"""Classical-model linearization, electromechanical modes and the
model-based perturbation sensitivity oracle.

Machines are second-order (constant EMF behind the transient reactance)
with speed damping. Loads are converted to constant shunt admittances at
the operating point and the network is Kron-reduced to the generator
internal nodes, so the state vector is (delta_1..delta_n, omega_1..omega_n)
with omega in per-unit speed deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (
    DispatchLimitError,
    NetworkCase,
    OperatingPoint,
    build_admittance,
    solve_power_flow,
)

__all__ = [
    "StateMatrix",
    "Mode",
    "ReductionError",
    "ModeClassificationError",
    "ModeTrackingError",
    "ReducedModel",
    "reduce_to_internal",
    "linearize",
    "eigen_modes",
    "min_damping_mode",
    "perturbation_sensitivity",
]

EM_BAND_HZ = (0.1, 3.0)          # electromechanical frequency band
SHAPE_SIGNIFICANT = 0.2          # relative magnitude for grouping shape entries
TRACK_CORRELATION_MIN = 0.8      # eigenvector match threshold under perturbation


class ReductionError(RuntimeError):
    """Kron reduction failed (isolated or degenerate generator node)."""


class ModeClassificationError(ValueError):
    """No electromechanical mode available where one is required."""


class ModeTrackingError(RuntimeError):
    """Mode lost while matching eigenvectors across a perturbation."""


@dataclass
class ReducedModel:
    """Network reduced to generator internal nodes at one operating point."""

    y_red: np.ndarray   # n_gen x n_gen complex admittance between internal nodes
    emf: np.ndarray     # internal EMF phasors
    p_mech: np.ndarray  # mechanical input = electrical power at equilibrium

    @property
    def delta0(self) -> np.ndarray:
        return np.angle(self.emf)

    def electrical_power(self, delta: np.ndarray) -> np.ndarray:
        e = np.abs(self.emf) * np.exp(1j * delta)
        return (e * np.conj(self.y_red @ e)).real


@dataclass
class StateMatrix:
    a: np.ndarray                   # 2n x 2n, states (ddelta..., domega...)
    op: OperatingPoint
    n_gen: int

    @property
    def delta_rows(self) -> slice:
        return slice(0, self.n_gen)

    @property
    def omega_rows(self) -> slice:
        return slice(self.n_gen, 2 * self.n_gen)


@dataclass
class Mode:
    eigenvalue: complex             # sigma + j omega, omega > 0
    zeta: float                     # damping ratio
    freq_hz: float
    shape: np.ndarray               # rotor-speed right-eigenvector entries
    participation: np.ndarray       # |p_i| over the rotor-speed states
    classification: str             # "inter-area" | "local" | "non-electromechanical"

    @property
    def sigma(self) -> float:
        return self.eigenvalue.real

    @property
    def omega(self) -> float:
        return self.eigenvalue.imag

    @property
    def electromechanical(self) -> bool:
        return self.classification in ("inter-area", "local")


def damping_ratio(lam: complex) -> float:
    mag = abs(lam)
    if mag == 0.0:
        return 0.0
    return -lam.real / mag


def _gen_bus_power(case: NetworkCase, op: OperatingPoint, load_scale=None):
    """Per-generator complex power at the terminals, splitting co-located
    units: P by actual output, Q by capacity share."""
    idx = case.bus_index()
    nl_p = np.array([ld.p for ld in case.loads])
    nl_q = np.array([ld.q for ld in case.loads])
    if load_scale is not None:
        s = np.asarray(load_scale, dtype=float)
        if s.ndim == 0:
            s = np.full(len(case.loads), float(s))
        if s.ndim == 1:
            nl_p, nl_q = nl_p * s, nl_q * s
        else:
            nl_p, nl_q = nl_p * s[:, 0], nl_q * s[:, 1]
    bus_load_p = np.zeros(case.n_bus)
    bus_load_q = np.zeros(case.n_bus)
    for k, ld in enumerate(case.loads):
        bus_load_p[idx[ld.bus]] += nl_p[k]
        bus_load_q[idx[ld.bus]] += nl_q[k]

    p = op.gen_p.copy()
    q = np.zeros(case.n_gen)
    cap = case.gen_array("p_max")
    for b in {g.bus for g in case.generators}:
        members = [i for i, g in enumerate(case.generators) if g.bus == b]
        qb = op.q_inj[idx[b]] + bus_load_q[idx[b]]
        share = cap[members] / cap[members].sum()
        for m, sh in zip(members, share):
            q[m] = qb * sh
    return p, q, bus_load_p, bus_load_q


def reduce_to_internal(
    case: NetworkCase,
    op: OperatingPoint,
    load_scale=None,
    ybus: np.ndarray | None = None,
    extra_shunt: dict[int, complex] | None = None,
) -> ReducedModel:
    """Kron-reduce the network (loads as constant impedances) to the
    generator internal nodes behind x_d'.

    ``extra_shunt`` maps bus id to an additional shunt admittance; fault
    simulation uses it to place the near-short at the faulted bus.
    """
    idx = case.bus_index()
    n, ng = case.n_bus, case.n_gen
    y = build_admittance(case) if ybus is None else ybus

    gp, gq, blp, blq = _gen_bus_power(case, op, load_scale)
    vc = op.vm * np.exp(1j * op.va)

    y_aug = np.zeros((n + ng, n + ng), dtype=complex)
    y_aug[:n, :n] = y
    # constant-impedance loads from the solved voltages
    for b in range(n):
        if blp[b] != 0.0 or blq[b] != 0.0:
            y_aug[b, b] += (blp[b] - 1j * blq[b]) / op.vm[b] ** 2
    if extra_shunt:
        for bid, ysh in extra_shunt.items():
            y_aug[idx[bid], idx[bid]] += ysh

    emf = np.zeros(ng, dtype=complex)
    for i, g in enumerate(case.generators):
        b = idx[g.bus]
        v = vc[b]
        ig = np.conj(complex(gp[i], gq[i]) / v)
        emf[i] = v + 1j * g.xdp * ig
        yg = 1.0 / (1j * g.xdp)
        y_aug[b, b] += yg
        y_aug[n + i, n + i] += yg
        y_aug[b, n + i] -= yg
        y_aug[n + i, b] -= yg

    try:
        y_red = y_aug[n:, n:] - y_aug[n:, :n] @ np.linalg.solve(
            y_aug[:n, :n], y_aug[:n, n:]
        )
    except np.linalg.LinAlgError as exc:
        raise ReductionError("network matrix singular during Kron reduction") from exc
    if not np.all(np.isfinite(y_red)):
        raise ReductionError("non-finite entries after Kron reduction")

    model = ReducedModel(y_red=y_red, emf=emf, p_mech=np.zeros(ng))
    model.p_mech = model.electrical_power(model.delta0)
    return model


def synchronizing_matrix(model: ReducedModel) -> np.ndarray:
    """dP_e/ddelta at the equilibrium angles."""
    e = np.abs(model.emf)
    d = model.delta0
    g = model.y_red.real
    b = model.y_red.imag
    ng = len(e)
    k = np.zeros((ng, ng))
    for i in range(ng):
        for m in range(ng):
            if m == i:
                continue
            dim = d[i] - d[m]
            k[i, m] = e[i] * e[m] * (g[i, m] * np.sin(dim) - b[i, m] * np.cos(dim))
            k[i, i] += e[i] * e[m] * (-g[i, m] * np.sin(dim) + b[i, m] * np.cos(dim))
    return k


def linearize(
    case: NetworkCase,
    op: OperatingPoint,
    load_scale=None,
    ybus: np.ndarray | None = None,
) -> StateMatrix:
    """Build the swing-equation state matrix about a converged operating point.

    State ordering is (ddelta_1..n, domega_1..n); the upper-right block is
    omega_s * I and the lower blocks follow
    2 H_i domega_i/dt = -sum_k K_ik ddelta_k - D_i domega_i.
    """
    model = reduce_to_internal(case, op, load_scale=load_scale, ybus=ybus)
    k = synchronizing_matrix(model)
    ng = case.n_gen
    m = 2.0 * case.gen_array("h")
    dmp = case.gen_array("d")
    a = np.zeros((2 * ng, 2 * ng))
    a[:ng, ng:] = case.omega_s * np.eye(ng)
    a[ng:, :ng] = -k / m[:, None]
    a[ng:, ng:] = -np.diag(dmp / m)
    return StateMatrix(a=a, op=op, n_gen=ng)


def _classify(
    case: NetworkCase, freq_hz: float, shape: np.ndarray, part: np.ndarray, total_part: float
) -> str:
    if not (EM_BAND_HZ[0] <= freq_hz <= EM_BAND_HZ[1]):
        return "non-electromechanical"
    if total_part > 0 and part.sum() / total_part < 0.25:
        return "non-electromechanical"
    ref = shape[np.argmax(np.abs(shape))]
    rel = shape / ref
    sig = np.abs(rel) >= SHAPE_SIGNIFICANT
    pos = [i for i in np.flatnonzero(sig) if rel[i].real > 0.0]
    neg = [i for i in np.flatnonzero(sig) if rel[i].real <= 0.0]
    if not pos or not neg:
        return "local"
    areas_pos = {case.generators[i].area for i in pos}
    areas_neg = {case.generators[i].area for i in neg}
    if areas_pos.isdisjoint(areas_neg) and len(areas_pos | areas_neg) >= 2:
        return "inter-area"
    return "local"


def eigen_modes(a: StateMatrix, case: NetworkCase) -> list[Mode]:
    """Eigen-decompose the state matrix into oscillatory modes.

    Conjugate pairs are deduplicated (only the omega > 0 member is kept),
    shapes are the rotor-speed eigenvector entries normalized so the
    largest-magnitude component is 1 at angle 0, and participation factors
    combine right and left eigenvectors.
    """
    if not np.all(np.isfinite(a.a)):
        raise ValueError("state matrix contains non-finite entries")
    lam, vr = np.linalg.eig(a.a)
    try:
        vl = np.linalg.inv(vr).conj().T  # rows of inv(vr) are left eigenvectors
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError("eigenvector matrix is singular") from exc

    ng = a.n_gen
    modes: list[Mode] = []
    for i in range(len(lam)):
        if lam[i].imag <= 1e-9:
            continue
        shape = vr[ng:, i].copy()
        ref = shape[np.argmax(np.abs(shape))]
        if ref != 0:
            shape = shape / ref
        p_all = np.abs(vr[:, i] * np.conj(vl[:, i]))
        part = p_all[ng:]
        zeta = damping_ratio(lam[i])
        freq = lam[i].imag / (2.0 * np.pi)
        cls = _classify(case, freq, shape, part, float(p_all.sum()))
        modes.append(
            Mode(
                eigenvalue=complex(lam[i]),
                zeta=zeta,
                freq_hz=freq,
                shape=shape,
                participation=part,
                classification=cls,
            )
        )
    modes.sort(key=lambda m: m.freq_hz)
    return modes


def min_damping_mode(modes: list[Mode]) -> Mode:
    """The electromechanical mode with minimal damping ratio.

    Ties (within 1e-12) go to the lower frequency.
    """
    em = [m for m in modes if m.electromechanical]
    if not em:
        raise ModeClassificationError("no electromechanical mode in the set")
    return min(em, key=lambda m: (round(m.zeta / 1e-12) * 1e-12, m.freq_hz))


def _match_mode(target_shape: np.ndarray, modes: list[Mode]) -> Mode:
    best, best_c = None, -1.0
    t = target_shape / np.linalg.norm(target_shape)
    for m in modes:
        v = m.shape / np.linalg.norm(m.shape)
        c = abs(np.vdot(v, t))
        if c > best_c:
            best, best_c = m, c
    if best is None or best_c < TRACK_CORRELATION_MIN:
        raise ModeTrackingError(
            f"mode lost under perturbation (best correlation {best_c:.3f})"
        )
    return best


def perturbation_sensitivity(
    case: NetworkCase,
    op: OperatingPoint,
    features: list[tuple[str, tuple[int, ...]]],
    h: float = 0.01,
    mode: Mode | None = None,
    load_scale=None,
    zeta_fn=None,
) -> np.ndarray:
    """Model-based finite-difference sensitivity of the tracked mode's
    damping ratio to each feature's active power.

    ``features`` is a list of (feature id, generator indices); a feature's
    perturbation h is split equally over its member generators, with the
    slack generator absorbing the balance. Central differences are used
    when both signs stay within the members' capacity windows, otherwise
    a one-sided difference. ``zeta_fn`` substitutes the whole
    dispatch -> zeta evaluation (used to validate the affine contract).
    """
    base = op.gen_p.copy()
    slack = case.slack_gen

    if zeta_fn is None:
        ybus = build_admittance(case)
        if mode is None:
            mode = min_damping_mode(eigen_modes(linearize(case, op, load_scale, ybus), case))
        target = mode.shape

        def evaluate(disp: np.ndarray) -> float:
            op2 = solve_power_flow(case, disp, load_scale=load_scale, v0=op, ybus=ybus)
            ms = eigen_modes(linearize(case, op2, load_scale, ybus), case)
            return _match_mode(target, ms).zeta

        zeta0 = mode.zeta
    else:
        evaluate = zeta_fn
        zeta0 = zeta_fn(base)

    psi = np.zeros(len(features))
    for k, (_fid, members) in enumerate(features):
        if slack in members:
            raise ValueError("slack generator cannot be a perturbation feature")
        step = h / len(members)
        up_ok = all(
            base[i] + step <= case.generators[i].p_max + 1e-12 for i in members
        )
        down_ok = all(
            base[i] - step >= case.generators[i].p_min - 1e-12 for i in members
        )

        def perturbed(sign: float) -> np.ndarray:
            d = base.copy()
            for i in members:
                d[i] += sign * step
            d[slack] -= sign * h  # keep the perturbation a valid power flow
            return d

        if up_ok and down_ok:
            psi[k] = (evaluate(perturbed(+1.0)) - evaluate(perturbed(-1.0))) / (2.0 * h)
        elif up_ok:
            psi[k] = (evaluate(perturbed(+1.0)) - zeta0) / h
        elif down_ok:
            psi[k] = (zeta0 - evaluate(perturbed(-1.0))) / h
        else:
            raise DispatchLimitError(
                f"feature {_fid}: no room for a +/-{h} perturbation"
            )
    return psi
